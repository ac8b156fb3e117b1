//! Synthetic corpus of one-line Python-like functions with template
//! summaries, plus a small assignment sample used in docs and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::{Ast, AstNode, LEAF_PREFIX};
use crate::corpus::{split_identifier, AstRef, Sample};

const VERBS: [&str; 10] = ["compute", "get", "update", "load", "find", "check", "build", "parse", "read", "make"];
const NOUNS: [&str; 10] = ["total", "value", "name", "size", "count", "path", "index", "result", "score", "item"];
const ARGS: [&str; 12] = [
    "item_count", "price", "userName", "fileSize", "maxValue", "index", "data", "key", "config", "rate", "offset",
    "buffer",
];
const METHODS: [&str; 8] = ["strip", "lower", "copy", "keys", "items", "sort", "clear", "popItem"];
const ATTRS: [&str; 7] = ["count", "name", "value", "size", "path", "mode", "state"];
const OPS: [(&str, &str); 4] = [("+", "adding"), ("-", "subtracting"), ("*", "multiplying"), ("/", "dividing")];

/// Tree under construction; flattened in pre-order.
enum T {
    N(&'static str, Vec<T>),
    L(String),
}

fn leaf(v: &str) -> T {
    T::L(v.to_string())
}

fn name(v: &str) -> T {
    T::N("Name", vec![leaf(v)])
}

fn flatten(t: &T, nodes: &mut Vec<AstNode>) -> usize {
    let id = nodes.len();
    match t {
        T::L(v) => nodes.push(AstNode {
            id,
            label: format!("{LEAF_PREFIX}{v}"),
            children: vec![],
        }),
        T::N(label, kids) => {
            nodes.push(AstNode {
                id,
                label: label.to_string(),
                children: vec![],
            });
            let ids: Vec<usize> = kids.iter().map(|k| flatten(k, nodes)).collect();
            nodes[id].children = ids;
        }
    }
    id
}

fn to_ast(t: &T) -> Ast {
    let mut nodes = Vec::new();
    flatten(t, &mut nodes);
    Ast { nodes }
}

fn words(ident: &str) -> String {
    split_identifier(ident).join(" ")
}

fn function_name<R: Rng>(rng: &mut R) -> (String, String, String) {
    let verb = *VERBS.choose(rng).unwrap();
    let noun = *NOUNS.choose(rng).unwrap();
    let ident = if rng.gen_bool(0.5) {
        format!("{verb}_{noun}")
    } else {
        let mut cs = noun.chars();
        let head = cs.next().unwrap().to_ascii_uppercase();
        format!("{verb}{head}{}", cs.as_str())
    };
    (ident, verb.to_string(), noun.to_string())
}

fn two_args<R: Rng>(rng: &mut R) -> (&'static str, &'static str) {
    let mut picked = ARGS.choose_multiple(rng, 2);
    (picked.next().unwrap(), picked.next().unwrap())
}

fn def(f: &str, args: &[&str], body: T) -> T {
    let params = args.iter().map(|a| T::N("arg", vec![leaf(a)])).collect();
    T::N("FunctionDef", vec![leaf("def"), leaf(f), T::N("arguments", params), body])
}

/// One random toy sample.
pub fn toy_sample<R: Rng>(rng: &mut R, id: &str) -> Sample {
    let (f, verb, noun) = function_name(rng);
    let (code, summary, tree) = match rng.gen_range(0..5) {
        0 => {
            let (a, b) = two_args(rng);
            let (op, op_word) = *OPS.choose(rng).unwrap();
            let body = T::N(
                "Return",
                vec![leaf("return"), T::N("BinOp", vec![name(a), leaf(op), name(b)])],
            );
            (
                format!("def {f}({a}, {b}): return {a} {op} {b}"),
                format!("{verb} the {noun} by {op_word} {} and {}", words(a), words(b)),
                def(&f, &[a, b], body),
            )
        }
        1 => {
            let a = *ARGS.choose(rng).unwrap();
            let m = *METHODS.choose(rng).unwrap();
            let call = T::N("Call", vec![T::N("Attribute", vec![name(a), leaf(m)])]);
            (
                format!("def {f}({a}): return {a}.{m}()"),
                format!("{verb} the {noun} with {} of {}", words(m), words(a)),
                def(&f, &[a], T::N("Return", vec![leaf("return"), call])),
            )
        }
        2 => {
            let a = *ARGS.choose(rng).unwrap();
            let attr = *ATTRS.choose(rng).unwrap();
            let body = T::N(
                "Assign",
                vec![T::N("Attribute", vec![name("self"), leaf(attr)]), leaf("="), name(a)],
            );
            (
                format!("def {f}(self, {a}): self.{attr} = {a}"),
                format!("set the {attr} to {}", words(a)),
                def(&f, &["self", a], body),
            )
        }
        3 => {
            let (a, b) = two_args(rng);
            let (cmp, which) = if rng.gen_bool(0.5) { (">", "larger") } else { ("<", "smaller") };
            let test = T::N("Compare", vec![name(a), leaf(cmp), name(b)]);
            let body = T::N("Return", vec![leaf("return"), T::N("IfExp", vec![test, name(a), name(b)])]);
            (
                format!("def {f}({a}, {b}): return {a} if {a} {cmp} {b} else {b}"),
                format!("return the {which} of {} and {}", words(a), words(b)),
                def(&f, &[a, b], body),
            )
        }
        _ => {
            let a = *ARGS.choose(rng).unwrap();
            let call = T::N("Call", vec![name("len"), name(a)]);
            (
                format!("def {f}({a}): return len({a})"),
                format!("count the {}", words(a)),
                def(&f, &[a], T::N("Return", vec![leaf("return"), call])),
            )
        }
    };
    Sample {
        id: id.to_string(),
        code,
        summary,
        ast: AstRef::Inline(to_ast(&tree)),
    }
}

/// Size and seed of the bundled `data/toy.jsonl`.
pub const TOY_SIZE: usize = 200;
pub const TOY_SEED: u64 = 1;

/// `n` seeded toy samples with ids `toy-0000`, `toy-0001`, ...
pub fn toy_corpus(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| toy_sample(&mut rng, &format!("toy-{i:04}"))).collect()
}

/// `this.count = value;` with leaves `count` (node 2) and `value` (node 3),
/// which match tokens 2 and 4.
pub fn fig5_sample() -> Sample {
    let tree = T::N(
        "Assignment",
        vec![T::N("MemberReference", vec![leaf("count")]), leaf("value")],
    );
    Sample {
        id: "assign-count".into(),
        code: "this.count = value;".into(),
        summary: "set the count field".into(),
        ast: AstRef::Inline(to_ast(&tree)),
    }
}
