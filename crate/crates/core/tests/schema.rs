mod common;

use std::fs;
use std::path::Path;

use codesum::align::build_match_map;
use codesum::ast::{leaf_ids, Ast, AstError};
use codesum::corpus::{load_dataset, split_dataset, tokenize_code, write_dataset, AstRef, Sample};
use codesum::toy::{fig5_sample, toy_corpus, TOY_SEED, TOY_SIZE};
use codesum::Error;

fn data_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data"))
}

#[test]
fn bundled_corpora_match_their_generators() {
    assert_eq!(load_dataset(&data_dir().join("toy.jsonl")).unwrap(), toy_corpus(TOY_SIZE, TOY_SEED));
    assert_eq!(load_dataset(&data_dir().join("fig5.jsonl")).unwrap(), vec![fig5_sample()]);
}

#[test]
fn record_field_names_are_fixed() {
    let line = serde_json::to_value(fig5_sample()).unwrap();
    let keys: Vec<&String> = line.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["ast", "code", "id", "summary"]);
    let node = &line["ast"]["nodes"][0];
    let mut fields: Vec<&String> = node.as_object().unwrap().keys().collect();
    fields.sort();
    assert_eq!(fields, ["children", "id", "label"]);
}

/// A Python one-liner in the shape an external extractor emits: pre-order
/// ids, grammar names on internal nodes, lexemes behind the leaf prefix.
const PYTHON_RECORD: &str = r#"{"id":"py-1","code":"def get_image_file_path(self): return self.image_path","summary":"Get the path of the image file.","ast":{"nodes":[
 {"id":0,"label":"FunctionDef","children":[1,2,3,6]},
 {"id":1,"label":"ter_def","children":[]},
 {"id":2,"label":"ter_get_image_file_path","children":[]},
 {"id":3,"label":"arguments","children":[4]},
 {"id":4,"label":"arg","children":[5]},
 {"id":5,"label":"ter_self","children":[]},
 {"id":6,"label":"Return","children":[7,8]},
 {"id":7,"label":"ter_return","children":[]},
 {"id":8,"label":"Attribute","children":[9,11]},
 {"id":9,"label":"Name","children":[10]},
 {"id":10,"label":"ter_self","children":[]},
 {"id":11,"label":"ter_image_path","children":[]}]}}"#;

#[test]
fn extractor_style_record_loads_and_aligns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("py.jsonl");
    fs::write(&path, PYTHON_RECORD.replace('\n', "")).unwrap();
    let samples = load_dataset(&path).unwrap();
    let ast = samples[0].ast().unwrap().validate().unwrap();
    assert_eq!(leaf_ids(&ast), vec![1, 2, 5, 7, 10, 11]);
    let tokens = tokenize_code(&samples[0].code);
    let map = build_match_map(&ast, &tokens);
    assert_eq!(&tokens.0[1..5], ["get", "image", "file", "path"]);
    assert_eq!(map.get(2), Some((1, 5)));
    assert_eq!(map.get(11), Some((12, 14)));
    assert_eq!(map, common_map(&ast, &tokens.0));
}

fn common_map(ast: &Ast, tokens: &[String]) -> codesum::align::MatchMap {
    let mut m = codesum::align::MatchMap::new();
    for (k, v) in common::brute_force_match(ast, tokens) {
        m.insert(k, v);
    }
    m
}

#[test]
fn ast_files_are_resolved_relative_to_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("asts")).unwrap();
    let s = fig5_sample();
    fs::write(dir.path().join("asts/a.json"), serde_json::to_string(s.ast().unwrap()).unwrap()).unwrap();
    let by_ref = Sample {
        ast: AstRef::Path("asts/a.json".into()),
        ..s.clone()
    };
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &[by_ref]).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), vec![s]);
    fs::remove_file(dir.path().join("asts/a.json")).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Io { .. })));
}

#[test]
fn malformed_lines_report_their_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let good = serde_json::to_string(&fig5_sample()).unwrap();
    fs::write(&path, format!("{good}\n\n{{\"id\":\"x\",\"code\":\"a\"}}\n")).unwrap();
    match load_dataset(&path) {
        Err(Error::Data(m)) => assert!(m.contains(":3:"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_dataset(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
}

#[test]
fn empty_summaries_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let blank = Sample {
        summary: "  ".into(),
        ..fig5_sample()
    };
    write_dataset(&path, &[blank, fig5_sample()]).unwrap();
    assert_eq!(load_dataset(&path).unwrap().len(), 1);
}

fn ast(json: &str) -> Ast {
    serde_json::from_str(json).unwrap()
}

#[test]
fn schema_violations_are_reported() {
    let cases = [
        (r#"{"nodes":[]}"#, "empty"),
        (r#"{"nodes":[{"id":0,"label":"A","children":[1]},{"id":1,"label":"ter_x","children":[0]}]}"#, "cycle"),
        (r#"{"nodes":[{"id":0,"label":"A","children":[2]},{"id":1,"label":"ter_x","children":[]}]}"#, "range"),
        (r#"{"nodes":[{"id":0,"label":"ter_a","children":[]},{"id":1,"label":"ter_b","children":[]}]}"#, "roots"),
        (r#"{"nodes":[{"id":0,"label":"A","children":[1,2]},{"id":1,"label":"B","children":[2]},{"id":2,"label":"ter_x","children":[]}]}"#, "parents"),
        (r#"{"nodes":[{"id":0,"label":"A","children":[]}]}"#, "prefix"),
        (r#"{"nodes":[{"id":0,"label":"A","children":[2,1]},{"id":1,"label":"ter_a","children":[]},{"id":2,"label":"ter_b","children":[]}]}"#, "order"),
    ];
    for (json, what) in cases {
        let err = ast(json).validate().unwrap_err();
        let ok = match what {
            "empty" => err == AstError::Empty,
            "cycle" | "parents" => matches!(err, AstError::CycleError(_)),
            "range" => matches!(err, AstError::ChildOutOfRange { .. }),
            "roots" => matches!(err, AstError::MultipleRoots(_)),
            "prefix" => matches!(err, AstError::LeafPrefixViolation { .. }),
            _ => matches!(err, AstError::BadIdOrder(_)),
        };
        assert!(ok, "{what}: {err:?}");
    }
}

#[test]
fn split_is_seeded_and_deduplicated() {
    let mut samples = toy_corpus(100, 4);
    samples.push(Sample {
        id: "dup".into(),
        ..samples[0].clone()
    });
    let a = split_dataset(samples.clone(), [0.8, 0.1, 0.1], 9).unwrap();
    assert_eq!(a, split_dataset(samples.clone(), [0.8, 0.1, 0.1], 9).unwrap());
    assert_ne!(a, split_dataset(samples.clone(), [0.8, 0.1, 0.1], 10).unwrap());
    let train: Vec<&str> = a.train.iter().map(|s| s.code.as_str()).collect();
    for s in a.valid.iter().chain(&a.test) {
        assert!(!train.contains(&s.code.as_str()), "{} leaks into evaluation", s.id);
    }
    assert_eq!(a.train.len(), 81);
    assert!(split_dataset(samples, [0.0, 0.0, 0.0], 1).is_err());
}
