//! Dataset loading, code/summary tokenization, vocabularies and batching.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ast::Ast;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<PAD>", "<SOS>", "<EOS>", "<UNK>"];

/// Multi-character operators recognised by the lexer (longest match first).
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", "...", "**=", "//=", ">>>", "==", "!=", "<=", ">=", "&&", "||", "++",
    "--", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "->", "=>", "::", "<<", ">>", "**",
    "//",
];

/// Where a sample's AST lives: inline in the record or in a separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AstRef {
    Inline(Ast),
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub code: String,
    pub summary: String,
    pub ast: AstRef,
}

impl Sample {
    /// The inline AST; `load_dataset` resolves file references, so this only
    /// fails for records built by hand.
    pub fn ast(&self) -> Result<&Ast> {
        match &self.ast {
            AstRef::Inline(a) => Ok(a),
            AstRef::Path(p) => Err(Error::Data(format!(
                "sample {}: AST reference {p} not resolved",
                self.id
            ))),
        }
    }
}

/// Lowercase subword tokens in source order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits one lexeme into lowercase subwords.
///
/// Underscores separate segments and are dropped. Inside a segment a new
/// subword starts at a lower→upper transition, at a letter↔digit transition,
/// and before the last capital of an uppercase run that is followed by a
/// lowercase letter (`HTTPServer` → `http`, `server`). Lexemes containing
/// characters other than letters, digits and `_` pass through as one token.
pub fn split_identifier(raw: &str) -> Vec<String> {
    if raw.is_empty() {
        return Vec::new();
    }
    if !raw.chars().all(is_ident_char) {
        return vec![raw.to_lowercase()];
    }
    let mut out = Vec::new();
    for segment in raw.split('_').filter(|s| !s.is_empty()) {
        let chars: Vec<char> = segment.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next = chars.get(i + 1).copied();
            let boundary = (prev.is_lowercase() && cur.is_uppercase())
                || (prev.is_numeric() != cur.is_numeric())
                || (prev.is_uppercase()
                    && cur.is_uppercase()
                    && next.is_some_and(|n| n.is_lowercase()));
            if boundary {
                out.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        out.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    out
}

/// Splits text into lexemes: identifier/number runs, known multi-character
/// operators, and single punctuation characters. Whitespace separates.
pub fn lex(code: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < code.len() {
        let rest = &code[i..];
        let c = rest.chars().next().expect("non-empty");
        if c.is_whitespace() {
            i += c.len_utf8();
        } else if is_ident_char(c) {
            let end = rest
                .char_indices()
                .find(|&(_, ch)| !is_ident_char(ch))
                .map_or(rest.len(), |(j, _)| j);
            out.push(&rest[..end]);
            i += end;
        } else if let Some(op) = OPERATORS.iter().find(|op| rest.starts_with(*op)) {
            out.push(&rest[..op.len()]);
            i += op.len();
        } else {
            out.push(&rest[..c.len_utf8()]);
            i += c.len_utf8();
        }
    }
    out
}

/// Lexes `code` and splits every lexeme into subwords.
pub fn tokenize_code(code: &str) -> TokenSeq {
    TokenSeq(lex(code).into_iter().flat_map(split_identifier).collect())
}

/// Token ↔ id mapping with reserved ids PAD=0, SOS=1, EOS=2, UNK=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `cap` most frequent tokens, ties broken by first occurrence.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a TokenSeq>, cap: usize) -> Self {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for seq in corpus {
            for tok in seq.iter() {
                let e = counts.entry(tok).or_insert((0, order));
                if e.0 == 0 {
                    order += 1;
                }
                e.0 += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .filter(|(t, _, _)| !RESERVED.contains(t))
                    .take(cap)
                    .map(|(t, _, _)| t.to_string()),
            )
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Data(
                "vocabulary must start with <PAD>, <SOS>, <EOS>, <UNK>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, seq: &TokenSeq) -> Vec<usize> {
        seq.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, stopping at EOS and skipping PAD/SOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != SOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_tokens(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// `SOS + ids + EOS`, truncated to `len` and padded with PAD to exactly `len`.
pub fn encode_summary(summary: &TokenSeq, vocab: &Vocab, len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(len.max(summary.len() + 2));
    ids.push(SOS);
    ids.extend(summary.iter().map(|t| vocab.id(t)));
    ids.push(EOS);
    ids.truncate(len);
    ids.resize(len, PAD);
    ids
}

/// One sample's unpadded id sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub code: Vec<usize>,
    pub ast_nodes: usize,
    /// `SOS + ids + EOS`
    pub summary: Vec<usize>,
}

/// Padded id matrices plus masks (`true` at real positions).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub code: Vec<Vec<usize>>,
    pub code_mask: Vec<Vec<bool>>,
    /// Node index per position (`0..n`, PAD beyond).
    pub ast: Vec<Vec<usize>>,
    pub ast_mask: Vec<Vec<bool>>,
    pub summary: Vec<Vec<usize>>,
    pub summary_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }
}

fn pad_ids(ids: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    let keep = ids.len().min(len);
    let mut row = ids[..keep].to_vec();
    row.resize(len, PAD);
    let mask = (0..len).map(|i| i < keep).collect();
    (row, mask)
}

pub fn pad_batch(
    samples: &[EncodedSample],
    code_len: usize,
    ast_len: usize,
    sum_len: usize,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if code_len == 0 || ast_len == 0 || sum_len == 0 {
        return Err(Error::Config(format!(
            "padding lengths must be positive (code {code_len}, ast {ast_len}, summary {sum_len})"
        )));
    }
    let mut b = Batch {
        code: Vec::new(),
        code_mask: Vec::new(),
        ast: Vec::new(),
        ast_mask: Vec::new(),
        summary: Vec::new(),
        summary_mask: Vec::new(),
    };
    for s in samples {
        let (c, cm) = pad_ids(&s.code, code_len);
        let nodes: Vec<usize> = (0..s.ast_nodes).collect();
        let (a, am) = pad_ids(&nodes, ast_len);
        let (y, ym) = pad_ids(&s.summary, sum_len);
        b.code.push(c);
        b.code_mask.push(cm);
        b.ast.push(a);
        b.ast_mask.push(am);
        b.summary.push(y);
        b.summary_mask.push(ym);
    }
    Ok(b)
}

/// Reads a JSON Lines dataset, resolving AST file references relative to the
/// dataset's directory. Samples with empty code or an empty tokenized summary
/// are dropped.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: Sample = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if let AstRef::Path(p) = &sample.ast {
            let ast_path: PathBuf = base.join(p);
            let s = fs::read_to_string(&ast_path).map_err(|e| Error::io(&ast_path, e))?;
            sample.ast = AstRef::Inline(serde_json::from_str(&s)?);
        }
        if sample.code.trim().is_empty() || tokenize_code(&sample.summary).is_empty() {
            continue;
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = String::new();
    for s in samples {
        buf.push_str(&serde_json::to_string(s)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded shuffle into train/valid/test by `fractions` (normalised), then
/// drops valid/test samples whose code duplicates a training sample.
pub fn split_dataset(samples: Vec<Sample>, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let total: f64 = fractions.iter().sum();
    if !(total > 0.0) || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Config(format!("bad split fractions {fractions:?}")));
    }
    let mut samples = samples;
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = samples.len();
    let n_train = ((fractions[0] / total) * n as f64).round() as usize;
    let n_valid = (((fractions[1] / total) * n as f64).round() as usize).min(n - n_train);
    let test = samples.split_off(n_train + n_valid);
    let valid = samples.split_off(n_train);
    let train = samples;
    let seen: HashSet<&str> = train.iter().map(|s| s.code.as_str()).collect();
    let dedup = |v: Vec<Sample>| -> Vec<Sample> {
        v.into_iter().filter(|s| !seen.contains(s.code.as_str())).collect()
    };
    let valid = dedup(valid);
    let test = dedup(test);
    Ok(Split { train, valid, test })
}
