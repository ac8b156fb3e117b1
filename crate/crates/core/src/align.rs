//! Fine-grained alignment of AST leaves with code tokens, and the F2 fusion
//! that adds each matched leaf's embedding onto its token rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ast::{leaf_ids, Ast};
use crate::corpus::{tokenize_code, TokenSeq};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Leaf node id → half-open token span `[start, end)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchMap(BTreeMap<usize, (usize, usize)>);

impl MatchMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, leaf: usize, span: (usize, usize)) {
        self.0.insert(leaf, span);
    }

    pub fn get(&self, leaf: usize) -> Option<(usize, usize)> {
        self.0.get(&leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entries in ascending leaf id order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    /// Drops entries whose leaf is at or beyond `max_nodes` or whose span
    /// does not fit in `max_tokens` positions.
    pub fn restrict(&self, max_nodes: usize, max_tokens: usize) -> MatchMap {
        MatchMap(
            self.0
                .iter()
                .filter(|(&leaf, &(_, end))| leaf < max_nodes && end <= max_tokens)
                .map(|(&k, &v)| (k, v))
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Subword form of a leaf value, using the same normalisation as code.
pub fn leaf_subwords(value: &str) -> TokenSeq {
    tokenize_code(value)
}

/// Forward-cursor greedy matcher.
///
/// Leaves are visited in ascending id order. Each leaf value is normalised to
/// subwords and matched against the first equal contiguous token span at or
/// after the cursor; a match moves the cursor past the span, a miss leaves it
/// where it was.
pub fn build_match_map(ast: &Ast, tokens: &TokenSeq) -> MatchMap {
    let toks: Vec<&str> = tokens.iter().collect();
    let mut map = MatchMap::new();
    let mut cursor = 0;
    for leaf in leaf_ids(ast) {
        let sub = leaf_subwords(ast.nodes[leaf].value());
        if sub.is_empty() || sub.len() > toks.len() {
            continue;
        }
        let k = sub.len();
        let found = (cursor..=toks.len() - k).find(|&i| {
            toks[i..i + k]
                .iter()
                .zip(sub.iter())
                .all(|(a, b)| *a == b)
        });
        if let Some(start) = found {
            map.insert(leaf, (start, start + k));
            cursor = start + k;
        }
    }
    map
}

/// `F2`: copy of `token_emb` with each matched leaf's `ast_emb` row added to
/// every token row of its span.
pub fn apply_f2(token_emb: &Tensor, ast_emb: &Tensor, map: &MatchMap) -> Result<Tensor> {
    if token_emb.cols() != ast_emb.cols() {
        return Err(Error::shape(
            "apply_f2",
            format!("widths {} vs {}", token_emb.cols(), ast_emb.cols()),
        ));
    }
    let mut out = token_emb.clone();
    for (leaf, (start, end)) in map.iter() {
        if leaf >= ast_emb.rows() || end > token_emb.rows() || start >= end {
            return Err(Error::shape(
                "apply_f2",
                format!(
                    "entry {leaf} -> [{start}, {end}) outside {} nodes / {} tokens",
                    ast_emb.rows(),
                    token_emb.rows()
                ),
            ));
        }
        for t in start..end {
            for (o, a) in out.row_mut(t).iter_mut().zip(ast_emb.row(leaf)) {
                *o += a;
            }
        }
    }
    Ok(out)
}

/// `L x L` 0/1 matrix `S` with `S[t][leaf] = 1` for every token `t` in the
/// leaf's span, so that `F2 = token_emb + S · ast_emb`.
pub fn scatter_matrix(map: &MatchMap, len: usize) -> Result<Tensor> {
    let mut s = Tensor::zeros(len, len);
    for (leaf, (start, end)) in map.iter() {
        if leaf >= len || end > len {
            return Err(Error::shape(
                "scatter_matrix",
                format!("entry {leaf} -> [{start}, {end}) outside length {len}"),
            ));
        }
        for t in start..end {
            s.set(t, leaf, 1.0);
        }
    }
    Ok(s)
}
