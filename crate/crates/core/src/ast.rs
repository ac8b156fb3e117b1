//! AST interchange model, validation, graph propagation matrix and the frozen
//! label-derived node features fed to the GCN.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Label prefix marking terminal (leaf) nodes.
pub const LEAF_PREFIX: &str = "ter_";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AstError {
    #[error("AST has no nodes")]
    Empty,
    #[error("node ids are not 0..n in pre-order: {0}")]
    BadIdOrder(String),
    #[error("node {node} has child {child} outside 0..{n}")]
    ChildOutOfRange { node: usize, child: usize, n: usize },
    #[error("more than one root: nodes {0:?} have no parent")]
    MultipleRoots(Vec<usize>),
    #[error("child links contain a cycle or a node with several parents (node {0})")]
    CycleError(usize),
    #[error("node {id} ({label:?}): leaf/\"ter_\" prefix mismatch")]
    LeafPrefixViolation { id: usize, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstNode {
    pub id: usize,
    pub label: String,
    #[serde(default)]
    pub children: Vec<usize>,
}

impl AstNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Label with the leaf prefix removed; non-leaf labels are returned as-is.
    pub fn value(&self) -> &str {
        self.label.strip_prefix(LEAF_PREFIX).unwrap_or(&self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ast {
    pub nodes: Vec<AstNode>,
}

impl Ast {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Checks the tree invariants and returns the canonical (id-sorted) form.
    pub fn validate(&self) -> Result<Ast, AstError> {
        validate_ast(self)
    }

    /// Keeps nodes `0..max_nodes` (a pre-order prefix, so still rooted and
    /// connected) and drops every edge touching a removed node.
    pub fn truncate(&self, max_nodes: usize) -> Ast {
        if self.nodes.len() <= max_nodes {
            return self.clone();
        }
        let nodes = self.nodes[..max_nodes]
            .iter()
            .map(|n| AstNode {
                id: n.id,
                label: n.label.clone(),
                children: n.children.iter().copied().filter(|&c| c < max_nodes).collect(),
            })
            .collect();
        Ast { nodes }
    }

    /// Undirected parent↔child edge list.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes
            .iter()
            .flat_map(|n| n.children.iter().map(move |&c| (n.id, c)))
    }
}

pub fn validate_ast(ast: &Ast) -> Result<Ast, AstError> {
    let n = ast.nodes.len();
    if n == 0 {
        return Err(AstError::Empty);
    }
    let mut nodes = ast.nodes.clone();
    nodes.sort_by_key(|x| x.id);
    for (i, node) in nodes.iter().enumerate() {
        if node.id != i {
            return Err(AstError::BadIdOrder(format!(
                "expected id {i}, found {}",
                node.id
            )));
        }
    }
    let mut parents = vec![0usize; n];
    for node in &nodes {
        for &c in &node.children {
            if c >= n {
                return Err(AstError::ChildOutOfRange {
                    node: node.id,
                    child: c,
                    n,
                });
            }
            parents[c] += 1;
        }
    }
    let roots: Vec<usize> = (0..n).filter(|&i| parents[i] == 0).collect();
    if roots.len() > 1 {
        return Err(AstError::MultipleRoots(roots));
    }
    if let Some(&r) = roots.first() {
        if r != 0 {
            return Err(AstError::BadIdOrder(format!("root is node {r}, expected 0")));
        }
    } else {
        return Err(AstError::CycleError(0));
    }
    if let Some(i) = (0..n).find(|&i| parents[i] > 1) {
        return Err(AstError::CycleError(i));
    }

    // Single root + single parent per node: the only way to miss a node from
    // the root is a detached cycle.
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        if seen[i] {
            return Err(AstError::CycleError(i));
        }
        seen[i] = true;
        order.push(i);
        stack.extend(nodes[i].children.iter().rev());
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(AstError::CycleError(i));
    }
    if let Some((pos, &id)) = order.iter().enumerate().find(|&(pos, &id)| pos != id) {
        return Err(AstError::BadIdOrder(format!(
            "pre-order position {pos} holds node {id}"
        )));
    }

    for node in &nodes {
        if node.is_leaf() != node.label.starts_with(LEAF_PREFIX) {
            return Err(AstError::LeafPrefixViolation {
                id: node.id,
                label: node.label.clone(),
            });
        }
    }
    Ok(Ast { nodes })
}

/// `D̂^(-1/2) (A + I) D̂^(-1/2)` for the undirected tree, as a dense `n x n`
/// matrix.
pub fn build_propagation(ast: &Ast) -> Tensor {
    let n = ast.len();
    let mut a_hat = Tensor::zeros(n, n);
    for i in 0..n {
        a_hat.set(i, i, 1.0);
    }
    for (p, c) in ast.edges() {
        a_hat.set(p, c, 1.0);
        a_hat.set(c, p, 1.0);
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / a_hat.row(i).iter().sum::<f64>().sqrt())
        .collect();
    let mut s = a_hat;
    for i in 0..n {
        for j in 0..n {
            let v = s.get(i, j);
            if v != 0.0 {
                s.set(i, j, v * inv_sqrt_deg[i] * inv_sqrt_deg[j]);
            }
        }
    }
    s
}

/// Ids of leaves (terminal-marked, childless nodes) in ascending order.
pub fn leaf_ids(ast: &Ast) -> Vec<usize> {
    ast.nodes
        .iter()
        .filter(|n| n.is_leaf() && n.label.starts_with(LEAF_PREFIX))
        .map(|n| n.id)
        .collect()
}

/// 64-bit FNV-1a; stable across platforms and compiler versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Frozen feature vector for one label: uniform in `±sqrt(3/d)`, so the
/// expected squared norm is 1.
pub fn label_embedding(label: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(fnv1a(label.as_bytes()) ^ seed));
    let bound = (3.0 / d as f64).sqrt();
    (0..d).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// `n x d` matrix of [`label_embedding`] rows; a pure function of the labels,
/// `d` and `seed`.
pub fn init_node_embeddings(ast: &Ast, d: usize, seed: u64) -> Tensor {
    let data = ast
        .nodes
        .iter()
        .flat_map(|n| label_embedding(&n.label, d, seed))
        .collect();
    Tensor::from_rows(ast.len(), d, data)
}
