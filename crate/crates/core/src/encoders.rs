//! Code encoder (token embedding + positions + Transformer blocks) and AST
//! encoder (GCN followed by Transformer blocks).

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{key_mask, positional_encoding, AttentionConfig, FeedForward, ForwardCtx, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};

/// Graph convolution layers `H <- relu(S H W)` without bias.
#[derive(Debug, Clone)]
pub struct GcnStack {
    pub weights: Vec<ParamId>,
}

impl GcnStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, layers: usize, rng: &mut R) -> Self {
        let weights = (0..layers)
            .map(|l| store.glorot(format!("{prefix}.{l}.w"), d, d, rng))
            .collect();
        Self { weights }
    }

    /// `node_emb` is `n x d`, `prop` the `n x n` normalized adjacency.
    pub fn forward(&self, g: &mut Graph, node_emb: Var, prop: Var) -> Result<Var> {
        let (n, p) = (g.value(node_emb).rows(), g.value(prop));
        if p.rows() != n || p.cols() != n {
            return Err(Error::shape(
                "gcn_forward",
                format!("propagation {}x{} for {n} nodes", p.rows(), p.cols()),
            ));
        }
        let mut h = node_emb;
        for &w in &self.weights {
            let w = g.param(w);
            let sh = g.matmul(prop, h)?;
            let shw = g.matmul(sh, w)?;
            h = g.relu(shw);
        }
        Ok(h)
    }
}

/// One post-norm encoder block: self-attention and feed-forward, each
/// followed by dropout, residual add and layer norm.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: AttentionConfig, d_ff: usize, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), cfg, rng),
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), cfg.d_model, d_ff, rng),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), cfg.d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, allowed: &[bool], ctx: &mut ForwardCtx) -> Result<Var> {
        let a = self.attn.forward(g, x, x, x, Some(allowed))?;
        let a = ctx.dropout(g, a)?;
        let r = g.add(x, a)?;
        let x = self.norm1.forward(g, r)?;
        let f = self.ffn.forward(g, x)?;
        let f = ctx.dropout(g, f)?;
        let r = g.add(x, f)?;
        self.norm2.forward(g, r)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub cfg: AttentionConfig,
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionConfig,
        d_ff: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|l| EncoderBlock::new(store, &format!("{prefix}.{l}"), cfg, d_ff, rng))
            .collect();
        Self { cfg, blocks }
    }

    /// Runs every block with `mask` (true at real positions) restricting keys.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool], ctx: &mut ForwardCtx) -> Result<Var> {
        let rows = g.value(x).rows();
        if mask.len() != rows {
            return Err(Error::shape("encoder", format!("mask {} for {rows} rows", mask.len())));
        }
        let allowed = key_mask(rows, mask);
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, &allowed, ctx)?;
        }
        Ok(h)
    }
}

/// Output of [`encode_code`].
#[derive(Debug, Clone, Copy)]
pub struct CodeEncoding {
    /// Raw token embeddings (PAD rows zero, no positions).
    pub token_emb: Var,
    /// Encoder output.
    pub encoded: Var,
}

/// Embeds `ids` from `table`, adds positional encoding and runs `stack`.
pub fn encode_code(
    g: &mut Graph,
    table: Var,
    ids: &[usize],
    mask: &[bool],
    stack: &EncoderStack,
    ctx: &mut ForwardCtx,
) -> Result<CodeEncoding> {
    if ids.len() != mask.len() {
        return Err(Error::shape("encode_code", "ids and mask lengths differ"));
    }
    let raw = g.gather(table, ids)?;
    let token_emb = g.mask_rows(raw, mask)?;
    let pe = positional_encoding(ids.len(), stack.cfg.d_model)?;
    let pe = g.input(pe);
    let x = g.add(token_emb, pe)?;
    let x = ctx.dropout(g, x)?;
    let encoded = stack.forward(g, x, mask, ctx)?;
    Ok(CodeEncoding { token_emb, encoded })
}

/// Runs the AST encoder over the padded GCN output.
pub fn encode_ast(g: &mut Graph, x_ast: Var, stack: &EncoderStack, mask: &[bool], ctx: &mut ForwardCtx) -> Result<Var> {
    if g.value(x_ast).cols() != stack.cfg.d_model {
        return Err(Error::shape("encode_ast", "feature width differs from d_model"));
    }
    let x = ctx.dropout(g, x_ast)?;
    stack.forward(g, x, mask, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gcn_single_node_identity() {
        let mut store = ParamStore::new();
        let w = store.add("w", identity(3), true);
        let gcn = GcnStack { weights: vec![w, w] };
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_rows(1, 3, vec![0.5, 0.0, 2.0]));
        let p = g.input(Tensor::from_rows(1, 1, vec![1.0]));
        let y = gcn.forward(&mut g, x, p).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn gcn_rejects_bad_prop() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gcn = GcnStack::new(&mut store, "g", 2, 2, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(3, 2));
        let p = g.input(Tensor::zeros(2, 2));
        assert!(gcn.forward(&mut g, x, p).is_err());
    }

    #[test]
    fn empty_stack_is_passthrough() {
        let store = ParamStore::new();
        let stack = EncoderStack {
            cfg: AttentionConfig { d_model: 4, heads: 1, d_k: 2 },
            blocks: vec![],
        };
        let mut g = Graph::new(&store);
        let table = g.input(Tensor::from_rows(3, 4, (0..12).map(f64::from).collect()));
        let enc = encode_code(&mut g, table, &[2, 1], &[true, true], &stack, &mut ForwardCtx::eval()).unwrap();
        let pe = positional_encoding(2, 4).unwrap();
        let want = Tensor::from_rows(2, 4, vec![8.0, 9.0, 10.0, 11.0, 4.0, 5.0, 6.0, 7.0]).add(&pe).unwrap();
        assert_eq!(g.value(enc.encoded), &want);
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }
}
