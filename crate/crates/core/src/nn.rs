//! Transformer building blocks on top of the autograd [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_row, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Sinusoidal positions: `sin(pos / 10000^(2i/d))` on even columns and the
/// matching `cos` on odd ones.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("d_model must be even, got {d_model}")));
    }
    let mut pe = Tensor::zeros(len, d_model);
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Row-wise numerically stable softmax.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_row(x.row(r), None, out.row_mut(r)).expect("finite row");
    }
    out
}

/// Allowed-position mask (`rows_q x rows_k`, row-major) admitting every query
/// to the keys flagged in `keys`.
pub fn key_mask(rows_q: usize, keys: &[bool]) -> Vec<bool> {
    (0..rows_q).flat_map(|_| keys.iter().copied()).collect()
}

/// Causal mask combined with a key padding mask: query `t` sees keys `<= t`.
pub fn causal_mask(len: usize, keys: &[bool]) -> Vec<bool> {
    (0..len)
        .flat_map(|t| (0..len).map(move |s| s <= t))
        .zip(key_mask(len, keys))
        .map(|(c, k)| c && k)
        .collect()
}

/// Training-time randomness; `None` rng means evaluation (dropout off).
pub struct ForwardCtx {
    pub dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; identity at eval time or rate 0.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let t = g.value(x);
        let keep = 1.0 / (1.0 - p);
        let data = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_rows(t.rows(), t.cols(), data);
        g.mul_const(x, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Per-head width of queries, keys and values.
    pub d_k: usize,
}

/// Multi-head attention with explicit per-head projections packed
/// column-wise: head `j` uses columns `j*d_k..(j+1)*d_k` of each projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: AttentionConfig, rng: &mut R) -> Self {
        let inner = cfg.heads * cfg.d_k;
        Self {
            cfg,
            w_q: store.glorot(format!("{prefix}.w_q"), cfg.d_model, inner, rng),
            w_k: store.glorot(format!("{prefix}.w_k"), cfg.d_model, inner, rng),
            w_v: store.glorot(format!("{prefix}.w_v"), cfg.d_model, inner, rng),
            w_o: store.glorot(format!("{prefix}.w_o"), inner, cfg.d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, q_in: Var, k_in: Var, v_in: Var, allowed: Option<&[bool]>) -> Result<Var> {
        Ok(self.forward_with_weights(g, q_in, k_in, v_in, allowed)?.0)
    }

    /// Also returns each head's attention weight matrix.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        allowed: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(k_in).rows() != g.value(v_in).rows() {
            return Err(Error::shape("multi_head_attention", "K and V row counts differ"));
        }
        let (wq, wk, wv, wo) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v), g.param(self.w_o));
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(k_in, wk)?;
        let v = g.matmul(v_in, wv)?;
        let dk = self.cfg.d_k;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for j in 0..self.cfg.heads {
            let (s, e) = (j * dk, (j + 1) * dk);
            let qj = g.cols(q, s, e)?;
            let kj = g.cols(k, s, e)?;
            let vj = g.cols(v, s, e)?;
            let (head, w) = scaled_dot_attention(g, qj, kj, vj, scale, allowed)?;
            heads.push(head);
            weights.push(w);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        Ok((g.matmul(cat, wo)?, weights))
    }
}

/// `softmax(q kᵀ · scale) v` with masked keys; returns output and weights.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, scale);
    let w = g.masked_softmax(scores, allowed)?;
    Ok((g.matmul(w, v)?, w))
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            w1: store.glorot(format!("{prefix}.w1"), d_model, d_ff, rng),
            b1: store.zeros(format!("{prefix}.b1"), 1, d_ff),
            w2: store.glorot(format!("{prefix}.w2"), d_ff, d_model, rng),
            b2: store.zeros(format!("{prefix}.b2"), 1, d_model),
        }
    }

    /// `max(0, x W1 + b1) W2 + b2`
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize) -> Self {
        Self {
            gain: store.ones(format!("{prefix}.gain"), 1, d_model),
            bias: store.zeros(format!("{prefix}.bias"), 1, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            w: store.glorot(format!("{prefix}.w"), d_in, d_out, rng),
            b: bias.then(|| store.zeros(format!("{prefix}.b"), 1, d_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}
