//! Summary decoder, training objective and inference search.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_at, Graph, Var};
use crate::corpus::{EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, key_mask, positional_encoding, AttentionConfig, FeedForward, ForwardCtx, LayerNorm, Linear,
    MultiHeadAttention,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Masked self-attention, code cross-attention, fused-feature
/// cross-attention and feed-forward, each with residual add and layer norm.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub code_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fgf_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
    pub norm4: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: AttentionConfig, d_ff: usize, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), cfg, rng),
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d),
            code_attn: MultiHeadAttention::new(store, &format!("{prefix}.code_attn"), cfg, rng),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
            fgf_attn: MultiHeadAttention::new(store, &format!("{prefix}.fgf_attn"), cfg, rng),
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, d_ff, rng),
            norm4: LayerNorm::new(store, &format!("{prefix}.norm4"), d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub cfg: AttentionConfig,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub out: Linear,
}

impl DecoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AttentionConfig,
        d_ff: usize,
        layers: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            cfg,
            embed: store.glorot(format!("{prefix}.embed"), vocab, cfg.d_model, rng),
            layers: (0..layers)
                .map(|l| DecoderLayer::new(store, &format!("{prefix}.{l}"), cfg, d_ff, rng))
                .collect(),
            out: Linear::new(store, &format!("{prefix}.out"), cfg.d_model, vocab, true, rng),
        }
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.value(self.embed).rows()
    }
}

/// Encoder-side tensors the decoder attends to.
#[derive(Debug, Clone, Copy)]
pub struct Memory<'a> {
    pub x_e_tok: Var,
    pub code_mask: &'a [bool],
    pub f: Var,
    /// Real rows of `f` (a real token or a real AST node).
    pub f_mask: &'a [bool],
}

/// Logits (`ids.len() x vocab`) for decoder input `ids`, which starts at SOS.
pub fn decoder_forward(g: &mut Graph, stack: &DecoderStack, ids: &[usize], mem: &Memory, ctx: &mut ForwardCtx) -> Result<Var> {
    if ids.first() != Some(&SOS) {
        return Err(Error::Data("decoder input must start with SOS".into()));
    }
    let (lk, lf) = (g.value(mem.x_e_tok).rows(), g.value(mem.f).rows());
    if mem.code_mask.len() != lk || mem.f_mask.len() != lf {
        return Err(Error::shape("decoder_forward", "memory mask length mismatch"));
    }
    let n = ids.len();
    let table = g.param(stack.embed);
    let emb = g.gather(table, ids)?;
    let pe = g.input(positional_encoding(n, stack.cfg.d_model)?);
    let y = g.add(emb, pe)?;
    let mut y = ctx.dropout(g, y)?;

    let real: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    let self_mask = causal_mask(n, &real);
    let code_mask = key_mask(n, mem.code_mask);
    let f_mask = key_mask(n, mem.f_mask);
    for layer in &stack.layers {
        let a = layer.self_attn.forward(g, y, y, y, Some(&self_mask))?;
        y = residual(g, &layer.norm1, y, a, ctx)?;
        let c = layer.code_attn.forward(g, y, mem.x_e_tok, mem.x_e_tok, Some(&code_mask))?;
        y = residual(g, &layer.norm2, y, c, ctx)?;
        let h = layer.fgf_attn.forward(g, y, mem.f, mem.f, Some(&f_mask))?;
        y = residual(g, &layer.norm3, y, h, ctx)?;
        let ff = layer.ffn.forward(g, y)?;
        y = residual(g, &layer.norm4, y, ff, ctx)?;
    }
    stack.out.forward(g, y)
}

fn residual(g: &mut Graph, norm: &LayerNorm, x: Var, sub: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    let sub = ctx.dropout(g, sub)?;
    let r = g.add(x, sub)?;
    norm.forward(g, r)
}

/// Summed negative log-likelihood of `targets` at positions where `mask`
/// holds. Averaging over the batch happens in the trainer.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Data("target row is entirely PAD".into()));
    }
    g.nll_sum(logits, targets, mask)
}

/// Teacher-forcing split of an encoded `SOS .. EOS PAD*` row.
pub fn teacher_forcing(summary: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let n = summary.len().saturating_sub(1);
    let input = summary[..n].to_vec();
    let target = summary[1..].to_vec();
    let mask = target.iter().map(|&t| t != PAD).collect();
    (input, target, mask)
}

/// A (possibly partial) generated sequence, without the leading SOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Next-token log-probabilities for a prefix starting with SOS. Entries of
/// `-inf` are never chosen.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: Fn(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// Argmax decoding, lowest id on ties; stops at EOS or `max_len` tokens.
pub fn greedy_search<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![SOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(&prefix)?;
        let (tok, s) = lp
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, s)| *s > f64::NEG_INFINITY)
            .fold(None, |best: Option<(usize, f64)>, (t, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((t, s)),
            })
            .ok_or_else(|| Error::Numeric("no finite next-token score".into()))?;
        prefix.push(tok);
        log_prob += s;
        if tok == EOS {
            break;
        }
    }
    let finished = prefix.last() == Some(&EOS) && prefix.len() > 1;
    prefix.remove(0);
    Ok(Hypothesis {
        tokens: prefix,
        log_prob,
        finished,
    })
}

/// Beam search without length normalization. Expansions are ranked by total
/// log-probability, then token id, then parent order; the best terminal
/// hypothesis wins, and the greedy sequence is kept if it scores higher.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let searched = beam_only(scorer, beam, max_len)?;
    let greedy = greedy_search(scorer, max_len)?;
    Ok(if greedy.log_prob > searched.log_prob { greedy } else { searched })
}

fn beam_only<S: StepScorer + ?Sized>(scorer: &S, beam: usize, max_len: usize) -> Result<Hypothesis> {
    let mut live = vec![Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(SOS);
            prefix.extend(&h.tokens);
            let lp = scorer.log_probs(&prefix)?;
            cands.extend(
                lp.iter()
                    .enumerate()
                    .filter(|(_, s)| **s > f64::NEG_INFINITY)
                    .map(|(t, s)| (h.log_prob + s, t, hi)),
            );
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let last = step + 1 == max_len;
        let mut next = Vec::with_capacity(cands.len());
        for (score, tok, hi) in cands {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished: tok == EOS,
            };
            if h.finished || last {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }
    if max_len == 0 {
        return Ok(live.remove(0));
    }
    done.into_iter()
        .reduce(|a, b| if b.log_prob.total_cmp(&a.log_prob) == Ordering::Greater { b } else { a })
        .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))
}

/// Inference-time scorer over fixed encoder outputs.
pub struct ModelScorer<'a> {
    pub store: &'a ParamStore,
    pub stack: &'a DecoderStack,
    pub x_e_tok: Tensor,
    pub code_mask: Vec<bool>,
    pub f: Tensor,
    pub f_mask: Vec<bool>,
}

impl StepScorer for ModelScorer<'_> {
    /// Log-softmax of the last position; PAD and SOS are never generated.
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.store);
        let mem = Memory {
            x_e_tok: g.input(self.x_e_tok.clone()),
            code_mask: &self.code_mask,
            f: g.input(self.f.clone()),
            f_mask: &self.f_mask,
        };
        let logits = decoder_forward(&mut g, self.stack, prefix, &mem, &mut ForwardCtx::eval())?;
        let row = g.value(logits).row(prefix.len() - 1);
        let mut lp: Vec<f64> = (0..row.len()).map(|t| log_softmax_at(row, t)).collect();
        if !lp.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite decoder output".into()));
        }
        lp[PAD] = f64::NEG_INFINITY;
        lp[SOS] = f64::NEG_INFINITY;
        Ok(lp)
    }
}
