//! Central finite-difference checks of reverse-mode gradients.
//!
//! Each case builds a scalar loss `sum(layer(x) ⊙ R)` with a fixed random
//! `R`, so the whole Jacobian is exercised. Inputs are registered as
//! parameters and checked alongside the weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::corpus::{tokenize_code, Vocab};
use crate::decode::{cross_entropy, decoder_forward, DecoderStack, Memory};
use crate::encoders::{encode_ast, encode_code, EncoderStack, GcnStack};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{prepare, tokenize_summary, Model, ModelConfig};
use crate::nn::{causal_mask, key_mask, AttentionConfig, FeedForward, ForwardCtx, LayerNorm, Linear, MultiHeadAttention};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::toy::{fig5_sample, toy_corpus};

pub const STEP: f64 = 1e-5;
/// Denominator floor per unit of loss magnitude. A central difference on a
/// loss `L` carries roundoff near `eps * |L| / STEP`, so gradients below
/// `REL_FLOOR * max(1, |L|)` are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients of `loss` for every trainable
/// parameter, probing at most `max_per_param` entries of each (all when
/// `None`).
pub fn check<F>(name: &str, store: &ParamStore, loss: F, max_per_param: Option<usize>, seed: u64) -> Result<CheckResult>
where
    F: Fn(&mut Graph) -> Result<Var> + Sync,
{
    let mut g = Graph::new(store);
    let l = loss(&mut g)?;
    let grads = g.backward(l)?;
    let floor = REL_FLOOR * g.value(l).data()[0].abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let n = p.value.len();
        match max_per_param {
            Some(k) if k < n => probes.extend((0..k).map(|_| (id, rng.gen_range(0..n)))),
            _ => probes.extend((0..n).map(|i| (id, i))),
        }
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    let errors = par::map(&probes, |&(id, i)| -> Result<f64> {
        let mut s = store.clone();
        let x = s.value(id).data()[i];
        s.value_mut(id).data_mut()[i] = x + STEP;
        let up = eval(&s)?;
        s.value_mut(id).data_mut()[i] = x - STEP;
        let down = eval(&s)?;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
        Ok(relative_error(analytic, numeric, floor))
    });
    let mut max = 0.0f64;
    for e in errors {
        let e = e?;
        if !e.is_finite() {
            return Err(Error::Numeric(format!("{name}: non-finite gradient probe")));
        }
        max = max.max(e);
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: max,
        probes: probes.len(),
    })
}

/// `sum(x ⊙ R)` for a fixed random `R` shaped like `x`.
pub fn weighted_sum(g: &mut Graph, x: Var, rng: &mut impl Rng) -> Result<Var> {
    let t = g.value(x);
    let r = Tensor::uniform(t.rows(), t.cols(), 1.0, rng);
    let y = g.mul_const(x, r)?;
    Ok(g.sum(y))
}

fn input(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
    store.add(name, Tensor::uniform(rows, cols, 1.0, rng), true)
}

/// Runs every layer check plus the full model in each fusion mode at
/// `d = 16`, `L = 8`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, l) = (8, 5);
    let att = AttentionConfig { d_model: d, heads: 2, d_k: 3 };

    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", l, d, &mut rng);
        let lin = Linear::new(&mut s, "lin", d, 6, true, &mut rng);
        let r_seed = rng.gen();
        out.push(check("linear", &s, |g| {
            let xv = g.param(x);
            let y = lin.forward(g, xv)?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", l, d, &mut rng);
        let mask = causal_mask(l, &[true; 5]);
        let r_seed = rng.gen();
        out.push(check("softmax", &s, |g| {
            let xv = g.param(x);
            let y = g.masked_softmax(xv, None)?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
        let mut s2 = ParamStore::new();
        let x2 = input(&mut s2, "x", l, l, &mut rng);
        out.push(check("softmax_masked", &s2, |g| {
            let xv = g.param(x2);
            let y = g.masked_softmax(xv, Some(&mask))?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    for masked in [false, true] {
        let mut s = ParamStore::new();
        let q = input(&mut s, "q", l, d, &mut rng);
        let kv = input(&mut s, "kv", l + 1, d, &mut rng);
        let mha = MultiHeadAttention::new(&mut s, "mha", att, &mut rng);
        let keys = [true, true, false, true, false, true];
        let allowed = key_mask(l, &keys);
        let r_seed = rng.gen();
        let name = if masked { "multi_head_attention_masked" } else { "multi_head_attention" };
        out.push(check(name, &s, |g| {
            let (qv, kvv) = (g.param(q), g.param(kv));
            let y = mha.forward(g, qv, kvv, kvv, masked.then_some(allowed.as_slice()))?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", l, d, &mut rng);
        let ffn = FeedForward::new(&mut s, "ffn", d, 12, &mut rng);
        let r_seed = rng.gen();
        out.push(check("feed_forward", &s, |g| {
            let xv = g.param(x);
            let y = ffn.forward(g, xv)?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", l, d, &mut rng);
        let ln = LayerNorm::new(&mut s, "ln", d);
        // Move gain and bias off their initial 1 / 0 values.
        let jitter = Tensor::uniform(1, d, 0.5, &mut rng);
        s.value_mut(ln.gain).add_assign(&jitter);
        s.value_mut(ln.bias).add_assign(&jitter);
        let r_seed = rng.gen();
        out.push(check("layer_norm", &s, |g| {
            let xv = g.param(x);
            let y = ln.forward(g, xv)?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    {
        let mut s = ParamStore::new();
        let table = input(&mut s, "embed", 7, d, &mut rng);
        let empty = EncoderStack { cfg: att, blocks: vec![] };
        let ids = [3, 0, 6, 6, 1];
        let mask = [true, false, true, true, true];
        let r_seed = rng.gen();
        out.push(check("positional_embedding", &s, |g| {
            let t = g.param(table);
            let enc = encode_code(g, t, &ids, &mask, &empty, &mut ForwardCtx::eval())?;
            weighted_sum(g, enc.encoded, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    {
        let mut s = ParamStore::new();
        let ast = toy_corpus(1, seed)[0].ast()?.clone();
        let n = ast.len();
        let prop = crate::ast::build_propagation(&ast);
        let h = input(&mut s, "h", n, d, &mut rng);
        let gcn = GcnStack::new(&mut s, "gcn", d, 2, &mut rng);
        let r_seed = rng.gen();
        out.push(check("gcn", &s, |g| {
            let hv = g.param(h);
            let p = g.input(prop.clone());
            let y = gcn.forward(g, hv, p)?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", l, d, &mut rng);
        let stack = EncoderStack::new(&mut s, "enc", att, 12, 2, &mut rng);
        let mask = [true, true, true, false, false];
        let r_seed = rng.gen();
        out.push(check("encoder_stack", &s, |g| {
            let xv = g.param(x);
            let y = encode_ast(g, xv, &stack, &mask, &mut ForwardCtx::eval())?;
            weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }, None, seed)?);
    }
    {
        let mut s = ParamStore::new();
        let mem_tok = input(&mut s, "x_e_tok", l, d, &mut rng);
        let mem_f = input(&mut s, "f", l, d, &mut rng);
        let dec = DecoderStack::new(&mut s, "dec", att, 12, 2, 9, &mut rng);
        let ids = [1, 5, 8, 2];
        let targets = [5, 8, 2, 0];
        let tmask = [true, true, true, false];
        let code_mask = [true, true, true, true, false];
        let f_mask = [true, true, true, true, true];
        out.push(check("decoder_stack_loss", &s, |g| {
            let mem = Memory {
                x_e_tok: g.param(mem_tok),
                code_mask: &code_mask,
                f: g.param(mem_f),
                f_mask: &f_mask,
            };
            let logits = decoder_forward(g, &dec, &ids, &mem, &mut ForwardCtx::eval())?;
            cross_entropy(g, logits, &targets, &tmask)
        }, None, seed)?);
    }
    for mode in FusionMode::ALL {
        out.push(full_model(mode, seed)?);
    }
    Ok(out)
}

/// Desk-dimension configuration used by the full-graph check.
pub fn desk_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        d_k: 8,
        d_ff: 32,
        layers: 2,
        gcn_layers: 2,
        max_len: 8,
        max_sum_len: 8,
        fusion_mode: mode,
        node_seed: 7,
    }
}

fn full_model(mode: FusionMode, seed: u64) -> Result<CheckResult> {
    let cfg = desk_config(mode);
    let mut samples = toy_corpus(3, seed);
    samples.push(fig5_sample());
    let code: Vec<_> = samples.iter().map(|s| tokenize_code(&s.code)).collect();
    let sum: Vec<_> = samples.iter().map(|s| tokenize_summary(&s.summary)).collect();
    let (cv, sv) = (Vocab::build(&code, 1000), Vocab::build(&sum, 1000));
    let model = Model::new(cfg, cv.len(), sv.len(), seed)?;
    let prepared = prepare(&samples[0], &cv, &sv, &cfg)?;
    check(&format!("full_model_{mode}"), &model.store, |g| model.loss_var(g, &prepared, &mut ForwardCtx::eval()), Some(12), seed)
}
