//! SGD training with early stopping on validation loss.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_code, Sample, Vocab};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{prepare, tokenize_summary, Model, ModelConfig, PreparedSample};
use crate::nn::ForwardCtx;
use crate::par;
use crate::params::Grads;

/// Flat run configuration; JSON files use these field names as keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub gcn_layers: usize,
    pub max_len: usize,
    pub max_sum_len: usize,
    pub vocab_cap: usize,
    pub beam: usize,
    /// Global-norm gradient clipping threshold; `null` disables clipping.
    pub clip_norm: Option<f64>,
    pub node_seed: u64,
    /// Train / valid / test fractions used by `preprocess`.
    pub split: [f64; 3],
    /// Stop as soon as the epoch's mean training loss drops below this.
    pub target_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            dropout: 0.2,
            max_epochs: 200,
            patience: 20,
            seed: 42,
            fusion_mode: FusionMode::Fgfm,
            d_model: 64,
            heads: 4,
            d_k: 64,
            d_ff: 128,
            layers: 2,
            gcn_layers: 2,
            max_len: 64,
            max_sum_len: 24,
            vocab_cap: 30000,
            beam: 4,
            clip_norm: Some(5.0),
            node_seed: 7,
            split: [0.8, 0.1, 0.1],
            target_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_k: self.d_k,
            d_ff: self.d_ff,
            layers: self.layers,
            gcn_layers: self.gcn_layers,
            max_len: self.max_len,
            max_sum_len: self.max_sum_len,
            fusion_mode: self.fusion_mode,
            node_seed: self.node_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.beam == 0 || self.vocab_cap == 0 {
            return bad("batch_size, max_epochs, patience, beam and vocab_cap must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive or null");
        }
        Ok(())
    }

    /// Parses a JSON config, filling unspecified keys with defaults.
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Vocabularies built from the training split only.
pub fn build_vocabs(train: &[Sample], cap: usize) -> (Vocab, Vocab) {
    let code: Vec<_> = train.iter().map(|s| tokenize_code(&s.code)).collect();
    let sum: Vec<_> = train.iter().map(|s| tokenize_summary(&s.summary)).collect();
    (Vocab::build(&code, cap), Vocab::build(&sum, cap))
}

pub fn prepare_all(samples: &[Sample], code_vocab: &Vocab, sum_vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<PreparedSample>> {
    par::map(samples, |s| prepare(s, code_vocab, sum_vocab, cfg))
        .into_iter()
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,valid_loss,seconds";

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{},{},{},{:.3}", self.epoch, self.train_loss, self.valid_loss, self.seconds)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_valid: f64,
    /// Parameters after the last completed epoch.
    pub last: Model,
    pub history: Vec<EpochRecord>,
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, &p| {
        let mut z = (h ^ p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Mean loss and mean gradient over `batch`, summed in batch order.
pub fn batch_gradient(model: &Model, batch: &[&PreparedSample], dropout: f64, seeds: &[u64]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let items: Vec<(&PreparedSample, u64)> = batch.iter().copied().zip(seeds.iter().copied()).collect();
    let per_sample = par::map(&items, |(s, seed)| {
        let mut ctx = if dropout > 0.0 {
            ForwardCtx::train(dropout, *seed)
        } else {
            ForwardCtx::eval()
        };
        model.loss_and_grads(s, &mut ctx)
    });
    let mut total = Grads::new(model.store.len());
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.merge(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// `param <- param - lr * grad` after optional global-norm clipping.
pub fn sgd_step(model: &mut Model, grads: &mut Grads, lr: f64, clip_norm: Option<f64>) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    if let Some(c) = clip_norm {
        let norm = grads.global_norm();
        if norm > c {
            grads.scale(c / norm);
        }
    }
    for (id, g) in grads.iter() {
        if !model.store.get(id).trainable {
            continue;
        }
        let v = model.store.value_mut(id);
        for (p, d) in v.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
    Ok(())
}

/// Mean per-sample loss with dropout off.
pub fn evaluate_validation(model: &Model, samples: &[PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    let losses = par::map(samples, |s| model.loss(s, &mut ForwardCtx::eval()));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / samples.len() as f64)
}

/// Runs seeded mini-batch SGD until patience runs out, `max_epochs` is
/// reached, or the training loss falls below `target_train_loss`.
pub fn train(
    mut model: Model,
    train_set: &[PreparedSample],
    valid_set: &[PreparedSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 1]));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = model.clone();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| mix(&[cfg.seed, epoch as u64, step as u64, i as u64])).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch, cfg.dropout, &seeds)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            sgd_step(&mut model, &mut grads, cfg.lr, cfg.clip_norm)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let valid_loss = evaluate_validation(&model, valid_set)?;
        if !valid_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        if valid_loss < best_valid {
            best_valid = valid_loss;
            best_epoch = epoch;
            best = model.clone();
        }
        let reached = cfg.target_train_loss.is_some_and(|t| train_loss < t);
        if reached || epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid,
        last: model,
        history,
    })
}
