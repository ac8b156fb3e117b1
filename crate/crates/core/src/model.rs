//! The full encoder → fusion → decoder model and per-sample preprocessing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{build_match_map, MatchMap};
use crate::ast::{build_propagation, init_node_embeddings};
use crate::autograd::{Graph, Var};
use crate::corpus::{encode_summary, tokenize_code, Sample, TokenSeq, Vocab, PAD};
use crate::decode::{beam_search, cross_entropy, decoder_forward, teacher_forcing, DecoderStack, Hypothesis, Memory, ModelScorer};
use crate::encoders::{encode_ast, encode_code, EncoderStack, GcnStack};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionInputs, FusionMode, FusionParams};
use crate::nn::{AttentionConfig, ForwardCtx};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub gcn_layers: usize,
    /// Shared code / AST length `L`.
    pub max_len: usize,
    /// Encoded summary length including SOS and EOS.
    pub max_sum_len: usize,
    pub fusion_mode: FusionMode,
    /// Seed of the frozen label embeddings.
    pub node_seed: u64,
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_k: self.d_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_ff", self.d_ff),
            ("layers", self.layers),
            ("gcn_layers", self.gcn_layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.max_sum_len < 2 {
            return Err(Error::Config("max_sum_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// A sample turned into fixed-size model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub code_ids: Vec<usize>,
    pub code_mask: Vec<bool>,
    /// Real AST rows among the `L` positions.
    pub ast_mask: Vec<bool>,
    /// Normalized adjacency of the truncated AST.
    pub prop: Tensor,
    /// Frozen label embeddings of the truncated AST.
    pub node_init: Tensor,
    pub map: MatchMap,
    /// `SOS .. EOS PAD*`, length `max_sum_len`.
    pub summary: Vec<usize>,
    pub reference: Vec<String>,
}

/// Summary tokens use the same lexer and identifier splitting as code.
pub fn tokenize_summary(text: &str) -> TokenSeq {
    tokenize_code(text)
}

pub fn prepare(sample: &Sample, code_vocab: &Vocab, sum_vocab: &Vocab, cfg: &ModelConfig) -> Result<PreparedSample> {
    let l = cfg.max_len;
    let tokens = tokenize_code(&sample.code);
    if tokens.is_empty() {
        return Err(Error::Data(format!("sample {}: empty code", sample.id)));
    }
    let ast = sample
        .ast()?
        .validate()
        .map_err(|e| Error::Data(format!("sample {}: {e}", sample.id)))?;
    let map = build_match_map(&ast, &tokens).restrict(l, l);
    let cut = ast.truncate(l);
    let n = cut.len();

    let mut code_ids = code_vocab.encode(&tokens);
    let real = code_ids.len().min(l);
    code_ids.resize(l.max(code_ids.len()), PAD);
    code_ids.truncate(l);
    let reference = tokenize_summary(&sample.summary);
    if reference.is_empty() {
        return Err(Error::Data(format!("sample {}: empty summary", sample.id)));
    }
    Ok(PreparedSample {
        id: sample.id.clone(),
        code_ids,
        code_mask: (0..l).map(|i| i < real).collect(),
        ast_mask: (0..l).map(|i| i < n).collect(),
        prop: build_propagation(&cut),
        node_init: init_node_embeddings(&cut, cfg.d_model, cfg.node_seed),
        map,
        summary: encode_summary(&reference, sum_vocab, cfg.max_sum_len),
        reference: reference.0,
    })
}

/// Encoder-side results for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub x_e_tok: Var,
    pub x_e_ast: Var,
    pub token_emb: Var,
    pub ast_emb: Var,
    pub f: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub code_embed: ParamId,
    pub code_enc: EncoderStack,
    pub gcn: GcnStack,
    pub ast_enc: EncoderStack,
    pub fusion: FusionParams,
    pub decoder: DecoderStack,
}

impl Model {
    /// Freshly initialized model; parameter names and order depend only on
    /// `cfg` and the vocabulary sizes.
    pub fn new(cfg: ModelConfig, code_vocab: usize, sum_vocab: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = cfg.attention();
        let code_embed = store.glorot("code.embed", code_vocab, cfg.d_model, &mut rng);
        let code_enc = EncoderStack::new(&mut store, "code.enc", att, cfg.d_ff, cfg.layers, &mut rng);
        let gcn = GcnStack::new(&mut store, "ast.gcn", cfg.d_model, cfg.gcn_layers, &mut rng);
        let ast_enc = EncoderStack::new(&mut store, "ast.enc", att, cfg.d_ff, cfg.layers, &mut rng);
        let fusion = FusionParams::new(&mut store, "fusion", cfg.d_model, cfg.d_k, cfg.fusion_mode, &mut rng);
        let decoder = DecoderStack::new(&mut store, "dec", att, cfg.d_ff, cfg.layers, sum_vocab, &mut rng);
        Ok(Self {
            cfg,
            store,
            code_embed,
            code_enc,
            gcn,
            ast_enc,
            fusion,
            decoder,
        })
    }

    pub fn sum_vocab_size(&self) -> usize {
        self.decoder.vocab_size(&self.store)
    }

    /// Runs both encoders and the fusion block.
    pub fn encode(&self, g: &mut Graph, s: &PreparedSample, ctx: &mut ForwardCtx) -> Result<Encoded> {
        let table = g.param(self.code_embed);
        let code = encode_code(g, table, &s.code_ids, &s.code_mask, &self.code_enc, ctx)?;
        let nodes = g.input(s.node_init.clone());
        let prop = g.input(s.prop.clone());
        let x_ast = self.gcn.forward(g, nodes, prop)?;
        let ast_emb = g.pad_rows(x_ast, self.cfg.max_len)?;
        let x_e_ast = encode_ast(g, ast_emb, &self.ast_enc, &s.ast_mask, ctx)?;
        let inputs = FusionInputs {
            x_e_tok: code.encoded,
            x_e_ast,
            token_emb: code.token_emb,
            ast_emb,
            token_mask: &s.code_mask,
            ast_mask: &s.ast_mask,
        };
        let f = fuse(g, &self.fusion, &inputs, &s.map)?;
        Ok(Encoded {
            x_e_tok: code.encoded,
            x_e_ast,
            token_emb: code.token_emb,
            ast_emb,
            f,
        })
    }

    /// Summed teacher-forced NLL of one sample as a graph node.
    pub fn loss_var(&self, g: &mut Graph, s: &PreparedSample, ctx: &mut ForwardCtx) -> Result<Var> {
        let enc = self.encode(g, s, ctx)?;
        let f_mask = fused_mask(s);
        let mem = Memory {
            x_e_tok: enc.x_e_tok,
            code_mask: &s.code_mask,
            f: enc.f,
            f_mask: &f_mask,
        };
        let (input, target, mask) = teacher_forcing(&s.summary);
        let logits = decoder_forward(g, &self.decoder, &input, &mem, ctx)?;
        cross_entropy(g, logits, &target, &mask)
    }

    pub fn loss(&self, s: &PreparedSample, ctx: &mut ForwardCtx) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let l = self.loss_var(&mut g, s, ctx)?;
        Ok(g.value(l).data()[0])
    }

    pub fn loss_and_grads(&self, s: &PreparedSample, ctx: &mut ForwardCtx) -> Result<(f64, Grads)> {
        let mut g = Graph::new(&self.store);
        let l = self.loss_var(&mut g, s, ctx)?;
        let value = g.value(l).data()[0];
        Ok((value, g.backward(l)?))
    }

    /// Scorer for autoregressive decoding of `s`.
    pub fn scorer(&self, s: &PreparedSample) -> Result<ModelScorer<'_>> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, s, &mut ForwardCtx::eval())?;
        Ok(ModelScorer {
            store: &self.store,
            stack: &self.decoder,
            x_e_tok: g.value(enc.x_e_tok).clone(),
            code_mask: s.code_mask.clone(),
            f: g.value(enc.f).clone(),
            f_mask: fused_mask(s),
        })
    }

    /// Beam search (beam 1 is greedy) up to `max_sum_len - 1` tokens.
    pub fn summarize(&self, s: &PreparedSample, beam: usize) -> Result<Hypothesis> {
        beam_search(&self.scorer(s)?, beam, self.cfg.max_sum_len - 1)
    }
}

/// `F` rows are real where either the token or the AST row is real.
pub fn fused_mask(s: &PreparedSample) -> Vec<bool> {
    s.code_mask.iter().zip(&s.ast_mask).map(|(a, b)| *a || *b).collect()
}
