//! Fusion of the token and AST streams into the feature `F` the decoder
//! attends to.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{scatter_matrix, MatchMap};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{key_mask, scaled_dot_attention, Linear};
use crate::params::{ParamId, ParamStore};

/// How the embedding-level term is combined with `F1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Matched leaf embeddings added onto their token embeddings.
    #[default]
    Fgfm,
    /// AST embeddings alone.
    AstOnly,
    /// Single-head attention, AST embeddings querying token embeddings.
    SelfAttn,
    /// Feature-axis concatenation projected back to `d`.
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Fgfm,
        FusionMode::AstOnly,
        FusionMode::SelfAttn,
        FusionMode::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Fgfm => "fgfm",
            FusionMode::AstOnly => "ast_only",
            FusionMode::SelfAttn => "self_attn",
            FusionMode::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

/// Projections for the SAN variant.
#[derive(Debug, Clone)]
pub struct SanParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub mode: FusionMode,
    pub d_k: usize,
    /// Query projection of the AST encoder output (`d x d_k`).
    pub w_q: ParamId,
    /// Key projection of the code encoder output (`d x d_k`).
    pub w_k: ParamId,
    /// Value projection of the code encoder output (`d x d`).
    pub w_v: ParamId,
    pub san: Option<SanParams>,
    pub concat: Option<Linear>,
}

impl FusionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_k: usize,
        mode: FusionMode,
        rng: &mut R,
    ) -> Self {
        let w_q = store.glorot(format!("{prefix}.w_q"), d, d_k, rng);
        let w_k = store.glorot(format!("{prefix}.w_k"), d, d_k, rng);
        let w_v = store.glorot(format!("{prefix}.w_v"), d, d, rng);
        let san = (mode == FusionMode::SelfAttn).then(|| SanParams {
            w_q: store.glorot(format!("{prefix}.san.w_q"), d, d_k, rng),
            w_k: store.glorot(format!("{prefix}.san.w_k"), d, d_k, rng),
            w_v: store.glorot(format!("{prefix}.san.w_v"), d, d, rng),
        });
        let concat = (mode == FusionMode::Concat).then(|| Linear::new(store, &format!("{prefix}.concat"), 2 * d, d, false, rng));
        Self {
            mode,
            d_k,
            w_q,
            w_k,
            w_v,
            san,
            concat,
        }
    }
}

/// Inputs shared by every fusion mode; all matrices are `L x d`.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs<'a> {
    pub x_e_tok: Var,
    pub x_e_ast: Var,
    pub token_emb: Var,
    pub ast_emb: Var,
    pub token_mask: &'a [bool],
    pub ast_mask: &'a [bool],
}

/// `F1 = softmax(Q_ae K_teᵀ / sqrt(d_k)) V_te`, masked AST rows zeroed.
pub fn fuse_f1(g: &mut Graph, params: &FusionParams, inp: &FusionInputs) -> Result<Var> {
    check_shapes(g, inp)?;
    let (wq, wk, wv) = (g.param(params.w_q), g.param(params.w_k), g.param(params.w_v));
    attend(g, inp.x_e_ast, inp.x_e_tok, (wq, wk, wv), params.d_k, inp)
}

/// `F = F1 + F2`, with `F2` chosen by `params.mode`.
pub fn fuse(g: &mut Graph, params: &FusionParams, inp: &FusionInputs, map: &MatchMap) -> Result<Var> {
    let f1 = fuse_f1(g, params, inp)?;
    let f2 = match params.mode {
        FusionMode::Fgfm => {
            let s = scatter_matrix(map, g.value(inp.token_emb).rows())?;
            let s = g.input(s);
            let moved = g.matmul(s, inp.ast_emb)?;
            g.add(inp.token_emb, moved)?
        }
        FusionMode::AstOnly => inp.ast_emb,
        FusionMode::SelfAttn => {
            let san = params
                .san
                .as_ref()
                .ok_or_else(|| Error::Config("self_attn mode without its projections".into()))?;
            let w = (g.param(san.w_q), g.param(san.w_k), g.param(san.w_v));
            attend(g, inp.ast_emb, inp.token_emb, w, params.d_k, inp)?
        }
        FusionMode::Concat => {
            let proj = params
                .concat
                .as_ref()
                .ok_or_else(|| Error::Config("concat mode without its projection".into()))?;
            let cat = g.concat_cols(&[inp.token_emb, inp.ast_emb])?;
            proj.forward(g, cat)?
        }
    };
    g.add(f1, f2)
}

fn attend(g: &mut Graph, query: Var, kv: Var, (wq, wk, wv): (Var, Var, Var), d_k: usize, inp: &FusionInputs) -> Result<Var> {
    let q = g.matmul(query, wq)?;
    let k = g.matmul(kv, wk)?;
    let v = g.matmul(kv, wv)?;
    let allowed = key_mask(inp.ast_mask.len(), inp.token_mask);
    let (out, _) = scaled_dot_attention(g, q, k, v, 1.0 / (d_k as f64).sqrt(), Some(&allowed))?;
    g.mask_rows(out, inp.ast_mask)
}

fn check_shapes(g: &Graph, inp: &FusionInputs) -> Result<()> {
    let shapes = [inp.x_e_tok, inp.x_e_ast, inp.token_emb, inp.ast_emb].map(|v| g.value(v).shape().to_vec());
    if shapes.iter().any(|s| *s != shapes[0]) {
        return Err(Error::shape("fuse", format!("inputs must share one L x d shape, got {shapes:?}")));
    }
    if inp.token_mask.len() != shapes[0][0] || inp.ast_mask.len() != shapes[0][0] {
        return Err(Error::shape("fuse", "mask length differs from L"));
    }
    Ok(())
}
