//! Independent scalar-loop reference implementations used by the oracle and
//! acceptance tests. Nothing here calls the library's numeric kernels.

#![allow(dead_code)]

use std::collections::BTreeMap;

use codesum::decode::DecoderStack;
use codesum::encoders::{EncoderBlock, EncoderStack, GcnStack};
use codesum::fusion::{FusionMode, FusionParams};
use codesum::model::{Model, PreparedSample};
use codesum::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use codesum::params::{ParamId, ParamStore};
use codesum::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn p(store: &ParamStore, id: ParamId) -> Mat {
    mat(store.value(id))
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows(), "row count");
    let mut m = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols(), "col count");
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b.get(r, c)).abs());
        }
    }
    m
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

pub fn cols(a: &Mat, start: usize, end: usize) -> Mat {
    a.iter().map(|r| r[start..end].to_vec()).collect()
}

pub fn softmax_row(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (v, a) in row.iter().zip(allowed) {
        if *a && *v > max {
            max = *v;
        }
    }
    let mut e: Vec<f64> = row
        .iter()
        .zip(allowed)
        .map(|(v, a)| if *a { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    for x in &mut e {
        *x /= z;
    }
    e
}

/// `softmax(q kᵀ / sqrt(d_k)) v` with `allowed[r][s]` gating keys.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, allowed: &[Vec<bool>]) -> Mat {
    let dk = q[0].len() as f64;
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for r in 0..q.len() {
        let scores: Vec<f64> = (0..k.len())
            .map(|s| {
                let mut dot = 0.0;
                for c in 0..q[r].len() {
                    dot += q[r][c] * k[s][c];
                }
                dot / dk.sqrt()
            })
            .collect();
        let w = softmax_row(&scores, &allowed[r]);
        for s in 0..k.len() {
            for c in 0..v[0].len() {
                out[r][c] += w[s] * v[s][c];
            }
        }
    }
    out
}

pub fn all_allowed(rows: usize, keys: usize) -> Vec<Vec<bool>> {
    vec![vec![true; keys]; rows]
}

pub fn key_allowed(rows: usize, keys: &[bool]) -> Vec<Vec<bool>> {
    vec![keys.to_vec(); rows]
}

pub fn causal_allowed(keys: &[bool]) -> Vec<Vec<bool>> {
    (0..keys.len())
        .map(|t| (0..keys.len()).map(|s| s <= t && keys[s]).collect())
        .collect()
}

pub fn mha(store: &ParamStore, a: &MultiHeadAttention, q_in: &Mat, k_in: &Mat, v_in: &Mat, allowed: &[Vec<bool>]) -> Mat {
    let dk = a.cfg.d_k;
    let q = matmul(q_in, &p(store, a.w_q));
    let k = matmul(k_in, &p(store, a.w_k));
    let v = matmul(v_in, &p(store, a.w_v));
    let mut cat: Mat = vec![Vec::new(); q_in.len()];
    for j in 0..a.cfg.heads {
        let h = attention(&cols(&q, j * dk, (j + 1) * dk), &cols(&k, j * dk, (j + 1) * dk), &cols(&v, j * dk, (j + 1) * dk), allowed);
        for (row, hr) in cat.iter_mut().zip(h) {
            row.extend(hr);
        }
    }
    matmul(&cat, &p(store, a.w_o))
}

pub fn ffn(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    let (w1, b1, w2, b2) = (p(store, f.w1), p(store, f.b1), p(store, f.w2), p(store, f.b2));
    let mut h = matmul(x, &w1);
    for row in &mut h {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v + b1[0][c]).max(0.0);
        }
    }
    let mut o = matmul(&h, &w2);
    for row in &mut o {
        for (c, v) in row.iter_mut().enumerate() {
            *v += b2[0][c];
        }
    }
    o
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let (g, b) = (p(store, ln.gain), p(store, ln.bias));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g[0][c] + b[0][c])
                .collect()
        })
        .collect()
}

pub fn gcn(store: &ParamStore, stack: &GcnStack, nodes: &Mat, prop: &Mat) -> Mat {
    let mut h = nodes.clone();
    for &w in &stack.weights {
        let w = p(store, w);
        let n = h.len();
        let d = w[0].len();
        let mut next = vec![vec![0.0; d]; n];
        for i in 0..n {
            for c in 0..d {
                let mut s = 0.0;
                for j in 0..n {
                    for t in 0..h[j].len() {
                        s += prop[i][j] * h[j][t] * w[t][c];
                    }
                }
                next[i][c] = s.max(0.0);
            }
        }
        h = next;
    }
    h
}

pub fn positional(len: usize, d: usize) -> Mat {
    (0..len)
        .map(|pos| {
            (0..d)
                .map(|c| {
                    let i = (c / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
                    if c % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn encoder_block(store: &ParamStore, b: &EncoderBlock, x: &Mat, mask: &[bool]) -> Mat {
    let allowed = key_allowed(x.len(), mask);
    let a = mha(store, &b.attn, x, x, x, &allowed);
    let x = layer_norm(store, &b.norm1, &add(x, &a));
    let f = ffn(store, &b.ffn, &x);
    layer_norm(store, &b.norm2, &add(&x, &f))
}

pub fn encoder(store: &ParamStore, s: &EncoderStack, x: &Mat, mask: &[bool]) -> Mat {
    s.blocks.iter().fold(x.clone(), |h, b| encoder_block(store, b, &h, mask))
}

/// Raw token embeddings with PAD rows zeroed.
pub fn token_embeddings(table: &Mat, ids: &[usize], mask: &[bool]) -> Mat {
    ids.iter()
        .zip(mask)
        .map(|(&i, &m)| if m { table[i].clone() } else { vec![0.0; table[0].len()] })
        .collect()
}

pub fn zero_rows(x: &Mat, keep: &[bool]) -> Mat {
    x.iter()
        .zip(keep)
        .map(|(r, &k)| if k { r.clone() } else { vec![0.0; r.len()] })
        .collect()
}

pub fn fuse_f1(store: &ParamStore, fp: &FusionParams, x_tok: &Mat, x_ast: &Mat, tok_mask: &[bool], ast_mask: &[bool]) -> Mat {
    let q = matmul(x_ast, &p(store, fp.w_q));
    let k = matmul(x_tok, &p(store, fp.w_k));
    let v = matmul(x_tok, &p(store, fp.w_v));
    zero_rows(&attention(&q, &k, &v, &key_allowed(x_ast.len(), tok_mask)), ast_mask)
}

#[allow(clippy::too_many_arguments)]
pub fn fuse(
    store: &ParamStore,
    fp: &FusionParams,
    x_tok: &Mat,
    x_ast: &Mat,
    tok_emb: &Mat,
    ast_emb: &Mat,
    map: &BTreeMap<usize, (usize, usize)>,
    tok_mask: &[bool],
    ast_mask: &[bool],
) -> Mat {
    let f1 = fuse_f1(store, fp, x_tok, x_ast, tok_mask, ast_mask);
    let f2 = match fp.mode {
        FusionMode::Fgfm => {
            let mut out = tok_emb.clone();
            for (&leaf, &(s, e)) in map {
                for t in s..e {
                    for c in 0..out[t].len() {
                        out[t][c] += ast_emb[leaf][c];
                    }
                }
            }
            out
        }
        FusionMode::AstOnly => ast_emb.clone(),
        FusionMode::SelfAttn => {
            let san = fp.san.as_ref().unwrap();
            let q = matmul(ast_emb, &p(store, san.w_q));
            let k = matmul(tok_emb, &p(store, san.w_k));
            let v = matmul(tok_emb, &p(store, san.w_v));
            zero_rows(&attention(&q, &k, &v, &key_allowed(ast_emb.len(), tok_mask)), ast_mask)
        }
        FusionMode::Concat => {
            let cat: Mat = tok_emb.iter().zip(ast_emb).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
            matmul(&cat, &p(store, fp.concat.as_ref().unwrap().w))
        }
    };
    add(&f1, &f2)
}

pub fn decoder(store: &ParamStore, dec: &DecoderStack, ids: &[usize], x_tok: &Mat, code_mask: &[bool], f: &Mat, f_mask: &[bool]) -> Mat {
    let table = p(store, dec.embed);
    let d = table[0].len();
    let emb: Mat = ids.iter().map(|&i| table[i].clone()).collect();
    let mut y = add(&emb, &positional(ids.len(), d));
    let real: Vec<bool> = ids.iter().map(|&i| i != 0).collect();
    let self_allowed = causal_allowed(&real);
    let code_allowed = key_allowed(ids.len(), code_mask);
    let f_allowed = key_allowed(ids.len(), f_mask);
    for l in &dec.layers {
        let a = mha(store, &l.self_attn, &y, &y, &y, &self_allowed);
        y = layer_norm(store, &l.norm1, &add(&y, &a));
        let c = mha(store, &l.code_attn, &y, x_tok, x_tok, &code_allowed);
        y = layer_norm(store, &l.norm2, &add(&y, &c));
        let h = mha(store, &l.fgf_attn, &y, f, f, &f_allowed);
        y = layer_norm(store, &l.norm3, &add(&y, &h));
        let ff = ffn(store, &l.ffn, &y);
        y = layer_norm(store, &l.norm4, &add(&y, &ff));
    }
    let mut logits = matmul(&y, &p(store, dec.out.w));
    let b = p(store, dec.out.b.unwrap());
    for row in &mut logits {
        for (c, v) in row.iter_mut().enumerate() {
            *v += b[0][c];
        }
    }
    logits
}

/// `-Σ log softmax(logits_t)[target_t]` over masked positions.
pub fn nll(logits: &Mat, targets: &[usize], mask: &[bool]) -> f64 {
    let mut loss = 0.0;
    for t in 0..logits.len() {
        if !mask[t] {
            continue;
        }
        let row = &logits[t];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        loss -= (row[targets[t]].exp() / z).ln();
    }
    loss
}

/// Everything the full model computes for one sample, recomputed by hand.
pub struct FullOracle {
    pub token_emb: Mat,
    pub x_e_tok: Mat,
    pub ast_emb: Mat,
    pub x_e_ast: Mat,
    pub f: Mat,
    pub logits: Mat,
    pub loss: f64,
}

pub fn full_model(m: &Model, s: &PreparedSample) -> FullOracle {
    let st = &m.store;
    let l = m.cfg.max_len;
    let d = m.cfg.d_model;
    let token_emb = token_embeddings(&p(st, m.code_embed), &s.code_ids, &s.code_mask);
    let x_e_tok = encoder(st, &m.code_enc, &add(&token_emb, &positional(l, d)), &s.code_mask);
    let mut ast_emb = gcn(st, &m.gcn, &mat(&s.node_init), &mat(&s.prop));
    ast_emb.resize(l, vec![0.0; d]);
    let x_e_ast = encoder(st, &m.ast_enc, &ast_emb, &s.ast_mask);
    let map: BTreeMap<_, _> = s.map.iter().collect();
    let f = fuse(st, &m.fusion, &x_e_tok, &x_e_ast, &token_emb, &ast_emb, &map, &s.code_mask, &s.ast_mask);
    let f_mask: Vec<bool> = s.code_mask.iter().zip(&s.ast_mask).map(|(a, b)| *a || *b).collect();
    let n = s.summary.len() - 1;
    let input = &s.summary[..n];
    let target = &s.summary[1..];
    let tmask: Vec<bool> = target.iter().map(|&t| t != 0).collect();
    let logits = decoder(st, &m.decoder, input, &x_e_tok, &s.code_mask, &f, &f_mask);
    let loss = nll(&logits, target, &tmask);
    FullOracle {
        token_emb,
        x_e_tok,
        ast_emb,
        x_e_ast,
        f,
        logits,
        loss,
    }
}

/// Brute-force order-preserving matcher: every leaf in id order takes the
/// earliest span at or after the previous match whose tokens spell the
/// leaf's subwords.
pub fn brute_force_match(ast: &codesum::ast::Ast, tokens: &[String]) -> BTreeMap<usize, (usize, usize)> {
    let mut out = BTreeMap::new();
    let mut from = 0;
    for node in &ast.nodes {
        if !(node.children.is_empty() && node.label.starts_with("ter_")) {
            continue;
        }
        let words = codesum::corpus::tokenize_code(&node.label["ter_".len()..]).0;
        if words.is_empty() {
            continue;
        }
        let mut found = None;
        for start in from..tokens.len() {
            let end = start + words.len();
            if end <= tokens.len() && tokens[start..end] == words[..] {
                found = Some((start, end));
                break;
            }
        }
        if let Some((s, e)) = found {
            out.insert(node.id, (s, e));
            from = e;
        }
    }
    out
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= s.len() {
        out.push(s[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn unique(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut u: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !u.contains(g) {
            u.push(g.clone());
        }
    }
    u
}

pub fn naive_bleu4(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut prod = 1.0f64;
    for n in 1..=4 {
        let mut num = 0usize;
        let mut den = 0usize;
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, n);
            let rg = grams(r, n);
            for g in unique(&cg) {
                num += count(&cg, &g).min(count(&rg, &g));
            }
            den += cg.len();
        }
        let p = if num == 0 { 1e-9 } else { num as f64 / den as f64 };
        prod *= p.powf(0.25);
    }
    let c: usize = cands.iter().map(|x| x.len()).sum();
    let r: usize = refs.iter().map(|x| x.len()).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    100.0 * bp * prod
}

/// Word-by-word exact alignment: continue the previous match when the next
/// reference word agrees, otherwise take the leftmost unused match.
pub fn naive_meteor(c: &[String], r: &[String]) -> f64 {
    let mut taken = vec![false; r.len()];
    let mut align: Vec<Option<usize>> = Vec::new();
    let mut prev: Option<usize> = None;
    for w in c {
        let mut pick = None;
        if let Some(p) = prev {
            if p + 1 < r.len() && !taken[p + 1] && &r[p + 1] == w {
                pick = Some(p + 1);
            }
        }
        if pick.is_none() {
            for j in 0..r.len() {
                if !taken[j] && &r[j] == w {
                    pick = Some(j);
                    break;
                }
            }
        }
        if let Some(j) = pick {
            taken[j] = true;
        }
        align.push(pick);
        prev = pick;
    }
    let m = align.iter().filter(|a| a.is_some()).count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    for i in 0..align.len() {
        if let Some(j) = align[i] {
            let continues = i > 0 && align[i - 1] == Some(j.wrapping_sub(1)) && j > 0;
            if !continues {
                chunks += 1;
            }
        }
    }
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    let pen = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - pen)
}

fn lcs_rec(a: &[String], b: &[String], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(v) = memo.get(&key) {
        return *v;
    }
    let v = if a[0] == b[0] {
        1 + lcs_rec(&a[1..], &b[1..], memo)
    } else {
        lcs_rec(&a[1..], b, memo).max(lcs_rec(a, &b[1..], memo))
    };
    memo.insert(key, v);
    v
}

pub fn naive_rouge_l(c: &[String], r: &[String]) -> f64 {
    let l = lcs_rec(c, r, &mut BTreeMap::new()) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
    let b2 = 1.44;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

pub fn naive_cider(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let docs = refs.len() as f64;
    let idf = |g: &[String]| {
        let df = refs.iter().filter(|r| grams(r, g.len()).iter().any(|x| x.as_slice() == g)).count().max(1);
        (docs / df as f64).ln()
    };
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let mut s = 0.0;
        for n in 1..=4 {
            let (cg, rg) = (grams(c, n), grams(r, n));
            let mut vocab = unique(&cg);
            for g in unique(&rg) {
                if !vocab.contains(&g) {
                    vocab.push(g);
                }
            }
            let (mut dot, mut nc, mut nr) = (0.0, 0.0, 0.0);
            for g in &vocab {
                let w = idf(g);
                let x = if cg.is_empty() { 0.0 } else { count(&cg, g) as f64 / cg.len() as f64 * w };
                let y = if rg.is_empty() { 0.0 } else { count(&rg, g) as f64 / rg.len() as f64 * w };
                dot += x * y;
                nc += x * x;
                nr += y * y;
            }
            if nc > 0.0 && nr > 0.0 {
                s += dot / (nc.sqrt() * nr.sqrt());
            }
        }
        total += 10.0 * s / 4.0;
    }
    total / cands.len() as f64
}

pub fn mean<F: Fn(&[String], &[String]) -> f64>(c: &[Vec<String>], r: &[Vec<String>], f: F) -> f64 {
    100.0 * c.iter().zip(r).map(|(a, b)| f(a, b)).sum::<f64>() / c.len() as f64
}

/// Ten hand-written pairs with repeats, reordering, partial overlap and a
/// length mismatch in both directions.
pub fn metric_corpus() -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let pairs = [
        ("return the larger of price and rate", "return the larger of price and rate"),
        ("set the count to value", "set the count field to value"),
        ("get the name with strip of key", "get the name with lower of key"),
        ("count the data data", "count the data"),
        ("update the size by adding offset and buffer", "update the total by adding buffer and offset"),
        ("the the the the", "the cat sat on the mat"),
        ("read path", "read the path from config"),
        ("make the item with copy of config and more words here", "make the item with copy of config"),
        ("find index", "check the score"),
        ("return the smaller of key and data", "return the larger of data and key"),
    ];
    pairs.iter().map(|(c, r)| (words(c), words(r))).unzip()
}

/// Best terminal sequence by brute force: every sequence that ends in EOS
/// within `max_len` tokens, or reaches `max_len` without it.
pub fn exhaustive_best(scorer: &dyn Fn(&[usize]) -> Vec<f64>, max_len: usize) -> (Vec<usize>, f64) {
    fn walk(
        scorer: &dyn Fn(&[usize]) -> Vec<f64>,
        prefix: &mut Vec<usize>,
        score: f64,
        max_len: usize,
        best: &mut (Vec<usize>, f64),
    ) {
        let lp = scorer(prefix);
        for (t, s) in lp.iter().enumerate() {
            if *s == f64::NEG_INFINITY {
                continue;
            }
            prefix.push(t);
            let total = score + s;
            if t == codesum::corpus::EOS || prefix.len() - 1 == max_len {
                if total > best.1 {
                    *best = (prefix[1..].to_vec(), total);
                }
            } else {
                walk(scorer, prefix, total, max_len, best);
            }
            prefix.pop();
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    walk(scorer, &mut vec![codesum::corpus::SOS], 0.0, max_len, &mut best);
    best
}

/// A small randomly initialized model whose summary vocabulary has two
/// ordinary words besides the reserved ids, and the fig5 sample prepared for
/// it.
pub fn beam_model(seed: u64) -> (Model, PreparedSample) {
    use codesum::corpus::{tokenize_code, Vocab};
    let s = codesum::toy::fig5_sample();
    let cfg = codesum::model::ModelConfig {
        d_model: 8,
        heads: 2,
        d_k: 4,
        d_ff: 16,
        layers: 1,
        gcn_layers: 1,
        max_len: 8,
        max_sum_len: 6,
        fusion_mode: FusionMode::Fgfm,
        node_seed: 7,
    };
    let cv = Vocab::build([&tokenize_code(&s.code)], 100);
    let sv = Vocab::build([&tokenize_code(&s.summary)], 2);
    assert_eq!(sv.len(), 6);
    let p = codesum::model::prepare(&s, &cv, &sv, &cfg).unwrap();
    let mut m = Model::new(cfg, cv.len(), sv.len(), seed).unwrap();
    // Larger output weights make the next-token distributions peaked and
    // the search problem non-trivial.
    let w = m.decoder.out.w;
    let scaled = m.store.value(w).scale(6.0);
    *m.store.value_mut(w) = scaled;
    (m, p)
}
