//! Corpus BLEU-4, METEOR, ROUGE-L and CIDEr over tokenized sentences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Floor substituted for a zero n-gram precision.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Corpus BLEU-4, percent.
    pub bleu4: f64,
    /// Mean METEOR, percent.
    pub meteor: f64,
    /// Mean ROUGE-L F, percent.
    pub rouge_l: f64,
    /// Mean CIDEr.
    pub cider: f64,
}

impl ScoreReport {
    pub fn table(&self) -> String {
        format!(
            "metric   score\nBLEU-4   {:>6.2}\nMETEOR   {:>6.2}\nROUGE-L  {:>6.2}\nCIDEr    {:>6.3}\n",
            self.bleu4, self.meteor, self.rouge_l, self.cider
        )
    }
}

type Tok = String;

fn check_corpus(c: &[Vec<Tok>], r: &[Vec<Tok>]) -> Result<()> {
    if c.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if c.len() != r.len() {
        return Err(Error::Data(format!("{} candidates vs {} references", c.len(), r.len())));
    }
    Ok(())
}

fn ngram_counts(s: &[Tok], n: usize) -> HashMap<&[Tok], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 (percent) with pooled clipped counts and uniform weights.
pub fn bleu4(candidates: &[Vec<Tok>], references: &[Vec<Tok>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total += c.len().saturating_sub(n - 1);
        }
        let p = if matched == 0 { BLEU_EPSILON } else { matched as f64 / total as f64 };
        log_sum += 0.25 * p.ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp().min(1.0)
    };
    Ok(100.0 * bp * log_sum.exp())
}

/// Exact-match alignment: candidate position -> reference position.
fn meteor_alignment(c: &[Tok], r: &[Tok]) -> Vec<Option<usize>> {
    let mut used = vec![false; r.len()];
    let mut prev: Option<usize> = None;
    c.iter()
        .map(|w| {
            let next = prev
                .map(|p| p + 1)
                .filter(|&j| j < r.len() && !used[j] && r[j] == *w)
                .or_else(|| (0..r.len()).find(|&j| !used[j] && r[j] == *w));
            if let Some(j) = next {
                used[j] = true;
            }
            prev = next;
            next
        })
        .collect()
}

/// Sentence METEOR (fraction in `[0, 1]`).
pub fn meteor_sentence(candidate: &[Tok], reference: &[Tok]) -> f64 {
    let align = meteor_alignment(candidate, reference);
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut last: Option<usize> = None;
    for a in &align {
        match (*a, last) {
            (Some(j), Some(l)) if j == l + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        last = *a;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let frag = chunks as f64 / m as f64;
    (1.0 - METEOR_GAMMA * frag.powf(METEOR_BETA)) * fmean
}

/// Mean sentence METEOR, percent.
pub fn meteor(candidates: &[Vec<Tok>], references: &[Vec<Tok>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    Ok(mean_pairwise(candidates, references, |c, r| meteor_sentence(c, r)))
}

pub fn lcs_len(a: &[Tok], b: &[Tok]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Sentence ROUGE-L F (fraction in `[0, 1]`).
pub fn rouge_l_sentence(candidate: &[Tok], reference: &[Tok]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence ROUGE-L, percent.
pub fn rouge_l(candidates: &[Vec<Tok>], references: &[Vec<Tok>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    Ok(mean_pairwise(candidates, references, |c, r| rouge_l_sentence(c, r)))
}

fn mean_pairwise(c: &[Vec<Tok>], r: &[Vec<Tok>], f: impl Fn(&[Tok], &[Tok]) -> f64 + Sync + Send) -> f64 {
    let pairs: Vec<(&Vec<Tok>, &Vec<Tok>)> = c.iter().zip(r).collect();
    let scores = par::map(&pairs, |(c, r)| f(c, r));
    100.0 * scores.iter().sum::<f64>() / scores.len() as f64
}

/// Document frequencies of every 1..4-gram over the references.
pub struct CiderIdf<'a> {
    df: HashMap<&'a [Tok], usize>,
    docs: usize,
}

impl<'a> CiderIdf<'a> {
    pub fn new(references: &'a [Vec<Tok>]) -> Self {
        let mut df = HashMap::new();
        for r in references {
            for n in 1..=4 {
                for g in ngram_counts(r, n).into_keys() {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
        }
        Self {
            df,
            docs: references.len(),
        }
    }

    pub fn idf(&self, gram: &[Tok]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        (self.docs as f64 / df as f64).ln()
    }

    fn vector(&self, s: &'a [Tok], n: usize) -> HashMap<&'a [Tok], f64> {
        let counts = ngram_counts(s, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, k)| (g, k as f64 / total as f64 * self.idf(g)))
            .collect()
    }

    /// `CIDER_SCALE` times the mean over n = 1..4 of the TF-IDF cosine.
    pub fn score(&self, candidate: &'a [Tok], reference: &'a [Tok]) -> f64 {
        let mut acc = 0.0;
        for n in 1..=4 {
            let (vc, vr) = (self.vector(candidate, n), self.vector(reference, n));
            let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
            let nc = vc.values().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.values().map(|x| x * x).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                acc += dot / (nc * nr);
            }
        }
        CIDER_SCALE * acc / 4.0
    }
}

/// Mean CIDEr, IDF taken over `references`.
pub fn cider(candidates: &[Vec<Tok>], references: &[Vec<Tok>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let idf = CiderIdf::new(references);
    let pairs: Vec<(&Vec<Tok>, &Vec<Tok>)> = candidates.iter().zip(references).collect();
    let scores = par::map(&pairs, |(c, r)| idf.score(c, r));
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn score_corpus(candidates: &[Vec<Tok>], references: &[Vec<Tok>]) -> Result<ScoreReport> {
    Ok(ScoreReport {
        bleu4: bleu4(candidates, references)?,
        meteor: meteor(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        cider: cider(candidates, references)?,
    })
}
