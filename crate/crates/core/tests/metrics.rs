mod common;

use codesum::metrics::{bleu4, cider, meteor, meteor_sentence, rouge_l, rouge_l_sentence, score_corpus};
use common::*;
use proptest::prelude::*;

#[test]
fn corpus_scores_match_scalar_oracles() {
    let (c, r) = metric_corpus();
    let report = score_corpus(&c, &r).unwrap();
    assert!((report.bleu4 - naive_bleu4(&c, &r)).abs() < 1e-9, "bleu {}", report.bleu4);
    assert!((report.meteor - mean(&c, &r, naive_meteor)).abs() < 1e-9);
    assert!((report.rouge_l - mean(&c, &r, naive_rouge_l)).abs() < 1e-9);
    assert!((report.cider - naive_cider(&c, &r)).abs() < 1e-9);
    assert!(report.bleu4 > 0.0 && report.bleu4 < 100.0);
}

#[test]
fn identity_anchors() {
    let (_, r) = metric_corpus();
    assert!((bleu4(&r, &r).unwrap() - 100.0).abs() < 1e-9);
    assert!((rouge_l(&r, &r).unwrap() - 100.0).abs() < 1e-9);
    assert!(meteor(&r, &r).unwrap() >= 99.0);
    assert!((cider(&r, &r).unwrap() - naive_cider(&r, &r)).abs() < 1e-9);
}

#[test]
fn hand_computed_sentence_values() {
    let (c, r) = (words("set the count to value"), words("set the count field to value"));
    // lcs 5, p 1, r 5/6
    let (p, rc, b2) = (1.0, 5.0 / 6.0, 1.44);
    let want = (1.0 + b2) * p * rc / (rc + b2 * p);
    assert!((rouge_l_sentence(&c, &r) - want).abs() < 1e-15);
    // two chunks over five matches
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    let want = fmean * (1.0 - 0.5 * (2.0f64 / 5.0).powi(3));
    assert!((meteor_sentence(&c, &r) - want).abs() < 1e-15);
}

#[test]
fn brevity_penalty_and_empty_candidate() {
    let r = vec![words("a b c d e f g h")];
    let short = vec![words("a b c d")];
    let want = 100.0 * (1.0f64 - 2.0).exp();
    assert!((bleu4(&short, &r).unwrap() - want).abs() < 1e-9);
    assert_eq!(bleu4(&[vec![]], &r).unwrap(), 0.0);
    assert!(bleu4(&short, &[]).is_err());
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..9)
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

proptest! {
    #[test]
    fn random_corpora_match_oracles(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        prop_assert!((bleu4(&c, &r).unwrap() - naive_bleu4(&c, &r)).abs() < 1e-9);
        prop_assert!((meteor(&c, &r).unwrap() - mean(&c, &r, naive_meteor)).abs() < 1e-9);
        prop_assert!((rouge_l(&c, &r).unwrap() - mean(&c, &r, naive_rouge_l)).abs() < 1e-9);
        prop_assert!((cider(&c, &r).unwrap() - naive_cider(&c, &r)).abs() < 1e-9);
    }
}

#[test]
fn bleu_short_candidate_hand_value() {
    let (c, r) = (vec![words("the cat sat")], vec![words("the cat sat down")]);
    // p1 = p2 = p3 = 1, p4 has no candidate 4-grams and falls to the floor.
    let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp() * (1e-9f64).powf(0.25);
    assert!((bleu4(&c, &r).unwrap() - want).abs() < 1e-12);
}

#[test]
fn meteor_single_chunk_and_reversed() {
    let s = words("a b c d");
    assert!((meteor_sentence(&s, &s) - 0.9921875).abs() < 1e-15);
    let rev: Vec<String> = s.iter().rev().cloned().collect();
    // four matches in four chunks: frag = 1, P = R = 1
    assert!((meteor_sentence(&rev, &s) - 0.5).abs() < 1e-15);
    assert_eq!(meteor_sentence(&words("x y"), &s), 0.0);
}

#[test]
fn rouge_subsequence_hand_value() {
    let (c, r) = (words("a c e"), words("a b c d e"));
    let (p, rc) = (1.0, 0.6);
    let want = (1.0 + 1.44) * p * rc / (rc + 1.44 * p);
    assert!((rouge_l_sentence(&c, &r) - want).abs() < 1e-15);
    assert_eq!(rouge_l_sentence(&words("x y"), &r), 0.0);
}

#[test]
fn cider_self_and_disjoint() {
    let refs = vec![words("get the name"), words("set the count field"), words("count the data")];
    let self_score = cider(&refs, &refs).unwrap();
    assert!((self_score - naive_cider(&refs, &refs)).abs() < 1e-9);
    let disjoint = vec![words("x y z"), words("p q"), words("u v w")];
    assert_eq!(cider(&disjoint, &refs).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn scores_ignore_sample_order(pairs in prop::collection::vec((sentence(), sentence()), 2..6), rot in 1usize..5) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.rotate_left(k);
        r2.rotate_left(k);
        let (a, b) = (score_corpus(&c, &r).unwrap(), score_corpus(&c2, &r2).unwrap());
        prop_assert!((a.bleu4 - b.bleu4).abs() < 1e-9);
        prop_assert!((a.meteor - b.meteor).abs() < 1e-9);
        prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-9);
        prop_assert!((a.cider - b.cider).abs() < 1e-9);
        for s in [a.bleu4, a.meteor, a.rouge_l] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        }
        prop_assert!(a.cider >= 0.0);
    }

    #[test]
    fn meteor_and_rouge_zero_iff_no_overlap(c in sentence(), r in sentence()) {
        let overlap = c.iter().any(|w| r.contains(w));
        prop_assert_eq!(meteor_sentence(&c, &r) > 0.0, overlap);
        prop_assert_eq!(rouge_l_sentence(&c, &r) > 0.0, overlap);
        prop_assert!(rouge_l_sentence(&c, &r) <= 1.0 + 1e-15);
    }
}
