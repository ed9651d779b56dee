mod common;

use common::bleu_fixture::{DENSE, DENSE_NLTK, SPARSE, SPARSE_NLTK};
use kqg::metrics::{bleu, evaluate, lcs_len, meteor_lite, rouge_l, rouge_l_sentence, tg_bleu1};
use proptest::prelude::*;

fn corpus(pairs: &[(&str, &str)]) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let split = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    pairs.iter().map(|(h, r)| (split(h), split(r))).unzip()
}

#[test]
fn bleu_matches_reference_implementation() {
    for (pairs, expected) in [(SPARSE, SPARSE_NLTK), (DENSE, DENSE_NLTK)] {
        let (h, r) = corpus(&pairs);
        for n in 1..=4 {
            let got = bleu(&h, &r, n).unwrap();
            assert!(
                (got - expected[n - 1]).abs() < 1e-9,
                "BLEU-{n}: {got} vs {}",
                expected[n - 1]
            );
        }
    }
}

#[test]
fn zero_overlap_scores_zero() {
    let (h, r) = corpus(&[("a b c", "d e f")]);
    assert_eq!(bleu(&h, &r, 1).unwrap(), 0.0);
    assert_eq!(rouge_l(&h, &r).unwrap(), 0.0);
    assert_eq!(meteor_lite(&h, &r).unwrap(), 0.0);
}

#[test]
fn identical_corpus_scores_100_everywhere() {
    let (_, r) = corpus(&DENSE);
    let rep = evaluate(&r, &r).unwrap();
    for v in [rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.rouge_l, rep.meteor] {
        assert!((v - 100.0).abs() < 1e-9, "{rep:?}");
    }
    assert_eq!(rep.samples, 5);
}

#[test]
fn tg_bleu1_delegates() {
    let (h, r) = corpus(&SPARSE);
    assert_eq!(tg_bleu1(&h, &r).unwrap(), bleu(&h, &r, 1).unwrap());
}

#[test]
fn empty_hypothesis_scores_zero_rouge() {
    let empty: Vec<&str> = Vec::new();
    assert_eq!(rouge_l_sentence(&empty, &["a"]), 0.0);
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..9)
        .prop_map(|v| v.into_iter().map(str::to_owned).collect())
}

fn pairs() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
    prop::collection::vec((sentence(), sentence()), 1..7)
}

proptest! {
    #[test]
    fn scores_are_bounded(ps in pairs()) {
        let (h, r): (Vec<_>, Vec<_>) = ps.into_iter().unzip();
        let rep = evaluate(&h, &r).unwrap();
        for v in [rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.rouge_l, rep.meteor] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v), "{rep:?}");
        }
    }

    #[test]
    fn scores_ignore_sample_order(ps in pairs(), seed in any::<u64>()) {
        let (h, r): (Vec<_>, Vec<_>) = ps.iter().cloned().unzip();
        let mut shuffled = ps.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % (i + 1));
        }
        let (hs, rs): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let a = evaluate(&h, &r).unwrap();
        let b = evaluate(&hs, &rs).unwrap();
        for (x, y) in [(a.bleu1, b.bleu1), (a.bleu2, b.bleu2), (a.bleu3, b.bleu3), (a.bleu4, b.bleu4)] {
            prop_assert_eq!(x, y);
        }
        prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-9);
        prop_assert!((a.meteor - b.meteor).abs() < 1e-9);
    }

    #[test]
    fn appending_a_reference_token_keeps_rouge_recall(h in sentence(), r in sentence(), pick in any::<prop::sample::Index>()) {
        let before = lcs_len(&h, &r);
        let mut longer = h.clone();
        longer.push(r[pick.index(r.len())].clone());
        prop_assert!(lcs_len(&longer, &r) >= before);
    }
}
