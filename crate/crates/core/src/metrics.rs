//! Corpus-level evaluation scores, all reported as percentages.

use std::collections::HashMap;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::RelationLabel;

pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    #[serde(rename = "meteor_lite")]
    pub meteor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rc_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tg_bleu1: Option<f64>,
    pub samples: usize,
}

fn check_aligned<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::validation(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::validation("no samples to score"));
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over orders `1..=max_n` and the standard
/// brevity penalty. When some order `>= 2` has no clipped match, one is added
/// to the match and total counts of every order `>= 2`.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    check_aligned(hyps, refs)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::validation(format!("BLEU order {max_n} not in 1..=4")));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::validation("empty reference"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let smooth = matches[1..].contains(&0);
    let log_p: f64 = (0..max_n)
        .map(|i| {
            let add = if smooth && i > 0 { 1 } else { 0 };
            ((matches[i] + add) as f64 / (totals[i] + add) as f64).ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure in `[0, 1]`.
pub fn rouge_l_sentence<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence ROUGE-L.
pub fn rouge_l<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_aligned(hyps, refs)?;
    let sum: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r)).sum();
    Ok(100.0 * sum / hyps.len() as f64)
}

/// Unigram alignment statistics for one pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Exact matches first, then Porter-stem matches among the leftovers. Each
/// hypothesis token prefers the reference position right after its
/// predecessor's match, then the earliest free one.
pub fn align<S: AsRef<str>>(hyp: &[S], reference: &[S], stemmer: &Stemmer) -> Alignment {
    let mut link: Vec<Option<usize>> = vec![None; hyp.len()];
    let mut used = vec![false; reference.len()];
    let stems = |xs: &[S]| -> Vec<String> {
        xs.iter()
            .map(|x| stemmer.stem(&x.as_ref().to_lowercase()).into_owned())
            .collect()
    };
    let (hs, rs) = (stems(hyp), stems(reference));
    for stage in 0..2 {
        for i in 0..hyp.len() {
            if link[i].is_some() {
                continue;
            }
            let eq = |j: usize| {
                if stage == 0 {
                    hyp[i].as_ref() == reference[j].as_ref()
                } else {
                    hs[i] == rs[j]
                }
            };
            let after_prev = i
                .checked_sub(1)
                .and_then(|p| link[p])
                .map(|j| j + 1)
                .filter(|&j| j < reference.len() && !used[j] && eq(j));
            let pick = after_prev.or_else(|| (0..reference.len()).find(|&j| !used[j] && eq(j)));
            if let Some(j) = pick {
                link[i] = Some(j);
                used[j] = true;
            }
        }
    }
    let mut matches = 0;
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for l in &link {
        match l {
            Some(j) => {
                matches += 1;
                if prev.is_none_or(|p| p + 1 != *j) {
                    chunks += 1;
                }
                prev = Some(*j);
            }
            None => prev = None,
        }
    }
    Alignment { matches, chunks }
}

/// Sentence METEOR-lite in `[0, 1]`: recall-weighted harmonic mean times
/// `1 - 0.5 (chunks / matches)^3`; a full single-chunk match has no penalty.
pub fn meteor_sentence<S: AsRef<str>>(hyp: &[S], reference: &[S], stemmer: &Stemmer) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = align(hyp, reference, stemmer);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let full = a.matches == hyp.len() && a.matches == reference.len() && a.chunks == 1;
    let frag = if full { 0.0 } else { a.chunks as f64 / m };
    fmean * (1.0 - 0.5 * frag.powi(3))
}

/// Mean sentence METEOR-lite.
pub fn meteor_lite<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_aligned(hyps, refs)?;
    let stemmer = Stemmer::create(Algorithm::English);
    let sum: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| meteor_sentence(h, r, &stemmer))
        .sum();
    Ok(100.0 * sum / hyps.len() as f64)
}

pub fn rc_accuracy(predictions: &[RelationLabel], golds: &[RelationLabel]) -> Result<f64> {
    check_aligned(predictions, golds)?;
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// Accuracy of always predicting the most frequent gold label.
pub fn majority_baseline(golds: &[RelationLabel]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::validation("no labels"));
    }
    let mut counts = [0usize; RelationLabel::COUNT];
    for g in golds {
        counts[g.index()] += 1;
    }
    Ok(100.0 * *counts.iter().max().expect("six labels") as f64 / golds.len() as f64)
}

pub fn tg_bleu1<S: AsRef<str>>(predicted: &[Vec<S>], gold: &[Vec<S>]) -> Result<f64> {
    bleu(predicted, gold, 1)
}

/// QG scores for aligned hypothesis/reference token lists.
pub fn evaluate<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<EvalReport> {
    Ok(EvalReport {
        bleu1: bleu(hyps, refs, 1)?,
        bleu2: bleu(hyps, refs, 2)?,
        bleu3: bleu(hyps, refs, 3)?,
        bleu4: bleu(hyps, refs, 4)?,
        rouge_l: rouge_l(hyps, refs)?,
        meteor: meteor_lite(hyps, refs)?,
        rc_accuracy: None,
        tg_bleu1: None,
        samples: hyps.len(),
    })
}
