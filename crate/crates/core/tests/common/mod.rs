#![allow(dead_code)]

use kqg::corpus::{coarse_tags, encode_batch, Batch, TagVocabs, TrainingSample, Vocabulary};
use kqg::kb::{align_one, normalize_tokens, KnowledgeTriple, RelationLabel, Source};
use kqg::model::{Model, ModelConfig};
use kqg::nn::ParameterSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Sample with coarse tags and, optionally, one triple `(head, rel, tail)`.
pub fn sample(
    id: &str,
    passage: &str,
    span: (usize, usize),
    question: &str,
    triple: Option<(&str, RelationLabel, &str)>,
) -> TrainingSample {
    let p = toks(passage);
    let q = toks(question);
    let (pos, ner) = coarse_tags(&p);
    let triples = triple
        .map(|(h, r, t)| {
            let kt = KnowledgeTriple::new(h, r, t, Source::ConceptNet).unwrap();
            vec![align_one(&kt, &normalize_tokens(&p), &normalize_tokens(&q)).expect("triple aligns")]
        })
        .unwrap_or_default();
    TrainingSample {
        id: id.into(),
        passage: p,
        answer_span: span,
        pos_tags: pos,
        ner_tags: ner,
        question: q,
        triples,
        extra: Default::default(),
    }
}

/// Two equipped samples; "zyx" is a passage-only token outside the vocabulary.
pub fn toy_pair() -> Vec<TrainingSample> {
    vec![
        sample(
            "a",
            "the city council governs Paris",
            (4, 4),
            "which governing body rules ?",
            Some(("council", RelationLabel::RelatedTo, "governing")),
        ),
        sample(
            "b",
            "a zyx cat sat on mats",
            (1, 2),
            "what zyx animal sat ?",
            Some(("cat", RelationLabel::IsA, "animal")),
        ),
    ]
}

pub fn vocab_for(samples: &[TrainingSample], exclude: &[&str]) -> Vocabulary {
    let mut words: Vec<String> = samples
        .iter()
        .flat_map(|s| s.passage.iter().chain(&s.question))
        .map(|t| t.to_lowercase())
        .filter(|t| !exclude.contains(&t.as_str()))
        .collect();
    words.sort();
    words.dedup();
    Vocabulary::from_tokens(words)
}

pub fn tiny_config(vocab: &Vocabulary, tags: &TagVocabs, hidden: usize, word_dim: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        pos_size: tags.pos.len(),
        ner_size: tags.ner.len(),
        word_dim,
        bio_dim: 2,
        pos_dim: 2,
        ner_dim: 2,
        hidden,
        layers: 2,
        dropout: 0.0,
    }
}

pub struct Setup {
    pub model: Model,
    pub params: ParameterSet,
    pub batch: Batch,
    pub vocab: Vocabulary,
    pub tags: TagVocabs,
}

pub fn setup(samples: &[TrainingSample], exclude: &[&str], hidden: usize, word_dim: usize, seed: u64) -> Setup {
    let vocab = vocab_for(samples, exclude);
    let tags = TagVocabs::build(samples);
    let mut params = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_config(&vocab, &tags, hidden, word_dim), &mut params, &mut rng).unwrap();
    let batch = encode_batch(samples, &vocab, &tags).unwrap();
    Setup {
        model,
        params,
        batch,
        vocab,
        tags,
    }
}

/// Brute-force extraction: scans every triple of every store in both
/// orientations without using the token index.
pub mod oracle {
    use std::collections::HashSet;

    use kqg::kb::{AlignedTriple, KnowledgeTriple, StopWords, TripleStore};

    fn norm(tok: &str) -> String {
        tok.chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect()
    }

    fn first_run(hay: &[String], needle: &[String]) -> Option<Vec<usize>> {
        if needle.is_empty() {
            return None;
        }
        (0..hay.len())
            .find(|&s| s + needle.len() <= hay.len() && (0..needle.len()).all(|k| hay[s + k] == needle[k]))
            .map(|s| (s..s + needle.len()).collect())
    }

    fn words(concept: &str) -> Vec<String> {
        concept.split(' ').map(str::to_owned).collect()
    }

    pub fn extract(
        passage: &[String],
        question: &[String],
        stores: &[&TripleStore],
        stop: &StopWords,
    ) -> Vec<AlignedTriple> {
        let p: Vec<String> = passage.iter().map(|t| norm(t)).collect();
        let q: Vec<String> = question.iter().map(|t| norm(t)).collect();
        let content: HashSet<&String> = p.iter().filter(|t| !t.is_empty() && !stop.contains(t)).collect();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for store in stores {
            for tr in store.triples() {
                let (h, t) = (words(&tr.head), words(&tr.tail));
                if !h.iter().chain(&t).any(|w| content.contains(w)) {
                    continue;
                }
                let straight = first_run(&p, &h).zip(first_run(&q, &t));
                let found = match straight {
                    Some((hp, tp)) => Some((tr.clone(), hp, tp, false)),
                    None => first_run(&p, &t).zip(first_run(&q, &h)).map(|(hp, tp)| {
                        let flipped = KnowledgeTriple {
                            head: tr.tail.clone(),
                            relation: tr.relation,
                            tail: tr.head.clone(),
                            source: tr.source,
                        };
                        (flipped, hp, tp, true)
                    }),
                };
                if let Some((triple, head_positions, tail_positions, swapped)) = found {
                    if seen.insert((triple.head.clone(), triple.relation, triple.tail.clone())) {
                        out.push(AlignedTriple {
                            triple,
                            head_positions,
                            tail_positions,
                            swapped,
                        });
                    }
                }
            }
        }
        out
    }
}

pub mod bleu_fixture {
    /// No 4-gram overlap, so orders 2..4 are smoothed when BLEU-4 is requested.
    pub const SPARSE: [(&str, &str); 5] = [
        ("what is the capital of france ?", "what is the main city of france ?"),
        ("who wrote the play hamlet ?", "which writer wrote hamlet ?"),
        ("when did the war begin ?", "when did the battle start ?"),
        (
            "which body governs the city ?",
            "which governing bodies have legislative veto power ?",
        ),
        ("where did the animal sleep today ?", "where did the cat sleep ?"),
    ];

    pub const DENSE: [(&str, &str); 5] = [
        (
            "what is the capital of france ?",
            "what is the capital city of france ?",
        ),
        ("who wrote the play hamlet in london ?", "who wrote the play hamlet ?"),
        ("when did the war begin in europe ?", "when did the war begin ?"),
        (
            "which governing bodies have veto power ?",
            "which governing bodies have legislative veto power ?",
        ),
        ("where did the cat sleep last night ?", "where did the cat sleep ?"),
    ];

    // Reference values from NLTK 3.10 corpus_bleu with uniform weights; the
    // smoothed entry uses SmoothingFunction().method2.
    pub const SPARSE_NLTK: [f64; 4] = [
        60.57707715477151,
        44.23924216719897,
        32.55069920156333,
        22.085193553458524,
    ];
    pub const DENSE_NLTK: [f64; 4] = [
        84.21052631578947,
        74.9268649265355,
        66.99917424535477,
        56.87123054249324,
    ];
}
