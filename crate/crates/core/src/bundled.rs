//! Mini corpus and knowledge bases shipped with the crate, for examples and
//! offline tests.

use std::path::Path;

use crate::corpus::{read_samples, TrainingSample};
use crate::error::Result;
use crate::kb::{annotate, partition_dataset, Source, StopWords, TripleStore};

pub const CORPUS: &str = include_str!("../data/mini_corpus.jsonl");
pub const CONCEPTNET: &str = include_str!("../data/mini_conceptnet.tsv");
pub const WORDNET: &str = include_str!("../data/mini_wordnet.tsv");

/// The raw corpus, without triples.
pub fn corpus() -> Result<Vec<TrainingSample>> {
    read_samples(CORPUS.as_bytes(), Path::new("mini_corpus.jsonl"))
}

/// ConceptNet then WordNet.
pub fn stores() -> Result<[TripleStore; 2]> {
    Ok([
        TripleStore::from_reader(
            CONCEPTNET.as_bytes(),
            Source::ConceptNet,
            Path::new("mini_conceptnet.tsv"),
        )?,
        TripleStore::from_reader(WORDNET.as_bytes(), Source::WordNet, Path::new("mini_wordnet.tsv"))?,
    ])
}

/// The corpus with extracted triples.
pub fn annotated() -> Result<Vec<TrainingSample>> {
    let mut samples = corpus()?;
    let [cn, wn] = stores()?;
    annotate(&mut samples, &[&cn, &wn], &StopWords::default());
    Ok(samples)
}

/// `(equipped, pure)` split of [`annotated`].
pub fn partitioned() -> Result<(Vec<TrainingSample>, Vec<TrainingSample>)> {
    Ok(partition_dataset(annotated()?))
}
