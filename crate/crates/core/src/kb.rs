//! Knowledge-triple extraction: KB loading, candidate retrieval, the
//! passage/question alignment filter, source merging, triple selection and
//! corpus statistics.
//!
//! Concepts and tokens are compared after [`normalize_token`]: lowercase,
//! non-alphanumeric characters removed. A concept matches when all of its
//! tokens occur contiguously. There is no lemmatisation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TrainingSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    ConceptNet,
    WordNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationLabel {
    Synonymy,
    RelatedTo,
    IsA,
    Hypernymy,
    Hyponymy,
    Others,
}

impl RelationLabel {
    /// Class order, which is also the training-triple priority order.
    pub const ALL: [RelationLabel; 6] = [
        RelationLabel::Synonymy,
        RelationLabel::RelatedTo,
        RelationLabel::IsA,
        RelationLabel::Hypernymy,
        RelationLabel::Hyponymy,
        RelationLabel::Others,
    ];

    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Maps a raw KB relation name onto a label; unknown names become `Others`.
    ///
    /// Case, `/r/` prefixes and `_`/`-`/space separators are ignored, and the
    /// usual WordNet/ConceptNet spellings are accepted.
    pub fn from_raw(raw: &str) -> Self {
        let key: String = raw
            .trim()
            .trim_start_matches("/r/")
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "synonymy" | "synonym" | "synonyms" => RelationLabel::Synonymy,
            "relatedto" | "related" => RelationLabel::RelatedTo,
            "isa" => RelationLabel::IsA,
            "hypernymy" | "hypernym" | "hypernyms" => RelationLabel::Hypernymy,
            "hyponymy" | "hyponym" | "hyponyms" => RelationLabel::Hyponymy,
            _ => RelationLabel::Others,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationLabel::Synonymy => "Synonymy",
            RelationLabel::RelatedTo => "RelatedTo",
            RelationLabel::IsA => "IsA",
            RelationLabel::Hypernymy => "Hypernymy",
            RelationLabel::Hyponymy => "Hyponymy",
            RelationLabel::Others => "Others",
        }
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationLabel {
    type Err = Error;

    /// Strict parse of a canonical label name.
    fn from_str(s: &str) -> Result<Self> {
        RelationLabel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown relation label {s:?}")))
    }
}

/// Lowercases and drops every non-alphanumeric character.
pub fn normalize_token(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Splits a concept on whitespace and underscores and normalises each token.
pub fn concept_tokens(concept: &str) -> Vec<String> {
    concept
        .split(|c: char| c.is_whitespace() || c == '_')
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    /// Normalised tokens joined by single spaces.
    pub head: String,
    pub relation: RelationLabel,
    pub tail: String,
    pub source: Source,
}

impl KnowledgeTriple {
    /// Normalises both concepts; fails when either ends up empty.
    pub fn new(head: &str, relation: RelationLabel, tail: &str, source: Source) -> Result<Self> {
        let h = concept_tokens(head);
        let t = concept_tokens(tail);
        if h.is_empty() || t.is_empty() {
            return Err(Error::validation(format!(
                "empty concept in triple ({head:?}, {relation}, {tail:?})"
            )));
        }
        Ok(KnowledgeTriple {
            head: h.join(" "),
            relation,
            tail: t.join(" "),
            source,
        })
    }

    pub fn head_tokens(&self) -> Vec<String> {
        self.head.split(' ').map(str::to_owned).collect()
    }

    pub fn tail_tokens(&self) -> Vec<String> {
        self.tail.split(' ').map(str::to_owned).collect()
    }

    fn key(&self) -> (&str, RelationLabel, &str) {
        (&self.head, self.relation, &self.tail)
    }

    fn swapped(&self) -> Self {
        KnowledgeTriple {
            head: self.tail.clone(),
            relation: self.relation,
            tail: self.head.clone(),
            source: self.source,
        }
    }
}

/// Deduplicated triples plus token indexes over both concepts.
///
/// Read-only after construction, so it can be shared across threads.
#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    triples: Vec<KnowledgeTriple>,
    seen: HashSet<KnowledgeTriple>,
    head_index: HashMap<String, Vec<usize>>,
    tail_index: HashMap<String, Vec<usize>>,
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when the triple was already present.
    pub fn insert(&mut self, triple: KnowledgeTriple) -> bool {
        if self.seen.contains(&triple) {
            return false;
        }
        let id = self.triples.len();
        for tok in BTreeSet::from_iter(triple.head_tokens()) {
            self.head_index.entry(tok).or_default().push(id);
        }
        for tok in BTreeSet::from_iter(triple.tail_tokens()) {
            self.tail_index.entry(tok).or_default().push(id);
        }
        self.seen.insert(triple.clone());
        self.triples.push(triple);
        true
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[KnowledgeTriple] {
        &self.triples
    }

    pub fn contains(&self, t: &KnowledgeTriple) -> bool {
        self.seen.contains(t)
    }

    /// Ids of triples with `token` in their head (insertion order).
    pub fn by_head_token(&self, token: &str) -> &[usize] {
        self.head_index.get(token).map_or(&[], Vec::as_slice)
    }

    /// Ids of triples with `token` in their tail (insertion order).
    pub fn by_tail_token(&self, token: &str) -> &[usize] {
        self.tail_index.get(token).map_or(&[], Vec::as_slice)
    }

    /// Parses `head<TAB>relation<TAB>tail` lines. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_reader<R: BufRead>(reader: R, source: Source, origin: &Path) -> Result<Self> {
        let mut store = TripleStore::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                msg,
            };
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let triple = KnowledgeTriple::new(fields[0], RelationLabel::from_raw(fields[1]), fields[2], source)
                .map_err(|e| parse_err(e.to_string()))?;
            store.insert(triple);
        }
        Ok(store)
    }
}

pub fn load_knowledge_base(path: impl AsRef<Path>, source: Source) -> Result<TripleStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    TripleStore::from_reader(std::io::BufReader::new(file), source, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        StopWords(words.into_iter().map(|w| normalize_token(w.as_ref())).collect())
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.0.contains(normalized)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for StopWords {
    /// The bundled list of common English function words.
    fn default() -> Self {
        StopWords::from_words(
            include_str!("../data/stopwords.txt")
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }
}

/// Every triple with a head or tail token equal to a non-stop passage token,
/// in store order.
///
/// Tail hits are included so that triples stated in the reverse direction can
/// still be swapped by [`align_filter`].
pub fn retrieve_candidates(passage: &[String], stopwords: &StopWords, store: &TripleStore) -> Vec<KnowledgeTriple> {
    let mut ids = BTreeSet::<usize>::new();
    for tok in passage.iter().map(|t| normalize_token(t)) {
        if tok.is_empty() || stopwords.contains(&tok) {
            continue;
        }
        ids.extend(store.by_head_token(&tok));
        ids.extend(store.by_tail_token(&tok));
    }
    ids.into_iter().map(|i| store.triples[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedTriple {
    /// Oriented so the head lies in the passage and the tail in the question.
    pub triple: KnowledgeTriple,
    pub head_positions: Vec<usize>,
    pub tail_positions: Vec<usize>,
    pub swapped: bool,
}

/// Start index of the first contiguous occurrence of `needle` in `haystack`.
pub fn find_span(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn positions(haystack: &[String], needle: &[String]) -> Option<Vec<usize>> {
    find_span(haystack, needle).map(|s| (s..s + needle.len()).collect())
}

/// Orients `triple` against a sample, preferring the stored direction.
pub fn align_one(triple: &KnowledgeTriple, passage_norm: &[String], question_norm: &[String]) -> Option<AlignedTriple> {
    let h = triple.head_tokens();
    let t = triple.tail_tokens();
    if let (Some(hp), Some(tp)) = (positions(passage_norm, &h), positions(question_norm, &t)) {
        return Some(AlignedTriple {
            triple: triple.clone(),
            head_positions: hp,
            tail_positions: tp,
            swapped: false,
        });
    }
    if let (Some(hp), Some(tp)) = (positions(passage_norm, &t), positions(question_norm, &h)) {
        return Some(AlignedTriple {
            triple: triple.swapped(),
            head_positions: hp,
            tail_positions: tp,
            swapped: true,
        });
    }
    None
}

pub fn normalize_tokens(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| normalize_token(t)).collect()
}

/// Keeps candidates whose head occurs in the passage and tail in the
/// question, swapping reversed ones; everything else is dropped.
pub fn align_filter(candidates: &[KnowledgeTriple], passage: &[String], question: &[String]) -> Vec<AlignedTriple> {
    let p = normalize_tokens(passage);
    let q = normalize_tokens(question);
    candidates.iter().filter_map(|c| align_one(c, &p, &q)).collect()
}

/// Concatenation with later duplicates of `(head, relation, tail)` removed.
pub fn merge_dedup(a: Vec<AlignedTriple>, b: Vec<AlignedTriple>) -> Vec<AlignedTriple> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(a.len() + b.len());
    for t in a.into_iter().chain(b) {
        let (h, r, tl) = t.triple.key();
        if seen.insert((h.to_owned(), r, tl.to_owned())) {
            out.push(t);
        }
    }
    out
}

/// Highest-priority relation wins (Synonymy first); ties go to list order.
pub fn select_training_triple(aligned: &[AlignedTriple]) -> Option<&AlignedTriple> {
    aligned.iter().min_by_key(|t| t.triple.relation.index())
}

/// Full per-sample pipeline: retrieve, align and merge across `stores` in order.
pub fn extract_for_sample(
    passage: &[String],
    question: &[String],
    stores: &[&TripleStore],
    stopwords: &StopWords,
) -> Vec<AlignedTriple> {
    stores.iter().fold(Vec::new(), |acc, store| {
        let cands = retrieve_candidates(passage, stopwords, store);
        merge_dedup(acc, align_filter(&cands, passage, question))
    })
}

/// Replaces every sample's triples with freshly extracted ones.
pub fn annotate(samples: &mut [TrainingSample], stores: &[&TripleStore], stopwords: &StopWords) {
    for s in samples {
        s.triples = extract_for_sample(&s.passage, &s.question, stores, stopwords);
    }
}

/// Splits samples by whether they carry at least one aligned triple.
pub fn partition_dataset(samples: Vec<TrainingSample>) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    samples.into_iter().partition(|s| !s.triples.is_empty())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_samples: usize,
    pub equipped_count: usize,
    pub pure_count: usize,
    pub equipped_fraction: f64,
    pub triples_per_equipped_sample: f64,
    pub relation_histogram: BTreeMap<RelationLabel, f64>,
    /// Equipped samples with at least one triple from each source.
    pub per_source_equipped: BTreeMap<Source, usize>,
}

pub fn stats_report(equipped: &[TrainingSample], pure: &[TrainingSample]) -> StatsReport {
    let total = equipped.len() + pure.len();
    let n_triples: usize = equipped.iter().map(|s| s.triples.len()).sum();
    let mut counts: BTreeMap<RelationLabel, usize> = BTreeMap::new();
    let mut per_source: BTreeMap<Source, usize> = BTreeMap::new();
    for s in equipped.iter().chain(pure) {
        let mut sources = BTreeSet::new();
        for t in &s.triples {
            *counts.entry(t.triple.relation).or_default() += 1;
            sources.insert(t.triple.source);
        }
        for src in sources {
            *per_source.entry(src).or_default() += 1;
        }
    }
    let all: usize = counts.values().sum();
    let relation_histogram = if all == 0 {
        BTreeMap::new()
    } else {
        RelationLabel::ALL
            .into_iter()
            .map(|l| (l, counts.get(&l).copied().unwrap_or(0) as f64 / all as f64))
            .collect()
    };
    StatsReport {
        total_samples: total,
        equipped_count: equipped.len(),
        pure_count: pure.len(),
        equipped_fraction: if total == 0 {
            0.0
        } else {
            equipped.len() as f64 / total as f64
        },
        triples_per_equipped_sample: if equipped.is_empty() {
            0.0
        } else {
            n_triples as f64 / equipped.len() as f64
        },
        relation_histogram,
        per_source_equipped: per_source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn kt(h: &str, r: RelationLabel, t: &str) -> KnowledgeTriple {
        KnowledgeTriple::new(h, r, t, Source::ConceptNet).unwrap()
    }

    fn store_from(text: &str) -> Result<TripleStore> {
        TripleStore::from_reader(text.as_bytes(), Source::ConceptNet, Path::new("mem.tsv"))
    }

    #[test]
    fn parses_council_line() {
        let s = store_from("council\tRelatedTo\tgoverning\n").unwrap();
        assert_eq!(s.triples(), &[kt("council", RelationLabel::RelatedTo, "governing")]);
    }

    #[test]
    fn empty_and_duplicate_input() {
        assert_eq!(store_from("").unwrap().len(), 0);
        let s = store_from("a\tIsA\tb\na\tIsA\tb\n# comment\n\n").unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = store_from("a\tIsA\tb\nbroken line\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn relation_mapping() {
        assert_eq!(RelationLabel::from_raw("/r/RelatedTo"), RelationLabel::RelatedTo);
        assert_eq!(RelationLabel::from_raw("hypernym"), RelationLabel::Hypernymy);
        assert_eq!(RelationLabel::from_raw("SYNONYM"), RelationLabel::Synonymy);
        assert_eq!(RelationLabel::from_raw("PartOf"), RelationLabel::Others);
    }

    #[test]
    fn multiword_concepts_normalised() {
        let t = kt("Legislative_Bodies", RelationLabel::Others, "x");
        assert_eq!(t.head, "legislative bodies");
    }

    #[test]
    fn retrieve_by_passage_token() {
        let s = store_from(
            "council\tRelatedTo\tgoverning\ncouncil\tRelatedTo\tcity\ncouncil\tSynonymy\tassembly\ndog\tIsA\tanimal\n",
        )
        .unwrap();
        let sw = StopWords::default();
        let got = retrieve_candidates(&toks("the Council met"), &sw, &s);
        assert_eq!(got.len(), 3);
        assert!(retrieve_candidates(&toks("the of and"), &sw, &s).is_empty());
        assert!(retrieve_candidates(&toks("zebra"), &sw, &s).is_empty());
    }

    #[test]
    fn filter_keeps_only_governing() {
        let cands = vec![
            kt("council", RelationLabel::RelatedTo, "governing"),
            kt("council", RelationLabel::RelatedTo, "city"),
            kt("council", RelationLabel::Synonymy, "assembly"),
        ];
        let p = toks("The European Parliament and the Council of the European Union have powers");
        let q = toks("which governing bodies have legislative veto power ?");
        let out = align_filter(&cands, &p, &q);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].triple, cands[0]);
        assert_eq!(out[0].head_positions, vec![5]);
        assert_eq!(out[0].tail_positions, vec![1]);
        assert!(!out[0].swapped);
        assert!(align_filter(&[], &p, &q).is_empty());
    }

    #[test]
    fn filter_swaps_reversed_triple() {
        let cands = vec![kt("governing", RelationLabel::RelatedTo, "council")];
        let out = align_filter(&cands, &toks("the council met"), &toks("which governing body"));
        assert_eq!(out.len(), 1);
        assert!(out[0].swapped);
        assert_eq!(out[0].triple, kt("council", RelationLabel::RelatedTo, "governing"));
    }

    #[test]
    fn multiword_needs_contiguity() {
        let cands = vec![kt("parliament", RelationLabel::Hypernymy, "legislative bodies")];
        let p = toks("the parliament voted");
        assert!(align_filter(&cands, &p, &toks("which legislative veto bodies")).is_empty());
        assert_eq!(
            align_filter(&cands, &p, &toks("which legislative bodies voted")).len(),
            1
        );
    }

    fn aligned(h: &str, r: RelationLabel, t: &str, src: Source) -> AlignedTriple {
        AlignedTriple {
            triple: KnowledgeTriple::new(h, r, t, src).unwrap(),
            head_positions: vec![0],
            tail_positions: vec![0],
            swapped: false,
        }
    }

    #[test]
    fn merge_rules() {
        let a = aligned("a", RelationLabel::IsA, "b", Source::ConceptNet);
        let b = aligned("a", RelationLabel::IsA, "b", Source::WordNet);
        let m = merge_dedup(vec![a.clone()], vec![b]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].triple.source, Source::ConceptNet);
        let xs: Vec<_> = ["c", "d"]
            .iter()
            .map(|h| aligned(h, RelationLabel::IsA, "z", Source::WordNet))
            .collect();
        let ys: Vec<_> = ["e", "f", "g"]
            .iter()
            .map(|h| aligned(h, RelationLabel::IsA, "z", Source::WordNet))
            .collect();
        assert_eq!(merge_dedup(xs, ys).len(), 5);
    }

    #[test]
    fn selection_priority() {
        let a = aligned("a", RelationLabel::RelatedTo, "b", Source::ConceptNet);
        let c = aligned("c", RelationLabel::Synonymy, "d", Source::ConceptNet);
        let list = vec![a.clone(), c.clone()];
        assert_eq!(select_training_triple(&list), Some(&c));
        assert_eq!(select_training_triple(std::slice::from_ref(&a)), Some(&a));
        assert_eq!(select_training_triple(&[]), None);
        let a2 = aligned("x", RelationLabel::RelatedTo, "y", Source::ConceptNet);
        assert_eq!(select_training_triple(&[a.clone(), a2]), Some(&a));
    }
}
