//! Dataset records, vocabularies, BIO answer features and padded batches.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{self, AlignedTriple, KnowledgeTriple, RelationLabel, Source};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// One QG example. Tokens are kept as given; lowercasing happens at
/// vocabulary lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub passage: Vec<String>,
    /// Inclusive token span of the answer.
    pub answer_span: (usize, usize),
    pub pos_tags: Vec<String>,
    pub ner_tags: Vec<String>,
    pub question: Vec<String>,
    pub triples: Vec<AlignedTriple>,
    /// Unrecognised JSON fields, written back unchanged.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub head: String,
    pub relation: RelationLabel,
    pub tail: String,
    pub swapped: bool,
    #[serde(default = "default_source")]
    pub source: Source,
}

fn default_source() -> Source {
    Source::ConceptNet
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<serde_json::Value>,
    passage: Vec<String>,
    answer_span: [usize; 2],
    pos: Vec<String>,
    ner: Vec<String>,
    question: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triples: Option<Vec<TripleRecord>>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.passage.len();
        let fail = |m: String| Err(Error::validation(format!("sample {}: {m}", self.id)));
        if n == 0 {
            return fail("empty passage".into());
        }
        if self.question.is_empty() {
            return fail("empty question".into());
        }
        if self.pos_tags.len() != n || self.ner_tags.len() != n {
            return fail(format!(
                "tag lengths pos={} ner={} do not match passage length {n}",
                self.pos_tags.len(),
                self.ner_tags.len()
            ));
        }
        let (s, e) = self.answer_span;
        if s > e || e >= n {
            return fail(format!("answer span ({s}, {e}) outside passage of length {n}"));
        }
        Ok(())
    }

    pub fn triple_records(&self) -> Vec<TripleRecord> {
        self.triples
            .iter()
            .map(|t| TripleRecord {
                head: t.triple.head.clone(),
                relation: t.triple.relation,
                tail: t.triple.tail.clone(),
                swapped: t.swapped,
                source: t.triple.source,
            })
            .collect()
    }

    /// Training triple chosen by relation priority.
    pub fn selected_triple(&self) -> Option<&AlignedTriple> {
        kb::select_training_triple(&self.triples)
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = SampleRecord {
            id: Some(serde_json::Value::String(self.id.clone())),
            passage: self.passage.clone(),
            answer_span: [self.answer_span.0, self.answer_span.1],
            pos: self.pos_tags.clone(),
            ner: self.ner_tags.clone(),
            question: self.question.clone(),
            triples: Some(self.triple_records()),
            extra: self.extra.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    /// Parses one JSONL record; `fallback_id` is used when the record has no `id`.
    pub fn from_json(line: &str, fallback_id: usize) -> Result<Self> {
        let rec: SampleRecord = serde_json::from_str(line)?;
        let id = match rec.id {
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => fallback_id.to_string(),
        };
        let mut sample = TrainingSample {
            id,
            passage: rec.passage,
            answer_span: (rec.answer_span[0], rec.answer_span[1]),
            pos_tags: rec.pos,
            ner_tags: rec.ner,
            question: rec.question,
            triples: Vec::new(),
            extra: rec.extra,
        };
        sample.validate()?;
        let p = kb::normalize_tokens(&sample.passage);
        let q = kb::normalize_tokens(&sample.question);
        for tr in rec.triples.unwrap_or_default() {
            let triple = KnowledgeTriple::new(&tr.head, tr.relation, &tr.tail, tr.source)?;
            let mut aligned = kb::align_one(&triple, &p, &q).ok_or_else(|| {
                Error::validation(format!(
                    "sample {}: triple ({}, {}, {}) does not align with passage/question",
                    sample.id, tr.head, tr.relation, tr.tail
                ))
            })?;
            if aligned.swapped {
                return Err(Error::validation(format!(
                    "sample {}: stored triple ({}, {}, {}) has its head in the question",
                    sample.id, tr.head, tr.relation, tr.tail
                )));
            }
            aligned.swapped = tr.swapped;
            sample.triples.push(aligned);
        }
        Ok(sample)
    }
}

pub fn read_samples<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = TrainingSample::from_json(&line, i).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(std::io::BufReader::new(f), path)
}

pub fn write_samples<W: Write>(mut w: W, samples: &[TrainingSample]) -> std::io::Result<()> {
    for s in samples {
        let line = s.to_json().map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bio {
    O,
    B,
    I,
}

impl Bio {
    /// Id in the BIO embedding table; 0 is padding.
    pub fn id(self) -> usize {
        match self {
            Bio::O => 1,
            Bio::B => 2,
            Bio::I => 3,
        }
    }

    pub const TABLE_SIZE: usize = 4;
}

pub fn bio_from_span(passage_len: usize, span: (usize, usize)) -> Result<Vec<Bio>> {
    let (s, e) = span;
    if s > e || e >= passage_len {
        return Err(Error::validation(format!(
            "answer span ({s}, {e}) outside passage of length {passage_len}"
        )));
    }
    Ok((0..passage_len)
        .map(|i| match i {
            i if i == s => Bio::B,
            i if i > s && i <= e => Bio::I,
            _ => Bio::O,
        })
        .collect())
}

/// Lookup key for model vocabularies.
pub fn token_key(tok: &str) -> String {
    tok.to_lowercase()
}

/// Word vocabulary with `<pad>`, `<unk>`, `<s>`, `</s>` at ids 0..=3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` (duplicates and reserved names skipped).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Most frequent lowercased passage and question tokens, ties broken
    /// lexicographically, at most `max_size` entries in total.
    pub fn build(samples: &[TrainingSample], max_size: usize, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in samples {
            for t in s.passage.iter().chain(&s.question) {
                *counts.entry(token_key(t)).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(RESERVED.len());
        Vocabulary::from_tokens(ranked.into_iter().take(room).map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(&token_key(token)).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.tokens)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(s)?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::validation("vocabulary does not start with the reserved tokens"));
        }
        Ok(Vocabulary::from_tokens(tokens.into_iter().skip(RESERVED.len())))
    }
}

/// Closed tag set (POS or NER) with padding at id 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagVocab {
    tags: Vec<String>,
}

impl TagVocab {
    pub fn new<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: Vec<String> = tags.into_iter().map(Into::into).collect();
        set.sort();
        set.dedup();
        let mut tags = vec!["<pad>".to_string()];
        tags.extend(set);
        TagVocab { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Result<usize> {
        self.tags
            .iter()
            .skip(1)
            .position(|t| t == tag)
            .map(|i| i + 1)
            .ok_or_else(|| Error::validation(format!("unknown tag {tag:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagVocabs {
    pub pos: TagVocab,
    pub ner: TagVocab,
}

impl TagVocabs {
    pub fn build(samples: &[TrainingSample]) -> Self {
        TagVocabs {
            pos: TagVocab::new(samples.iter().flat_map(|s| s.pos_tags.iter().cloned())),
            ner: TagVocab::new(samples.iter().flat_map(|s| s.ner_tags.iter().cloned())),
        }
    }
}

/// Token ids of the training triple of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleIds {
    pub head: Vec<usize>,
    pub relation: RelationLabel,
    /// Plain ids of the tail, as encoder input.
    pub tail: Vec<usize>,
    /// Extended-vocabulary tail ids followed by `</s>`, as generation targets.
    pub tail_target: Vec<usize>,
    pub tail_tokens: Vec<String>,
}

/// Padded batch. Every per-token row has width `max passage length`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub passage_ids: Vec<Vec<usize>>,
    pub bio_ids: Vec<Vec<usize>>,
    pub pos_ids: Vec<Vec<usize>>,
    pub ner_ids: Vec<Vec<usize>>,
    pub passage_lens: Vec<usize>,
    /// `<s> … </s>` in extended ids.
    pub question_ids: Vec<Vec<usize>>,
    pub question_lens: Vec<usize>,
    pub copy_ids: Vec<Vec<usize>>,
    /// Surface forms of extended ids `vocab_size + k`, per sample.
    pub oov: Vec<Vec<String>>,
    pub triples: Vec<Option<TripleIds>>,
    pub vocab_size: usize,
    pub sample_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.passage_ids.first().map_or(0, Vec::len)
    }

    /// Size of the extended vocabulary for row `b`.
    pub fn extended_size(&self, b: usize) -> usize {
        self.vocab_size + self.oov[b].len()
    }

    /// Maps an extended id of row `b` back to a surface token.
    pub fn surface(&self, vocab: &Vocabulary, b: usize, id: usize) -> String {
        if id >= self.vocab_size {
            self.oov[b][id - self.vocab_size].clone()
        } else {
            vocab.token(id).unwrap_or("<unk>").to_string()
        }
    }
}

fn extended_ids(tokens: &[String], vocab: &Vocabulary, oov: &[String]) -> Vec<usize> {
    tokens
        .iter()
        .map(|t| {
            let k = token_key(t);
            vocab
                .id(&k)
                .or_else(|| oov.iter().position(|o| *o == k).map(|i| vocab.len() + i))
                .unwrap_or(UNK)
        })
        .collect()
}

pub fn encode_batch(samples: &[TrainingSample], vocab: &Vocabulary, tags: &TagVocabs) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::validation("cannot encode an empty batch"));
    }
    let width = samples.iter().map(|s| s.passage.len()).max().unwrap_or(0);
    let qwidth = samples.iter().map(|s| s.question.len() + 2).max().unwrap_or(0);
    let pad_to = |mut v: Vec<usize>, w: usize| {
        v.resize(w, PAD);
        v
    };
    let mut batch = Batch {
        passage_ids: Vec::new(),
        bio_ids: Vec::new(),
        pos_ids: Vec::new(),
        ner_ids: Vec::new(),
        passage_lens: Vec::new(),
        question_ids: Vec::new(),
        question_lens: Vec::new(),
        copy_ids: Vec::new(),
        oov: Vec::new(),
        triples: Vec::new(),
        vocab_size: vocab.len(),
        sample_ids: Vec::new(),
    };
    for s in samples {
        s.validate()?;
        let mut oov: Vec<String> = Vec::new();
        let mut plain = Vec::with_capacity(s.passage.len());
        let mut copy = Vec::with_capacity(s.passage.len());
        for t in &s.passage {
            let k = token_key(t);
            match vocab.id(&k) {
                Some(id) => {
                    plain.push(id);
                    copy.push(id);
                }
                None => {
                    plain.push(UNK);
                    let slot = oov.iter().position(|o| *o == k).unwrap_or_else(|| {
                        oov.push(k.clone());
                        oov.len() - 1
                    });
                    copy.push(vocab.len() + slot);
                }
            }
        }
        let bio: Vec<usize> = bio_from_span(s.passage.len(), s.answer_span)?
            .into_iter()
            .map(Bio::id)
            .collect();
        let pos = s.pos_tags.iter().map(|t| tags.pos.id(t)).collect::<Result<Vec<_>>>()?;
        let ner = s.ner_tags.iter().map(|t| tags.ner.id(t)).collect::<Result<Vec<_>>>()?;
        let mut q = vec![BOS];
        q.extend(extended_ids(&s.question, vocab, &oov));
        q.push(EOS);

        let triple = s.selected_triple().map(|a| {
            let head = a.triple.head_tokens();
            let tail = a.triple.tail_tokens();
            let mut tail_target = extended_ids(&tail, vocab, &oov);
            tail_target.push(EOS);
            TripleIds {
                head: head.iter().map(|t| vocab.id_or_unk(t)).collect(),
                relation: a.triple.relation,
                tail: tail.iter().map(|t| vocab.id_or_unk(t)).collect(),
                tail_target,
                tail_tokens: tail,
            }
        });

        batch.passage_lens.push(s.passage.len());
        batch.passage_ids.push(pad_to(plain, width));
        batch.copy_ids.push(pad_to(copy, width));
        batch.bio_ids.push(pad_to(bio, width));
        batch.pos_ids.push(pad_to(pos, width));
        batch.ner_ids.push(pad_to(ner, width));
        batch.question_lens.push(q.len());
        batch.question_ids.push(pad_to(q, qwidth));
        batch.oov.push(oov);
        batch.triples.push(triple);
        batch.sample_ids.push(s.id.clone());
    }
    Ok(batch)
}

/// Whitespace and punctuation tokenizer; lowercases unless `keep_case`.
pub fn tokenize(text: &str, keep_case: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            out.push(std::mem::take(cur));
        }
    };
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if c.is_alphanumeric() {
            cur.push(if keep_case {
                c
            } else {
                c.to_lowercase().next().unwrap_or(c)
            });
        } else {
            // keep separators inside numbers such as 10,521.83
            let inner_num = matches!(c, '.' | ',')
                && cur.chars().last().is_some_and(|p| p.is_ascii_digit())
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if inner_num || (c == '\'' && !cur.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())) {
                cur.push(c);
            } else {
                flush(&mut cur, &mut out);
                out.push(c.to_string());
            }
        }
    }
    flush(&mut cur, &mut out);
    out
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "its", "his", "her", "their",
];
const PREPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "by", "for", "with", "from", "to", "into", "during", "after", "before", "through", "near",
    "until", "upon",
];

/// Heuristic POS/NER tags for synthetic data: numbers, capitalised words,
/// punctuation, a few closed classes and suffix rules. Expects cased tokens.
pub fn coarse_tags(tokens: &[String]) -> (Vec<String>, Vec<String>) {
    let mut pos = Vec::with_capacity(tokens.len());
    let mut ner = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        let lower = t.to_lowercase();
        let is_num =
            t.chars().any(|c| c.is_ascii_digit()) && t.chars().all(|c| c.is_ascii_digit() || c == ',' || c == '.');
        let is_punct = !t.chars().any(char::is_alphanumeric);
        let capital = t.chars().next().is_some_and(char::is_uppercase);
        let p = if is_num {
            "CD"
        } else if is_punct {
            "PUNCT"
        } else if DETERMINERS.contains(&lower.as_str()) {
            "DT"
        } else if PREPOSITIONS.contains(&lower.as_str()) {
            "IN"
        } else if lower == "and" || lower == "or" {
            "CC"
        } else if capital && i > 0 {
            "NNP"
        } else if lower.ends_with("ed") || lower.ends_with("ing") {
            "VB"
        } else if lower.ends_with("ly") {
            "RB"
        } else {
            "NN"
        };
        let n = if is_num {
            "NUMBER"
        } else if capital && i > 0 && p == "NNP" {
            "ENTITY"
        } else {
            "O"
        };
        pos.push(p.to_string());
        ner.push(n.to_string());
    }
    (pos, ner)
}

/// Count of each relation label over the given samples' triples.
pub fn relation_counts(samples: &[TrainingSample]) -> BTreeMap<RelationLabel, usize> {
    let mut m = BTreeMap::new();
    for t in samples.iter().flat_map(|s| &s.triples) {
        *m.entry(t.triple.relation).or_default() += 1;
    }
    m
}
