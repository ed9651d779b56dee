use std::cmp::Ordering;

use super::{sequence_nll, DecoderState, KnowledgeMemory, Model, PassageMemory, StepOutput};
use crate::corpus::{Batch, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, ParameterSet, Tape, Var};

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// BiLSTM states, `L × D`.
    pub h: Var,
    /// Gated blend `g ⊙ f + (1 − g) ⊙ h`, `L × D`.
    pub h_hat: Var,
    /// Gates, `L × 1`.
    pub g: Var,
    /// Self-matched contexts, `L × D`.
    pub f: Var,
}

/// A decoded question in extended ids, without `</s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^length_penalty`, `len` counting `</s>` when emitted.
    pub score: f64,
}

struct Live {
    ids: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

fn normalized(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

impl Model {
    /// Feature embeddings, stacked BiLSTM and gated self-attention for row `b`
    /// (trimmed to its true length).
    pub fn encode_passage(&self, t: &mut Tape, ctx: &mut ForwardCtx, batch: &Batch, b: usize) -> Result<EncoderOutput> {
        let len = batch.passage_lens[b];
        let lookup = |t: &mut Tape, table, ids: &[usize]| {
            let tab = t.param(table);
            t.gather(tab, &ids[..len])
        };
        let w = lookup(t, self.word_emb, &batch.passage_ids[b])?;
        let bio = lookup(t, self.bio_emb, &batch.bio_ids[b])?;
        let ner = lookup(t, self.ner_emb, &batch.ner_ids[b])?;
        let pos = lookup(t, self.pos_emb, &batch.pos_ids[b])?;
        let e = t.concat_cols(&[w, bio, ner, pos])?;
        let h = self.encoder.forward(t, ctx, e)?;
        let (f, g) = self.self_match(t, h)?;
        let gf = t.mul(f, g)?;
        let keep = t.one_minus(g)?;
        let gh = t.mul(h, keep)?;
        let h_hat = t.add(gf, gh)?;
        Ok(EncoderOutput { h, h_hat, g, f })
    }

    /// Bilinear self-matching `softmax(H W Hᵀ) H` and the per-position gate
    /// `sigmoid([h_i; f_i] w + b)`.
    pub fn self_match(&self, t: &mut Tape, h: Var) -> Result<(Var, Var)> {
        let w = t.param(self.match_w);
        let hw = t.matmul(h, w)?;
        let ht = t.transpose(h)?;
        let scores = t.matmul(hw, ht)?;
        let a = t.softmax(scores)?;
        let f = t.matmul(a, h)?;
        let hf = t.concat_cols(&[h, f])?;
        let z = self.gate.forward(t, hf)?;
        let g = t.sigmoid(z)?;
        Ok((f, g))
    }

    /// Initial QG decoder state from the top-layer backward state at position 0.
    pub fn qg_init(&self, t: &mut Tape, enc: &EncoderOutput) -> Result<DecoderState> {
        let half = self.config.hidden / 2;
        let first = t.row(enc.h, 0)?;
        let bwd = t.slice_cols(first, half, half)?;
        self.qg.init_state(t, bwd)
    }

    pub fn qg_step(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        y_emb: Var,
        prev: &DecoderState,
        passage: &PassageMemory,
        knowledge: Option<&KnowledgeMemory>,
    ) -> Result<StepOutput> {
        let mem = knowledge.map(|m| (m.k, m.k_t));
        self.qg.step(t, ctx, &self.w_h, y_emb, prev, passage, mem)
    }

    /// Teacher-forced QG loss over `target = <s> … </s>` (extended ids).
    pub fn qg_teacher_forced(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        enc: &EncoderOutput,
        passage: &PassageMemory,
        knowledge: Option<&KnowledgeMemory>,
        target: &[usize],
    ) -> Result<(Var, Vec<StepOutput>)> {
        if target.len() < 2 {
            return Err(Error::validation("question target needs <s> and </s>"));
        }
        let n = target.len() - 1;
        let emb = self.embed_words(t, &target[..n])?;
        let mut state = self.qg_init(t, enc)?;
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let y = t.row(emb, i)?;
            let out = self.qg_step(t, ctx, y, &state, passage, knowledge)?;
            state = out.state.clone();
            steps.push(out);
        }
        let dists: Vec<Var> = steps.iter().map(|s| s.dist).collect();
        let loss = sequence_nll(t, &dists, &target[1..])?;
        Ok((loss, steps))
    }

    fn prepare_decode<'p>(
        &self,
        t: &mut Tape<'p>,
        batch: &Batch,
        b: usize,
        use_knowledge: bool,
    ) -> Result<(PassageMemory, Option<KnowledgeMemory>, DecoderState)> {
        let mut ctx = ForwardCtx::eval();
        let enc = self.encode_passage(t, &mut ctx, batch, b)?;
        let passage = PassageMemory::new(t, enc.h_hat, batch, b)?;
        let mem = match (&batch.triples[b], use_knowledge) {
            (Some(ids), true) => Some(self.knowledge_memory(t, &mut ctx, &ids.head, ids.relation, &ids.tail)?),
            _ => None,
        };
        let init = self.qg_init(t, &enc)?;
        Ok((passage, mem, init))
    }

    /// Argmax decoding; ties go to the lower id.
    pub fn greedy(
        &self,
        params: &ParameterSet,
        batch: &Batch,
        b: usize,
        use_knowledge: bool,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<Hypothesis> {
        let mut t = Tape::inference(params);
        let mut ctx = ForwardCtx::eval();
        let (passage, mem, mut state) = self.prepare_decode(&mut t, batch, b, use_knowledge)?;
        let mut ids = Vec::new();
        let mut log_prob = 0.0;
        let mut prev = BOS;
        for _ in 0..max_len {
            let y = self.embed_words(&mut t, &[prev])?;
            let out = self.qg_step(&mut t, &mut ctx, y, &state, &passage, mem.as_ref())?;
            let dist = t.value(out.dist).data();
            let (tok, p) =
                dist.iter().copied().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, p)| if p > best.1 { (i, p) } else { best },
                );
            log_prob += p.ln();
            state = out.state;
            if tok == EOS {
                return Ok(Hypothesis {
                    score: normalized(log_prob, ids.len() + 1, length_penalty),
                    ids,
                    log_prob,
                });
            }
            ids.push(tok);
            prev = tok;
        }
        Ok(Hypothesis {
            score: normalized(log_prob, ids.len(), length_penalty),
            ids,
            log_prob,
        })
    }

    /// Beam search over the mixture distribution. Hypotheses end at `</s>` or
    /// after `max_len` tokens; the best length-normalised one is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn beam_search(
        &self,
        params: &ParameterSet,
        batch: &Batch,
        b: usize,
        use_knowledge: bool,
        beam: usize,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<Hypothesis> {
        if beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        let mut t = Tape::inference(params);
        let mut ctx = ForwardCtx::eval();
        let (passage, mem, init) = self.prepare_decode(&mut t, batch, b, use_knowledge)?;
        let mut live = vec![Live {
            ids: Vec::new(),
            log_prob: 0.0,
            state: init,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..max_len {
            // (total, p, hypothesis, token)
            let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
            let mut states = Vec::with_capacity(live.len());
            for (hi, h) in live.iter().enumerate() {
                let prev = h.ids.last().copied().unwrap_or(BOS);
                let y = self.embed_words(&mut t, &[prev])?;
                let out = self.qg_step(&mut t, &mut ctx, y, &h.state, &passage, mem.as_ref())?;
                for (tok, &p) in t.value(out.dist).data().iter().enumerate() {
                    if p > 0.0 {
                        cands.push((h.log_prob + p.ln(), p, hi, tok));
                    }
                }
                states.push(out.state);
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next = Vec::new();
            for &(total, _, hi, tok) in cands.iter().take(beam) {
                let mut ids = live[hi].ids.clone();
                if tok == EOS {
                    finished.push(Hypothesis {
                        score: normalized(total, ids.len() + 1, length_penalty),
                        ids,
                        log_prob: total,
                    });
                } else {
                    ids.push(tok);
                    next.push(Live {
                        ids,
                        log_prob: total,
                        state: states[hi].clone(),
                    });
                }
            }
            live = next;
            if live.is_empty() || finished.len() >= beam {
                live.clear();
                break;
            }
        }
        for h in live {
            finished.push(Hypothesis {
                score: normalized(h.log_prob, h.ids.len(), length_penalty),
                ids: h.ids,
                log_prob: h.log_prob,
            });
        }
        finished
            .into_iter()
            .reduce(|best, h| if h.score > best.score { h } else { best })
            .ok_or_else(|| Error::Numerical("beam search produced no hypothesis".into()))
    }
}
