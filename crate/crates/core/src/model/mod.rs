//! The unified question-generation network and its two knowledge heads.
//!
//! Row convention throughout: a sequence of length `L` with width `w` is an
//! `L × w` matrix and vectors are `1 × w` rows. `D` below is
//! [`ModelConfig::hidden`]; each encoder direction has `D / 2` units so that
//! encoder outputs are `D` wide.

mod aux;
mod decoder;
mod qg;

pub use aux::{CoattentionOutput, KnowledgeMemory};
pub use decoder::{DecoderHead, DecoderState, PassageMemory, StepOutput};
pub use qg::{EncoderOutput, Hypothesis};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Bio};
use crate::error::{Error, Result};
use crate::kb::RelationLabel;
use crate::nn::{BiLstm, ForwardCtx, Group, Linear, ParamId, ParameterSet, Tape, Var, INIT_BOUND};

/// Floor applied inside `ln` for target probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub pos_size: usize,
    pub ner_size: usize,
    pub word_dim: usize,
    pub bio_dim: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return bad("hidden_size must be even and at least 2");
        }
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return bad("vocabulary holds only reserved tokens");
        }
        if self.word_dim == 0 || self.bio_dim == 0 || self.pos_dim == 0 || self.ner_dim == 0 {
            return bad("embedding sizes must be positive");
        }
        if self.pos_size == 0 || self.ner_size == 0 {
            return bad("tag vocabularies must not be empty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        self.word_dim + self.bio_dim + self.pos_dim + self.ner_dim
    }
}

/// Which auxiliary losses are active on equipped batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub no_tg: bool,
    pub no_rc: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_q: f64,
    pub l_r: f64,
    pub l_t: f64,
    pub l: f64,
}

/// Tape handles of one batch loss; `l` is `(l_q + l_r) + l_t`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_q: Var,
    pub l_r: Var,
    pub l_t: Var,
    pub l: Var,
}

impl LossVars {
    pub fn bundle(&self, t: &Tape) -> LossBundle {
        LossBundle {
            l_q: t.scalar(self.l_q),
            l_r: t.scalar(self.l_r),
            l_t: t.scalar(self.l_t),
            l: t.scalar(self.l),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub word_emb: ParamId,
    pub bio_emb: ParamId,
    pub pos_emb: ParamId,
    pub ner_emb: ParamId,
    pub encoder: BiLstm,
    pub match_w: ParamId,
    pub gate: Linear,
    /// Passage attention projection, shared by both decoders.
    pub w_h: Linear,
    pub qg: DecoderHead,
    pub rel_emb: ParamId,
    pub sep_emb: ParamId,
    pub head_tail: BiLstm,
    pub head_rel: BiLstm,
    pub rc: Linear,
    pub tg: DecoderHead,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, params: &mut ParameterSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.hidden;
        let q = Group::QgCore;
        let k = Group::Knowledge;
        let word_emb = params.add_uniform("emb.word", q, c.vocab_size, c.word_dim, INIT_BOUND, rng)?;
        let bio_emb = params.add_uniform("emb.bio", q, Bio::TABLE_SIZE, c.bio_dim, INIT_BOUND, rng)?;
        let pos_emb = params.add_uniform("emb.pos", q, c.pos_size, c.pos_dim, INIT_BOUND, rng)?;
        let ner_emb = params.add_uniform("emb.ner", q, c.ner_size, c.ner_dim, INIT_BOUND, rng)?;
        let encoder = BiLstm::new(params, "enc", q, c.feature_dim(), d / 2, c.layers, rng)?;
        let match_w = params.add_uniform("self_match.w", q, d, d, INIT_BOUND, rng)?;
        let gate = Linear::new(params, "self_match.gate", q, 2 * d, 1, true, rng)?;
        let w_h = Linear::new(params, "attn.w_h", q, d, d, false, rng)?;
        let qg = DecoderHead::new(params, "qg", q, c, d / 2, rng)?;

        let rel_emb = params.add_uniform("kn.rel_emb", k, RelationLabel::COUNT, c.word_dim, INIT_BOUND, rng)?;
        let sep_emb = params.add_uniform("kn.sep_emb", k, 1, c.word_dim, INIT_BOUND, rng)?;
        let head_tail = BiLstm::new(params, "kn.head_tail", k, c.word_dim, d / 2, c.layers, rng)?;
        let head_rel = BiLstm::new(params, "kn.head_rel", k, c.word_dim, d / 2, c.layers, rng)?;
        let rc = Linear::new(params, "kn.rc", k, 2 * d, RelationLabel::COUNT, true, rng)?;
        let tg = DecoderHead::new(params, "kn.tg", k, c, d, rng)?;
        Ok(Model {
            config,
            word_emb,
            bio_emb,
            pos_emb,
            ner_emb,
            encoder,
            match_w,
            gate,
            w_h,
            qg,
            rel_emb,
            sep_emb,
            head_tail,
            head_rel,
            rc,
            tg,
        })
    }

    /// Embeds extended ids; copy-only ids read the `<unk>` row.
    pub fn embed_words(&self, t: &mut Tape, ids: &[usize]) -> Result<Var> {
        let v = self.config.vocab_size;
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i < v { i } else { crate::corpus::UNK })
            .collect();
        let table = t.param(self.word_emb);
        t.gather(table, &ids)
    }

    /// Mean losses over `batch`. With `knowledge`, every sample must carry a
    /// training triple and the knowledge memory and active heads are used;
    /// otherwise only the QG loss is computed with a zero knowledge context.
    pub fn batch_loss(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        batch: &Batch,
        knowledge: bool,
        ablation: Ablation,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let mut lq = Vec::with_capacity(batch.len());
        let mut lr = Vec::new();
        let mut lt = Vec::new();
        for b in 0..batch.len() {
            let s = self.sample_loss(t, ctx, batch, b, knowledge, ablation)?;
            lq.push(s.0);
            lr.extend(s.1);
            lt.extend(s.2);
        }
        let l_q = t.mean_scalars(&lq)?;
        let l_r = if lr.is_empty() {
            t.zeros(1, 1)
        } else {
            t.mean_scalars(&lr)?
        };
        let l_t = if lt.is_empty() {
            t.zeros(1, 1)
        } else {
            t.mean_scalars(&lt)?
        };
        let qr = t.add(l_q, l_r)?;
        let l = t.add(qr, l_t)?;
        Ok(LossVars { l_q, l_r, l_t, l })
    }

    /// Per-sample `(L_q, L_r, L_t)`; auxiliary terms are `None` when inactive.
    pub fn sample_loss(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        batch: &Batch,
        b: usize,
        knowledge: bool,
        ablation: Ablation,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let enc = self.encode_passage(t, ctx, batch, b)?;
        let passage = PassageMemory::new(t, enc.h_hat, batch, b)?;
        let mem = if knowledge {
            let ids = batch.triples[b]
                .as_ref()
                .ok_or_else(|| Error::validation(format!("sample {} has no training triple", batch.sample_ids[b])))?;
            Some(self.knowledge_memory(t, ctx, &ids.head, ids.relation, &ids.tail)?)
        } else {
            None
        };
        let target = &batch.question_ids[b][..batch.question_lens[b]];
        let (lq, _) = self.qg_teacher_forced(t, ctx, &enc, &passage, mem.as_ref(), target)?;
        let (mut lr, mut lt) = (None, None);
        if let (Some(m), Some(ids)) = (&mem, &batch.triples[b]) {
            if !ablation.no_rc {
                let co = self.coattend(t, m.r, enc.h_hat)?;
                let probs = self.classify_relation(t, co.r_hat)?;
                lr = Some(self.rc_loss(t, probs, ids.relation)?);
            }
            if !ablation.no_tg {
                let (l, _) = self.tg_teacher_forced(t, ctx, &passage, m, &ids.tail_target)?;
                lt = Some(l);
            }
        }
        Ok((lq, lr, lt))
    }
}

/// `-(1/T) Σ ln p_t(target_t)` over per-step distributions.
pub fn sequence_nll(t: &mut Tape, dists: &[Var], targets: &[usize]) -> Result<Var> {
    if dists.len() != targets.len() || dists.is_empty() {
        return Err(Error::validation(format!(
            "nll over {} distributions and {} targets",
            dists.len(),
            targets.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&d, &y) in dists.iter().zip(targets) {
        let p = t.pick(d, 0, y)?;
        let lp = t.log_clamped(p, PROB_FLOOR)?;
        acc = Some(match acc {
            Some(a) => t.add(a, lp)?,
            None => lp,
        });
    }
    let sum = acc.expect("non-empty");
    t.affine(sum, -1.0 / dists.len() as f64, 0.0)
}
