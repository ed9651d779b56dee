use super::{sequence_nll, Model, PassageMemory, StepOutput, PROB_FLOOR};
use crate::corpus::{Batch, BOS, EOS};
use crate::error::{Error, Result};
use crate::kb::RelationLabel;
use crate::nn::{ForwardCtx, ParameterSet, Tape, Var};

/// Encodings of the training triple.
#[derive(Clone, Debug)]
pub struct KnowledgeMemory {
    /// Head–tail encoding, `(|h| + 1 + |t|) × D`.
    pub r: Var,
    /// Head–relation encoding, `(|h| + 1) × D`.
    pub t: Var,
    pub t_t: Var,
    /// `T` stacked over `R`.
    pub k: Var,
    pub k_t: Var,
}

#[derive(Clone, Debug)]
pub struct CoattentionOutput {
    /// Passage-over-triple weights, `Lp × Lr`, rows sum to one.
    pub a_h: Var,
    /// Triple-over-passage weights, `Lr × Lp`, rows sum to one.
    pub a_r: Var,
    /// Co-dependent context, `Lr × 2D`: row `j` is `a_r[j] · [Ĥ | a_h · R]`.
    pub r_hat: Var,
}

impl Model {
    /// BiLSTM over `[head; <sep>; tail]` word embeddings.
    pub fn encode_head_tail(&self, t: &mut Tape, ctx: &mut ForwardCtx, head: &[usize], tail: &[usize]) -> Result<Var> {
        if head.is_empty() || tail.is_empty() {
            return Err(Error::validation("head and tail concepts must be non-empty"));
        }
        let h = self.embed_words(t, head)?;
        let sep = t.param(self.sep_emb);
        let tl = self.embed_words(t, tail)?;
        let x = t.concat_rows(&[h, sep, tl])?;
        self.head_tail.forward(t, ctx, x)
    }

    /// BiLSTM over `[head; relation]`, the relation being a single learned row.
    pub fn encode_head_relation(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        head: &[usize],
        relation: RelationLabel,
    ) -> Result<Var> {
        if head.is_empty() {
            return Err(Error::validation("head concept must be non-empty"));
        }
        let h = self.embed_words(t, head)?;
        let table = t.param(self.rel_emb);
        let r = t.gather(table, &[relation.index()])?;
        let x = t.concat_rows(&[h, r])?;
        self.head_rel.forward(t, ctx, x)
    }

    pub fn knowledge_memory(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        head: &[usize],
        relation: RelationLabel,
        tail: &[usize],
    ) -> Result<KnowledgeMemory> {
        let r = self.encode_head_tail(t, ctx, head, tail)?;
        let te = self.encode_head_relation(t, ctx, head, relation)?;
        let k = t.concat_rows(&[te, r])?;
        Ok(KnowledgeMemory {
            r,
            t: te,
            t_t: t.transpose(te)?,
            k,
            k_t: t.transpose(k)?,
        })
    }

    /// Affinity `R Ĥᵀ` normalised both ways.
    pub fn coattend(&self, t: &mut Tape, r: Var, h_hat: Var) -> Result<CoattentionOutput> {
        let ht = t.transpose(h_hat)?;
        let l = t.matmul(r, ht)?;
        let lt = t.transpose(l)?;
        let a_h = t.softmax(lt)?;
        let s = t.matmul(a_h, r)?;
        let a_r = t.softmax(l)?;
        let hs = t.concat_cols(&[h_hat, s])?;
        let r_hat = t.matmul(a_r, hs)?;
        Ok(CoattentionOutput { a_h, a_r, r_hat })
    }

    /// Mean over triple positions, one linear layer, softmax over six labels.
    pub fn classify_relation(&self, t: &mut Tape, r_hat: Var) -> Result<Var> {
        let pooled = t.mean_rows(r_hat)?;
        let z = self.rc.forward(t, pooled)?;
        t.softmax(z)
    }

    pub fn rc_loss(&self, t: &mut Tape, probs: Var, gold: RelationLabel) -> Result<Var> {
        let p = t.pick(probs, 0, gold.index())?;
        let lp = t.log_clamped(p, PROB_FLOOR)?;
        t.affine(lp, -1.0, 0.0)
    }

    /// Initial TG state from `[T_last forward half; T_first backward half]`.
    pub fn tg_init(&self, t: &mut Tape, te: Var) -> Result<super::DecoderState> {
        let half = self.config.hidden / 2;
        let rows = t.shape(te).0;
        let last = t.row(te, rows - 1)?;
        let first = t.row(te, 0)?;
        let fwd = t.slice_cols(last, 0, half)?;
        let bwd = t.slice_cols(first, half, half)?;
        let summary = t.concat_cols(&[fwd, bwd])?;
        self.tg.init_state(t, summary)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn tg_step(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        y_emb: Var,
        prev: &super::DecoderState,
        passage: &PassageMemory,
        te: Var,
        te_t: Var,
    ) -> Result<StepOutput> {
        self.tg.step(t, ctx, &self.w_h, y_emb, prev, passage, Some((te, te_t)))
    }

    /// Teacher-forced tail loss; `target` is the tail in extended ids plus `</s>`.
    pub fn tg_teacher_forced(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        passage: &PassageMemory,
        mem: &KnowledgeMemory,
        target: &[usize],
    ) -> Result<(Var, Vec<StepOutput>)> {
        if target.is_empty() {
            return Err(Error::validation("empty tail target"));
        }
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&target[..target.len() - 1]);
        let emb = self.embed_words(t, &inputs)?;
        let mut state = self.tg_init(t, mem.t)?;
        let mut steps = Vec::with_capacity(target.len());
        for i in 0..target.len() {
            let y = t.row(emb, i)?;
            let out = self.tg_step(t, ctx, y, &state, passage, mem.t, mem.t_t)?;
            state = out.state.clone();
            steps.push(out);
        }
        let dists: Vec<Var> = steps.iter().map(|s| s.dist).collect();
        let loss = sequence_nll(t, &dists, target)?;
        Ok((loss, steps))
    }

    /// Relation distribution for the training triple of row `b`.
    pub fn predict_relation(
        &self,
        params: &ParameterSet,
        batch: &Batch,
        b: usize,
    ) -> Result<(RelationLabel, Vec<f64>)> {
        let ids = batch.triples[b]
            .as_ref()
            .ok_or_else(|| Error::validation(format!("sample {} has no triple", batch.sample_ids[b])))?;
        let mut t = Tape::inference(params);
        let mut ctx = ForwardCtx::eval();
        let enc = self.encode_passage(&mut t, &mut ctx, batch, b)?;
        let r = self.encode_head_tail(&mut t, &mut ctx, &ids.head, &ids.tail)?;
        let co = self.coattend(&mut t, r, enc.h_hat)?;
        let probs = self.classify_relation(&mut t, co.r_hat)?;
        let p = t.value(probs).data().to_vec();
        let best = p
            .iter()
            .enumerate()
            .fold(0, |bi, (i, &v)| if v > p[bi] { i } else { bi });
        Ok((RelationLabel::from_index(best).expect("six labels"), p))
    }

    /// Greedy tail generation for row `b`, in extended ids without `</s>`.
    pub fn generate_tail(&self, params: &ParameterSet, batch: &Batch, b: usize, max_len: usize) -> Result<Vec<usize>> {
        let ids = batch.triples[b]
            .as_ref()
            .ok_or_else(|| Error::validation(format!("sample {} has no triple", batch.sample_ids[b])))?;
        let mut t = Tape::inference(params);
        let mut ctx = ForwardCtx::eval();
        let enc = self.encode_passage(&mut t, &mut ctx, batch, b)?;
        let passage = PassageMemory::new(&mut t, enc.h_hat, batch, b)?;
        let te = self.encode_head_relation(&mut t, &mut ctx, &ids.head, ids.relation)?;
        let te_t = t.transpose(te)?;
        let mut state = self.tg_init(&mut t, te)?;
        let mut out_ids = Vec::new();
        let mut prev = BOS;
        for _ in 0..max_len {
            let y = self.embed_words(&mut t, &[prev])?;
            let out = self.tg_step(&mut t, &mut ctx, y, &state, &passage, te, te_t)?;
            let dist = t.value(out.dist).data();
            let tok = (0..dist.len()).fold(0, |bi, i| if dist[i] > dist[bi] { i } else { bi });
            state = out.state;
            if tok == EOS {
                break;
            }
            out_ids.push(tok);
            prev = tok;
        }
        Ok(out_ids)
    }
}
