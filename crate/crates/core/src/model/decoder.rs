use rand::Rng;

use super::ModelConfig;
use crate::corpus::Batch;
use crate::error::Result;
use crate::nn::{ForwardCtx, Group, Linear, Lstm, LstmState, ParameterSet, Tape, Var};

/// Attention decoder with maxout readout and a copy gate. Used both for
/// questions and for tail concepts.
#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub lstm: Lstm,
    /// One initial-state projection per layer.
    pub init: Vec<Linear>,
    /// Secondary attention projection; always in the knowledge group.
    pub mem_attn: Linear,
    pub w_e: Linear,
    pub w_d: Linear,
    pub w_o: Linear,
    pub copy_gate: Linear,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub lstm: Vec<LstmState>,
    pub s_tilde: Var,
}

/// Padded passage encoding plus what attention and copying need.
#[derive(Clone, Debug)]
pub struct PassageMemory {
    pub h_hat: Var,
    pub h_hat_t: Var,
    pub mask: Vec<bool>,
    pub copy_ids: Vec<usize>,
    pub ext_size: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Mixture over the extended vocabulary, `1 × ext_size`.
    pub dist: Var,
    pub p_vocab: Var,
    pub p_copy: Var,
    /// Passage attention, `1 × width`; zero on padding.
    pub alpha: Var,
    /// Attention over the secondary memory when present.
    pub mem_alpha: Option<Var>,
    /// Knowledge context row (zero when no memory).
    pub k: Var,
    pub p_g: Var,
    pub state: DecoderState,
}

impl PassageMemory {
    /// Pads the encoding of row `b` (its true length) to the batch width.
    pub fn new(t: &mut Tape, h_hat: Var, batch: &Batch, b: usize) -> Result<Self> {
        let width = batch.width();
        let len = batch.passage_lens[b];
        let d = t.shape(h_hat).1;
        let h_hat = t.pad(h_hat, width, d)?;
        let h_hat_t = t.transpose(h_hat)?;
        Ok(PassageMemory {
            h_hat,
            h_hat_t,
            mask: (0..width).map(|i| i < len).collect(),
            copy_ids: batch.copy_ids[b].clone(),
            ext_size: batch.extended_size(b),
        })
    }
}

impl DecoderHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        group: Group,
        cfg: &ModelConfig,
        init_in: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.hidden;
        let lstm = Lstm::new(
            params,
            &format!("{name}.dec"),
            group,
            cfg.word_dim + d,
            d,
            cfg.layers,
            rng,
        )?;
        let init = (0..cfg.layers)
            .map(|l| Linear::new(params, &format!("{name}.init.l{l}"), group, init_in, d, true, rng))
            .collect::<Result<_>>()?;
        Ok(DecoderHead {
            lstm,
            init,
            mem_attn: Linear::new(params, &format!("{name}.mem_attn"), Group::Knowledge, d, d, false, rng)?,
            w_e: Linear::new(params, &format!("{name}.w_e"), group, 3 * d, d, true, rng)?,
            w_d: Linear::new(params, &format!("{name}.w_d"), group, 2 * d, d, true, rng)?,
            w_o: Linear::new(params, &format!("{name}.w_o"), group, d / 2, cfg.vocab_size, true, rng)?,
            copy_gate: Linear::new(
                params,
                &format!("{name}.copy_gate"),
                group,
                2 * d + cfg.word_dim,
                1,
                true,
                rng,
            )?,
            hidden: d,
        })
    }

    /// `h0 = tanh(W x + b)` per layer, zero cells, zero readout input.
    pub fn init_state(&self, t: &mut Tape, summary: Var) -> Result<DecoderState> {
        let lstm = self
            .init
            .iter()
            .map(|lin| {
                let z = lin.forward(t, summary)?;
                Ok(LstmState {
                    h: t.tanh(z)?,
                    c: t.zeros(1, self.hidden),
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecoderState {
            lstm,
            s_tilde: t.zeros(1, self.hidden),
        })
    }

    /// One decoding step fed with the embedding of the previous token.
    /// `memory` is `(M, Mᵀ)` for the secondary attention.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        t: &mut Tape,
        ctx: &mut ForwardCtx,
        w_h: &Linear,
        y_emb: Var,
        prev: &DecoderState,
        passage: &PassageMemory,
        memory: Option<(Var, Var)>,
    ) -> Result<StepOutput> {
        let x = t.concat_cols(&[y_emb, prev.s_tilde])?;
        let lstm = self.lstm.step(t, ctx, x, &prev.lstm)?;
        let s = lstm.last().expect("at least one layer").h;

        let q = w_h.forward(t, s)?;
        let scores = t.matmul(q, passage.h_hat_t)?;
        let alpha = t.softmax_masked(scores, Some(&passage.mask))?;
        let c = t.matmul(alpha, passage.h_hat)?;

        let (k, mem_alpha) = match memory {
            Some((m, m_t)) => {
                let qk = self.mem_attn.forward(t, s)?;
                let sc = t.matmul(qk, m_t)?;
                let beta = t.softmax(sc)?;
                (t.matmul(beta, m)?, Some(beta))
            }
            None => (t.zeros(1, self.hidden), None),
        };
        let cks = t.concat_cols(&[c, k, s])?;
        let e = self.w_e.forward(t, cks)?;
        let s_tilde = t.tanh(e)?;

        let cs = t.concat_cols(&[c, s])?;
        let cs = ctx.drop(t, cs)?;
        let u_hat = self.w_d.forward(t, cs)?;
        let u_hat = t.tanh(u_hat)?;
        let u = t.maxout(u_hat)?;
        let logits = self.w_o.forward(t, u)?;
        let p_vocab = t.softmax(logits)?;

        let gate_in = t.concat_cols(&[c, s, y_emb])?;
        let g = self.copy_gate.forward(t, gate_in)?;
        let p_g = t.sigmoid(g)?;

        let p_copy = t.scatter(alpha, &passage.copy_ids, passage.ext_size)?;
        let pv = t.pad(p_vocab, 1, passage.ext_size)?;
        let gen = t.mul(pv, p_g)?;
        let rest = t.one_minus(p_g)?;
        let cp = t.mul(p_copy, rest)?;
        let dist = t.add(gen, cp)?;

        Ok(StepOutput {
            dist,
            p_vocab,
            p_copy,
            alpha,
            mem_alpha,
            k,
            p_g,
            state: DecoderState { lstm, s_tilde },
        })
    }
}
