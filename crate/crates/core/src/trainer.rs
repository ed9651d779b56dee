//! Iterative training over equipped and pure data, group freezing and
//! checkpoint averaging.

use std::collections::VecDeque;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::checkpoint::average as average_checkpoints;
use crate::config::{Config, TrainMode};
use crate::corpus::{encode_batch, Batch, TagVocabs, TrainingSample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Ablation, LossBundle, LossVars, Model};
use crate::nn::{clip_grad_norm, grad_check, Adam, AdamConfig, ForwardCtx, GradCheckReport, Group, ParameterSet, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Equipped,
    Pure,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Equipped => "equipped",
            Phase::Pure => "pure",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItfConfig {
    pub n: usize,
    pub cycles: usize,
}

/// `n` equipped steps then `n` pure steps, `cycles` times.
pub fn itf_schedule(cfg: &ItfConfig) -> Result<Vec<Phase>> {
    if cfg.n == 0 || cfg.cycles == 0 {
        return Err(Error::Config("itf_n and itf_cycles must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(2 * cfg.n * cfg.cycles);
    for _ in 0..cfg.cycles {
        out.extend(std::iter::repeat_n(Phase::Equipped, cfg.n));
        out.extend(std::iter::repeat_n(Phase::Pure, cfg.n));
    }
    Ok(out)
}

/// Phase sequence for a training mode. Single-corpus modes run the same
/// number of steps as the iterative schedule.
pub fn schedule_for(mode: TrainMode, cfg: &ItfConfig) -> Result<Vec<Phase>> {
    let itf = itf_schedule(cfg)?;
    Ok(match mode {
        TrainMode::Itf => itf,
        TrainMode::EquippedOnly => vec![Phase::Equipped; itf.len()],
        TrainMode::PureOnly => vec![Phase::Pure; itf.len()],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub qg_core: bool,
    pub knowledge: bool,
}

impl FreezeMask {
    pub fn trainable(&self, g: Group) -> bool {
        match g {
            Group::QgCore => self.qg_core,
            Group::Knowledge => self.knowledge,
        }
    }
}

pub fn freeze_mask(phase: Phase) -> FreezeMask {
    FreezeMask {
        qg_core: true,
        knowledge: phase == Phase::Equipped,
    }
}

/// Loss of an equipped batch: QG with knowledge attention plus active heads.
pub fn unified_forward(
    t: &mut Tape,
    model: &Model,
    ctx: &mut ForwardCtx,
    batch: &Batch,
    ablation: Ablation,
) -> Result<LossVars> {
    model.batch_loss(t, ctx, batch, true, ablation)
}

/// Loss of a pure batch: QG only, zero knowledge context.
pub fn pure_forward(t: &mut Tape, model: &Model, ctx: &mut ForwardCtx, batch: &Batch) -> Result<LossVars> {
    model.batch_loss(t, ctx, batch, false, Ablation::default())
}

pub const LOSS_NAMES: [&str; 4] = ["L_q", "L_r", "L_t", "L"];

/// Finite-difference check of each loss component of an equipped batch,
/// with dropout disabled. Reports come in [`LOSS_NAMES`] order.
pub fn gradcheck_losses(
    model: &Model,
    params: &ParameterSet,
    batch: &Batch,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    LOSS_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let report = grad_check(
                params,
                |t| {
                    let lv = model.batch_loss(t, &mut ForwardCtx::eval(), batch, true, Ablation::default())?;
                    Ok([lv.l_q, lv.l_r, lv.l_t, lv.l][i])
                },
                eps,
                coords_per_param,
                seed,
            )?;
            Ok((name, report))
        })
        .collect()
}

/// Keeps the best-scoring save and its neighbours by save order.
#[derive(Clone, Debug)]
pub struct CheckpointWindow {
    k: usize,
    saved: usize,
    best: Option<(usize, f64)>,
    held: VecDeque<(usize, ParameterSet)>,
}

impl CheckpointWindow {
    pub fn new(k: usize) -> Self {
        CheckpointWindow {
            k: k.max(1),
            saved: 0,
            best: None,
            held: VecDeque::new(),
        }
    }

    /// Upper bound on checkpoints held at once.
    pub fn capacity(&self) -> usize {
        3 * self.k - 1
    }

    pub fn len(&self) -> usize {
        self.held.len()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// Records a save; the earlier save wins ties.
    pub fn push(&mut self, score: f64, params: ParameterSet) {
        let idx = self.saved;
        self.saved += 1;
        if self.best.is_none_or(|(_, s)| score > s) {
            self.best = Some((idx, score));
        }
        self.held.push_back((idx, params));
        let (best, _) = self.best.expect("set above");
        let reach = self.k - 1;
        self.held.retain(|(i, _)| i.abs_diff(best) <= reach || idx - i < self.k);
    }

    /// Save indices of the best and its `k − 1` nearest neighbours (ties to the
    /// earlier save), in save order.
    pub fn selection(&self) -> Vec<usize> {
        let Some((best, _)) = self.best else { return Vec::new() };
        let mut idx: Vec<usize> = self.held.iter().map(|(i, _)| *i).collect();
        idx.sort_by_key(|&i| (i.abs_diff(best), i));
        idx.truncate(self.k);
        idx.sort_unstable();
        idx
    }

    pub fn averaged(&self) -> Result<ParameterSet> {
        let sel = self.selection();
        let sets: Vec<&ParameterSet> = self
            .held
            .iter()
            .filter(|(i, _)| sel.contains(i))
            .map(|(_, p)| p)
            .collect();
        average_checkpoints(&sets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBundle,
    pub grad_norm: f64,
    pub clamped_logs: usize,
    pub dev_bleu4: Option<f64>,
}

pub const CSV_HEADER: &str = "step,phase,L_q,L_r,L_t,L,dev_bleu4";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.loss.l_q,
            self.loss.l_r,
            self.loss.l_t,
            self.loss.l,
            self.dev_bleu4.map(|b| b.to_string()).unwrap_or_default()
        )
    }
}

/// Cycles through a corpus in fixed order.
#[derive(Clone, Debug)]
struct Cursor {
    pos: usize,
}

impl Cursor {
    fn take(&mut self, data: &[TrainingSample], n: usize) -> Vec<TrainingSample> {
        (0..n)
            .map(|_| {
                let s = &data[self.pos % data.len()];
                self.pos = (self.pos + 1) % data.len();
                s.clone()
            })
            .collect()
    }
}

pub struct Trainer {
    pub config: Config,
    pub vocab: Vocabulary,
    pub tags: TagVocabs,
    pub model: Model,
    pub params: ParameterSet,
    pub adam: Adam,
    pub window: CheckpointWindow,
    pub log: Vec<StepRecord>,
    schedule: Vec<Phase>,
    equipped: Vec<TrainingSample>,
    pure: Vec<TrainingSample>,
    dev: Vec<TrainingSample>,
    cursors: [Cursor; 2],
    ctx: ForwardCtx,
    step: usize,
}

impl Trainer {
    /// Builds vocabularies from the training data and a freshly initialised
    /// model.
    pub fn new(
        config: Config,
        equipped: Vec<TrainingSample>,
        pure: Vec<TrainingSample>,
        dev: Vec<TrainingSample>,
    ) -> Result<Self> {
        let all: Vec<TrainingSample> = equipped.iter().chain(&pure).cloned().collect();
        let vocab = Vocabulary::build(&all, config.vocab_size, config.min_freq);
        let tags = TagVocabs::build(&all.iter().chain(&dev).cloned().collect::<Vec<_>>());
        Trainer::with_vocab(config, vocab, tags, equipped, pure, dev)
    }

    pub fn with_vocab(
        config: Config,
        vocab: Vocabulary,
        tags: TagVocabs,
        equipped: Vec<TrainingSample>,
        pure: Vec<TrainingSample>,
        dev: Vec<TrainingSample>,
    ) -> Result<Self> {
        config.validate()?;
        let schedule = schedule_for(
            config.mode,
            &ItfConfig {
                n: config.itf_n,
                cycles: config.itf_cycles,
            },
        )?;
        let needs_eq = schedule.contains(&Phase::Equipped);
        let needs_pure = schedule.contains(&Phase::Pure);
        if needs_eq && equipped.is_empty() {
            return Err(Error::validation(
                "training mode needs equipped samples but none were given",
            ));
        }
        if needs_pure && pure.is_empty() {
            return Err(Error::validation(
                "training mode needs pure samples but none were given",
            ));
        }
        if let Some(s) = equipped.iter().find(|s| s.triples.is_empty()) {
            return Err(Error::validation(format!("equipped sample {} has no triple", s.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let model = Model::new(
            crate::checkpoint::model_config(&config, &vocab, &tags),
            &mut params,
            &mut rng,
        )?;
        let adam = Adam::new(
            &params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let ctx = ForwardCtx::train(config.dropout, ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)));
        Ok(Trainer {
            window: CheckpointWindow::new(config.avg_k),
            config,
            vocab,
            tags,
            model,
            params,
            adam,
            log: Vec::new(),
            schedule,
            equipped,
            pure,
            dev,
            cursors: [Cursor { pos: 0 }, Cursor { pos: 0 }],
            ctx,
            step: 0,
        })
    }

    pub fn schedule(&self) -> &[Phase] {
        &self.schedule
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.schedule.len()
    }

    fn ablation(&self) -> Ablation {
        Ablation {
            no_tg: self.config.no_tg,
            no_rc: self.config.no_rc,
        }
    }

    /// Runs one optimisation step of the schedule.
    pub fn step(&mut self) -> Result<StepRecord> {
        let phase = *self
            .schedule
            .get(self.step)
            .ok_or_else(|| Error::Config("schedule already finished".into()))?;
        let (data, cursor) = match phase {
            Phase::Equipped => (&self.equipped, &mut self.cursors[0]),
            Phase::Pure => (&self.pure, &mut self.cursors[1]),
        };
        let samples = cursor.take(data, self.config.batch_size.min(data.len()));
        let batch = encode_batch(&samples, &self.vocab, &self.tags)?;
        let ablation = self.ablation();
        let (loss, mut grads, clamped_logs) = {
            let mut t = Tape::new(&self.params);
            let lv = match phase {
                Phase::Equipped => unified_forward(&mut t, &self.model, &mut self.ctx, &batch, ablation),
                Phase::Pure => pure_forward(&mut t, &self.model, &mut self.ctx, &batch),
            }
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Numerical(format!("step {}: non-finite value in {op}", self.step)),
                other => other,
            })?;
            let loss = lv.bundle(&t);
            if !loss.l.is_finite() {
                return Err(Error::Numerical(format!(
                    "step {}: loss diverged ({loss:?})",
                    self.step
                )));
            }
            (loss, t.backward(lv.l)?, t.clamped_logs())
        };
        let mask = freeze_mask(phase);
        let grad_norm = clip_grad_norm(&self.params, &mut grads, self.config.clip, |g| mask.trainable(g));
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "step {}: gradient norm is not finite",
                self.step
            )));
        }
        self.adam.step(&mut self.params, &grads, |g| mask.trainable(g));

        let mut rec = StepRecord {
            step: self.step,
            phase,
            loss,
            grad_norm,
            clamped_logs,
            dev_bleu4: None,
        };
        self.step += 1;
        if self.step.is_multiple_of(self.config.eval_interval) || self.is_finished() {
            let score = if self.dev.is_empty() {
                -loss.l
            } else {
                let b = self.dev_bleu4()?;
                rec.dev_bleu4 = Some(b);
                b
            };
            self.window.push(score, self.params.clone());
        }
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Greedy BLEU-4 on the dev set.
    pub fn dev_bleu4(&self) -> Result<f64> {
        let (hyps, refs) = decode_corpus(
            &self.model,
            &self.params,
            &self.vocab,
            &self.tags,
            &self.dev,
            |m, p, b, i| {
                m.greedy(
                    p,
                    b,
                    i,
                    b.triples[i].is_some(),
                    self.config.max_len,
                    self.config.length_penalty,
                )
            },
        )?;
        metrics::bleu(&hyps, &refs, 4)
    }

    /// Runs the remaining schedule, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        while !self.is_finished() {
            let rec = self.step()?;
            on_step(&rec);
        }
        Ok(())
    }

    /// Average of the best checkpoint and its neighbours.
    pub fn averaged_params(&self) -> Result<ParameterSet> {
        self.window.averaged()
    }

    pub fn csv_log(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Lowercased hypothesis and reference token lists.
pub type DecodedCorpus = (Vec<Vec<String>>, Vec<Vec<String>>);

/// Decodes every sample with `decode` and returns lowercased hypothesis and
/// reference token lists.
pub fn decode_corpus<F>(
    model: &Model,
    params: &ParameterSet,
    vocab: &Vocabulary,
    tags: &TagVocabs,
    samples: &[TrainingSample],
    decode: F,
) -> Result<DecodedCorpus>
where
    F: Fn(&Model, &ParameterSet, &Batch, usize) -> Result<crate::model::Hypothesis>,
{
    let mut hyps = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    for s in samples {
        let batch = encode_batch(std::slice::from_ref(s), vocab, tags)?;
        let h = decode(model, params, &batch, 0)?;
        hyps.push(h.ids.iter().map(|&id| batch.surface(vocab, 0, id)).collect());
        refs.push(s.question.iter().map(|t| t.to_lowercase()).collect());
    }
    Ok((hyps, refs))
}
