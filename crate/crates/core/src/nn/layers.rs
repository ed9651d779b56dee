//! Linear maps, LSTM cells and stacked (bi)LSTMs built on the tape.
//!
//! Initialisation: weights uniform in ±[`INIT_BOUND`], biases zero, LSTM
//! forget-gate bias one. Gate layout inside the fused `4h` projection is
//! `[input, forget, cell, output]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Group, Mat, ParamId, ParameterSet, Tape, Var};
use crate::error::{Error, Result};

pub const INIT_BOUND: f64 = 0.1;

/// Per-forward switches: training mode, dropout rate and the dropout RNG.
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: f64,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        use rand::SeedableRng;
        ForwardCtx {
            training: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            dropout,
            rng,
        }
    }

    pub fn drop(&mut self, t: &mut Tape, x: Var) -> Result<Var> {
        t.dropout(x, self.dropout, self.training, &mut self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = params.add_uniform(format!("{name}.w"), group, in_dim, out_dim, INIT_BOUND, rng)?;
        let b = if bias {
            Some(params.add(format!("{name}.b"), group, Mat::zeros(1, out_dim))?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// `x · W (+ b)` for `x` of shape `r × in_dim`.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = params.add_uniform(format!("{name}.w_ih"), group, input, 4 * hidden, INIT_BOUND, rng)?;
        let w_hh = params.add_uniform(format!("{name}.w_hh"), group, hidden, 4 * hidden, INIT_BOUND, rng)?;
        let mut b = Mat::zeros(1, 4 * hidden);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let bias = params.add(format!("{name}.b"), group, b)?;
        Ok(LstmCell {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// Input projection `X · W_ih + b` for a whole sequence at once.
    pub fn project(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let (_, cols) = t.shape(x);
        if cols != self.input {
            return Err(Error::Shape {
                op: "lstm input",
                left: t.shape(x),
                right: (1, self.input),
            });
        }
        let w = t.param(self.w_ih);
        let b = t.param(self.bias);
        let p = t.matmul(x, w)?;
        t.add(p, b)
    }

    /// One step given the already projected input row.
    pub fn step_projected(&self, t: &mut Tape, x_proj: Var, prev: LstmState) -> Result<LstmState> {
        let hd = self.hidden;
        if t.shape(prev.h) != (1, hd) || t.shape(prev.c) != (1, hd) {
            return Err(Error::Shape {
                op: "lstm state",
                left: t.shape(prev.h),
                right: (1, hd),
            });
        }
        let w_hh = t.param(self.w_hh);
        let rec = t.matmul(prev.h, w_hh)?;
        let gates = t.add(x_proj, rec)?;
        let i = t.slice_cols(gates, 0, hd)?;
        let f = t.slice_cols(gates, hd, hd)?;
        let g = t.slice_cols(gates, 2 * hd, hd)?;
        let o = t.slice_cols(gates, 3 * hd, hd)?;
        let i = t.sigmoid(i)?;
        let f = t.sigmoid(f)?;
        let g = t.tanh(g)?;
        let o = t.sigmoid(o)?;
        let fc = t.mul(f, prev.c)?;
        let ig = t.mul(i, g)?;
        let c = t.add(fc, ig)?;
        let tc = t.tanh(c)?;
        let h = t.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Standard LSTM step on a `1 × input` row.
    pub fn step(&self, t: &mut Tape, x: Var, prev: LstmState) -> Result<LstmState> {
        let p = self.project(t, x)?;
        self.step_projected(t, p, prev)
    }

    pub fn zero_state(&self, t: &mut Tape) -> LstmState {
        LstmState {
            h: t.zeros(1, self.hidden),
            c: t.zeros(1, self.hidden),
        }
    }
}

/// Stacked unidirectional LSTM used by the decoders.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub cells: Vec<LstmCell>,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cells = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                LstmCell::new(params, &format!("{name}.l{l}"), group, inp, hidden, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Lstm { cells })
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// Advances every layer by one step; returns the new states (bottom first).
    pub fn step(&self, t: &mut Tape, ctx: &mut ForwardCtx, x: Var, prev: &[LstmState]) -> Result<Vec<LstmState>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.cells.len());
        for (l, (cell, st)) in self.cells.iter().zip(prev).enumerate() {
            let s = cell.step(t, input, *st)?;
            next.push(s);
            input = s.h;
            if l + 1 < self.cells.len() {
                input = ctx.drop(t, input)?;
            }
        }
        Ok(next)
    }
}

/// Stacked bidirectional LSTM; each layer's output is `[forward; backward]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * hidden };
                Ok((
                    LstmCell::new(params, &format!("{name}.l{l}.fwd"), group, inp, hidden, rng)?,
                    LstmCell::new(params, &format!("{name}.l{l}.bwd"), group, inp, hidden, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(BiLstm { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.hidden
    }

    fn run_direction(&self, t: &mut Tape, cell: &LstmCell, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let len = t.shape(x).0;
        let proj = cell.project(t, x)?;
        let mut state = cell.zero_state(t);
        let mut out = vec![None; len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for i in order {
            let row = t.row(proj, i)?;
            state = cell.step_projected(t, row, state)?;
            out[i] = Some(state.h);
        }
        Ok(out.into_iter().map(|h| h.expect("every position visited")).collect())
    }

    /// `L × input -> L × 2h`. Dropout is applied to each layer's output.
    pub fn forward(&self, t: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        if t.shape(x).0 == 0 {
            return Err(Error::validation("bilstm over an empty sequence"));
        }
        let mut input = x;
        for (fwd, bwd) in &self.layers {
            let f = self.run_direction(t, fwd, input, false)?;
            let b = self.run_direction(t, bwd, input, true)?;
            let rows = f
                .iter()
                .zip(&b)
                .map(|(&hf, &hb)| t.concat_cols(&[hf, hb]))
                .collect::<Result<Vec<_>>>()?;
            let stacked = t.concat_rows(&rows)?;
            input = ctx.drop(t, stacked)?;
        }
        Ok(input)
    }
}
