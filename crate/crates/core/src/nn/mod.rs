//! Minimal reverse-mode autodiff and the layers the models are built from.

mod adam;
mod gradcheck;
mod layers;
mod mat;
mod params;
mod tape;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use gradcheck::{grad_check, randomize, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use layers::{BiLstm, ForwardCtx, Linear, Lstm, LstmCell, LstmState, INIT_BOUND};
pub use mat::Mat;
pub use params::{Grads, Group, Param, ParamId, ParameterSet};
pub use tape::{Tape, Var};
