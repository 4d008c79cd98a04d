//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every intermediate [`Tensor`] produced during a
//! forward pass; [`Tape::backward`] replays the recorded operations in
//! reverse to accumulate gradients. Model parameters live in a
//! [`ParamStore`] and are bound onto a tape by name, so one store can feed
//! many independent tapes (e.g. one per cloud in a batch).

mod adam;
mod fdcheck;
pub mod init;
mod lstm;
mod ops;
mod store;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use fdcheck::{finite_diff_check, FdConfig, FdReport};
pub use lstm::{lstm_cell, LstmCellVars};
pub use ops::Mode;
pub use store::{is_running_stat, ParamStore};
pub use tape::{put_back, take_grad, StatUpdate, Tape, TapeOp, Var};
pub use tensor::Tensor;
