//! LSTM cell built from tape primitives.
//!
//! Gate layout inside the fused weight tensors is `[input, forget,
//! candidate, output]`, each block `hidden` wide. Backward through time
//! falls out of the tape: every step's activations are separate nodes, so
//! one `backward` call differentiates an unrolled sequence.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Tape handles for one cell's parameters: `w_ih` (in x 4h), `w_hh`
/// (h x 4h), `b_ih` and `b_hh` (4h).
#[derive(Debug, Clone, Copy)]
pub struct LstmCellVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

/// One step of a standard LSTM cell. Returns (h', c').
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmCellVars,
) -> Result<(Var, Var)> {
    let hidden = match tape.value(h).shape() {
        [hh] => *hh,
        other => {
            return Err(Error::invalid_argument(format!(
                "lstm hidden state must be rank 1, got {other:?}"
            )))
        }
    };
    let four_h = match tape.value(p.w_ih).shape() {
        [_, cols] => *cols,
        other => {
            return Err(Error::invalid_argument(format!(
                "lstm w_ih must be rank 2, got {other:?}"
            )))
        }
    };
    if four_h != 4 * hidden || tape.value(c).shape() != [hidden] {
        return Err(Error::invalid_argument(format!(
            "lstm shapes disagree: hidden {hidden}, gate width {four_h}"
        )));
    }

    let from_x = tape.affine_vec(x, p.w_ih, p.b_ih)?;
    let from_h = tape.affine_vec(h, p.w_hh, p.b_hh)?;
    let gates = tape.add(from_x, from_h)?;

    let i_pre = tape.slice1d(gates, 0, hidden)?;
    let f_pre = tape.slice1d(gates, hidden, hidden)?;
    let g_pre = tape.slice1d(gates, 2 * hidden, hidden)?;
    let o_pre = tape.slice1d(gates, 3 * hidden, hidden)?;

    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let g = tape.tanh(g_pre)?;
    let o = tape.sigmoid(o_pre)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}
