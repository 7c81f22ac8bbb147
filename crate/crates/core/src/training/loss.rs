use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

pub const SMAPE_DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Smape,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "smape" => Ok(Self::Smape),
            other => Err(Error::Config(format!("unknown loss '{other}' (mse, smape)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Smape => "smape",
        })
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn mse_loss(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    same_shape(tape, "mse_loss", y, y_hat)?;
    let d = tape.sub(y_hat, y)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `200 · mean(|Y−Ŷ| / max(|Y|+|Ŷ|, 1e-8))`.
pub fn smape_loss(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    same_shape(tape, "smape_loss", y, y_hat)?;
    let d = tape.sub(y, y_hat)?;
    let num = tape.abs(d);
    let ay = tape.abs(y);
    let ah = tape.abs(y_hat);
    let den = tape.add(ay, ah)?;
    let den = tape.clamp_min(den, SMAPE_DENOM_FLOOR);
    let r = tape.div(num, den)?;
    let m = tape.mean(r);
    Ok(tape.scale(m, 200.0))
}

pub fn task_loss(tape: &mut Tape, kind: LossKind, y: Var, y_hat: Var) -> Result<Var> {
    match kind {
        LossKind::Mse => mse_loss(tape, y, y_hat),
        LossKind::Smape => smape_loss(tape, y, y_hat),
    }
}

/// `task + λ_lb · L_lb`; without a balancing term the task loss is returned.
pub fn total_loss(tape: &mut Tape, task: Var, lb: Option<Var>, lambda_lb: f64) -> Result<Var> {
    match lb {
        Some(lb) if lambda_lb != 0.0 => {
            let w = tape.scale(lb, lambda_lb);
            tape.add(task, w)
        }
        _ => Ok(task),
    }
}
