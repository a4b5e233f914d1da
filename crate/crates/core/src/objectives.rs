//! Training losses and the per-epoch task weighting between them.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::MaskedSequence;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Default softness of the task weighting.
pub const DWA_GAMMA: f64 = 2.0;
/// Sum of the task weights.
pub const DWA_TOTAL: f64 = 2.0;

/// Mean negative log-likelihood of the original tokens at the masked
/// positions of one sequence. `logits` is `[n_txt x vocab]`.
pub fn mlm_loss(tape: &mut Tape, logits: Var, masked: &MaskedSequence) -> Result<Var> {
    tape.cross_entropy(logits, &masked.dense_targets(), &masked.positions)
}

/// Pooled variant for a batch: `logits` holds one row per masked position
/// across all sequences, `targets` the matching original tokens.
pub fn mlm_loss_rows(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let positions: Vec<usize> = (0..targets.len()).collect();
    tape.cross_entropy(logits, targets, &positions)
}

#[derive(Debug, Clone, Copy)]
pub enum Temperature {
    Fixed(f64),
    /// Log-temperature held on the tape.
    Learned(Var),
}

/// Symmetric contrastive loss between matched rows of `u` (images) and `v`
/// (texts), both `[N x d]` and unit-norm. Returns `None` when `N < 2`, in
/// which case there are no negatives and the caller skips the term.
pub fn info_nce(tape: &mut Tape, u: Var, v: Var, tau: Temperature) -> Result<Option<Var>> {
    let n = tape.value(u).shape()[0];
    if tape.value(v).shape() != tape.value(u).shape() {
        return Err(Error::Dimension {
            op: "info_nce",
            lhs: tape.value(u).shape().to_vec(),
            rhs: tape.value(v).shape().to_vec(),
        });
    }
    let inv_tau = match tau {
        Temperature::Fixed(t) if t > 0.0 && t.is_finite() => tape.constant(Tensor::scalar(1.0 / t)),
        Temperature::Fixed(t) => return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}"))),
        Temperature::Learned(log_tau) => {
            let neg = tape.scale(log_tau, -1.0);
            tape.exp(neg)
        }
    };
    if n < 2 {
        return Ok(None);
    }
    let sim = tape.matmul_bt(u, v)?;
    let i2t = tape.mul_scalar(sim, inv_tau)?;
    let t2i = tape.transpose(i2t)?;
    let diag: Vec<usize> = (0..n).collect();
    let a = tape.cross_entropy(i2t, &diag, &diag)?;
    let b = tape.cross_entropy(t2i, &diag, &diag)?;
    let s = tape.add(a, b)?;
    Ok(Some(tape.scale(s, 0.5)))
}

/// Value-only convenience over plain row vectors.
pub fn info_nce_value(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::from_rows(u)?);
    let v = tape.constant(Tensor::from_rows(v)?);
    Ok(info_nce(&mut tape, u, v, Temperature::Fixed(tau))?.map(|l| tape.value(l).item()))
}

/// Per-task mean losses, one entry per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    epochs: Vec<[f64; 2]>,
}

impl LossHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, mlm: f64, infonce: f64) -> Result<()> {
        for (name, v) in [("mlm", mlm), ("infonce", infonce)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} epoch loss {v}")));
            }
        }
        self.epochs.push([mlm, infonce]);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Losses of epoch `k` (1-based).
    pub fn epoch(&self, k: usize) -> Option<[f64; 2]> {
        k.checked_sub(1).and_then(|i| self.epochs.get(i)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub mlm: f64,
    pub infonce: f64,
}

impl TaskWeights {
    pub const EQUAL: TaskWeights = TaskWeights { mlm: 1.0, infonce: 1.0 };

    pub fn sum(&self) -> f64 {
        self.mlm + self.infonce
    }
}

/// Weights for epoch `k` (1-based) from the loss ratios of the two previous
/// epochs. Epochs 1 and 2 use ratio 1 for both tasks; a zero previous loss
/// also counts as ratio 1.
pub fn dwa_weights(history: &LossHistory, k: usize, gamma: f64, total: f64) -> Result<TaskWeights> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("epochs are numbered from 1".into()));
    }
    let omega = if k <= 2 {
        [1.0, 1.0]
    } else {
        let (last, prev) = match (history.epoch(k - 1), history.epoch(k - 2)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "epoch {k} needs {} epochs of history, have {}",
                    k - 1,
                    history.len()
                )))
            }
        };
        [0, 1].map(|i| if prev[i] == 0.0 { 1.0 } else { last[i] / prev[i] })
    };
    Ok(weights_from_ratios(omega, gamma, total))
}

pub fn weights_from_ratios(omega: [f64; 2], gamma: f64, total: f64) -> TaskWeights {
    let top = omega[0].max(omega[1]) / gamma;
    let e = omega.map(|w| (w / gamma - top).exp());
    let mlm = total * e[0] / (e[0] + e[1]);
    // Second weight as the remainder keeps the sum at `total` exactly.
    TaskWeights {
        mlm,
        infonce: total - mlm,
    }
}

/// `λ_mlm * mlm + λ_infonce * infonce`; a skipped contrastive term adds nothing.
pub fn combined_loss(tape: &mut Tape, mlm: Var, infonce: Option<Var>, w: TaskWeights) -> Result<Var> {
    let a = tape.scale(mlm, w.mlm);
    match infonce {
        Some(c) => {
            let b = tape.scale(c, w.infonce);
            tape.add(a, b)
        }
        None => Ok(a),
    }
}

/// One row of the per-epoch loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_mlm: f64,
    pub l_infonce: f64,
    pub weights: TaskWeights,
}

pub fn loss_log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch,l_mlm,l_infonce,lambda_mlm,lambda_infonce\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.l_mlm, r.l_infonce, r.weights.mlm, r.weights.infonce
        );
    }
    s
}

pub fn write_loss_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    std::fs::write(path, loss_log_csv(rows)).map_err(|e| Error::io(path, e))
}
