//! Negative-ELBO pieces: Gaussian NLL over the trajectory, closed-form KL of
//! the initial-state posterior against N(0, I), and β-annealing.
//!
//! Both terms are per-feature averages: the NLL is scaled by `1/(2NT)` and the
//! KL by `1/(2n)`. The `log 2π` constant is left out of the NLL.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{GaussianHead, GaussianVars};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = nll + beta * kl`, evaluated exactly in that form.
    pub fn from_parts(nll: f64, kl: f64, beta: f64) -> Self {
        Self {
            nll,
            kl,
            beta,
            total: nll + beta * kl,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_final: f64,
    pub warmup_epochs: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_final: 0.1,
            warmup_epochs: 300,
        }
    }
}

impl BetaSchedule {
    /// Linear ramp from 0 at epoch 0 to `beta_final` at `warmup_epochs`.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 || epoch >= self.warmup_epochs {
            return self.beta_final;
        }
        self.beta_final * (epoch as f64 / self.warmup_epochs as f64)
    }
}

/// Bracketed NLL term for one element: `log σ² + (y − μ)² / σ²`.
#[inline]
fn nll_term(y: f64, mean: f64, logvar: f64) -> f64 {
    let d = y - mean;
    logvar + d * d * (-logvar).exp()
}

/// `(1/2NT) Σ_t Σ_j [log σ²_tj + (y_tj − μ_tj)²/σ²_tj]` for `T × N` inputs.
pub fn gaussian_nll(y: &Tensor, mean: &Tensor, logvar: &Tensor) -> Result<f64> {
    y.same_shape(mean, "gaussian_nll mean")?;
    y.same_shape(logvar, "gaussian_nll logvar")?;
    if y.is_empty() {
        return Err(Error::contract("gaussian_nll of an empty tensor"));
    }
    let sum: f64 = y
        .data()
        .iter()
        .zip(mean.data())
        .zip(logvar.data())
        .map(|((&yv, &m), &lv)| nll_term(yv, m, lv))
        .sum();
    Ok(sum / (2.0 * y.len() as f64))
}

/// `(1/2n) Σ_j [−log σ²_j − 1 + σ²_j + μ²_j]`, each bracket evaluated as
/// `(expm1(log σ²) − log σ²) + μ²` so it never rounds below zero.
pub fn kl_gaussian(head: &GaussianHead) -> Result<f64> {
    head.mean.same_shape(&head.logvar, "kl_gaussian")?;
    let n = head.mean.len();
    if n == 0 {
        return Err(Error::contract("kl_gaussian of an empty head"));
    }
    let sum: f64 = head
        .mean
        .data()
        .iter()
        .zip(head.logvar.data())
        .map(|(&m, &lv)| (lv.exp_m1() - lv) + m * m)
        .sum();
    Ok(sum * (1.0 / (2.0 * n as f64)))
}

/// Assemble the loss from one reparameterised path: decoded heads for every
/// step of `y` (`T × N`) and the posterior over `z_0`.
pub fn elbo_loss(
    y: &Tensor,
    decoded: &[GaussianHead],
    z0_head: &GaussianHead,
    beta: f64,
) -> Result<LossBreakdown> {
    if y.shape().len() != 2 || y.shape()[0] != decoded.len() {
        return Err(Error::contract(format!(
            "elbo_loss: {} decoded steps for observations of shape {:?}",
            decoded.len(),
            y.shape()
        )));
    }
    let mut means = Vec::with_capacity(y.len());
    let mut logvars = Vec::with_capacity(y.len());
    for h in decoded {
        means.extend_from_slice(h.mean.data());
        logvars.extend_from_slice(h.logvar.data());
    }
    let mean = Tensor::new(y.shape().to_vec(), means)?;
    let logvar = Tensor::new(y.shape().to_vec(), logvars)?;
    Ok(LossBreakdown::from_parts(
        gaussian_nll(y, &mean, &logvar)?,
        kl_gaussian(z0_head)?,
        beta,
    ))
}

/// One step's share of the NLL, `scale · Σ_j [log σ² + (y − μ)² e^{−log σ²}]`,
/// with `scale = 1/(2NT)` for the trajectory loss.
pub fn nll_step_on_tape(
    tape: &mut Tape<'_>,
    y: &[f64],
    head: GaussianVars,
    scale: f64,
) -> Result<Var> {
    let yv = tape.leaf(Tensor::vector(y.to_vec()));
    let diff = tape.sub(yv, head.mean)?;
    let sq = tape.square(diff)?;
    let neg = tape.scale(head.logvar, -1.0)?;
    let inv_var = tape.exp(neg)?;
    let weighted = tape.mul(sq, inv_var)?;
    let terms = tape.add(head.logvar, weighted)?;
    let s = tape.sum(terms)?;
    tape.scale(s, scale)
}

/// Differentiable form of [`kl_gaussian`].
pub fn kl_on_tape(tape: &mut Tape<'_>, head: GaussianVars) -> Result<Var> {
    let n = tape.value(head.mean).len();
    let em1 = tape.expm1(head.logvar)?;
    let core = tape.sub(em1, head.logvar)?;
    let m2 = tape.square(head.mean)?;
    let terms = tape.add(core, m2)?;
    let s = tape.sum(terms)?;
    tape.scale(s, 1.0 / (2.0 * n as f64))
}
