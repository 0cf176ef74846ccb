//! Scalar loss kernels shared by the learners.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Asymmetry parameter of expectile regression, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ExpectileParam(f64);

impl ExpectileParam {
    pub fn new(m: f64) -> Result<Self> {
        if m > 0.0 && m < 1.0 {
            Ok(ExpectileParam(m))
        } else {
            Err(Error::invalid(format!("expectile parameter {m} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ExpectileParam {
    type Error = Error;
    fn try_from(m: f64) -> Result<Self> {
        ExpectileParam::new(m)
    }
}

impl From<ExpectileParam> for f64 {
    fn from(m: ExpectileParam) -> f64 {
        m.0
    }
}

/// `|m - 1(delta < 0)| * delta²` for a residual `delta = target - prediction`.
pub fn expectile_loss(delta: f64, m: f64) -> f64 {
    let w = if delta < 0.0 { 1.0 - m } else { m };
    w * delta * delta
}

/// Batched expectile loss, averaged over elements.
pub fn expectile_loss_mean(deltas: &[f64], m: ExpectileParam) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::invalid("expectile loss of an empty batch"));
    }
    if let Some(bad) = deltas.iter().find(|d| !d.is_finite()) {
        return Err(Error::numerical("expectile_loss", format!("residual {bad}")));
    }
    let m = m.value();
    Ok(deltas.iter().map(|&d| expectile_loss(d, m)).sum::<f64>() / deltas.len() as f64)
}

/// Grid point in `[min, max]` of `values` minimizing the summed expectile loss.
///
/// A brute-force reference for what an expectile head should converge to.
pub fn expectile_argmin_oracle(values: &[f64], m: ExpectileParam, resolution: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("expectile oracle needs at least one value"));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::invalid(format!("grid resolution {resolution}")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("expectile oracle values must be finite"));
    }
    let steps = ((hi - lo) / resolution).ceil() as usize;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=steps {
        let q = (lo + i as f64 * resolution).min(hi);
        let loss: f64 = values.iter().map(|&v| expectile_loss(v - q, m.value())).sum();
        if loss < best.0 {
            best = (loss, q);
        }
    }
    Ok(best.1)
}

/// `KL[N(mu, diag(exp(log_var))) || N(0, I)]` in closed form.
pub fn gaussian_kl_to_standard(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    if mu.len() != log_var.len() {
        return Err(Error::shape(format!(
            "KL: mu has {} entries, log_var {}",
            mu.len(),
            log_var.len()
        )));
    }
    if let Some(bad) = log_var.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical("gaussian_kl", format!("log_var {bad}")));
    }
    Ok(0.5
        * mu.iter()
            .zip(log_var)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>())
}
