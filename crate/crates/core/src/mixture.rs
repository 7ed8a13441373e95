//! Gaussian mixtures: per-step parameters, moments, sampling and the
//! negative log-likelihood objective.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// `0.5 * ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Conditional distribution of one observation: a mixture of `N` Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureStep {
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl MixtureStep {
    pub fn new(eta: Vec<f64>, mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::arg("mixture needs at least one component"));
        }
        if eta.len() != mu.len() || eta.len() != sigma2.len() {
            return Err(Error::arg(format!(
                "component length mismatch: eta {}, mu {}, sigma2 {}",
                eta.len(),
                mu.len(),
                sigma2.len()
            )));
        }
        Ok(Self { eta, mu, sigma2 })
    }

    /// Single Gaussian component.
    pub fn gaussian(mu: f64, sigma2: f64) -> Self {
        Self {
            eta: vec![1.0],
            mu: vec![mu],
            sigma2: vec![sigma2],
        }
    }

    pub fn n_components(&self) -> usize {
        self.eta.len()
    }

    /// True when every field is finite, every weight positive with unit sum
    /// and every variance strictly positive.
    pub fn is_valid(&self) -> bool {
        let finite = self
            .eta
            .iter()
            .chain(&self.mu)
            .chain(&self.sigma2)
            .all(|x| x.is_finite());
        finite
            && self.eta.iter().all(|&e| e > 0.0)
            && (self.eta.iter().sum::<f64>() - 1.0).abs() <= 1e-12
            && self.sigma2.iter().all(|&s| s > 0.0)
    }
}

/// `log Σ exp(v_i)` computed with a max shift.
///
/// NaN inputs propagate to the output.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("logsumexp of an empty list"));
    }
    Ok(logsumexp_unchecked(values))
}

pub(crate) fn logsumexp_unchecked(values: &[f64]) -> f64 {
    if values.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-component log joint terms `log η_i + log φ(r; μ_i, σ²_i)`.
pub(crate) fn component_log_terms(r: f64, step: &MixtureStep, out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        step.eta
            .iter()
            .zip(&step.mu)
            .zip(&step.sigma2)
            .map(|((&eta, &mu), &s2)| {
                let d = r - mu;
                eta.ln() - HALF_LN_2PI - 0.5 * s2.ln() - 0.5 * d * d / s2
            }),
    );
}

/// Log of the mixture density at `r`.
pub fn log_density(r: f64, step: &MixtureStep) -> Result<f64> {
    if let Some(s2) = step.sigma2.iter().find(|&&s| s <= 0.0) {
        return Err(Error::domain(format!("non-positive component variance {s2}")));
    }
    let mut terms = Vec::with_capacity(step.n_components());
    component_log_terms(r, step, &mut terms);
    logsumexp(&terms)
}

/// Negative log-likelihood `Σ_t −log p(r_t | step_t)`. NaN summands make the
/// total NaN rather than an error.
pub fn nll(series: &[f64], steps: &[MixtureStep]) -> Result<f64> {
    if series.len() != steps.len() {
        return Err(Error::arg(format!(
            "series has {} observations but {} mixture steps were given",
            series.len(),
            steps.len()
        )));
    }
    let mut total = 0.0;
    for (&r, step) in series.iter().zip(steps) {
        total -= log_density(r, step)?;
    }
    Ok(total)
}

/// Mean and variance of the mixture.
pub fn mixture_moments(step: &MixtureStep) -> (f64, f64) {
    let mean: f64 = step.eta.iter().zip(&step.mu).map(|(e, m)| e * m).sum();
    let variance = step
        .eta
        .iter()
        .zip(&step.mu)
        .zip(&step.sigma2)
        .map(|((e, m), s2)| e * (s2 + (m - mean) * (m - mean)))
        .sum();
    (mean, variance)
}

/// Draw a component index by weight, then a Gaussian value from it.
pub fn sample<R: Rng + ?Sized>(step: &MixtureStep, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, &e) in step.eta.iter().enumerate() {
        acc += e;
        if e > 0.0 && u < acc {
            chosen = Some(i);
            break;
        }
    }
    // rounding can leave `acc` just under 1; fall back to the last weighted component
    let i = chosen.unwrap_or_else(|| {
        step.eta
            .iter()
            .rposition(|&e| e > 0.0)
            .unwrap_or(step.n_components() - 1)
    });
    let z: f64 = StandardNormal.sample(rng);
    step.mu[i] + step.sigma2[i].sqrt() * z
}
