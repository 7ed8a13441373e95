//! Exact gradients of the unrolled negative log-likelihood.
//!
//! The backward pass walks the recorded forward trace from the last step to
//! the first, carrying two adjoints between steps: one for each component's
//! variance (the recurrent σ² feedback) and one for the squared residual
//! `e²_t = (r_t − μ̄_t)²`, which ties the variance network at `t+1` back to
//! the mixing and mean networks at `t`.

use crate::error::{Error, Result};
use crate::mixture::{self, MixtureStep};
use crate::rmdn::{
    self, positive_elu_grad, ParamRef, RecurrentState, RmdnConfig, RmdnParams, StepTrace,
    SubnetKind, Subnetwork,
};

/// One entry per trainable parameter, in [`RmdnParams::trainable_layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Loss and gradient at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: GradientVector,
    /// Set when the loss or any gradient entry is non-finite; `grads` is then all NaN.
    pub diverged: bool,
}

/// `true` marks a parameter whose gradient is forced to zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask(pub Vec<bool>);

impl FreezeMask {
    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    /// Freezes every parameter on either side of a tanh node in all three
    /// subnetworks.
    pub fn nonlinear(params: &RmdnParams) -> Self {
        Self(
            params
                .trainable_layout()
                .into_iter()
                .map(|p| params.is_nonlinear(p))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn frozen_count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }
}

pub fn apply_mask(grads: &GradientVector, mask: &FreezeMask) -> Result<GradientVector> {
    if grads.len() != mask.len() {
        return Err(Error::arg(format!(
            "gradient has {} entries but mask has {}",
            grads.len(),
            mask.len()
        )));
    }
    Ok(GradientVector(
        grads
            .0
            .iter()
            .zip(&mask.0)
            .map(|(&g, &frozen)| if frozen { 0.0 } else { g })
            .collect(),
    ))
}

#[inline]
fn act_grad(linear: bool, h: f64) -> f64 {
    if linear {
        1.0
    } else {
        1.0 - h * h
    }
}

fn backprop_feedforward(
    s: &Subnetwork,
    grad: &mut Subnetwork,
    hidden: &[f64],
    input: f64,
    g_out: &[f64],
) {
    let width = s.n_hidden() + 1;
    for (i, &g) in g_out.iter().enumerate() {
        grad.output[i * width] += g;
        for (k, &h) in hidden.iter().enumerate() {
            grad.output[i * width + k + 1] += g * h;
        }
    }
    for (k, &h) in hidden.iter().enumerate() {
        let g_h: f64 = g_out
            .iter()
            .enumerate()
            .map(|(i, &g)| g * s.output[i * width + k + 1])
            .sum();
        let g_pre = g_h * act_grad(k == 0, h);
        grad.hidden_bias[k] += g_pre;
        grad.hidden_weight[k] += g_pre * input;
    }
}

/// Accumulator with the model's shape and no pinned values.
fn zero_accumulator(config: &RmdnConfig) -> Result<RmdnParams> {
    let (n, k) = (config.n_components, config.k_hidden);
    RmdnParams::from_subnetworks(
        config,
        Subnetwork::zeros(n, k),
        Subnetwork::zeros(n, k),
        Subnetwork::zeros(n, 2 * k),
    )
}

/// Negative log-likelihood of the unrolled model and its exact gradient with
/// respect to every trainable parameter (full backpropagation through time).
pub fn gradient(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    init: &RecurrentState,
) -> Result<Evaluation> {
    let (traces, _) = rmdn::forward_traced(series, params, config, init)?;
    let steps: Vec<MixtureStep> = traces
        .iter()
        .map(|t| MixtureStep {
            eta: t.eta.clone(),
            mu: t.mu.clone(),
            sigma2: t.var.sigma2.clone(),
        })
        .collect();
    let loss = mixture::nll(series, &steps)?;
    let n_trainable = params.n_trainable();
    if !loss.is_finite() {
        return Ok(diverged(loss, n_trainable));
    }

    let mut g = zero_accumulator(config)?;
    backward(series, params, config, &traces, &steps, &mut g);

    let grads: Vec<f64> = params
        .trainable_layout()
        .into_iter()
        .map(|p| g.get(p))
        .collect();
    let grads = GradientVector(grads);
    if !grads.is_finite() {
        return Ok(diverged(loss, n_trainable));
    }
    Ok(Evaluation {
        loss,
        grads,
        diverged: false,
    })
}

fn diverged(loss: f64, n: usize) -> Evaluation {
    Evaluation {
        loss,
        grads: GradientVector(vec![f64::NAN; n]),
        diverged: true,
    }
}

fn backward(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    traces: &[StepTrace],
    steps: &[MixtureStep],
    g: &mut RmdnParams,
) {
    let n = config.n_components;
    let k = config.k_hidden;
    let var = &params.variance;
    let width = var.n_hidden() + 1;

    // adjoints flowing in from step t+1
    let mut g_s2 = vec![0.0; n];
    let mut g_e2 = 0.0;

    let mut terms = Vec::with_capacity(n);
    let mut g_mu = vec![0.0; n];
    let mut g_z = vec![0.0; n];
    let mut g_x = vec![0.0; n];

    for t in (0..traces.len()).rev() {
        let tr = &traces[t];
        let step = &steps[t];
        let r = series[t];

        // -log Σ exp(a_i): responsibilities γ_i = softmax(a)_i
        mixture::component_log_terms(r, step, &mut terms);
        let lse = mixture::logsumexp_unchecked(&terms);
        let mut g_lneta = vec![0.0; n];
        for i in 0..n {
            let gamma = (terms[i] - lse).exp();
            let s2 = step.sigma2[i];
            let d = r - step.mu[i];
            g_lneta[i] = -gamma;
            g_mu[i] = -gamma * d / s2;
            g_s2[i] += -gamma * (-0.5 / s2 + 0.5 * d * d / (s2 * s2));
        }

        // e²_t = (r_t − Σ η_i μ_i)²
        let mu_bar: f64 = step.eta.iter().zip(&step.mu).map(|(e, m)| e * m).sum();
        let g_mu_bar = g_e2 * -2.0 * (r - mu_bar);
        let mut g_eta = vec![0.0; n];
        for i in 0..n {
            g_mu[i] += g_mu_bar * step.eta[i];
            g_eta[i] = g_mu_bar * step.mu[i];
        }

        // η = softmax(z): through log η and through η directly
        let sum_lneta: f64 = g_lneta.iter().sum();
        let eta_dot: f64 = step.eta.iter().zip(&g_eta).map(|(e, ge)| e * ge).sum();
        for j in 0..n {
            let eta = step.eta[j];
            g_z[j] = g_lneta[j] - eta * sum_lneta + eta * (g_eta[j] - eta_dot);
        }

        backprop_feedforward(&params.mixing, &mut g.mixing, &tr.mix_hidden, tr.r_in, &g_z);
        backprop_feedforward(&params.mean, &mut g.mean, &tr.mean_hidden, tr.r_in, &g_mu);

        // variance network
        for i in 0..n {
            g_x[i] = g_s2[i] * positive_elu_grad(tr.var.pre[i], config.elu_alpha);
        }
        let mut carry_e2 = 0.0;
        let mut carry_s2 = vec![0.0; n];
        for i in 0..n {
            let gx = g_x[i];
            g.variance.output[i * width] += gx;
            for j in 0..k {
                g.variance.output[i * width + j + 1] += gx * tr.var.e2_hidden[j];
            }
            for j in k..2 * k {
                let h = tr.var.s2_hidden[i * k + (j - k)];
                g.variance.output[i * width + j + 1] += gx * h;
                let g_pre = gx * var.output[i * width + j + 1] * act_grad(j == k, h);
                g.variance.hidden_bias[j] += g_pre;
                g.variance.hidden_weight[j] += g_pre * tr.sigma2_in[i];
                carry_s2[i] += g_pre * var.hidden_weight[j];
            }
        }
        for j in 0..k {
            let h = tr.var.e2_hidden[j];
            let g_h: f64 = (0..n)
                .map(|i| g_x[i] * var.output[i * width + j + 1])
                .sum();
            let g_pre = g_h * act_grad(j == 0, h);
            g.variance.hidden_bias[j] += g_pre;
            g.variance.hidden_weight[j] += g_pre * tr.e2_in;
            carry_e2 += g_pre * var.hidden_weight[j];
        }

        g_s2 = carry_s2;
        g_e2 = carry_e2;
    }
}

/// Finite-difference comparison of one trainable coordinate.
#[derive(Debug, Clone)]
pub struct FdEntry {
    pub param: ParamRef,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_dev: f64,
    pub rel_dev: f64,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// Largest relative deviation among entries outside the absolute floor.
    pub max_rel_dev: f64,
    pub max_abs_dev: f64,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn failures(&self) -> impl Iterator<Item = &FdEntry> {
        self.entries.iter().filter(|e| !e.ok)
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Deviations at or below this are accepted regardless of relative size.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Check [`gradient`] against central finite differences on every
/// trainable parameter.
pub fn finite_diff_check(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    init: &RecurrentState,
    tol: f64,
) -> Result<FdReport> {
    let eval = gradient(series, params, config, init)?;
    finite_diff_compare(series, params, config, init, &eval.grads, tol)
}

/// Compare a supplied gradient against central finite differences.
pub fn finite_diff_compare(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    init: &RecurrentState,
    analytic: &GradientVector,
    tol: f64,
) -> Result<FdReport> {
    let layout = params.trainable_layout();
    if analytic.len() != layout.len() {
        return Err(Error::arg("gradient length does not match the trainable set"));
    }
    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(layout.len());
    for (&p, &a) in layout.iter().zip(analytic.as_slice()) {
        let base = params.get(p);
        *probe.get_mut(p) = base + FD_STEP;
        let up = rmdn::model_nll(series, &probe, config, init)?;
        *probe.get_mut(p) = base - FD_STEP;
        let down = rmdn::model_nll(series, &probe, config, init)?;
        *probe.get_mut(p) = base;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let abs_dev = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel_dev = if scale > 0.0 { abs_dev / scale } else { 0.0 };
        let ok = abs_dev <= FD_ABS_FLOOR || rel_dev <= tol;
        entries.push(FdEntry {
            param: p,
            analytic: a,
            numeric,
            abs_dev,
            rel_dev: if abs_dev <= FD_ABS_FLOOR { 0.0 } else { rel_dev },
            ok,
        });
    }
    let max_rel_dev = entries.iter().map(|e| e.rel_dev).fold(0.0, f64::max);
    let max_abs_dev = entries.iter().map(|e| e.abs_dev).fold(0.0, f64::max);
    let passed = entries.iter().all(|e| e.ok);
    Ok(FdReport {
        entries,
        max_rel_dev,
        max_abs_dev,
        tol,
        passed,
    })
}

/// Group label used in check reports, e.g. `variance.output[1][3]`.
pub fn describe(p: ParamRef) -> String {
    use crate::rmdn::Slot;
    let name = match p.subnet {
        SubnetKind::Mixing => "mixing",
        SubnetKind::Mean => "mean",
        SubnetKind::Variance => "variance",
    };
    match p.slot {
        Slot::HiddenBias(k) => format!("{name}.hidden_bias[{k}]"),
        Slot::HiddenWeight(k) => format!("{name}.hidden_weight[{k}]"),
        Slot::Output { component, column } => format!("{name}.output[{component}][{column}]"),
    }
}
