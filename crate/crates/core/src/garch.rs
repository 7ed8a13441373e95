//! AR(1)-GARCH(1,1) with Gaussian innovations.
//!
//! ```text
//! r_t   = μ_t + σ_t z_t,           z_t ~ N(0, 1)
//! μ_t   = a0 + a1 r_{t-1}
//! σ²_t  = α0 + α1 e²_{t-1} + β1 σ²_{t-1},   e_t = r_t − μ_t
//! ```
//!
//! Pre-sample values follow the same convention as
//! [`RecurrentState::from_series`](crate::rmdn::RecurrentState::from_series):
//! `r_0` is the sample mean, `e²_0` the sample variance, and `σ²_0` is the
//! caller-supplied `init_var`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{self, ReturnSeries};
use crate::error::{Error, Result};
use crate::mixture::HALF_LN_2PI;
use crate::optim::{adam_step, AdamState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarchParams {
    pub a0: f64,
    pub a1: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta1: f64,
}

impl GarchParams {
    pub fn new(a0: f64, a1: f64, alpha0: f64, alpha1: f64, beta1: f64) -> Result<Self> {
        let p = Self {
            a0,
            a1,
            alpha0,
            alpha1,
            beta1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a0, self.a1, self.alpha0, self.alpha1, self.beta1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("GARCH parameters must be finite"));
        }
        if self.alpha0 <= 0.0 {
            return Err(Error::arg(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if self.alpha1 < 0.0 || self.beta1 < 0.0 {
            return Err(Error::arg("alpha1 and beta1 must be non-negative"));
        }
        if self.alpha1 + self.beta1 >= 1.0 {
            return Err(Error::arg(format!(
                "nonstationary: alpha1 + beta1 = {} must be below 1",
                self.alpha1 + self.beta1
            )));
        }
        Ok(())
    }

    pub fn persistence(&self) -> f64 {
        self.alpha1 + self.beta1
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.alpha0 / (1.0 - self.persistence())
    }
}

/// Conditional `(μ_t, σ²_t)` for every observation.
pub fn garch_filter(series: &[f64], params: &GarchParams, init_var: f64) -> Result<Vec<(f64, f64)>> {
    params.validate()?;
    if series.is_empty() {
        return Err(Error::arg("cannot filter an empty series"));
    }
    if !(init_var > 0.0 && init_var.is_finite()) {
        return Err(Error::arg(format!("init_var must be positive, got {init_var}")));
    }
    let mut r_prev = data::mean(series);
    let mut e2_prev = data::variance(series);
    let mut s2_prev = init_var;
    let mut out = Vec::with_capacity(series.len());
    for &r in series {
        let mu = params.a0 + params.a1 * r_prev;
        let s2 = params.alpha0 + params.alpha1 * e2_prev + params.beta1 * s2_prev;
        out.push((mu, s2));
        e2_prev = (r - mu) * (r - mu);
        r_prev = r;
        s2_prev = s2;
    }
    Ok(out)
}

pub fn garch_nll(series: &[f64], params: &GarchParams, init_var: f64) -> Result<f64> {
    let path = garch_filter(series, params, init_var)?;
    Ok(series
        .iter()
        .zip(&path)
        .map(|(&r, &(mu, s2))| HALF_LN_2PI + 0.5 * s2.ln() + 0.5 * (r - mu) * (r - mu) / s2)
        .sum())
}

/// Negative log-likelihood and its gradient with respect to
/// `(a0, a1, α0, α1, β1)` by forward sensitivities.
fn nll_and_grad(series: &[f64], p: &GarchParams, init_var: f64) -> (f64, [f64; 5]) {
    let mut r_prev = data::mean(series);
    let mut e2_prev = data::variance(series);
    let mut s2_prev = init_var;
    let mut d_e2 = [0.0; 5];
    let mut d_s2 = [0.0; 5];
    let mut nll = 0.0;
    let mut grad = [0.0; 5];
    for &r in series {
        let mu = p.a0 + p.a1 * r_prev;
        let s2 = p.alpha0 + p.alpha1 * e2_prev + p.beta1 * s2_prev;
        let mut d_s2_now = [0.0; 5];
        for j in 0..5 {
            d_s2_now[j] = p.alpha1 * d_e2[j] + p.beta1 * d_s2[j];
        }
        d_s2_now[2] += 1.0;
        d_s2_now[3] += e2_prev;
        d_s2_now[4] += s2_prev;
        let d_mu = [1.0, r_prev, 0.0, 0.0, 0.0];

        let e = r - mu;
        nll += HALF_LN_2PI + 0.5 * s2.ln() + 0.5 * e * e / s2;
        let dl_ds2 = 0.5 / s2 - 0.5 * e * e / (s2 * s2);
        let dl_dmu = -e / s2;
        for j in 0..5 {
            grad[j] += dl_ds2 * d_s2_now[j] + dl_dmu * d_mu[j];
            d_e2[j] = -2.0 * e * d_mu[j];
        }
        d_s2 = d_s2_now;
        e2_prev = e * e;
        r_prev = r;
        s2_prev = s2;
    }
    (nll, grad)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained coordinates `(a0, a1, ln α0, logit(α1+β1), logit(α1/(α1+β1)))`.
fn to_unconstrained(p: &GarchParams) -> [f64; 5] {
    let s = p.alpha1 + p.beta1;
    [p.a0, p.a1, p.alpha0.ln(), logit(s), logit(p.alpha1 / s)]
}

/// Persistence logits are clamped so `α1 + β1` never rounds to 1.
const MAX_PERSISTENCE_LOGIT: f64 = 30.0;

fn from_unconstrained(theta: &[f64]) -> GarchParams {
    let s = logistic(theta[3].min(MAX_PERSISTENCE_LOGIT));
    let f = logistic(theta[4]);
    GarchParams {
        a0: theta[0],
        a1: theta[1],
        alpha0: theta[2].exp(),
        alpha1: s * f,
        beta1: s * (1.0 - f),
    }
}

fn chain_to_unconstrained(theta: &[f64], g: &[f64; 5]) -> [f64; 5] {
    let s = logistic(theta[3].min(MAX_PERSISTENCE_LOGIT));
    let f = logistic(theta[4]);
    let alpha0 = theta[2].exp();
    let ds = s * (1.0 - s);
    let df = f * (1.0 - f);
    [
        g[0],
        g[1],
        g[2] * alpha0,
        g[3] * f * ds + g[4] * (1.0 - f) * ds,
        g[3] * s * df - g[4] * s * df,
    ]
}

pub const FIT_STEPS: usize = 2000;
pub const FIT_LEARNING_RATE: f64 = 0.05;
pub const MIN_FIT_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarchFit {
    pub params: GarchParams,
    pub loglik: f64,
    pub init_var: f64,
}

fn starting_points(series: &[f64]) -> [GarchParams; 2] {
    let mean = data::mean(series);
    let var = data::variance(series).max(f64::MIN_POSITIVE);
    let targeted = |alpha1: f64, beta1: f64| GarchParams {
        a0: mean,
        a1: 0.0,
        alpha0: (1.0 - alpha1 - beta1) * var,
        alpha1,
        beta1,
    };
    [targeted(0.05, 0.90), targeted(0.25, 0.25)]
}

/// Maximum-likelihood fit by Adam on the unconstrained scale. The best
/// iterate seen is returned.
pub fn fit_garch(series: &[f64]) -> Result<GarchFit> {
    if series.len() < MIN_FIT_LEN {
        return Err(Error::arg(format!(
            "need at least {MIN_FIT_LEN} observations to fit a GARCH, got {}",
            series.len()
        )));
    }
    let init_var = data::variance(series);
    if !(init_var > 0.0) {
        return Err(Error::Fit("series has zero variance".into()));
    }

    let start = starting_points(series)
        .into_iter()
        .find(|p| nll_and_grad(series, p, init_var).0.is_finite())
        .ok_or_else(|| Error::Fit("non-finite likelihood at every starting point".into()))?;

    let mut theta = to_unconstrained(&start);
    let mut adam = AdamState::new(5, FIT_LEARNING_RATE);
    let mut best = (f64::INFINITY, start);
    for _ in 0..FIT_STEPS {
        let p = from_unconstrained(&theta);
        let (loss, g) = nll_and_grad(series, &p, init_var);
        if !loss.is_finite() {
            break;
        }
        if loss < best.0 {
            best = (loss, p);
        }
        let g = chain_to_unconstrained(&theta, &g);
        if adam_step(&mut theta, &g, &mut adam).is_err() {
            break;
        }
    }
    let p = from_unconstrained(&theta);
    let (loss, _) = nll_and_grad(series, &p, init_var);
    if loss < best.0 {
        best = (loss, p);
    }
    if !best.0.is_finite() {
        return Err(Error::Fit("optimizer never reached a finite likelihood".into()));
    }
    best.1.validate().map_err(|e| Error::Fit(e.to_string()))?;
    Ok(GarchFit {
        params: best.1,
        loglik: -best.0,
        init_var,
    })
}

/// Simulate `len` returns. The process starts at its unconditional variance
/// and, when `|a1| < 1`, its unconditional mean.
pub fn simulate_garch(params: &GarchParams, len: usize, seed: u64) -> Result<ReturnSeries> {
    params.validate()?;
    if len == 0 {
        return Err(Error::arg("series length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uncond = params.unconditional_variance();
    let mut r_prev = if params.a1.abs() < 1.0 {
        params.a0 / (1.0 - params.a1)
    } else {
        params.a0
    };
    let mut e2_prev = uncond;
    let mut s2_prev = uncond;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        let mu = params.a0 + params.a1 * r_prev;
        let s2 = params.alpha0 + params.alpha1 * e2_prev + params.beta1 * s2_prev;
        let z: f64 = StandardNormal.sample(&mut rng);
        let r = mu + s2.sqrt() * z;
        values.push(r);
        e2_prev = (r - mu) * (r - mu);
        r_prev = r;
        s2_prev = s2;
    }
    ReturnSeries::new(format!("garch-{seed}"), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{self, MixtureStep};
    use rand::Rng;

    fn p(a0: f64, a1: f64, alpha0: f64, alpha1: f64, beta1: f64) -> GarchParams {
        GarchParams::new(a0, a1, alpha0, alpha1, beta1).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GarchParams::new(0.0, 0.0, 0.0, 0.1, 0.8).is_err());
        assert!(GarchParams::new(0.0, 0.0, 0.1, -0.1, 0.8).is_err());
        assert!(GarchParams::new(0.0, 0.0, 0.1, 0.3, 0.7).is_err());
        assert!(GarchParams::new(0.0, 0.0, 0.1, 0.3, 0.6).is_ok());
    }

    #[test]
    fn constant_variance_reduction() {
        let xs = [0.3, -1.2, 0.8, 2.0, -0.1];
        let path = garch_filter(&xs, &p(0.1, 0.2, 0.7, 0.0, 0.0), 3.0).unwrap();
        assert!(path.iter().all(|&(_, s2)| s2 == 0.7));
    }

    #[test]
    fn geometric_recursion_on_zeros() {
        let (alpha0, beta1, v) = (0.2, 0.6, 2.5);
        let path = garch_filter(&[0.0; 12], &p(0.0, 0.0, alpha0, 0.3, beta1), v).unwrap();
        for (i, &(mu, s2)) in path.iter().enumerate() {
            let t = (i + 1) as i32;
            let want = alpha0 * (1.0 - beta1.powi(t)) / (1.0 - beta1) + beta1.powi(t) * v;
            assert_eq!(mu, 0.0);
            assert!((s2 - want).abs() < 1e-14);
        }
    }

    #[test]
    fn three_step_hand_example() {
        // r = (1, -1, 2): mean 2/3, variance 14/9
        let xs = [1.0, -1.0, 2.0];
        let path = garch_filter(&xs, &p(0.0, 0.0, 0.1, 0.2, 0.5), 1.0).unwrap();
        let s1 = 0.1 + 0.2 * (14.0 / 9.0) + 0.5 * 1.0;
        let s2 = 0.1 + 0.2 * 1.0 + 0.5 * s1;
        let s3 = 0.1 + 0.2 * 1.0 + 0.5 * s2;
        let want = [s1, s2, s3];
        for (got, w) in path.iter().zip(want) {
            assert_eq!(got.0, 0.0);
            assert!((got.1 - w).abs() < 1e-15);
        }
    }

    #[test]
    fn nll_examples() {
        // α1 = β1 = 0, α0 = 1: every step is N(0, 1)
        let nll = garch_nll(&[0.0; 10], &p(0.0, 0.0, 1.0, 0.0, 0.0), 1.0).unwrap();
        assert!((nll - 10.0 * HALF_LN_2PI).abs() < 1e-12);

        let q = p(0.1, 0.3, 0.2, 0.15, 0.7);
        let xs = simulate_garch(&q, 300, 4).unwrap();
        let path = garch_filter(xs.values(), &q, xs.variance()).unwrap();
        let steps: Vec<_> = path.iter().map(|&(m, s)| MixtureStep::gaussian(m, s)).collect();
        let via_mixture = mixture::nll(xs.values(), &steps).unwrap();
        let direct = garch_nll(xs.values(), &q, xs.variance()).unwrap();
        assert!((via_mixture - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let q = p(0.05, -0.2, 0.3, 0.12, 0.8);
        let xs = simulate_garch(&q, 200, 9).unwrap();
        let v = xs.variance();
        let (_, g) = nll_and_grad(xs.values(), &q, v);
        let base = [q.a0, q.a1, q.alpha0, q.alpha1, q.beta1];
        for j in 0..5 {
            let mut up = base;
            let mut dn = base;
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            let mk = |b: [f64; 5]| GarchParams {
                a0: b[0],
                a1: b[1],
                alpha0: b[2],
                alpha1: b[3],
                beta1: b[4],
            };
            let fd = (nll_and_grad(xs.values(), &mk(up), v).0
                - nll_and_grad(xs.values(), &mk(dn), v).0)
                / 2e-6;
            assert!((fd - g[j]).abs() <= 1e-5 * fd.abs().max(1.0), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn reparameterization_round_trip() {
        let q = p(0.3, -0.4, 0.02, 0.07, 0.9);
        let back = from_unconstrained(&to_unconstrained(&q));
        assert!((back.alpha0 - q.alpha0).abs() < 1e-15);
        assert!((back.alpha1 - q.alpha1).abs() < 1e-15);
        assert!((back.beta1 - q.beta1).abs() < 1e-15);
        for theta in [[0.0, 0.0, -50.0, 40.0, -40.0], [1.0, 2.0, 3.0, -40.0, 40.0]] {
            assert!(from_unconstrained(&theta).validate().is_ok());
        }
    }

    #[test]
    fn fit_dominates_truth_and_recovers_persistence() {
        let truth = p(0.0, 0.0, 0.05, 0.10, 0.85);
        let xs = simulate_garch(&truth, 2000, 21).unwrap();
        let fit = fit_garch(xs.values()).unwrap();
        let truth_ll = -garch_nll(xs.values(), &truth, xs.variance()).unwrap();
        assert!(fit.loglik >= truth_ll, "{} < {truth_ll}", fit.loglik);
        assert!((fit.params.persistence() - 0.95).abs() <= 0.1, "{:?}", fit.params);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let a1 = rng.random_range(0.0..0.5);
            let b1 = rng.random_range(0.0..(0.999 - a1));
            let q = p(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.9..0.9),
                rng.random_range(0.01..2.0),
                a1,
                b1,
            );
            let ll = -garch_nll(xs.values(), &q, xs.variance()).unwrap();
            assert!(fit.loglik >= ll);
        }
    }

    #[test]
    fn fit_on_white_noise_finds_no_arch_effect() {
        let xs = simulate_garch(&p(0.0, 0.0, 1.0, 0.0, 0.0), 2000, 5).unwrap();
        let fit = fit_garch(xs.values()).unwrap();
        assert!(fit.params.alpha1 <= 0.05, "{:?}", fit.params);
    }

    #[test]
    fn fit_rejects_short_series() {
        assert!(fit_garch(&[0.1; 20]).is_err());
        assert!(matches!(fit_garch(&[0.0; 60]), Err(Error::Fit(_))));
    }

    #[test]
    fn simulation_moments_and_determinism() {
        let white = p(0.0, 0.0, 0.7, 0.0, 0.0);
        let xs = simulate_garch(&white, 10_000, 3).unwrap();
        let n = xs.len() as f64;
        // var of the sample variance of a Gaussian: 2σ⁴/n
        let se = (2.0 * 0.49 / n).sqrt();
        assert!((xs.variance() - 0.7).abs() < 3.0 * se);
        assert_eq!(simulate_garch(&white, 50, 8).unwrap(), simulate_garch(&white, 50, 8).unwrap());

        let q = p(0.0, 0.0, 0.05, 0.10, 0.85);
        let long = simulate_garch(&q, 100_000, 12).unwrap();
        assert!((long.variance() - 1.0).abs() < 0.1, "{}", long.variance());
        assert!(garch_filter(long.values(), &q, 1.0)
            .unwrap()
            .iter()
            .all(|&(_, s2)| s2 > 0.0));
    }
}
