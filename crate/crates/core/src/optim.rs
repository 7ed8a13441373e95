//! Adam, the pretrain-then-train schedule, and convergence classification.

use crate::autodiff::{self, FreezeMask};
use crate::error::{Error, Result};
use crate::rmdn::{self, RecurrentState, RmdnConfig, RmdnParams};

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `values` in place. Non-finite gradients leave both the
/// values and the state untouched and return a domain error.
pub fn adam_step(values: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if values.len() != grads.len() || values.len() != state.m.len() {
        return Err(Error::arg(format!(
            "adam: {} values, {} gradients, state for {}",
            values.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::domain("non-finite gradient; update refused"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((x, &g), (m, v)) in values
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *x -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 20;
pub const DEFAULT_TRAIN_EPOCHS: usize = 300;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    /// Leading epochs with the freeze mask applied.
    pub pretrain_epochs: usize,
    /// Epochs on all parameters after pretraining.
    pub train_epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: DEFAULT_PRETRAIN_EPOCHS,
            train_epochs: DEFAULT_TRAIN_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

impl TrainSchedule {
    pub fn plain() -> Self {
        Self {
            pretrain_epochs: 0,
            ..Self::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.train_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_epochs == 0 {
            return Err(Error::arg("train_epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConvergenceStatus {
    Converged,
    NotConverged,
}

impl ConvergenceStatus {
    pub fn label(self) -> &'static str {
        match self {
            ConvergenceStatus::Converged => "Converged",
            ConvergenceStatus::NotConverged => "NotConverged",
        }
    }
}

/// Final log-likelihoods below this count as unreasonable.
pub const UNREASONABLE_LOGLIK: f64 = -100_000.0;

pub fn classify_convergence(final_loglik: f64) -> ConvergenceStatus {
    if final_loglik.is_nan() || final_loglik < UNREASONABLE_LOGLIK {
        ConvergenceStatus::NotConverged
    } else {
        ConvergenceStatus::Converged
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Loss at the start of each executed epoch.
    pub loss_trace: Vec<f64>,
    pub final_params: RmdnParams,
    pub init_state: RecurrentState,
    pub final_loglik: f64,
    pub status: ConvergenceStatus,
    /// Epoch whose loss or gradient was non-finite.
    pub diverged_at: Option<usize>,
    pub epochs_completed: usize,
}

/// Full-batch training: `pretrain_epochs` steps with `mask` applied to every
/// gradient, then `train_epochs` steps on everything. Adam moments carry over
/// between the two phases.
pub fn train(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    schedule: &TrainSchedule,
    mask: &FreezeMask,
) -> Result<TrainReport> {
    train_with_observer(series, params, config, schedule, mask, |_, _| {})
}

/// [`train`] with a callback invoked after every completed epoch with the
/// epoch index and the updated parameters.
pub fn train_with_observer<F>(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    schedule: &TrainSchedule,
    mask: &FreezeMask,
    mut observer: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &RmdnParams),
{
    schedule.validate()?;
    config.validate()?;
    let mut current = params.clone();
    let n = current.n_trainable();
    if schedule.pretrain_epochs > 0 && mask.len() != n {
        return Err(Error::arg(format!(
            "mask covers {} parameters, model has {n}",
            mask.len()
        )));
    }
    let init = RecurrentState::from_series(series, config.n_components);
    let mut adam = AdamState::new(n, schedule.learning_rate);
    let mut values = current.trainable_values();
    let mut trace = Vec::with_capacity(schedule.total_epochs());
    let mut diverged_at = None;

    for epoch in 0..schedule.total_epochs() {
        let eval = autodiff::gradient(series, &current, config, &init)?;
        trace.push(eval.loss);
        if eval.diverged {
            diverged_at = Some(epoch);
            break;
        }
        let grads = if epoch < schedule.pretrain_epochs {
            autodiff::apply_mask(&eval.grads, mask)?
        } else {
            eval.grads
        };
        adam_step(&mut values, grads.as_slice(), &mut adam)?;
        current.set_trainable_values(&values)?;
        observer(epoch, &current);
    }

    let final_loglik = match diverged_at {
        Some(_) => {
            let last = *trace.last().unwrap_or(&f64::NAN);
            // a finite loss here means the gradient blew up
            if last.is_finite() {
                f64::NAN
            } else {
                -last
            }
        }
        None => -rmdn::model_nll(series, &current, config, &init)?,
    };
    Ok(TrainReport {
        epochs_completed: diverged_at.unwrap_or(trace.len()),
        loss_trace: trace,
        final_params: current,
        init_state: init,
        final_loglik,
        status: classify_convergence(final_loglik),
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garch::{simulate_garch, GarchParams};
    use crate::rmdn::{init_params, InitScheme};

    #[test]
    fn first_step_magnitude() {
        for g in [3.7, -0.002] {
            let mut x = [0.5];
            let mut st = AdamState::new(1, 0.01);
            adam_step(&mut x, &[g], &mut st).unwrap();
            assert!((x[0] - (0.5 - 0.01 * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut x = [1.25, -3.0];
        let mut st = AdamState::new(2, 0.1);
        adam_step(&mut x, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(x, [1.25, -3.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut x = [1.0];
        let mut st = AdamState::new(1, 0.1);
        for _ in 0..100 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut st).unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn refuses_nan_gradient() {
        let mut x = [1.0, 2.0];
        let mut st = AdamState::new(2, 0.1);
        assert!(adam_step(&mut x, &[f64::NAN, 1.0], &mut st).is_err());
        assert_eq!(x, [1.0, 2.0]);
        assert_eq!(st.t, 0);
        assert!(adam_step(&mut x, &[1.0], &mut st).is_err());
    }

    #[test]
    fn classification_thresholds() {
        assert_eq!(classify_convergence(f64::NAN), ConvergenceStatus::NotConverged);
        assert_eq!(classify_convergence(-150_000.0), ConvergenceStatus::NotConverged);
        assert_eq!(classify_convergence(f64::NEG_INFINITY), ConvergenceStatus::NotConverged);
        assert_eq!(classify_convergence(-2000.0), ConvergenceStatus::Converged);
        assert_eq!(classify_convergence(-1999.45), ConvergenceStatus::Converged);
    }

    fn garch_data(len: usize, seed: u64) -> Vec<f64> {
        let p = GarchParams::new(0.0, 0.0, 0.05, 0.10, 0.85).unwrap();
        simulate_garch(&p, len, seed).unwrap().values().to_vec()
    }

    #[test]
    fn zero_pretrain_epochs_is_plain_training() {
        let cfg = RmdnConfig::default();
        let xs = garch_data(200, 1);
        let p = init_params(&cfg, 3, InitScheme::Plain).unwrap();
        let sched = TrainSchedule {
            pretrain_epochs: 0,
            train_epochs: 15,
            learning_rate: 0.01,
        };
        let with_mask = train(&xs, &p, &cfg, &sched, &FreezeMask::all(p.n_trainable())).unwrap();
        let without = train(&xs, &p, &cfg, &sched, &FreezeMask::none(0)).unwrap();
        assert_eq!(with_mask.loss_trace, without.loss_trace);
        assert_eq!(with_mask.loss_trace.len(), 15);
    }

    #[test]
    fn masked_parameters_stay_fixed_during_pretraining() {
        let cfg = RmdnConfig::default();
        let xs = garch_data(300, 2);
        let p = init_params(&cfg, 4, InitScheme::Plain).unwrap();
        let mask = FreezeMask::nonlinear(&p);
        let sched = TrainSchedule {
            pretrain_epochs: 10,
            train_epochs: 5,
            learning_rate: 0.01,
        };
        let start = p.trainable_values();
        let mut snapshots = Vec::new();
        let rep = train_with_observer(&xs, &p, &cfg, &sched, &mask, |e, q| {
            snapshots.push((e, q.trainable_values()));
        })
        .unwrap();
        assert_eq!(rep.epochs_completed, 15);
        for (e, vals) in &snapshots {
            for (j, frozen) in mask.0.iter().enumerate() {
                if *frozen && *e < 10 {
                    assert_eq!(vals[j].to_bits(), start[j].to_bits());
                }
            }
        }
        // after pretraining the nonlinear weights move
        let last = &snapshots.last().unwrap().1;
        assert!(mask.0.iter().zip(last.iter().zip(&start)).any(|(f, (a, b))| *f && a != b));
        assert!(rep.final_params.pins_hold());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = RmdnConfig::default();
        let xs = garch_data(150, 3);
        let p = init_params(&cfg, 5, InitScheme::Pretrain).unwrap();
        let mask = FreezeMask::nonlinear(&p);
        let sched = TrainSchedule {
            pretrain_epochs: 5,
            train_epochs: 10,
            learning_rate: 0.01,
        };
        let a = train(&xs, &p, &cfg, &sched, &mask).unwrap();
        let b = train(&xs, &p, &cfg, &sched, &mask).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.final_loglik.to_bits(), b.final_loglik.to_bits());
    }

    #[test]
    fn nan_parameters_stop_training() {
        let cfg = RmdnConfig::new(2, 2);
        let xs = garch_data(50, 4);
        let mut p = init_params(&cfg, 6, InitScheme::Plain).unwrap();
        *p.mean.out_mut(1, 1) = f64::NAN;
        let rep = train(&xs, &p, &cfg, &TrainSchedule::plain(), &FreezeMask::none(0)).unwrap();
        assert_eq!(rep.diverged_at, Some(0));
        assert_eq!(rep.loss_trace.len(), 1);
        assert!(rep.final_loglik.is_nan());
        assert_eq!(rep.status, ConvergenceStatus::NotConverged);
    }

    #[test]
    fn schedule_defaults() {
        let s = TrainSchedule::default();
        assert_eq!((s.pretrain_epochs, s.train_epochs), (20, 300));
        assert!(TrainSchedule { train_epochs: 0, ..s }.validate().is_err());
    }

    #[test]
    fn pretrain_moving_average_never_rises() {
        let cfg = RmdnConfig::default();
        for seed in 0..4 {
            let xs = garch_data(1000, 20 + seed);
            let p = init_params(&cfg, seed, InitScheme::Pretrain).unwrap();
            let mask = FreezeMask::nonlinear(&p);
            let rep = train(&xs, &p, &cfg, &TrainSchedule::default(), &mask).unwrap();
            let phase = &rep.loss_trace[..DEFAULT_PRETRAIN_EPOCHS];
            let avg: Vec<f64> = phase.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
            for w in avg.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {avg:?}");
            }
        }
    }

    #[test]
    fn linear_model_approaches_garch_mle() {
        use crate::garch::fit_garch;
        let xs = garch_data(1000, 12);
        let mle = fit_garch(&xs).unwrap().loglik;
        let cfg = RmdnConfig::new(1, 1);
        let p = init_params(&cfg, 5, InitScheme::Pretrain).unwrap();
        let sched = TrainSchedule {
            pretrain_epochs: 0,
            train_epochs: 3000,
            learning_rate: DEFAULT_LEARNING_RATE,
        };
        let rep = train(&xs, &p, &cfg, &sched, &FreezeMask::none(0)).unwrap();
        let rel = (rep.final_loglik - mle).abs() / mle.abs();
        assert!(rel < 0.005, "model {} vs mle {mle}", rep.final_loglik);
    }
}
