//! The ELU-RMDN: parameter container and forward pass.
//!
//! Three subnetworks share the same layout. Each has `H` hidden nodes with an
//! input-side weight and bias, and one output row per mixture component whose
//! column 0 is the output bias and column `k + 1` multiplies hidden node `k`.
//!
//! * mixing network: `H = K`, fed by `r_t`, softmax over its `N` outputs.
//! * mean network: `H = K`, fed by `r_t`.
//! * variance network: `H = 2K`. Nodes `0..K` see the previous squared
//!   residual `e²_t`, nodes `K..2K` see the component's own previous variance
//!   `σ²_{i,t}`. Its outputs pass through [`positive_elu`].
//!
//! Node 0 of every subnetwork and node `K` of the variance network are linear;
//! all other hidden nodes are `tanh`. The input weight of every linear node is
//! pinned to 1 and its input bias to 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::garch::GarchParams;
use crate::mixture::{self, MixtureStep};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmdnConfig {
    pub n_components: usize,
    /// Hidden nodes per input of each subnetwork; node 0 is linear.
    pub k_hidden: usize,
    pub elu_alpha: f64,
    pub elu_eps: f64,
}

impl Default for RmdnConfig {
    fn default() -> Self {
        Self {
            n_components: 2,
            k_hidden: 3,
            elu_alpha: 1.0,
            elu_eps: 1e-6,
        }
    }
}

impl RmdnConfig {
    pub fn new(n_components: usize, k_hidden: usize) -> Self {
        Self {
            n_components,
            k_hidden,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::arg("n_components must be at least 1"));
        }
        if self.k_hidden == 0 {
            return Err(Error::arg("k_hidden must be at least 1"));
        }
        // alpha above 1 lets the saturated branch go negative
        if !(self.elu_alpha > 0.0 && self.elu_alpha <= 1.0) {
            return Err(Error::arg(format!(
                "elu_alpha must lie in (0, 1], got {}",
                self.elu_alpha
            )));
        }
        if !(self.elu_eps > 0.0 && self.elu_eps < 1e-3) {
            return Err(Error::arg(format!(
                "elu_eps must lie in (0, 1e-3), got {}",
                self.elu_eps
            )));
        }
        Ok(())
    }
}

/// `ELU(x, α) + 1 + ε`.
pub fn positive_elu(x: f64, alpha: f64, eps: f64) -> f64 {
    if x > 0.0 {
        x + 1.0 + eps
    } else {
        // α(eˣ − 1) + 1 regrouped so the saturated tail does not cancel
        alpha * x.exp() + (1.0 - alpha) + eps
    }
}

/// Derivative of [`positive_elu`] with respect to `x`.
pub fn positive_elu_grad(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        alpha * x.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubnetKind {
    Mixing,
    Mean,
    Variance,
}

impl SubnetKind {
    pub const ALL: [SubnetKind; 3] = [SubnetKind::Mixing, SubnetKind::Mean, SubnetKind::Variance];

    pub fn name(self) -> &'static str {
        match self {
            SubnetKind::Mixing => "mixing",
            SubnetKind::Mean => "mean",
            SubnetKind::Variance => "variance",
        }
    }
}

/// Weights of one subnetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnetwork {
    pub hidden_bias: Vec<f64>,
    pub hidden_weight: Vec<f64>,
    /// Row-major `n_outputs × (n_hidden + 1)`.
    pub output: Vec<f64>,
    n_outputs: usize,
}

impl Subnetwork {
    pub fn zeros(n_outputs: usize, n_hidden: usize) -> Self {
        Self {
            hidden_bias: vec![0.0; n_hidden],
            hidden_weight: vec![0.0; n_hidden],
            output: vec![0.0; n_outputs * (n_hidden + 1)],
            n_outputs,
        }
    }

    pub fn from_parts(
        hidden_bias: Vec<f64>,
        hidden_weight: Vec<f64>,
        output: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_hidden = hidden_bias.len();
        if hidden_weight.len() != n_hidden {
            return Err(Error::arg("hidden bias/weight length mismatch"));
        }
        if output.iter().any(|row| row.len() != n_hidden + 1) {
            return Err(Error::arg(format!(
                "every output row needs {} entries",
                n_hidden + 1
            )));
        }
        Ok(Self {
            hidden_bias,
            hidden_weight,
            n_outputs: output.len(),
            output: output.into_iter().flatten().collect(),
        })
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn output_row(&self, i: usize) -> &[f64] {
        let w = self.n_hidden() + 1;
        &self.output[i * w..(i + 1) * w]
    }

    pub fn output_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_outputs).map(|i| self.output_row(i).to_vec()).collect()
    }

    pub fn out(&self, component: usize, column: usize) -> f64 {
        self.output[component * (self.n_hidden() + 1) + column]
    }

    pub fn out_mut(&mut self, component: usize, column: usize) -> &mut f64 {
        let w = self.n_hidden() + 1;
        &mut self.output[component * w + column]
    }
}

/// Location of a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    HiddenBias(usize),
    HiddenWeight(usize),
    Output { component: usize, column: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub subnet: SubnetKind,
    pub slot: Slot,
}

/// All weights of an ELU-RMDN.
#[derive(Debug, Clone, PartialEq)]
pub struct RmdnParams {
    pub mixing: Subnetwork,
    pub mean: Subnetwork,
    pub variance: Subnetwork,
    n_components: usize,
    k_hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Nonlinear nodes start at zero so training begins from the linear model.
    Pretrain,
    Plain,
}

impl RmdnParams {
    /// All-zero parameters with pinned entries at their pinned values.
    pub fn zeros(config: &RmdnConfig) -> Self {
        let (n, k) = (config.n_components, config.k_hidden);
        let mut p = Self {
            mixing: Subnetwork::zeros(n, k),
            mean: Subnetwork::zeros(n, k),
            variance: Subnetwork::zeros(n, 2 * k),
            n_components: n,
            k_hidden: k,
        };
        p.apply_pins();
        p
    }

    pub fn from_subnetworks(
        config: &RmdnConfig,
        mixing: Subnetwork,
        mean: Subnetwork,
        variance: Subnetwork,
    ) -> Result<Self> {
        let (n, k) = (config.n_components, config.k_hidden);
        let check = |s: &Subnetwork, hidden: usize, name: &str| {
            if s.n_outputs() != n || s.n_hidden() != hidden {
                Err(Error::arg(format!(
                    "{name} network has shape {}x{} but the config needs {n}x{hidden}",
                    s.n_outputs(),
                    s.n_hidden()
                )))
            } else {
                Ok(())
            }
        };
        check(&mixing, k, "mixing")?;
        check(&mean, k, "mean")?;
        check(&variance, 2 * k, "variance")?;
        Ok(Self {
            mixing,
            mean,
            variance,
            n_components: n,
            k_hidden: k,
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn k_hidden(&self) -> usize {
        self.k_hidden
    }

    pub fn matches(&self, config: &RmdnConfig) -> bool {
        self.n_components == config.n_components && self.k_hidden == config.k_hidden
    }

    pub fn subnet(&self, kind: SubnetKind) -> &Subnetwork {
        match kind {
            SubnetKind::Mixing => &self.mixing,
            SubnetKind::Mean => &self.mean,
            SubnetKind::Variance => &self.variance,
        }
    }

    pub fn subnet_mut(&mut self, kind: SubnetKind) -> &mut Subnetwork {
        match kind {
            SubnetKind::Mixing => &mut self.mixing,
            SubnetKind::Mean => &mut self.mean,
            SubnetKind::Variance => &mut self.variance,
        }
    }

    pub fn is_linear_node(&self, kind: SubnetKind, node: usize) -> bool {
        node == 0 || (kind == SubnetKind::Variance && node == self.k_hidden)
    }

    /// Every parameter in flattening order: per subnetwork, each hidden
    /// node's bias then weight, then the output matrix row by row.
    pub fn layout(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for kind in SubnetKind::ALL {
            let s = self.subnet(kind);
            for node in 0..s.n_hidden() {
                refs.push(ParamRef { subnet: kind, slot: Slot::HiddenBias(node) });
                refs.push(ParamRef { subnet: kind, slot: Slot::HiddenWeight(node) });
            }
            for component in 0..s.n_outputs() {
                for column in 0..=s.n_hidden() {
                    refs.push(ParamRef {
                        subnet: kind,
                        slot: Slot::Output { component, column },
                    });
                }
            }
        }
        refs
    }

    /// Input weight/bias of a linear hidden node.
    pub fn is_pinned(&self, p: ParamRef) -> bool {
        match p.slot {
            Slot::HiddenBias(node) | Slot::HiddenWeight(node) => {
                self.is_linear_node(p.subnet, node)
            }
            Slot::Output { .. } => false,
        }
    }

    /// Parameter attached to a tanh node, on either side of it.
    pub fn is_nonlinear(&self, p: ParamRef) -> bool {
        match p.slot {
            Slot::HiddenBias(node) | Slot::HiddenWeight(node) => {
                !self.is_linear_node(p.subnet, node)
            }
            Slot::Output { column, .. } => column > 0 && !self.is_linear_node(p.subnet, column - 1),
        }
    }

    pub fn trainable_layout(&self) -> Vec<ParamRef> {
        self.layout()
            .into_iter()
            .filter(|&p| !self.is_pinned(p))
            .collect()
    }

    pub fn get(&self, p: ParamRef) -> f64 {
        let s = self.subnet(p.subnet);
        match p.slot {
            Slot::HiddenBias(k) => s.hidden_bias[k],
            Slot::HiddenWeight(k) => s.hidden_weight[k],
            Slot::Output { component, column } => s.out(component, column),
        }
    }

    pub fn get_mut(&mut self, p: ParamRef) -> &mut f64 {
        let s = self.subnet_mut(p.subnet);
        match p.slot {
            Slot::HiddenBias(k) => &mut s.hidden_bias[k],
            Slot::HiddenWeight(k) => &mut s.hidden_weight[k],
            Slot::Output { component, column } => s.out_mut(component, column),
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable_layout().len()
    }

    pub fn trainable_values(&self) -> Vec<f64> {
        self.trainable_layout().into_iter().map(|p| self.get(p)).collect()
    }

    pub fn set_trainable_values(&mut self, values: &[f64]) -> Result<()> {
        let layout = self.trainable_layout();
        if layout.len() != values.len() {
            return Err(Error::arg(format!(
                "{} trainable parameters but {} values",
                layout.len(),
                values.len()
            )));
        }
        for (p, &v) in layout.into_iter().zip(values) {
            *self.get_mut(p) = v;
        }
        Ok(())
    }

    pub fn pins_hold(&self) -> bool {
        self.layout().into_iter().filter(|&p| self.is_pinned(p)).all(|p| {
            let want = if matches!(p.slot, Slot::HiddenWeight(_)) { 1.0 } else { 0.0 };
            self.get(p) == want
        })
    }

    pub fn all_finite(&self) -> bool {
        SubnetKind::ALL.iter().all(|&k| {
            let s = self.subnet(k);
            s.hidden_bias
                .iter()
                .chain(&s.hidden_weight)
                .chain(&s.output)
                .all(|v| v.is_finite())
        })
    }

    fn apply_pins(&mut self) {
        for p in self.layout() {
            if self.is_pinned(p) {
                *self.get_mut(p) = if matches!(p.slot, Slot::HiddenWeight(_)) { 1.0 } else { 0.0 };
            }
        }
    }

    /// The same model with every tanh node removed (`K = 1`).
    pub fn linear_part(&self) -> RmdnParams {
        let k = self.k_hidden;
        let n = self.n_components;
        let cfg = RmdnConfig::new(n, 1);
        let mut out = RmdnParams::zeros(&cfg);
        for i in 0..n {
            for kind in [SubnetKind::Mixing, SubnetKind::Mean] {
                *out.subnet_mut(kind).out_mut(i, 0) = self.subnet(kind).out(i, 0);
                *out.subnet_mut(kind).out_mut(i, 1) = self.subnet(kind).out(i, 1);
            }
            *out.variance.out_mut(i, 0) = self.variance.out(i, 0);
            *out.variance.out_mut(i, 1) = self.variance.out(i, 1);
            *out.variance.out_mut(i, 2) = self.variance.out(i, k + 1);
        }
        out
    }

    /// Linear-only single-component ELU-RMDN that reproduces an AR(1)-GARCH(1,1)
    /// whenever every variance pre-activation stays positive.
    pub fn nested_garch(garch: &GarchParams, config: &RmdnConfig) -> Result<RmdnParams> {
        if config.n_components != 1 {
            return Err(Error::arg("the GARCH nesting needs exactly one component"));
        }
        let k = config.k_hidden;
        let mut p = RmdnParams::zeros(config);
        *p.mean.out_mut(0, 0) = garch.a0;
        *p.mean.out_mut(0, 1) = garch.a1;
        *p.variance.out_mut(0, 0) = garch.alpha0 - 1.0 - config.elu_eps;
        *p.variance.out_mut(0, 1) = garch.alpha1;
        *p.variance.out_mut(0, k + 1) = garch.beta1;
        Ok(p)
    }
}

/// Draw initial parameters.
///
/// Free weights are uniform on `[-0.5, 0.5]`. Output biases of every
/// subnetwork, input biases of tanh nodes, and every hidden-to-output weight
/// of the variance network are then set to 1. Under [`InitScheme::Pretrain`]
/// every parameter attached to a tanh node is set to 0 instead.
pub fn init_params(config: &RmdnConfig, seed: u64, scheme: InitScheme) -> Result<RmdnParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = RmdnParams::zeros(config);
    for r in p.layout() {
        let draw: f64 = rng.random_range(-0.5..=0.5);
        if p.is_pinned(r) {
            continue;
        }
        let value = if scheme == InitScheme::Pretrain && p.is_nonlinear(r) {
            0.0
        } else {
            match r.slot {
                Slot::HiddenBias(_) => 1.0,
                Slot::Output { column: 0, .. } => 1.0,
                Slot::Output { .. } if r.subnet == SubnetKind::Variance => 1.0,
                _ => draw,
            }
        };
        *p.get_mut(r) = value;
    }
    Ok(p)
}

/// Pre-sample inputs consumed by the first forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    /// Return fed to the mixing and mean networks.
    pub r_prev: f64,
    /// Squared residual fed to the variance network.
    pub e2_prev: f64,
    /// Per-component variance fed back into the variance network.
    pub sigma2_prev: Vec<f64>,
}

impl RecurrentState {
    /// Sample mean as the pre-sample return, sample variance as both the
    /// squared residual and every component variance. The component
    /// variances of a constant series fall back to 1.
    pub fn from_series(series: &[f64], n_components: usize) -> Self {
        let mean = crate::data::mean(series);
        let var = crate::data::variance(series);
        let s2 = if var > 0.0 { var } else { 1.0 };
        Self {
            r_prev: mean,
            e2_prev: var,
            sigma2_prev: vec![s2; n_components],
        }
    }

    pub fn validate(&self, n_components: usize) -> Result<()> {
        if self.sigma2_prev.len() != n_components {
            return Err(Error::arg(format!(
                "state holds {} component variances, model has {n_components}",
                self.sigma2_prev.len()
            )));
        }
        let ok = self.r_prev.is_finite()
            && self.e2_prev.is_finite()
            && self.e2_prev >= 0.0
            && self.sigma2_prev.iter().all(|s| s.is_finite() && *s > 0.0);
        if !ok {
            return Err(Error::arg("recurrent state must be finite with positive variances"));
        }
        Ok(())
    }
}

#[inline]
fn activate(linear: bool, pre: f64) -> f64 {
    if linear {
        pre
    } else {
        pre.tanh()
    }
}

/// Hidden activations of the mixing or mean network at input `r`.
fn feedforward_hidden(s: &Subnetwork, r: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..s.n_hidden()).map(|k| {
        activate(k == 0, s.hidden_weight[k] * r + s.hidden_bias[k])
    }));
}

fn output_from_hidden(s: &Subnetwork, hidden: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..s.n_outputs()).map(|i| {
        let row = s.output_row(i);
        row[0] + row[1..].iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>()
    }));
}

/// Softmax with a max shift.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn mixing_forward(r: f64, params: &RmdnParams) -> Vec<f64> {
    let mut hidden = Vec::new();
    let mut logits = Vec::new();
    feedforward_hidden(&params.mixing, r, &mut hidden);
    output_from_hidden(&params.mixing, &hidden, &mut logits);
    softmax(&logits)
}

pub fn mean_forward(r: f64, params: &RmdnParams) -> Vec<f64> {
    let mut hidden = Vec::new();
    let mut mu = Vec::new();
    feedforward_hidden(&params.mean, r, &mut hidden);
    output_from_hidden(&params.mean, &hidden, &mut mu);
    mu
}

pub fn variance_forward(state: &RecurrentState, params: &RmdnParams, config: &RmdnConfig) -> Vec<f64> {
    let mut trace = VarianceTrace::default();
    variance_traced(state.e2_prev, &state.sigma2_prev, params, config, &mut trace);
    trace.sigma2
}

/// Intermediate values of the variance network at one step.
#[derive(Debug, Clone, Default)]
pub(crate) struct VarianceTrace {
    /// Activations of the `K` nodes fed by `e²`.
    pub e2_hidden: Vec<f64>,
    /// Row-major `N × K` activations of the nodes fed by each `σ²_i`.
    pub s2_hidden: Vec<f64>,
    pub pre: Vec<f64>,
    pub sigma2: Vec<f64>,
}

pub(crate) fn variance_traced(
    e2_prev: f64,
    sigma2_prev: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    trace: &mut VarianceTrace,
) {
    let s = &params.variance;
    let k = params.k_hidden;
    trace.e2_hidden.clear();
    trace
        .e2_hidden
        .extend((0..k).map(|j| activate(j == 0, s.hidden_weight[j] * e2_prev + s.hidden_bias[j])));
    trace.s2_hidden.clear();
    trace.pre.clear();
    trace.sigma2.clear();
    for (i, &s2) in sigma2_prev.iter().enumerate() {
        let row = s.output_row(i);
        let mut x = row[0];
        for j in 0..k {
            x += row[1 + j] * trace.e2_hidden[j];
        }
        for j in k..2 * k {
            let h = activate(j == k, s.hidden_weight[j] * s2 + s.hidden_bias[j]);
            trace.s2_hidden.push(h);
            x += row[1 + j] * h;
        }
        trace.pre.push(x);
        trace.sigma2.push(positive_elu(x, config.elu_alpha, config.elu_eps));
    }
}

/// Everything the backward pass needs from one forecast step.
#[derive(Debug, Clone, Default)]
pub(crate) struct StepTrace {
    pub r_in: f64,
    pub mix_hidden: Vec<f64>,
    pub eta: Vec<f64>,
    pub mean_hidden: Vec<f64>,
    pub mu: Vec<f64>,
    pub e2_in: f64,
    pub sigma2_in: Vec<f64>,
    pub var: VarianceTrace,
}

fn check_inputs(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    init: &RecurrentState,
) -> Result<()> {
    config.validate()?;
    if !params.matches(config) {
        return Err(Error::arg(format!(
            "parameters are for N={}, K={} but the config has N={}, K={}",
            params.n_components, params.k_hidden, config.n_components, config.k_hidden
        )));
    }
    if series.is_empty() {
        return Err(Error::arg("cannot unroll over an empty series"));
    }
    init.validate(config.n_components)
}

pub(crate) fn forward_traced(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    init: &RecurrentState,
) -> Result<(Vec<StepTrace>, RecurrentState)> {
    check_inputs(series, params, config, init)?;
    let mut traces = Vec::with_capacity(series.len());
    let mut r_prev = init.r_prev;
    let mut e2_prev = init.e2_prev;
    let mut s2_prev = init.sigma2_prev.clone();
    let mut logits = Vec::new();
    for &r in series {
        let mut tr = StepTrace {
            r_in: r_prev,
            e2_in: e2_prev,
            sigma2_in: s2_prev.clone(),
            ..StepTrace::default()
        };
        feedforward_hidden(&params.mixing, r_prev, &mut tr.mix_hidden);
        output_from_hidden(&params.mixing, &tr.mix_hidden, &mut logits);
        tr.eta = softmax(&logits);
        feedforward_hidden(&params.mean, r_prev, &mut tr.mean_hidden);
        output_from_hidden(&params.mean, &tr.mean_hidden, &mut tr.mu);
        variance_traced(e2_prev, &s2_prev, params, config, &mut tr.var);

        let mu_bar: f64 = tr.eta.iter().zip(&tr.mu).map(|(e, m)| e * m).sum();
        e2_prev = (r - mu_bar) * (r - mu_bar);
        r_prev = r;
        s2_prev.clone_from(&tr.var.sigma2);
        traces.push(tr);
    }
    let final_state = RecurrentState {
        r_prev,
        e2_prev,
        sigma2_prev: s2_prev,
    };
    Ok((traces, final_state))
}

/// Run the model over `series`. Step `t` is the forecast distribution of
/// `series[t]` given everything before it. NaNs do not stop the unroll; they
/// show up as invalid steps.
pub fn unroll(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    init: &RecurrentState,
) -> Result<(Vec<MixtureStep>, RecurrentState)> {
    let (traces, final_state) = forward_traced(series, params, config, init)?;
    let steps = traces
        .into_iter()
        .map(|t| MixtureStep {
            eta: t.eta,
            mu: t.mu,
            sigma2: t.var.sigma2,
        })
        .collect();
    Ok((steps, final_state))
}

/// Negative log-likelihood of `series` under the model.
pub fn model_nll(
    series: &[f64],
    params: &RmdnParams,
    config: &RmdnConfig,
    init: &RecurrentState,
) -> Result<f64> {
    let (steps, _) = unroll(series, params, config, init)?;
    mixture::nll(series, &steps)
}
