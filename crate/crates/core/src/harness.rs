//! Multi-seed benchmarks, model files, and report rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::FreezeMask;
use crate::data::{sample_seeds, ReturnSeries};
use crate::error::{Error, Result};
use crate::garch::{self, GarchFit, GarchParams};
use crate::optim::{self, classify_convergence, ConvergenceStatus, TrainSchedule};
use crate::rmdn::{init_params, InitScheme, RecurrentState, RmdnConfig, RmdnParams, Subnetwork};

/// Inclusive range the per-run seeds are drawn from.
pub const SEED_RANGE: (u64, u64) = (0, 50_000);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Pretrained,
    Plain,
    Garch,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pretrained, Method::Plain, Method::Garch];

    pub fn label(self) -> &'static str {
        match self {
            Method::Pretrained => "pretrained",
            Method::Plain => "plain",
            Method::Garch => "garch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::arg(format!("unknown method `{s}`")))
    }

    fn tag(self) -> u8 {
        self as u8 + 1
    }
}

/// Outcome of one training run. GARCH records carry no seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: Option<u64>,
    pub method: Method,
    pub final_loglik: f64,
    pub status: ConvergenceStatus,
    pub epochs_completed: usize,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesResult {
    pub name: String,
    /// Sorted by (method, seed).
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSettings {
    pub config: RmdnConfig,
    pub schedule: TrainSchedule,
    pub meta_seed: u64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub not_converged: usize,
    pub converged: usize,
    /// Mean final log-likelihood over converged runs.
    pub avg_loglik: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub settings: BenchmarkSettings,
    pub series: Vec<SeriesResult>,
}

impl BenchmarkReport {
    pub fn summary(&self, series: &str, method: Method) -> Option<MethodSummary> {
        self.series
            .iter()
            .find(|s| s.name == series)
            .map(|s| summarize(&s.records, method))
    }

    /// Counts summed over every series.
    pub fn totals(&self, method: Method) -> (usize, usize) {
        self.series.iter().fold((0, 0), |(nc, c), s| {
            let m = summarize(&s.records, method);
            (nc + m.not_converged, c + m.converged)
        })
    }
}

fn summarize(records: &[RunRecord], method: Method) -> MethodSummary {
    let mut out = MethodSummary {
        method,
        not_converged: 0,
        converged: 0,
        avg_loglik: None,
    };
    let mut sum = 0.0;
    for r in records.iter().filter(|r| r.method == method) {
        match r.status {
            ConvergenceStatus::Converged => {
                out.converged += 1;
                sum += r.final_loglik;
            }
            ConvergenceStatus::NotConverged => out.not_converged += 1,
        }
    }
    if out.converged > 0 {
        out.avg_loglik = Some(sum / out.converged as f64);
    }
    out
}

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for b in bytes {
        *hash ^= u64::from(*b);
        *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

/// Seed for the random stream of one run, derived from everything that
/// identifies it. Stable across platforms and releases.
pub fn run_stream_seed(meta_seed: u64, series: &str, seed: u64, method: Method) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325;
    fnv1a(&mut h, &meta_seed.to_le_bytes());
    fnv1a(&mut h, series.as_bytes());
    fnv1a(&mut h, &[0xff]);
    fnv1a(&mut h, &seed.to_le_bytes());
    fnv1a(&mut h, &[method.tag()]);
    // splitmix64 finalizer
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Schedule of each network arm. The plain arm skips the masked phase.
pub fn arm_schedule(method: Method, schedule: &TrainSchedule) -> TrainSchedule {
    match method {
        Method::Plain => TrainSchedule {
            pretrain_epochs: 0,
            ..*schedule
        },
        _ => *schedule,
    }
}

/// One network run of the benchmark protocol. Failures become
/// `NotConverged` records.
pub fn run_network_arm(
    series: &ReturnSeries,
    method: Method,
    seed: u64,
    meta_seed: u64,
    config: &RmdnConfig,
    schedule: &TrainSchedule,
) -> RunRecord {
    let started = Instant::now();
    let scheme = match method {
        Method::Pretrained => InitScheme::Pretrain,
        _ => InitScheme::Plain,
    };
    let schedule = arm_schedule(method, schedule);
    let stream = run_stream_seed(meta_seed, series.name(), seed, method);
    let outcome = init_params(config, stream, scheme).and_then(|p| {
        let mask = FreezeMask::nonlinear(&p);
        optim::train(series.values(), &p, config, &schedule, &mask)
    });
    let (ll, epochs) = match outcome {
        Ok(rep) => (rep.final_loglik, rep.epochs_completed),
        Err(_) => (f64::NAN, 0),
    };
    RunRecord {
        seed: Some(seed),
        method,
        final_loglik: ll,
        status: classify_convergence(ll),
        epochs_completed: epochs,
        wall_time: started.elapsed(),
    }
}

fn run_garch_arm(series: &ReturnSeries) -> RunRecord {
    let started = Instant::now();
    let (ll, epochs) = match garch::fit_garch(series.values()) {
        Ok(fit) => (fit.loglik, garch::FIT_STEPS),
        Err(_) => (f64::NAN, 0),
    };
    RunRecord {
        seed: None,
        method: Method::Garch,
        final_loglik: ll,
        status: classify_convergence(ll),
        epochs_completed: epochs,
        wall_time: started.elapsed(),
    }
}

/// Run both network arms for `n_seeds` seeds and one GARCH fit on every
/// series, on a pool of `workers` threads.
///
/// Seeds are drawn without replacement from [`SEED_RANGE`] using
/// `meta_seed`; the same seeds are used for every series. The report does not
/// depend on `workers`.
pub fn run_benchmark(
    series: &[ReturnSeries],
    n_seeds: usize,
    config: &RmdnConfig,
    schedule: &TrainSchedule,
    meta_seed: u64,
    workers: usize,
) -> Result<BenchmarkReport> {
    if series.is_empty() {
        return Err(Error::arg("benchmark needs at least one series"));
    }
    if workers == 0 {
        return Err(Error::arg("worker count must be at least 1"));
    }
    for (i, s) in series.iter().enumerate() {
        if series[..i].iter().any(|o| o.name() == s.name()) {
            return Err(Error::arg(format!("duplicate series name `{}`", s.name())));
        }
    }
    config.validate()?;
    schedule.validate()?;
    let mut seeds = sample_seeds(n_seeds, SEED_RANGE.0, SEED_RANGE.1, meta_seed)?;
    seeds.sort_unstable();

    let mut tasks = Vec::new();
    for (si, _) in series.iter().enumerate() {
        for method in [Method::Pretrained, Method::Plain] {
            for &seed in &seeds {
                tasks.push((si, method, Some(seed)));
            }
        }
        tasks.push((si, Method::Garch, None));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::arg(format!("cannot start worker pool: {e}")))?;
    let records: Vec<(usize, RunRecord)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(si, method, seed)| {
                let rec = match seed {
                    Some(seed) => {
                        run_network_arm(&series[si], method, seed, meta_seed, config, schedule)
                    }
                    None => run_garch_arm(&series[si]),
                };
                (si, rec)
            })
            .collect()
    });

    let mut out: Vec<SeriesResult> = series
        .iter()
        .map(|s| SeriesResult {
            name: s.name().to_string(),
            records: Vec::new(),
        })
        .collect();
    for (si, rec) in records {
        out[si].records.push(rec);
    }
    for s in &mut out {
        s.records.sort_by_key(|r| (r.method, r.seed));
    }
    Ok(BenchmarkReport {
        settings: BenchmarkSettings {
            config: *config,
            schedule: *schedule,
            meta_seed,
            seeds,
        },
        series: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

pub const CSV_HEADER: [&str; 5] = ["series", "method", "not_converged", "converged", "avg_loglik"];

/// Render a report. Wall times are left out so the output is reproducible.
pub fn render_report(report: &BenchmarkReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(report),
        ReportFormat::Csv => render_csv(report),
    }
}

fn fmt_avg(avg: Option<f64>) -> String {
    match avg {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    }
}

fn percent(part: usize, whole: usize) -> String {
    if whole == 0 {
        "n/a".to_string()
    } else {
        format!("{:.0}%", 100.0 * part as f64 / whole as f64)
    }
}

fn render_text(report: &BenchmarkReport) -> String {
    let st = &report.settings;
    let seeds: Vec<String> = st.seeds.iter().map(|s| s.to_string()).collect();
    let width = report
        .series
        .iter()
        .map(|s| s.name.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "N={} K={} alpha={} eps={:e} lr={} pretrain_epochs={} epochs={} meta_seed={}",
        st.config.n_components,
        st.config.k_hidden,
        st.config.elu_alpha,
        st.config.elu_eps,
        st.schedule.learning_rate,
        st.schedule.pretrain_epochs,
        st.schedule.train_epochs,
        st.meta_seed
    );
    let _ = writeln!(out, "seeds: {}", seeds.join(" "));
    let _ = writeln!(out);

    let _ = writeln!(out, "In-sample convergence");
    let _ = writeln!(
        out,
        "{:w$}  {:^28}  {:^28}",
        "",
        "Without pretraining",
        "With pretraining",
        w = width
    );
    let _ = writeln!(
        out,
        "{:w$}  {:>14}{:>14}  {:>14}{:>14}",
        "Series",
        "Not Converged",
        "Converged",
        "Not Converged",
        "Converged",
        w = width
    );
    for s in &report.series {
        let plain = summarize(&s.records, Method::Plain);
        let pre = summarize(&s.records, Method::Pretrained);
        let _ = writeln!(
            out,
            "{:w$}  {:>14}{:>14}  {:>14}{:>14}",
            s.name,
            plain.not_converged,
            plain.converged,
            pre.not_converged,
            pre.converged,
            w = width
        );
    }
    let (pnc, pc) = report.totals(Method::Plain);
    let (nc, c) = report.totals(Method::Pretrained);
    let _ = writeln!(
        out,
        "{:w$}  {:>14}{:>14}  {:>14}{:>14}",
        "Total",
        pnc,
        pc,
        nc,
        c,
        w = width
    );
    let _ = writeln!(
        out,
        "{:w$}  {:>14}{:>14}  {:>14}{:>14}",
        "Total%",
        percent(pnc, pnc + pc),
        percent(pc, pnc + pc),
        percent(nc, nc + c),
        percent(c, nc + c),
        w = width
    );
    let _ = writeln!(out);

    let _ = writeln!(out, "Average log-likelihood");
    let _ = writeln!(
        out,
        "{:w$}  {:>14}  {:>18}  {:>20}",
        "Series",
        "GARCH",
        "With pretraining",
        "Without pretraining",
        w = width
    );
    for s in &report.series {
        let _ = writeln!(
            out,
            "{:w$}  {:>14}  {:>18}  {:>20}",
            s.name,
            fmt_avg(summarize(&s.records, Method::Garch).avg_loglik),
            fmt_avg(summarize(&s.records, Method::Pretrained).avg_loglik),
            fmt_avg(summarize(&s.records, Method::Plain).avg_loglik),
            w = width
        );
    }
    let _ = writeln!(
        out,
        "Averages are over converged runs only; n/a means no run converged."
    );
    out
}

fn render_csv(report: &BenchmarkReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    // writes into memory cannot fail
    let _ = w.write_record(CSV_HEADER);
    for s in &report.series {
        for method in Method::ALL {
            let m = summarize(&s.records, method);
            let avg = m.avg_loglik.map_or("n/a".to_string(), |v| v.to_string());
            let _ = w.write_record([
                s.name.as_str(),
                method.label(),
                &m.not_converged.to_string(),
                &m.converged.to_string(),
                &avg,
            ]);
        }
    }
    let bytes = w.into_inner().unwrap_or_default();
    String::from_utf8(bytes).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSummaryRow {
    pub series: String,
    pub summary: MethodSummary,
}

/// Read back the CSV produced by [`render_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<CsvSummaryRow>> {
    let bad = |row: usize, message: String| Error::Parse {
        path: "<report>".into(),
        row,
        message,
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| bad(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if header != CSV_HEADER {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        if rec.len() != CSV_HEADER.len() {
            return Err(bad(row, format!("expected 5 fields, found {}", rec.len())));
        }
        let count = |j: usize| {
            rec[j]
                .parse::<usize>()
                .map_err(|e| bad(row, format!("{}: {e}", CSV_HEADER[j])))
        };
        let avg = match &rec[4] {
            "n/a" => None,
            v => Some(
                v.parse::<f64>()
                    .map_err(|e| bad(row, format!("avg_loglik: {e}")))?,
            ),
        };
        rows.push(CsvSummaryRow {
            series: rec[0].to_string(),
            summary: MethodSummary {
                method: Method::parse(&rec[1]).map_err(|e| bad(row, e.to_string()))?,
                not_converged: count(2)?,
                converged: count(3)?,
                avg_loglik: avg,
            },
        });
    }
    Ok(rows)
}

pub const MODEL_FORMAT: &str = "elu-rmdn-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    n_components: usize,
    k_hidden: usize,
    elu_alpha: f64,
    elu_eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubnetFile {
    hidden_bias: Vec<f64>,
    hidden_weight: Vec<f64>,
    output: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    mixing: SubnetFile,
    mean: SubnetFile,
    variance: SubnetFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    r_prev: f64,
    e2_prev: f64,
    sigma2_prev: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RmdnFile {
    format: String,
    version: u32,
    kind: String,
    config: ConfigFile,
    params: ParamsFile,
    state: StateFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GarchParamsFile {
    a0: f64,
    a1: f64,
    alpha0: f64,
    alpha1: f64,
    beta1: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GarchFile {
    format: String,
    version: u32,
    kind: String,
    params: GarchParamsFile,
    init_var: f64,
    loglik: f64,
}

fn subnet_file(s: &Subnetwork) -> SubnetFile {
    SubnetFile {
        hidden_bias: s.hidden_bias.clone(),
        hidden_weight: s.hidden_weight.clone(),
        output: s.output_rows(),
    }
}

fn model_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Model(format!("{}: {message}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| model_err(path, e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_checked(path: &Path, kind: &str) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let header: Header = serde_json::from_str(&text).map_err(|e| model_err(path, e))?;
    if header.format != MODEL_FORMAT {
        return Err(model_err(path, format!("not a model file (format `{}`)", header.format)));
    }
    if header.version != MODEL_VERSION {
        return Err(model_err(
            path,
            format!(
                "unsupported version {} (expected {MODEL_VERSION})",
                header.version
            ),
        ));
    }
    if header.kind != kind {
        return Err(model_err(
            path,
            format!("holds a `{}` model, expected `{kind}`", header.kind),
        ));
    }
    Ok(text)
}

/// Write a network, its config and its pre-sample state as JSON. Floats are
/// written in shortest round-trip form, so loading is bit-exact.
pub fn save_model(
    params: &RmdnParams,
    config: &RmdnConfig,
    state: &RecurrentState,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if !params.matches(config) {
        return Err(Error::arg("parameters do not match the config"));
    }
    state.validate(config.n_components)?;
    if !params.all_finite() {
        return Err(model_err(path, "refusing to save non-finite parameters"));
    }
    let file = RmdnFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        kind: "rmdn".to_string(),
        config: ConfigFile {
            n_components: config.n_components,
            k_hidden: config.k_hidden,
            elu_alpha: config.elu_alpha,
            elu_eps: config.elu_eps,
        },
        params: ParamsFile {
            mixing: subnet_file(&params.mixing),
            mean: subnet_file(&params.mean),
            variance: subnet_file(&params.variance),
        },
        state: StateFile {
            r_prev: state.r_prev,
            e2_prev: state.e2_prev,
            sigma2_prev: state.sigma2_prev.clone(),
        },
    };
    write_json(&file, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub config: RmdnConfig,
    pub params: RmdnParams,
    pub state: RecurrentState,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let text = read_checked(path, "rmdn")?;
    let file: RmdnFile = serde_json::from_str(&text).map_err(|e| model_err(path, e))?;
    let config = RmdnConfig {
        n_components: file.config.n_components,
        k_hidden: file.config.k_hidden,
        elu_alpha: file.config.elu_alpha,
        elu_eps: file.config.elu_eps,
    };
    config.validate().map_err(|e| model_err(path, e))?;
    let subnet = |s: SubnetFile| Subnetwork::from_parts(s.hidden_bias, s.hidden_weight, s.output);
    let params = (|| {
        RmdnParams::from_subnetworks(
            &config,
            subnet(file.params.mixing)?,
            subnet(file.params.mean)?,
            subnet(file.params.variance)?,
        )
    })()
    .map_err(|e| model_err(path, format!("shape mismatch: {e}")))?;
    if !params.pins_hold() {
        return Err(model_err(path, "linear-node input weights must be 1 with bias 0"));
    }
    let state = RecurrentState {
        r_prev: file.state.r_prev,
        e2_prev: file.state.e2_prev,
        sigma2_prev: file.state.sigma2_prev,
    };
    state
        .validate(config.n_components)
        .map_err(|e| model_err(path, format!("shape mismatch: {e}")))?;
    Ok(SavedModel {
        config,
        params,
        state,
    })
}

/// [`load_model`], rejecting files whose shape differs from `expected`.
pub fn load_model_for(path: impl AsRef<Path>, expected: &RmdnConfig) -> Result<SavedModel> {
    let path = path.as_ref();
    let model = load_model(path)?;
    if model.config.n_components != expected.n_components
        || model.config.k_hidden != expected.k_hidden
    {
        return Err(model_err(
            path,
            format!(
                "shape mismatch: file has N={} K={}, expected N={} K={}",
                model.config.n_components,
                model.config.k_hidden,
                expected.n_components,
                expected.k_hidden
            ),
        ));
    }
    Ok(model)
}

pub fn save_garch_model(fit: &GarchFit, path: impl AsRef<Path>) -> Result<()> {
    let p = &fit.params;
    let file = GarchFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        kind: "garch".to_string(),
        params: GarchParamsFile {
            a0: p.a0,
            a1: p.a1,
            alpha0: p.alpha0,
            alpha1: p.alpha1,
            beta1: p.beta1,
        },
        init_var: fit.init_var,
        loglik: fit.loglik,
    };
    write_json(&file, path.as_ref())
}

pub fn load_garch_model(path: impl AsRef<Path>) -> Result<GarchFit> {
    let path = path.as_ref();
    let text = read_checked(path, "garch")?;
    let file: GarchFile = serde_json::from_str(&text).map_err(|e| model_err(path, e))?;
    let p = file.params;
    let params = GarchParams::new(p.a0, p.a1, p.alpha0, p.alpha1, p.beta1)
        .map_err(|e| model_err(path, e))?;
    Ok(GarchFit {
        params,
        loglik: file.loglik,
        init_var: file.init_var,
    })
}
