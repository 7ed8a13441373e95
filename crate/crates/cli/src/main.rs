use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use elu_rmdn::autodiff::{self, describe, finite_diff_compare, FreezeMask};
use elu_rmdn::data::{
    load_csv, simulate_mixture_process, write_csv, MixtureProcessSpec, Regime, ReturnSeries,
    Switching,
};
use elu_rmdn::garch::{fit_garch, simulate_garch, GarchParams};
use elu_rmdn::harness::{
    render_report, run_benchmark, save_garch_model, save_model, ReportFormat, SEED_RANGE,
};
use elu_rmdn::optim::{
    train, TrainSchedule, DEFAULT_LEARNING_RATE, DEFAULT_PRETRAIN_EPOCHS, DEFAULT_TRAIN_EPOCHS,
};
use elu_rmdn::rmdn::{init_params, InitScheme, RecurrentState, RmdnConfig};
use elu_rmdn::Error;

#[derive(Parser)]
#[command(name = "rmdn", version, about = "ELU-RMDN density forecasting: simulate, fit, check and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated return series as CSV.
    Simulate(SimulateArgs),
    /// Fit a GARCH(1,1) or an ELU-RMDN to one series and save the model.
    Fit(FitArgs),
    /// Train both network arms over many seeds and compare with GARCH.
    Benchmark(BenchmarkArgs),
    /// Compare the analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[command(subcommand)]
    process: Process,
}

#[derive(Subcommand)]
enum Process {
    /// AR(1)-GARCH(1,1) with Gaussian innovations.
    Garch {
        #[command(flatten)]
        params: GarchFlags,
        #[command(flatten)]
        common: SimFlags,
    },
    /// Two Gaussian regimes with Markov or independent switching.
    Mixture {
        #[command(flatten)]
        params: MixtureFlags,
        #[command(flatten)]
        common: SimFlags,
    },
}

#[derive(Args, Clone)]
struct SimFlags {
    /// Number of returns.
    #[arg(short = 'T', long = "len", default_value_t = 1000)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
struct GarchFlags {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    a0: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    a1: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha0: f64,
    #[arg(long, default_value_t = 0.10)]
    alpha1: f64,
    #[arg(long, default_value_t = 0.85)]
    beta1: f64,
}

impl GarchFlags {
    fn params(&self) -> elu_rmdn::Result<GarchParams> {
        GarchParams::new(self.a0, self.a1, self.alpha0, self.alpha1, self.beta1)
    }
}

#[derive(Args, Clone, Copy)]
struct MixtureFlags {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mean1: f64,
    #[arg(long, default_value_t = 0.25)]
    var1: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mean2: f64,
    #[arg(long, default_value_t = 4.0)]
    var2: f64,
    /// Per-step probability of leaving the current regime.
    #[arg(long, default_value_t = 0.05, conflicts_with = "first_prob")]
    switch_prob: f64,
    /// Draw regimes independently, the first with this probability.
    #[arg(long)]
    first_prob: Option<f64>,
}

impl MixtureFlags {
    fn spec(&self) -> MixtureProcessSpec {
        let switching = match self.first_prob {
            Some(first_prob) => Switching::Iid { first_prob },
            None => Switching::Markov {
                switch_prob: self.switch_prob,
            },
        };
        MixtureProcessSpec {
            regimes: [
                Regime {
                    mean: self.mean1,
                    variance: self.var1,
                },
                Regime {
                    mean: self.mean2,
                    variance: self.var2,
                },
            ],
            switching,
        }
    }
}

#[derive(Args, Clone, Copy)]
struct ModelFlags {
    /// Mixture components.
    #[arg(short = 'N', long = "components", default_value_t = 2)]
    n_components: usize,
    /// Hidden nodes per subnetwork input (node 0 is linear).
    #[arg(short = 'K', long = "hidden", default_value_t = 3)]
    k_hidden: usize,
    /// Saturation level of the positive ELU, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    elu_alpha: f64,
    /// Variance floor added by the positive ELU.
    #[arg(long, default_value_t = 1e-6)]
    elu_eps: f64,
}

impl ModelFlags {
    fn config(&self) -> RmdnConfig {
        RmdnConfig {
            n_components: self.n_components,
            k_hidden: self.k_hidden,
            elu_alpha: self.elu_alpha,
            elu_eps: self.elu_eps,
        }
    }
}

#[derive(Args, Clone, Copy)]
struct ScheduleFlags {
    /// Epochs with nonlinear nodes frozen.
    #[arg(long, default_value_t = DEFAULT_PRETRAIN_EPOCHS)]
    pretrain_epochs: usize,
    /// Epochs on all parameters after pretraining.
    #[arg(long, default_value_t = DEFAULT_TRAIN_EPOCHS)]
    epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
}

impl ScheduleFlags {
    fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            pretrain_epochs: self.pretrain_epochs,
            train_epochs: self.epochs,
            learning_rate: self.lr,
        }
    }
}

#[derive(Args, Clone)]
struct InputFlags {
    /// Column holding returns.
    #[arg(long, default_value = "return")]
    column: String,
    /// Optional column of row labels such as dates.
    #[arg(long)]
    label_column: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Garch,
    Rmdn,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Return series CSV.
    data: PathBuf,
    #[command(flatten)]
    input: InputFlags,
    #[command(flatten)]
    net: ModelFlags,
    #[command(flatten)]
    schedule: ScheduleFlags,
    /// Initialization seed. With zero pretrain epochs the plain
    /// initialization is used.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file [default: <data stem>.<model>.json beside the data].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimKind {
    Garch,
    Mixture,
}

#[derive(Args)]
#[command(after_help = "Per-run seeds are drawn at random between 0 and 50000 (range 0-50000). \
The pretrained arm runs 20 masked epochs then 300 full epochs by default; the plain arm runs \
only the 300 full epochs.")]
struct BenchmarkArgs {
    /// Return series CSV files.
    files: Vec<PathBuf>,
    #[command(flatten)]
    input: InputFlags,
    /// Benchmark simulated series instead of files.
    #[arg(long, value_enum, conflicts_with = "files")]
    simulate: Option<SimKind>,
    /// Number of simulated series.
    #[arg(long, default_value_t = 1)]
    sim_count: usize,
    /// Length of each simulated series.
    #[arg(long, default_value_t = 1000)]
    sim_len: usize,
    /// Seed of the first simulated series; later ones count up.
    #[arg(long, default_value_t = 0)]
    sim_seed: u64,
    /// Training runs per arm and series.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Seed of the draw that picks the per-run seeds.
    #[arg(long, default_value_t = 0)]
    meta_seed: u64,
    /// Worker threads [default: available cores].
    #[arg(long, env = "RMDN_WORKERS")]
    workers: Option<usize>,
    /// Directory receiving report.txt and report.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[command(flatten)]
    net: ModelFlags,
    #[command(flatten)]
    schedule: ScheduleFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Largest accepted relative deviation.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[command(flatten)]
    net: ModelFlags,
    /// Length of the simulated check series.
    #[arg(short = 'T', long = "len", default_value_t = 20)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb the analytic gradient before comparing.
    #[arg(long, hide = true)]
    corrupt: bool,
}

enum Failure {
    Usage(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let (series, common) = match args.process {
        Process::Garch { params, common } => {
            (simulate_garch(&params.params()?, common.len, common.seed)?, common)
        }
        Process::Mixture { params, common } => (
            simulate_mixture_process(&params.spec(), common.len, common.seed)?,
            common,
        ),
    };
    write_csv(&series, &common.out)?;
    println!("wrote {} returns to {}", series.len(), common.out.display());
    Ok(())
}

fn load(path: &Path, input: &InputFlags) -> elu_rmdn::Result<ReturnSeries> {
    load_csv(path, &input.column, input.label_column.as_deref())
}

fn default_model_path(data: &Path, kind: &str) -> PathBuf {
    let stem = data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    data.with_file_name(format!("{stem}.{kind}.json"))
}

fn cmd_fit(args: FitArgs) -> CmdResult {
    let series = load(&args.data, &args.input)?;
    match args.model {
        ModelKind::Garch => {
            let fit = fit_garch(series.values())?;
            let p = &fit.params;
            let out = args
                .out
                .unwrap_or_else(|| default_model_path(&args.data, "garch"));
            save_garch_model(&fit, &out)?;
            println!(
                "a0={} a1={} alpha0={} alpha1={} beta1={}",
                p.a0, p.a1, p.alpha0, p.alpha1, p.beta1
            );
            println!(
                "loglik={:.6} persistence={:.6} model={}",
                fit.loglik,
                p.persistence(),
                out.display()
            );
        }
        ModelKind::Rmdn => {
            let config = args.net.config();
            let schedule = args.schedule.schedule();
            let scheme = if schedule.pretrain_epochs > 0 {
                InitScheme::Pretrain
            } else {
                InitScheme::Plain
            };
            let init = init_params(&config, args.seed, scheme)?;
            let mask = FreezeMask::nonlinear(&init);
            let report = train(series.values(), &init, &config, &schedule, &mask)?;
            println!(
                "final_loglik={} status={} epochs={}/{}",
                report.final_loglik,
                report.status.label(),
                report.epochs_completed,
                schedule.total_epochs()
            );
            if report.final_params.all_finite() {
                let out = args
                    .out
                    .unwrap_or_else(|| default_model_path(&args.data, "rmdn"));
                save_model(&report.final_params, &config, &report.init_state, &out)?;
                println!("model={}", out.display());
            } else {
                println!("parameters are not finite; no model file written");
            }
        }
    }
    Ok(())
}

fn simulated_inputs(kind: SimKind, count: usize, len: usize, seed: u64) -> elu_rmdn::Result<Vec<ReturnSeries>> {
    (0..count as u64)
        .map(|i| match kind {
            SimKind::Garch => {
                let p = GarchParams::new(0.0, 0.0, 0.05, 0.10, 0.85)?;
                simulate_garch(&p, len, seed + i)
            }
            SimKind::Mixture => {
                let flags = MixtureFlags {
                    mean1: 0.0,
                    var1: 0.25,
                    mean2: 0.0,
                    var2: 4.0,
                    switch_prob: 0.05,
                    first_prob: None,
                };
                simulate_mixture_process(&flags.spec(), len, seed + i)
            }
        })
        .collect()
}

fn cmd_benchmark(args: BenchmarkArgs) -> CmdResult {
    let series = match args.simulate {
        Some(kind) => simulated_inputs(kind, args.sim_count, args.sim_len, args.sim_seed)?,
        None => {
            if args.files.is_empty() {
                return Err(Failure::Usage(
                    "benchmark needs at least one CSV file or --simulate".to_string(),
                ));
            }
            args.files
                .iter()
                .map(|f| load(f, &args.input))
                .collect::<elu_rmdn::Result<Vec<_>>>()?
        }
    };
    let workers = args.workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let report = run_benchmark(
        &series,
        args.seeds,
        &args.net.config(),
        &args.schedule.schedule(),
        args.meta_seed,
        workers,
    )?;
    let text = render_report(&report, ReportFormat::Text);
    let csv = render_report(&report, ReportFormat::Csv);
    fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    let txt_path = args.out_dir.join("report.txt");
    let csv_path = args.out_dir.join("report.csv");
    fs::write(&txt_path, &text).map_err(Error::from)?;
    fs::write(&csv_path, &csv).map_err(Error::from)?;
    print!("{text}");
    println!(
        "reports: {} {} (seeds from [{}, {}])",
        txt_path.display(),
        csv_path.display(),
        SEED_RANGE.0,
        SEED_RANGE.1
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    if !(args.tol > 0.0) {
        return Err(Failure::Usage("--tol must be positive".to_string()));
    }
    if args.len < 2 {
        return Err(Failure::Usage("-T must be at least 2".to_string()));
    }
    let config = args.net.config();
    let truth = GarchParams::new(0.0, 0.0, 0.05, 0.10, 0.85)?;
    let series = simulate_garch(&truth, args.len, args.seed)?;
    let params = init_params(&config, args.seed, InitScheme::Plain)?;
    let init = RecurrentState::from_series(series.values(), config.n_components);
    let mut analytic = autodiff::gradient(series.values(), &params, &config, &init)?.grads;
    if args.corrupt {
        let mid = analytic.len() / 2;
        analytic.0[mid] = analytic.0[mid] * 1.01 + 1e-3;
    }
    let report = finite_diff_compare(series.values(), &params, &config, &init, &analytic, args.tol)?;
    let layout = params.trainable_layout();
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.rel_dev.total_cmp(&b.rel_dev))
        .map(|e| describe(e.param))
        .unwrap_or_default();
    let summary = format!(
        "parameters={} max_rel_dev={:.3e} max_abs_dev={:.3e} worst={} tol={:e}",
        layout.len(),
        report.max_rel_dev,
        report.max_abs_dev,
        worst,
        args.tol
    );
    if report.passed {
        println!("PASS {summary}");
        Ok(())
    } else {
        for e in report.failures().take(10) {
            println!(
                "  {} analytic={:e} numeric={:e} rel_dev={:.3e}",
                describe(e.param),
                e.analytic,
                e.numeric,
                e.rel_dev
            );
        }
        Err(Failure::Verification(format!("FAIL {summary}")))
    }
}
