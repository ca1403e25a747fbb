use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gor::cost::{bench_csv, run_bench, BenchConfig, KernelShape, Series};
use gor::gradcheck::{run_suite, GradcheckOptions};
use gor::grouping::PartitionMode;
use gor::nn::targets_from_params;
use gor::regularizer::{RegConfig, RegPlan, Scope};
use gor::trainer::{ortho_report, train, RunReport, TrainConfig};
use gor::{model_io, Error};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "gor", version, about = "Group orthogonalization regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a catalog model on synthetic data, one run per seed.
    Train(TrainArgs),
    /// Time the grouped penalty against its MAC cost model.
    Bench(BenchArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Per-group deviations and Gram spectra of a saved model.
    OrthoReport(OrthoArgs),
}

#[derive(Args, Clone, Default)]
struct RegArgs {
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    /// Requested regularization group count N.
    #[arg(long = "n-groups")]
    n_groups: Option<usize>,
    /// inter or intra.
    #[arg(long)]
    mode: Option<PartitionMode>,
    /// all-conv, adapter-up-only, all, or comma-separated layer names.
    #[arg(long)]
    scope: Option<String>,
}

impl RegArgs {
    fn apply(&self, reg: &mut RegConfig) {
        if let Some(v) = self.lambda {
            reg.lambda = v;
        }
        if let Some(v) = self.n_groups {
            reg.requested_n = v;
        }
        if let Some(v) = self.mode {
            reg.mode = v;
        }
        if let Some(v) = &self.scope {
            reg.scope = Scope::parse(v);
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    reg: RegArgs,
    /// Comma-separated seeds, one run each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long = "task-weight")]
    task_weight: Option<f64>,
    #[arg(long = "n-classes")]
    n_classes: Option<usize>,
    #[arg(long = "samples-per-class")]
    samples_per_class: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kernel shape C_out x c x h x w, e.g. 256x256x3x3.
    #[arg(long)]
    shape: Option<KernelShape>,
    /// Comma-separated group counts.
    #[arg(long = "n", value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the parallel-over-groups series.
    #[arg(long)]
    sequential_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Finite-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Relative error threshold.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt the analytic gradient of checks with this name prefix.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OrthoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter file written by `gor train`.
    #[arg(long = "model-file")]
    model_file: PathBuf,
    #[command(flatten)]
    reg: RegArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckSection {
    eps: Option<f64>,
    tol: Option<f64>,
    seed: Option<u64>,
}

/// JSON config file; each command reads its own section.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    bench: Option<BenchConfig>,
    #[serde(default)]
    gradcheck: Option<GradcheckSection>,
    #[serde(default)]
    ortho_report: Option<RegConfig>,
}

enum Failure {
    Usage(String),
    Verify(String),
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, serde_json::Value), Failure> {
    let Some(path) = path else {
        return Ok((ExperimentConfig::default(), serde_json::Value::Null));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    let cfg = serde_json::from_value(raw.clone())
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    Ok((cfg, raw))
}

fn out_dir(out: Option<&Path>) -> Result<PathBuf, Failure> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()),
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct TrainSummary {
    config: TrainConfig,
    seeds: Vec<u64>,
    acc_mean: f64,
    acc_std: f64,
    mean_dev_mean: f64,
    mean_dev_std: f64,
    penalty_mean: f64,
    penalty_std: f64,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let (file, raw) = load_config(args.config.as_deref())?;
    let has_model = args.model.is_some() || raw.pointer("/train/model").is_some();
    if !has_model {
        return Err(Failure::Usage(
            "missing model name: pass --model or set train.model in --config".into(),
        ));
    }
    let mut cfg = file.train.unwrap_or_default();
    if let Some(v) = args.model {
        cfg.model = v;
    }
    args.reg.apply(&mut cfg.reg);
    macro_rules! set {
        ($($field:ident).+ = $arg:expr) => {
            if let Some(v) = $arg {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(epochs = args.epochs);
    set!(batch_size = args.batch_size);
    set!(lr = args.lr);
    set!(momentum = args.momentum);
    set!(task_weight = args.task_weight);
    set!(data.n_classes = args.n_classes);
    set!(data.samples_per_class = args.samples_per_class);
    set!(data.sigma = args.sigma);
    let seeds = args.seeds.or(file.seeds).unwrap_or_else(|| vec![cfg.seed]);
    if seeds.is_empty() {
        return Err(Failure::Usage("empty seed list".into()));
    }
    cfg.validate()?;
    if !gor::nn::CATALOG.contains(&cfg.model.as_str()) {
        return Err(Failure::Usage(format!(
            "unknown model {:?} (catalog: {})",
            cfg.model,
            gor::nn::CATALOG.join(", ")
        )));
    }

    let dir = out_dir(args.out.as_deref())?;
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .map(|&s| TrainConfig { seed: s, ..cfg.clone() })
        .collect();
    let runs = run_seeds(&configs);

    let mut reports: Vec<RunReport> = Vec::new();
    for (c, run) in configs.iter().zip(runs) {
        let (report, model) = run?;
        let seed_dir = dir.join(format!("seed-{}", c.seed));
        std::fs::create_dir_all(&seed_dir)
            .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", seed_dir.display())))?;
        write(&seed_dir.join("report.json"), &to_json(&report))?;
        write(&seed_dir.join("metrics.csv"), &report.to_csv())?;
        model_io::save(&seed_dir.join("model.gork"), &model.params)?;
        let last = report.final_epoch();
        println!(
            "seed {:>3}: acc {:.4}  mean_dev {:.6e}  penalty {:.6e}  ({:.1}s)",
            c.seed, last.acc, last.mean_dev, report.final_penalty.total, report.timing.wall_clock_seconds
        );
        reports.push(report);
    }

    let accs: Vec<f64> = reports.iter().map(|r| r.final_epoch().acc).collect();
    let devs: Vec<f64> = reports.iter().map(|r| r.final_epoch().mean_dev).collect();
    let pens: Vec<f64> = reports.iter().map(|r| r.final_penalty.total).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    let (mean_dev_mean, mean_dev_std) = mean_std(&devs);
    let (penalty_mean, penalty_std) = mean_std(&pens);
    println!(
        "summary over {} seed(s): acc {:.4} ± {:.4}  mean_dev {:.6e} ± {:.3e}",
        seeds.len(),
        acc_mean,
        acc_std,
        mean_dev_mean,
        mean_dev_std
    );
    let summary = TrainSummary {
        config: cfg,
        seeds,
        acc_mean,
        acc_std,
        mean_dev_mean,
        mean_dev_std,
        penalty_mean,
        penalty_std,
    };
    write(&dir.join("summary.json"), &to_json(&summary))?;
    println!("wrote {}", dir.display());
    Ok(())
}

type RunResult = Result<(RunReport, gor::nn::Model), Error>;

fn run_seeds(configs: &[TrainConfig]) -> Vec<RunResult> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        configs.par_iter().map(train).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        configs.iter().map(train).collect()
    }
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    config: &'a BenchConfig,
    results: &'a [gor::cost::BenchResult],
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    let (file, _) = load_config(args.config.as_deref())?;
    let mut cfg = file.bench.unwrap_or_default();
    if let Some(v) = args.shape {
        cfg.shape = v;
    }
    if let Some(v) = args.ns {
        cfg.ns = v;
    }
    if let Some(v) = args.reps {
        cfg.reps = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.sequential_only {
        cfg.parallel_series = false;
    }
    cfg.validate()?;
    let dir = out_dir(args.out.as_deref())?;
    let results = run_bench(&cfg)?;
    println!("kernel {} (C_in = {})", cfg.shape, cfg.shape.c_in());
    println!("{:>10} {:>5} {:>14} {:>14} {:>12}", "series", "N", "MACs", "median ns", "bytes");
    for r in &results {
        println!(
            "{:>10} {:>5} {:>14} {:>14} {:>12}",
            format!("{:?}", r.series).to_lowercase(),
            r.n,
            r.macs,
            r.ns_median,
            r.bytes
        );
    }
    write(&dir.join("bench.csv"), &bench_csv(&results, Series::Sequential))?;
    if results.iter().any(|r| r.series == Series::Parallel) {
        write(&dir.join("bench_parallel.csv"), &bench_csv(&results, Series::Parallel))?;
    }
    write(
        &dir.join("bench.json"),
        &to_json(&BenchOutput {
            config: &cfg,
            results: &results,
        }),
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let (file, _) = load_config(args.config.as_deref())?;
    let section = file.gradcheck.unwrap_or_default();
    let defaults = GradcheckOptions::default();
    let opts = GradcheckOptions {
        eps: args.eps.or(section.eps).unwrap_or(defaults.eps),
        tol: args.tol.or(section.tol).unwrap_or(defaults.tol),
        seed: args.seed.or(section.seed).unwrap_or(defaults.seed),
        corrupt: args.corrupt,
    };
    if !(opts.eps > 0.0 && opts.tol > 0.0) {
        return Err(Failure::Usage("--eps and --tol must be positive".into()));
    }
    let summary = run_suite(&opts)?;
    for r in &summary.results {
        println!(
            "{} {:<36} rel_err {:.3e}",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.rel_err
        );
    }
    let worst = summary.worst();
    println!("worst: {} rel_err {:.3e} (tol {:.1e})", worst.name, worst.rel_err, opts.tol);
    if let Some(out) = args.out.as_deref() {
        let dir = out_dir(Some(out))?;
        write(&dir.join("gradcheck.json"), &to_json(&summary))?;
    }
    if summary.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = summary
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        Err(Failure::Verify(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_ortho_report(args: OrthoArgs) -> CmdResult {
    let (file, _) = load_config(args.config.as_deref())?;
    let mut reg = file.ortho_report.unwrap_or_default();
    args.reg.apply(&mut reg);
    let params = model_io::load(&args.model_file).map_err(|e| {
        Failure::Usage(format!("cannot load {}: {e}", args.model_file.display()))
    })?;
    let plan = RegPlan::from_targets(targets_from_params(&params)?, &reg)?;
    let report = ortho_report(&params, &plan)?;
    for w in &report.penalty.warnings {
        println!("warning: {w}");
    }
    for (layer, groups) in &report.groups {
        println!("{layer}: {} groups", groups.len());
        for (i, g) in groups.iter().enumerate() {
            println!(
                "  group {i:>3} size {:>3}  deviation {:.6e}  eig [{:.3e}, {:.3e}]",
                g.size, g.deviation, g.min_eigenvalue, g.max_eigenvalue
            );
        }
    }
    println!(
        "total {:.6e}  mean group deviation {:.6e}",
        report.penalty.total,
        report.mean_group_deviation()
    );
    let dir = out_dir(args.out.as_deref())?;
    #[derive(Serialize)]
    struct Out<'a> {
        config: &'a RegConfig,
        model_file: &'a Path,
        mean_group_deviation: f64,
        #[serde(flatten)]
        report: &'a gor::trainer::OrthoReport,
    }
    write(
        &dir.join("ortho_report.json"),
        &to_json(&Out {
            config: &reg,
            model_file: &args.model_file,
            mean_group_deviation: report.mean_group_deviation(),
            report: &report,
        }),
    )?;
    Ok(())
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("GOR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::OrthoReport(a) => cmd_ortho_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("usage: gor train|bench|gradcheck|ortho-report [--config FILE] [flags]");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DIVERGED)
        }
    }
}
