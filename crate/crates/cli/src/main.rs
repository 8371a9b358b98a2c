//! `pmoe`: data generation, training, router audits, sweeps, flop reports and
//! plots from one binary. Every command first prints its effective config as
//! a JSON line on stdout.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pmoe_core::data::{build_mnist_collage, check_linear_separability, load_dataset, save_dataset, Placement, SyntheticConfig};
use pmoe_core::diagnostics::router_audit;
use pmoe_core::experiments::{
    cost_to_epsilon, emit_plot, flops_per_iteration, iterations_to_epsilon, plot_from_csv, run_sweep, FlopModel,
    FlopRecord, PlotKind, SweepSpec,
};
use pmoe_core::model::{load_params, save_params};
use pmoe_core::util::write_atomic;
use pmoe_core::{Mode, Rng, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pmoe_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use pmoe_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidArgument(_)) => 1,
            CliError::Core(E::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Parser)]
#[command(name = "pmoe", version, about = "Patch-level mixture of experts with CNN experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic train/test pair from the structured distribution.
    GenData(GenDataFlags),
    /// Build train/test collages from MNIST IDX files.
    MnistCollage(CollageFlags),
    /// Train a model and optionally save it, its log and its router audit.
    Train(TrainFlags),
    /// Audit a saved model's routers on a dataset.
    Audit(AuditFlags),
    /// Run or resume a sweep described by a JSON spec.
    Sweep(SweepFlags),
    /// Per-iteration flop counts and cost to a target error.
    Flops(FlopsFlags),
    /// Try to separate a dataset with linear classifiers.
    CheckSeparability(SeparabilityFlags),
    /// Render an SVG plot from a CSV file.
    Plot(PlotFlags),
}

// ------------------------------------------------------------- gen-data

#[derive(Args, Serialize)]
struct GenDataFlags {
    /// JSON file with any of this command's options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Number of classes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<usize>,
    /// Number of class-irrelevant pattern sets.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_d: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_r: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    l_star: Option<usize>,
    /// Training samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<usize>,
    /// Test samples, written next to `--out` as `<stem>-test.<ext>`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    d: usize,
    n: usize,
    c: usize,
    p: usize,
    delta_d: f64,
    delta_r: f64,
    l_star: usize,
    placement: Placement,
    train: usize,
    test: usize,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            d: 50,
            n: 16,
            c: 2,
            p: 5,
            delta_d: -0.5,
            delta_r: 0.2,
            l_star: 4,
            placement: Placement::Uniform,
            train: 2000,
            test: 1000,
            seed: 0,
            out: None,
        }
    }
}

/// `dir/name.ext` -> `dir/name-test.ext`.
fn test_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}-test.{}", ext.to_string_lossy()),
        None => format!("{stem}-test"),
    };
    out.with_file_name(name)
}

fn gen_data(flags: GenDataFlags) -> CliResult {
    let cfg: GenDataConfig = config::resolve(&flags, flags.config.as_deref())?;
    config::echo("gen-data", &cfg)?;
    let out = cfg.out.clone().ok_or_else(|| usage("--out is required"))?;
    let synth = SyntheticConfig {
        d: cfg.d,
        n: cfg.n,
        c: cfg.c,
        p: cfg.p,
        delta_d: cfg.delta_d,
        delta_r: cfg.delta_r,
        l_star: cfg.l_star,
        placement: cfg.placement.clone(),
    };
    let root = Rng::new(cfg.seed);
    let lib = synth.library(&root)?;
    let train = synth.dataset(&lib, cfg.train, &mut root.fork("train"))?;
    let test = synth.dataset(&lib, cfg.test, &mut root.fork("test"))?;
    let test_out = test_path(&out);
    save_dataset(&train, &out)?;
    save_dataset(&test, &test_out)?;
    eprintln!(
        "wrote {} ({} samples) and {} ({} samples); delta={:.4} delta'={:.4}",
        out.display(),
        train.len(),
        test_out.display(),
        test.len(),
        lib.delta,
        lib.delta_prime
    );
    Ok(())
}

// --------------------------------------------------------- mnist-collage

#[derive(Args, Serialize)]
struct CollageFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// IDX image file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CollageConfig {
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    n: usize,
    train: usize,
    test: usize,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for CollageConfig {
    fn default() -> Self {
        CollageConfig {
            images: None,
            labels: None,
            n: 16,
            train: 1000,
            test: 1000,
            seed: 0,
            out: None,
        }
    }
}

fn mnist_collage(flags: CollageFlags) -> CliResult {
    let cfg: CollageConfig = config::resolve(&flags, flags.config.as_deref())?;
    config::echo("mnist-collage", &cfg)?;
    let images = cfg.images.as_ref().ok_or_else(|| usage("--images is required"))?;
    let labels = cfg.labels.as_ref().ok_or_else(|| usage("--labels is required"))?;
    let out = cfg.out.as_ref().ok_or_else(|| usage("--out is required"))?;
    let mut rng = Rng::new(cfg.seed);
    let (train, test) = build_mnist_collage(images, labels, cfg.n, cfg.train, cfg.test, &mut rng)?;
    let test_out = test_path(out);
    save_dataset(&train, out)?;
    save_dataset(&test, &test_out)?;
    eprintln!("wrote {} and {}", out.display(), test_out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Training set.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Evaluation set for logging and the final audit.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<PathBuf>,
    /// separate, joint or cnn.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    experts: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    neurons_per_expert: Option<usize>,
    /// Patches each expert receives.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    l: Option<usize>,
    /// Joint mode: pin every gate to 1.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    unit_gates: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_r: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long, conflicts_with = "single_pass")]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    /// One pass of N/B steps instead of epochs.
    #[arg(long)]
    #[serde(skip)]
    single_pass: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    router_batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    router_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    router_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    hold_out_router: bool,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_d: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    log_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    stop_at_zero_error: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Where to save the trained parameters.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<PathBuf>,
    /// Final router audit CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    audit: Option<PathBuf>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainCliConfig {
    data: Option<PathBuf>,
    test: Option<PathBuf>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
    audit: Option<PathBuf>,
    #[serde(flatten)]
    train: TrainConfig,
}

fn train(flags: TrainFlags) -> CliResult {
    let mut cfg: TrainCliConfig = config::resolve(&flags, flags.config.as_deref())?;
    if flags.single_pass {
        cfg.train.epochs = None;
    }
    config::echo("train", &cfg)?;
    let data = cfg.data.as_ref().ok_or_else(|| usage("--data is required"))?;
    let train_set = load_dataset(data)?;
    let test_set = cfg.test.as_ref().map(load_dataset).transpose()?;
    let (params, report) = pmoe_core::training::train(&train_set, test_set.as_ref(), &cfg.train)?;
    if let Some(out) = &cfg.out {
        save_params(&params, out)?;
    }
    if let Some(path) = &cfg.report {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    if let Some(path) = &cfg.audit {
        let audit = report
            .final_audit
            .as_ref()
            .ok_or_else(|| usage("this model has no router to audit"))?;
        write_atomic(path, audit.to_csv().as_bytes())?;
    }
    let last = report.last();
    let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
    eprintln!(
        "{}: {} steps over {} epochs; loss {:.4}, train acc {:.4}, test acc {}, router rate {}",
        report.mode.as_str(),
        report.iterations,
        report.epochs_run,
        last.loss,
        last.train_acc,
        fmt(last.test_acc),
        fmt(last.router_rate)
    );
    Ok(())
}

// ---------------------------------------------------------------- audit

#[derive(Args, Serialize)]
struct AuditFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Saved parameters.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Audit CSV; printed to stdout when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AuditConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn audit(flags: AuditFlags) -> CliResult {
    let cfg: AuditConfig = config::resolve(&flags, flags.config.as_deref())?;
    config::echo("audit", &cfg)?;
    let model = cfg.model.as_ref().ok_or_else(|| usage("--model is required"))?;
    let data = cfg.data.as_ref().ok_or_else(|| usage("--data is required"))?;
    let params = load_params(model)?;
    let dataset = load_dataset(data)?;
    let audit = router_audit(&params, &dataset)?;
    match &cfg.out {
        Some(path) => write_atomic(path, audit.to_csv().as_bytes())?,
        None => print!("{}", audit.to_csv()),
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Args, Serialize)]
struct SweepFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Sweep spec (JSON).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// Concurrent cells; defaults to the number of logical cores.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    jobs: Option<usize>,
    /// Overrides the spec's root seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepCliConfig {
    spec: Option<PathBuf>,
    out_dir: PathBuf,
    jobs: Option<usize>,
    seed: Option<u64>,
}

impl Default for SweepCliConfig {
    fn default() -> Self {
        SweepCliConfig {
            spec: None,
            out_dir: PathBuf::from("results"),
            jobs: None,
            seed: None,
        }
    }
}

#[derive(Serialize)]
struct SweepEcho<'a> {
    #[serde(flatten)]
    cli: &'a SweepCliConfig,
    sweep: &'a SweepSpec,
}

fn sweep(flags: SweepFlags) -> CliResult {
    let mut cfg: SweepCliConfig = config::resolve(&flags, flags.config.as_deref())?;
    let spec_path = cfg.spec.clone().ok_or_else(|| usage("--spec is required"))?;
    let text = std::fs::read_to_string(&spec_path).map_err(|e| pmoe_core::Error::Io {
        path: spec_path.clone(),
        source: e,
    })?;
    let mut spec: SweepSpec = serde_json::from_str(&text).map_err(|e| pmoe_core::Error::Format {
        path: spec_path.clone(),
        reason: e.to_string(),
    })?;
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    let jobs = cfg
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cfg.jobs = Some(jobs);
    config::echo(
        "sweep",
        &SweepEcho {
            cli: &cfg,
            sweep: &spec,
        },
    )?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| pmoe_core::Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let out = run_sweep(&spec, &cfg.out_dir, jobs)?;
    eprintln!(
        "{}: {} cells ({} computed, {} resumed)",
        out.name,
        out.cells.len(),
        out.computed,
        out.cells.len() - out.computed
    );
    for f in &out.frontier {
        let row = f.row.map_or(String::new(), |r| format!(" row {r}"));
        let first = f.first_col.map_or("not reached".into(), |c| c.to_string());
        eprintln!("  {}{row}: first solved column {first}", f.model);
    }
    for a in &out.artifacts {
        eprintln!("  wrote {}", a.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- flops

#[derive(Args, Serialize)]
struct FlopsFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Batch size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<u64>,
    /// Total neurons.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    l: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<u64>,
    /// One mode; all three when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    /// Target error for the iteration and cost estimates.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct FlopsConfig {
    #[serde(flatten)]
    model: FlopModel,
    mode: Option<Mode>,
    epsilon: Option<f64>,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        FlopsConfig {
            model: FlopModel {
                b: 128,
                m: 40,
                n: 16,
                l: 2,
                k: 2,
                d: 784,
            },
            mode: None,
            epsilon: None,
        }
    }
}

#[derive(Serialize)]
struct FlopsRow {
    mode: Mode,
    per_iteration: FlopRecord,
    expert: u64,
    total: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations_to_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost_to_epsilon: Option<f64>,
}

fn flops(flags: FlopsFlags) -> CliResult {
    let cfg: FlopsConfig = config::resolve(&flags, flags.config.as_deref())?;
    config::echo("flops", &cfg)?;
    let modes = match cfg.mode {
        Some(m) => vec![m],
        None => vec![Mode::Cnn, Mode::Separate, Mode::Joint],
    };
    for mode in modes {
        let per_iteration = flops_per_iteration(&cfg.model, mode)?;
        let row = FlopsRow {
            mode,
            per_iteration,
            expert: per_iteration.expert(),
            total: per_iteration.total(),
            iterations_to_epsilon: cfg
                .epsilon
                .map(|e| iterations_to_epsilon(&cfg.model, mode, e))
                .transpose()?,
            cost_to_epsilon: cfg.epsilon.map(|e| cost_to_epsilon(&cfg.model, mode, e)).transpose()?,
        };
        println!("{}", serde_json::to_string(&row).map_err(pmoe_core::Error::from)?);
    }
    Ok(())
}

// --------------------------------------------------- check-separability

#[derive(Args, Serialize)]
struct SeparabilityFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SeparabilityConfig {
    data: Option<PathBuf>,
    epochs: usize,
}

impl Default for SeparabilityConfig {
    fn default() -> Self {
        SeparabilityConfig { data: None, epochs: 200 }
    }
}

fn check_separability(flags: SeparabilityFlags) -> CliResult {
    let cfg: SeparabilityConfig = config::resolve(&flags, flags.config.as_deref())?;
    config::echo("check-separability", &cfg)?;
    let data = cfg.data.as_ref().ok_or_else(|| usage("--data is required"))?;
    let report = check_linear_separability(&load_dataset(data)?, cfg.epochs)?;
    println!("{}", serde_json::to_string(&report).map_err(pmoe_core::Error::from)?);
    Ok(())
}

// ----------------------------------------------------------------- plot

#[derive(Args, Serialize)]
struct PlotFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    csv: Option<PathBuf>,
    /// line or heatmap.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    x: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<String>,
    /// Series column (line) or row column (heatmap).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlotConfig {
    csv: Option<PathBuf>,
    kind: PlotKind,
    x: Option<String>,
    y: Option<String>,
    group: Option<String>,
    title: String,
    out: Option<PathBuf>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            csv: None,
            kind: PlotKind::Line,
            x: None,
            y: None,
            group: None,
            title: String::new(),
            out: None,
        }
    }
}

fn plot(flags: PlotFlags) -> CliResult {
    let cfg: PlotConfig = config::resolve(&flags, flags.config.as_deref())?;
    config::echo("plot", &cfg)?;
    let csv_path = cfg.csv.as_ref().ok_or_else(|| usage("--csv is required"))?;
    let x = cfg.x.as_deref().ok_or_else(|| usage("--x is required"))?;
    let y = cfg.y.as_deref().ok_or_else(|| usage("--y is required"))?;
    let out = cfg.out.clone().unwrap_or_else(|| csv_path.with_extension("svg"));
    let text = std::fs::read_to_string(csv_path).map_err(|e| pmoe_core::Error::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    let p = plot_from_csv(&text, cfg.kind, x, y, cfg.group.as_deref(), &cfg.title)?;
    emit_plot(&p, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(f) => gen_data(f),
        Command::MnistCollage(f) => mnist_collage(f),
        Command::Train(f) => train(f),
        Command::Audit(f) => audit(f),
        Command::Sweep(f) => sweep(f),
        Command::Flops(f) => flops(f),
        Command::CheckSeparability(f) => check_separability(f),
        Command::Plot(f) => plot(f),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
