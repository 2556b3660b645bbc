use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use lns_core::pipeline::Method;

mod commands;

use commands::{
    config_command, parse_task_arg, read_config, AnalyzeRun, CompressRun, Ctx, ExperimentRun, LocalizeMode, LocalizeRun, MergeRun,
    StitchRun, SuiteRun,
};

/// Localize-and-Stitch: sparse task-vector localization and merging.
#[derive(Parser)]
#[command(name = "lns", version)]
struct Cli {
    /// JSON config for the command; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "LNS_OUT_DIR", default_value = "lns-out")]
    out: PathBuf,

    /// Record wall-clock times (in timestamps.json and merge reports).
    #[arg(long, global = true)]
    timestamps: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic suite, pretrain and finetune; writes PSET files.
    Suite(SuiteArgs),
    /// Find a task's mask and write MASK, SPTV and a JSON sidecar.
    Localize(LocalizeArgs),
    /// Stitch sparse task vectors onto a pretrained model, optionally incrementally.
    Stitch(StitchArgs),
    /// Merge every suite task with one method and write a report.
    Merge(MergeArgs),
    /// Run a scripted experiment bundle.
    Experiment(ExperimentArgs),
    /// Pairwise Jaccard and cosine matrices of sparse task vectors.
    Analyze(AnalyzeArgs),
    /// Sparsify a finetuned model and report file sizes.
    Compress(CompressArgs),
    /// Re-run any command from its resolved_config.json.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_tasks: Option<usize>,
    /// Make task 1 reuse task 0's inputs with permuted labels.
    #[arg(long)]
    conflict: bool,
}

#[derive(Args)]
#[group(id = "mode", multiple = false)]
struct ModeArgs {
    /// Top-k% of |tau|, no data needed.
    #[arg(long, group = "mode")]
    dataless: bool,
    /// Train a relaxed mask on labelled shots.
    #[arg(long, group = "mode")]
    trained: bool,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    mode: ModeArgs,
    /// Suite directory from `lns suite`; supplies the models and the shots.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Task index within the suite.
    #[arg(long)]
    task: Option<usize>,
    /// Pretrained PSET, instead of the suite's.
    #[arg(long)]
    pre: Option<PathBuf>,
    /// Finetuned PSET, instead of the suite's.
    #[arg(long)]
    ft: Option<PathBuf>,
    /// Percent of parameters kept.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Labelled examples per class.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// L1 weight on the mask.
    #[arg(long, conflicts_with = "auto_lambda")]
    lambda: Option<f64>,
    /// Search lambda so the mask lands at --sparsity.
    #[arg(long)]
    auto_lambda: bool,
    /// Mask score learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for shot sampling and batching.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long)]
    pre: Option<PathBuf>,
    /// Sparse task vector to stitch; the file stem is its id.
    #[arg(long)]
    sptv: Vec<String>,
    /// Start from this stitch state directory (left untouched).
    #[arg(long)]
    state: Option<PathBuf>,
    /// Add a task as `id=path`.
    #[arg(long)]
    add: Vec<String>,
    /// Remove a task by id.
    #[arg(long)]
    remove: Vec<String>,
    /// Check the result against stitching from scratch.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    suite: Option<PathBuf>,
    /// simple, ta, ties, fisher, regmean, lns or lns-dataless.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Pick the task arithmetic alpha on validation data.
    #[arg(long)]
    sweep: bool,
    /// TIES trim level in percent.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    /// Percent of parameters kept per task.
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    auto_lambda: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// grafting, conflict, sparsity-sweep, shots-sweep, compression, continual or retention.
    name: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Sparse task vector, as `path` or `id=path`.
    #[arg(long)]
    sptv: Vec<String>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    pre: Option<PathBuf>,
    #[arg(long)]
    ft: Option<PathBuf>,
    #[arg(long, conflicts_with = "sparsity")]
    mask: Option<PathBuf>,
    /// Dataless mask level in percent when no --mask is given.
    #[arg(long)]
    sparsity: Option<f64>,
}

#[derive(Args)]
struct RerunArgs {
    /// A resolved_config.json written by an earlier run.
    resolved: PathBuf,
}

fn load<T: serde::de::DeserializeOwned + Default>(cli: &Cli, command: &str) -> Result<T> {
    match &cli.config {
        Some(path) => read_config(path, command),
        None => Ok(T::default()),
    }
}

fn merge_method(a: &MergeArgs, current: Method) -> Result<Method> {
    let mut m = match &a.method {
        Some(name) if name != current.name() => Method::default_for(name)?,
        _ => current,
    };
    match &mut m {
        Method::Simple => {}
        Method::Ta { alpha, sweep } => {
            if let Some(v) = a.alpha {
                *alpha = v;
            }
            *sweep |= a.sweep;
        }
        Method::Ties { k_percent, alpha } => {
            if let Some(v) = a.k {
                *k_percent = v;
            }
            if let Some(v) = a.alpha {
                *alpha = v;
            }
        }
        Method::Fisher { n_samples, eps } => {
            if let Some(v) = a.n_samples {
                *n_samples = v;
            }
            if let Some(v) = a.eps {
                *eps = v;
            }
        }
        Method::Regmean { n_samples, ridge_rel } => {
            if let Some(v) = a.n_samples {
                *n_samples = v;
            }
            if let Some(v) = a.ridge {
                *ridge_rel = v;
            }
        }
        Method::Lns { localize } => {
            if let Some(v) = a.sparsity {
                localize.sparsity = v / 100.0;
            }
            if let Some(v) = a.shots {
                localize.shots = v;
            }
            if let Some(v) = a.epochs {
                localize.epochs = v;
            }
            if let Some(v) = a.lambda {
                localize.lambda = v;
            }
            localize.lambda_autosearch |= a.auto_lambda;
        }
        Method::LnsDataless { k_percent } => {
            if let Some(v) = a.sparsity {
                *k_percent = v;
            }
        }
    }
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        out: cli.out.clone(),
        timestamps: cli.timestamps,
    };
    match &cli.command {
        Command::Suite(a) => {
            let mut cfg: SuiteRun = load(&cli, "suite")?;
            if let Some(s) = a.seed {
                cfg.spec.suite.seed = s;
            }
            if let Some(n) = a.n_tasks {
                cfg.spec.suite.n_tasks = n;
            }
            if a.conflict {
                cfg.spec.suite.conflict_pair = Some((0, 1));
            }
            commands::suite(cfg, &ctx)
        }
        Command::Localize(a) => {
            let mut cfg: LocalizeRun = load(&cli, "localize")?;
            if a.mode.dataless {
                cfg.mode = LocalizeMode::Dataless;
            }
            if a.mode.trained {
                cfg.mode = LocalizeMode::Trained;
            }
            set(&mut cfg.suite, a.suite.clone());
            set(&mut cfg.task, a.task);
            set(&mut cfg.pre, a.pre.clone());
            set(&mut cfg.ft, a.ft.clone());
            set(&mut cfg.sparsity, a.sparsity);
            apply(&mut cfg.shots, a.shots);
            apply(&mut cfg.epochs, a.epochs);
            apply(&mut cfg.lambda, a.lambda);
            apply(&mut cfg.lr, a.lr);
            apply(&mut cfg.seed, a.seed);
            cfg.auto_lambda |= a.auto_lambda;
            commands::localize(cfg, &ctx)
        }
        Command::Stitch(a) => {
            let mut cfg: StitchRun = load(&cli, "stitch")?;
            set(&mut cfg.pre, a.pre.clone());
            set(&mut cfg.state, a.state.clone());
            cfg.remove.extend(a.remove.iter().cloned());
            cfg.add.extend(a.sptv.iter().chain(&a.add).map(|s| parse_task_arg(s)));
            cfg.verify |= a.verify;
            commands::stitch(cfg, &ctx)
        }
        Command::Merge(a) => {
            let mut cfg: MergeRun = load(&cli, "merge")?;
            set(&mut cfg.suite, a.suite.clone());
            apply(&mut cfg.seed, a.seed);
            cfg.method = merge_method(a, cfg.method)?;
            commands::merge(cfg, &ctx)
        }
        Command::Experiment(a) => {
            let mut cfg: ExperimentRun = load(&cli, "experiment")?;
            apply(&mut cfg.name, a.name.clone());
            apply(&mut cfg.bundle.seeds, a.seeds.clone());
            if cfg.name.is_empty() {
                bail!(lns_core::Error::InvalidArgument("experiment name is required".into()));
            }
            commands::experiment(cfg, &ctx)
        }
        Command::Analyze(a) => {
            let mut cfg: AnalyzeRun = load(&cli, "analyze")?;
            cfg.sptv.extend(a.sptv.iter().map(|s| parse_task_arg(s)));
            commands::analyze(cfg, &ctx)
        }
        Command::Compress(a) => {
            let mut cfg: CompressRun = load(&cli, "compress")?;
            set(&mut cfg.pre, a.pre.clone());
            set(&mut cfg.ft, a.ft.clone());
            if a.mask.is_some() {
                cfg.mask = a.mask.clone();
                cfg.sparsity = None;
            }
            if a.sparsity.is_some() {
                cfg.sparsity = a.sparsity;
                cfg.mask = None;
            }
            commands::compress(cfg, &ctx)
        }
        Command::Rerun(a) => {
            let path = &a.resolved;
            match config_command(path)?.as_str() {
                "suite" => commands::suite(read_config(path, "suite")?, &ctx),
                "localize" => commands::localize(read_config(path, "localize")?, &ctx),
                "stitch" => commands::stitch(read_config(path, "stitch")?, &ctx),
                "merge" => commands::merge(read_config(path, "merge")?, &ctx),
                "experiment" => commands::experiment(read_config(path, "experiment")?, &ctx),
                "analyze" => commands::analyze(read_config(path, "analyze")?, &ctx),
                "compress" => commands::compress(read_config(path, "compress")?, &ctx),
                other => bail!("unknown command `{other}` in {}", path.display()),
            }
        }
    }
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn apply<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// 2 numeric failure, 3 input mismatch, 4 format corruption, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use lns_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence { .. } | E::Singular { .. } | E::NoLambdaBracket { .. } => 2,
                E::StructuralMismatch { .. } | E::BaseMismatch { .. } | E::UnknownTask(_) | E::DuplicateTask(_) => 3,
                E::Format { .. } | E::Corruption { .. } | E::Json(_) => 4,
                E::Empty(_) | E::InvalidArgument(_) | E::Io(_) | E::Csv(_) => 1,
            };
        }
    }
    1
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
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
