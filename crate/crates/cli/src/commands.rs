//! Run configs and their execution. Every config is a plain serde record; the
//! fully resolved record is written as `resolved_config.json` before any work
//! starts, and running it again reproduces every other output byte for byte.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use lns_core::analysis::{matrix_table, pairwise_matrices, write_json};
use lns_core::bundles::{run_bundle, BundleConfig};
use lns_core::localize::{dataless_localize, default_maskable, LocalizeConfig};
use lns_core::pipeline::{build_suite, config_hash, task_id, BuiltSuite, Localized, Method, SuiteSpec, Timestamps};
use lns_core::sparse::{compression_report, load_mask, load_sptv, save_mask, save_sptv};
use lns_core::{compute_task_vector, load_pset, mask_apply, save_pset, SparseTaskVector, StitchState};

pub const RESOLVED: &str = "resolved_config.json";

/// Shared options that never change what a run computes.
pub struct Ctx {
    pub out: PathBuf,
    pub timestamps: bool,
}

impl Ctx {
    fn started(&self) -> Option<u128> {
        self.timestamps.then(now_ms)
    }

    fn finish(&self, started: Option<u128>) -> Result<Option<Timestamps>> {
        let Some(started_unix_ms) = started else { return Ok(None) };
        let ts = Timestamps {
            started_unix_ms,
            finished_unix_ms: now_ms(),
        };
        write_json(self.out.join("timestamps.json"), &ts)?;
        Ok(Some(ts))
    }
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

#[derive(Serialize)]
struct Resolved<'a, T> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a T,
}

/// Reads a config file, accepting either a bare record or a resolved config for `command`.
pub fn read_config<T: DeserializeOwned>(path: &Path, command: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(found) = obj.remove("command") {
            if found != command {
                bail!("config {} is for `{}`, not `{command}`", path.display(), found.as_str().unwrap_or("?"));
            }
        }
    }
    serde_json::from_value(value).with_context(|| format!("config {} does not fit `{command}`", path.display()))
}

/// The command name stored in a resolved config.
pub fn config_command(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    value
        .get("command")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .with_context(|| format!("{} has no `command` field", path.display()))
}

fn write_resolved<T: Serialize>(ctx: &Ctx, command: &str, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    write_json(ctx.out.join(RESOLVED), &Resolved { command, config: cfg })?;
    Ok(())
}

/// Absolute form of an input path so the resolved config works from any directory.
pub fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).with_context(|| format!("input {} not found", p.display()))
}

fn absolute_opt(p: &mut Option<PathBuf>) -> Result<()> {
    if let Some(path) = p.as_mut() {
        *path = absolute(path)?;
    }
    Ok(())
}

// ---- suite

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteRun {
    pub spec: SuiteSpec,
}

pub fn suite(cfg: SuiteRun, ctx: &Ctx) -> Result<()> {
    write_resolved(ctx, "suite", &cfg)?;
    let t0 = ctx.started();
    let s = build_suite(&cfg.spec)?;
    s.save(&ctx.out)?;
    let acc = s.finetuned_acc()?;
    let (pre_acc, _) = s.evaluate_all(&s.pre)?;
    write_json(
        ctx.out.join("suite_report.json"),
        &json!({
            "config_hash": config_hash(&cfg),
            "pre_fingerprint": format!("{:016x}", s.pre.fingerprint()),
            "finetuned_acc": acc,
            "pretrained_acc": pre_acc,
            "n_params": s.pre.numel(),
        }),
    )?;
    ctx.finish(t0)?;
    println!("wrote pre.pset and {} finetuned models to {}", s.n_tasks(), ctx.out.display());
    Ok(())
}

// ---- localize

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizeMode {
    Dataless,
    #[default]
    Trained,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeRun {
    /// Suite directory; required for trained localization.
    pub suite: Option<PathBuf>,
    pub task: Option<usize>,
    pub pre: Option<PathBuf>,
    pub ft: Option<PathBuf>,
    pub mode: LocalizeMode,
    /// Percent of maskable parameters.
    pub sparsity: Option<f64>,
    pub shots: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub auto_lambda: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LocalizeRun {
    fn default() -> Self {
        let d = LocalizeConfig::default();
        Self {
            suite: None,
            task: None,
            pre: None,
            ft: None,
            mode: LocalizeMode::default(),
            sparsity: None,
            shots: d.shots,
            epochs: d.epochs,
            lambda: d.lambda,
            auto_lambda: d.lambda_autosearch,
            lr: d.lr,
            batch_size: d.batch_size,
            seed: 0,
        }
    }
}

impl LocalizeRun {
    pub fn resolve(mut self) -> Result<Self> {
        self.sparsity.get_or_insert(match self.mode {
            LocalizeMode::Dataless => lns_core::pipeline::DATALESS_DEFAULT_K,
            LocalizeMode::Trained => LocalizeConfig::default().sparsity * 100.0,
        });
        absolute_opt(&mut self.suite)?;
        absolute_opt(&mut self.pre)?;
        absolute_opt(&mut self.ft)?;
        Ok(self)
    }

    fn localize_config(&self, percent: f64) -> LocalizeConfig {
        LocalizeConfig {
            sparsity: percent / 100.0,
            lambda: self.lambda,
            lr: self.lr,
            epochs: self.epochs,
            shots: self.shots,
            batch_size: self.batch_size,
            lambda_autosearch: self.auto_lambda,
            ..LocalizeConfig::default()
        }
    }
}

fn suite_task(suite: &BuiltSuite, task: Option<usize>) -> Result<usize> {
    let t = task.context("--task is required with --suite")?;
    if t >= suite.n_tasks() {
        return Err(lns_core::Error::UnknownTask(task_id(t)).into());
    }
    Ok(t)
}

pub fn localize(cfg: LocalizeRun, ctx: &Ctx) -> Result<()> {
    let cfg = cfg.resolve()?;
    write_resolved(ctx, "localize", &cfg)?;
    let t0 = ctx.started();
    let percent = cfg.sparsity.expect("resolved");
    let (loc, base) = match (&cfg.suite, &cfg.pre, &cfg.ft) {
        (Some(dir), None, None) => {
            let s = BuiltSuite::load(dir)?;
            let t = suite_task(&s, cfg.task)?;
            let loc = match cfg.mode {
                LocalizeMode::Dataless => s.localize_dataless(t, percent)?,
                LocalizeMode::Trained => s.localize(t, &cfg.localize_config(percent), cfg.seed)?,
            };
            (loc, s.pre.fingerprint())
        }
        (None, Some(pre), Some(ft)) => {
            if cfg.mode == LocalizeMode::Trained {
                bail!("trained localization needs labelled shots: pass --suite and --task");
            }
            let pre = load_pset(pre)?;
            let tv = compute_task_vector(&pre, &load_pset(ft)?)?;
            let mask = dataless_localize(&tv, percent, &default_maskable(&pre))?;
            let sparse = mask_apply(&mask, &tv)?;
            let loc = Localized {
                mask,
                sparse,
                cfg: cfg.localize_config(percent),
            };
            (loc, pre.fingerprint())
        }
        _ => bail!("pass either --suite (with --task) or both --pre and --ft"),
    };
    save_mask(&loc.mask, ctx.out.join("mask.mask"))?;
    save_sptv(&loc.sparse, ctx.out.join("task.sptv"))?;
    write_json(
        ctx.out.join("localize.json"),
        &json!({
            "mode": cfg.mode,
            "target_sparsity": percent / 100.0,
            "achieved_sparsity": loc.mask.sparsity(),
            "nnz": loc.sparse.nnz(),
            "lambda": loc.cfg.lambda,
            "maskable": loc.mask.maskable(),
            "base_fingerprint": format!("{base:016x}"),
            "config_hash": config_hash(&cfg),
            "files": ["mask.mask", "task.sptv"],
        }),
    )?;
    ctx.finish(t0)?;
    println!(
        "mask sparsity {:.4} ({} active) written to {}",
        loc.mask.sparsity(),
        loc.sparse.nnz(),
        ctx.out.display()
    );
    Ok(())
}

// ---- stitch

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchRun {
    /// Pretrained model; required unless `state` is given.
    pub pre: Option<PathBuf>,
    /// Existing stitch state to start from. It is read, never modified.
    pub state: Option<PathBuf>,
    /// Task ids to drop, applied before additions.
    pub remove: Vec<String>,
    /// `(id, path)` pairs to add in order.
    pub add: Vec<(String, PathBuf)>,
    pub verify: bool,
}

impl StitchRun {
    pub fn resolve(mut self) -> Result<Self> {
        absolute_opt(&mut self.pre)?;
        absolute_opt(&mut self.state)?;
        for (_, p) in &mut self.add {
            *p = absolute(p)?;
        }
        Ok(self)
    }
}

/// `id=path`, or a bare path whose file stem becomes the id.
pub fn parse_task_arg(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((id, path)) => (id.to_string(), PathBuf::from(path)),
        None => {
            let p = PathBuf::from(s);
            let id = p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
            (id, p)
        }
    }
}

pub fn stitch(cfg: StitchRun, ctx: &Ctx) -> Result<()> {
    let cfg = cfg.resolve()?;
    write_resolved(ctx, "stitch", &cfg)?;
    let t0 = ctx.started();
    let mut state = match (&cfg.state, &cfg.pre) {
        (Some(dir), None) => StitchState::load(dir)?,
        (None, Some(pre)) => StitchState::new(load_pset(pre)?),
        (Some(_), Some(_)) => bail!("--state already carries the pretrained model; drop --pre"),
        (None, None) => bail!("pass --pre or --state"),
    };
    for id in &cfg.remove {
        state.remove(id)?;
    }
    for (id, path) in &cfg.add {
        state.add(id, load_sptv(path)?)?;
    }
    let merged = state.merged()?;
    let verified = if cfg.verify {
        let (scratch, _) = state.restitch_from_scratch()?;
        if scratch != merged {
            bail!(lns_core::Error::Corruption {
                name: "stitch state".into(),
                detail: "incremental result differs from stitching from scratch".into(),
            });
        }
        Some(true)
    } else {
        None
    };
    save_pset(&merged, ctx.out.join("merged.pset"))?;
    state.save(ctx.out.join("state"))?;
    let w = state.weights();
    write_json(
        ctx.out.join("stitch.json"),
        &json!({
            "tasks": state.task_ids().collect::<Vec<_>>(),
            "merged_fingerprint": format!("{:016x}", merged.fingerprint()),
            "union_support": w.union_support(),
            "union_support_fraction": w.union_support() as f64 / merged.numel().max(1) as f64,
            "counts_checksum": format!("{:016x}", w.checksum()),
            "verified_against_scratch": verified,
        }),
    )?;
    ctx.finish(t0)?;
    println!("stitched {} tasks; union support {}", state.len(), w.union_support());
    Ok(())
}

// ---- merge

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeRun {
    pub suite: Option<PathBuf>,
    pub method: Method,
    pub seed: u64,
}

impl Default for MergeRun {
    fn default() -> Self {
        Self {
            suite: None,
            method: Method::default_for("lns").expect("known"),
            seed: 0,
        }
    }
}

pub fn merge(mut cfg: MergeRun, ctx: &Ctx) -> Result<()> {
    absolute_opt(&mut cfg.suite)?;
    write_resolved(ctx, "merge", &cfg)?;
    let t0 = ctx.started();
    let s = BuiltSuite::load(cfg.suite.as_ref().context("--suite is required")?)?;
    let mut outcome = s.merge(&cfg.method, cfg.seed)?;
    save_pset(&outcome.merged, ctx.out.join("merged.pset"))?;
    if !outcome.localized.is_empty() {
        std::fs::create_dir_all(ctx.out.join("masks"))?;
        for (t, l) in outcome.localized.iter().enumerate() {
            save_mask(&l.mask, ctx.out.join("masks").join(format!("{}.mask", task_id(t))))?;
            save_sptv(&l.sparse, ctx.out.join("masks").join(format!("{}.sptv", task_id(t))))?;
        }
    }
    outcome.report.timestamps = ctx.finish(t0)?;
    write_json(ctx.out.join("report.json"), &outcome.report)?;
    println!(
        "{}: average accuracy {:.4}, pretrain accuracy {:.4}",
        outcome.report.method, outcome.report.avg_acc, outcome.report.pretrain_acc
    );
    Ok(())
}

// ---- experiment

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentRun {
    pub name: String,
    pub bundle: BundleConfig,
}

pub fn experiment(cfg: ExperimentRun, ctx: &Ctx) -> Result<()> {
    write_resolved(ctx, "experiment", &cfg)?;
    let t0 = ctx.started();
    let summary = run_bundle(&cfg.name, &cfg.bundle, &ctx.out)?;
    ctx.finish(t0)?;
    println!("{}: wrote {} files to {}", cfg.name, summary.files.len() + 1, ctx.out.display());
    println!("{}", serde_json::to_string_pretty(&summary.results)?);
    Ok(())
}

// ---- analyze

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeRun {
    /// `(id, path)` of sparse task vectors sharing one layout.
    pub sptv: Vec<(String, PathBuf)>,
}

pub fn analyze(mut cfg: AnalyzeRun, ctx: &Ctx) -> Result<()> {
    for (_, p) in &mut cfg.sptv {
        *p = absolute(p)?;
    }
    write_resolved(ctx, "analyze", &cfg)?;
    let t0 = ctx.started();
    if cfg.sptv.is_empty() {
        bail!("pass at least one --sptv");
    }
    let sparse: Vec<SparseTaskVector> = cfg.sptv.iter().map(|(_, p)| load_sptv(p)).collect::<lns_core::Result<_>>()?;
    let masks: Vec<_> = sparse.iter().map(SparseTaskVector::support).collect();
    let pm = pairwise_matrices(&masks, &sparse)?;
    matrix_table(&pm.jaccard).write(ctx.out.join("jaccard.csv"))?;
    matrix_table(&pm.cosine).write(ctx.out.join("cosine.csv"))?;
    let rows: Vec<_> = cfg
        .sptv
        .iter()
        .zip(&sparse)
        .enumerate()
        .map(|(i, ((id, _), s))| json!({"row": task_id(i), "id": id, "nnz": s.nnz()}))
        .collect();
    write_json(
        ctx.out.join("analysis.json"),
        &json!({ "tasks": rows, "jaccard": pm.jaccard, "cosine": pm.cosine, "config_hash": config_hash(&cfg) }),
    )?;
    ctx.finish(t0)?;
    println!("wrote pairwise matrices for {} task vectors", sparse.len());
    Ok(())
}

// ---- compress

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressRun {
    pub pre: Option<PathBuf>,
    pub ft: Option<PathBuf>,
    /// Mask to apply; otherwise the dataless mask at `sparsity` percent.
    pub mask: Option<PathBuf>,
    pub sparsity: Option<f64>,
}

pub fn compress(mut cfg: CompressRun, ctx: &Ctx) -> Result<()> {
    absolute_opt(&mut cfg.pre)?;
    absolute_opt(&mut cfg.ft)?;
    absolute_opt(&mut cfg.mask)?;
    if cfg.mask.is_none() {
        cfg.sparsity.get_or_insert(1.0);
    }
    write_resolved(ctx, "compress", &cfg)?;
    let t0 = ctx.started();
    let (Some(pre), Some(ft)) = (&cfg.pre, &cfg.ft) else { bail!("--pre and --ft are required") };
    let (pre, ft) = (load_pset(pre)?, load_pset(ft)?);
    let tv = compute_task_vector(&pre, &ft)?;
    let mask = match (&cfg.mask, cfg.sparsity) {
        (Some(m), None) => load_mask(m)?,
        (None, Some(k)) => dataless_localize(&tv, k, &default_maskable(&pre))?,
        _ => bail!("pass either --mask or --sparsity, not both"),
    };
    let sparse = mask_apply(&mask, &tv)?;
    let path = ctx.out.join("task.sptv");
    save_sptv(&sparse, &path)?;
    let roundtrip = load_sptv(&path)? == sparse;
    let report = compression_report(&ft, &sparse);
    write_json(
        ctx.out.join("compression.json"),
        &json!({
            "dense_bytes": report.dense_bytes,
            "sparse_bytes": report.sparse_bytes,
            "ratio": report.ratio,
            "nnz": sparse.nnz(),
            "numel": pre.numel(),
            "roundtrip_bit_exact": roundtrip,
        }),
    )?;
    ctx.finish(t0)?;
    println!(
        "{} -> {} bytes (ratio {:.4})",
        report.dense_bytes, report.sparse_bytes, report.ratio
    );
    Ok(())
}
