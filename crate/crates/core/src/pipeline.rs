//! End-to-end harness on the synthetic suite: pretrain, finetune, localize,
//! merge with any method and evaluate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    fisher_estimate, fisher_merge, grams, regmean_merge, simple_average, task_arithmetic, task_arithmetic_sweep, ties_merge,
    alpha_grid, FISHER_DEFAULT_EPS, REGMEAN_DEFAULT_RIDGE, TA_DEFAULT_ALPHA, TIES_DEFAULT_ALPHA, TIES_DEFAULT_K,
};
use crate::codec::fnv1a64;
use crate::error::{Error, Result};
use crate::localize::{dataless_localize, localize_trained, LocalizeConfig};
use crate::pset::{apply_delta, compute_task_vector, load_pset, save_pset, ParamSet, TaskVector};
use crate::rng::{derive_seed, substream};
use crate::sparse::{mask_apply, Mask, SparseTaskVector};
use crate::stitch::stitch_named;
use crate::toy::data::{gen_task_suite, SuiteConfig, TaskSuite};
use crate::toy::model::ToyArch;
use crate::toy::train::{evaluate, sgd_finetune, LossContext, SgdConfig};

/// Everything needed to rebuild a suite and its models from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub suite: SuiteConfig,
    pub hidden: usize,
    pub blocks: usize,
    pub pretrain: SgdConfig,
    pub finetune: SgdConfig,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        let arch = ToyArch::default();
        Self {
            suite: SuiteConfig::default(),
            hidden: arch.hidden,
            blocks: arch.blocks,
            pretrain: SgdConfig::default(),
            finetune: SgdConfig::default(),
        }
    }
}

impl SuiteSpec {
    pub fn arch(&self) -> ToyArch {
        ToyArch {
            d_in: self.suite.d_in,
            hidden: self.hidden,
            blocks: self.blocks,
            classes: self.suite.classes,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.suite.seed = seed;
        self
    }
}

/// Stable hash of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("configs serialize");
    format!("{:016x}", fnv1a64(&json))
}

/// Pretrained and finetuned models for a generated suite.
#[derive(Debug, Clone)]
pub struct BuiltSuite {
    pub spec: SuiteSpec,
    pub arch: ToyArch,
    pub data: TaskSuite,
    pub pre: ParamSet,
    pub fts: Vec<ParamSet>,
    pub tvs: Vec<TaskVector>,
}

pub fn task_id(t: usize) -> String {
    format!("task{t}")
}

pub fn build_suite(spec: &SuiteSpec) -> Result<BuiltSuite> {
    let data = gen_task_suite(&spec.suite)?;
    let arch = spec.arch();
    let seed = spec.suite.seed;
    let init = arch.init(&mut substream(seed, "init"));
    let pre = sgd_finetune(&arch, &init, &data.pretrain.train, &spec.pretrain, derive_seed(seed, "sgd/pretrain"))?;
    let fts = data
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let ft = sgd_finetune(&arch, &pre, &task.train, &spec.finetune, derive_seed(seed, &format!("sgd/{}", task_id(t))))?;
            on_delta_grid(&pre, &ft)
        })
        .collect::<Result<Vec<_>>>()?;
    finish(spec.clone(), data, pre, fts)
}

/// `ft` moved to the nearest point of the form `pre + tau` with an f32 `tau`.
///
/// Where a weight crosses zero the f32 delta can be coarser than `ft`'s own
/// grid, so not every `ft` is reachable from `pre`. Snapping moves such weights
/// by at most one ulp of the delta and makes the task vector an exact inverse.
fn on_delta_grid(pre: &ParamSet, ft: &ParamSet) -> Result<ParamSet> {
    apply_delta(pre, &[(1.0, &compute_task_vector(pre, ft)?)])
}

fn finish(spec: SuiteSpec, data: TaskSuite, pre: ParamSet, fts: Vec<ParamSet>) -> Result<BuiltSuite> {
    let tvs = fts.iter().map(|ft| compute_task_vector(&pre, ft)).collect::<Result<_>>()?;
    Ok(BuiltSuite {
        arch: spec.arch(),
        spec,
        data,
        pre,
        fts,
        tvs,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SuiteFiles {
    spec: SuiteSpec,
    pre: FileEntry,
    finetuned: Vec<FileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileEntry {
    file: String,
    fingerprint: String,
}

impl BuiltSuite {
    pub fn n_tasks(&self) -> usize {
        self.fts.len()
    }

    /// Writes `pre.pset`, `task{t}.pset`, `suite.json` and the data manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_pset(&self.pre, dir.join("pre.pset"))?;
        let mut finetuned = Vec::new();
        for (t, ft) in self.fts.iter().enumerate() {
            let file = format!("{}.pset", task_id(t));
            save_pset(ft, dir.join(&file))?;
            finetuned.push(FileEntry {
                file,
                fingerprint: format!("{:016x}", ft.fingerprint()),
            });
        }
        let files = SuiteFiles {
            spec: self.spec.clone(),
            pre: FileEntry {
                file: "pre.pset".into(),
                fingerprint: format!("{:016x}", self.pre.fingerprint()),
            },
            finetuned,
        };
        std::fs::write(dir.join("suite.json"), serde_json::to_string_pretty(&files)?)?;
        std::fs::write(dir.join("data_manifest.json"), serde_json::to_string_pretty(&self.data.manifest)?)?;
        Ok(())
    }

    /// Regenerates the data from the stored spec and reads the model files.
    pub fn load(dir: impl AsRef<Path>) -> Result<BuiltSuite> {
        let dir = dir.as_ref();
        let files: SuiteFiles = serde_json::from_str(&std::fs::read_to_string(dir.join("suite.json"))?)?;
        let read = |e: &FileEntry| -> Result<ParamSet> {
            let p = load_pset(dir.join(&e.file))?;
            if format!("{:016x}", p.fingerprint()) != e.fingerprint {
                return Err(Error::Corruption {
                    name: e.file.clone(),
                    detail: "fingerprint differs from suite.json".into(),
                });
            }
            Ok(p)
        };
        let pre = read(&files.pre)?;
        let fts = files.finetuned.iter().map(read).collect::<Result<Vec<_>>>()?;
        let data = gen_task_suite(&files.spec.suite)?;
        if data.tasks.len() != fts.len() {
            return Err(Error::mismatch("suite.json", "task count differs from spec"));
        }
        finish(files.spec, data, pre, fts)
    }

    pub fn finetuned_acc(&self) -> Result<Vec<f64>> {
        self.fts
            .iter()
            .zip(&self.data.tasks)
            .map(|(ft, task)| evaluate(&self.arch, ft, &task.test))
            .collect()
    }

    /// Test accuracy of `params` on every task, then on the held-out pretrain task.
    pub fn evaluate_all(&self, params: &ParamSet) -> Result<(Vec<f64>, f64)> {
        let per_task = self
            .data
            .tasks
            .iter()
            .map(|task| evaluate(&self.arch, params, &task.test))
            .collect::<Result<Vec<_>>>()?;
        Ok((per_task, evaluate(&self.arch, params, &self.data.pretrain.test)?))
    }

    fn val_avg(&self, params: &ParamSet) -> Result<f64> {
        let accs = self
            .data
            .tasks
            .iter()
            .map(|task| evaluate(&self.arch, params, &task.val))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&accs))
    }

    /// Trained localization for task `t` on k-shot validation data.
    pub fn localize(&self, t: usize, cfg: &LocalizeConfig, seed: u64) -> Result<Localized> {
        let id = task_id(t);
        let shots = self.data.tasks[t]
            .val
            .k_shot(self.arch.classes, cfg.shots, derive_seed(seed, &format!("shots/{id}")));
        let ctx = LossContext::new(self.arch, shots, cfg.batch_size, derive_seed(seed, &format!("mask/{id}")))?;
        let (_, mask, used) = localize_trained(&self.tvs[t], &self.pre, &ctx, cfg)?;
        let sparse = mask_apply(&mask, &self.tvs[t])?;
        Ok(Localized { mask, sparse, cfg: used })
    }

    pub fn localize_dataless(&self, t: usize, k_percent: f64) -> Result<Localized> {
        let cfg = LocalizeConfig::default();
        let mask = dataless_localize(&self.tvs[t], k_percent, &cfg.maskable_for(&self.pre))?;
        let sparse = mask_apply(&mask, &self.tvs[t])?;
        Ok(Localized {
            mask,
            sparse,
            cfg: LocalizeConfig { sparsity: k_percent / 100.0, ..cfg },
        })
    }

    /// Merges every task with `method`; `seed` drives shot sampling and mask batching.
    pub fn merge(&self, method: &Method, seed: u64) -> Result<MergeOutcome> {
        let mut localized = Vec::new();
        let mut chosen_alpha = None;
        let merged = match method {
            Method::Simple => simple_average(&self.fts)?,
            Method::Ta { alpha, sweep } => {
                if *sweep {
                    let (best, _) = task_arithmetic_sweep(&self.pre, &self.tvs, &alpha_grid(), |m| self.val_avg(m))?;
                    chosen_alpha = Some(best);
                    task_arithmetic(&self.pre, &self.tvs, best)?
                } else {
                    task_arithmetic(&self.pre, &self.tvs, *alpha)?
                }
            }
            Method::Ties { k_percent, alpha } => ties_merge(&self.pre, &self.tvs, *k_percent, *alpha)?,
            Method::Fisher { n_samples, eps } => {
                let fishers = self
                    .fts
                    .iter()
                    .zip(&self.data.tasks)
                    .map(|(ft, task)| fisher_estimate(&self.arch, ft, &task.train, *n_samples))
                    .collect::<Result<Vec<_>>>()?;
                fisher_merge(&self.fts, &fishers, *eps)?
            }
            Method::Regmean { n_samples, ridge_rel } => {
                let gs = self
                    .fts
                    .iter()
                    .zip(&self.data.tasks)
                    .map(|(ft, task)| grams(&self.arch, ft, &task.train, *n_samples))
                    .collect::<Result<Vec<_>>>()?;
                regmean_merge(&self.fts, &gs, *ridge_rel)?
            }
            Method::Lns { localize } => {
                localized = (0..self.n_tasks()).map(|t| self.localize(t, localize, seed)).collect::<Result<_>>()?;
                self.stitch(&localized)?
            }
            Method::LnsDataless { k_percent } => {
                localized = (0..self.n_tasks()).map(|t| self.localize_dataless(t, *k_percent)).collect::<Result<_>>()?;
                self.stitch(&localized)?
            }
        };
        let (per_task_acc, pretrain_acc) = self.evaluate_all(&merged)?;
        let report = MergeReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.name().into(),
            hyperparameters: serde_json::to_value(method)?,
            chosen_alpha,
            avg_acc: mean(&per_task_acc),
            per_task_acc,
            pretrain_acc,
            union_support_fraction: changed_fraction(&self.pre, &merged),
            seed,
            suite_seed: self.spec.suite.seed,
            config_hash: config_hash(&(&self.spec, method, seed)),
            timestamps: None,
        };
        Ok(MergeOutcome { merged, report, localized })
    }

    pub fn stitch(&self, localized: &[Localized]) -> Result<ParamSet> {
        let ids: Vec<String> = (0..localized.len()).map(task_id).collect();
        let named: Vec<(&str, &SparseTaskVector)> = ids.iter().map(String::as_str).zip(localized.iter().map(|l| &l.sparse)).collect();
        Ok(stitch_named(&self.pre, &named)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct Localized {
    pub mask: Mask,
    pub sparse: SparseTaskVector,
    pub cfg: LocalizeConfig,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Fraction of coordinates where `merged` differs from `pre`.
pub fn changed_fraction(pre: &ParamSet, merged: &ParamSet) -> f64 {
    let n = pre.numel();
    if n == 0 {
        return 0.0;
    }
    let changed = pre
        .tensors()
        .iter()
        .zip(merged.tensors())
        .map(|(a, b)| a.data.iter().zip(&b.data).filter(|(x, y)| x.to_bits() != y.to_bits()).count())
        .sum::<usize>();
    changed as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Simple,
    Ta { alpha: f64, sweep: bool },
    Ties { k_percent: f64, alpha: f64 },
    Fisher { n_samples: usize, eps: f64 },
    Regmean { n_samples: usize, ridge_rel: f64 },
    Lns { localize: LocalizeConfig },
    LnsDataless { k_percent: f64 },
}

pub const DATALESS_DEFAULT_K: f64 = 5.0;
pub const STATS_SAMPLES: usize = 256;

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Simple => "simple",
            Method::Ta { .. } => "ta",
            Method::Ties { .. } => "ties",
            Method::Fisher { .. } => "fisher",
            Method::Regmean { .. } => "regmean",
            Method::Lns { .. } => "lns",
            Method::LnsDataless { .. } => "lns-dataless",
        }
    }

    /// The method with its default hyperparameters.
    pub fn default_for(name: &str) -> Result<Method> {
        Ok(match name {
            "simple" => Method::Simple,
            "ta" => Method::Ta { alpha: TA_DEFAULT_ALPHA, sweep: false },
            "ties" => Method::Ties { k_percent: TIES_DEFAULT_K, alpha: TIES_DEFAULT_ALPHA },
            "fisher" => Method::Fisher { n_samples: STATS_SAMPLES, eps: FISHER_DEFAULT_EPS },
            "regmean" => Method::Regmean { n_samples: STATS_SAMPLES, ridge_rel: REGMEAN_DEFAULT_RIDGE },
            "lns" => Method::Lns { localize: LocalizeConfig::default() },
            "lns-dataless" => Method::LnsDataless { k_percent: DATALESS_DEFAULT_K },
            other => return Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        })
    }

    pub const NAMES: [&'static str; 7] = ["simple", "ta", "ties", "fisher", "regmean", "lns", "lns-dataless"];
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub schema_version: u32,
    pub method: String,
    pub hyperparameters: serde_json::Value,
    /// Set when task arithmetic picked alpha on validation data.
    pub chosen_alpha: Option<f64>,
    pub per_task_acc: Vec<f64>,
    pub avg_acc: f64,
    pub pretrain_acc: f64,
    pub union_support_fraction: f64,
    pub seed: u64,
    pub suite_seed: u64,
    pub config_hash: String,
    /// Wall-clock times; only filled on request since they break bit-exact reruns.
    pub timestamps: Option<Timestamps>,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub merged: ParamSet,
    pub report: MergeReport,
    /// Per-task masks for the localize-and-stitch methods, empty otherwise.
    pub localized: Vec<Localized>,
}
