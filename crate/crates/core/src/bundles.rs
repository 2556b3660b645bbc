//! Scripted experiment bundles. Each writes CSV tables plus a `summary.json`
//! into an output directory and is a pure function of its config.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{
    fmt_f64, kind_grouping, layer_grouping, matrix_table, pairwise_matrices, retention_check, shots_sweep, shots_table,
    sparsity_sweep, sparsity_table, write_json, Summary, SweepMethod, Table, SUMMARY_SCHEMA_VERSION,
};
use crate::baselines::simple_average;
use crate::error::{Error, Result};
use crate::localize::{dataless_localize, default_maskable, LocalizeConfig};
use crate::pipeline::{config_hash, mean, median, task_id, BuiltSuite, Method, SuiteSpec, build_suite};
use crate::pset::{compute_task_vector, ParamSet, Tensor};
use crate::rng::substream;
use crate::sparse::{compression_report, mask_apply, mask_distribution, CompressionReport, SparseTaskVector};
use crate::stitch::{graft, StitchState};
use crate::toy::train::evaluate;

pub const BUNDLES: [&str; 7] = ["grafting", "conflict", "sparsity-sweep", "shots-sweep", "compression", "continual", "retention"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleConfig {
    pub spec: SuiteSpec,
    pub seeds: Vec<u64>,
    /// Trained localization used by the merging bundles.
    pub localize: LocalizeConfig,
    /// Trained localization used for grafting and the conflict pair.
    pub graft_localize: LocalizeConfig,
    pub graft_dataless_percent: f64,
    pub dataless_percent: f64,
    pub conflict_pair: (usize, usize),
    pub sparsity_grid: Vec<f64>,
    pub shots_grid: Vec<usize>,
    /// Tasks merged before the continual additions start.
    pub continual_initial: usize,
    pub compression_params: usize,
    pub compression_sparsity: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            spec: SuiteSpec::default(),
            seeds: vec![0, 1, 2],
            localize: LocalizeConfig::default(),
            graft_localize: LocalizeConfig {
                sparsity: 0.05,
                lambda_autosearch: true,
                ..LocalizeConfig::default()
            },
            graft_dataless_percent: 10.0,
            dataless_percent: 5.0,
            conflict_pair: (0, 1),
            sparsity_grid: vec![0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
            shots_grid: vec![8, 16, 32, 64, 128, 256],
            continual_initial: 2,
            compression_params: 1_000_000,
            compression_sparsity: 0.01,
        }
    }
}

/// Runs bundle `name`, writing its files into `out`.
pub fn run_bundle(name: &str, cfg: &BundleConfig, out: impl AsRef<Path>) -> Result<Summary> {
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    let (files, results) = match name {
        "grafting" => grafting(cfg, out)?,
        "conflict" => conflict(cfg, out)?,
        "sparsity-sweep" => sparsity(cfg, out)?,
        "shots-sweep" => shots(cfg, out)?,
        "compression" => compression(cfg, out)?,
        "continual" => continual(cfg, out)?,
        "retention" => retention(cfg, out)?,
        other => return Err(Error::InvalidArgument(format!("unknown experiment `{other}`; one of {BUNDLES:?}"))),
    };
    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        experiment: name.into(),
        config_hash: config_hash(cfg),
        seeds: cfg.seeds.clone(),
        files,
        results,
    };
    write_json(out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn suites(cfg: &BundleConfig) -> impl Iterator<Item = Result<(u64, BuiltSuite)>> + '_ {
    cfg.seeds.iter().map(|&seed| Ok((seed, build_suite(&cfg.spec.clone().with_seed(seed))?)))
}

type Output = (Vec<String>, serde_json::Value);

fn save(out: &Path, name: &str, t: &Table, files: &mut Vec<String>) -> Result<()> {
    t.write(out.join(name))?;
    files.push(name.to_string());
    Ok(())
}

/// Row tables always carry the method and the bundle's config hash.
fn save_rows(out: &Path, name: &str, t: Table, method: &str, cfg: &BundleConfig, files: &mut Vec<String>) -> Result<()> {
    let t = t.with_column("method", method).with_column("config_hash", &config_hash(cfg));
    save(out, name, &t, files)
}

fn grafting(cfg: &BundleConfig, out: &Path) -> Result<Output> {
    let mut files = Vec::new();
    let mut t = Table::new([
        "seed", "task", "method", "target_sparsity", "achieved_sparsity", "finetuned_acc", "grafted_acc", "ratio",
    ]);
    let mut dist = Table::new(["seed", "task", "grouping", "group", "fraction"]);
    let (mut min_trained, mut min_dataless) = (Vec::new(), Vec::new());
    for item in suites(cfg) {
        let (seed, s) = item?;
        let ft = s.finetuned_acc()?;
        let mut trained = Vec::new();
        let (mut rt, mut rd) = (Vec::new(), Vec::new());
        for (task, &ft_acc) in ft.iter().enumerate() {
            let l = s.localize(task, &cfg.graft_localize, seed)?;
            let d = s.localize_dataless(task, cfg.graft_dataless_percent)?;
            for (method, target, loc, ratios) in [
                ("trained", cfg.graft_localize.sparsity, &l, &mut rt),
                ("dataless", cfg.graft_dataless_percent / 100.0, &d, &mut rd),
            ] {
                let acc = evaluate(&s.arch, &graft(&s.pre, &loc.sparse)?, &s.data.tasks[task].test)?;
                ratios.push(acc / ft_acc);
                t.push(vec![
                    seed.to_string(),
                    task_id(task),
                    method.into(),
                    fmt_f64(target),
                    fmt_f64(loc.mask.sparsity()),
                    fmt_f64(ft_acc),
                    fmt_f64(acc),
                    fmt_f64(acc / ft_acc),
                ]);
            }
            for (grouping, map) in [("kind", kind_grouping(&s.arch)), ("layer", layer_grouping(&s.arch))] {
                for (group, frac) in mask_distribution(&l.mask, &map)? {
                    dist.push(vec![seed.to_string(), task_id(task), grouping.into(), group, fmt_f64(frac)]);
                }
            }
            trained.push(l);
        }
        let masks: Vec<_> = trained.iter().map(|l| l.mask.clone()).collect();
        let sparse: Vec<_> = trained.iter().map(|l| l.sparse.clone()).collect();
        let pm = pairwise_matrices(&masks, &sparse)?;
        save(out, &format!("jaccard_seed{seed}.csv"), &matrix_table(&pm.jaccard), &mut files)?;
        save(out, &format!("cosine_seed{seed}.csv"), &matrix_table(&pm.cosine), &mut files)?;
        min_trained.push(rt.iter().cloned().fold(f64::INFINITY, f64::min));
        min_dataless.push(rd.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    save_rows(out, "grafting.csv", t, "lns", cfg, &mut files)?;
    save_rows(out, "mask_distribution.csv", dist, "lns", cfg, &mut files)?;
    files.sort();
    Ok((
        files,
        json!({
            "min_ratio_trained_per_seed": min_trained,
            "min_ratio_dataless_per_seed": min_dataless,
        }),
    ))
}

/// Per-seed outcome of the conflict-pair experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictOutcome {
    pub finetuned: [f64; 2],
    pub averaged: [f64; 2],
    pub stitched: [f64; 2],
    pub jaccard: f64,
}

impl ConflictOutcome {
    /// Mean gap closed by stitching relative to averaging.
    pub fn recovered_fraction(&self) -> f64 {
        let gap = 0.5 * ((self.finetuned[0] - self.averaged[0]) + (self.finetuned[1] - self.averaged[1]));
        let rec = 0.5 * ((self.stitched[0] - self.averaged[0]) + (self.stitched[1] - self.averaged[1]));
        rec / gap
    }

    pub fn min_degradation(&self) -> f64 {
        (self.finetuned[0] - self.averaged[0]).min(self.finetuned[1] - self.averaged[1])
    }
}

pub fn conflict_outcome(cfg: &BundleConfig, seed: u64) -> Result<ConflictOutcome> {
    let (i, j) = cfg.conflict_pair;
    let mut spec = cfg.spec.clone().with_seed(seed);
    spec.suite.conflict_pair = Some((i, j));
    let s = build_suite(&spec)?;
    let acc = |p: &ParamSet, t: usize| evaluate(&s.arch, p, &s.data.tasks[t].test);
    let avg = simple_average(&[s.fts[i].clone(), s.fts[j].clone()])?;
    let li = s.localize(i, &cfg.graft_localize, seed)?;
    let lj = s.localize(j, &cfg.graft_localize, seed)?;
    let jaccard = crate::sparse::mask_jaccard(&li.mask, &lj.mask)?;
    let stitched = s.stitch(&[li, lj])?;
    Ok(ConflictOutcome {
        finetuned: [acc(&s.fts[i], i)?, acc(&s.fts[j], j)?],
        averaged: [acc(&avg, i)?, acc(&avg, j)?],
        stitched: [acc(&stitched, i)?, acc(&stitched, j)?],
        jaccard,
    })
}

fn conflict(cfg: &BundleConfig, out: &Path) -> Result<Output> {
    let mut files = Vec::new();
    let mut t = Table::new([
        "seed", "finetuned_a", "finetuned_b", "averaged_a", "averaged_b", "stitched_a", "stitched_b", "mask_jaccard", "recovered_fraction",
    ]);
    let mut rec = Vec::new();
    let mut deg = Vec::new();
    for &seed in &cfg.seeds {
        let o = conflict_outcome(cfg, seed)?;
        rec.push(o.recovered_fraction());
        deg.push(o.min_degradation());
        let mut row = vec![seed.to_string()];
        row.extend([o.finetuned, o.averaged, o.stitched].iter().flatten().map(|&v| fmt_f64(v)));
        row.extend([fmt_f64(o.jaccard), fmt_f64(o.recovered_fraction())]);
        t.push(row);
    }
    save_rows(out, "conflict.csv", t, "lns", cfg, &mut files)?;
    Ok((
        files,
        json!({ "median_recovered_fraction": median(&rec), "min_degradation_per_seed": deg }),
    ))
}

fn sparsity(cfg: &BundleConfig, out: &Path) -> Result<Output> {
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let trained = LocalizeConfig {
        lambda_autosearch: true,
        ..cfg.localize.clone()
    };
    for item in suites(cfg) {
        let (seed, s) = item?;
        rows.extend(sparsity_sweep(&s, &cfg.sparsity_grid, SweepMethod::Dataless, &cfg.localize, seed)?);
        rows.extend(sparsity_sweep(&s, &cfg.sparsity_grid, SweepMethod::Trained, &trained, seed)?);
    }
    save_rows(out, "sparsity_sweep.csv", sparsity_table(&rows), "lns", cfg, &mut files)?;
    let mut medians = BTreeMap::new();
    for method in ["dataless", "trained"] {
        let curve: Vec<(f64, f64)> = cfg
            .sparsity_grid
            .iter()
            .map(|&sp| {
                let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.sparsity == sp).map(|r| r.merged_avg).collect();
                (sp, median(&v))
            })
            .collect();
        medians.insert(method, curve);
    }
    Ok((files, json!({ "median_merged_avg": medians })))
}

fn shots(cfg: &BundleConfig, out: &Path) -> Result<Output> {
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let mut dataless = Vec::new();
    for item in suites(cfg) {
        let (seed, s) = item?;
        rows.extend(shots_sweep(&s, &cfg.shots_grid, &cfg.localize, seed)?);
        dataless.push(s.merge(&Method::LnsDataless { k_percent: cfg.dataless_percent }, seed)?.report.avg_acc);
    }
    save_rows(out, "shots_sweep.csv", shots_table(&rows), "lns", cfg, &mut files)?;
    let medians: Vec<(usize, f64)> = cfg
        .shots_grid
        .iter()
        .map(|&k| (k, median(&rows.iter().filter(|r| r.shots == k).map(|r| r.merged_avg).collect::<Vec<_>>())))
        .collect();
    Ok((
        files,
        json!({ "median_merged_avg": medians, "dataless_merged_avg_per_seed": dataless, "dataless_median": median(&dataless) }),
    ))
}

/// A random `n_params` model and its finetuned copy, masked at `sparsity`: sizes and roundtrip check.
pub fn compression_probe(n_params: usize, sparsity: f64, seed: u64) -> Result<(CompressionReport, SparseTaskVector, ParamSet)> {
    let mut rng = substream(seed, "compression");
    let pre_data: Vec<f32> = (0..n_params).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let ft_data: Vec<f32> = pre_data.iter().map(|&p| p + rng.random_range(-0.01f32..0.01)).collect();
    let pre = ParamSet::new(vec![Tensor::new("w", vec![n_params], pre_data)?])?;
    let ft = ParamSet::new(vec![Tensor::new("w", vec![n_params], ft_data)?])?;
    let tv = compute_task_vector(&pre, &ft)?;
    let mask = dataless_localize(&tv, sparsity * 100.0, &default_maskable(&pre))?;
    let sparse = mask_apply(&mask, &tv)?;
    Ok((compression_report(&ft, &sparse), sparse, ft))
}

fn compression(cfg: &BundleConfig, out: &Path) -> Result<Output> {
    let mut files = Vec::new();
    let mut t = Table::new(["seed", "method", "source", "task", "numel", "nnz", "dense_bytes", "sparse_bytes", "ratio"]);
    let mut push = |seed: u64, source: &str, task: String, numel: usize, nnz: usize, r: &CompressionReport| {
        t.push(vec![
            seed.to_string(),
            if source == "toy" { "lns" } else { "lns-dataless" }.into(),
            source.into(),
            task,
            numel.to_string(),
            nnz.to_string(),
            r.dense_bytes.to_string(),
            r.sparse_bytes.to_string(),
            fmt_f64(r.ratio),
        ]);
    };
    let mut probe_ratio = Vec::new();
    for item in suites(cfg) {
        let (seed, s) = item?;
        for task in 0..s.n_tasks() {
            let l = s.localize(task, &cfg.localize, seed)?;
            let r = compression_report(&s.fts[task], &l.sparse);
            push(seed, "toy", task_id(task), s.pre.numel(), l.sparse.nnz(), &r);
        }
        let (r, sparse, _) = compression_probe(cfg.compression_params, cfg.compression_sparsity, seed)?;
        probe_ratio.push(r.ratio);
        push(seed, "synthetic", "w".into(), cfg.compression_params, sparse.nnz(), &r);
    }
    save_rows(out, "compression.csv", t, "lns", cfg, &mut files)?;
    Ok((files, json!({ "synthetic_ratio_per_seed": probe_ratio })))
}

fn continual(cfg: &BundleConfig, out: &Path) -> Result<Output> {
    let mut files = Vec::new();
    let mut t = Table::new([
        "seed", "step", "added", "tasks_merged", "new_nnz", "union_support", "identical_to_scratch", "avg_acc_merged_tasks",
    ]);
    let mut all_identical = true;
    for item in suites(cfg) {
        let (seed, s) = item?;
        let localized = (0..s.n_tasks()).map(|k| s.localize(k, &cfg.localize, seed)).collect::<Result<Vec<_>>>()?;
        let mut state = StitchState::new(s.pre.clone());
        for (step, l) in localized.iter().enumerate() {
            state.add(&task_id(step), l.sparse.clone())?;
            if step + 1 < cfg.continual_initial.min(s.n_tasks()) {
                continue;
            }
            let merged = state.merged()?;
            let identical = merged == state.restitch_from_scratch()?.0;
            all_identical &= identical;
            let accs = (0..=step)
                .map(|k| evaluate(&s.arch, &merged, &s.data.tasks[k].test))
                .collect::<Result<Vec<_>>>()?;
            t.push(vec![
                seed.to_string(),
                step.to_string(),
                task_id(step),
                (step + 1).to_string(),
                l.sparse.nnz().to_string(),
                state.weights().union_support().to_string(),
                identical.to_string(),
                fmt_f64(mean(&accs)),
            ]);
        }
    }
    save_rows(out, "continual.csv", t, "lns", cfg, &mut files)?;
    Ok((files, json!({ "all_steps_identical_to_scratch": all_identical })))
}

fn retention(cfg: &BundleConfig, out: &Path) -> Result<Output> {
    let mut files = Vec::new();
    let mut t = Table::new(["seed", "method", "avg_acc", "pre_acc", "merged_acc", "delta", "union_support_fraction"]);
    let mut deltas: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for item in suites(cfg) {
        let (seed, s) = item?;
        for name in Method::NAMES {
            let method = match Method::default_for(name)? {
                Method::Lns { .. } => Method::Lns { localize: cfg.localize.clone() },
                Method::LnsDataless { .. } => Method::LnsDataless { k_percent: cfg.dataless_percent },
                m => m,
            };
            let o = s.merge(&method, seed)?;
            let r = retention_check(&s.arch, &s.pre, &o.merged, &s.data.pretrain.test)?;
            deltas.entry(name.to_string()).or_default().push(r.delta);
            t.push(vec![
                seed.to_string(),
                name.into(),
                fmt_f64(o.report.avg_acc),
                fmt_f64(r.pre_acc),
                fmt_f64(r.merged_acc),
                fmt_f64(r.delta),
                fmt_f64(o.report.union_support_fraction),
            ]);
        }
    }
    save_rows(out, "retention.csv", t, "lns", cfg, &mut files)?;
    let medians: BTreeMap<String, f64> = deltas.iter().map(|(k, v)| (k.clone(), median(v))).collect();
    Ok((files, json!({ "median_delta": medians })))
}
