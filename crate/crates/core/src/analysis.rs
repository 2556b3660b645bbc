//! Reports over merged models and masks: overlap matrices, sweeps, retention
//! and CSV/JSON output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::LocalizeConfig;
use crate::pipeline::{config_hash, mean, BuiltSuite, Localized};
use crate::pset::ParamSet;
use crate::sparse::{mask_apply, mask_jaccard, masked_cosine, Mask, SparseTaskVector};
use crate::stitch::graft;
use crate::toy::data::Examples;
use crate::toy::model::ToyArch;
use crate::toy::train::evaluate;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrices {
    pub jaccard: Vec<Vec<f64>>,
    pub cosine: Vec<Vec<f64>>,
}

/// Jaccard of masks and cosine of masked task vectors for every task pair.
pub fn pairwise_matrices(masks: &[Mask], sparse: &[SparseTaskVector]) -> Result<PairwiseMatrices> {
    if masks.len() != sparse.len() {
        return Err(Error::InvalidArgument(format!("{} masks but {} sparse vectors", masks.len(), sparse.len())));
    }
    let n = masks.len();
    let mut jaccard = vec![vec![0.0; n]; n];
    let mut cosine = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let jv = mask_jaccard(&masks[i], &masks[j])?;
            let cv = masked_cosine(&sparse[i], &sparse[j])?;
            jaccard[i][j] = jv;
            jaccard[j][i] = jv;
            cosine[i][j] = cv;
            cosine[j][i] = cv;
        }
    }
    Ok(PairwiseMatrices { jaccard, cosine })
}

/// Tensor name to `ParamKind` label, for [`crate::sparse::mask_distribution`].
pub fn kind_grouping(arch: &ToyArch) -> BTreeMap<String, String> {
    arch.tensor_specs()
        .into_iter()
        .map(|(name, _, kind)| (name, kind.label().to_string()))
        .collect()
}

/// Tensor name to layer (`block0`, ..., `head`).
pub fn layer_grouping(arch: &ToyArch) -> BTreeMap<String, String> {
    arch.tensor_specs()
        .into_iter()
        .map(|(name, _, _)| {
            let layer = name.split('.').next().unwrap_or(&name).to_string();
            (name, layer)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMethod {
    Trained,
    Dataless,
}

impl SweepMethod {
    pub fn label(self) -> &'static str {
        match self {
            SweepMethod::Trained => "trained",
            SweepMethod::Dataless => "dataless",
        }
    }
}

/// Localizes task `t` at `sparsity`; 0 and 1 are the empty and full masks.
fn localize_at(s: &BuiltSuite, t: usize, sparsity: f64, method: SweepMethod, base: &LocalizeConfig, seed: u64) -> Result<Localized> {
    let maskable = base.maskable_for(&s.pre);
    let fixed = |mask: Mask| -> Result<Localized> {
        let sparse = mask_apply(&mask, &s.tvs[t])?;
        Ok(Localized {
            mask,
            sparse,
            cfg: LocalizeConfig { sparsity, ..base.clone() },
        })
    };
    if sparsity <= 0.0 {
        return fixed(Mask::zeros(&s.pre, Some(&maskable)));
    }
    if sparsity >= 1.0 {
        return fixed(Mask::ones(&s.pre, Some(&maskable)));
    }
    match method {
        SweepMethod::Dataless => s.localize_dataless(t, sparsity * 100.0),
        SweepMethod::Trained => s.localize(t, &LocalizeConfig { sparsity, ..base.clone() }, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub method: String,
    pub sparsity: f64,
    pub seed: u64,
    /// Mean achieved mask sparsity across tasks.
    pub achieved_sparsity: f64,
    pub grafted: Vec<f64>,
    pub merged_avg: f64,
    pub config_hash: String,
}

/// Grafted and stitched accuracy at every grid sparsity (fractions in [0, 1]).
pub fn sparsity_sweep(s: &BuiltSuite, grid: &[f64], method: SweepMethod, base: &LocalizeConfig, seed: u64) -> Result<Vec<SparsityRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sparsity grid is empty".into()));
    }
    grid.iter()
        .map(|&sp| {
            let localized = (0..s.n_tasks())
                .map(|t| localize_at(s, t, sp, method, base, seed))
                .collect::<Result<Vec<_>>>()?;
            let grafted = localized
                .iter()
                .zip(&s.data.tasks)
                .map(|(l, task)| evaluate(&s.arch, &graft(&s.pre, &l.sparse)?, &task.test))
                .collect::<Result<Vec<_>>>()?;
            let (per_task, _) = s.evaluate_all(&s.stitch(&localized)?)?;
            Ok(SparsityRow {
                method: method.label().into(),
                sparsity: sp,
                seed,
                achieved_sparsity: mean(&localized.iter().map(|l| l.mask.sparsity()).collect::<Vec<_>>()),
                grafted,
                merged_avg: mean(&per_task),
                config_hash: config_hash(&(&s.spec, method, base, sp, seed)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotsRow {
    pub shots: usize,
    pub seed: u64,
    pub merged_avg: f64,
    pub achieved_sparsity: f64,
    pub config_hash: String,
}

/// Stitched accuracy of trained localization for each shot count.
pub fn shots_sweep(s: &BuiltSuite, shots: &[usize], base: &LocalizeConfig, seed: u64) -> Result<Vec<ShotsRow>> {
    shots
        .iter()
        .map(|&k| {
            let cfg = LocalizeConfig { shots: k, ..base.clone() };
            let localized = (0..s.n_tasks()).map(|t| s.localize(t, &cfg, seed)).collect::<Result<Vec<_>>>()?;
            let (per_task, _) = s.evaluate_all(&s.stitch(&localized)?)?;
            Ok(ShotsRow {
                shots: k,
                seed,
                merged_avg: mean(&per_task),
                achieved_sparsity: mean(&localized.iter().map(|l| l.mask.sparsity()).collect::<Vec<_>>()),
                config_hash: config_hash(&(&s.spec, &cfg, seed)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub pre_acc: f64,
    pub merged_acc: f64,
    /// `merged_acc - pre_acc`; negative means forgetting.
    pub delta: f64,
}

pub fn retention_check(arch: &ToyArch, pre: &ParamSet, merged: &ParamSet, pretrain_test: &Examples) -> Result<Retention> {
    let pre_acc = evaluate(arch, pre, pretrain_test)?;
    let merged_acc = evaluate(arch, merged, pretrain_test)?;
    Ok(Retention {
        pre_acc,
        merged_acc,
        delta: merged_acc - pre_acc,
    })
}

/// A header plus string records, written as RFC 4180 CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-trip representation, always with a '.' decimal point.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Appends a column holding `value` on every row, unless one named `name` exists.
    pub fn with_column(mut self, name: &str, value: &str) -> Self {
        if !self.header.iter().any(|h| h == name) {
            self.header.push(name.to_string());
            for r in &mut self.rows {
                r.push(value.to_string());
            }
        }
        self
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn task_columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|t| format!("{prefix}task{t}")).collect()
}

pub fn sparsity_table(rows: &[SparsityRow]) -> Table {
    let n = rows.first().map_or(0, |r| r.grafted.len());
    let mut header = vec!["method".to_string(), "sparsity".into(), "seed".into(), "achieved_sparsity".into()];
    header.extend(task_columns("grafted_", n));
    header.extend(["merged_avg".to_string(), "config_hash".into()]);
    let mut t = Table::new(header);
    for r in rows {
        let mut row = vec![r.method.clone(), fmt_f64(r.sparsity), r.seed.to_string(), fmt_f64(r.achieved_sparsity)];
        row.extend(r.grafted.iter().map(|&v| fmt_f64(v)));
        row.extend([fmt_f64(r.merged_avg), r.config_hash.clone()]);
        t.push(row);
    }
    t
}

pub fn shots_table(rows: &[ShotsRow]) -> Table {
    let mut t = Table::new(["shots", "seed", "merged_avg", "achieved_sparsity", "config_hash"]);
    for r in rows {
        t.push(vec![
            r.shots.to_string(),
            r.seed.to_string(),
            fmt_f64(r.merged_avg),
            fmt_f64(r.achieved_sparsity),
            r.config_hash.clone(),
        ]);
    }
    t
}

pub fn matrix_table(m: &[Vec<f64>]) -> Table {
    let mut header = vec!["task".to_string()];
    header.extend(task_columns("", m.len()));
    let mut t = Table::new(header);
    for (i, row) in m.iter().enumerate() {
        let mut r = vec![format!("task{i}")];
        r.extend(row.iter().map(|&v| fmt_f64(v)));
        t.push(r);
    }
    t
}

/// Versioned JSON summary written next to each bundle's CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    pub results: serde_json::Value,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
