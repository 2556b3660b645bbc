//! Reference mergers: simple averaging, task arithmetic, TIES, diagonal Fisher
//! and RegMean.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::localize::dataless_localize;
use crate::pset::{add_rounded, apply_delta, ParamSet, TaskVector, Tensor};
use crate::toy::model::{check_dim, Layout, Net, ToyArch};
use crate::toy::data::Examples;

pub const TA_DEFAULT_ALPHA: f64 = 0.4;
pub const TIES_DEFAULT_K: f64 = 20.0;
pub const TIES_DEFAULT_ALPHA: f64 = 1.0;
pub const FISHER_DEFAULT_EPS: f64 = 1e-8;
pub const REGMEAN_DEFAULT_RIDGE: f64 = 1e-3;

/// `{0.1, 0.2, ..., 1.0}`.
pub fn alpha_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

fn check_models(models: &[ParamSet]) -> Result<&ParamSet> {
    let first = models.first().ok_or_else(|| Error::Empty("no models to merge".into()))?;
    for m in &models[1..] {
        first.check_layout(m)?;
    }
    Ok(first)
}

/// Coordinatewise mean, accumulated in f64 in list order.
pub fn simple_average(models: &[ParamSet]) -> Result<ParamSet> {
    let first = check_models(models)?;
    let n = models.len() as f64;
    let data = (0..first.len())
        .map(|ti| {
            (0..first.tensors()[ti].numel())
                .map(|k| (models.iter().fold(-0.0f64, |acc, m| acc + m.tensors()[ti].data[k] as f64) / n) as f32)
                .collect()
        })
        .collect();
    first.with_data(data)
}

/// `pre + alpha * sum(tau_i)`.
pub fn task_arithmetic(pre: &ParamSet, tvs: &[TaskVector], alpha: f64) -> Result<ParamSet> {
    let scaled: Vec<(f32, &TaskVector)> = tvs.iter().map(|t| (alpha as f32, t)).collect();
    apply_delta(pre, &scaled)
}

/// Picks the grid alpha with the best score; ties go to the smaller alpha.
pub fn task_arithmetic_sweep<F>(pre: &ParamSet, tvs: &[TaskVector], grid: &[f64], mut score: F) -> Result<(f64, Vec<(f64, f64)>)>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::InvalidArgument("alpha grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &a in grid {
        let s = score(&task_arithmetic(pre, tvs, a)?)?;
        if s > best.1 {
            best = (a, s);
        }
        rows.push((a, s));
    }
    Ok((best.0, rows))
}

fn check_tvs<'a>(pre: &ParamSet, tvs: &'a [TaskVector]) -> Result<&'a TaskVector> {
    let first = tvs.first().ok_or_else(|| Error::Empty("no task vectors".into()))?;
    for t in tvs {
        t.check_base(pre)?;
        pre.check_layout(&t.delta)?;
    }
    Ok(first)
}

/// TIES step 1: keep each task's global top-k% coordinates by magnitude.
pub fn ties_trim(tvs: &[TaskVector], k_percent: f64) -> Result<Vec<TaskVector>> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("k_percent must be in (0, 100], got {k_percent}")));
    }
    tvs.iter()
        .map(|tv| {
            let all: BTreeSet<String> = tv.delta.names().map(str::to_string).collect();
            let mask = dataless_localize(tv, k_percent, &all)?;
            let data = tv
                .delta
                .tensors()
                .iter()
                .zip(&mask.tensors)
                .map(|(t, m)| t.data.iter().enumerate().map(|(i, &v)| if m.get(i) { v } else { 0.0 }).collect())
                .collect();
            Ok(TaskVector::new(tv.delta.with_data(data)?, tv.base_fingerprint))
        })
        .collect()
}

/// TIES step 2: sign of the total trimmed mass per coordinate (0 on an exact zero total).
pub fn ties_elect(trimmed: &[TaskVector]) -> Vec<Vec<i8>> {
    let Some(first) = trimmed.first() else { return Vec::new() };
    (0..first.delta.len())
        .map(|ti| {
            (0..first.delta.tensors()[ti].numel())
                .map(|k| {
                    let total: f64 = trimmed.iter().map(|t| t.delta.tensors()[ti].data[k] as f64).sum();
                    if total > 0.0 {
                        1
                    } else if total < 0.0 {
                        -1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect()
}

/// Trim, elect, disjoint mean, then `pre + alpha * mean`.
pub fn ties_merge(pre: &ParamSet, tvs: &[TaskVector], k_percent: f64, alpha: f64) -> Result<ParamSet> {
    check_tvs(pre, tvs)?;
    let trimmed = ties_trim(tvs, k_percent)?;
    let signs = ties_elect(&trimmed);
    let data = pre
        .tensors()
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            t.data
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let s = signs[ti][k];
                    if s == 0 {
                        return p;
                    }
                    let (sum, n) = trimmed
                        .iter()
                        .map(|tv| tv.delta.tensors()[ti].data[k])
                        .filter(|&v| (v > 0.0 && s > 0) || (v < 0.0 && s < 0))
                        .fold((-0.0f64, 0usize), |(acc, n), v| (acc + v as f64, n + 1));
                    add_rounded(p, alpha * sum / n as f64)
                })
                .collect()
        })
        .collect();
    pre.with_data(data)
}

/// Empirical diagonal Fisher: mean squared per-example gradient of the true-label log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub values: ParamSet,
    pub samples: usize,
}

impl FisherDiag {
    pub fn new(values: ParamSet, samples: usize) -> Result<Self> {
        if let Some(t) = values.tensors().iter().find(|t| t.data.iter().any(|&v| v < 0.0)) {
            return Err(Error::InvalidArgument(format!("fisher tensor `{}` has negative entries", t.name)));
        }
        Ok(Self { values, samples })
    }
}

pub fn fisher_estimate(arch: &ToyArch, params: &ParamSet, data: &Examples, n_samples: usize) -> Result<FisherDiag> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("fisher data has no examples".into()));
    }
    check_dim(arch, data)?;
    let net = Net::new(arch, params)?;
    let n = n_samples.min(data.len());
    let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for i in 0..n {
        let g = net.run(data, &[i], true).grad_sum.expect("requested");
        for (a, gt) in acc.iter_mut().zip(g) {
            for (ai, gi) in a.iter_mut().zip(gt) {
                *ai += gi * gi;
            }
        }
    }
    let values = params.with_data(acc.into_iter().map(|a| a.into_iter().map(|v| (v / n as f64) as f32).collect()).collect())?;
    FisherDiag::new(values, n)
}

/// `sum((F_i + eps) theta_i) / sum(F_i + eps)`; coordinates with no Fisher mass fall back to the mean.
pub fn fisher_merge(models: &[ParamSet], fishers: &[FisherDiag], eps: f64) -> Result<ParamSet> {
    let first = check_models(models)?;
    if fishers.len() != models.len() {
        return Err(Error::InvalidArgument(format!("{} models but {} fishers", models.len(), fishers.len())));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    for f in fishers {
        first.check_layout(&f.values)?;
    }
    let data = (0..first.len())
        .map(|ti| {
            (0..first.tensors()[ti].numel())
                .map(|k| {
                    let (num, den) = models.iter().zip(fishers).fold((0.0f64, 0.0f64), |(num, den), (m, f)| {
                        let w = f.values.tensors()[ti].data[k] as f64 + eps;
                        (num + w * m.tensors()[ti].data[k] as f64, den + w)
                    });
                    (num / den) as f32
                })
                .collect()
        })
        .collect();
    first.with_data(data)
}

/// `G = [X, 1]^T [X, 1]` for the inputs of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub layer: String,
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub data: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    pub layers: Vec<GramMatrix>,
    pub samples: usize,
}

impl GramSet {
    /// `gram.{layer}` tensors of shape `[dim, dim]`, rounded to f32.
    pub fn to_pset(&self) -> Result<ParamSet> {
        let tensors = self
            .layers
            .iter()
            .map(|g| Tensor::new(format!("gram.{}", g.layer), vec![g.dim, g.dim], g.data.iter().map(|&v| v as f32).collect()))
            .collect::<Result<_>>()?;
        ParamSet::new(tensors)
    }

    pub fn from_pset(p: &ParamSet, samples: usize) -> Result<GramSet> {
        let layers = p
            .tensors()
            .iter()
            .map(|t| {
                let layer = t
                    .name
                    .strip_prefix("gram.")
                    .ok_or_else(|| Error::mismatch(&t.name, "expected a `gram.` prefix"))?;
                match t.shape[..] {
                    [r, c] if r == c => Ok(GramMatrix {
                        layer: layer.to_string(),
                        dim: r,
                        data: t.data.iter().map(|&v| v as f64).collect(),
                    }),
                    _ => Err(Error::mismatch(&t.name, "gram must be square")),
                }
            })
            .collect::<Result<_>>()?;
        Ok(GramSet { layers, samples })
    }
}

/// Gram matrices of the inputs to every affine layer over the first `n_samples` examples.
pub fn grams(arch: &ToyArch, params: &ParamSet, data: &Examples, n_samples: usize) -> Result<GramSet> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("gram data has no examples".into()));
    }
    check_dim(arch, data)?;
    let net = Net::new(arch, params)?;
    let names = arch.affine_layers();
    let n = n_samples.min(data.len());
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; names.len()];
    for i in 0..n {
        for (a, mut x) in acc.iter_mut().zip(net.affine_inputs(data.row(i))) {
            x.push(1.0);
            let d = x.len();
            let g = a.get_or_insert_with(|| vec![0.0; d * d]);
            for r in 0..d {
                for c in 0..d {
                    g[r * d + c] += x[r] * x[c];
                }
            }
        }
    }
    let layers = names
        .into_iter()
        .zip(acc)
        .map(|(layer, g)| {
            let data = g.expect("n >= 1");
            let dim = (data.len() as f64).sqrt() as usize;
            GramMatrix { layer, dim, data }
        })
        .collect();
    Ok(GramSet { layers, samples: n })
}

/// Affine layers are the `{layer}.w` / `{layer}.b` pairs with shapes `[out, in]` / `[out]`.
fn affine_pairs(p: &ParamSet) -> Vec<(String, usize, usize)> {
    p.tensors()
        .iter()
        .filter_map(|t| {
            let layer = t.name.strip_suffix(".w")?;
            let [out, inp] = t.shape[..] else { return None };
            let b = p.get(&format!("{layer}.b"))?;
            (b.shape == [out]).then(|| (layer.to_string(), out, inp))
        })
        .collect()
}

/// Per affine layer solve `(sum G_i + ridge I) W = sum G_i W_i`; everything else is averaged.
pub fn regmean_merge(models: &[ParamSet], grams: &[GramSet], ridge_rel: f64) -> Result<ParamSet> {
    let first = check_models(models)?;
    if grams.len() != models.len() {
        return Err(Error::InvalidArgument(format!("{} models but {} gram sets", models.len(), grams.len())));
    }
    if ridge_rel.is_nan() || ridge_rel < 0.0 {
        return Err(Error::InvalidArgument(format!("ridge_rel must be >= 0, got {ridge_rel}")));
    }
    let mut merged: Vec<Vec<f32>> = simple_average(models)?.into_tensors().into_iter().map(|t| t.data).collect();
    for (layer, out, inp) in affine_pairs(first) {
        let dim = inp + 1;
        let mut g_sum = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DMatrix::<f64>::zeros(dim, out);
        for (m, gs) in models.iter().zip(grams) {
            let g = gs
                .layers
                .iter()
                .find(|g| g.layer == layer)
                .ok_or_else(|| Error::mismatch(&layer, "no gram matrix for affine layer"))?;
            if g.dim != dim {
                return Err(Error::mismatch(&layer, format!("gram dim {} but layer needs {dim}", g.dim)));
            }
            let g = g.to_matrix();
            // augmented weights, transposed: [in + 1, out]
            let (w, b) = (&m.get(&format!("{layer}.w")).expect("pair").data, &m.get(&format!("{layer}.b")).expect("pair").data);
            let wt = DMatrix::from_fn(dim, out, |r, c| if r < inp { w[c * inp + r] as f64 } else { b[c] as f64 });
            rhs += &g * wt;
            g_sum += g;
        }
        let ridge = ridge_rel * g_sum.trace() / dim as f64;
        for i in 0..dim {
            g_sum[(i, i)] += ridge;
        }
        let sol = Cholesky::new(g_sum)
            .ok_or_else(|| Error::Singular { layer: layer.clone() })?
            .solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular { layer });
        }
        let wi = first.index_of(&format!("{layer}.w")).expect("pair");
        let bi = first.index_of(&format!("{layer}.b")).expect("pair");
        for c in 0..out {
            for r in 0..inp {
                merged[wi][c * inp + r] = sol[(r, c)] as f32;
            }
            merged[bi][c] = sol[(inp, c)] as f32;
        }
    }
    first.with_data(merged)
}

/// Resolves that `params` fit `arch`; exposed for callers that mix arch-free mergers with toy models.
pub fn check_arch(arch: &ToyArch, params: &ParamSet) -> Result<()> {
    Layout::resolve(arch, params).map(|_| ())
}
