//! Finding where a task vector's skill lives.
//!
//! Two routes produce a binary [`Mask`]:
//!
//! * [`dataless_localize`] keeps the globally largest-magnitude coordinates of the
//!   task vector.
//! * [`train_mask`] relaxes the mask to `sigmoid(S)` and runs SGD on
//!   `loss(pre + sigmoid(S) * tau) + lambda * sum(sigmoid(S))` over a few labelled
//!   shots, starting from the dataless mask, then rounds `sigmoid(S) > 0.5`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pset::{ParamSet, TaskVector, Tensor};
use crate::sparse::{Mask, MaskTensor};
use crate::toy::data::Examples;
use crate::toy::model::{Layout, Net, ToyArch};
use crate::toy::train::LossContext;

/// Tensors eligible for masking by default: everything not tagged "embedding".
pub fn default_maskable(layout: &ParamSet) -> BTreeSet<String> {
    layout
        .names()
        .filter(|n| !n.contains("embedding"))
        .map(str::to_string)
        .collect()
}

/// Real-valued mask logits over the maskable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    /// Target active fraction in (0, 1]; also sizes the dataless initial mask.
    pub sparsity: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Labelled examples per class.
    pub shots: usize,
    pub batch_size: usize,
    pub s_high: f64,
    pub s_low: f64,
    /// `None`: [`default_maskable`].
    pub maskable: Option<BTreeSet<String>>,
    pub lambda_autosearch: bool,
    pub autosearch_tolerance: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.01,
            lambda: 1e-3,
            lr: 1000.0,
            epochs: 10,
            shots: 64,
            batch_size: 16,
            s_high: 3.0,
            s_low: 0.0,
            maskable: None,
            lambda_autosearch: false,
            autosearch_tolerance: 0.25,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!("sparsity {} not in (0, 1]", self.sparsity)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("need lr > 0, epochs >= 1, batch_size >= 1".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        Ok(())
    }

    pub fn maskable_for(&self, layout: &ParamSet) -> BTreeSet<String> {
        self.maskable.clone().unwrap_or_else(|| default_maskable(layout))
    }
}

/// Keeps exactly `round(k_percent / 100 * N)` maskable coordinates with the largest
/// `|tau|`; ties go to the earliest `(tensor name, index)`.
pub fn dataless_localize(tv: &TaskVector, k_percent: f64, maskable: &BTreeSet<String>) -> Result<Mask> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("k_percent {k_percent} not in (0, 100]")));
    }
    let mut mask = Mask::zeros(&tv.delta, Some(maskable));
    let total = mask.total_maskable();
    if total == 0 {
        return Err(Error::Empty("no maskable parameters".into()));
    }
    let keep = ((k_percent / 100.0 * total as f64).round() as usize).min(total);
    if keep == 0 {
        return Ok(mask);
    }
    let mut candidates: Vec<(f32, u32, u32)> = Vec::with_capacity(total);
    for (ti, t) in tv.delta.tensors().iter().enumerate() {
        if mask.is_maskable(&t.name) {
            candidates.extend(t.data.iter().enumerate().map(|(j, v)| (v.abs(), ti as u32, j as u32)));
        }
    }
    let order = |a: &(f32, u32, u32), b: &(f32, u32, u32)| {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if keep < candidates.len() {
        candidates.select_nth_unstable_by(keep - 1, order);
    }
    for &(_, ti, j) in &candidates[..keep] {
        mask.tensors[ti as usize].set(j as usize, true);
    }
    Ok(mask)
}

/// Bit is on iff `sigmoid(S) > 0.5`, i.e. `S > 0`; `S == 0` stays off.
pub fn round_mask(s: &ScoreVector, layout: &ParamSet) -> Result<Mask> {
    let maskable: BTreeSet<String> = s.scores.names().map(str::to_string).collect();
    let mut mask = Mask::zeros(layout, Some(&maskable));
    for st in s.scores.tensors() {
        let ti = layout
            .index_of(&st.name)
            .ok_or_else(|| Error::mismatch(&st.name, "score tensor missing from layout"))?;
        let mt: &mut MaskTensor = &mut mask.tensors[ti];
        if mt.numel != st.numel() {
            return Err(Error::mismatch(&st.name, "score numel differs from layout"));
        }
        for (j, &v) in st.data.iter().enumerate() {
            if v > 0.0 {
                mt.set(j, true);
            }
        }
    }
    Ok(mask)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Objective state shared by training and gradient checks. Scores are held in f64,
/// one buffer per tensor of the full layout (`None` for non-maskable tensors).
pub struct MaskObjective<'a> {
    arch: &'a ToyArch,
    layout: Layout,
    template: &'a ParamSet,
    pre: Vec<Vec<f64>>,
    tau: Vec<Vec<f64>>,
    maskable: Vec<bool>,
    pub lambda: f64,
}

impl<'a> MaskObjective<'a> {
    pub fn new(arch: &'a ToyArch, pre: &'a ParamSet, tv: &TaskVector, maskable: &BTreeSet<String>, lambda: f64) -> Result<Self> {
        tv.check_base(pre)?;
        pre.check_layout(&tv.delta)?;
        let layout = Layout::resolve(arch, pre)?;
        let to64 = |p: &ParamSet| -> Vec<Vec<f64>> {
            p.tensors().iter().map(|t| t.data.iter().map(|&v| v as f64).collect()).collect()
        };
        Ok(Self {
            arch,
            layout,
            template: pre,
            pre: to64(pre),
            tau: to64(&tv.delta),
            maskable: pre.tensors().iter().map(|t| maskable.contains(&t.name)).collect(),
            lambda,
        })
    }

    /// Scores initialised from a binary mask: `s_high` where active, `s_low` elsewhere.
    pub fn init_scores(&self, init: &Mask, s_high: f64, s_low: f64) -> Vec<Option<Vec<f64>>> {
        init.tensors
            .iter()
            .zip(&self.maskable)
            .map(|(mt, &on)| on.then(|| (0..mt.numel).map(|j| if mt.get(j) { s_high } else { s_low }).collect()))
            .collect()
    }

    fn theta(&self, scores: &[Option<Vec<f64>>]) -> Vec<Vec<f64>> {
        self.pre
            .iter()
            .zip(&self.tau)
            .zip(scores)
            .map(|((p, t), s)| match s {
                Some(s) => p.iter().zip(t).zip(s).map(|((p, t), s)| p + sigmoid(*s) * t).collect(),
                None => p.clone(),
            })
            .collect()
    }

    fn l1(&self, scores: &[Option<Vec<f64>>]) -> f64 {
        scores.iter().flatten().flatten().map(|&s| sigmoid(s)).sum()
    }

    /// Full objective on `indices` of `data`: mean loss plus the L1 term.
    pub fn value(&self, scores: &[Option<Vec<f64>>], data: &Examples, indices: &[usize]) -> f64 {
        let net = Net::from_f64(self.arch, self.layout.clone(), self.theta(scores));
        net.run(data, indices, false).loss_sum / indices.len() as f64 + self.lambda * self.l1(scores)
    }

    /// Objective value and its gradient with respect to every score.
    pub fn value_and_grad(&self, scores: &[Option<Vec<f64>>], data: &Examples, indices: &[usize]) -> (f64, Vec<Option<Vec<f64>>>) {
        let net = Net::from_f64(self.arch, self.layout.clone(), self.theta(scores));
        let out = net.run(data, indices, true);
        let n = indices.len() as f64;
        let grad_theta = out.grad_sum.expect("requested");
        let grads = scores
            .iter()
            .zip(&grad_theta)
            .zip(&self.tau)
            .map(|((s, g), t)| {
                s.as_ref().map(|s| {
                    s.iter()
                        .zip(g)
                        .zip(t)
                        .map(|((&s, &g), &t)| {
                            let sig = sigmoid(s);
                            let dsig = sig * (1.0 - sig);
                            (g / n) * t * dsig + self.lambda * dsig
                        })
                        .collect()
                })
            })
            .collect();
        (out.loss_sum / n + self.lambda * self.l1(scores), grads)
    }

    pub fn to_score_vector(&self, scores: &[Option<Vec<f64>>]) -> Result<ScoreVector> {
        let tensors = self
            .template
            .tensors()
            .iter()
            .zip(scores)
            .filter_map(|(t, s)| {
                s.as_ref()
                    .map(|s| Tensor::new(t.name.clone(), t.shape.clone(), s.iter().map(|&v| v as f32).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreVector {
            scores: ParamSet::new(tensors)?,
        })
    }
}

/// Trains mask scores on `ctx` starting from the dataless mask at `cfg.sparsity`.
pub fn train_mask(tv: &TaskVector, pre: &ParamSet, ctx: &LossContext, cfg: &LocalizeConfig) -> Result<(ScoreVector, Mask)> {
    cfg.validate()?;
    if ctx.data.is_empty() {
        return Err(Error::Empty("no shots to train the mask on".into()));
    }
    let maskable = cfg.maskable_for(pre);
    let objective = MaskObjective::new(&ctx.arch, pre, tv, &maskable, cfg.lambda)?;
    let init = dataless_localize(tv, cfg.sparsity * 100.0, &maskable)?;
    let mut scores = objective.init_scores(&init, cfg.s_high, cfg.s_low);
    for epoch in 0..cfg.epochs {
        for batch in ctx.batches(epoch) {
            let (value, grads) = objective.value_and_grad(&scores, &ctx.data, &batch);
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            for (s, g) in scores.iter_mut().zip(grads) {
                if let (Some(s), Some(g)) = (s.as_mut(), g) {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= cfg.lr * gi;
                    }
                }
            }
        }
        // scores are stored as f32 afterwards, so overflowing that range counts too
        if scores.iter().flatten().flatten().any(|s| !(*s as f32).is_finite()) {
            return Err(Error::Divergence { epoch });
        }
    }
    let sv = objective.to_score_vector(&scores)?;
    let mask = round_mask(&sv, pre)?.with_maskable(&maskable)?;
    Ok((sv, mask))
}

pub const LAMBDA_MIN: f64 = 1e-9;
pub const LAMBDA_MAX: f64 = 1e-1;
pub const AUTOSEARCH_MAX_ITERS: usize = 12;

/// Outcome of the λ search, including every probe made.
#[derive(Debug, Clone, Serialize)]
pub struct AutosearchTrace {
    pub probes: Vec<(f64, f64)>,
    pub within_tolerance: bool,
}

/// Bisects `log(lambda)` in `[1e-9, 1e-1]` until the trained mask's sparsity lands
/// within `target * (1 ± tol)`. Returns the closest probe if 12 iterations do not suffice.
pub fn lambda_autosearch(
    tv: &TaskVector,
    pre: &ParamSet,
    ctx: &LossContext,
    cfg: &LocalizeConfig,
) -> Result<(LocalizeConfig, AutosearchTrace)> {
    cfg.validate()?;
    let target = cfg.sparsity;
    if target >= 1.0 {
        let out = LocalizeConfig { lambda: 0.0, ..cfg.clone() };
        return Ok((out, AutosearchTrace { probes: vec![], within_tolerance: true }));
    }
    let (lo_ok, hi_ok) = (target * (1.0 - cfg.autosearch_tolerance), target * (1.0 + cfg.autosearch_tolerance));
    let mut probes = Vec::new();
    let mut probe = |lambda: f64| -> Result<f64> {
        let c = LocalizeConfig { lambda, ..cfg.clone() };
        let s = train_mask(tv, pre, ctx, &c)?.1.sparsity();
        probes.push((lambda, s));
        Ok(s)
    };
    let s_low_lambda = probe(LAMBDA_MIN)?;
    let s_high_lambda = probe(LAMBDA_MAX)?;
    if s_low_lambda < lo_ok || s_high_lambda > hi_ok {
        return Err(Error::NoLambdaBracket {
            low_lambda_sparsity: s_low_lambda,
            high_lambda_sparsity: s_high_lambda,
            target,
        });
    }
    let in_band = |s: f64| s >= lo_ok && s <= hi_ok;
    let mut best = if (s_low_lambda - target).abs() <= (s_high_lambda - target).abs() {
        (LAMBDA_MIN, s_low_lambda)
    } else {
        (LAMBDA_MAX, s_high_lambda)
    };
    let (mut lo, mut hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
    if !in_band(best.1) {
        for _ in 0..AUTOSEARCH_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            let s = probe(mid.exp())?;
            if (s - target).abs() < (best.1 - target).abs() {
                best = (mid.exp(), s);
            }
            if in_band(s) {
                break;
            }
            // larger lambda, sparser mask
            if s > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let within_tolerance = in_band(best.1);
    Ok((
        LocalizeConfig { lambda: best.0, ..cfg.clone() },
        AutosearchTrace { probes, within_tolerance },
    ))
}

/// Trained localization with optional λ autosearch; the returned config holds the λ used.
pub fn localize_trained(
    tv: &TaskVector,
    pre: &ParamSet,
    ctx: &LossContext,
    cfg: &LocalizeConfig,
) -> Result<(ScoreVector, Mask, LocalizeConfig)> {
    let cfg = if cfg.lambda_autosearch {
        lambda_autosearch(tv, pre, ctx, cfg)?.0
    } else {
        cfg.clone()
    };
    let (s, m) = train_mask(tv, pre, ctx, &cfg)?;
    Ok((s, m, cfg))
}
