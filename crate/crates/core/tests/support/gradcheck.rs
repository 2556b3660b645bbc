//! Analytic gradients against central finite differences in f64.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use lns_core::localize::{default_maskable, MaskObjective};
use lns_core::rng::substream;
use lns_core::toy::data::random_examples;
use lns_core::toy::model::{mean_loss_f64, relu_pattern_f64};
use lns_core::toy::{backward, Examples, ParamKind, ToyArch};
use lns_core::{ParamSet, TaskVector};

pub const EPS: f64 = 1e-3;
pub const PER_KIND: usize = 120;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn setup() -> (ToyArch, ParamSet, Examples) {
    let arch = ToyArch::default();
    let mut rng = substream(11, "grad-check");
    let mut p = arch.init(&mut rng);
    // move LayerNorm params off their 1/0 init so every kind has generic gradients
    let data = p
        .tensors()
        .iter()
        .map(|t| t.data.iter().map(|&v| v + rng.random_range(-0.2f32..0.2)).collect())
        .collect();
    p = p.with_data(data).unwrap();
    let batch = random_examples(&mut rng, arch.d_in, 24, arch.classes);
    (arch, p, batch)
}

/// Up to `PER_KIND` random `(tensor, index)` coordinates for every parameter kind.
fn coordinates(arch: &ToyArch, p: &ParamSet, seed: u64) -> BTreeMap<ParamKind, Vec<(usize, usize)>> {
    let mut all: BTreeMap<ParamKind, Vec<(usize, usize)>> = BTreeMap::new();
    for (ti, t) in p.tensors().iter().enumerate() {
        let kind = arch.kind_of(&t.name).unwrap();
        all.entry(kind).or_default().extend((0..t.numel()).map(|j| (ti, j)));
    }
    let mut rng = substream(seed, "coords");
    all.into_iter()
        .map(|(k, v)| {
            let n = PER_KIND.min(v.len());
            let picked = sample(&mut rng, v.len(), n).into_iter().map(|i| v[i]).collect();
            (k, picked)
        })
        .collect()
}

fn to64(p: &ParamSet) -> Vec<Vec<f64>> {
    p.tensors().iter().map(|t| t.data.iter().map(|&v| v as f64).collect()).collect()
}

/// Per parameter kind: smooth coordinates checked and the worst relative error.
pub type KindReport = BTreeMap<ParamKind, (usize, f64)>;

pub fn model_loss_report() -> KindReport {
    let (arch, p, batch) = setup();
    let grad = backward(&arch, &p, &batch).unwrap();
    let w = to64(&p);
    let base_pattern = relu_pattern_f64(&arch, &p, &w, &batch).unwrap();
    let mut report = KindReport::new();
    for (kind, coords) in coordinates(&arch, &p, 1) {
        let (mut checked, mut worst) = (0, 0.0f64);
        for (ti, j) in coords {
            let mut plus = w.clone();
            plus[ti][j] += EPS;
            let mut minus = w.clone();
            minus[ti][j] -= EPS;
            // a ReLU switching inside the stencil makes the loss non-smooth there
            if relu_pattern_f64(&arch, &p, &plus, &batch).unwrap() != base_pattern
                || relu_pattern_f64(&arch, &p, &minus, &batch).unwrap() != base_pattern
            {
                continue;
            }
            let numeric = (mean_loss_f64(&arch, &p, &plus, &batch).unwrap() - mean_loss_f64(&arch, &p, &minus, &batch).unwrap()) / (2.0 * EPS);
            let analytic = grad.tensors()[ti].data[j] as f64;
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
        report.insert(kind, (checked, worst));
    }
    report
}

pub fn mask_objective_report() -> KindReport {
    let (arch, pre, batch) = setup();
    let mut rng = substream(5, "tau");
    let tau = pre.with_data(pre.tensors().iter().map(|t| (0..t.numel()).map(|_| rng.random_range(-0.3f32..0.3)).collect()).collect()).unwrap();
    let tv = TaskVector::new(tau, pre.fingerprint());
    let maskable = default_maskable(&pre);
    let obj = MaskObjective::new(&arch, &pre, &tv, &maskable, 1e-3).unwrap();
    let scores: Vec<Option<Vec<f64>>> = pre
        .tensors()
        .iter()
        .map(|t| Some((0..t.numel()).map(|_| rng.random_range(-3.0..3.0)).collect()))
        .collect();
    let all: Vec<usize> = (0..batch.len()).collect();
    let (_, grads) = obj.value_and_grad(&scores, &batch, &all);

    // theta = pre + sigmoid(S) * tau, rebuilt independently for the ReLU pattern check
    let theta = |s: &[Option<Vec<f64>>]| -> Vec<Vec<f64>> {
        pre.tensors()
            .iter()
            .zip(tv.delta.tensors())
            .zip(s)
            .map(|((p, t), s)| {
                let s = s.as_ref().unwrap();
                p.data.iter().zip(&t.data).zip(s).map(|((&p, &t), &s)| p as f64 + t as f64 / (1.0 + (-s).exp())).collect()
            })
            .collect()
    };
    let base_pattern = relu_pattern_f64(&arch, &pre, &theta(&scores), &batch).unwrap();
    let mut report = KindReport::new();
    for (kind, coords) in coordinates(&arch, &pre, 2) {
        let (mut checked, mut worst) = (0, 0.0f64);
        for (ti, j) in coords {
            let mut plus = scores.clone();
            plus[ti].as_mut().unwrap()[j] += EPS;
            let mut minus = scores.clone();
            minus[ti].as_mut().unwrap()[j] -= EPS;
            if relu_pattern_f64(&arch, &pre, &theta(&plus), &batch).unwrap() != base_pattern
                || relu_pattern_f64(&arch, &pre, &theta(&minus), &batch).unwrap() != base_pattern
            {
                continue;
            }
            let numeric = (obj.value(&plus, &batch, &all) - obj.value(&minus, &batch, &all)) / (2.0 * EPS);
            let analytic = grads[ti].as_ref().unwrap()[j];
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
        report.insert(kind, (checked, worst));
    }
    report
}
