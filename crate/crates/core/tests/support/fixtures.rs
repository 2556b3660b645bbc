use rand::Rng;

use lns_core::{ParamSet, Tensor};

pub fn random_set(rng: &mut impl Rng, shapes: &[(&str, Vec<usize>)], scale: f32) -> ParamSet {
    ParamSet::new(
        shapes
            .iter()
            .map(|(n, s)| {
                let numel = s.iter().product();
                Tensor::new(*n, s.clone(), (0..numel).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

pub fn flat(p: &ParamSet) -> Vec<f32> {
    p.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

/// Finetuned copies: pre plus a small perturbation.
pub fn finetunes(rng: &mut impl Rng, pre: &ParamSet, n: usize) -> Vec<ParamSet> {
    (0..n)
        .map(|_| {
            let data = pre
                .tensors()
                .iter()
                .map(|t| t.data.iter().map(|&v| v + rng.random_range(-0.05f32..0.05)).collect())
                .collect();
            pre.with_data(data).unwrap()
        })
        .collect()
}
