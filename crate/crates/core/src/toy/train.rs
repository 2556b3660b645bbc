use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pset::ParamSet;
use crate::rng::substream;
use crate::toy::data::Examples;
use crate::toy::model::{check_dim, Layout, Net, ToyArch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 30,
            batch_size: 16,
        }
    }
}

/// Minibatches of `0..n` for one epoch: a pure function of `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &format!("epoch{epoch}")));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// The loss `ℓ(θ)` of one task: a fixed example set iterated in seeded minibatches.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub arch: ToyArch,
    pub data: Examples,
    pub batch_size: usize,
    pub seed: u64,
}

impl LossContext {
    pub fn new(arch: ToyArch, data: Examples, batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("loss context has no examples".into()));
        }
        check_dim(&arch, &data)?;
        Ok(Self {
            arch,
            data,
            batch_size,
            seed,
        })
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        epoch_batches(self.data.len(), self.batch_size, self.seed, epoch)
    }
}

/// Plain minibatch SGD on the mean cross-entropy.
pub fn sgd_finetune(arch: &ToyArch, init: &ParamSet, data: &Examples, cfg: &SgdConfig, seed: u64) -> Result<ParamSet> {
    let layout = Layout::resolve(arch, init)?;
    if cfg.epochs == 0 {
        return Ok(init.clone());
    }
    if data.is_empty() {
        return Err(Error::Empty("training set has no examples".into()));
    }
    check_dim(arch, data)?;
    let mut weights: Vec<Vec<f32>> = init.tensors().iter().map(|t| t.data.clone()).collect();
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, seed, epoch) {
            let out = Net::from_f32(arch, layout.clone(), &weights).run(data, &batch, true);
            if !out.loss_sum.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let step = cfg.lr / batch.len() as f64;
            for (w, g) in weights.iter_mut().zip(out.grad_sum.expect("requested")) {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= (step * gi) as f32;
                }
            }
        }
        if weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
    }
    init.with_data(weights)
}

/// Fraction of correct argmax predictions.
pub fn evaluate(arch: &ToyArch, params: &ParamSet, split: &Examples) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split has no examples".into()));
    }
    check_dim(arch, split)?;
    let net = Net::new(arch, params)?;
    let correct = (0..split.len())
        .filter(|&i| crate::toy::model::argmax(&net.logits(split.row(i))) == split.labels[i])
        .count();
    Ok(correct as f64 / split.len() as f64)
}
