//! MLP with LayerNorm blocks and a softmax cross-entropy head.
//!
//! Each block is `affine -> LayerNorm(gain, bias) -> ReLU`; the head is a final
//! affine map to class logits. Parameters are read from a [`ParamSet`] and all
//! arithmetic runs in f64, returning f32 gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pset::{ParamSet, Tensor};
use crate::toy::data::Examples;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArch {
    pub d_in: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: 64,
            blocks: 2,
            classes: 4,
        }
    }
}

/// Which role a tensor plays; used for gradient checks and mask distribution reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    AffineWeight,
    AffineBias,
    LnGain,
    LnBias,
}

impl ParamKind {
    pub fn label(self) -> &'static str {
        match self {
            ParamKind::AffineWeight => "affine.w",
            ParamKind::AffineBias => "affine.b",
            ParamKind::LnGain => "ln.g",
            ParamKind::LnBias => "ln.b",
        }
    }
}

impl ToyArch {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.blocks == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument(format!("all dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn block_in(&self, i: usize) -> usize {
        if i == 0 {
            self.d_in
        } else {
            self.hidden
        }
    }

    /// `(name, shape, kind)` for every tensor, in construction (not canonical) order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = Vec::new();
        for i in 0..self.blocks {
            out.push((format!("block{i}.linear.w"), vec![self.hidden, self.block_in(i)], ParamKind::AffineWeight));
            out.push((format!("block{i}.linear.b"), vec![self.hidden], ParamKind::AffineBias));
            out.push((format!("block{i}.ln.g"), vec![self.hidden], ParamKind::LnGain));
            out.push((format!("block{i}.ln.b"), vec![self.hidden], ParamKind::LnBias));
        }
        out.push(("head.w".into(), vec![self.classes, self.hidden], ParamKind::AffineWeight));
        out.push(("head.b".into(), vec![self.classes], ParamKind::AffineBias));
        out
    }

    /// Names of the affine layers, in forward order, as used by Gram matrices.
    pub fn affine_layers(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.blocks).map(|i| format!("block{i}.linear")).collect();
        v.push("head".into());
        v
    }

    pub fn kind_of(&self, name: &str) -> Option<ParamKind> {
        self.tensor_specs().into_iter().find(|(n, _, _)| n == name).map(|(_, _, k)| k)
    }

    pub fn zeros(&self) -> ParamSet {
        let tensors = self
            .tensor_specs()
            .into_iter()
            .map(|(n, s, _)| Tensor::zeros(n, s))
            .collect();
        ParamSet::new(tensors).expect("zeros are valid")
    }

    /// Gaussian fan-in scaled weights, unit LayerNorm gains, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let tensors = self
            .tensor_specs()
            .into_iter()
            .map(|(name, shape, kind)| {
                let numel: usize = shape.iter().product();
                let data = match kind {
                    ParamKind::AffineWeight => {
                        let normal = Normal::new(0.0, 1.0 / (shape[1] as f64).sqrt()).expect("valid std");
                        (0..numel).map(|_| normal.sample(rng) as f32).collect()
                    }
                    ParamKind::LnGain => vec![1.0; numel],
                    ParamKind::AffineBias | ParamKind::LnBias => vec![0.0; numel],
                };
                Tensor::new(name, shape, data).expect("spec shapes are consistent")
            })
            .collect();
        ParamSet::new(tensors).expect("init values are finite")
    }
}

/// Tensor indices (canonical order) of every parameter, resolved once per call.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    blocks: Vec<[usize; 4]>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    pub fn resolve(arch: &ToyArch, params: &ParamSet) -> Result<Layout> {
        arch.validate()?;
        let expected = arch.tensor_specs();
        if params.len() != expected.len() {
            return Err(Error::mismatch(
                "*",
                format!("architecture has {} tensors, params have {}", expected.len(), params.len()),
            ));
        }
        let find = |name: &str, shape: &[usize]| -> Result<usize> {
            let i = params
                .index_of(name)
                .ok_or_else(|| Error::mismatch(name, "missing from params"))?;
            if params.tensors()[i].shape != shape {
                return Err(Error::mismatch(
                    name,
                    format!("shape {:?}, expected {shape:?}", params.tensors()[i].shape),
                ));
            }
            Ok(i)
        };
        let mut blocks = Vec::with_capacity(arch.blocks);
        for i in 0..arch.blocks {
            blocks.push([
                find(&format!("block{i}.linear.w"), &[arch.hidden, arch.block_in(i)])?,
                find(&format!("block{i}.linear.b"), &[arch.hidden])?,
                find(&format!("block{i}.ln.g"), &[arch.hidden])?,
                find(&format!("block{i}.ln.b"), &[arch.hidden])?,
            ]);
        }
        Ok(Layout {
            blocks,
            head_w: find("head.w", &[arch.classes, arch.hidden])?,
            head_b: find("head.b", &[arch.classes])?,
        })
    }
}

/// Per-example forward cache of one block.
struct BlockCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: f64,
    pre_relu: Vec<f64>,
}

pub(crate) struct Net<'a> {
    arch: &'a ToyArch,
    layout: Layout,
    w: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BatchOutput {
    pub loss_sum: f64,
    pub correct: usize,
    /// Sum (not mean) of per-example gradients, canonical tensor order.
    pub grad_sum: Option<Vec<Vec<f64>>>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            row.iter().zip(x).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

impl<'a> Net<'a> {
    pub fn new(arch: &'a ToyArch, params: &'a ParamSet) -> Result<Self> {
        let layout = Layout::resolve(arch, params)?;
        let w = params
            .tensors()
            .iter()
            .map(|t| t.data.iter().map(|&v| v as f64).collect())
            .collect();
        Ok(Self { arch, layout, w })
    }

    /// Net over f64 weights given in the canonical tensor order `layout` was resolved against.
    pub fn from_f64(arch: &'a ToyArch, layout: Layout, weights: Vec<Vec<f64>>) -> Self {
        Self { arch, layout, w: weights }
    }

    pub fn from_f32(arch: &'a ToyArch, layout: Layout, weights: &[Vec<f32>]) -> Self {
        let w = weights.iter().map(|t| t.iter().map(|&v| v as f64).collect()).collect();
        Self { arch, layout, w }
    }

    fn forward_one(&self, x: &[f32]) -> (Vec<BlockCache>, Vec<f64>, Vec<f64>) {
        let h = self.arch.hidden;
        let mut caches = Vec::with_capacity(self.arch.blocks);
        let mut act: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for idx in &self.layout.blocks {
            let z = affine(&self.w[idx[0]], &self.w[idx[1]], &act, h);
            let mean = z.iter().sum::<f64>() / h as f64;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            let xhat: Vec<f64> = z.iter().map(|v| (v - mean) * inv_std).collect();
            let (g, beta) = (&self.w[idx[2]], &self.w[idx[3]]);
            let pre_relu: Vec<f64> = (0..h).map(|k| g[k] * xhat[k] + beta[k]).collect();
            let next = pre_relu.iter().map(|&v| v.max(0.0)).collect();
            caches.push(BlockCache {
                input: std::mem::replace(&mut act, next),
                xhat,
                inv_std,
                pre_relu,
            });
        }
        let logits = affine(&self.w[self.layout.head_w], &self.w[self.layout.head_b], &act, self.arch.classes);
        (caches, act, logits)
    }

    /// Input vector of every affine layer, in `ToyArch::affine_layers` order.
    pub fn affine_inputs(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let (caches, last, _) = self.forward_one(x);
        let mut out: Vec<Vec<f64>> = caches.into_iter().map(|c| c.input).collect();
        out.push(last);
        out
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        self.forward_one(x).2
    }

    /// Loss (and optionally gradient) summed over `indices` of `data`.
    pub fn run(&self, data: &Examples, indices: &[usize], want_grad: bool) -> BatchOutput {
        let mut grad_sum: Option<Vec<Vec<f64>>> =
            want_grad.then(|| self.w.iter().map(|t| vec![0.0; t.len()]).collect());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for &i in indices {
            let (x, label) = (data.row(i), data.labels[i]);
            let (caches, last, logits) = self.forward_one(x);
            let pred = argmax(&logits);
            let max = logits[pred];
            // ln_1p keeps precision when one logit dominates
            let rest: f64 = logits.iter().enumerate().filter(|&(j, _)| j != pred).map(|(_, l)| (l - max).exp()).sum();
            let lse = max + rest.ln_1p();
            loss_sum += (max - logits[label]) + rest.ln_1p();
            if pred == label {
                correct += 1;
            }
            if let Some(grads) = grad_sum.as_mut() {
                let dlogits: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(c, l)| (l - lse).exp() - if c == label { 1.0 } else { 0.0 })
                    .collect();
                self.backward_one(&caches, &last, &dlogits, grads);
            }
        }
        BatchOutput {
            loss_sum,
            correct,
            grad_sum,
        }
    }

    fn backward_one(&self, caches: &[BlockCache], last: &[f64], dlogits: &[f64], grads: &mut [Vec<f64>]) {
        let h = self.arch.hidden;
        let (hw, hb) = (self.layout.head_w, self.layout.head_b);
        let head_w = &self.w[hw];
        let mut dact = vec![0.0; h];
        for (c, &d) in dlogits.iter().enumerate() {
            grads[hb][c] += d;
            for k in 0..h {
                grads[hw][c * h + k] += d * last[k];
                dact[k] += d * head_w[c * h + k];
            }
        }
        for (bi, cache) in caches.iter().enumerate().rev() {
            let [wi, bi_, gi, betai] = self.layout.blocks[bi];
            let g = &self.w[gi];
            // ReLU, then LayerNorm affine
            let mut dxhat = vec![0.0; h];
            for k in 0..h {
                let dy = if cache.pre_relu[k] > 0.0 { dact[k] } else { 0.0 };
                grads[betai][k] += dy;
                grads[gi][k] += dy * cache.xhat[k];
                dxhat[k] = dy * g[k];
            }
            let mean_d = dxhat.iter().sum::<f64>() / h as f64;
            let mean_dx = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum::<f64>() / h as f64;
            let dz: Vec<f64> = (0..h)
                .map(|k| cache.inv_std * (dxhat[k] - mean_d - cache.xhat[k] * mean_dx))
                .collect();
            let in_dim = cache.input.len();
            let w = &self.w[wi];
            let mut dinput = vec![0.0; in_dim];
            for (o, &d) in dz.iter().enumerate() {
                grads[bi_][o] += d;
                let row = &mut grads[wi][o * in_dim..(o + 1) * in_dim];
                for j in 0..in_dim {
                    row[j] += d * cache.input[j];
                    dinput[j] += d * w[o * in_dim + j];
                }
            }
            dact = dinput;
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Mean cross-entropy and number of correct argmax predictions.
pub fn forward_loss(arch: &ToyArch, params: &ParamSet, batch: &Examples) -> Result<(f64, usize)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no examples".into()));
    }
    check_dim(arch, batch)?;
    let net = Net::new(arch, params)?;
    let all: Vec<usize> = (0..batch.len()).collect();
    let out = net.run(batch, &all, false);
    Ok((out.loss_sum / batch.len() as f64, out.correct))
}

/// Exact gradient of the mean cross-entropy w.r.t. every parameter.
pub fn backward(arch: &ToyArch, params: &ParamSet, batch: &Examples) -> Result<ParamSet> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no examples".into()));
    }
    check_dim(arch, batch)?;
    let net = Net::new(arch, params)?;
    let all: Vec<usize> = (0..batch.len()).collect();
    let out = net.run(batch, &all, true);
    let n = batch.len() as f64;
    let data = out
        .grad_sum
        .expect("requested")
        .into_iter()
        .map(|g| g.into_iter().map(|v| (v / n) as f32).collect())
        .collect();
    params.with_data(data)
}

/// Mean loss with parameters given as f64 buffers in `template`'s canonical order.
/// Lets finite-difference checks perturb weights without f32 rounding.
pub fn mean_loss_f64(arch: &ToyArch, template: &ParamSet, weights: &[Vec<f64>], batch: &Examples) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no examples".into()));
    }
    check_dim(arch, batch)?;
    let layout = Layout::resolve(arch, template)?;
    let net = Net::from_f64(arch, layout, weights.to_vec());
    let all: Vec<usize> = (0..batch.len()).collect();
    Ok(net.run(batch, &all, false).loss_sum / batch.len() as f64)
}

/// Which hidden units are active (pre-ReLU > 0) for every example, flattened.
pub fn relu_pattern_f64(arch: &ToyArch, template: &ParamSet, weights: &[Vec<f64>], batch: &Examples) -> Result<Vec<bool>> {
    check_dim(arch, batch)?;
    let layout = Layout::resolve(arch, template)?;
    let net = Net::from_f64(arch, layout, weights.to_vec());
    let mut out = Vec::new();
    for i in 0..batch.len() {
        let (caches, _, _) = net.forward_one(batch.row(i));
        for c in caches {
            out.extend(c.pre_relu.iter().map(|&v| v > 0.0));
        }
    }
    Ok(out)
}

pub(crate) fn check_dim(arch: &ToyArch, data: &Examples) -> Result<()> {
    if data.dim != arch.d_in {
        return Err(Error::mismatch("input", format!("data dim {} vs d_in {}", data.dim, arch.d_in)));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= arch.classes) {
        return Err(Error::InvalidArgument(format!("label {bad} >= classes {}", arch.classes)));
    }
    Ok(())
}
