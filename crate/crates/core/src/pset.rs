//! Dense named-tensor containers, the PSET checkpoint format and task-vector algebra.
//!
//! Every [`ParamSet`] keeps its tensors in strict lexicographic name order and caches
//! an FNV-1a fingerprint of its canonical serialization. Task vectors carry the
//! fingerprint of the pretrained model they were computed against, so mixing deltas
//! from different bases is caught instead of silently producing garbage.

use std::path::Path;

use crate::codec::{fnv1a64, put_name, Reader};
use crate::error::{Error, Result};

pub const PSET_MAGIC: &[u8; 4] = b"PSET";
pub const PSET_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::mismatch(
                name,
                format!("shape {shape:?} holds {numel} values but data has {}", data.len()),
            ));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// An immutable, canonically ordered set of float32 tensors.
#[derive(Debug, Clone)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    fingerprint: u64,
}

impl PartialEq for ParamSet {
    /// Bitwise equality of names, shapes and values.
    fn eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl ParamSet {
    pub fn new(mut tensors: Vec<Tensor>) -> Result<Self> {
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in tensors.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(Error::mismatch(&pair[0].name, "duplicate tensor name"));
            }
        }
        for t in &tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::mismatch(&t.name, "data length does not match shape"));
            }
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite value at `{}`[{i}]",
                    t.name
                )));
            }
        }
        let mut p = Self {
            tensors,
            fingerprint: 0,
        };
        p.fingerprint = fnv1a64(&p.to_bytes());
        Ok(p)
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("empty set is valid")
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.binary_search_by(|t| t.name.as_str().cmp(name)).ok()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks that both sets have identical names and shapes, naming the first offender.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name {
                let first = a.name.as_str().min(b.name.as_str());
                return Err(Error::mismatch(first, "tensor present in only one set"));
            }
            if a.shape != b.shape {
                return Err(Error::mismatch(
                    &a.name,
                    format!("shape {:?} vs {:?}", a.shape, b.shape),
                ));
            }
        }
        if self.tensors.len() != other.tensors.len() {
            let n = self.tensors.len().min(other.tensors.len());
            let extra = self.tensors.get(n).or_else(|| other.tensors.get(n)).expect("longer side");
            return Err(Error::mismatch(&extra.name, "tensor present in only one set"));
        }
        Ok(())
    }

    /// Same names and shapes, data replaced tensor by tensor.
    pub fn with_data(&self, data: Vec<Vec<f32>>) -> Result<ParamSet> {
        if data.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                data.len()
            )));
        }
        let tensors = self
            .tensors
            .iter()
            .zip(data)
            .map(|(t, d)| Tensor::new(t.name.clone(), t.shape.clone(), d))
            .collect::<Result<Vec<_>>>()?;
        ParamSet::new(tensors)
    }

    pub fn zeros_like(&self) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
            .collect();
        ParamSet::new(tensors).expect("zeros are finite")
    }

    /// Canonical PSET v1 serialization; also the fingerprint preimage.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| 4 + t.name.len() + 4 * t.shape.len() + 4 * t.numel())
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(PSET_MAGIC);
        out.extend_from_slice(&PSET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_name(&mut out, &t.name);
            out.push(DTYPE_F32);
            out.push(u8::try_from(t.shape.len()).expect("rank fits in u8"));
            for &d in &t.shape {
                out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = Reader::new(bytes);
        r.magic(PSET_MAGIC)?;
        r.version(PSET_VERSION)?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset();
            let name = r.name()?;
            let dtype_at = r.offset();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(dtype_at, format!("unsupported dtype {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(at, "shape overflows"))?;
            let data = r.finite_f32s(numel, &name)?;
            tensors.push(Tensor { name, shape, data });
        }
        r.finish()?;
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(pair) = tensors.windows(2).find(|p| p[0].name == p[1].name) {
            return Err(Error::format(12, format!("duplicate tensor `{}`", pair[0].name)));
        }
        ParamSet::new(tensors)
    }
}

pub fn fingerprint(p: &ParamSet) -> u64 {
    p.fingerprint()
}

pub fn save_pset(p: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, p.to_bytes())?;
    Ok(())
}

pub fn load_pset(path: impl AsRef<Path>) -> Result<ParamSet> {
    ParamSet::from_bytes(&std::fs::read(path)?)
}

/// `delta = finetuned - pretrained`, tagged with the pretrained fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: ParamSet,
    pub base_fingerprint: u64,
}

impl TaskVector {
    pub fn new(delta: ParamSet, base_fingerprint: u64) -> Self {
        Self {
            delta,
            base_fingerprint,
        }
    }

    pub fn check_base(&self, pre: &ParamSet) -> Result<()> {
        if self.base_fingerprint != pre.fingerprint() {
            return Err(Error::BaseMismatch {
                expected: pre.fingerprint(),
                found: self.base_fingerprint,
            });
        }
        Ok(())
    }
}

/// The single f32 rounding used whenever a delta is added back onto a base value.
#[inline]
pub(crate) fn add_rounded(base: f32, delta_sum: f64) -> f32 {
    (base as f64 + delta_sum) as f32
}

/// Correctly rounded difference, nudged by a few ulps when that lets
/// `add_rounded(pre, d)` reproduce `ft` exactly.
fn reconstructing_delta(pre: f32, ft: f32) -> f32 {
    let d = (ft as f64 - pre as f64) as f32;
    let hits = |c: f32| add_rounded(pre, c as f64).to_bits() == ft.to_bits();
    if hits(d) {
        return d;
    }
    // -0.0 survives only -0.0 + -0.0
    if d == 0.0 && hits(-d) {
        return -d;
    }
    let (mut up, mut down) = (d, d);
    for _ in 0..4 {
        up = up.next_up();
        down = down.next_down();
        if hits(up) {
            return up;
        }
        if hits(down) {
            return down;
        }
    }
    d
}

pub fn compute_task_vector(pre: &ParamSet, ft: &ParamSet) -> Result<TaskVector> {
    pre.check_layout(ft)?;
    let data = pre
        .tensors()
        .iter()
        .zip(ft.tensors())
        .map(|(p, f)| {
            p.data
                .iter()
                .zip(&f.data)
                .map(|(&a, &b)| reconstructing_delta(a, b))
                .collect()
        })
        .collect();
    Ok(TaskVector::new(pre.with_data(data)?, pre.fingerprint()))
}

/// `pre + sum_i scale_i * delta_i`, accumulated per coordinate in list order.
pub fn apply_delta(pre: &ParamSet, scaled: &[(f32, &TaskVector)]) -> Result<ParamSet> {
    for (_, tv) in scaled {
        tv.check_base(pre)?;
        pre.check_layout(&tv.delta)?;
    }
    let data = pre
        .tensors()
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            t.data
                .iter()
                .enumerate()
                .map(|(j, &base)| {
                    // -0.0 is the exact additive identity; a 0.0 seed would turn a -0.0 sum into 0.0
                    let sum = scaled.iter().fold(-0.0f64, |acc, (s, tv)| {
                        acc + *s as f64 * tv.delta.tensors()[ti].data[j] as f64
                    });
                    add_rounded(base, sum)
                })
                .collect()
        })
        .collect();
    pre.with_data(data)
}
