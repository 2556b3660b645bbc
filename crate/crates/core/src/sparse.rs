//! Bit-packed masks, masked (sparse) task vectors and their on-disk formats.
//!
//! A [`SparseTaskVector`] stores exactly the coordinates selected by its generating
//! mask, including those where the task vector happens to be zero, so its support
//! is always the mask's support.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::codec::{put_name, Reader};
use crate::error::{Error, Result};
use crate::pset::{ParamSet, TaskVector};

pub const SPTV_MAGIC: &[u8; 4] = b"SPTV";
pub const MASK_MAGIC: &[u8; 4] = b"MASK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    pub name: String,
    pub numel: usize,
    /// LSB-first, `ceil(numel / 8)` bytes, trailing bits zero.
    pub bits: Vec<u8>,
}

impl MaskTensor {
    pub fn zeros(name: impl Into<String>, numel: usize) -> Self {
        Self {
            name: name.into(),
            numel,
            bits: vec![0; numel.div_ceil(8)],
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        debug_assert!(i < self.numel);
        if on {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.numel).filter(move |&i| self.get(i))
    }
}

/// Binary mask over a parameter layout. Tensors outside `maskable` never have bits set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub tensors: Vec<MaskTensor>,
    maskable: BTreeSet<String>,
}

impl Mask {
    /// All-zero mask over `layout`; `maskable = None` means every tensor.
    pub fn zeros(layout: &ParamSet, maskable: Option<&BTreeSet<String>>) -> Self {
        let tensors: Vec<MaskTensor> = layout
            .tensors()
            .iter()
            .map(|t| MaskTensor::zeros(t.name.clone(), t.numel()))
            .collect();
        let maskable = match maskable {
            Some(set) => tensors
                .iter()
                .filter(|t| set.contains(&t.name))
                .map(|t| t.name.clone())
                .collect(),
            None => tensors.iter().map(|t| t.name.clone()).collect(),
        };
        Self { tensors, maskable }
    }

    pub fn ones(layout: &ParamSet, maskable: Option<&BTreeSet<String>>) -> Self {
        let mut m = Self::zeros(layout, maskable);
        for t in &mut m.tensors {
            if m.maskable.contains(&t.name) {
                for i in 0..t.numel {
                    t.set(i, true);
                }
            }
        }
        m
    }

    /// Builds a mask from one bool slice per tensor. Bits outside the maskable set must be off.
    pub fn from_bools(layout: &ParamSet, maskable: Option<&BTreeSet<String>>, bits: &[Vec<bool>]) -> Result<Self> {
        let mut m = Self::zeros(layout, maskable);
        if bits.len() != m.tensors.len() {
            return Err(Error::InvalidArgument("one bool vector per tensor required".into()));
        }
        for (t, b) in m.tensors.iter_mut().zip(bits) {
            if b.len() != t.numel {
                return Err(Error::mismatch(&t.name, "bit count differs from numel"));
            }
            let allowed = m.maskable.contains(&t.name);
            for (i, &on) in b.iter().enumerate() {
                if on && !allowed {
                    return Err(Error::InvalidArgument(format!("`{}` is not maskable", t.name)));
                }
                t.set(i, on);
            }
        }
        Ok(m)
    }

    pub fn maskable(&self) -> &BTreeSet<String> {
        &self.maskable
    }

    /// Restricts the maskable set (e.g. from a sidecar). Fails if an excluded tensor has bits set.
    pub fn with_maskable(mut self, set: &BTreeSet<String>) -> Result<Self> {
        for t in &self.tensors {
            if !set.contains(&t.name) && t.count_ones() > 0 {
                return Err(Error::InvalidArgument(format!("`{}` has active bits", t.name)));
            }
        }
        self.maskable = self
            .tensors
            .iter()
            .filter(|t| set.contains(&t.name))
            .map(|t| t.name.clone())
            .collect();
        Ok(self)
    }

    pub fn is_maskable(&self, name: &str) -> bool {
        self.maskable.contains(name)
    }

    pub fn popcount(&self) -> usize {
        self.tensors.iter().map(MaskTensor::count_ones).sum()
    }

    pub fn total_maskable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| self.maskable.contains(&t.name))
            .map(|t| t.numel)
            .sum()
    }

    /// Active fraction of the maskable parameters.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_maskable();
        if total == 0 {
            0.0
        } else {
            self.popcount() as f64 / total as f64
        }
    }

    pub fn check_layout(&self, other: &Mask) -> Result<()> {
        check_numel_layout(
            self.tensors.iter().map(|t| (t.name.as_str(), t.numel)),
            other.tensors.iter().map(|t| (t.name.as_str(), t.numel)),
        )
    }

    fn check_against(&self, p: &ParamSet) -> Result<()> {
        check_numel_layout(
            self.tensors.iter().map(|t| (t.name.as_str(), t.numel)),
            p.tensors().iter().map(|t| (t.name.as_str(), t.numel())),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_name(&mut out, &t.name);
            out.extend_from_slice(&(t.numel as u64).to_le_bytes());
            out.extend_from_slice(&t.bits);
        }
        out
    }

    /// Parses a MASK file; every tensor in the file is treated as maskable.
    pub fn from_bytes(bytes: &[u8]) -> Result<Mask> {
        let mut r = Reader::new(bytes);
        r.magic(MASK_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let at = r.offset();
            let name = r.name()?;
            if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
                return Err(Error::format(at, "tensors not in canonical order"));
            }
            let numel = usize::try_from(r.u64("numel")?).map_err(|_| Error::format(at, "numel too large"))?;
            let bits_at = r.offset();
            let bits = r.take(numel.div_ceil(8), "mask bits")?.to_vec();
            if numel % 8 != 0 {
                let last = *bits.last().expect("non-empty when numel % 8 != 0");
                if last >> (numel % 8) != 0 {
                    return Err(Error::format(bits_at + bits.len() - 1, "trailing mask bits set"));
                }
            }
            prev = Some(name.clone());
            tensors.push(MaskTensor { name, numel, bits });
        }
        r.finish()?;
        let maskable = tensors.iter().map(|t| t.name.clone()).collect();
        Ok(Mask { tensors, maskable })
    }
}

fn check_numel_layout<'a>(
    a: impl ExactSizeIterator<Item = (&'a str, usize)>,
    b: impl ExactSizeIterator<Item = (&'a str, usize)>,
) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::mismatch("*", format!("{} vs {} tensors", a.len(), b.len())));
    }
    for ((na, ca), (nb, cb)) in a.zip(b) {
        if na != nb {
            return Err(Error::mismatch(na.min(nb), "tensor present in only one layout"));
        }
        if ca != cb {
            return Err(Error::mismatch(na, format!("numel {ca} vs {cb}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub name: String,
    pub numel: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseTensor {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Value stored at `index`, if any.
    pub fn lookup(&self, index: u32) -> Option<f32> {
        self.indices.binary_search(&index).ok().map(|i| self.values[i])
    }

    fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::Corruption {
                name: self.name.clone(),
                detail: "index and value counts differ".into(),
            });
        }
        for (k, &i) in self.indices.iter().enumerate() {
            if i as usize >= self.numel {
                return Err(Error::Corruption {
                    name: self.name.clone(),
                    detail: format!("index {i} out of range for numel {}", self.numel),
                });
            }
            if k > 0 && self.indices[k - 1] >= i {
                return Err(Error::Corruption {
                    name: self.name.clone(),
                    detail: format!("indices not strictly increasing at position {k}"),
                });
            }
        }
        Ok(())
    }
}

/// Masked task vector `mask ⊙ tau` in index/value form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTaskVector {
    pub tensors: Vec<SparseTensor>,
    pub base_fingerprint: u64,
}

impl SparseTaskVector {
    pub fn nnz(&self) -> usize {
        self.tensors.iter().map(SparseTensor::nnz).sum()
    }

    pub fn get(&self, name: &str) -> Option<&SparseTensor> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    pub fn validate(&self) -> Result<()> {
        self.tensors.iter().try_for_each(SparseTensor::validate)
    }

    /// The mask whose active bits are exactly the stored indices.
    pub fn support(&self) -> Mask {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let mut m = MaskTensor::zeros(t.name.clone(), t.numel);
                for &i in &t.indices {
                    m.set(i as usize, true);
                }
                m
            })
            .collect::<Vec<_>>();
        let maskable = tensors.iter().map(|t| t.name.clone()).collect();
        Mask { tensors, maskable }
    }

    pub fn check_layout(&self, other: &SparseTaskVector) -> Result<()> {
        check_numel_layout(
            self.tensors.iter().map(|t| (t.name.as_str(), t.numel)),
            other.tensors.iter().map(|t| (t.name.as_str(), t.numel)),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.nnz() * 8 + self.tensors.len() * 32);
        out.extend_from_slice(SPTV_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.base_fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_name(&mut out, &t.name);
            out.extend_from_slice(&(t.numel as u64).to_le_bytes());
            out.extend_from_slice(&(t.nnz() as u64).to_le_bytes());
            for i in &t.indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SparseTaskVector> {
        let mut r = Reader::new(bytes);
        r.magic(SPTV_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let base_fingerprint = r.u64("base fingerprint")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors: Vec<SparseTensor> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset();
            let name = r.name()?;
            if tensors.last().is_some_and(|p| p.name >= name) {
                return Err(Error::format(at, "tensors not in canonical order"));
            }
            let numel = usize::try_from(r.u64("numel")?).map_err(|_| Error::format(at, "numel too large"))?;
            let nnz_at = r.offset();
            let nnz = usize::try_from(r.u64("nnz")?).map_err(|_| Error::format(nnz_at, "nnz too large"))?;
            if nnz > numel {
                return Err(Error::format(nnz_at, format!("nnz {nnz} exceeds numel {numel}")));
            }
            let idx_at = r.offset();
            let raw = r.take(nnz * 4, "indices")?;
            let mut indices = Vec::with_capacity(nnz);
            for (k, c) in raw.chunks_exact(4).enumerate() {
                let i = u32::from_le_bytes(c.try_into().expect("4 bytes"));
                let bad = i as usize >= numel || indices.last().is_some_and(|&p| p >= i);
                if bad {
                    return Err(Error::format(idx_at + 4 * k, format!("invalid index {i}")));
                }
                indices.push(i);
            }
            let values = r.finite_f32s(nnz, &name)?;
            tensors.push(SparseTensor {
                name,
                numel,
                indices,
                values,
            });
        }
        r.finish()?;
        Ok(SparseTaskVector {
            tensors,
            base_fingerprint,
        })
    }
}

pub fn mask_apply(m: &Mask, tv: &TaskVector) -> Result<SparseTaskVector> {
    m.check_against(&tv.delta)?;
    let tensors = m
        .tensors
        .iter()
        .zip(tv.delta.tensors())
        .map(|(mt, t)| {
            let indices: Vec<u32> = mt.active().map(|i| i as u32).collect();
            let values = indices.iter().map(|&i| t.data[i as usize]).collect();
            SparseTensor {
                name: mt.name.clone(),
                numel: mt.numel,
                indices,
                values,
            }
        })
        .collect();
    Ok(SparseTaskVector {
        tensors,
        base_fingerprint: tv.base_fingerprint,
    })
}

/// Scatters `s` into a zero task vector shaped like `template`.
pub fn densify(s: &SparseTaskVector, template: &ParamSet) -> Result<TaskVector> {
    let mut data: Vec<Vec<f32>> = template.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for st in &s.tensors {
        let ti = template
            .index_of(&st.name)
            .ok_or_else(|| Error::mismatch(&st.name, "not present in template"))?;
        if template.tensors()[ti].numel() != st.numel {
            return Err(Error::mismatch(&st.name, "numel differs from template"));
        }
        st.validate()?;
        for (&i, &v) in st.indices.iter().zip(&st.values) {
            data[ti][i as usize] = v;
        }
    }
    Ok(TaskVector::new(template.with_data(data)?, s.base_fingerprint))
}

/// `|a ∩ b| / |a ∪ b|` over mask bits; 0 when the union is empty.
pub fn mask_jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_layout(b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        for (x, y) in ta.bits.iter().zip(&tb.bits) {
            inter += (x & y).count_ones() as u64;
            union += (x | y).count_ones() as u64;
        }
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Cosine of the two value vectors restricted to the intersection of their supports.
pub fn masked_cosine(a: &SparseTaskVector, b: &SparseTaskVector) -> Result<f64> {
    a.check_layout(b)?;
    if a.base_fingerprint != b.base_fingerprint {
        return Err(Error::BaseMismatch {
            expected: a.base_fingerprint,
            found: b.base_fingerprint,
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        let (mut i, mut j) = (0, 0);
        while i < ta.indices.len() && j < tb.indices.len() {
            match ta.indices[i].cmp(&tb.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let (x, y) = (ta.values[i] as f64, tb.values[j] as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionReport {
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
    pub ratio: f64,
}

/// Sizes of the PSET encoding of `dense` versus the SPTV encoding of `sparse`.
pub fn compression_report(dense: &ParamSet, sparse: &SparseTaskVector) -> CompressionReport {
    let dense_bytes = dense.to_bytes().len();
    let sparse_bytes = sparse.to_bytes().len();
    CompressionReport {
        dense_bytes,
        sparse_bytes,
        ratio: sparse_bytes as f64 / dense_bytes as f64,
    }
}

/// Share of active bits falling in each group. All zeros when the mask is empty.
pub fn mask_distribution(m: &Mask, grouping: &BTreeMap<String, String>) -> Result<Vec<(String, f64)>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &m.tensors {
        let g = grouping
            .get(&t.name)
            .ok_or_else(|| Error::InvalidArgument(format!("tensor `{}` has no group", t.name)))?;
        *counts.entry(g.as_str()).or_default() += t.count_ones();
    }
    let total: usize = counts.values().sum();
    Ok(counts
        .into_iter()
        .map(|(g, c)| {
            let frac = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            (g.to_string(), frac)
        })
        .collect())
}

pub fn save_sptv(s: &SparseTaskVector, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, s.to_bytes())?;
    Ok(())
}

pub fn load_sptv(path: impl AsRef<Path>) -> Result<SparseTaskVector> {
    SparseTaskVector::from_bytes(&std::fs::read(path)?)
}

pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, m.to_bytes())?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_bytes(&std::fs::read(path)?)
}
