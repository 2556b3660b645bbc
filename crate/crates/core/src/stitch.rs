//! Overlap-averaged stitching of masked task vectors onto a pretrained model.
//!
//! For every coordinate `k` in the union of supports,
//! `merged[k] = pre[k] + (sum of tau_i[k] over tasks active at k) / count(k)`;
//! every other coordinate is copied from `pre`. Contributions are summed in f64
//! in ascending task-id order and rounded to f32 once, so from-scratch and
//! incremental stitching agree bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::fnv1a64;
use crate::error::{Error, Result};
use crate::pset::{add_rounded, load_pset, save_pset, ParamSet};
use crate::sparse::{load_sptv, save_sptv, SparseTaskVector};

/// Active-task count at every coordinate of the union support.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StitchWeights {
    /// `(tensor name, ascending indices, counts)`, canonical tensor order.
    pub tensors: Vec<(String, Vec<u32>, Vec<u32>)>,
}

impl StitchWeights {
    pub fn union_support(&self) -> usize {
        self.tensors.iter().map(|(_, i, _)| i.len()).sum()
    }

    pub fn count_at(&self, tensor: &str, index: u32) -> u32 {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == tensor)
            .and_then(|(_, idx, c)| idx.binary_search(&index).ok().map(|p| c[p]))
            .unwrap_or(0)
    }

    /// FNV-1a over `(tensor, index, count)` triples.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, idx, counts) in &self.tensors {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for (i, c) in idx.iter().zip(counts) {
                bytes.extend_from_slice(&i.to_le_bytes());
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

fn check_against_pre(pre: &ParamSet, s: &SparseTaskVector) -> Result<()> {
    if s.base_fingerprint != pre.fingerprint() {
        return Err(Error::BaseMismatch {
            expected: pre.fingerprint(),
            found: s.base_fingerprint,
        });
    }
    if s.tensors.len() != pre.len() {
        return Err(Error::mismatch("*", "sparse vector does not cover every tensor"));
    }
    for (st, t) in s.tensors.iter().zip(pre.tensors()) {
        if st.name != t.name || st.numel != t.numel() {
            return Err(Error::mismatch(&st.name, "layout differs from pretrained model"));
        }
    }
    s.validate()
}

/// Stitches tasks keyed by id; accumulation runs in ascending id order whatever the input order.
pub fn stitch_named(pre: &ParamSet, tasks: &[(&str, &SparseTaskVector)]) -> Result<(ParamSet, StitchWeights)> {
    let mut sorted: Vec<&(&str, &SparseTaskVector)> = tasks.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateTask(w[0].0.to_string()));
    }
    for (_, s) in &sorted {
        check_against_pre(pre, s)?;
    }
    let mut data = Vec::with_capacity(pre.len());
    let mut weights = StitchWeights::default();
    for (ti, t) in pre.tensors().iter().enumerate() {
        let mut sum = vec![-0.0f64; t.numel()];
        let mut count = vec![0u32; t.numel()];
        for (_, s) in &sorted {
            let st = &s.tensors[ti];
            for (&i, &v) in st.indices.iter().zip(&st.values) {
                sum[i as usize] += v as f64;
                count[i as usize] += 1;
            }
        }
        let mut out = t.data.clone();
        let (mut idx, mut cnt) = (Vec::new(), Vec::new());
        for (k, &c) in count.iter().enumerate() {
            if c > 0 {
                out[k] = add_rounded(t.data[k], sum[k] / c as f64);
                idx.push(k as u32);
                cnt.push(c);
            }
        }
        weights.tensors.push((t.name.clone(), idx, cnt));
        data.push(out);
    }
    Ok((pre.with_data(data)?, weights))
}

/// Positional ids: task `i` of the list is accumulated `i`-th.
pub fn stitch(pre: &ParamSet, tasks: &[SparseTaskVector]) -> Result<(ParamSet, StitchWeights)> {
    let ids: Vec<String> = (0..tasks.len()).map(|i| format!("{i:010}")).collect();
    let named: Vec<(&str, &SparseTaskVector)> = ids.iter().map(String::as_str).zip(tasks).collect();
    stitch_named(pre, &named)
}

/// `pre + densify(s)`.
pub fn graft(pre: &ParamSet, s: &SparseTaskVector) -> Result<ParamSet> {
    Ok(stitch(pre, std::slice::from_ref(s))?.0)
}

type Contribs = Vec<(Arc<str>, f32)>;

/// Incrementally maintained stitch of a growing/shrinking task set.
///
/// Adding or removing a task touches only that task's support, in place; stored
/// sparse vectors are never modified.
#[derive(Debug, Clone)]
pub struct StitchState {
    pre: ParamSet,
    tasks: BTreeMap<Arc<str>, SparseTaskVector>,
    contribs: Vec<HashMap<u32, Contribs>>,
    merged: Vec<Vec<f32>>,
}

fn valid_task_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && !id.starts_with('.')
}

impl StitchState {
    pub fn new(pre: ParamSet) -> Self {
        Self {
            contribs: vec![HashMap::new(); pre.len()],
            merged: pre.tensors().iter().map(|t| t.data.clone()).collect(),
            tasks: BTreeMap::new(),
            pre,
        }
    }

    pub fn pre(&self) -> &ParamSet {
        &self.pre
    }

    /// The current merged model; O(N) to assemble, unlike `add`/`remove`.
    pub fn merged(&self) -> Result<ParamSet> {
        self.pre.with_data(self.merged.clone())
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(|k| k.as_ref())
    }

    pub fn task(&self, id: &str) -> Option<&SparseTaskVector> {
        self.tasks.get(id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn weights(&self) -> StitchWeights {
        let tensors = self
            .pre
            .tensors()
            .iter()
            .zip(&self.contribs)
            .map(|(t, c)| {
                let mut entries: Vec<(u32, u32)> = c.iter().map(|(&i, v)| (i, v.len() as u32)).collect();
                entries.sort_unstable();
                let (idx, cnt) = entries.into_iter().unzip();
                (t.name.clone(), idx, cnt)
            })
            .collect();
        StitchWeights { tensors }
    }

    fn recompute(pre: &[f32], contribs: &HashMap<u32, Contribs>, out: &mut [f32], k: u32) {
        let i = k as usize;
        out[i] = match contribs.get(&k) {
            Some(list) if !list.is_empty() => {
                let sum = list.iter().fold(-0.0f64, |acc, (_, v)| acc + *v as f64);
                add_rounded(pre[i], sum / list.len() as f64)
            }
            _ => pre[i],
        };
    }

    pub fn add(&mut self, id: &str, s: SparseTaskVector) -> Result<()> {
        if !valid_task_id(id) {
            return Err(Error::InvalidArgument(format!("task id `{id}` must be [A-Za-z0-9_.-]+")));
        }
        if self.tasks.contains_key(id) {
            return Err(Error::DuplicateTask(id.to_string()));
        }
        check_against_pre(&self.pre, &s)?;
        let key: Arc<str> = Arc::from(id);
        for (ti, st) in s.tensors.iter().enumerate() {
            let contribs = &mut self.contribs[ti];
            for (&i, &v) in st.indices.iter().zip(&st.values) {
                let list = contribs.entry(i).or_default();
                let at = list.partition_point(|(k, _)| k.as_ref() < id);
                list.insert(at, (key.clone(), v));
                Self::recompute(&self.pre.tensors()[ti].data, contribs, &mut self.merged[ti], i);
            }
        }
        self.tasks.insert(key, s);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Result<SparseTaskVector> {
        let (key, s) = self
            .tasks
            .remove_entry(id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))?;
        for (ti, st) in s.tensors.iter().enumerate() {
            let contribs = &mut self.contribs[ti];
            for &i in &st.indices {
                if let Some(list) = contribs.get_mut(&i) {
                    list.retain(|(k, _)| *k != key);
                    if list.is_empty() {
                        contribs.remove(&i);
                    }
                }
                Self::recompute(&self.pre.tensors()[ti].data, contribs, &mut self.merged[ti], i);
            }
        }
        Ok(s)
    }

    /// From-scratch stitch of the stored tasks, for verification.
    pub fn restitch_from_scratch(&self) -> Result<(ParamSet, StitchWeights)> {
        let named: Vec<(&str, &SparseTaskVector)> = self.tasks.iter().map(|(k, v)| (k.as_ref(), v)).collect();
        stitch_named(&self.pre, &named)
    }

    /// Writes `pre.pset`, `tasks/<id>.sptv` and `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("tasks"))?;
        save_pset(&self.pre, dir.join("pre.pset"))?;
        let mut tasks = Vec::new();
        for (id, s) in &self.tasks {
            let file = format!("tasks/{id}.sptv");
            save_sptv(s, dir.join(&file))?;
            tasks.push(ManifestTask {
                id: id.to_string(),
                file,
                nnz: s.nnz(),
                base_fingerprint: format!("{:016x}", s.base_fingerprint),
            });
        }
        let w = self.weights();
        let manifest = StateManifest {
            version: 1,
            pre_fingerprint: format!("{:016x}", self.pre.fingerprint()),
            merged_fingerprint: format!("{:016x}", self.merged()?.fingerprint()),
            union_support: w.union_support(),
            counts_checksum: format!("{:016x}", w.checksum()),
            tasks,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<StitchState> {
        let dir = dir.as_ref();
        let manifest: StateManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let pre = load_pset(dir.join("pre.pset"))?;
        if format!("{:016x}", pre.fingerprint()) != manifest.pre_fingerprint {
            return Err(Error::format(0, "pre.pset fingerprint differs from manifest"));
        }
        let mut state = StitchState::new(pre);
        for t in &manifest.tasks {
            state.add(&t.id, load_sptv(dir.join(&t.file))?)?;
        }
        let w = state.weights();
        if format!("{:016x}", w.checksum()) != manifest.counts_checksum {
            return Err(Error::format(0, "stitch counts checksum differs from manifest"));
        }
        if format!("{:016x}", state.merged()?.fingerprint()) != manifest.merged_fingerprint {
            return Err(Error::format(0, "merged fingerprint differs from manifest"));
        }
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTask {
    id: String,
    file: String,
    nnz: usize,
    base_fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateManifest {
    version: u32,
    pre_fingerprint: String,
    merged_fingerprint: String,
    union_support: usize,
    counts_checksum: String,
    tasks: Vec<ManifestTask>,
}
