//! Synthetic multi-task suites and CSV ingestion.
//!
//! Each task owns a block of input dimensions. Its Gaussian clusters are a shared
//! template, rotated and shifted per task, and its labels are a task-specific
//! permutation of the template's canonical classes. The pretrain task mixes every
//! task's clusters (canonical labels) with a generic component on a block no task
//! uses; the held-out pretrain test split is that generic component, the
//! capability no finetune targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Row-major design matrix with class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Examples {
    pub dim: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Examples {
    pub fn new(dim: usize, inputs: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != dim * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs do not form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Examples {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        Examples {
            dim: self.dim,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, n: usize) -> Examples {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    fn push(&mut self, x: &[f32], label: usize) {
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
    }

    /// Up to `k` examples of each class, chosen by a seeded shuffle.
    pub fn k_shot(&self, classes: usize, k: usize, seed: u64) -> Examples {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut substream(seed, "shots"));
        let mut taken = vec![0usize; classes];
        let picked: Vec<usize> = order
            .into_iter()
            .filter(|&i| {
                let c = self.labels[i];
                if c < classes && taken[c] < k {
                    taken[c] += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        self.subset(&picked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub name: String,
    pub train: Examples,
    pub val: Examples,
    pub test: Examples,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub d_in: usize,
    pub classes: usize,
    pub clusters_per_class: usize,
    pub seed: u64,
    /// `(i, j)`: task j reuses task i's cluster geometry with permuted labels.
    pub conflict_pair: Option<(usize, usize)>,
    pub train_per_task: usize,
    pub val_per_class: usize,
    pub test_per_task: usize,
    pub pretrain_per_component: usize,
    pub center_scale: f64,
    pub offset_scale: f64,
    pub cluster_std: f64,
    pub background_std: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 6,
            d_in: 32,
            classes: 4,
            clusters_per_class: 1,
            seed: 0,
            conflict_pair: None,
            train_per_task: 256,
            val_per_class: 256,
            test_per_task: 512,
            pretrain_per_component: 256,
            center_scale: 2.0,
            offset_scale: 1.0,
            cluster_std: 1.0,
            background_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentManifest {
    pub name: String,
    /// Input dimensions the clusters live on.
    pub dims: Vec<usize>,
    /// Full-width cluster centers, cluster `m` has canonical class `m % classes`.
    pub centers: Vec<Vec<f32>>,
    /// `labels[c]` is the task label of canonical class `c`.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub config: SuiteConfig,
    pub tasks: Vec<ComponentManifest>,
    pub generic: ComponentManifest,
    pub splits: SplitSizes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub pretrain_train: usize,
    pub pretrain_val: usize,
    pub pretrain_test: usize,
}

#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub tasks: Vec<TaskData>,
    pub pretrain: TaskData,
    pub manifest: SuiteManifest,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect::<Vec<f64>>()
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix (row-major).
fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian_vec(rng, n, 1.0);
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

fn random_nonidentity_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().any(|(i, &v)| i != v) {
            return p;
        }
    }
}

struct Geometry {
    offset: Vec<f64>,
    rotation: Vec<Vec<f64>>,
}

impl Geometry {
    fn centers(&self, template: &[Vec<f64>], dims: &[usize], d_in: usize) -> Vec<Vec<f32>> {
        template
            .iter()
            .map(|t| {
                let mut full = vec![0.0f32; d_in];
                for (r, &d) in dims.iter().enumerate() {
                    let rotated: f64 = self.rotation[r].iter().zip(t).map(|(a, b)| a * b).sum();
                    full[d] += (self.offset[r] + rotated) as f32;
                }
                full
            })
            .collect()
    }
}

fn sample_component(
    comp: &ComponentManifest,
    cfg: &SuiteConfig,
    n: usize,
    generic_labels: bool,
    rng: &mut ChaCha8Rng,
    out: &mut Examples,
) {
    let clusters = comp.centers.len();
    let mut order: Vec<usize> = (0..n).map(|i| i % clusters).collect();
    order.shuffle(rng);
    for m in order {
        let mut x: Vec<f32> = (0..cfg.d_in)
            .map(|_| (cfg.background_std * normal(rng)) as f32)
            .collect();
        for &d in &comp.dims {
            x[d] += comp.centers[m][d] + (cfg.cluster_std * normal(rng)) as f32;
        }
        let canonical = m % cfg.classes;
        let label = if generic_labels { canonical } else { comp.labels[canonical] };
        out.push(&x, label);
    }
}

/// Deterministic synthetic suite: `n_tasks` finetuning tasks plus the pretrain mixture.
pub fn gen_task_suite(cfg: &SuiteConfig) -> Result<TaskSuite> {
    if cfg.n_tasks == 0 {
        return Err(Error::InvalidArgument("n_tasks must be >= 1".into()));
    }
    if cfg.classes < 2 || cfg.d_in < 2 || cfg.clusters_per_class == 0 {
        return Err(Error::InvalidArgument("need classes >= 2, d_in >= 2, clusters_per_class >= 1".into()));
    }
    if let Some((i, j)) = cfg.conflict_pair {
        if i == j || i >= cfg.n_tasks || j >= cfg.n_tasks {
            return Err(Error::InvalidArgument(format!("bad conflict pair ({i}, {j})")));
        }
    }
    let latent = (cfg.d_in / (cfg.n_tasks + 1)).max(2).min(cfg.d_in);
    let dims_of = |c: usize| -> Vec<usize> { (0..latent).map(|k| (c * latent + k) % cfg.d_in).collect() };
    let n_clusters = cfg.classes * cfg.clusters_per_class;

    let mut trng = substream(cfg.seed, "suite/template");
    let template: Vec<Vec<f64>> = (0..n_clusters).map(|_| gaussian_vec(&mut trng, latent, cfg.center_scale)).collect();

    let mut geometries = Vec::with_capacity(cfg.n_tasks);
    let mut labels = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let mut rng = substream(cfg.seed, &format!("suite/task{t}/geometry"));
        geometries.push(Geometry {
            offset: gaussian_vec(&mut rng, latent, cfg.offset_scale),
            rotation: random_rotation(&mut rng, latent),
        });
        labels.push(random_nonidentity_permutation(&mut rng, cfg.classes));
    }
    if let Some((i, j)) = cfg.conflict_pair {
        let g = &geometries[i];
        geometries[j] = Geometry {
            offset: g.offset.clone(),
            rotation: g.rotation.clone(),
        };
        // every class of j disagrees with i
        labels[j] = (0..cfg.classes).map(|c| labels[i][(c + 1) % cfg.classes]).collect();
    }

    let components: Vec<ComponentManifest> = (0..cfg.n_tasks)
        .map(|t| ComponentManifest {
            name: format!("task{t}"),
            dims: dims_of(t),
            centers: geometries[t].centers(&template, &dims_of(t), cfg.d_in),
            labels: labels[t].clone(),
        })
        .collect();
    let identity = Geometry {
        offset: vec![0.0; latent],
        rotation: (0..latent).map(|r| (0..latent).map(|c| if r == c { 1.0 } else { 0.0 }).collect()).collect(),
    };
    let generic = ComponentManifest {
        name: "generic".into(),
        dims: dims_of(cfg.n_tasks),
        centers: identity.centers(&template, &dims_of(cfg.n_tasks), cfg.d_in),
        labels: (0..cfg.classes).collect(),
    };

    let val_total = cfg.val_per_class * cfg.classes;
    let tasks = components
        .iter()
        .enumerate()
        .map(|(t, comp)| {
            let split = |name: &str, n: usize| {
                let mut rng = substream(cfg.seed, &format!("suite/task{t}/{name}"));
                let mut ex = Examples::empty(cfg.d_in);
                sample_component(comp, cfg, n, false, &mut rng, &mut ex);
                ex
            };
            TaskData {
                name: comp.name.clone(),
                train: split("train", cfg.train_per_task),
                val: split("val", val_total),
                test: split("test", cfg.test_per_task),
                seed: cfg.seed,
            }
        })
        .collect::<Vec<_>>();

    let mixture = |name: &str| {
        let mut rng = substream(cfg.seed, &format!("suite/pretrain/{name}"));
        let mut ex = Examples::empty(cfg.d_in);
        for comp in components.iter().chain(std::iter::once(&generic)) {
            sample_component(comp, cfg, cfg.pretrain_per_component, true, &mut rng, &mut ex);
        }
        let mut order: Vec<usize> = (0..ex.len()).collect();
        order.shuffle(&mut rng);
        ex.subset(&order)
    };
    let generic_split = |name: &str| {
        let mut rng = substream(cfg.seed, &format!("suite/pretrain/{name}"));
        let mut ex = Examples::empty(cfg.d_in);
        sample_component(&generic, cfg, cfg.pretrain_per_component, true, &mut rng, &mut ex);
        ex
    };
    let pretrain = TaskData {
        name: "pretrain".into(),
        train: mixture("train"),
        val: mixture("val"),
        test: generic_split("test"),
        seed: cfg.seed,
    };

    let splits = SplitSizes {
        train: cfg.train_per_task,
        val: val_total,
        test: cfg.test_per_task,
        pretrain_train: pretrain.train.len(),
        pretrain_val: pretrain.val.len(),
        pretrain_test: pretrain.test.len(),
    };
    Ok(TaskSuite {
        tasks,
        pretrain,
        manifest: SuiteManifest {
            config: cfg.clone(),
            tasks: components,
            generic,
            splits,
        },
    })
}

/// Reads `label,f0,...,f{d-1}` rows.
pub fn load_csv_examples(path: impl AsRef<Path>) -> Result<Examples> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("label") {
        return Err(Error::format(0, "first CSV column must be `label`"));
    }
    for (k, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{k}") {
            return Err(Error::format(0, format!("expected header f{k}, found `{h}`")));
        }
    }
    let dim = headers.len() - 1;
    let mut ex = Examples::empty(dim);
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::InvalidArgument(format!("CSV row {}: {what}", line + 2));
        let label: usize = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("bad label"))?;
        let x = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f32>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| bad("bad feature"))?;
        if x.len() != dim {
            return Err(bad("wrong field count"));
        }
        ex.push(&x, label);
    }
    Ok(ex)
}

/// Splits ingested examples 60/20/20 after a seeded shuffle.
pub fn task_from_examples(name: &str, ex: &Examples, seed: u64) -> TaskData {
    let mut order: Vec<usize> = (0..ex.len()).collect();
    order.shuffle(&mut substream(seed, &format!("csv/{name}")));
    let n_train = ex.len() * 3 / 5;
    let n_val = ex.len() / 5;
    TaskData {
        name: name.to_string(),
        train: ex.subset(&order[..n_train]),
        val: ex.subset(&order[n_train..n_train + n_val]),
        test: ex.subset(&order[n_train + n_val..]),
        seed,
    }
}

/// Uniform draw used by tests that need random labelled inputs.
pub fn random_examples(rng: &mut impl Rng, dim: usize, n: usize, classes: usize) -> Examples {
    let inputs = (0..n * dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Examples { dim, inputs, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            n_tasks: 3,
            train_per_task: 40,
            val_per_class: 10,
            test_per_task: 20,
            pretrain_per_component: 16,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let a = gen_task_suite(&small()).unwrap();
        let b = gen_task_suite(&small()).unwrap();
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(a.pretrain, b.pretrain);
        let c = gen_task_suite(&SuiteConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.tasks[0].train, c.tasks[0].train);
    }

    #[test]
    fn splits_have_expected_sizes_and_labels() {
        let s = gen_task_suite(&small()).unwrap();
        for t in &s.tasks {
            assert_eq!(t.train.len(), 40);
            assert_eq!(t.val.len(), 40);
            assert_eq!(t.test.len(), 20);
            assert!(t.train.labels.iter().all(|&l| l < 4));
            for c in 0..4 {
                assert_eq!(t.val.labels.iter().filter(|&&l| l == c).count(), 10);
            }
        }
        assert_eq!(s.pretrain.train.len(), 16 * 4);
        assert_eq!(s.pretrain.test.len(), 16);
    }

    #[test]
    fn conflict_pair_shares_centers_and_disagrees_on_labels() {
        let cfg = SuiteConfig {
            conflict_pair: Some((0, 1)),
            ..small()
        };
        let s = gen_task_suite(&cfg).unwrap();
        let (a, b) = (&s.manifest.tasks[0], &s.manifest.tasks[1]);
        let strip = |c: &ComponentManifest| -> Vec<Vec<f32>> {
            c.centers.iter().map(|v| c.dims.iter().map(|&d| v[d]).collect()).collect()
        };
        assert_eq!(strip(a), strip(b));
        assert!(a.labels.iter().zip(&b.labels).all(|(x, y)| x != y));
    }

    #[test]
    fn k_shot_is_balanced() {
        let s = gen_task_suite(&small()).unwrap();
        let k = s.tasks[0].val.k_shot(4, 3, 9);
        assert_eq!(k.len(), 12);
        for c in 0..4 {
            assert_eq!(k.labels.iter().filter(|&&l| l == c).count(), 3);
        }
        assert_eq!(k, s.tasks[0].val.k_shot(4, 3, 9));
        // more shots than available: everything
        assert_eq!(s.tasks[0].val.k_shot(4, 100, 9).len(), 40);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "label,f0,f1\n1,0.5,-2\n0,1e-3,4\n").unwrap();
        let ex = load_csv_examples(&path).unwrap();
        assert_eq!(ex.dim, 2);
        assert_eq!(ex.labels, vec![1, 0]);
        assert_eq!(ex.inputs, vec![0.5, -2.0, 0.001, 4.0]);
        std::fs::write(&path, "label,x0\n1,0.5\n").unwrap();
        assert!(load_csv_examples(&path).is_err());
    }
}
