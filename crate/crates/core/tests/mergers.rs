//! Mergers and stitching against independent dense oracles.

mod support;

use rand::seq::SliceRandom;
use rand::Rng;

use lns_core::baselines::{
    fisher_merge, grams, regmean_merge, simple_average, task_arithmetic, ties_merge, FisherDiag, GramMatrix, GramSet,
};
use lns_core::rng::substream;
use lns_core::toy::data::random_examples;
use lns_core::toy::ToyArch;
use lns_core::{compute_task_vector, graft, mask_apply, stitch, stitch_named, Mask, ParamSet, SparseTaskVector, StitchState};

use support::fixtures::{finetunes, flat, random_set};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn ties_randomized_invariants() {
    for seed in 0..3 {
        support::ties::check_ties_invariants(seed);
    }
}

#[test]
fn ties_single_task_full_keep_is_the_finetuned_model() {
    let mut rng = substream(4, "ties1");
    let pre = random_set(&mut rng, &[("w", vec![1000])], 1.0);
    let ft = finetunes(&mut rng, &pre, 1).remove(0);
    let tv = compute_task_vector(&pre, &ft).unwrap();
    assert_eq!(ties_merge(&pre, &[tv], 100.0, 1.0).unwrap(), ft);
}

#[test]
fn task_arithmetic_is_linear_in_alpha() {
    let mut rng = substream(5, "ta");
    let pre = random_set(&mut rng, &[("w", vec![300])], 1.0);
    let tvs: Vec<_> = finetunes(&mut rng, &pre, 3).iter().map(|f| compute_task_vector(&pre, f).unwrap()).collect();
    let p = flat(&pre);
    let m1 = flat(&task_arithmetic(&pre, &tvs, 0.3).unwrap());
    let m2 = flat(&task_arithmetic(&pre, &tvs, 0.6).unwrap());
    for i in 0..p.len() {
        let (d1, d2) = (m1[i] as f64 - p[i] as f64, m2[i] as f64 - p[i] as f64);
        assert!((d2 - 2.0 * d1).abs() <= 4.0 * f32::EPSILON as f64 * p[i].abs().max(1.0) as f64);
    }
}

#[test]
fn uniform_fisher_is_simple_average() {
    let mut rng = substream(6, "fisher");
    let shapes = [("w", vec![50, 4]), ("b", vec![50])];
    let pre = random_set(&mut rng, &shapes, 1.0);
    let models = finetunes(&mut rng, &pre, 4);
    let c = random_set(&mut rng, &shapes, 1.0);
    let uniform = c.with_data(c.tensors().iter().map(|t| t.data.iter().map(|v| v.abs() + 0.5).collect()).collect()).unwrap();
    let fishers: Vec<_> = (0..4).map(|_| FisherDiag::new(uniform.clone(), 1).unwrap()).collect();
    let f = flat(&fisher_merge(&models, &fishers, 1e-8).unwrap());
    let s = flat(&simple_average(&models).unwrap());
    assert!(f.iter().zip(&s).all(|(a, b)| close(*a as f64, *b as f64, 1e-6)));
}

#[test]
fn fisher_merge_matches_per_coordinate_oracle() {
    let mut rng = substream(7, "fisher2");
    let a = random_set(&mut rng, &[("w", vec![200])], 2.0);
    let b = random_set(&mut rng, &[("w", vec![200])], 2.0);
    let fa = random_set(&mut rng, &[("w", vec![200])], 1.0);
    let fb = random_set(&mut rng, &[("w", vec![200])], 1.0);
    let abs = |p: &ParamSet| FisherDiag::new(p.with_data(vec![p.tensors()[0].data.iter().map(|v| v.abs()).collect()]).unwrap(), 1).unwrap();
    let (fa, fb) = (abs(&fa), abs(&fb));
    let eps = 1e-8;
    let m = flat(&fisher_merge(&[a.clone(), b.clone()], &[fa.clone(), fb.clone()], eps).unwrap());
    let (a, b, fa, fb) = (flat(&a), flat(&b), flat(&fa.values), flat(&fb.values));
    for i in 0..m.len() {
        let (wa, wb) = (fa[i] as f64 + eps, fb[i] as f64 + eps);
        let want = (wa * a[i] as f64 + wb * b[i] as f64) / (wa + wb);
        assert!(close(m[i] as f64, want, 1e-6));
    }
}

/// Dense Gaussian elimination with partial pivoting, as an oracle for the Cholesky solve.
#[allow(clippy::needless_range_loop)]
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..b[col].len() {
            let s: f64 = (col + 1..n).map(|k| a[col][k] * b[k][c]).sum();
            b[col][c] = (b[col][c] - s) / a[col][col];
        }
    }
    b
}

#[test]
#[allow(clippy::needless_range_loop)]
fn regmean_matches_dense_solve_on_a_toy_net() {
    let arch = ToyArch {
        d_in: 5,
        hidden: 6,
        blocks: 1,
        classes: 3,
    };
    let mut rng = substream(8, "regmean");
    let pre = arch.init(&mut rng);
    let models = finetunes(&mut rng, &pre, 2);
    let data: Vec<_> = (0..2).map(|_| random_examples(&mut rng, arch.d_in, 40, arch.classes)).collect();
    let gs: Vec<GramSet> = models.iter().zip(&data).map(|(m, d)| grams(&arch, m, d, 40).unwrap()).collect();
    let merged = regmean_merge(&models, &gs, 0.0).unwrap();
    for (li, layer) in arch.affine_layers().iter().enumerate() {
        let w0 = models[0].get(&format!("{layer}.w")).unwrap();
        let (out, inp) = (w0.shape[0], w0.shape[1]);
        let dim = inp + 1;
        let mut g = vec![vec![0.0; dim]; dim];
        let mut rhs = vec![vec![0.0; out]; dim];
        for (m, gset) in models.iter().zip(&gs) {
            let gm: &GramMatrix = &gset.layers[li];
            let (w, b) = (&m.get(&format!("{layer}.w")).unwrap().data, &m.get(&format!("{layer}.b")).unwrap().data);
            for r in 0..dim {
                for c in 0..dim {
                    g[r][c] += gm.get(r, c);
                }
                for o in 0..out {
                    let wt = |k: usize| if k < inp { w[o * inp + k] as f64 } else { b[o] as f64 };
                    rhs[r][o] += (0..dim).map(|k| gm.get(r, k) * wt(k)).sum::<f64>();
                }
            }
        }
        let sol = solve(g, rhs);
        let (mw, mb) = (&merged.get(&format!("{layer}.w")).unwrap().data, &merged.get(&format!("{layer}.b")).unwrap().data);
        for o in 0..out {
            for k in 0..inp {
                assert!(close(mw[o * inp + k] as f64, sol[k][o], 1e-4), "{layer}.w[{o},{k}]");
            }
            assert!(close(mb[o] as f64, sol[inp][o], 1e-4), "{layer}.b[{o}]");
        }
    }
    // LayerNorm parameters are averaged
    let avg = simple_average(&models).unwrap();
    assert_eq!(merged.get("block0.ln.g"), avg.get("block0.ln.g"));
}

#[test]
fn identical_grams_reduce_regmean_to_simple_average() {
    let arch = ToyArch {
        d_in: 6,
        hidden: 8,
        blocks: 2,
        classes: 3,
    };
    let mut rng = substream(9, "regmean-id");
    let pre = arch.init(&mut rng);
    let models = finetunes(&mut rng, &pre, 3);
    let data = random_examples(&mut rng, arch.d_in, 64, arch.classes);
    let g = grams(&arch, &models[0], &data, 64).unwrap();
    let gs = vec![g.clone(), g.clone(), g];
    let r = flat(&regmean_merge(&models, &gs, 0.0).unwrap());
    let s = flat(&simple_average(&models).unwrap());
    assert!(r.iter().zip(&s).all(|(a, b)| close(*a as f64, *b as f64, 1e-5)));
    // with one model the ridge is the only perturbation, and it vanishes as the ridge does
    let m0 = flat(&models[0]);
    let drift = |ridge: f64| {
        let o = flat(&regmean_merge(&models[..1], &gs[..1], ridge).unwrap());
        o.iter().zip(&m0).map(|(a, b)| (a - b).abs() as f64 / b.abs().max(1.0) as f64).fold(0.0, f64::max)
    };
    let (coarse, fine) = (drift(1e-3), drift(1e-9));
    assert!(fine < coarse && fine <= 1e-4, "ridge drift {coarse:e} -> {fine:e}");
}

/// Dense oracle: per coordinate, mean of active task values in id order, added onto pre once.
fn stitch_oracle(pre: &ParamSet, tasks: &[(String, SparseTaskVector)], template: &ParamSet) -> ParamSet {
    let mut sorted: Vec<&(String, SparseTaskVector)> = tasks.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let dense: Vec<(Vec<f32>, Vec<bool>)> = sorted
        .iter()
        .map(|(_, s)| {
            let d = flat(&lns_core::densify(s, template).unwrap().delta);
            let on = s.support().tensors.iter().flat_map(|t| (0..t.numel).map(move |j| t.get(j))).collect();
            (d, on)
        })
        .collect();
    let p = flat(pre);
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let vals: Vec<f64> = dense.iter().filter(|(_, on)| on[i]).map(|(d, _)| d[i] as f64).collect();
        out.push(if vals.is_empty() {
            p[i]
        } else {
            (p[i] as f64 + vals.iter().fold(-0.0, |a, v| a + v) / vals.len() as f64) as f32
        });
    }
    let mut k = 0;
    let data = pre
        .tensors()
        .iter()
        .map(|t| {
            let v = out[k..k + t.numel()].to_vec();
            k += t.numel();
            v
        })
        .collect();
    pre.with_data(data).unwrap()
}

fn random_mask(rng: &mut impl Rng, p: &ParamSet, density: f64) -> Mask {
    let bits: Vec<Vec<bool>> = p.tensors().iter().map(|t| (0..t.numel()).map(|_| rng.random_bool(density)).collect()).collect();
    Mask::from_bools(p, None, &bits).unwrap()
}

#[test]
fn stitch_identities() {
    let mut rng = substream(10, "stitch");
    let shapes = [("x", vec![64]), ("y", vec![8, 8])];
    let pre = random_set(&mut rng, &shapes, 1.0);
    let fts = finetunes(&mut rng, &pre, 3);
    let tvs: Vec<_> = fts.iter().map(|f| compute_task_vector(&pre, f).unwrap()).collect();
    let ones = Mask::ones(&pre, None);
    let zeros = Mask::zeros(&pre, None);

    let full: Vec<_> = tvs.iter().map(|t| mask_apply(&ones, t).unwrap()).collect();
    let st = flat(&stitch(&pre, &full).unwrap().0);
    let avg = flat(&simple_average(&fts).unwrap());
    assert!(st.iter().zip(&avg).all(|(a, b)| close(*a as f64, *b as f64, 1e-6)));

    assert_eq!(stitch(&pre, &full[..1]).unwrap().0, fts[0]);
    assert_eq!(graft(&pre, &full[0]).unwrap(), fts[0]);

    let empty: Vec<_> = tvs.iter().map(|t| mask_apply(&zeros, t).unwrap()).collect();
    assert_eq!(stitch(&pre, &empty).unwrap().0, pre);
}

#[test]
fn stitch_matches_dense_oracle_and_ignores_input_order() {
    let mut rng = substream(11, "stitch2");
    let shapes = [("x", vec![500]), ("y", vec![10, 20])];
    let pre = random_set(&mut rng, &shapes, 1.0);
    let fts = finetunes(&mut rng, &pre, 5);
    let tasks: Vec<(String, SparseTaskVector)> = fts
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let tv = compute_task_vector(&pre, f).unwrap();
            (format!("t{i}"), mask_apply(&random_mask(&mut rng, &pre, 0.3), &tv).unwrap())
        })
        .collect();
    let oracle = stitch_oracle(&pre, &tasks, &pre);
    let mut shuffled: Vec<(&str, &SparseTaskVector)> = tasks.iter().map(|(i, s)| (i.as_str(), s)).collect();
    for _ in 0..3 {
        shuffled.shuffle(&mut rng);
        let (merged, w) = stitch_named(&pre, &shuffled).unwrap();
        assert_eq!(merged, oracle);
        let union = tasks.iter().fold(vec![false; pre.numel()], |mut acc, (_, s)| {
            for (a, b) in acc.iter_mut().zip(s.support().tensors.iter().flat_map(|t| (0..t.numel).map(move |j| t.get(j)))) {
                *a |= b;
            }
            acc
        });
        assert_eq!(w.union_support(), union.iter().filter(|&&b| b).count());
    }
}

#[test]
fn incremental_restitching_equals_scratch_at_every_step() {
    let mut rng = substream(12, "continual");
    let pre = random_set(&mut rng, &[("x", vec![2000])], 1.0);
    let fts = finetunes(&mut rng, &pre, 6);
    let mut state = StitchState::new(pre.clone());
    let mut added: Vec<(String, SparseTaskVector)> = Vec::new();
    // ids deliberately out of sorted order
    for (i, f) in fts.iter().enumerate() {
        let tv = compute_task_vector(&pre, f).unwrap();
        let s = mask_apply(&random_mask(&mut rng, &pre, 0.05), &tv).unwrap();
        let id = format!("task-{}", (i * 7) % 6);
        state.add(&id, s.clone()).unwrap();
        added.push((id, s));
        let merged = state.merged().unwrap();
        assert_eq!(merged, state.restitch_from_scratch().unwrap().0);
        assert_eq!(merged, stitch_oracle(&pre, &added, &pre));
    }
    // removal restores the earlier state exactly
    let before = {
        let mut s = StitchState::new(pre.clone());
        for (id, v) in &added[..5] {
            s.add(id, v.clone()).unwrap();
        }
        s.merged().unwrap()
    };
    state.remove(&added[5].0).unwrap();
    assert_eq!(state.merged().unwrap(), before);
}
