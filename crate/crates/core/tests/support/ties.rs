use std::collections::BTreeSet;

use lns_core::baselines::{ties_elect, ties_merge, ties_trim};
use lns_core::rng::substream;
use lns_core::{compute_task_vector, TaskVector};

use super::fixtures::{finetunes, flat, random_set};

/// Checks trim, election and disjoint mean on 1000 coordinates and 5 tasks; panics on a violation.
pub fn check_ties_invariants(seed: u64) {
    let mut rng = substream(seed, "ties");
    let shapes = [("a", vec![400]), ("b", vec![20, 30])];
    let pre = random_set(&mut rng, &shapes, 1.0);
    let fts = finetunes(&mut rng, &pre, 5);
    let mut tvs: Vec<TaskVector> = fts.iter().map(|f| compute_task_vector(&pre, f).unwrap()).collect();
    // plant exact cancellations: coordinates 0..10 of "a" hold +v in task 0 and -v in task 1, zero elsewhere
    for tv in tvs.iter_mut() {
        let mut data: Vec<Vec<f32>> = tv.delta.tensors().iter().map(|t| t.data.clone()).collect();
        for d in data[0].iter_mut().take(10) {
            *d = 0.0;
        }
        tv.delta = tv.delta.with_data(data).unwrap();
    }
    for (which, sign) in [(0usize, 1.0f32), (1, -1.0)] {
        let mut data: Vec<Vec<f32>> = tvs[which].delta.tensors().iter().map(|t| t.data.clone()).collect();
        for (j, d) in data[0].iter_mut().take(10).enumerate() {
            *d = sign * (1.0 + j as f32);
        }
        tvs[which].delta = tvs[which].delta.with_data(data).unwrap();
    }
    let k = 20.0;
    let merged = ties_merge(&pre, &tvs, k, 1.0).unwrap();

    // oracle trim: per task, the round(k% * N) largest magnitudes, ties to the lower flat index
    let n = pre.numel();
    let keep = (k / 100.0 * n as f64).round() as usize;
    let trimmed: Vec<Vec<f32>> = tvs
        .iter()
        .map(|tv| {
            let v = flat(&tv.delta);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()).then(i.cmp(&j)));
            let kept: BTreeSet<usize> = order[..keep].iter().copied().collect();
            (0..n).map(|i| if kept.contains(&i) { v[i] } else { 0.0 }).collect()
        })
        .collect();
    let lib_trim: Vec<Vec<f32>> = ties_trim(&tvs, k).unwrap().iter().map(|t| flat(&t.delta)).collect();
    assert_eq!(lib_trim, trimmed);
    let signs: Vec<i8> = ties_elect(&ties_trim(&tvs, k).unwrap()).concat();

    let (p, m) = (flat(&pre), flat(&merged));
    let mut zero_totals = 0;
    for i in 0..n {
        let total: f64 = trimmed.iter().map(|t| t[i] as f64).sum();
        let elected = signs[i];
        assert_eq!(elected as f64, if total > 0.0 { 1.0 } else if total < 0.0 { -1.0 } else { 0.0 });
        if total == 0.0 {
            zero_totals += 1;
            assert_eq!(m[i].to_bits(), p[i].to_bits(), "zero total must leave coordinate {i} at pre");
            continue;
        }
        // every value entering the mean carries the elected sign
        let agreeing: Vec<f64> = trimmed.iter().map(|t| t[i]).filter(|&v| v != 0.0 && (v > 0.0) == (elected > 0)).map(f64::from).collect();
        assert!(agreeing.iter().all(|&v| v.signum() == elected as f64));
        let want = (p[i] as f64 + agreeing.iter().sum::<f64>() / agreeing.len() as f64) as f32;
        assert_eq!(m[i].to_bits(), want.to_bits(), "coordinate {i}");
    }
    assert!(zero_totals >= 10, "planted cancellations missing: {zero_totals}");
}
