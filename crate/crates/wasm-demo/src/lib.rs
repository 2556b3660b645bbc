//! Browser demo: build a small synthetic suite, then stitch, compare and inspect it.
//!
//! Every exported function returns a JSON string; the page in `www/` draws it.

use std::cell::RefCell;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lns_core::localize::LocalizeConfig;
use lns_core::pipeline::{build_suite, mean, BuiltSuite, Localized, Method, SuiteSpec};
use lns_core::sparse::mask_jaccard;
use lns_core::toy::SgdConfig;

thread_local! {
    static SUITE: RefCell<Option<BuiltSuite>> = const { RefCell::new(None) };
}

/// A suite small enough to train in the browser in a few seconds.
pub fn demo_spec(n_tasks: usize, seed: u64) -> SuiteSpec {
    let mut spec = SuiteSpec::default().with_seed(seed);
    spec.suite.n_tasks = n_tasks.clamp(2, 6);
    spec.suite.d_in = 24;
    spec.suite.train_per_task = 128;
    spec.suite.val_per_class = 64;
    spec.suite.test_per_task = 256;
    spec.suite.pretrain_per_component = 128;
    spec.hidden = 32;
    spec.blocks = 1;
    let sgd = SgdConfig { epochs: 15, ..SgdConfig::default() };
    spec.pretrain = sgd;
    spec.finetune = sgd;
    spec
}

#[derive(Debug, Serialize)]
pub struct SuiteInfo {
    pub n_tasks: usize,
    pub n_params: usize,
    pub pretrained_acc: Vec<f64>,
    pub finetuned_acc: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct StitchView {
    pub percent: f64,
    pub per_task_acc: Vec<f64>,
    pub avg_acc: f64,
    pub finetuned_acc: Vec<f64>,
    /// Fraction of parameters the merged model changed.
    pub union_support: f64,
}

#[derive(Debug, Serialize)]
pub struct MethodScore {
    pub method: String,
    pub avg_acc: f64,
    pub per_task_acc: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct OverlapView {
    pub percent: f64,
    pub jaccard: Vec<Vec<f64>>,
}

pub fn build(n_tasks: usize, seed: u64) -> lns_core::Result<SuiteInfo> {
    let s = build_suite(&demo_spec(n_tasks, seed))?;
    let info = SuiteInfo {
        n_tasks: s.n_tasks(),
        n_params: s.pre.numel(),
        pretrained_acc: s.evaluate_all(&s.pre)?.0,
        finetuned_acc: s.finetuned_acc()?,
    };
    SUITE.with(|c| *c.borrow_mut() = Some(s));
    Ok(info)
}

fn with_suite<T>(f: impl FnOnce(&BuiltSuite) -> lns_core::Result<T>) -> lns_core::Result<T> {
    SUITE.with(|c| match c.borrow().as_ref() {
        Some(s) => f(s),
        None => Err(lns_core::Error::InvalidArgument("build a suite first".into())),
    })
}

fn dataless_all(s: &BuiltSuite, percent: f64) -> lns_core::Result<Vec<Localized>> {
    (0..s.n_tasks()).map(|t| s.localize_dataless(t, percent)).collect()
}

/// Dataless localization of every task at `percent`, stitched.
pub fn stitch_at(percent: f64) -> lns_core::Result<StitchView> {
    with_suite(|s| {
        let merged = s.stitch(&dataless_all(s, percent)?)?;
        let (per_task_acc, _) = s.evaluate_all(&merged)?;
        Ok(StitchView {
            percent,
            avg_acc: mean(&per_task_acc),
            per_task_acc,
            finetuned_acc: s.finetuned_acc()?,
            union_support: lns_core::pipeline::changed_fraction(&s.pre, &merged),
        })
    })
}

/// Every merging method at its defaults, except a shortened mask training.
pub fn compare() -> lns_core::Result<Vec<MethodScore>> {
    with_suite(|s| {
        Method::NAMES
            .iter()
            .map(|name| {
                let method = match Method::default_for(name)? {
                    Method::Lns { localize } => Method::Lns {
                        localize: LocalizeConfig { epochs: 5, shots: 32, ..localize },
                    },
                    m => m,
                };
                let r = s.merge(&method, 0)?.report;
                Ok(MethodScore {
                    method: r.method,
                    avg_acc: r.avg_acc,
                    per_task_acc: r.per_task_acc,
                })
            })
            .collect()
    })
}

/// Pairwise Jaccard similarity of the dataless masks at `percent`.
pub fn overlap(percent: f64) -> lns_core::Result<OverlapView> {
    with_suite(|s| {
        let masks: Vec<_> = dataless_all(s, percent)?.into_iter().map(|l| l.mask).collect();
        let jaccard = masks
            .iter()
            .map(|a| masks.iter().map(|b| mask_jaccard(a, b)).collect::<lns_core::Result<Vec<_>>>())
            .collect::<lns_core::Result<_>>()?;
        Ok(OverlapView { percent, jaccard })
    })
}

fn to_js<T: Serialize>(r: lns_core::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = buildSuite)]
pub fn build_suite_js(n_tasks: usize, seed: u32) -> Result<String, JsError> {
    to_js(build(n_tasks, seed as u64))
}

#[wasm_bindgen(js_name = stitchAt)]
pub fn stitch_at_js(percent: f64) -> Result<String, JsError> {
    to_js(stitch_at(percent))
}

#[wasm_bindgen(js_name = compareMethods)]
pub fn compare_js() -> Result<String, JsError> {
    to_js(compare())
}

#[wasm_bindgen(js_name = maskOverlap)]
pub fn overlap_js(percent: f64) -> Result<String, JsError> {
    to_js(overlap(percent))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operations_need_a_suite_then_work() {
        SUITE.with(|c| *c.borrow_mut() = None);
        assert!(stitch_at(5.0).is_err());
        let info = build(3, 1).unwrap();
        assert_eq!(info.n_tasks, 3);

        assert_eq!(info.pretrained_acc.len(), 3);
        let (small, large) = (stitch_at(1.0).unwrap(), stitch_at(10.0).unwrap());
        assert!(0.0 < small.union_support && small.union_support < large.union_support && large.union_support <= 0.3);

        let o = overlap(10.0).unwrap();
        for (i, row) in o.jaccard.iter().enumerate() {
            assert_eq!(row[i], 1.0);
            assert!(row.iter().all(|j| (0.0..=1.0).contains(j)));
        }

        let scores = compare().unwrap();
        assert_eq!(scores.len(), Method::NAMES.len());
        assert!(serde_json::to_string(&scores).unwrap().contains("lns-dataless"));
    }
}
