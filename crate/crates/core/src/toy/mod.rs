//! Desk-scale differentiable model family, synthetic task suites and training.

pub mod data;
pub mod model;
pub mod train;

pub use data::{gen_task_suite, Examples, SuiteConfig, SuiteManifest, TaskData, TaskSuite};
pub use model::{backward, forward_loss, ParamKind, ToyArch};
pub use train::{evaluate, sgd_finetune, LossContext, SgdConfig};
