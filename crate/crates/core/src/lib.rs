//! Localize-and-Stitch model merging.
//!
//! Finetuned skills are localized to a small binary mask over each task vector,
//! either by training a sigmoid-relaxed mask with an L1 penalty or by taking the
//! largest-magnitude coordinates. The masked task vectors are then stitched onto
//! the pretrained model, averaging only where masks overlap.

mod codec;
pub mod analysis;
pub mod baselines;
pub mod bundles;
pub mod error;
pub mod localize;
pub mod pipeline;
pub mod pset;
pub mod rng;
pub mod sparse;
pub mod stitch;
pub mod toy;

pub use codec::fnv1a64;
pub use error::{Error, Result};
pub use pset::{apply_delta, compute_task_vector, fingerprint, load_pset, save_pset, ParamSet, TaskVector, Tensor};
pub use sparse::{densify, mask_apply, mask_jaccard, masked_cosine, Mask, SparseTaskVector};
pub use stitch::{graft, stitch, stitch_named, StitchState, StitchWeights};
