//! Two-stage cascaded organ segmentation: a coarse multi-organ U-Net
//! provides per-organ priors, patch-wise binary refiners are trained around
//! them, and overlapping refined patches are fused by majority vote.

pub mod config;
mod error;
pub mod folds;
pub mod fusion;
pub mod metrics;
pub mod nifti;
pub mod organ;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod prior;
pub mod resample;
pub mod rng;
pub mod volume;

pub use cascade_nn::par;
pub use config::PipelineConfig;
pub use error::{Result, SegError};
pub use folds::{make_folds, FoldSplit};
pub use fusion::{fuse, fuse_brute_force, FusionAccumulator, PatchVote};
pub use metrics::{aggregate, dice, evaluate_case, CaseScores, CohortReport};
pub use organ::{OrganId, NUM_ORGANS};
pub use patch::{extract_patch, sample_origins, Manifest, PatchSample, PatchSpec};
pub use phantom::{gen_phantom, PhantomSpec};
pub use prior::{extract_all_priors, extract_prior, BBox, OrganPrior};
pub use resample::{pad_crop, resample, CropPadRecord, Interp};
pub use rng::SeededRng;
pub use volume::{ImageVolume, LabelVolume, Spacing, Volume};
