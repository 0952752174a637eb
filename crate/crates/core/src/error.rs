use std::path::PathBuf;

use cascade_nn::NnError;
use thiserror::Error;

use crate::organ::OrganId;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("{path}: malformed NIfTI header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: unsupported NIfTI datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },
    #[error("label value {value} out of range 0..=13")]
    LabelOutOfRange { value: f64 },
    #[error("invalid spacing {0:?}: every component must be positive and finite")]
    InvalidSpacing([f64; 3]),
    #[error("invalid dims {0:?}: every component must be >= 1")]
    InvalidDims([usize; 3]),
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),
    #[error("intensity window must satisfy lo < hi, got ({lo}, {hi})")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("trilinear interpolation is not defined for label volumes")]
    InterpolationMode,
    #[error("organ id {0} outside 1..=13")]
    InvalidOrgan(u8),
    #[error("organ {0} missing from the prior, skipped")]
    OrganMissing(OrganId),
    #[error("patch at origin {origin:?} lies entirely outside the volume")]
    PatchOutsideVolume { origin: [i64; 3] },
    #[error("patch prediction value {0} is not binary")]
    NonBinaryPrediction(u8),
    #[error("invalid patch spec: {0}")]
    InvalidPatchSpec(String),
    #[error("cohort needs at least {needed} cases, got {got}")]
    TooFewCases { needed: usize, got: usize },
    #[error("cannot place {organs} non-overlapping organs after {tries} attempts")]
    PhantomPlacement { organs: usize, tries: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("unmatched case ids: {0:?}")]
    UnmatchedCases(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SegError {
    /// Short stable identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            SegError::MalformedHeader { .. } => "malformed_header",
            SegError::UnsupportedDatatype { .. } => "unsupported_datatype",
            SegError::LabelOutOfRange { .. } => "label_out_of_range",
            SegError::InvalidSpacing(_) => "invalid_spacing",
            SegError::InvalidDims(_) => "invalid_dims",
            SegError::DimsMismatch(_) => "dims_mismatch",
            SegError::InvalidWindow { .. } => "invalid_window",
            SegError::InterpolationMode => "interpolation_mode",
            SegError::InvalidOrgan(_) => "invalid_organ",
            SegError::OrganMissing(_) => "organ_missing",
            SegError::PatchOutsideVolume { .. } => "patch_outside_volume",
            SegError::NonBinaryPrediction(_) => "non_binary_prediction",
            SegError::InvalidPatchSpec(_) => "invalid_patch_spec",
            SegError::TooFewCases { .. } => "too_few_cases",
            SegError::PhantomPlacement { .. } => "phantom_placement",
            SegError::Empty(_) => "empty_input",
            SegError::Diverged { .. } => "diverged",
            SegError::UnmatchedCases(_) => "unmatched_cases",
            SegError::Config(_) => "config",
            SegError::Manifest(_) => "manifest",
            SegError::Nn(_) => "network",
            SegError::Json(_) => "json",
            SegError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = SegError> = std::result::Result<T, E>;
