//! Pipeline configuration (TOML). Every key has a default; a file only
//! needs the values it overrides.

use std::path::{Path, PathBuf};

use cascade_nn::UNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::patch::PatchSpec;
use crate::phantom::CohortSpec;
use crate::prior::PriorOptions;
use crate::volume::Spacing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Holds `images/<id>.nii[.gz]` and `labels/<id>.nii[.gz]`.
    pub data_dir: PathBuf,
    /// Root of every generated artifact.
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            work_dir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeConfig {
    pub window_lo: f64,
    pub window_hi: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            window_lo: -175.0,
            window_hi: 250.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Cases held out from cross-validation for testing.
    pub test_cases: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_cases: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Uniform,
    /// Inverse class volume of each training target.
    InverseVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseConfig {
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub levels: usize,
    pub base_width: usize,
    pub class_weights: WeightScheme,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            spacing: [2.0, 2.0, 6.0],
            dims: [168, 168, 64],
            epochs: 100,
            lr: 1e-4,
            batch: 1,
            levels: 4,
            base_width: 8,
            class_weights: WeightScheme::Uniform,
        }
    }
}

impl CoarseConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: crate::NUM_ORGANS + 1,
            levels: self.levels,
            base_width: self.base_width,
            ..UNetConfig::coarse()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub patch_dims: [usize; 3],
    pub patches_per_organ: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub levels: usize,
    pub base_width: usize,
    /// Normalized intensity for window voxels outside the volume.
    pub fill_value: f32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            patch_dims: [128, 128, 64],
            patches_per_organ: 50,
            epochs: 5,
            lr: 1e-4,
            batch: 2,
            levels: 4,
            base_width: 8,
            fill_value: 0.0,
        }
    }
}

impl RefineConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 2,
            levels: self.levels,
            base_width: self.base_width,
            ..UNetConfig::refine()
        }
    }

    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            dims: self.patch_dims,
            patches_per_organ: self.patches_per_organ,
            fill_value: self.fill_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub normalize: NormalizeConfig,
    pub split: SplitConfig,
    pub coarse: CoarseConfig,
    pub refine: RefineConfig,
    pub prior: PriorOptions,
    pub phantom: CohortSpec,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SegError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SegError::Config(e.to_string()))
    }

    pub fn coarse_spacing(&self) -> Result<Spacing> {
        Spacing::from_array(self.coarse.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse_spacing()?;
        crate::volume::check_dims(self.coarse.dims)?;
        if self.normalize.window_lo >= self.normalize.window_hi {
            return Err(SegError::InvalidWindow {
                lo: self.normalize.window_lo,
                hi: self.normalize.window_hi,
            });
        }
        let bad = |what: &str| Err(SegError::Config(what.to_string()));
        if self.coarse.batch == 0 || self.refine.batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.coarse.lr > 0.0 && self.refine.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        let c = self.coarse.unet();
        c.validate()?;
        let r = self.refine.unet();
        r.validate()?;
        let m = c.size_multiple();
        if self.coarse.dims.iter().any(|d| d % m != 0) {
            return Err(SegError::Config(format!(
                "coarse dims {:?} must be multiples of {m} for {} levels",
                self.coarse.dims, self.coarse.levels
            )));
        }
        let m = r.size_multiple();
        if self.refine.patch_dims.iter().any(|d| d % m != 0) {
            return Err(SegError::Config(format!(
                "patch dims {:?} must be multiples of {m} for {} levels",
                self.refine.patch_dims, self.refine.levels
            )));
        }
        self.refine.patch_spec().validate()
    }
}
