//! Axis-aligned voxel grids with physical spacing.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

/// Millimetres per voxel along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Self { sx, sy, sz };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(SegError::InvalidSpacing(self.as_array()))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sx, self.sy, self.sz]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.sx * self.sy * self.sz
    }
}

/// Element type stored in a [`Volume`].
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    /// Whether values may be blended by interpolation.
    const CONTINUOUS: bool;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Voxel for f32 {
    const CONTINUOUS: bool = true;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Voxel for u8 {
    const CONTINUOUS: bool = false;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// A 3D grid, x fastest in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    spacing: Spacing,
    data: Vec<T>,
}

/// CT intensities (HU before normalization, `[0, 1]` after).
pub type ImageVolume = Volume<f32>;
/// Organ labels, 0 = background, 1..=13 organs.
pub type LabelVolume = Volume<u8>;

pub const MAX_LABEL: u8 = 13;

pub(crate) fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        Err(SegError::InvalidDims(dims))
    } else {
        Ok(())
    }
}

impl<T: Voxel> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: Spacing, data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        spacing.validate()?;
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(SegError::DimsMismatch(format!(
                "{} voxels supplied for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: Spacing, value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Value at a signed coordinate, `None` outside the grid.
    pub fn get_checked(&self, p: [i64; 3]) -> Option<T> {
        if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a]) {
            Some(self.get(p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        self.spacing = spacing;
        Ok(self)
    }
}

impl LabelVolume {
    /// Checks every voxel is a background or organ label.
    pub fn validate_labels(&self) -> Result<()> {
        match self.data.iter().find(|&&v| v > MAX_LABEL) {
            Some(&v) => Err(SegError::LabelOutOfRange { value: v as f64 }),
            None => Ok(()),
        }
    }

    /// Indicator of `label == organ` as a new label volume of 0/1.
    pub fn indicator(&self, organ: u8) -> LabelVolume {
        self.map(|v| u8::from(v == organ))
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Spacing::new(1.0, 0.0, 1.0).is_err());
        assert!(Spacing::new(1.0, 1.0, f64::NAN).is_err());
        let s = Spacing::new(1.0, 1.0, 1.0).unwrap();
        assert!(Volume::<f32>::new([2, 2, 2], s, vec![0.0; 7]).is_err());
        assert!(Volume::<f32>::new([0, 2, 2], s, vec![]).is_err());
    }

    #[test]
    fn indexing_is_x_fastest() {
        let s = Spacing::new(1.0, 1.0, 1.0).unwrap();
        let v = Volume::<u8>::new([2, 3, 2], s, (0..12).collect()).unwrap();
        assert_eq!(v.get(1, 0, 0), 1);
        assert_eq!(v.get(0, 1, 0), 2);
        assert_eq!(v.get(0, 0, 1), 6);
        assert_eq!(v.get_checked([-1, 0, 0]), None);
        assert!(v.validate_labels().is_ok());
    }
}
