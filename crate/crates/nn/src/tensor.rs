//! Dense 5D tensors laid out as `[batch][channel][z][y][x]`.

use crate::error::{NnError, Result};
use crate::scalar::Scalar;

/// A batch of multi-channel 3D grids.
///
/// `spatial` is `[nx, ny, nz]`; `x` varies fastest in memory, matching the
/// voxel order of volumes on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    batch: usize,
    channels: usize,
    spatial: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, spatial: [usize; 3]) -> Self {
        let len = batch * channels * spatial.iter().product::<usize>();
        Self {
            batch,
            channels,
            spatial,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, spatial: [usize; 3], data: Vec<T>) -> Result<Self> {
        let want = batch * channels * spatial.iter().product::<usize>();
        if data.len() != want {
            return Err(NnError::Shape(format!(
                "buffer has {} elements, shape ({batch},{channels},{},{},{}) needs {want}",
                data.len(),
                spatial[0],
                spatial[1],
                spatial[2]
            )));
        }
        Ok(Self {
            batch,
            channels,
            spatial,
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            spatial: self.spatial,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.batch != b.batch || a.spatial != b.spatial {
            return Err(NnError::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let vox = a.voxels();
        let channels = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.batch * channels * vox);
        for n in 0..a.batch {
            data.extend_from_slice(a.item(n));
            data.extend_from_slice(b.item(n));
        }
        Ok(Self {
            batch: a.batch,
            channels,
            spatial: a.spatial,
            data,
        })
    }

    /// Splits off the first `first` channels; inverse of [`Self::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.channels);
        let vox = self.voxels();
        let rest = self.channels - first;
        let mut a = Self::zeros(self.batch, first, self.spatial);
        let mut b = Self::zeros(self.batch, rest, self.spatial);
        for n in 0..self.batch {
            let src = self.item(n);
            a.item_mut(n).copy_from_slice(&src[..first * vox]);
            b.item_mut(n).copy_from_slice(&src[first * vox..]);
        }
        (a, b)
    }
}

impl<T> Tensor<T> {
    /// `(batch, channels, nx, ny, nz)`.
    pub fn shape(&self) -> (usize, usize, usize, usize, usize) {
        (
            self.batch,
            self.channels,
            self.spatial[0],
            self.spatial[1],
            self.spatial[2],
        )
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.channels * self.voxels();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.channels * self.voxels();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// One channel of one batch item.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let vox = self.voxels();
        let start = (n * self.channels + c) * vox;
        &self.data[start..start + vox]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let vox = self.voxels();
        let start = (n * self.channels + c) * vox;
        &mut self.data[start..start + vox]
    }

    pub fn same_shape<U>(&self, other: &Tensor<U>) -> bool {
        self.batch == other.batch && self.channels == other.channels && self.spatial == other.spatial
    }
}
