//! Layer kernels: forward and backward passes over [`Tensor`](crate::Tensor)s.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod upconv;

/// Element budget of one im2col scratch block.
const COL_BUDGET: usize = 1 << 20;
