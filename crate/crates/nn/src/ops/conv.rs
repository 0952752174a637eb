//! 3×3×3 convolution with unit stride and zero "same" padding.
//!
//! Weights are laid out `[out][in][dz][dy][dx]`. The forward pass lowers
//! slabs of z-planes to columns and multiplies them with the kernel matrix.
//! The slab split depends only on the shapes involved, so the summation order
//! of every output, and therefore the result, is independent of threading.

use crate::error::{NnError, Result};
use crate::par;
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

use super::COL_BUDGET;

pub const TAPS: usize = 27;

fn planes_per_slab(k: usize, plane: usize) -> usize {
    (COL_BUDGET / (k * plane).max(1)).max(1)
}

/// Lowers planes `z0..z1` of one batch item into a `[cin·27][slab voxels]` matrix.
fn im2col<T: Scalar>(input: &[T], cin: usize, dims: [usize; 3], z0: usize, z1: usize, col: &mut [T]) {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let vox = plane * nz;
    let n = plane * (z1 - z0);
    debug_assert_eq!(col.len(), cin * TAPS * n);
    for ci in 0..cin {
        let src = &input[ci * vox..(ci + 1) * vox];
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let row = (ci * TAPS + (dz * 3 + dy) * 3 + dx) * n;
                    let dst = &mut col[row..row + n];
                    for z in z0..z1 {
                        let zo = (z - z0) * plane;
                        let sz = z as isize + dz as isize - 1;
                        if sz < 0 || sz >= nz as isize {
                            dst[zo..zo + plane].fill(T::zero());
                            continue;
                        }
                        let sz = sz as usize;
                        for y in 0..ny {
                            let d = &mut dst[zo + y * nx..zo + (y + 1) * nx];
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                d.fill(T::zero());
                                continue;
                            }
                            let s = &src[sz * plane + sy as usize * nx..][..nx];
                            match dx {
                                0 => {
                                    d[0] = T::zero();
                                    d[1..].copy_from_slice(&s[..nx - 1]);
                                }
                                1 => d.copy_from_slice(s),
                                _ => {
                                    d[..nx - 1].copy_from_slice(&s[1..]);
                                    d[nx - 1] = T::zero();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct SlabPlan {
    per_slab: usize,
    slabs: usize,
}

impl SlabPlan {
    fn new(k: usize, dims: [usize; 3]) -> Self {
        let per_slab = planes_per_slab(k, dims[0] * dims[1]);
        Self {
            per_slab,
            slabs: dims[2].div_ceil(per_slab),
        }
    }

    fn range(&self, s: usize, nz: usize) -> (usize, usize) {
        let z0 = s * self.per_slab;
        (z0, (z0 + self.per_slab).min(nz))
    }
}

fn check_weight<T>(weight: &[T], cout: usize, cin: usize) -> Result<()> {
    if weight.len() != cout * cin * TAPS {
        return Err(NnError::Shape(format!(
            "conv weight has {} elements, expected {cout}x{cin}x27",
            weight.len()
        )));
    }
    Ok(())
}

/// Same-padded 3×3×3 convolution of every batch item.
pub fn forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: Option<&[T]>, cout: usize) -> Result<Tensor<T>> {
    let cin = input.channels();
    check_weight(weight, cout, cin)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(NnError::Shape("conv bias length".into()));
        }
    }
    let dims = input.spatial();
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let vox = plane * nz;
    let k = cin * TAPS;
    let plan = SlabPlan::new(k, dims);
    let batch = input.batch();

    let blocks = par::map_range(batch * plan.slabs, |job| {
        let (n, s) = (job / plan.slabs, job % plan.slabs);
        let (z0, z1) = plan.range(s, nz);
        let cols = plane * (z1 - z0);
        let mut col = vec![T::zero(); k * cols];
        im2col(input.item(n), cin, dims, z0, z1, &mut col);
        let mut out = vec![T::zero(); cout * cols];
        matmul(cout, k, cols, weight, false, &col, false, T::zero(), &mut out);
        out
    });

    let mut output = Tensor::zeros(batch, cout, dims);
    for (job, block) in blocks.iter().enumerate() {
        let (n, s) = (job / plan.slabs, job % plan.slabs);
        let (z0, z1) = plan.range(s, nz);
        let cols = plane * (z1 - z0);
        let item = output.item_mut(n);
        for co in 0..cout {
            let dst = &mut item[co * vox + z0 * plane..co * vox + z1 * plane];
            let src = &block[co * cols..(co + 1) * cols];
            match bias {
                Some(b) => {
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + b[co];
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    Ok(output)
}

/// Kernel for the data gradient: transposed channels, spatially flipped taps.
pub fn flipped_transpose<T: Scalar>(weight: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..TAPS {
                out[(ci * cout + co) * TAPS + (TAPS - 1 - t)] = weight[(co * cin + ci) * TAPS + t];
            }
        }
    }
    out
}

/// Gradient with respect to the convolution input.
pub fn backward_data<T: Scalar>(grad_out: &Tensor<T>, weight: &[T], cin: usize) -> Result<Tensor<T>> {
    let cout = grad_out.channels();
    check_weight(weight, cout, cin)?;
    forward(grad_out, &flipped_transpose(weight, cout, cin), None, cin)
}

/// Gradients with respect to the kernel and bias.
pub fn backward_params<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if input.batch() != grad_out.batch() || input.spatial() != grad_out.spatial() {
        return Err(NnError::Shape("conv backward input/grad mismatch".into()));
    }
    let cin = input.channels();
    let cout = grad_out.channels();
    let dims = input.spatial();
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let vox = plane * nz;
    let k = cin * TAPS;
    let plan = SlabPlan::new(k, dims);
    let batch = input.batch();

    let partials = par::map_range(batch * plan.slabs, |job| {
        let (n, s) = (job / plan.slabs, job % plan.slabs);
        let (z0, z1) = plan.range(s, nz);
        let cols = plane * (z1 - z0);
        let mut col = vec![T::zero(); k * cols];
        im2col(input.item(n), cin, dims, z0, z1, &mut col);
        let g = grad_out.item(n);
        let mut gs = vec![T::zero(); cout * cols];
        for co in 0..cout {
            gs[co * cols..(co + 1) * cols].copy_from_slice(&g[co * vox + z0 * plane..co * vox + z1 * plane]);
        }
        let mut dw = vec![T::zero(); cout * k];
        matmul(cout, cols, k, &gs, false, &col, true, T::zero(), &mut dw);
        dw
    });

    let mut dw = vec![T::zero(); cout * k];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    let db = channel_sums(grad_out);
    Ok((dw, db))
}

/// Per-channel sum over batch and space, accumulated in a fixed order.
pub fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    (0..t.channels())
        .map(|c| {
            let mut acc = 0.0f64;
            for n in 0..t.batch() {
                acc += t.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            }
            T::from_f64_lossy(acc)
        })
        .collect()
}
