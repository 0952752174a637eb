//! 1×1×1 convolution (per-voxel channel mixing), weights `[out][in]`.

use crate::error::{NnError, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

pub fn forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Result<Tensor<T>> {
    let cin = input.channels();
    if weight.len() != cout * cin || bias.len() != cout {
        return Err(NnError::Shape("pointwise weight/bias shape".into()));
    }
    let vox = input.voxels();
    let mut out = Tensor::zeros(input.batch(), cout, input.spatial());
    for n in 0..input.batch() {
        let dst = out.item_mut(n);
        for co in 0..cout {
            dst[co * vox..(co + 1) * vox].fill(bias[co]);
        }
        matmul(cout, cin, vox, weight, false, input.item(n), false, T::one(), dst);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let cin = input.channels();
    let cout = grad_out.channels();
    if weight.len() != cout * cin || input.spatial() != grad_out.spatial() {
        return Err(NnError::Shape("pointwise backward shapes".into()));
    }
    let vox = input.voxels();
    let mut dx = Tensor::zeros(input.batch(), cin, input.spatial());
    let mut dw = vec![T::zero(); cout * cin];
    for n in 0..input.batch() {
        matmul(
            cin,
            cout,
            vox,
            weight,
            true,
            grad_out.item(n),
            false,
            T::zero(),
            dx.item_mut(n),
        );
        matmul(
            cout,
            vox,
            cin,
            grad_out.item(n),
            false,
            input.item(n),
            true,
            T::one(),
            &mut dw,
        );
    }
    let db = super::conv::channel_sums(grad_out);
    Ok((dx, dw, db))
}
