//! 2×2×2 transposed convolution with stride 2; weights `[in][out][dz][dy][dx]`.

use crate::error::{NnError, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

const OFFSETS: usize = 8;

fn offset(o: usize) -> (usize, usize, usize) {
    (o & 1, (o >> 1) & 1, o >> 2)
}

/// `[out][in]` slice of the kernel for one offset.
fn kernel_at<T: Scalar>(weight: &[T], cin: usize, cout: usize, o: usize) -> Vec<T> {
    let mut k = vec![T::zero(); cout * cin];
    for ci in 0..cin {
        for co in 0..cout {
            k[co * cin + ci] = weight[(ci * cout + co) * OFFSETS + o];
        }
    }
    k
}

pub fn forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Result<Tensor<T>> {
    let cin = input.channels();
    if weight.len() != cin * cout * OFFSETS || bias.len() != cout {
        return Err(NnError::Shape("up-convolution weight/bias shape".into()));
    }
    let [ix, iy, iz] = input.spatial();
    let (nx, ny) = (2 * ix, 2 * iy);
    let ivox = input.voxels();
    let mut out = Tensor::zeros(input.batch(), cout, [nx, ny, 2 * iz]);
    let vox = out.voxels();
    let mut y = vec![T::zero(); cout * ivox];
    for o in 0..OFFSETS {
        let k = kernel_at(weight, cin, cout, o);
        let (dx, dy, dz) = offset(o);
        for n in 0..input.batch() {
            matmul(cout, cin, ivox, &k, false, input.item(n), false, T::zero(), &mut y);
            let dst = out.item_mut(n);
            for co in 0..cout {
                let src = &y[co * ivox..(co + 1) * ivox];
                let plane = &mut dst[co * vox..(co + 1) * vox];
                for z in 0..iz {
                    for yy in 0..iy {
                        let row = &src[(z * iy + yy) * ix..][..ix];
                        let base = ((2 * z + dz) * ny + 2 * yy + dy) * nx + dx;
                        for (x, &v) in row.iter().enumerate() {
                            plane[base + 2 * x] = v + bias[co];
                        }
                    }
                }
            }
        }
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
    let [ix, iy, iz] = input.spatial();
    if grad_out.spatial() != [2 * ix, 2 * iy, 2 * iz] || weight.len() != cin * cout * OFFSETS {
        return Err(NnError::Shape("up-convolution backward shapes".into()));
    }
    let (nx, ny) = (2 * ix, 2 * iy);
    let ivox = input.voxels();
    let vox = grad_out.voxels();
    let mut dx_t = Tensor::zeros(input.batch(), cin, input.spatial());
    let mut dw = vec![T::zero(); weight.len()];
    let mut gathered = vec![T::zero(); cout * ivox];
    let mut dwo = vec![T::zero(); cout * cin];
    for o in 0..OFFSETS {
        let k = kernel_at(weight, cin, cout, o);
        let (ox, oy, oz) = offset(o);
        dwo.fill(T::zero());
        for n in 0..input.batch() {
            let g = grad_out.item(n);
            for co in 0..cout {
                let plane = &g[co * vox..(co + 1) * vox];
                let dst = &mut gathered[co * ivox..(co + 1) * ivox];
                for z in 0..iz {
                    for yy in 0..iy {
                        let base = ((2 * z + oz) * ny + 2 * yy + oy) * nx + ox;
                        let row = &mut dst[(z * iy + yy) * ix..][..ix];
                        for (x, r) in row.iter_mut().enumerate() {
                            *r = plane[base + 2 * x];
                        }
                    }
                }
            }
            matmul(cin, cout, ivox, &k, true, &gathered, false, T::one(), dx_t.item_mut(n));
            matmul(
                cout,
                ivox,
                cin,
                &gathered,
                false,
                input.item(n),
                true,
                T::one(),
                &mut dwo,
            );
        }
        for ci in 0..cin {
            for co in 0..cout {
                dw[(ci * cout + co) * OFFSETS + o] = dwo[co * cin + ci];
            }
        }
    }
    let db = super::conv::channel_sums(grad_out);
    Ok((dx_t, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_input_voxel_paints_a_2x2x2_block() {
        let input = Tensor::from_vec(1, 1, [1, 1, 1], vec![2.0f64]).unwrap();
        let weight: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let out = forward(&input, &weight, &[0.5], 1).unwrap();
        assert_eq!(out.shape(), (1, 1, 2, 2, 2));
        let want: Vec<f64> = (0..8).map(|v| 2.0 * v as f64 + 0.5).collect();
        assert_eq!(out.data(), want.as_slice());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let cin = 3;
        let cout = 2;
        let x: Vec<f64> = (0..cin * 12).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.5).collect();
        let x = Tensor::from_vec(1, cin, [3, 2, 2], x).unwrap();
        let w: Vec<f64> = (0..cin * cout * 8)
            .map(|i| ((i * 5 % 13) as f64) / 13.0 - 0.4)
            .collect();
        let g: Vec<f64> = (0..cout * 96).map(|i| ((i * 3 % 17) as f64) / 17.0 - 0.5).collect();
        let g = Tensor::from_vec(1, cout, [6, 4, 4], g).unwrap();
        let y = forward(&x, &w, &[0.0, 0.0], cout).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let (dx, dw, _) = backward(&x, &w, &g).unwrap();
        let r1: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let r2: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - r1).abs() < 1e-10);
        assert!((lhs - r2).abs() < 1e-10);
    }
}
