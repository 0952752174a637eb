//! 2×2×2 max pooling with stride 2.

use crate::error::{NnError, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pools every channel; also returns the winning offset (0..8) per output voxel.
pub fn forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let [nx, ny, nz] = input.spatial();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(NnError::Shape(format!(
            "max pooling needs even dims, got {:?}",
            input.spatial()
        )));
    }
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let planes = input.batch() * input.channels();
    let results = par::map_range(planes, |p| {
        let (n, c) = (p / input.channels(), p % input.channels());
        let src = input.plane(n, c);
        let mut out = Vec::with_capacity(ox * oy * oz);
        let mut arg = Vec::with_capacity(ox * oy * oz);
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0u8;
                    for o in 0..8u8 {
                        let (dx, dy, dz) = ((o & 1) as usize, ((o >> 1) & 1) as usize, (o >> 2) as usize);
                        let v = src[((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * x + dx];
                        if v > best {
                            best = v;
                            best_i = o;
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
        (out, arg)
    });
    let mut data = Vec::with_capacity(planes * ox * oy * oz);
    let mut argmax = Vec::with_capacity(planes * ox * oy * oz);
    for (o, a) in results {
        data.extend(o);
        argmax.extend(a);
    }
    Ok((
        Tensor::from_vec(input.batch(), input.channels(), [ox, oy, oz], data)?,
        argmax,
    ))
}

/// Routes each output gradient back to the voxel that won the max.
pub fn backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[u8], input_dims: [usize; 3]) -> Tensor<T> {
    let [nx, ny, _] = input_dims;
    let [ox, oy, oz] = grad_out.spatial();
    let ovox = grad_out.voxels();
    let mut grad_in = Tensor::zeros(grad_out.batch(), grad_out.channels(), input_dims);
    let vox = grad_in.voxels();
    par::for_each_chunk_mut(grad_in.data_mut(), vox, |p, dst| {
        let (n, c) = (p / grad_out.channels(), p % grad_out.channels());
        let g = grad_out.plane(n, c);
        let arg = &argmax[p * ovox..(p + 1) * ovox];
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let i = (z * oy + y) * ox + x;
                    let o = arg[i];
                    let (dx, dy, dz) = ((o & 1) as usize, ((o >> 1) & 1) as usize, (o >> 2) as usize);
                    dst[((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * x + dx] = g[i];
                }
            }
        }
    });
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_max_and_routes_gradient() {
        let data: Vec<f32> = (0..8).map(|v| [3.0, 1.0, 7.0, 2.0, 0.0, 5.0, 4.0, 6.0][v]).collect();
        let t = Tensor::from_vec(1, 1, [2, 2, 2], data).unwrap();
        let (out, arg) = forward(&t).unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert_eq!(arg, vec![2]);
        let g = Tensor::from_vec(1, 1, [1, 1, 1], vec![1.5f32]).unwrap();
        let gi = backward(&g, &arg, [2, 2, 2]);
        assert_eq!(gi.data(), &[0.0, 0.0, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_are_rejected() {
        let t = Tensor::<f32>::zeros(1, 1, [3, 2, 2]);
        assert!(forward(&t).is_err());
    }
}
