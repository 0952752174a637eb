//! Batch normalization fused with the ReLU that follows it in every conv block.
//!
//! Statistics are per channel over the batch and all voxels; the variance used
//! for normalization is the biased one, the running estimate stores the
//! unbiased one.

use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;

/// Saved activations for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Post-ReLU output; its sign pattern is the ReLU mask.
    pub out: Tensor<T>,
}

fn channel_moments<T: Scalar>(x: &Tensor<T>) -> Vec<(f64, f64)> {
    par::map_range(x.channels(), |c| {
        let count = (x.batch() * x.voxels()) as f64;
        let mut sum = 0.0f64;
        for n in 0..x.batch() {
            sum += x.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for n in 0..x.batch() {
            sq += x
                .plane(n, c)
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        (mean, sq / count)
    })
}

fn affine_relu<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    let channels = x.channels();
    par::for_each_chunk_mut(out.data_mut(), x.voxels(), |p, plane| {
        let c = p % channels;
        for v in plane.iter_mut() {
            let y = *v * scale[c] + shift[c];
            *v = if y > T::zero() { y } else { T::zero() };
        }
    });
    out
}

pub fn forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    momentum: f64,
) -> NormCache<T> {
    let moments = channel_moments(x);
    let count = (x.batch() * x.voxels()) as f64;
    let channels = x.channels();
    let inv_std: Vec<T> = moments
        .iter()
        .map(|&(_, var)| T::from_f64_lossy(1.0 / (var + EPS).sqrt()))
        .collect();
    let means: Vec<T> = moments.iter().map(|&(m, _)| T::from_f64_lossy(m)).collect();

    let mut xhat = x.clone();
    par::for_each_chunk_mut(xhat.data_mut(), x.voxels(), |p, plane| {
        let c = p % channels;
        for v in plane.iter_mut() {
            *v = (*v - means[c]) * inv_std[c];
        }
    });
    let out = affine_relu(&xhat, gamma, beta);

    for (c, &(mean, var)) in moments.iter().enumerate() {
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        running_mean[c] = T::from_f64_lossy(momentum * running_mean[c].to_f64_lossy() + (1.0 - momentum) * mean);
        running_var[c] = T::from_f64_lossy(momentum * running_var[c].to_f64_lossy() + (1.0 - momentum) * unbiased);
    }
    NormCache { xhat, inv_std, out }
}

pub fn forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let eps = T::from_f64_lossy(EPS);
    let scale: Vec<T> = (0..x.channels())
        .map(|c| gamma[c] / (running_var[c] + eps).sqrt())
        .collect();
    let shift: Vec<T> = (0..x.channels())
        .map(|c| beta[c] - running_mean[c] * scale[c])
        .collect();
    affine_relu(x, &scale, &shift)
}

/// Returns `(grad_input, grad_gamma, grad_beta)` given the gradient at the
/// post-ReLU output.
pub fn backward<T: Scalar>(cache: &NormCache<T>, gamma: &[T], grad_out: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let channels = grad_out.channels();
    let batch = grad_out.batch();
    let count = (batch * grad_out.voxels()) as f64;
    // gradient at the pre-ReLU affine output
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(cache.out.data()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    let sums = par::map_range(channels, |c| {
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for n in 0..batch {
            for (&gv, &xh) in g.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                sg += gv.to_f64_lossy();
                sgx += (gv * xh).to_f64_lossy();
            }
        }
        (sg, sgx)
    });
    let dbeta: Vec<T> = sums.iter().map(|&(s, _)| T::from_f64_lossy(s)).collect();
    let dgamma: Vec<T> = sums.iter().map(|&(_, s)| T::from_f64_lossy(s)).collect();
    let mean_g: Vec<T> = sums.iter().map(|&(s, _)| T::from_f64_lossy(s / count)).collect();
    let mean_gx: Vec<T> = sums.iter().map(|&(_, s)| T::from_f64_lossy(s / count)).collect();

    let mut dx = g;
    let xhat = &cache.xhat;
    par::for_each_chunk_mut(dx.data_mut(), grad_out.voxels(), |p, plane| {
        let c = p % channels;
        let n = p / channels;
        let k = gamma[c] * cache.inv_std[c];
        for (v, &xh) in plane.iter_mut().zip(xhat.plane(n, c)) {
            *v = k * (*v - mean_g[c] - xh * mean_gx[c]);
        }
    });
    (dx, dgamma, dbeta)
}
