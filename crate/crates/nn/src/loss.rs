//! Channel softmax, one-hot encoding and soft Dice losses with their
//! gradients at the logits.
//!
//! The multi-class loss is `1 − Σ_a w_a·D_a / Σ_a w_a` with the smoothed
//! per-class overlap `D_a = (2·Σ_v P·T + ε) / (Σ_v P + Σ_v T + ε)`. For a
//! batch the per-item losses are averaged. Sums are accumulated in `f64`.

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Non-negative per-class weights, not all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(NnError::Shape(
                "class weights must be finite, non-negative and not all zero".into(),
            ));
        }
        Ok(Self(w))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    /// Weights proportional to the inverse voxel count of each class in a
    /// one-hot target (classes absent from the target get the weight of a
    /// single voxel).
    pub fn inverse_volume<T: Scalar>(target: &Tensor<T>) -> Self {
        let counts = class_sums(target);
        Self(counts.iter().map(|&c| 1.0 / c.max(1.0)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn class_sums<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    (0..t.channels())
        .map(|c| {
            (0..t.batch())
                .map(|n| t.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum::<f64>())
                .sum()
        })
        .collect()
}

/// Per-voxel softmax over channels, stabilized by subtracting the max.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let c = logits.channels();
    let vox = logits.voxels();
    let mut buf = vec![0.0f64; c];
    for n in 0..logits.batch() {
        let item = out.item_mut(n);
        for v in 0..vox {
            let mut max = f64::NEG_INFINITY;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = item[k * vox + v].to_f64_lossy();
                max = max.max(*b);
            }
            let mut sum = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                sum += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                item[k * vox + v] = T::from_f64_lossy(b / sum);
            }
        }
    }
    out
}

/// Indicator tensor `(1, classes, dims)` of a label grid.
pub fn onehot<T: Scalar>(labels: &[u8], spatial: [usize; 3], classes: usize) -> Result<Tensor<T>> {
    let vox: usize = spatial.iter().product();
    if labels.len() != vox {
        return Err(NnError::Shape(format!(
            "{} labels for a {:?} grid",
            labels.len(),
            spatial
        )));
    }
    let mut t = Tensor::zeros(1, classes, spatial);
    let data = t.data_mut();
    for (v, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(NnError::LabelOutOfRange { label: l, classes });
        }
        data[l * vox + v] = T::one();
    }
    Ok(t)
}

fn check_pair<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, weights: &ClassWeights, eps: f64) -> Result<()> {
    if !probs.same_shape(target) {
        return Err(NnError::Shape(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    if weights.len() != probs.channels() {
        return Err(NnError::Shape(format!(
            "{} class weights for {} channels",
            weights.len(),
            probs.channels()
        )));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NnError::Shape("smoothing epsilon must be > 0".into()));
    }
    if !probs.data().iter().chain(target.data()).all(|v| v.is_finite()) {
        return Err(NnError::NonFinite("dice loss input"));
    }
    Ok(())
}

/// `(Σ P·T, Σ P, Σ T)` for every class of batch item `n`.
fn overlap_terms<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, n: usize) -> Vec<(f64, f64, f64)> {
    (0..probs.channels())
        .map(|a| {
            let (mut i, mut sp, mut st) = (0.0, 0.0, 0.0);
            for (&p, &t) in probs.plane(n, a).iter().zip(target.plane(n, a)) {
                let (p, t) = (p.to_f64_lossy(), t.to_f64_lossy());
                i += p * t;
                sp += p;
                st += t;
            }
            (i, sp, st)
        })
        .collect()
}

/// Weighted multi-class soft Dice loss.
pub fn msdl<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, weights: &ClassWeights, eps: f64) -> Result<f64> {
    check_pair(probs, target, weights, eps)?;
    let w = weights.as_slice();
    let wsum: f64 = w.iter().sum();
    let mut total = 0.0;
    for n in 0..probs.batch() {
        let terms = overlap_terms(probs, target, n);
        let score: f64 = terms
            .iter()
            .zip(w)
            .map(|(&(i, sp, st), &wa)| wa * (2.0 * i + eps) / (sp + st + eps))
            .sum();
        total += 1.0 - score / wsum;
    }
    Ok(total / probs.batch() as f64)
}

/// Loss value and its gradient with respect to the pre-softmax logits.
pub fn msdl_grad<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    weights: &ClassWeights,
    eps: f64,
) -> Result<(f64, Tensor<T>)> {
    let loss = msdl(probs, target, weights, eps)?;
    let w = weights.as_slice();
    let wsum: f64 = w.iter().sum();
    let batch = probs.batch() as f64;
    let c = probs.channels();
    let vox = probs.voxels();
    let mut grad = Tensor::zeros(probs.batch(), c, probs.spatial());
    let mut dp = vec![0.0f64; c];
    let mut pv = vec![0.0f64; c];
    for n in 0..probs.batch() {
        let terms = overlap_terms(probs, target, n);
        // dL/dP_{a,v} = coef_a · (2 T_{a,v} · den_a − num_a) / den_a²
        let coefs: Vec<(f64, f64, f64)> = terms
            .iter()
            .zip(w)
            .map(|(&(i, sp, st), &wa)| (-wa / (wsum * batch), 2.0 * i + eps, sp + st + eps))
            .collect();
        let p_item = probs.item(n);
        let t_item = target.item(n);
        let g_item = grad.item_mut(n);
        for v in 0..vox {
            let mut dot = 0.0;
            for a in 0..c {
                let (coef, num, den) = coefs[a];
                let t = t_item[a * vox + v].to_f64_lossy();
                pv[a] = p_item[a * vox + v].to_f64_lossy();
                dp[a] = coef * (2.0 * t * den - num) / (den * den);
                dot += pv[a] * dp[a];
            }
            for a in 0..c {
                g_item[a * vox + v] = T::from_f64_lossy(pv[a] * (dp[a] - dot));
            }
        }
    }
    Ok((loss, grad))
}

fn binary_target<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.channels() != 2
        || target.channels() != 1
        || probs.batch() != target.batch()
        || probs.spatial() != target.spatial()
    {
        return Err(NnError::Shape(format!(
            "binary dice needs 2-channel probabilities and a 1-channel target, got {:?} and {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    let bg = {
        let mut t = target.clone();
        for v in t.data_mut() {
            *v = T::one() - *v;
        }
        t
    };
    Tensor::concat_channels(&bg, target)
}

/// Soft Dice loss on the foreground channel of a two-channel prediction.
/// `target` holds the `{0,1}` foreground indicator in a single channel.
pub fn binary_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    let t2 = binary_target(probs, target)?;
    msdl(probs, &t2, &ClassWeights(vec![0.0, 1.0]), eps)
}

pub fn binary_dice_grad<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>)> {
    let t2 = binary_target(probs, target)?;
    msdl_grad(probs, &t2, &ClassWeights(vec![0.0, 1.0]), eps)
}

/// Per-voxel index of the largest channel (lowest index wins ties).
pub fn argmax_channels<T: Scalar>(t: &Tensor<T>, n: usize) -> Vec<u8> {
    let vox = t.voxels();
    let item = t.item(n);
    (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..t.channels() {
                if item[c * vox + v] > item[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
