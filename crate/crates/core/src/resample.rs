//! Physical-space resampling, centred pad/crop with an invertible record, and
//! intensity windowing.
//!
//! Voxel `i` covers `[i·s, (i+1)·s)` mm, so its centre sits at `(i + ½)·s`.
//! An output voxel centre maps to the continuous input index
//! `u = (j + ½)·s_out / s_in − ½`, clamped to the grid.

use serde::{Deserialize, Serialize};

use cascade_nn::par;

use crate::error::{Result, SegError};
use crate::volume::{check_dims, ImageVolume, LabelVolume, Spacing, Volume, Voxel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Output size that never loses physical extent.
pub fn resampled_dims(dims: [usize; 3], from: Spacing, to: Spacing) -> [usize; 3] {
    let (f, t) = (from.as_array(), to.as_array());
    let mut out = [0; 3];
    for a in 0..3 {
        let exact = dims[a] as f64 * f[a] / t[a];
        // guard against 0.8·250/2 evaluating to 100.00000000000001
        let snapped = exact.round();
        out[a] = if (exact - snapped).abs() < 1e-9 {
            snapped
        } else {
            exact.ceil()
        } as usize;
        out[a] = out[a].max(1);
    }
    out
}

struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
    nearest: Vec<usize>,
}

fn axis_map(n_in: usize, n_out: usize, ratio: f64) -> AxisMap {
    let mut m = AxisMap {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        frac: Vec::with_capacity(n_out),
        nearest: Vec::with_capacity(n_out),
    };
    let max = (n_in - 1) as f64;
    for j in 0..n_out {
        let u = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
        let lo = u.floor();
        m.lo.push(lo as usize);
        m.hi.push((lo as usize + 1).min(n_in - 1));
        m.frac.push(u - lo);
        m.nearest.push(((u + 0.5).floor() as usize).min(n_in - 1));
    }
    m
}

/// Resamples onto an explicit grid with the given spacing and dims.
pub fn resample_to_grid<T: Voxel>(
    vol: &Volume<T>,
    spacing: Spacing,
    dims: [usize; 3],
    mode: Interp,
) -> Result<Volume<T>> {
    spacing.validate()?;
    check_dims(dims)?;
    if mode == Interp::Trilinear && !T::CONTINUOUS {
        return Err(SegError::InterpolationMode);
    }
    let src_dims = vol.dims();
    let (from, to) = (vol.spacing().as_array(), spacing.as_array());
    let maps: Vec<AxisMap> = (0..3)
        .map(|a| axis_map(src_dims[a], dims[a], to[a] / from[a]))
        .collect();
    let plane = dims[0] * dims[1];
    let mut out = vec![T::default(); plane * dims[2]];
    let src = vol.data();
    let (sx, sxy) = (src_dims[0], src_dims[0] * src_dims[1]);
    par::for_each_chunk_mut(&mut out, plane, |z, dst| {
        let (mx, my, mz) = (&maps[0], &maps[1], &maps[2]);
        match mode {
            Interp::Nearest => {
                let zo = mz.nearest[z] * sxy;
                for y in 0..dims[1] {
                    let yo = zo + my.nearest[y] * sx;
                    for x in 0..dims[0] {
                        dst[y * dims[0] + x] = src[yo + mx.nearest[x]];
                    }
                }
            }
            Interp::Trilinear => {
                let (z0, z1, fz) = (mz.lo[z] * sxy, mz.hi[z] * sxy, mz.frac[z]);
                for y in 0..dims[1] {
                    let (y0, y1, fy) = (my.lo[y] * sx, my.hi[y] * sx, my.frac[y]);
                    for x in 0..dims[0] {
                        let (x0, x1, fx) = (mx.lo[x], mx.hi[x], mx.frac[x]);
                        let at = |o: usize| src[o].to_f64();
                        let c00 = at(z0 + y0 + x0) * (1.0 - fx) + at(z0 + y0 + x1) * fx;
                        let c01 = at(z0 + y1 + x0) * (1.0 - fx) + at(z0 + y1 + x1) * fx;
                        let c10 = at(z1 + y0 + x0) * (1.0 - fx) + at(z1 + y0 + x1) * fx;
                        let c11 = at(z1 + y1 + x0) * (1.0 - fx) + at(z1 + y1 + x1) * fx;
                        let c0 = c00 * (1.0 - fy) + c01 * fy;
                        let c1 = c10 * (1.0 - fy) + c11 * fy;
                        dst[y * dims[0] + x] = T::from_f64(c0 * (1.0 - fz) + c1 * fz);
                    }
                }
            }
        }
    });
    Volume::new(dims, spacing, out)
}

/// Resamples to a new spacing; output dims are `ceil(dim · old / new)`.
pub fn resample<T: Voxel>(vol: &Volume<T>, target: Spacing, mode: Interp) -> Result<Volume<T>> {
    target.validate()?;
    let dims = resampled_dims(vol.dims(), vol.spacing(), target);
    resample_to_grid(vol, target, dims, mode)
}

/// Voxels removed (`crop_*`) or added (`pad_*`) at each end of one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AxisAdjust {
    pub crop_lo: usize,
    pub crop_hi: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

/// How [`pad_crop`] changed a volume, enough to undo it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPadRecord {
    pub axes: [AxisAdjust; 3],
    pub source: [usize; 3],
    pub target: [usize; 3],
}

impl CropPadRecord {
    pub fn identity(dims: [usize; 3]) -> Self {
        Self {
            axes: [AxisAdjust::default(); 3],
            source: dims,
            target: dims,
        }
    }

    /// Centred split with the odd voxel on the high side.
    pub fn centered(source: [usize; 3], target: [usize; 3]) -> Self {
        let mut axes = [AxisAdjust::default(); 3];
        for a in 0..3 {
            if source[a] > target[a] {
                let excess = source[a] - target[a];
                axes[a].crop_lo = excess / 2;
                axes[a].crop_hi = excess - excess / 2;
            } else {
                let deficit = target[a] - source[a];
                axes[a].pad_lo = deficit / 2;
                axes[a].pad_hi = deficit - deficit / 2;
            }
        }
        Self { axes, source, target }
    }

    pub fn is_consistent(&self) -> bool {
        (0..3).all(|a| {
            let r = &self.axes[a];
            self.source[a] + r.pad_lo + r.pad_hi == self.target[a] + r.crop_lo + r.crop_hi
                && !(r.crop_lo > 0 && r.pad_lo > 0)
                && !(r.crop_hi > 0 && r.pad_hi > 0)
        })
    }

    /// Offset added to a source coordinate to get the target coordinate.
    pub fn shift(&self) -> [i64; 3] {
        let mut s = [0; 3];
        for (a, v) in s.iter_mut().enumerate() {
            *v = self.axes[a].pad_lo as i64 - self.axes[a].crop_lo as i64;
        }
        s
    }

    pub fn inverse(&self) -> Self {
        let mut axes = [AxisAdjust::default(); 3];
        for (a, r) in self.axes.iter().enumerate() {
            axes[a] = AxisAdjust {
                crop_lo: r.pad_lo,
                crop_hi: r.pad_hi,
                pad_lo: r.crop_lo,
                pad_hi: r.crop_hi,
            };
        }
        Self {
            axes,
            source: self.target,
            target: self.source,
        }
    }
}

/// Copies `vol` into a grid of `record.target` dims shifted per the record.
fn apply_record<T: Voxel>(vol: &Volume<T>, record: &CropPadRecord, fill: T) -> Result<Volume<T>> {
    if vol.dims() != record.source || !record.is_consistent() {
        return Err(SegError::DimsMismatch(format!(
            "record for {:?} → {:?} applied to a {:?} volume",
            record.source,
            record.target,
            vol.dims()
        )));
    }
    let t = record.target;
    let shift = record.shift();
    let mut out = Volume::filled(t, vol.spacing(), fill)?;
    let src = vol.dims();
    for z in 0..t[2] {
        let sz = z as i64 - shift[2];
        if sz < 0 || sz >= src[2] as i64 {
            continue;
        }
        for y in 0..t[1] {
            let sy = y as i64 - shift[1];
            if sy < 0 || sy >= src[1] as i64 {
                continue;
            }
            let x0 = (shift[0].max(0)) as usize;
            let x1 = ((src[0] as i64 + shift[0]).min(t[0] as i64)) as usize;
            if x0 >= x1 {
                continue;
            }
            let sx0 = (x0 as i64 - shift[0]) as usize;
            let s_off = vol.index(sx0, sy as usize, sz as usize);
            let d_off = out.index(x0, y, z);
            let n = x1 - x0;
            out.data_mut()[d_off..d_off + n].copy_from_slice(&vol.data()[s_off..s_off + n]);
        }
    }
    Ok(out)
}

/// Centres the volume in a grid of `target` dims, cropping or padding with
/// `fill` per axis.
pub fn pad_crop<T: Voxel>(vol: &Volume<T>, target: [usize; 3], fill: T) -> Result<(Volume<T>, CropPadRecord)> {
    check_dims(target)?;
    let record = CropPadRecord::centered(vol.dims(), target);
    Ok((apply_record(vol, &record, fill)?, record))
}

/// Undoes [`pad_crop`]; voxels that were cropped away come back as `fill`.
pub fn undo_pad_crop<T: Voxel>(vol: &Volume<T>, record: &CropPadRecord, fill: T) -> Result<Volume<T>> {
    apply_record(vol, &record.inverse(), fill)
}

/// Maps a coarse-grid label prediction back onto the native grid: undo the
/// pad/crop, then nearest-neighbour resample to `native_dims`.
pub fn restore_native(
    labels_coarse: &LabelVolume,
    record: &CropPadRecord,
    native_spacing: Spacing,
    native_dims: [usize; 3],
) -> Result<LabelVolume> {
    let uncropped = undo_pad_crop(labels_coarse, record, 0)?;
    resample_to_grid(&uncropped, native_spacing, native_dims, Interp::Nearest)
}

/// Clamps to `[lo, hi]` HU and maps affinely onto `[0, 1]`.
pub fn normalize_intensity(vol: &ImageVolume, lo: f64, hi: f64) -> Result<ImageVolume> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(SegError::InvalidWindow { lo, hi });
    }
    let width = hi - lo;
    Ok(vol.map(|v| ((v as f64).clamp(lo, hi) - lo) as f32 / width as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(a: f64, b: f64, c: f64) -> Spacing {
        Spacing::new(a, b, c).unwrap()
    }

    #[test]
    fn identity_spacing_is_voxel_exact() {
        let s = sp(0.8, 0.8, 3.0);
        let v = Volume::new([5, 4, 3], s, (0..60).map(|i| (i as f32).sqrt()).collect()).unwrap();
        assert_eq!(resample(&v, s, Interp::Trilinear).unwrap(), v);
        let l = v.map(|x| (x as u8) % 14);
        assert_eq!(resample(&l, s, Interp::Nearest).unwrap(), l);
    }

    #[test]
    fn labels_reject_trilinear() {
        let l = Volume::<u8>::filled([2, 2, 2], sp(1.0, 1.0, 1.0), 0).unwrap();
        assert!(matches!(
            resample(&l, sp(2.0, 2.0, 2.0), Interp::Trilinear),
            Err(SegError::InterpolationMode)
        ));
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn ceil_output_dims() {
        assert_eq!(
            resampled_dims([205, 205, 50], sp(0.8, 0.8, 5.0), sp(2.0, 2.0, 6.0)),
            [82, 82, 42]
        );
        assert_eq!(
            resampled_dims([512, 512, 80], sp(0.7, 0.7, 2.5), sp(2.0, 2.0, 6.0)),
            [180, 180, 34]
        );
        assert_eq!(
            resampled_dims([250, 1, 1], sp(0.8, 1.0, 1.0), sp(2.0, 1.0, 1.0)),
            [100, 1, 1]
        );
    }

    #[test]
    fn centered_split_arithmetic() {
        let r = CropPadRecord::centered([205, 205, 50], [168, 168, 64]);
        assert_eq!((r.axes[0].crop_lo, r.axes[0].crop_hi), (18, 19));
        assert_eq!((r.axes[1].crop_lo, r.axes[1].crop_hi), (18, 19));
        assert_eq!((r.axes[2].pad_lo, r.axes[2].pad_hi), (7, 7));
        assert!(r.is_consistent());
    }

    #[test]
    fn pad_crop_identity_and_inverse() {
        let s = sp(1.0, 1.0, 1.0);
        let v = Volume::new([7, 6, 5], s, (0..210).map(|i| i as f32).collect()).unwrap();
        let (same, rec) = pad_crop(&v, [7, 6, 5], -1.0).unwrap();
        assert_eq!(same, v);
        assert_eq!(rec, CropPadRecord::identity([7, 6, 5]));

        let (out, rec) = pad_crop(&v, [4, 9, 5], -1.0).unwrap();
        assert_eq!(out.dims(), [4, 9, 5]);
        assert_eq!(out.get(0, 0, 0), -1.0); // padded row
        assert_eq!(out.get(0, 1, 0), v.get(1, 0, 0)); // x cropped by 1, y padded by 1
        let back = undo_pad_crop(&out, &rec, -1.0).unwrap();
        assert_eq!(back.dims(), v.dims());
        for z in 0..5 {
            for y in 0..6 {
                for x in 1..5 {
                    assert_eq!(back.get(x, y, z), v.get(x, y, z));
                }
                assert_eq!(back.get(0, y, z), -1.0);
            }
        }
    }

    #[test]
    fn restore_rejects_wrong_record() {
        let l = Volume::<u8>::filled([4, 4, 4], sp(2.0, 2.0, 6.0), 0).unwrap();
        let rec = CropPadRecord::identity([5, 4, 4]);
        assert!(restore_native(&l, &rec, sp(1.0, 1.0, 3.0), [8, 8, 8]).is_err());
    }

    #[test]
    fn normalization_window() {
        let v = Volume::new([4, 1, 1], sp(1.0, 1.0, 1.0), vec![-175.0, 37.5, 250.0, 900.0]).unwrap();
        let n = normalize_intensity(&v, -175.0, 250.0).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert!((n.data()[1] - 0.5).abs() < 1e-7);
        assert_eq!(n.data()[2], 1.0);
        assert_eq!(n.data()[3], 1.0);
        assert!(normalize_intensity(&v, 10.0, 10.0).is_err());
    }
}
