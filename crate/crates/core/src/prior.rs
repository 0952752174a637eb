//! Per-organ anatomical priors cut out of a coarse multi-organ prediction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::organ::OrganId;
use crate::volume::{LabelVolume, Spacing, Volume};

/// Inclusive voxel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOptions {
    /// Keep only the largest 6-connected component of each organ.
    pub largest_component: bool,
}

/// Binary mask of one organ in the coarse prediction.
///
/// The mask is stored cropped to its bounding box; an absent organ has no
/// box and an empty mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganPrior {
    pub organ: OrganId,
    pub native_dims: [usize; 3],
    pub spacing: Spacing,
    pub bbox: Option<BBox>,
    /// Indicator over `bbox` (x fastest); empty when absent.
    mask: Vec<u8>,
    voxels: usize,
}

impl OrganPrior {
    pub fn present(&self) -> bool {
        self.bbox.is_some()
    }

    /// Number of mask voxels.
    pub fn voxel_count(&self) -> usize {
        self.voxels
    }

    /// Mask value at a native coordinate (false outside the volume).
    pub fn contains(&self, p: [i64; 3]) -> bool {
        let Some(b) = self.bbox else { return false };
        if (0..3).any(|a| p[a] < b.lo[a] as i64 || p[a] > b.hi[a] as i64) {
            return false;
        }
        let e = b.extent();
        let (x, y, z) = (
            p[0] as usize - b.lo[0],
            p[1] as usize - b.lo[1],
            p[2] as usize - b.lo[2],
        );
        self.mask[(z * e[1] + y) * e[0] + x] != 0
    }

    /// Mask cropped to the bounding box, x fastest.
    pub fn bbox_mask(&self) -> &[u8] {
        &self.mask
    }

    /// Mask on the full native grid.
    pub fn full_mask(&self) -> LabelVolume {
        let mut v = Volume::filled(self.native_dims, self.spacing, 0u8).expect("valid dims");
        if let Some(b) = self.bbox {
            let e = b.extent();
            for z in 0..e[2] {
                for y in 0..e[1] {
                    for x in 0..e[0] {
                        if self.mask[(z * e[1] + y) * e[0] + x] != 0 {
                            v.set(b.lo[0] + x, b.lo[1] + y, b.lo[2] + z, 1);
                        }
                    }
                }
            }
        }
        v
    }

    /// Every mask voxel in scan order (x fastest).
    pub fn voxel_coords(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.voxels);
        if let Some(b) = self.bbox {
            let e = b.extent();
            for z in 0..e[2] {
                for y in 0..e[1] {
                    for x in 0..e[0] {
                        if self.mask[(z * e[1] + y) * e[0] + x] != 0 {
                            out.push([b.lo[0] + x, b.lo[1] + y, b.lo[2] + z]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Builds a prior from an arbitrary native-grid indicator.
    pub fn from_mask(organ: OrganId, mask: &LabelVolume) -> Self {
        build(organ, mask, |v| v != 0)
    }
}

fn build(organ: OrganId, vol: &LabelVolume, hit: impl Fn(u8) -> bool) -> OrganPrior {
    let dims = vol.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut voxels = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let row = &vol.data()[vol.index(0, y, z)..][..dims[0]];
            for (x, &v) in row.iter().enumerate() {
                if hit(v) {
                    voxels += 1;
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    if voxels == 0 {
        return OrganPrior {
            organ,
            native_dims: dims,
            spacing: vol.spacing(),
            bbox: None,
            mask: Vec::new(),
            voxels: 0,
        };
    }
    let bbox = BBox { lo, hi };
    let e = bbox.extent();
    let mut mask = vec![0u8; e[0] * e[1] * e[2]];
    for z in 0..e[2] {
        for y in 0..e[1] {
            for x in 0..e[0] {
                if hit(vol.get(lo[0] + x, lo[1] + y, lo[2] + z)) {
                    mask[(z * e[1] + y) * e[0] + x] = 1;
                }
            }
        }
    }
    OrganPrior {
        organ,
        native_dims: dims,
        spacing: vol.spacing(),
        bbox: Some(bbox),
        mask,
        voxels,
    }
}

/// Keeps the largest 6-connected component of a 0/1 volume; ties go to the
/// component found first in scan order.
pub fn largest_component(mask: &LabelVolume) -> LabelVolume {
    let dims = mask.dims();
    let n = mask.len();
    let mut comp = vec![0u32; n];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if mask.data()[start] == 0 || comp[start] != 0 {
            continue;
        }
        next += 1;
        comp[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            let mut visit = |j: usize| {
                if mask.data()[j] != 0 && comp[j] == 0 {
                    comp[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < dims[0] {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - dims[0]);
            }
            if y + 1 < dims[1] {
                visit(i + dims[0]);
            }
            if z > 0 {
                visit(i - dims[0] * dims[1]);
            }
            if z + 1 < dims[2] {
                visit(i + dims[0] * dims[1]);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let data = comp.iter().map(|&c| u8::from(c != 0 && c == best.0)).collect();
    Volume::new(dims, mask.spacing(), data).expect("same geometry")
}

/// Prior of one organ: indicator of `label == organ`, tight box, presence.
pub fn extract_prior(coarse_native: &LabelVolume, organ: OrganId) -> OrganPrior {
    extract_prior_with(coarse_native, organ, PriorOptions::default())
}

pub fn extract_prior_with(coarse_native: &LabelVolume, organ: OrganId, opts: PriorOptions) -> OrganPrior {
    let id = organ.get();
    if opts.largest_component {
        let kept = largest_component(&coarse_native.indicator(id));
        build(organ, &kept, |v| v != 0)
    } else {
        build(organ, coarse_native, |v| v == id)
    }
}

/// One prior per organ, in organ order 1..=13.
pub fn extract_all_priors(coarse_native: &LabelVolume) -> Vec<OrganPrior> {
    extract_all_priors_with(coarse_native, PriorOptions::default())
}

pub fn extract_all_priors_with(coarse_native: &LabelVolume, opts: PriorOptions) -> Vec<OrganPrior> {
    let organs: Vec<OrganId> = OrganId::all().collect();
    cascade_nn::par::map_slice(&organs, |&o| extract_prior_with(coarse_native, o, opts))
}

/// Validates labels before extraction.
pub fn checked_priors(coarse_native: &LabelVolume, opts: PriorOptions) -> Result<Vec<OrganPrior>> {
    coarse_native.validate_labels()?;
    Ok(extract_all_priors_with(coarse_native, opts))
}
