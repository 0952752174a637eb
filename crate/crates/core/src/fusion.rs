//! Majority-vote fusion of per-organ binary patch predictions.
//!
//! Within an organ a voxel is a candidate when more than half of the
//! covering patches vote for it. Across organs the candidate with the
//! highest vote fraction wins; ties go to the larger positive count, then
//! to the lower organ id.

use crate::error::{Result, SegError};
use crate::organ::{OrganId, NUM_ORGANS};
use crate::volume::{LabelVolume, Spacing, Volume};

/// One organ's binary prediction over a patch window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchVote {
    pub organ: OrganId,
    pub origin: [i64; 3],
    pub dims: [usize; 3],
    /// 0/1 per window voxel, x fastest.
    pub pred: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Counters {
    positive: Vec<u32>,
    coverage: Vec<u32>,
}

/// Per-organ positive and coverage counts over the native grid; grids are
/// allocated on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionAccumulator {
    dims: [usize; 3],
    spacing: Spacing,
    organs: Vec<Option<Counters>>,
}

impl FusionAccumulator {
    pub fn new(dims: [usize; 3], spacing: Spacing) -> Result<Self> {
        crate::volume::check_dims(dims)?;
        Ok(Self {
            dims,
            spacing,
            organs: vec![None; NUM_ORGANS],
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Positive and coverage count of `organ` at a voxel.
    pub fn counts(&self, organ: OrganId, x: usize, y: usize, z: usize) -> (u32, u32) {
        let i = (z * self.dims[1] + y) * self.dims[0] + x;
        match &self.organs[organ.index()] {
            Some(c) => (c.positive[i], c.coverage[i]),
            None => (0, 0),
        }
    }

    /// Adds one patch. Parts of the window outside the volume are ignored.
    pub fn accumulate(&mut self, organ: OrganId, origin: [i64; 3], dims: [usize; 3], pred: &[u8]) -> Result<()> {
        let n: usize = dims.iter().product();
        if pred.len() != n {
            return Err(SegError::DimsMismatch(format!(
                "prediction holds {} voxels, window {:?} needs {n}",
                pred.len(),
                dims
            )));
        }
        if let Some(&bad) = pred.iter().find(|&&v| v > 1) {
            return Err(SegError::NonBinaryPrediction(bad));
        }
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let s = origin[a].max(0);
            let t = (origin[a] + dims[a] as i64).min(self.dims[a] as i64);
            if s >= t {
                return Err(SegError::PatchOutsideVolume { origin });
            }
            lo[a] = s as usize;
            hi[a] = t as usize;
        }
        let total: usize = self.dims.iter().product();
        let c = self.organs[organ.index()].get_or_insert_with(|| Counters {
            positive: vec![0; total],
            coverage: vec![0; total],
        });
        let width = hi[0] - lo[0];
        let px = (lo[0] as i64 - origin[0]) as usize;
        for z in lo[2]..hi[2] {
            let pz = (z as i64 - origin[2]) as usize;
            for y in lo[1]..hi[1] {
                let py = (y as i64 - origin[1]) as usize;
                let dst = (z * self.dims[1] + y) * self.dims[0] + lo[0];
                let src = (pz * dims[1] + py) * dims[0] + px;
                for cov in &mut c.coverage[dst..dst + width] {
                    *cov += 1;
                }
                for (pos, &v) in c.positive[dst..dst + width].iter_mut().zip(&pred[src..src + width]) {
                    *pos += u32::from(v);
                }
            }
        }
        Ok(())
    }

    pub fn add(&mut self, vote: &PatchVote) -> Result<()> {
        self.accumulate(vote.organ, vote.origin, vote.dims, &vote.pred)
    }

    /// Adds the counts of a shard built over the same grid.
    pub fn merge(&mut self, other: &FusionAccumulator) -> Result<()> {
        if other.dims != self.dims {
            return Err(SegError::DimsMismatch(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        for (mine, theirs) in self.organs.iter_mut().zip(&other.organs) {
            let Some(t) = theirs else { continue };
            match mine {
                None => *mine = Some(t.clone()),
                Some(m) => {
                    for (a, b) in m.positive.iter_mut().zip(&t.positive) {
                        *a += b;
                    }
                    for (a, b) in m.coverage.iter_mut().zip(&t.coverage) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves the counters into one label volume.
    pub fn majority_vote(&self) -> LabelVolume {
        let [nx, ny, _] = self.dims;
        let total: usize = self.dims.iter().product();
        let active: Vec<(u8, &Counters)> = self
            .organs
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i as u8 + 1, c)))
            .collect();
        let mut out = vec![0u8; total];
        cascade_nn::par::for_each_chunk_mut(&mut out, nx * ny, |z, plane| {
            let base = z * nx * ny;
            for (k, o) in plane.iter_mut().enumerate() {
                let i = base + k;
                // (positive, coverage, id) of the current winner.
                let mut best: Option<(u64, u64, u8)> = None;
                for &(id, c) in &active {
                    let (p, n) = (u64::from(c.positive[i]), u64::from(c.coverage[i]));
                    if n == 0 || 2 * p <= n {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bp, bn, _)) => {
                            let (lhs, rhs) = (p * bn, bp * n);
                            lhs > rhs || (lhs == rhs && p > bp)
                        }
                    };
                    if better {
                        best = Some((p, n, id));
                    }
                }
                *o = best.map_or(0, |b| b.2);
            }
        });
        Volume::new(self.dims, self.spacing, out).expect("accumulator geometry")
    }
}

/// Accumulates every vote and resolves them.
pub fn fuse(votes: &[PatchVote], dims: [usize; 3], spacing: Spacing) -> Result<LabelVolume> {
    let mut acc = FusionAccumulator::new(dims, spacing)?;
    for v in votes {
        acc.add(v)?;
    }
    Ok(acc.majority_vote())
}

/// Reference fusion: enumerates every patch at every voxel.
///
/// Fully-outside windows contribute nothing. Slow; meant as a test oracle.
pub fn fuse_brute_force(votes: &[PatchVote], dims: [usize; 3], spacing: Spacing) -> Result<LabelVolume> {
    let mut out = Volume::filled(dims, spacing, 0u8)?;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as i64, y as i64, z as i64];
                let mut pos = [0u32; NUM_ORGANS];
                let mut cov = [0u32; NUM_ORGANS];
                for v in votes {
                    let inside = (0..3).all(|a| p[a] >= v.origin[a] && p[a] < v.origin[a] + v.dims[a] as i64);
                    if !inside {
                        continue;
                    }
                    let l: [usize; 3] = std::array::from_fn(|a| (p[a] - v.origin[a]) as usize);
                    let vote = v.pred[(l[2] * v.dims[1] + l[1]) * v.dims[0] + l[0]];
                    cov[v.organ.index()] += 1;
                    pos[v.organ.index()] += u32::from(vote == 1);
                }
                let mut label = 0u8;
                let mut best_frac = -1.0f64;
                let mut best_pos = 0u32;
                for a in 0..NUM_ORGANS {
                    if cov[a] == 0 {
                        continue;
                    }
                    let frac = f64::from(pos[a]) / f64::from(cov[a]);
                    if frac <= 0.5 {
                        continue;
                    }
                    if frac > best_frac || (frac == best_frac && pos[a] > best_pos) {
                        best_frac = frac;
                        best_pos = pos[a];
                        label = a as u8 + 1;
                    }
                }
                out.set(x, y, z, label);
            }
        }
    }
    Ok(out)
}
