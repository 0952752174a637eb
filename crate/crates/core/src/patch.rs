//! Prior-guided random patch sampling with a coverage guarantee, patch
//! extraction, and the refine-stage dataset (manifest + patch store).
//!
//! Sampling for one organ draws `patches_per_organ` origins uniformly over
//! every window position that overlaps the prior's bounding box, rejecting
//! windows that miss the mask itself. Trailing random draws are then traded
//! for deterministic greedy covering windows until every prior voxel lies in
//! at least one window.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::organ::{OrganId, NUM_ORGANS};
use crate::prior::{BBox, OrganPrior};
use crate::rng::SeededRng;
use crate::volume::{ImageVolume, LabelVolume};

pub const DEFAULT_PATCH_DIMS: [usize; 3] = [128, 128, 64];
pub const DEFAULT_PATCHES_PER_ORGAN: usize = 50;

/// Redraws allowed before falling back to a window centred on a mask voxel.
const MAX_REJECTS: usize = 64;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STORE_FILE: &str = "patches.bin";
pub const STORE_INDEX_FILE: &str = "patches.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub dims: [usize; 3],
    pub patches_per_organ: usize,
    /// Intensity used where a window hangs off the volume.
    pub fill_value: f32,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            dims: DEFAULT_PATCH_DIMS,
            patches_per_organ: DEFAULT_PATCHES_PER_ORGAN,
            fill_value: 0.0,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(SegError::InvalidPatchSpec(format!("dims {:?} must be >= 1", self.dims)));
        }
        if self.patches_per_organ == 0 {
            return Err(SegError::InvalidPatchSpec("patches_per_organ must be >= 1".into()));
        }
        if !self.fill_value.is_finite() {
            return Err(SegError::InvalidPatchSpec("fill_value must be finite".into()));
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Origins for one organ. `origins.len()` exceeds `requested` only when the
/// budget could not cover the prior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OriginPlan {
    pub origins: Vec<[i64; 3]>,
    pub requested: usize,
}

impl OriginPlan {
    pub fn grown_by(&self) -> usize {
        self.origins.len().saturating_sub(self.requested)
    }
}

/// Window `[o, o + d)` clipped to the box, in box-local coordinates.
fn clip(origin: [i64; 3], d: [usize; 3], b: &BBox) -> Option<([usize; 3], [usize; 3])> {
    let e = b.extent();
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        let s = (origin[a] - b.lo[a] as i64).clamp(0, e[a] as i64);
        let t = (origin[a] + d[a] as i64 - b.lo[a] as i64).clamp(0, e[a] as i64);
        if s >= t {
            return None;
        }
        lo[a] = s as usize;
        hi[a] = t as usize;
    }
    Some((lo, hi))
}

/// Calls `f` with the box-local flat index of every voxel in a clipped window.
fn for_each_in(lo: [usize; 3], hi: [usize; 3], e: [usize; 3], mut f: impl FnMut(usize)) {
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            let row = (z * e[1] + y) * e[0];
            for x in lo[0]..hi[0] {
                f(row + x);
            }
        }
    }
}

/// Summed-area table of the mask over its bounding box.
struct MaskSat {
    bbox: BBox,
    stride: [usize; 3],
    sat: Vec<u32>,
}

impl MaskSat {
    fn new(prior: &OrganPrior, bbox: BBox) -> Self {
        let e = bbox.extent();
        let stride = [1, e[0] + 1, (e[0] + 1) * (e[1] + 1)];
        let mut sat = vec![0u32; stride[2] * (e[2] + 1)];
        let mask = prior.bbox_mask();
        for z in 0..e[2] {
            for y in 0..e[1] {
                for x in 0..e[0] {
                    let i = (x + 1) + (y + 1) * stride[1] + (z + 1) * stride[2];
                    let m = u32::from(mask[(z * e[1] + y) * e[0] + x]);
                    sat[i] = m
                        .wrapping_add(sat[i - 1])
                        .wrapping_add(sat[i - stride[1]])
                        .wrapping_add(sat[i - stride[2]])
                        .wrapping_sub(sat[i - 1 - stride[1]])
                        .wrapping_sub(sat[i - 1 - stride[2]])
                        .wrapping_sub(sat[i - stride[1] - stride[2]])
                        .wrapping_add(sat[i - 1 - stride[1] - stride[2]]);
                }
            }
        }
        Self { bbox, stride, sat }
    }

    fn count(&self, origin: [i64; 3], d: [usize; 3]) -> u32 {
        let Some((lo, hi)) = clip(origin, d, &self.bbox) else {
            return 0;
        };
        let at = |x: usize, y: usize, z: usize| self.sat[x + y * self.stride[1] + z * self.stride[2]];
        at(hi[0], hi[1], hi[2])
            .wrapping_sub(at(lo[0], hi[1], hi[2]))
            .wrapping_sub(at(hi[0], lo[1], hi[2]))
            .wrapping_sub(at(hi[0], hi[1], lo[2]))
            .wrapping_add(at(lo[0], lo[1], hi[2]))
            .wrapping_add(at(lo[0], hi[1], lo[2]))
            .wrapping_add(at(hi[0], lo[1], lo[2]))
            .wrapping_sub(at(lo[0], lo[1], lo[2]))
    }
}

/// Greedy cover of the mask voxels with `cover == 0`: scan in x-fastest
/// order and drop a window on the first voxel still uncovered. The window
/// is centred on that voxel but never starts before the box, so no part of
/// it is spent on rows the scan has already cleared.
fn greedy_cover(prior: &OrganPrior, bbox: &BBox, cover: &[u16], d: [usize; 3]) -> Vec<[i64; 3]> {
    let e = bbox.extent();
    let mask = prior.bbox_mask();
    let mut extra = vec![false; mask.len()];
    let mut out = Vec::new();
    for z in 0..e[2] {
        for y in 0..e[1] {
            for x in 0..e[0] {
                let i = (z * e[1] + y) * e[0] + x;
                if mask[i] == 0 || cover[i] > 0 || extra[i] {
                    continue;
                }
                let v = [x, y, z];
                let origin: [i64; 3] = std::array::from_fn(|a| {
                    let c = (bbox.lo[a] + v[a]) as i64 - (d[a] / 2) as i64;
                    c.max(bbox.lo[a] as i64)
                });
                if let Some((lo, hi)) = clip(origin, d, bbox) {
                    for_each_in(lo, hi, e, |j| extra[j] = true);
                }
                out.push(origin);
            }
        }
    }
    out
}

/// Draws the patch origins for one present organ.
///
/// Every window intersects the prior mask and the union of windows covers
/// all prior voxels. Windows may extend past the volume.
pub fn sample_origins(
    prior: &OrganPrior,
    spec: &PatchSpec,
    volume_dims: [usize; 3],
    rng: SeededRng,
) -> Result<OriginPlan> {
    spec.validate()?;
    if prior.native_dims != volume_dims {
        return Err(SegError::DimsMismatch(format!(
            "prior grid {:?} vs volume {:?}",
            prior.native_dims, volume_dims
        )));
    }
    let bbox = prior.bbox.ok_or(SegError::OrganMissing(prior.organ))?;
    let d = spec.dims;
    let n = spec.patches_per_organ;
    let sat = MaskSat::new(prior, bbox);
    let mut rng = rng.rng();

    let mut voxels: Option<Vec<[usize; 3]>> = None;
    let mut randoms = Vec::with_capacity(n);
    for _ in 0..n {
        let mut origin = None;
        for _ in 0..MAX_REJECTS {
            let o: [i64; 3] =
                std::array::from_fn(|a| rng.random_range(bbox.lo[a] as i64 - d[a] as i64 + 1..=bbox.hi[a] as i64));
            if sat.count(o, d) > 0 {
                origin = Some(o);
                break;
            }
        }
        let o = origin.unwrap_or_else(|| {
            let vs = voxels.get_or_insert_with(|| prior.voxel_coords());
            let v = vs[rng.random_range(0..vs.len())];
            std::array::from_fn(|a| v[a] as i64 - (d[a] / 2) as i64)
        });
        randoms.push(o);
    }

    // Coverage counts of randoms[..n - k] as k grows.
    let e = bbox.extent();
    let mut cover = vec![0u16; e[0] * e[1] * e[2]];
    let mut windows = Vec::with_capacity(n);
    for &o in &randoms {
        let w = clip(o, d, &bbox);
        if let Some((lo, hi)) = w {
            for_each_in(lo, hi, e, |j| cover[j] = cover[j].saturating_add(1));
        }
        windows.push(w);
    }
    for k in 0..=n {
        if k > 0 {
            if let Some((lo, hi)) = windows[n - k] {
                for_each_in(lo, hi, e, |j| cover[j] -= 1);
            }
        }
        let greedy = greedy_cover(prior, &bbox, &cover, d);
        if greedy.len() <= k {
            let mut origins = randoms[..n - greedy.len()].to_vec();
            origins.extend(greedy);
            return Ok(OriginPlan { origins, requested: n });
        }
        if k == n {
            log::warn!(
                "organ {}: {} patches needed to cover the prior, budget {}",
                prior.organ,
                greedy.len(),
                n
            );
            return Ok(OriginPlan {
                origins: greedy,
                requested: n,
            });
        }
    }
    unreachable!("loop returns at k == n")
}

/// One two-channel training/inference patch with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub organ: OrganId,
    pub origin: [i64; 3],
    pub dims: [usize; 3],
    /// Channel 0: normalized intensity.
    pub intensity: Vec<f32>,
    /// Channel 1: prior indicator.
    pub prior: Vec<f32>,
    /// Ground truth `== organ`, 0/1.
    pub label: Vec<u8>,
}

impl PatchSample {
    /// Both input channels back to back, ready for a `(1, 2, ..)` tensor.
    pub fn input_data(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(2 * self.intensity.len());
        v.extend_from_slice(&self.intensity);
        v.extend_from_slice(&self.prior);
        v
    }
}

/// Copies the window at `origin` out of the three native grids.
///
/// Out-of-volume voxels take `spec.fill_value` (intensity) and 0 (prior,
/// label). `gt` may be `None` at inference time, giving an all-zero label.
pub fn extract_patch(
    image: &ImageVolume,
    prior: &OrganPrior,
    gt: Option<&LabelVolume>,
    organ: OrganId,
    origin: [i64; 3],
    spec: &PatchSpec,
) -> Result<PatchSample> {
    let dims = image.dims();
    if prior.native_dims != dims || gt.is_some_and(|g| g.dims() != dims) {
        return Err(SegError::DimsMismatch(format!(
            "image {:?}, prior {:?}, gt {:?}",
            dims,
            prior.native_dims,
            gt.map(|g| g.dims())
        )));
    }
    if prior.organ != organ {
        return Err(SegError::DimsMismatch(format!(
            "prior belongs to organ {}, requested {}",
            prior.organ, organ
        )));
    }
    let d = spec.dims;
    let n = spec.voxels();
    let mut intensity = vec![spec.fill_value; n];
    let mut pri = vec![0f32; n];
    let mut label = vec![0u8; n];
    // In-volume x range of the window, shared by every row.
    let x0 = origin[0].max(0);
    let x1 = (origin[0] + d[0] as i64).min(dims[0] as i64);
    let id = organ.get();
    if x0 < x1 {
        let (x0, x1) = (x0 as usize, x1 as usize);
        let px0 = (x0 as i64 - origin[0]) as usize;
        for pz in 0..d[2] {
            let z = origin[2] + pz as i64;
            if z < 0 || z >= dims[2] as i64 {
                continue;
            }
            for py in 0..d[1] {
                let y = origin[1] + py as i64;
                if y < 0 || y >= dims[1] as i64 {
                    continue;
                }
                let src = image.index(x0, y as usize, z as usize);
                let dst = (pz * d[1] + py) * d[0] + px0;
                let len = x1 - x0;
                intensity[dst..dst + len].copy_from_slice(&image.data()[src..src + len]);
                if let Some(g) = gt {
                    for (l, &v) in label[dst..dst + len].iter_mut().zip(&g.data()[src..src + len]) {
                        *l = u8::from(v == id);
                    }
                }
                for (i, p) in pri[dst..dst + len].iter_mut().enumerate() {
                    if prior.contains([(x0 + i) as i64, y, z]) {
                        *p = 1.0;
                    }
                }
            }
        }
    }
    Ok(PatchSample {
        organ,
        origin,
        dims: d,
        intensity,
        prior: pri,
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRow {
    pub row: usize,
    pub case_id: String,
    pub organ: OrganId,
    pub origin: [i64; 3],
    /// Stream id of the RNG that drew this organ's origins.
    pub stream_seed: u64,
}

/// One line of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestRecord {
    Header {
        spec: PatchSpec,
        master_seed: u64,
        cases: usize,
    },
    Patch(PatchRow),
    Skip {
        case_id: String,
        organ: OrganId,
        reason: String,
    },
    Grown {
        case_id: String,
        organ: OrganId,
        requested: usize,
        actual: usize,
    },
    Summary {
        expected: usize,
        actual: usize,
    },
}

/// Patch list for the refine stage: a pure function of the priors, the
/// `PatchSpec` and the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: PatchSpec,
    pub master_seed: u64,
    pub cases: usize,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn patches(&self) -> impl Iterator<Item = &PatchRow> {
        self.records.iter().filter_map(|r| match r {
            ManifestRecord::Patch(p) => Some(p),
            _ => None,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patches().count()
    }

    /// Rows expected with every organ present in every case.
    pub fn expected(&self) -> usize {
        self.cases * NUM_ORGANS * self.spec.patches_per_organ
    }

    pub fn skips(&self) -> impl Iterator<Item = (&str, OrganId)> {
        self.records.iter().filter_map(|r| match r {
            ManifestRecord::Skip { case_id, organ, .. } => Some((case_id.as_str(), *organ)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = ManifestRecord::Header {
            spec: self.spec,
            master_seed: self.master_seed,
            cases: self.cases,
        };
        let summary = ManifestRecord::Summary {
            expected: self.expected(),
            actual: self.patch_count(),
        };
        for r in std::iter::once(&header)
            .chain(&self.records)
            .chain(std::iter::once(&summary))
        {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| SegError::Manifest("empty manifest".into()))?;
        let ManifestRecord::Header {
            spec,
            master_seed,
            cases,
        } = serde_json::from_str(first)?
        else {
            return Err(SegError::Manifest("first record must be the header".into()));
        };
        let mut records = Vec::new();
        let mut summary = None;
        for line in lines {
            match serde_json::from_str(line)? {
                ManifestRecord::Header { .. } => return Err(SegError::Manifest("duplicate header".into())),
                ManifestRecord::Summary { actual, .. } => summary = Some(actual),
                r => records.push(r),
            }
        }
        let m = Self {
            spec,
            master_seed,
            cases,
            records,
        };
        match summary {
            Some(actual) if actual == m.patch_count() => Ok(m),
            Some(actual) => Err(SegError::Manifest(format!(
                "summary says {actual} patches, found {}",
                m.patch_count()
            ))),
            None => Err(SegError::Manifest("missing summary record".into())),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(File::open(path)?).read_to_string(&mut text)?;
        Self::from_jsonl(&text)
    }
}

/// Samples origins for every `(case, organ)` without touching image data.
///
/// `cases` pairs a case id with its 13 priors (organ order). Absent organs
/// become skip records.
pub fn plan_manifest(cases: &[(&str, &[OrganPrior])], spec: &PatchSpec, master_seed: u64) -> Result<Manifest> {
    spec.validate()?;
    let jobs: Vec<(&str, &OrganPrior)> = cases
        .iter()
        .flat_map(|(id, priors)| priors.iter().map(move |p| (*id, p)))
        .collect();
    let planned = cascade_nn::par::map_slice(&jobs, |&(id, prior)| {
        let rng = SeededRng::for_case_organ(master_seed, id, prior.organ.get());
        match sample_origins(prior, spec, prior.native_dims, rng) {
            Ok(plan) => Ok(Some((rng.stream, plan))),
            Err(SegError::OrganMissing(_)) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut records = Vec::new();
    let mut row = 0;
    for (&(id, prior), res) in jobs.iter().zip(planned) {
        match res? {
            None => records.push(ManifestRecord::Skip {
                case_id: id.to_string(),
                organ: prior.organ,
                reason: "organ absent from coarse prediction".into(),
            }),
            Some((stream, plan)) => {
                if plan.grown_by() > 0 {
                    records.push(ManifestRecord::Grown {
                        case_id: id.to_string(),
                        organ: prior.organ,
                        requested: plan.requested,
                        actual: plan.origins.len(),
                    });
                }
                for origin in plan.origins {
                    records.push(ManifestRecord::Patch(PatchRow {
                        row,
                        case_id: id.to_string(),
                        organ: prior.organ,
                        origin,
                        stream_seed: stream,
                    }));
                    row += 1;
                }
            }
        }
    }
    Ok(Manifest {
        spec: *spec,
        master_seed,
        cases: cases.len(),
        records,
    })
}

/// A preprocessed case ready for patch extraction.
#[derive(Debug, Clone)]
pub struct RefineCase {
    pub id: String,
    pub image: ImageVolume,
    pub gt: LabelVolume,
    pub priors: Vec<OrganPrior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub row: usize,
    pub case_id: String,
    pub organ: OrganId,
    pub origin: [i64; 3],
    /// Byte offset of the entry's first channel.
    pub offset: u64,
}

/// Sidecar index of the patch store. Each entry holds three consecutive
/// little-endian f32 blocks of `dims` voxels: intensity, prior, label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub dims: [usize; 3],
    pub channels: Vec<String>,
    pub entries: Vec<StoreEntry>,
}

/// Random-access reader over a materialized patch store.
#[derive(Debug)]
pub struct PatchStore {
    path: PathBuf,
    pub index: StoreIndex,
}

fn put_f32(out: &mut Vec<u8>, vals: impl Iterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl PatchStore {
    /// Extracts every manifest row and writes the store plus its index.
    pub fn build(dir: &Path, manifest: &Manifest, cases: &[RefineCase]) -> Result<Self> {
        let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
        Self::build_with(dir, manifest, &ids, |id| {
            cases
                .iter()
                .find(|c| c.id == id)
                .cloned()
                .ok_or_else(|| SegError::UnmatchedCases(vec![id.to_string()]))
        })
    }

    /// Like [`PatchStore::build`], loading one case at a time so only a
    /// single native volume is resident.
    pub fn build_with(
        dir: &Path,
        manifest: &Manifest,
        case_ids: &[String],
        load: impl Fn(&str) -> Result<RefineCase>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let spec = manifest.spec;
        let block = spec.voxels() * 4;
        let path = dir.join(STORE_FILE);
        let mut w = BufWriter::new(File::create(&path)?);
        let mut entries = Vec::with_capacity(manifest.patch_count());
        let rows: Vec<&PatchRow> = manifest.patches().collect();
        for id in case_ids {
            let mine: Vec<&PatchRow> = rows.iter().copied().filter(|r| &r.case_id == id).collect();
            if mine.is_empty() {
                continue;
            }
            let case = load(id)?;
            let bytes = cascade_nn::par::map_slice(&mine, |r| -> Result<Vec<u8>> {
                let prior = case
                    .priors
                    .iter()
                    .find(|p| p.organ == r.organ)
                    .ok_or(SegError::OrganMissing(r.organ))?;
                let p = extract_patch(&case.image, prior, Some(&case.gt), r.organ, r.origin, &spec)?;
                let mut out = Vec::with_capacity(3 * block);
                put_f32(&mut out, p.intensity.iter().copied());
                put_f32(&mut out, p.prior.iter().copied());
                put_f32(&mut out, p.label.iter().map(|&l| f32::from(l)));
                Ok(out)
            });
            for (r, b) in mine.iter().zip(bytes) {
                entries.push(StoreEntry {
                    row: r.row,
                    case_id: r.case_id.clone(),
                    organ: r.organ,
                    origin: r.origin,
                    offset: 0,
                });
                w.write_all(&b?)?;
            }
        }
        if entries.len() != rows.len() {
            return Err(SegError::UnmatchedCases(
                rows.iter()
                    .filter(|r| !case_ids.contains(&r.case_id))
                    .map(|r| r.case_id.clone())
                    .collect::<std::collections::BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            ));
        }
        w.flush()?;
        for (i, e) in entries.iter_mut().enumerate() {
            e.offset = (i * 3 * block) as u64;
        }
        let index = StoreIndex {
            dims: spec.dims,
            channels: vec!["intensity".into(), "prior".into(), "label".into()],
            entries,
        };
        std::fs::write(dir.join(STORE_INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
        Ok(Self { path, index })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let index: StoreIndex = serde_json::from_slice(&std::fs::read(dir.join(STORE_INDEX_FILE))?)?;
        let path = dir.join(STORE_FILE);
        let need = index.entries.len() as u64 * 3 * 4 * index.dims.iter().product::<usize>() as u64;
        let have = std::fs::metadata(&path)?.len();
        if have != need {
            return Err(SegError::Manifest(format!(
                "patch store holds {have} bytes, index needs {need}"
            )));
        }
        Ok(Self { path, index })
    }

    pub fn len(&self) -> usize {
        self.index.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.entries.is_empty()
    }

    /// Reads entries `which` in one pass over the file.
    pub fn read_many(&self, which: &[usize]) -> Result<Vec<PatchSample>> {
        let mut f = BufReader::new(File::open(&self.path)?);
        let n: usize = self.index.dims.iter().product();
        let mut buf = vec![0u8; 3 * 4 * n];
        let mut out = Vec::with_capacity(which.len());
        for &i in which {
            let e = self
                .index
                .entries
                .get(i)
                .ok_or_else(|| SegError::Manifest(format!("patch {i} out of range ({} stored)", self.len())))?;
            f.seek(SeekFrom::Start(e.offset))?;
            f.read_exact(&mut buf)?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push(PatchSample {
                organ: e.organ,
                origin: e.origin,
                dims: self.index.dims,
                intensity: vals[..n].to_vec(),
                prior: vals[n..2 * n].to_vec(),
                label: vals[2 * n..].iter().map(|&v| u8::from(v > 0.5)).collect(),
            });
        }
        Ok(out)
    }

    pub fn read(&self, i: usize) -> Result<PatchSample> {
        Ok(self.read_many(&[i])?.remove(0))
    }
}

/// Plans the manifest, writes it, and materializes the patch store.
pub fn build_refine_dataset(
    dir: &Path,
    cases: &[RefineCase],
    spec: &PatchSpec,
    master_seed: u64,
) -> Result<(Manifest, PatchStore)> {
    let plan_input: Vec<(&str, &[OrganPrior])> = cases.iter().map(|c| (c.id.as_str(), c.priors.as_slice())).collect();
    let manifest = plan_manifest(&plan_input, spec, master_seed)?;
    std::fs::create_dir_all(dir)?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    let store = PatchStore::build(dir, &manifest, cases)?;
    Ok((manifest, store))
}

/// Streaming variant of [`build_refine_dataset`]: plans from priors alone,
/// then loads each case through `load` while writing the store.
pub fn build_refine_dataset_with(
    dir: &Path,
    case_ids: &[String],
    priors: &[Vec<OrganPrior>],
    spec: &PatchSpec,
    master_seed: u64,
    load: impl Fn(&str) -> Result<RefineCase>,
) -> Result<(Manifest, PatchStore)> {
    if case_ids.len() != priors.len() {
        return Err(SegError::DimsMismatch(format!(
            "{} case ids, {} prior sets",
            case_ids.len(),
            priors.len()
        )));
    }
    let plan_input: Vec<(&str, &[OrganPrior])> = case_ids
        .iter()
        .zip(priors)
        .map(|(id, p)| (id.as_str(), p.as_slice()))
        .collect();
    let manifest = plan_manifest(&plan_input, spec, master_seed)?;
    std::fs::create_dir_all(dir)?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    let store = PatchStore::build_with(dir, &manifest, case_ids, load)?;
    Ok((manifest, store))
}

/// Reads a manifest line by line; used by tools that only need the rows.
pub fn read_patch_rows(path: &Path) -> Result<Vec<PatchRow>> {
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if let ManifestRecord::Patch(p) = serde_json::from_str(&line)? {
            rows.push(p);
        }
    }
    Ok(rows)
}
