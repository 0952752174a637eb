//! Synthetic abdominal phantoms: non-overlapping ellipsoid organs on a
//! textured, noisy background, each organ near its own anatomical site.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::organ::OrganId;
use crate::rng::SeededRng;
use crate::volume::{ImageVolume, LabelVolume, Spacing, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomOrgan {
    pub organ: OrganId,
    /// Centre in voxel index coordinates; `None` places it at random.
    pub center: Option<[f64; 3]>,
    /// Uniform per-axis perturbation of `center`, in millimetres.
    #[serde(default)]
    pub jitter_mm: [f64; 3],
    /// Semi-axes in millimetres.
    pub radii_mm: [f64; 3],
    /// Mean intensity in HU.
    pub mean: f32,
    pub noise: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub organs: Vec<PhantomOrgan>,
    pub background: f32,
    pub background_noise: f32,
    /// Amplitude of the smooth background texture in HU.
    pub texture: f32,
    /// Placement attempts per organ before giving up.
    pub max_tries: usize,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        crate::volume::check_dims(self.dims)?;
        self.spacing.validate()?;
        if self.organs.len() > crate::NUM_ORGANS {
            return Err(SegError::Config(format!("{} organs, at most 13", self.organs.len())));
        }
        for (i, o) in self.organs.iter().enumerate() {
            if self.organs[..i].iter().any(|p| p.organ == o.organ) {
                return Err(SegError::Config(format!("organ {} listed twice", o.organ)));
            }
            if o.radii_mm.iter().any(|&r| !(r.is_finite() && r > 0.0))
                || !(o.noise >= 0.0)
                || o.jitter_mm.iter().any(|j| !j.is_finite())
            {
                return Err(SegError::Config(format!("organ {}: bad radii or noise", o.organ)));
            }
        }
        Ok(())
    }
}

/// One organ a cohort may contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolOrgan {
    pub id: u8,
    /// Mean intensity in HU.
    pub mean: f32,
    /// Typical centre as a fraction of the volume extent; `None` places the
    /// organ anywhere.
    #[serde(default)]
    pub site: Option<[f64; 3]>,
    /// Semi-axis range in millimetres; defaults to the cohort-wide range.
    #[serde(default)]
    pub radius_min_mm: Option<[f64; 3]>,
    #[serde(default)]
    pub radius_max_mm: Option<[f64; 3]>,
}

impl PoolOrgan {
    pub fn anywhere(id: u8, mean: f32) -> Self {
        Self {
            id,
            mean,
            site: None,
            radius_min_mm: None,
            radius_max_mm: None,
        }
    }

    fn at(id: u8, mean: f32, site: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Self {
        Self {
            id,
            mean,
            site: Some(site),
            radius_min_mm: Some(lo),
            radius_max_mm: Some(hi),
        }
    }
}

/// Parameters of a randomly drawn phantom cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub cases: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Organs to choose from.
    pub organ_pool: Vec<PoolOrgan>,
    pub min_organs: usize,
    pub max_organs: usize,
    pub radius_min_mm: [f64; 3],
    pub radius_max_mm: [f64; 3],
    /// How far an organ may stray from its site, per axis (mm).
    pub site_jitter_mm: [f64; 3],
    /// Per-case jitter of each organ's mean intensity (HU).
    pub mean_jitter: f32,
    pub organ_noise: f32,
    pub background: f32,
    pub background_noise: f32,
    pub texture: f32,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            cases: 12,
            dims: [96, 96, 48],
            spacing: [2.0, 2.0, 4.0],
            // Liver on the right, spleen and stomach on the left, kidneys
            // posterior and caudal.
            organ_pool: vec![
                PoolOrgan::at(1, 150.0, [0.75, 0.62, 0.60], [16.0, 16.0, 28.0], [22.0, 22.0, 36.0]),
                PoolOrgan::at(2, 60.0, [0.30, 0.76, 0.30], [12.0, 14.0, 24.0], [16.0, 18.0, 30.0]),
                PoolOrgan::at(3, 210.0, [0.70, 0.76, 0.30], [12.0, 14.0, 24.0], [16.0, 18.0, 30.0]),
                PoolOrgan::at(6, 100.0, [0.28, 0.45, 0.55], [30.0, 30.0, 40.0], [36.0, 38.0, 50.0]),
                PoolOrgan::at(7, -10.0, [0.64, 0.32, 0.62], [20.0, 16.0, 24.0], [26.0, 22.0, 32.0]),
            ],
            min_organs: 3,
            max_organs: 5,
            radius_min_mm: [16.0, 16.0, 24.0],
            radius_max_mm: [30.0, 30.0, 40.0],
            site_jitter_mm: [10.0, 10.0, 12.0],
            mean_jitter: 8.0,
            organ_noise: 10.0,
            background: -80.0,
            background_noise: 10.0,
            texture: 25.0,
        }
    }
}

impl CohortSpec {
    /// Draws one phantom layout; centres are left to `gen_phantom`.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<PhantomSpec> {
        if self.organ_pool.is_empty() || self.min_organs == 0 || self.min_organs > self.max_organs {
            return Err(SegError::Config("phantom organ count range is empty".into()));
        }
        let hi = self.max_organs.min(self.organ_pool.len());
        let lo = self.min_organs.min(hi);
        let count = rng.random_range(lo..=hi);
        let mut picks = sample(rng, self.organ_pool.len(), count).into_vec();
        picks.sort_unstable();
        let organs = picks
            .into_iter()
            .map(|i| {
                let p = &self.organ_pool[i];
                let (rmin, rmax) = (
                    p.radius_min_mm.unwrap_or(self.radius_min_mm),
                    p.radius_max_mm.unwrap_or(self.radius_max_mm),
                );
                let radii_mm = std::array::from_fn(|a| {
                    let (l, h) = (rmin[a], rmax[a]);
                    if h > l {
                        rng.random_range(l..=h)
                    } else {
                        l
                    }
                });
                let jitter = if self.mean_jitter > 0.0 {
                    rng.random_range(-self.mean_jitter..=self.mean_jitter)
                } else {
                    0.0
                };
                let center = p
                    .site
                    .map(|f| std::array::from_fn(|a| f[a] * (self.dims[a] as f64 - 1.0)));
                Ok(PhantomOrgan {
                    organ: OrganId::new(p.id)?,
                    center,
                    jitter_mm: if center.is_some() {
                        self.site_jitter_mm
                    } else {
                        [0.0; 3]
                    },
                    radii_mm,
                    mean: p.mean + jitter,
                    noise: self.organ_noise,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PhantomSpec {
            dims: self.dims,
            spacing: Spacing::from_array(self.spacing)?,
            organs,
            background: self.background,
            background_noise: self.background_noise,
            texture: self.texture,
            max_tries: 500,
        })
    }
}

/// Voxel indices inside the ellipsoid, or `None` if it leaves the volume or
/// touches an existing organ (a one-voxel gap is kept).
fn rasterize(labels: &LabelVolume, center: [f64; 3], radii: [f64; 3]) -> Option<Vec<usize>> {
    let dims = labels.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let l = (center[a] - radii[a]).ceil();
        let h = (center[a] + radii[a]).floor();
        if l < 1.0 || h > dims[a] as f64 - 2.0 {
            return None;
        }
        lo[a] = l as usize;
        hi[a] = h as usize;
    }
    let inside = |x: f64, y: f64, z: f64, grow: f64| {
        let q = |v: f64, a: usize| (v - center[a]) / (radii[a] + grow);
        q(x, 0).powi(2) + q(y, 1).powi(2) + q(z, 2).powi(2) <= 1.0
    };
    let mut out = Vec::new();
    for z in lo[2] - 1..=hi[2] + 1 {
        for y in lo[1] - 1..=hi[1] + 1 {
            for x in lo[0] - 1..=hi[0] + 1 {
                let (fx, fy, fz) = (x as f64, y as f64, z as f64);
                if inside(fx, fy, fz, 1.0) && labels.get(x, y, z) != 0 {
                    return None;
                }
                if inside(fx, fy, fz, 0.0) {
                    out.push(labels.index(x, y, z));
                }
            }
        }
    }
    Some(out)
}

/// Renders a phantom: label = ellipsoid indicators, image = organ mean plus
/// noise inside organs, textured noisy background elsewhere.
pub fn gen_phantom<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Result<(ImageVolume, LabelVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let s = spec.spacing.as_array();
    let mut labels = Volume::filled(dims, spec.spacing, 0u8)?;
    for o in &spec.organs {
        let radii: [f64; 3] = std::array::from_fn(|a| o.radii_mm[a] / s[a]);
        let voxels = match o.center {
            Some(c) if o.jitter_mm.iter().all(|&j| j <= 0.0) => rasterize(&labels, c, radii),
            Some(c) => (0..spec.max_tries).find_map(|_| {
                let c: [f64; 3] = std::array::from_fn(|a| {
                    let j = o.jitter_mm[a].max(0.0) / s[a];
                    if j > 0.0 {
                        c[a] + rng.random_range(-j..=j)
                    } else {
                        c[a]
                    }
                });
                rasterize(&labels, c, radii)
            }),
            None => (0..spec.max_tries).find_map(|_| {
                let c: [f64; 3] = std::array::from_fn(|a| {
                    let (l, h) = (radii[a] + 1.0, dims[a] as f64 - 2.0 - radii[a]);
                    if h > l {
                        rng.random_range(l..h)
                    } else {
                        l
                    }
                });
                rasterize(&labels, c, radii)
            }),
        };
        let voxels = voxels.ok_or(SegError::PhantomPlacement {
            organs: spec.organs.len(),
            tries: spec.max_tries,
        })?;
        for i in voxels {
            labels.data_mut()[i] = o.organ.get();
        }
    }

    // Smooth texture: a few random plane waves.
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = std::array::from_fn(|a| rng.random_range(0.5..2.5) * std::f64::consts::TAU / dims[a] as f64);
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let bg_noise = Normal::new(0.0f32, spec.background_noise).map_err(|e| SegError::Config(e.to_string()))?;
    let organ_noise: Vec<(u8, f32, Normal<f32>)> = spec
        .organs
        .iter()
        .map(|o| {
            Ok((
                o.organ.get(),
                o.mean,
                Normal::new(0.0, o.noise).map_err(|e| SegError::Config(e.to_string()))?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut image = Volume::filled(dims, spec.spacing, 0f32)?;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = labels.index(x, y, z);
                let l = labels.data()[i];
                let v = if l == 0 {
                    let p = [x as f64, y as f64, z as f64];
                    let t: f64 = waves
                        .iter()
                        .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
                        .sum::<f64>()
                        / waves.len() as f64;
                    spec.background + spec.texture * t as f32 + bg_noise.sample(rng)
                } else {
                    let (_, mean, n) = organ_noise.iter().find(|(id, ..)| *id == l).expect("placed organ");
                    mean + n.sample(rng)
                };
                image.data_mut()[i] = v;
            }
        }
    }
    Ok((image, labels))
}

/// Case ids of a generated cohort: `phantom_000`, `phantom_001`, ...
pub fn case_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Generates every case of a cohort; case `i` uses its own random stream.
pub fn gen_cohort(cohort: &CohortSpec, seed: u64) -> Result<Vec<(String, ImageVolume, LabelVolume)>> {
    let ids: Vec<usize> = (0..cohort.cases).collect();
    cascade_nn::par::map_slice(&ids, |&i| {
        let mut rng = SeededRng::labeled(seed, &format!("phantom/{i}")).rng();
        let spec = cohort.draw(&mut rng)?;
        let (img, lab) = gen_phantom(&spec, &mut rng)?;
        Ok((case_id(i), img, lab))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three_organ_spec() -> PhantomSpec {
        let mk = |id, r: [f64; 3], mean| PhantomOrgan {
            organ: OrganId::new(id).unwrap(),
            center: None,
            jitter_mm: [0.0; 3],
            radii_mm: r,
            mean,
            noise: 5.0,
        };
        PhantomSpec {
            dims: [96, 96, 48],
            spacing: Spacing::new(2.0, 2.0, 4.0).unwrap(),
            organs: vec![
                mk(1, [20.0, 18.0, 40.0], 150.0),
                mk(6, [16.0, 22.0, 36.0], 100.0),
                mk(11, [18.0, 16.0, 32.0], 50.0),
            ],
            background: -80.0,
            background_noise: 10.0,
            texture: 20.0,
            max_tries: 500,
        }
    }

    #[test]
    fn labels_are_exactly_the_placed_organs() {
        let spec = three_organ_spec();
        let (img, lab) = gen_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(img.dims(), lab.dims());
        let mut seen: Vec<u8> = lab.data().to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 6, 11]);
    }

    #[test]
    fn voxel_counts_match_ellipsoid_volume() {
        let spec = three_organ_spec();
        let (_, lab) = gen_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for o in &spec.organs {
            let [a, b, c] = o.radii_mm;
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * a * b * c / spec.spacing.voxel_volume();
            let got = lab.count(o.organ.get()) as f64;
            assert!(
                (got - analytic).abs() / analytic < 0.10,
                "{}: {got} vs {analytic}",
                o.organ
            );
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = three_organ_spec();
        let a = gen_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_placement_errors() {
        let mut spec = three_organ_spec();
        for o in &mut spec.organs {
            o.radii_mm = [90.0, 90.0, 90.0];
        }
        let err = gen_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, SegError::PhantomPlacement { .. }));
    }

    #[test]
    fn default_cohort_generates() {
        let c = CohortSpec {
            cases: 2,
            ..CohortSpec::default()
        };
        let cases = gen_cohort(&c, 1).unwrap();
        assert_eq!(cases.len(), 2);
        for (_, _, lab) in &cases {
            let organs = (1..=13).filter(|&a| lab.count(a) > 0).count();
            assert!((3..=5).contains(&organs));
        }
        assert_eq!(cases, gen_cohort(&c, 1).unwrap());
    }

    #[test]
    fn sited_organs_stay_near_their_site() {
        let c = CohortSpec {
            cases: 4,
            ..CohortSpec::default()
        };
        let s = Spacing::from_array(c.spacing).unwrap().as_array();
        for (_, _, lab) in gen_cohort(&c, 5).unwrap() {
            for p in &c.organ_pool {
                let n = lab.count(p.id);
                if n == 0 {
                    continue;
                }
                let mut sum = [0f64; 3];
                let d = lab.dims();
                for z in 0..d[2] {
                    for y in 0..d[1] {
                        for x in 0..d[0] {
                            if lab.get(x, y, z) == p.id {
                                sum[0] += x as f64;
                                sum[1] += y as f64;
                                sum[2] += z as f64;
                            }
                        }
                    }
                }
                for a in 0..3 {
                    let site = p.site.unwrap()[a] * (c.dims[a] as f64 - 1.0);
                    let off_mm = (sum[a] / n as f64 - site).abs() * s[a];
                    assert!(
                        off_mm <= c.site_jitter_mm[a] + s[a],
                        "organ {} axis {a}: {off_mm} mm",
                        p.id
                    );
                }
            }
        }
    }
}
