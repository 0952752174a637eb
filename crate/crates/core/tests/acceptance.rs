//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! fails. Runs single-threaded so the determinism check is meaningful.
//!
//! A substring argument runs only the matching criteria, e.g.
//! `cargo test -p cascade-seg --test acceptance -- fusion`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cascade_nn::loss::{self, ClassWeights};
use cascade_nn::{ParamKind, ParamSet, Tensor, UNet, UNetConfig};
use cascade_seg::config::PipelineConfig;
use cascade_seg::folds::NUM_FOLDS;
use cascade_seg::patch::{plan_manifest, sample_origins, Manifest};
use cascade_seg::resample::undo_pad_crop;
use cascade_seg::{
    extract_all_priors, fuse, fuse_brute_force, make_folds, nifti, pad_crop, par, pipeline, resample, Interp,
    LabelVolume, OrganId, OrganPrior, PatchSpec, PatchVote, SeededRng, Spacing, Volume, NUM_ORGANS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_tensor(rng: &mut ChaCha8Rng, batch: usize, c: usize, dims: [usize; 3], scale: f64) -> Tensor<f64> {
    let n = batch * c * dims.iter().product::<usize>();
    Tensor::from_vec(
        batch,
        c,
        dims,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn onehot_batch(labels: &[Vec<u8>], dims: [usize; 3], classes: usize) -> Tensor<f64> {
    let data = labels
        .iter()
        .flat_map(|l| loss::onehot::<f64>(l, dims, classes).unwrap().into_vec())
        .collect();
    Tensor::from_vec(labels.len(), classes, dims, data).unwrap()
}

/// Largest relative error between an analytic gradient and central
/// differences of `f` over every logit.
fn logit_fd_error(z: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let h = 1e-5;
    (0..z.data().len())
        .map(|i| {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            rel_err(analytic.data()[i], (f(&zp) - f(&zm)) / (2.0 * h))
        })
        .fold(0.0, f64::max)
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let dims = [2, 3, 2];
    let vox = 12;
    let (mut worst_msdl, mut worst_bin) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = rng.random_range(2..=5);
        let z = random_tensor(&mut rng, 2, classes, dims, 3.0);
        let labels: Vec<Vec<u8>> = (0..2)
            .map(|_| (0..vox).map(|_| rng.random_range(0..classes as u8)).collect())
            .collect();
        let t = onehot_batch(&labels, dims, classes);
        let w = ClassWeights::new((0..classes).map(|_| rng.random_range(0.1..3.0)).collect()).unwrap();
        let (_, g) = loss::msdl_grad(&loss::softmax_channels(&z), &t, &w, loss::DEFAULT_EPS).unwrap();
        worst_msdl = worst_msdl.max(logit_fd_error(&z, &g, |z| {
            loss::msdl(&loss::softmax_channels(z), &t, &w, loss::DEFAULT_EPS).unwrap()
        }));

        let z = random_tensor(&mut rng, 2, 2, dims, 3.0);
        let fg: Vec<f64> = (0..2 * vox)
            .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
            .collect();
        let t = Tensor::from_vec(2, 1, dims, fg).unwrap();
        let (_, g) = loss::binary_dice_grad(&loss::softmax_channels(&z), &t, loss::DEFAULT_EPS).unwrap();
        worst_bin = worst_bin.max(logit_fd_error(&z, &g, |z| {
            loss::binary_dice_loss(&loss::softmax_channels(z), &t, loss::DEFAULT_EPS).unwrap()
        }));
    }
    ensure!(
        worst_msdl < 1e-4,
        "msdl logit gradient rel err {worst_msdl:.2e} >= 1e-4"
    );
    ensure!(
        worst_bin < 1e-4,
        "binary dice logit gradient rel err {worst_bin:.2e} >= 1e-4"
    );

    let net = UNet::new(UNetConfig {
        in_channels: 1,
        out_channels: 3,
        levels: 2,
        base_width: 2,
        ..UNetConfig::coarse()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut params: ParamSet<f64> = net.init_params(&mut rng);
    for e in params.entries_mut() {
        if !matches!(e.kind, ParamKind::Weight { .. }) && e.kind.trainable() {
            e.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let n_params = params.trainable_count();
    ensure!(n_params <= 5000, "network has {n_params} parameters");
    let dims = [4, 4, 4];
    let input = random_tensor(&mut rng, 2, 1, dims, 1.0);
    let labels: Vec<Vec<u8>> = (0..2)
        .map(|_| (0..64).map(|_| rng.random_range(0..3u8)).collect())
        .collect();
    let target = onehot_batch(&labels, dims, 3);
    let w = ClassWeights::uniform(3);
    let loss_at = |p: &ParamSet<f64>| {
        let mut p = p.clone();
        let (y, _) = net.forward_train(&mut p, &input).unwrap();
        loss::msdl(&loss::softmax_channels(&y), &target, &w, loss::DEFAULT_EPS).unwrap()
    };
    let mut p = params.clone();
    let (y, trace) = net.forward_train(&mut p, &input).unwrap();
    let (_, gl) = loss::msdl_grad(&loss::softmax_channels(&y), &target, &w, loss::DEFAULT_EPS).unwrap();
    let grads = net.backward(&params, &trace, &gl).unwrap();
    // Small enough not to step across a ReLU or max-pool kink.
    let h = 1e-7;
    let mut worst_net = 0.0f64;
    let mut checked = 0;
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (j, &gj) in g.iter().enumerate() {
            let mut pp = params.clone();
            pp.data_mut(idx)[j] += h;
            let mut pm = params.clone();
            pm.data_mut(idx)[j] -= h;
            let num = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            worst_net = worst_net.max(rel_err(gj, num));
            checked += 1;
        }
    }
    ensure!(checked == n_params, "checked {checked} of {n_params} parameters");
    ensure!(
        worst_net < 1e-3,
        "network parameter gradient rel err {worst_net:.2e} >= 1e-3"
    );
    Ok(format!(
        "200 logit instances (msdl {worst_msdl:.1e}, binary {worst_bin:.1e}); {n_params} net params, worst {worst_net:.1e}; {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn loss_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = [6, 5, 4];
    let classes = 14;
    let (mut worst_perfect, mut best_disjoint) = (0.0f64, f64::INFINITY);
    let mut scale_checks = 0;
    for _ in 0..50 {
        // Every class present, so no empty-target term is trivially perfect.
        let mut labels: Vec<u8> = (0..120).map(|_| rng.random_range(0..classes as u8)).collect();
        labels[..classes].iter_mut().enumerate().for_each(|(i, l)| *l = i as u8);
        let t = onehot_batch(&[labels.clone()], dims, classes);
        let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0.1..5.0)).collect();
        let cw = ClassWeights::new(w.clone()).unwrap();
        worst_perfect = worst_perfect.max(loss::msdl(&t, &t, &cw, loss::DEFAULT_EPS).unwrap());
        let shifted: Vec<u8> = labels.iter().map(|l| (l + 1) % classes as u8).collect();
        let p = onehot_batch(&[shifted], dims, classes);
        best_disjoint = best_disjoint.min(loss::msdl(&p, &t, &cw, loss::DEFAULT_EPS).unwrap());

        let z = random_tensor(&mut rng, 1, classes, dims, 4.0);
        let probs = loss::softmax_channels(&z);
        let base = loss::msdl(&probs, &t, &cw, loss::DEFAULT_EPS).unwrap();
        for k in [0.25, 0.5, 2.0, 1024.0] {
            let scaled = ClassWeights::new(w.iter().map(|v| v * k).collect()).unwrap();
            let v = loss::msdl(&probs, &t, &scaled, loss::DEFAULT_EPS).unwrap();
            ensure!(v.to_bits() == base.to_bits(), "weights x{k}: {v} != {base}");
            scale_checks += 1;
        }
    }
    ensure!(worst_perfect < 1e-6, "msdl(perfect) = {worst_perfect:e}");
    ensure!(best_disjoint >= 0.99, "msdl(zero overlap) = {best_disjoint}");
    Ok(format!(
        "perfect <= {worst_perfect:.1e}, zero-overlap >= {best_disjoint:.6}, {scale_checks} weight rescalings bit-identical"
    ))
}

fn geometry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for trial in 0..20 {
        let d = [
            rng.random_range(1..20),
            rng.random_range(1..20),
            rng.random_range(1..12),
        ];
        let n = d.iter().product();
        // Spacings exactly representable in the file header.
        let s = Spacing::new(
            rng.random_range(1..8) as f64 * 0.25,
            rng.random_range(1..8) as f64 * 0.25,
            rng.random_range(1..16) as f64 * 0.5,
        )
        .unwrap();
        let img = Volume::new(d, s, (0..n).map(|_| rng.random_range(-1000.0f32..1000.0)).collect()).unwrap();
        let lab: LabelVolume = Volume::new(d, s, (0..n).map(|_| rng.random_range(0..14u8)).collect()).unwrap();

        // Identity spacing is voxel-exact for both interpolants.
        let same = resample(&img, s, Interp::Trilinear).unwrap();
        ensure!(same == img, "trial {trial}: trilinear identity resample changed voxels");
        ensure!(
            resample(&lab, s, Interp::Nearest).unwrap() == lab,
            "trial {trial}: nearest identity resample changed voxels"
        );

        // pad/crop then its inverse.
        let target = [
            rng.random_range(1..24),
            rng.random_range(1..24),
            rng.random_range(1..16),
        ];
        let (pc, rec) = pad_crop(&lab, target, 0).unwrap();
        ensure!(rec.is_consistent(), "trial {trial}: inconsistent record {rec:?}");
        let back = undo_pad_crop(&pc, &rec, 0).unwrap();
        ensure!(back.dims() == d, "trial {trial}: restored dims {:?}", back.dims());
        let kept = (0..3).all(|a| target[a] >= d[a]);
        if kept {
            ensure!(back == lab, "trial {trial}: pad then unpad is not the identity");
        } else {
            let sh = rec.shift();
            for z in 0..d[2] {
                for y in 0..d[1] {
                    for x in 0..d[0] {
                        let q = [x as i64 + sh[0], y as i64 + sh[1], z as i64 + sh[2]];
                        let inside = (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < target[a]);
                        let want = if inside { lab.get(x, y, z) } else { 0 };
                        ensure!(
                            back.get(x, y, z) == want,
                            "trial {trial}: overlap voxel ({x},{y},{z}) differs"
                        );
                    }
                }
            }
        }

        // File round trips.
        for ext in ["nii", "nii.gz"] {
            let p = dir.path().join(format!("img{trial}.{ext}"));
            nifti::write_volume(&img, &p).unwrap();
            let r = nifti::read_image(&p).unwrap();
            ensure!(
                r.dims() == d && r.spacing() == s,
                "trial {trial} {ext}: image geometry changed"
            );
            ensure!(
                r.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "trial {trial} {ext}: image voxels changed"
            );
            let p = dir.path().join(format!("lab{trial}.{ext}"));
            nifti::write_volume(&lab, &p).unwrap();
            ensure!(
                nifti::read_label(&p).unwrap() == lab,
                "trial {trial} {ext}: label round trip differs"
            );
        }
    }

    // Trilinear reproduces linear fields wherever no clamping occurs.
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = [
            rng.random_range(4..24),
            rng.random_range(4..24),
            rng.random_range(4..16),
        ];
        let from = Spacing::new(
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(1.0..6.0),
        )
        .unwrap();
        let to = Spacing::new(
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(1.0..6.0),
        )
        .unwrap();
        let (fa, ta) = (from.as_array(), to.as_array());
        let ext: Vec<f64> = (0..3).map(|a| d[a] as f64 * fa[a]).collect();
        let coef: Vec<f64> = (0..3).map(|a| rng.random_range(-0.3..0.3) / ext[a]).collect();
        let c0 = rng.random_range(-0.1..0.1);
        let field = |p: [f64; 3]| c0 + coef[0] * p[0] + coef[1] * p[1] + coef[2] * p[2];
        let mut data = Vec::new();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let c = [x, y, z].map(|i| i as f64 + 0.5);
                    data.push(field([c[0] * fa[0], c[1] * fa[1], c[2] * fa[2]]) as f32);
                }
            }
        }
        let img = Volume::new(d, from, data).unwrap();
        let out = resample(&img, to, Interp::Trilinear).unwrap();
        let od = out.dims();
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let p = [x, y, z].map(|i| i as f64 + 0.5);
                    let phys = [p[0] * ta[0], p[1] * ta[1], p[2] * ta[2]];
                    // Points between the first and last source voxel centres.
                    let interior = (0..3).all(|a| phys[a] >= 0.5 * fa[a] && phys[a] <= ext[a] - 0.5 * fa[a]);
                    if interior {
                        worst = worst.max((f64::from(out.get(x, y, z)) - field(phys)).abs());
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-5, "trilinear linear-field error {worst:e}");
    Ok(format!(
        "identity resample exact, pad/crop inverse exact, .nii/.nii.gz round trips exact, linear-field error {worst:.1e}"
    ))
}

/// Random union of ellipsoids (optionally with a detached island) in a
/// volume of up to 300×300×100 voxels.
fn synthetic_prior(rng: &mut ChaCha8Rng) -> (OrganPrior, [usize; 3]) {
    let d = [
        rng.random_range(100..=300),
        rng.random_range(100..=300),
        rng.random_range(40..=100),
    ];
    let mut mask = vec![0u8; d.iter().product()];
    let blobs = rng.random_range(1..=3);
    for _ in 0..blobs {
        let r = [
            rng.random_range(3.0..d[0] as f64 * 0.45),
            rng.random_range(3.0..d[1] as f64 * 0.45),
            rng.random_range(2.0..d[2] as f64 * 0.45),
        ];
        let c: Vec<f64> = (0..3).map(|a| rng.random_range(0.0..d[a] as f64)).collect();
        let lo: Vec<usize> = (0..3).map(|a| (c[a] - r[a]).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = (0..3).map(|a| ((c[a] + r[a]).ceil() as usize).min(d[a] - 1)).collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let q = [x, y, z].map(|i| i as f64);
                    let s: f64 = (0..3).map(|a| ((q[a] - c[a]) / r[a]).powi(2)).sum();
                    if s <= 1.0 {
                        mask[(z * d[1] + y) * d[0] + x] = 1;
                    }
                }
            }
        }
    }
    // Guarantee at least one voxel even if every blob centre fell badly.
    let at = rng.random_range(0..mask.len());
    mask[at] = 1;
    let spacing = Spacing::new(0.8, 0.8, 2.5).unwrap();
    let vol = Volume::new(d, spacing, mask).unwrap();
    (OrganPrior::from_mask(OrganId::new(6).unwrap(), &vol), d)
}

/// Voxels of the prior's bounding box covered by at least one window,
/// computed with a 3D difference array.
fn covered_in_bbox(prior: &OrganPrior, origins: &[[i64; 3]], pd: [usize; 3]) -> (Vec<bool>, [usize; 3]) {
    let b = prior.bbox.unwrap();
    let e = b.extent();
    let (ex, ey, ez) = (e[0] + 1, e[1] + 1, e[2] + 1);
    let mut diff = vec![0i32; ex * ey * ez];
    for o in origins {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let l = (o[a] - b.lo[a] as i64).max(0);
            let h = (o[a] + pd[a] as i64 - b.lo[a] as i64).min(e[a] as i64);
            if l >= h {
                empty = true;
            }
            lo[a] = l as usize;
            hi[a] = h.max(0) as usize;
        }
        if empty {
            continue;
        }
        for (dz, z) in [(1, lo[2]), (-1, hi[2])] {
            for (dy, y) in [(1, lo[1]), (-1, hi[1])] {
                for (dx, x) in [(1, lo[0]), (-1, hi[0])] {
                    diff[(z * ey + y) * ex + x] += dx * dy * dz;
                }
            }
        }
    }
    for z in 0..ez {
        for y in 0..ey {
            for x in 1..ex {
                diff[(z * ey + y) * ex + x] += diff[(z * ey + y) * ex + x - 1];
            }
        }
    }
    for z in 0..ez {
        for y in 1..ey {
            for x in 0..ex {
                diff[(z * ey + y) * ex + x] += diff[(z * ey + y - 1) * ex + x];
            }
        }
    }
    for z in 1..ez {
        for y in 0..ey {
            for x in 0..ex {
                diff[(z * ey + y) * ex + x] += diff[((z - 1) * ey + y) * ex + x];
            }
        }
    }
    let covered = (0..e[2])
        .flat_map(|z| (0..e[1]).flat_map(move |y| (0..e[0]).map(move |x| (z * ey + y) * ex + x)))
        .map(|i| diff[i] > 0)
        .collect();
    (covered, e)
}

fn coverage() -> Check {
    let t0 = Instant::now();
    let spec = PatchSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut voxels, mut grown, mut max_patches) = (0usize, 0usize, 0usize);
    for i in 0..100 {
        let (prior, d) = synthetic_prior(&mut rng);
        let plan = sample_origins(&prior, &spec, d, SeededRng::for_case_organ(5, &format!("cov{i}"), 6)).unwrap();
        ensure!(
            plan.origins.len() >= spec.patches_per_organ,
            "prior {i}: only {} patches",
            plan.origins.len()
        );
        let (covered, e) = covered_in_bbox(&prior, &plan.origins, spec.dims);
        let b = prior.bbox.unwrap();
        let mask = prior.bbox_mask();
        for (j, (&m, &c)) in mask.iter().zip(&covered).enumerate() {
            if m != 0 && !c {
                let (x, y, z) = (j % e[0], (j / e[0]) % e[1], j / (e[0] * e[1]));
                return Err(format!(
                    "prior {i}: voxel {:?} not covered by any of {} patches",
                    [b.lo[0] + x, b.lo[1] + y, b.lo[2] + z],
                    plan.origins.len()
                ));
            }
        }
        voxels += prior.voxel_count();
        grown += usize::from(plan.grown_by() > 0);
        max_patches = max_patches.max(plan.origins.len());
    }
    Ok(format!(
        "100 priors, {voxels} voxels, 100% covered ({grown} needed more than 50 patches, max {max_patches}); {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn fusion_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut labelled = 0usize;
    for inst in 0..100 {
        let d = [
            rng.random_range(1..=32),
            rng.random_range(1..=32),
            rng.random_range(1..=32),
        ];
        let n_patches = rng.random_range(0..=30);
        // Few organs and coarse patterns make ties and conflicts common.
        let organs = rng.random_range(1..=4u8);
        let votes: Vec<PatchVote> = (0..n_patches)
            .map(|_| {
                let pd = [
                    rng.random_range(1..=16),
                    rng.random_range(1..=16),
                    rng.random_range(1..=16),
                ];
                let origin: [i64; 3] = std::array::from_fn(|a| rng.random_range(1 - pd[a] as i64..d[a] as i64));
                let p_on = rng.random_range(0.0..1.0);
                let block = rng.random_range(1..=4);
                let pred = (0..pd.iter().product::<usize>())
                    .map(|i| {
                        let (x, y) = (i % pd[0], (i / pd[0]) % pd[1]);
                        u8::from(((x / block + y / block) % 3 == 0) ^ rng.random_bool(p_on))
                    })
                    .collect();
                PatchVote {
                    organ: OrganId::new(rng.random_range(1..=organs)).unwrap(),
                    origin,
                    dims: pd,
                    pred,
                }
            })
            .collect();
        let s = Spacing::new(1.0, 1.0, 1.0).unwrap();
        let fast = fuse(&votes, d, s).unwrap();
        let slow = fuse_brute_force(&votes, d, s).unwrap();
        if fast != slow {
            let diff = fast.data().iter().zip(slow.data()).filter(|(a, b)| a != b).count();
            return Err(format!("instance {inst}: {diff} voxels differ"));
        }
        labelled += fast.data().iter().filter(|&&v| v != 0).count();
    }
    Ok(format!("100 instances identical ({labelled} labelled voxels in total)"))
}

/// Label volume with all 13 organs as disjoint blocks, minus `absent`.
fn thirteen_organ_case(absent: &[u8]) -> LabelVolume {
    let d = [40, 40, 16];
    let mut v = Volume::filled(d, Spacing::new(2.0, 2.0, 5.0).unwrap(), 0u8).unwrap();
    for organ in 1..=NUM_ORGANS as u8 {
        if absent.contains(&organ) {
            continue;
        }
        let k = (organ - 1) as usize;
        let (bx, by) = ((k % 4) * 10, (k / 4) * 10);
        for z in 4..12 {
            for y in by + 1..by + 8 {
                for x in bx + 1..bx + 8 {
                    v.set(x, y, z, organ);
                }
            }
        }
    }
    v
}

fn patch_accounting() -> Check {
    let spec = PatchSpec::default();
    let count = |absent_per_case: &dyn Fn(usize) -> Vec<u8>| -> std::result::Result<(usize, usize, Manifest), String> {
        let priors: Vec<(String, Vec<OrganPrior>)> = (0..60)
            .map(|i| {
                (
                    format!("synth_{i:02}"),
                    extract_all_priors(&thirteen_organ_case(&absent_per_case(i))),
                )
            })
            .collect();
        let cases: Vec<(&str, &[OrganPrior])> = priors.iter().map(|(id, p)| (id.as_str(), p.as_slice())).collect();
        let m = plan_manifest(&cases, &spec, 17).map_err(|e| e.to_string())?;
        let absent: usize = (0..60).map(|i| absent_per_case(i).len()).sum();
        Ok((m.patch_count(), absent, m))
    };
    let (full, _, m) = count(&|_| Vec::new())?;
    ensure!(full == 39_000, "{full} rows for 60 complete cases");
    ensure!(m.expected() == 39_000, "manifest expects {}", m.expected());
    let text = m.to_jsonl().map_err(|e| e.to_string())?;
    let parsed = Manifest::from_jsonl(&text).map_err(|e| e.to_string())?;
    ensure!(
        parsed.patch_count() == 39_000,
        "serialized manifest holds {} rows",
        parsed.patch_count()
    );

    let gaps = |i: usize| -> Vec<u8> {
        match i % 5 {
            0 => vec![4],
            1 => vec![4, 9, 13],
            _ => Vec::new(),
        }
    };
    let (partial, absent, m) = count(&gaps)?;
    ensure!(
        partial + 50 * absent == 39_000,
        "{partial} rows with {absent} absent organs"
    );
    ensure!(
        m.skips().count() == absent,
        "{} skip records for {absent} absent organs",
        m.skips().count()
    );
    Ok(format!(
        "60x13x50 = {full} rows; {absent} absent organs give {partial} = 39000 - 50*{absent}"
    ))
}

fn fold_structure() -> Check {
    let ids: Vec<String> = (0..80).map(|i| format!("case{i:03}")).collect();
    let folds = make_folds(&ids, 2024).map_err(|e| e.to_string())?;
    ensure!(folds.len() == NUM_FOLDS, "{} folds", folds.len());
    let mut vals: Vec<&String> = Vec::new();
    for f in &folds {
        ensure!(
            f.train.len() == 60 && f.val.len() == 20,
            "fold {}: {}/{}",
            f.fold,
            f.train.len(),
            f.val.len()
        );
        ensure!(
            f.train.iter().all(|t| !f.val.contains(t)),
            "fold {}: train and val overlap",
            f.fold
        );
        vals.extend(&f.val);
    }
    vals.sort();
    vals.dedup();
    ensure!(vals.len() == 80, "validation sets cover {} distinct ids", vals.len());
    Ok("80 ids -> 4 folds of 60 train / 20 val, validation sets partition the cohort".into())
}

fn shape_contracts() -> Check {
    let t0 = Instant::now();
    let cfg = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut run = |net_cfg: UNetConfig, batch: usize, dims: [usize; 3]| {
        let net = UNet::new(net_cfg.clone()).unwrap();
        let params = net.init_params::<f32, _>(&mut rng);
        let n = batch * net_cfg.in_channels * dims.iter().product::<usize>();
        let x = Tensor::from_vec(
            batch,
            net_cfg.in_channels,
            dims,
            (0..n).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect(),
        )
        .unwrap();
        let y = net.forward_eval(&params, &x).unwrap();
        let finite = y.data().iter().all(|v| v.is_finite());
        (y.shape(), finite)
    };
    let c = cfg.coarse.dims;
    let (cs, cf) = run(cfg.coarse.unet(), cfg.coarse.batch, c);
    ensure!(cs == (1, 14, 168, 168, 64) && cf, "coarse output {cs:?} (finite: {cf})");
    let r = cfg.refine.patch_dims;
    let (rs, rf) = run(cfg.refine.unet(), cfg.refine.batch, r);
    ensure!(rs == (2, 2, 128, 128, 64) && rf, "refine output {rs:?} (finite: {rf})");
    Ok(format!(
        "(1,1,{},{},{}) -> {cs:?}; (2,2,{},{},{}) -> {rs:?}; {:.1}s",
        c[0],
        c[1],
        c[2],
        r[0],
        r[1],
        r[2],
        t0.elapsed().as_secs_f64()
    ))
}

fn toy_config(root: &Path) -> std::result::Result<PipelineConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = PipelineConfig::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    cfg.paths.data_dir = root.join("data");
    cfg.paths.work_dir = root.join("work");
    Ok(cfg)
}

fn run_all_stages(cfg: &PipelineConfig) -> std::result::Result<Vec<cascade_seg::CohortReport>, String> {
    pipeline::run_phantom(cfg).map_err(|e| e.to_string())?;
    pipeline::run_split(cfg).map_err(|e| e.to_string())?;
    pipeline::run_preprocess(cfg).map_err(|e| e.to_string())?;
    pipeline::run_fold(cfg, 0).map_err(|e| e.to_string())
}

fn toy_end_to_end() -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = toy_config(dir.path())?;
    let splits_ok = cfg.phantom.cases == 12 && cfg.split.test_cases == 4;
    ensure!(splits_ok, "toy config is not the 12-case 8/4 cohort");
    let reports = run_all_stages(&cfg)?;
    let c = reports[0].average.ok_or("no coarse scores")?;
    let cr = reports[1].average.ok_or("no refined scores")?;
    ensure!(reports[1].cases == 4, "{} test cases scored", reports[1].cases);
    let detail = format!(
        "test Dice C = {c:.4}, C+R = {cr:.4} ({:.0}s)",
        t0.elapsed().as_secs_f64()
    );
    ensure!(cr >= 0.85, "{detail}: C+R below 0.85");
    ensure!(cr >= c, "{detail}: refinement lowered Dice");
    Ok(detail)
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|r| r.flatten().map(|e| e.path()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn determinism() -> Check {
    let t0 = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    // The toy cohort at half the voxel resolution with short training:
    // every stage still runs, in a fraction of the time.
    let shorten = |mut c: PipelineConfig| {
        c.phantom.dims = [48, 48, 24];
        c.phantom.spacing = [4.0, 4.0, 8.0];
        c.coarse.spacing = [8.0, 8.0, 16.0];
        c.coarse.dims = [24, 24, 12];
        c.coarse.epochs = 3;
        c.refine.patch_dims = [16, 16, 8];
        c.refine.patches_per_organ = 4;
        c.refine.epochs = 1;
        c
    };
    let ca = shorten(toy_config(a.path())?);
    let cb = shorten(toy_config(b.path())?);
    run_all_stages(&ca)?;
    run_all_stages(&cb)?;
    let mut compared = 0;
    let mut labelled = 0;
    for sub in ["coarse_pred", "pred_coarse", "pred"] {
        let fa = files_in(&a.path().join("work/fold0").join(sub));
        let fb = files_in(&b.path().join("work/fold0").join(sub));
        ensure!(
            !fa.is_empty() && fa.len() == fb.len(),
            "{sub}: {} vs {} files",
            fa.len(),
            fb.len()
        );
        for (x, y) in fa.iter().zip(&fb) {
            let (va, vb) = (
                nifti::read_label(x).map_err(|e| e.to_string())?,
                nifti::read_label(y).map_err(|e| e.to_string())?,
            );
            ensure!(va == vb, "{} differs between runs", x.display());
            let raw_equal =
                std::fs::read(x).map_err(|e| e.to_string())? == std::fs::read(y).map_err(|e| e.to_string())?;
            ensure!(raw_equal, "{} bytes differ between runs", x.display());
            labelled += va.data().iter().filter(|&&v| v != 0).count();
            compared += 1;
        }
    }
    ensure!(labelled > 0, "runs produced no foreground at all");
    Ok(format!(
        "{compared} label volumes bit-identical across two runs ({:.0}s)",
        t0.elapsed().as_secs_f64()
    ))
}

fn main() {
    if let Err(e) = par::init_threads(1) {
        eprintln!("could not pin the thread pool: {e}");
    }
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", gradients),
        ("loss sanity", loss_sanity),
        ("geometry identities", geometry),
        ("coverage guarantee", coverage),
        ("fusion oracle equivalence", fusion_oracle),
        ("patch accounting", patch_accounting),
        ("fold structure", fold_structure),
        ("shape contracts", shape_contracts),
        ("toy end-to-end", toy_end_to_end),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
