//! Stage orchestration over a data directory and a work directory.
//!
//! Layout under `work_dir`:
//!
//! ```text
//! splits.json                      test hold-out + four CV folds
//! coarse/<id>.img.nii              normalized, resampled, padded image
//! coarse/<id>.lab.nii              matching label grid
//! coarse/<id>.geom.json            native geometry + pad/crop record
//! fold<k>/coarse.ckpt              best-validation coarse model
//! fold<k>/coarse_history.tsv
//! fold<k>/coarse_pred/<id>.nii.gz  coarse prediction on the native grid
//! fold<k>/patches/{train,val}/     manifest.jsonl, patches.bin, patches.json
//! fold<k>/refine.ckpt
//! fold<k>/refine_history.tsv
//! fold<k>/pred/<id>.nii.gz         fused coarse+refine prediction
//! fold<k>/pred_coarse/<id>.nii.gz  coarse-only prediction
//! fold<k>/report/dice.{csv,json}
//! ```

use std::path::{Path, PathBuf};

use cascade_nn::checkpoint::{Checkpoint, CheckpointHeader};
use cascade_nn::loss::{self, ClassWeights};
use cascade_nn::{AdamConfig, AdamState, Gradients, NetworkParams, Tensor, UNet, UNetConfig};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, WeightScheme};
use crate::error::{Result, SegError};
use crate::folds::{make_folds, FoldSplit, NUM_FOLDS};
use crate::fusion::FusionAccumulator;
use crate::metrics::{aggregate, evaluate_case, write_reports, CohortReport};
use crate::nifti::{list_cases, read_image, read_label, write_volume};
use crate::organ::NUM_ORGANS;
use crate::patch::{build_refine_dataset_with, extract_patch, sample_origins, Manifest, PatchStore, RefineCase};
use crate::phantom::gen_cohort;
use crate::prior::extract_all_priors_with;
use crate::resample::{normalize_intensity, pad_crop, resample, restore_native, CropPadRecord, Interp};
use crate::rng::SeededRng;
use crate::volume::{ImageVolume, LabelVolume, Spacing};

/// Paths of every pipeline artifact.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            data_dir: cfg.paths.data_dir.clone(),
            work_dir: cfg.paths.work_dir.clone(),
        }
    }

    pub fn images_dir(&self) -> PathBuf {
        self.data_dir.join("images")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.data_dir.join("labels")
    }

    pub fn splits(&self) -> PathBuf {
        self.work_dir.join("splits.json")
    }

    pub fn coarse_dir(&self) -> PathBuf {
        self.work_dir.join("coarse")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.work_dir.join(format!("fold{fold}"))
    }

    pub fn coarse_ckpt(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("coarse.ckpt")
    }

    pub fn refine_ckpt(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("refine.ckpt")
    }

    pub fn coarse_pred_dir(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("coarse_pred")
    }

    pub fn patches_dir(&self, fold: usize, part: &str) -> PathBuf {
        self.fold_dir(fold).join("patches").join(part)
    }

    pub fn pred_dir(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("pred")
    }

    pub fn pred_coarse_dir(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("pred_coarse")
    }

    pub fn report_dir(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("report")
    }
}

/// Path of `<dir>/<id>.nii.gz` or `<dir>/<id>.nii`, whichever exists.
pub fn case_path(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["nii.gz", "nii"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(SegError::UnmatchedCases(vec![id.to_string()]))
}

fn check_fold(fold: usize) -> Result<()> {
    if fold >= NUM_FOLDS {
        return Err(SegError::Config(format!("fold {fold} outside 0..{NUM_FOLDS}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- cohort

/// Writes a phantom cohort into `data_dir/{images,labels}`.
pub fn run_phantom(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let layout = Layout::new(cfg);
    std::fs::create_dir_all(layout.images_dir())?;
    std::fs::create_dir_all(layout.labels_dir())?;
    let cases = gen_cohort(&cfg.phantom, cfg.seed)?;
    for (id, img, lab) in &cases {
        write_volume(img, &layout.images_dir().join(format!("{id}.nii.gz")))?;
        write_volume(lab, &layout.labels_dir().join(format!("{id}.nii.gz")))?;
    }
    log::info!("wrote {} phantom cases to {}", cases.len(), layout.data_dir.display());
    Ok(cases.into_iter().map(|c| c.0).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub test: Vec<String>,
    pub folds: Vec<FoldSplit>,
}

impl Splits {
    pub fn fold(&self, fold: usize) -> Result<&FoldSplit> {
        check_fold(fold)?;
        self.folds
            .get(fold)
            .ok_or_else(|| SegError::Config(format!("splits file has no fold {fold}")))
    }

    pub fn all_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.test.clone();
        if let Some(f) = self.folds.first() {
            ids.extend(f.train.iter().chain(&f.val).cloned());
        }
        ids.sort();
        ids
    }
}

/// Holds out `test_cases` ids at random, then splits the rest into folds.
pub fn make_splits(ids: &[String], test_cases: usize, seed: u64) -> Result<Splits> {
    let mut ids = ids.to_vec();
    ids.sort();
    if ids.len() < test_cases + NUM_FOLDS {
        return Err(SegError::TooFewCases {
            needed: test_cases + NUM_FOLDS,
            got: ids.len(),
        });
    }
    ids.shuffle(&mut SeededRng::labeled(seed, "test-split").rng());
    let mut test = ids[..test_cases].to_vec();
    test.sort();
    let mut rest = ids[test_cases..].to_vec();
    rest.sort();
    Ok(Splits {
        test,
        folds: make_folds(&rest, seed)?,
    })
}

pub fn run_split(cfg: &PipelineConfig) -> Result<Splits> {
    let layout = Layout::new(cfg);
    let ids: Vec<String> = list_cases(&layout.images_dir())?.into_iter().map(|c| c.0).collect();
    let labels: Vec<String> = list_cases(&layout.labels_dir())?.into_iter().map(|c| c.0).collect();
    let unmatched: Vec<String> = ids
        .iter()
        .filter(|i| !labels.contains(i))
        .chain(labels.iter().filter(|l| !ids.contains(l)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(SegError::UnmatchedCases(unmatched));
    }
    let splits = make_splits(&ids, cfg.split.test_cases, cfg.seed)?;
    std::fs::create_dir_all(&layout.work_dir)?;
    std::fs::write(layout.splits(), serde_json::to_vec_pretty(&splits)?)?;
    Ok(splits)
}

pub fn load_splits(cfg: &PipelineConfig) -> Result<Splits> {
    Ok(serde_json::from_slice(&std::fs::read(Layout::new(cfg).splits())?)?)
}

// ------------------------------------------------------------ preprocess

/// Everything needed to map a coarse-grid prediction back to native space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseGeometry {
    pub native_dims: [usize; 3],
    pub native_spacing: Spacing,
    pub record: CropPadRecord,
}

/// Normalize, resample to the coarse spacing, centre in the coarse grid.
pub fn preprocess_image(cfg: &PipelineConfig, img: &ImageVolume) -> Result<(ImageVolume, CoarseGeometry)> {
    let norm = normalize_intensity(img, cfg.normalize.window_lo, cfg.normalize.window_hi)?;
    let res = resample(&norm, cfg.coarse_spacing()?, Interp::Trilinear)?;
    // 0 is the window minimum after normalization.
    let (out, record) = pad_crop(&res, cfg.coarse.dims, 0.0)?;
    Ok((
        out,
        CoarseGeometry {
            native_dims: img.dims(),
            native_spacing: img.spacing(),
            record,
        },
    ))
}

pub fn preprocess_label(cfg: &PipelineConfig, lab: &LabelVolume) -> Result<LabelVolume> {
    lab.validate_labels()?;
    let res = resample(lab, cfg.coarse_spacing()?, Interp::Nearest)?;
    Ok(pad_crop(&res, cfg.coarse.dims, 0)?.0)
}

fn coarse_paths(layout: &Layout, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    let d = layout.coarse_dir();
    (
        d.join(format!("{id}.img.nii")),
        d.join(format!("{id}.lab.nii")),
        d.join(format!("{id}.geom.json")),
    )
}

/// Writes the coarse-grid image, label and geometry of every case.
pub fn run_preprocess(cfg: &PipelineConfig) -> Result<usize> {
    let layout = Layout::new(cfg);
    std::fs::create_dir_all(layout.coarse_dir())?;
    let ids: Vec<String> = list_cases(&layout.images_dir())?.into_iter().map(|c| c.0).collect();
    let results = cascade_nn::par::map_slice(&ids, |id| -> Result<()> {
        let img = read_image(&case_path(&layout.images_dir(), id)?)?;
        let lab = read_label(&case_path(&layout.labels_dir(), id)?)?;
        if img.dims() != lab.dims() {
            return Err(SegError::DimsMismatch(format!(
                "{id}: image {:?} vs label {:?}",
                img.dims(),
                lab.dims()
            )));
        }
        let (cimg, geom) = preprocess_image(cfg, &img)?;
        let clab = preprocess_label(cfg, &lab)?;
        let (pi, pl, pg) = coarse_paths(&layout, id);
        write_volume(&cimg, &pi)?;
        write_volume(&clab, &pl)?;
        std::fs::write(pg, serde_json::to_vec_pretty(&geom)?)?;
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    log::info!("preprocessed {} cases", ids.len());
    Ok(ids.len())
}

struct CoarseCase {
    image: ImageVolume,
    label: LabelVolume,
}

fn load_coarse_case(layout: &Layout, id: &str) -> Result<CoarseCase> {
    let (pi, pl, _) = coarse_paths(layout, id);
    Ok(CoarseCase {
        image: read_image(&pi)?,
        label: read_label(&pl)?,
    })
}

fn load_geometry(layout: &Layout, id: &str) -> Result<CoarseGeometry> {
    Ok(serde_json::from_slice(&std::fs::read(coarse_paths(layout, id).2)?)?)
}

// ----------------------------------------------------------------- model

/// A network with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: UNet,
    pub params: NetworkParams,
}

impl Model {
    /// Fresh He-initialized model; the seed stream is keyed by `label`.
    pub fn init(config: UNetConfig, seed: u64, label: &str) -> Result<Self> {
        let net = UNet::new(config)?;
        let params = net.init_params(&mut SeededRng::labeled(seed, label).rng());
        Ok(Self { net, params })
    }

    /// Loads a checkpoint, insisting its architecture matches `expected`.
    pub fn load(path: &Path, expected: &UNetConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if &ckpt.header.config != expected {
            return Err(SegError::Config(format!(
                "{}: checkpoint architecture {:?} does not match config {:?}",
                path.display(),
                ckpt.header.config,
                expected
            )));
        }
        let net = UNet::new(ckpt.header.config.clone())?;
        net.check_params(&ckpt.params)?;
        Ok(Self {
            net,
            params: ckpt.params,
        })
    }

    pub fn save(&self, path: &Path, step: u64, meta: serde_json::Value) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Checkpoint {
            header: CheckpointHeader {
                config: self.net.config().clone(),
                step,
                meta,
            },
            params: self.params.clone(),
        }
        .save(path)?;
        Ok(())
    }
}

// -------------------------------------------------------------- training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch of the kept parameters; 0 means the initialization.
    pub best_epoch: usize,
}

impl History {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\n");
        for r in &self.records {
            let val = r.val_loss.map_or_else(|| "NA".to_string(), |v| format!("{v:.8}"));
            out.push_str(&format!("{}\t{:.8}\t{}\n", r.epoch, r.train_loss, val));
        }
        out
    }
}

/// Epoch with the lowest validation loss (train loss when there is no
/// validation set); the earliest such epoch on ties, 0 for no epochs.
pub fn select_best(records: &[EpochRecord]) -> usize {
    let key = |r: &EpochRecord| r.val_loss.unwrap_or(r.train_loss);
    let mut best: Option<&EpochRecord> = None;
    for r in records {
        if best.is_none_or(|b| key(r) < key(b)) {
            best = Some(r);
        }
    }
    best.map_or(0, |r| r.epoch)
}

struct Trainer<'a> {
    label: &'a str,
    seed: u64,
    epochs: usize,
    batch: usize,
    lr: f64,
}

impl Trainer<'_> {
    /// Adam over shuffled mini-batches; keeps the best-validation parameters.
    fn fit(
        &self,
        model: &mut Model,
        n_train: usize,
        mut step: impl FnMut(&UNet, &mut NetworkParams, &[usize]) -> Result<(f64, Gradients<f32>)>,
        mut validate: impl FnMut(&UNet, &NetworkParams) -> Result<Option<f64>>,
    ) -> Result<(History, u64)> {
        if n_train == 0 && self.epochs > 0 {
            return Err(SegError::Empty("training set"));
        }
        let mut adam = AdamState::new(
            &model.params,
            AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        );
        let mut best_params = model.params.clone();
        let mut best_step = 0;
        let mut records: Vec<EpochRecord> = Vec::with_capacity(self.epochs);
        for epoch in 1..=self.epochs {
            let mut order: Vec<usize> = (0..n_train).collect();
            order.shuffle(&mut SeededRng::labeled(self.seed, &format!("{}/epoch{epoch}", self.label)).rng());
            let mut total = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(self.batch) {
                let (loss, grads) = step(&model.net, &mut model.params, chunk)?;
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(SegError::Diverged { epoch });
                }
                adam.step(&mut model.params, &grads)?;
                total += loss * chunk.len() as f64;
                seen += chunk.len();
            }
            let record = EpochRecord {
                epoch,
                train_loss: total / seen as f64,
                val_loss: validate(&model.net, &model.params)?,
            };
            if record.val_loss.is_some_and(|v| !v.is_finite()) {
                return Err(SegError::Diverged { epoch });
            }
            log::info!(
                "{} epoch {epoch}/{}: train {:.5} val {}",
                self.label,
                self.epochs,
                record.train_loss,
                record.val_loss.map_or("-".into(), |v| format!("{v:.5}"))
            );
            records.push(record);
            if select_best(&records) == epoch {
                best_params = model.params.clone();
                best_step = adam.step;
            }
        }
        model.params = best_params;
        let best_epoch = select_best(&records);
        Ok((History { records, best_epoch }, best_step))
    }
}

fn stack(items: &[&[f32]], channels: usize, spatial: [usize; 3]) -> Result<Tensor<f32>> {
    let data: Vec<f32> = items.iter().flat_map(|s| s.iter().copied()).collect();
    Ok(Tensor::from_vec(items.len(), channels, spatial, data)?)
}

fn class_weights(scheme: WeightScheme, target: &Tensor<f32>) -> ClassWeights {
    match scheme {
        WeightScheme::Uniform => ClassWeights::uniform(target.channels()),
        WeightScheme::InverseVolume => ClassWeights::inverse_volume(target),
    }
}

fn coarse_batch(cases: &[CoarseCase], which: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let spatial = cases[which[0]].image.dims();
    let imgs: Vec<&[f32]> = which.iter().map(|&i| cases[i].image.data()).collect();
    let input = stack(&imgs, 1, spatial)?;
    let onehots: Vec<Tensor<f32>> = which
        .iter()
        .map(|&i| loss::onehot(cases[i].label.data(), spatial, NUM_ORGANS + 1))
        .collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&[f32]> = onehots.iter().map(|t| t.data()).collect();
    Ok((input, stack(&refs, NUM_ORGANS + 1, spatial)?))
}

/// Trains the coarse multi-organ network on preprocessed coarse grids.
pub fn train_coarse_on(
    cfg: &PipelineConfig,
    fold: usize,
    train: &[CoarseCaseRef<'_>],
    val: &[CoarseCaseRef<'_>],
) -> Result<(Model, History, u64)> {
    let to_owned = |c: &CoarseCaseRef<'_>| CoarseCase {
        image: c.image.clone(),
        label: c.label.clone(),
    };
    let train: Vec<CoarseCase> = train.iter().map(to_owned).collect();
    let val: Vec<CoarseCase> = val.iter().map(to_owned).collect();
    train_coarse_cases(cfg, fold, &train, &val)
}

/// Borrowed coarse-grid training pair.
#[derive(Debug, Clone, Copy)]
pub struct CoarseCaseRef<'a> {
    pub image: &'a ImageVolume,
    pub label: &'a LabelVolume,
}

fn train_coarse_cases(
    cfg: &PipelineConfig,
    fold: usize,
    train: &[CoarseCase],
    val: &[CoarseCase],
) -> Result<(Model, History, u64)> {
    let mut model = Model::init(cfg.coarse.unet(), cfg.seed, &format!("coarse-init/{fold}"))?;
    let scheme = cfg.coarse.class_weights;
    let trainer = Trainer {
        label: &format!("coarse/fold{fold}"),
        seed: cfg.seed,
        epochs: cfg.coarse.epochs,
        batch: cfg.coarse.batch,
        lr: cfg.coarse.lr,
    };
    let (history, step) = trainer.fit(
        &mut model,
        train.len(),
        |net, params, which| {
            let (input, target) = coarse_batch(train, which)?;
            let (logits, trace) = net.forward_train(params, &input)?;
            let probs = loss::softmax_channels(&logits);
            let w = class_weights(scheme, &target);
            let (l, g) = loss::msdl_grad(&probs, &target, &w, loss::DEFAULT_EPS)?;
            Ok((l, net.backward(params, &trace, &g)?))
        },
        |net, params| {
            if val.is_empty() {
                return Ok(None);
            }
            let mut total = 0.0;
            for i in 0..val.len() {
                let (input, target) = coarse_batch(val, &[i])?;
                let probs = loss::softmax_channels(&net.forward_eval(params, &input)?);
                let w = class_weights(scheme, &target);
                total += loss::msdl(&probs, &target, &w, loss::DEFAULT_EPS)?;
            }
            Ok(Some(total / val.len() as f64))
        },
    )?;
    Ok((model, history, step))
}

pub fn run_train_coarse(cfg: &PipelineConfig, fold: usize) -> Result<History> {
    let layout = Layout::new(cfg);
    let split = load_splits(cfg)?.fold(fold)?.clone();
    let load =
        |ids: &[String]| -> Result<Vec<CoarseCase>> { ids.iter().map(|id| load_coarse_case(&layout, id)).collect() };
    let train = load(&split.train)?;
    let val = load(&split.val)?;
    let (model, history, step) = train_coarse_cases(cfg, fold, &train, &val)?;
    let meta = serde_json::json!({ "stage": "coarse", "fold": fold, "best_epoch": history.best_epoch });
    model.save(&layout.coarse_ckpt(fold), step, meta)?;
    std::fs::write(layout.fold_dir(fold).join("coarse_history.tsv"), history.to_tsv())?;
    Ok(history)
}

// ------------------------------------------------------------- inference

/// Coarse label grid for one preprocessed image.
pub fn coarse_segment(model: &Model, coarse_image: &ImageVolume) -> Result<LabelVolume> {
    let input = Tensor::from_vec(1, 1, coarse_image.dims(), coarse_image.data().to_vec())?;
    let logits = model.net.forward_eval(&model.params, &input)?;
    let labels = loss::argmax_channels(&logits, 0);
    LabelVolume::new(coarse_image.dims(), coarse_image.spacing(), labels)
}

/// Coarse prediction of a raw native image, mapped back to its native grid.
pub fn coarse_predict_native(cfg: &PipelineConfig, model: &Model, image: &ImageVolume) -> Result<LabelVolume> {
    let (cimg, geom) = preprocess_image(cfg, image)?;
    let coarse = coarse_segment(model, &cimg)?;
    restore_native(&coarse, &geom.record, geom.native_spacing, geom.native_dims)
}

pub fn run_infer_coarse(cfg: &PipelineConfig, fold: usize) -> Result<usize> {
    let layout = Layout::new(cfg);
    let splits = load_splits(cfg)?;
    check_fold(fold)?;
    let model = Model::load(&layout.coarse_ckpt(fold), &cfg.coarse.unet())?;
    let out = layout.coarse_pred_dir(fold);
    std::fs::create_dir_all(&out)?;
    let ids = splits.all_ids();
    for id in &ids {
        let (pi, ..) = coarse_paths(&layout, id);
        let geom = load_geometry(&layout, id)?;
        let coarse = coarse_segment(&model, &read_image(&pi)?)?;
        let native = restore_native(&coarse, &geom.record, geom.native_spacing, geom.native_dims)?;
        write_volume(&native, &out.join(format!("{id}.nii.gz")))?;
    }
    Ok(ids.len())
}

/// Outputs of the full two-stage inference on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub coarse: LabelVolume,
    pub fused: LabelVolume,
    pub patches: usize,
}

/// Refine stage for one case given its native coarse prediction: sample
/// covering patches around every present prior, predict each with the
/// refine model and fuse the binary votes.
pub fn refine_case(
    cfg: &PipelineConfig,
    refine: &Model,
    normalized: &ImageVolume,
    coarse_native: &LabelVolume,
    case_id: &str,
) -> Result<(LabelVolume, usize)> {
    let dims = normalized.dims();
    let spec = cfg.refine.patch_spec();
    let priors = extract_all_priors_with(coarse_native, cfg.prior);
    let mut acc = FusionAccumulator::new(dims, normalized.spacing())?;
    let mut count = 0;
    for prior in priors.iter().filter(|p| p.present()) {
        let rng = SeededRng::labeled(cfg.seed, &format!("infer/{case_id}/{}", prior.organ.get()));
        let plan = sample_origins(prior, &spec, dims, rng)?;
        for chunk in plan.origins.chunks(cfg.refine.batch) {
            let patches = chunk
                .iter()
                .map(|&o| extract_patch(normalized, prior, None, prior.organ, o, &spec))
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<Vec<f32>> = patches.iter().map(|p| p.input_data()).collect();
            let refs: Vec<&[f32]> = inputs.iter().map(|v| v.as_slice()).collect();
            let logits = refine.net.forward_eval(&refine.params, &stack(&refs, 2, spec.dims)?)?;
            for (n, p) in patches.iter().enumerate() {
                // Foreground probability above 0.5 exactly when its logit wins.
                let bg = logits.plane(n, 0);
                let fg = logits.plane(n, 1);
                let pred: Vec<u8> = fg.iter().zip(bg).map(|(f, b)| u8::from(f > b)).collect();
                acc.accumulate(p.organ, p.origin, spec.dims, &pred)?;
                count += 1;
            }
        }
    }
    Ok((acc.majority_vote(), count))
}

/// Full pipeline on one raw image.
pub fn infer_case(
    cfg: &PipelineConfig,
    coarse: &Model,
    refine: &Model,
    image: &ImageVolume,
    case_id: &str,
) -> Result<InferOutput> {
    let coarse_native = coarse_predict_native(cfg, coarse, image)?;
    let normalized = normalize_intensity(image, cfg.normalize.window_lo, cfg.normalize.window_hi)?;
    let (fused, patches) = refine_case(cfg, refine, &normalized, &coarse_native, case_id)?;
    Ok(InferOutput {
        coarse: coarse_native,
        fused,
        patches,
    })
}

/// Runs both stages on the held-out test cases of a fold.
pub fn run_infer(cfg: &PipelineConfig, fold: usize) -> Result<Vec<String>> {
    let layout = Layout::new(cfg);
    let splits = load_splits(cfg)?;
    check_fold(fold)?;
    let coarse = Model::load(&layout.coarse_ckpt(fold), &cfg.coarse.unet())?;
    let refine = Model::load(&layout.refine_ckpt(fold), &cfg.refine.unet())?;
    std::fs::create_dir_all(layout.pred_dir(fold))?;
    std::fs::create_dir_all(layout.pred_coarse_dir(fold))?;
    for id in &splits.test {
        let img = read_image(&case_path(&layout.images_dir(), id)?)?;
        let out = infer_case(cfg, &coarse, &refine, &img, id)?;
        log::info!("{id}: fused {} refine patches", out.patches);
        write_volume(&out.fused, &layout.pred_dir(fold).join(format!("{id}.nii.gz")))?;
        write_volume(&out.coarse, &layout.pred_coarse_dir(fold).join(format!("{id}.nii.gz")))?;
    }
    Ok(splits.test.clone())
}

// --------------------------------------------------------------- refine

fn load_refine_case(cfg: &PipelineConfig, layout: &Layout, fold: usize, id: &str) -> Result<RefineCase> {
    let img = read_image(&case_path(&layout.images_dir(), id)?)?;
    let gt = read_label(&case_path(&layout.labels_dir(), id)?)?;
    let coarse = read_label(&case_path(&layout.coarse_pred_dir(fold), id)?)?;
    Ok(RefineCase {
        id: id.to_string(),
        image: normalize_intensity(&img, cfg.normalize.window_lo, cfg.normalize.window_hi)?,
        gt,
        priors: extract_all_priors_with(&coarse, cfg.prior),
    })
}

/// Samples and materializes the refine patches of a fold's training and
/// validation cases from its coarse predictions.
pub fn run_build_patches(cfg: &PipelineConfig, fold: usize) -> Result<(Manifest, Manifest)> {
    let layout = Layout::new(cfg);
    let split = load_splits(cfg)?.fold(fold)?.clone();
    let spec = cfg.refine.patch_spec();
    let mut out = Vec::with_capacity(2);
    for (part, ids) in [("train", &split.train), ("val", &split.val)] {
        let priors = ids
            .iter()
            .map(|id| {
                let coarse = read_label(&case_path(&layout.coarse_pred_dir(fold), id)?)?;
                Ok(extract_all_priors_with(&coarse, cfg.prior))
            })
            .collect::<Result<Vec<_>>>()?;
        let dir = layout.patches_dir(fold, part);
        let (manifest, store) = build_refine_dataset_with(&dir, ids, &priors, &spec, cfg.seed, |id| {
            load_refine_case(cfg, &layout, fold, id)
        })?;
        log::info!(
            "fold {fold} {part}: {} patches ({} skipped organs)",
            store.len(),
            manifest.skips().count()
        );
        out.push(manifest);
    }
    let val = out.pop().expect("two parts");
    let train = out.pop().expect("two parts");
    Ok((train, val))
}

fn refine_batch(store: &PatchStore, which: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let patches = store.read_many(which)?;
    let dims = store.index.dims;
    let inputs: Vec<Vec<f32>> = patches.iter().map(|p| p.input_data()).collect();
    let labels: Vec<Vec<f32>> = patches
        .iter()
        .map(|p| p.label.iter().map(|&l| f32::from(l)).collect())
        .collect();
    let ir: Vec<&[f32]> = inputs.iter().map(|v| v.as_slice()).collect();
    let lr: Vec<&[f32]> = labels.iter().map(|v| v.as_slice()).collect();
    Ok((stack(&ir, 2, dims)?, stack(&lr, 1, dims)?))
}

/// Trains the single binary refine network on every organ's patches.
pub fn train_refine_on(
    cfg: &PipelineConfig,
    fold: usize,
    train: &PatchStore,
    val: Option<&PatchStore>,
) -> Result<(Model, History, u64)> {
    if train.is_empty() {
        return Err(SegError::Empty("refine patch store"));
    }
    let mut model = Model::init(cfg.refine.unet(), cfg.seed, &format!("refine-init/{fold}"))?;
    let batch = cfg.refine.batch;
    let trainer = Trainer {
        label: &format!("refine/fold{fold}"),
        seed: cfg.seed,
        epochs: cfg.refine.epochs,
        batch,
        lr: cfg.refine.lr,
    };
    let (history, step) = trainer.fit(
        &mut model,
        train.len(),
        |net, params, which| {
            let (input, target) = refine_batch(train, which)?;
            let (logits, trace) = net.forward_train(params, &input)?;
            let probs = loss::softmax_channels(&logits);
            let (l, g) = loss::binary_dice_grad(&probs, &target, loss::DEFAULT_EPS)?;
            Ok((l, net.backward(params, &trace, &g)?))
        },
        |net, params| {
            let Some(val) = val.filter(|v| !v.is_empty()) else {
                return Ok(None);
            };
            let idx: Vec<usize> = (0..val.len()).collect();
            let mut total = 0.0;
            for chunk in idx.chunks(batch) {
                let (input, target) = refine_batch(val, chunk)?;
                let probs = loss::softmax_channels(&net.forward_eval(params, &input)?);
                total += loss::binary_dice_loss(&probs, &target, loss::DEFAULT_EPS)? * chunk.len() as f64;
            }
            Ok(Some(total / val.len() as f64))
        },
    )?;
    Ok((model, history, step))
}

pub fn run_train_refine(cfg: &PipelineConfig, fold: usize) -> Result<History> {
    check_fold(fold)?;
    let layout = Layout::new(cfg);
    let train = PatchStore::open(&layout.patches_dir(fold, "train"))?;
    let val = PatchStore::open(&layout.patches_dir(fold, "val")).ok();
    let (model, history, step) = train_refine_on(cfg, fold, &train, val.as_ref())?;
    let meta = serde_json::json!({ "stage": "refine", "fold": fold, "best_epoch": history.best_epoch });
    model.save(&layout.refine_ckpt(fold), step, meta)?;
    std::fs::write(layout.fold_dir(fold).join("refine_history.tsv"), history.to_tsv())?;
    Ok(history)
}

// ------------------------------------------------------------ evaluation

/// Scores predictions against ground truth, pairing files by case id.
///
/// With `expected`, exactly those ids must exist in both directories;
/// otherwise the two directories must hold the same ids.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, expected: Option<&[String]>, label: &str) -> Result<CohortReport> {
    let preds = list_cases(pred_dir)?;
    let gts = list_cases(gt_dir)?;
    let ids: Vec<String> = match expected {
        Some(e) => e.to_vec(),
        None => preds.iter().map(|p| p.0.clone()).collect(),
    };
    let has = |list: &[(String, PathBuf)], id: &str| list.iter().any(|(i, _)| i == id);
    let mut missing: Vec<String> = ids
        .iter()
        .filter(|id| !has(&preds, id) || !has(&gts, id))
        .cloned()
        .collect();
    if expected.is_none() {
        missing.extend(gts.iter().filter(|(id, _)| !has(&preds, id)).map(|(id, _)| id.clone()));
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(SegError::UnmatchedCases(missing));
    }
    let scores = cascade_nn::par::map_slice(&ids, |id| {
        let pred = read_label(&case_path(pred_dir, id)?)?;
        let gt = read_label(&case_path(gt_dir, id)?)?;
        evaluate_case(id, &pred, &gt)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    aggregate(label, &scores)
}

/// Reports for the coarse-only and the fused predictions of a fold, written
/// to `out` (default `fold<k>/report`).
pub fn run_evaluate(cfg: &PipelineConfig, fold: usize, out: Option<&Path>) -> Result<Vec<CohortReport>> {
    let layout = Layout::new(cfg);
    let splits = load_splits(cfg)?;
    check_fold(fold)?;
    let gt = layout.labels_dir();
    let reports = vec![
        evaluate_dirs(
            &layout.pred_coarse_dir(fold),
            &gt,
            Some(&splits.test),
            &format!("C fold{fold}"),
        )?,
        evaluate_dirs(
            &layout.pred_dir(fold),
            &gt,
            Some(&splits.test),
            &format!("C+R fold{fold}"),
        )?,
    ];
    let dir = out.map_or_else(|| layout.report_dir(fold), Path::to_path_buf);
    write_reports(&dir, "dice", &reports)?;
    Ok(reports)
}

/// Every stage after the split for one fold.
pub fn run_fold(cfg: &PipelineConfig, fold: usize) -> Result<Vec<CohortReport>> {
    run_train_coarse(cfg, fold)?;
    run_infer_coarse(cfg, fold)?;
    run_build_patches(cfg, fold)?;
    run_train_refine(cfg, fold)?;
    run_infer(cfg, fold)?;
    run_evaluate(cfg, fold, None)
}
