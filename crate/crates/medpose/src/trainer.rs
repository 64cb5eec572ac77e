//! Training and evaluation: AdamW with layerwise learning-rate decay,
//! multi-dataset epoch scheduling, patient-disjoint few-shot splits, the main
//! train loop with checkpointing and divergence guards, and manifest-level
//! evaluation that maps predictions back to original pixel space.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Sample};
use crate::heatmap::{self, GaussianSpec, HeatmapStack};
use crate::landmark::{
    apply_transform, effective_spacing, full_image_transform, invert_transform, load_gray_image,
    load_manifest, resize_bilinear, resolve_image_path, DatasetManifest, LandmarkError,
    LandmarkSet, SynthDataset,
};
use crate::metrics::{self, MetricsError, MetricsReport, RadialErrors};
use crate::model::{save_checkpoint, Model, ModelError, OptimSnapshot};
use crate::par;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("history parse error: {0}")]
    HistoryParse(String),
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW hyperparameters with layerwise learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            layer_decay: 0.85,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<F = f32> {
    pub step: u64,
    moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> OptimState<F> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> Default for OptimState<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl OptimState<f32> {
    pub fn to_snapshot(&self) -> OptimSnapshot {
        OptimSnapshot {
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|(n, (m, v))| (n.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &OptimSnapshot) -> Self {
        Self {
            step: snap.step,
            moments: snap
                .moments
                .iter()
                .map(|(n, m, v)| (n.clone(), (m.clone(), v.clone())))
                .collect(),
        }
    }
}

/// Weight decay is skipped for biases, norm scales/shifts and the position
/// embedding.
pub fn decays(name: &str) -> bool {
    !(name == "pos_embed"
        || name.ends_with(".b")
        || name.ends_with(".gamma")
        || name.ends_with(".beta"))
}

/// Depth index for layerwise decay: embeddings 0, block i at i+1, head L+1.
fn layer_of(name: &str, depth: usize) -> usize {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let i: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        i + 1
    } else if name.starts_with("head.") {
        depth + 1
    } else {
        0
    }
}

/// Effective learning rate: base_lr · layer_decay^(L+1−layer).
pub fn layerwise_lr(name: &str, depth: usize, cfg: &OptimConfig) -> f64 {
    cfg.base_lr * cfg.layer_decay.powi((depth + 1 - layer_of(name, depth)) as i32)
}

/// One decoupled-AdamW update over the given gradients. Gradients are keyed
/// by parameter name; parameters without a gradient are untouched.
pub fn adamw_step<F: Scalar>(
    model: &mut Model<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimState<F>,
    cfg: &OptimConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::cast_from(cfg.beta1);
    let b2 = F::cast_from(cfg.beta2);
    let eps = F::cast_from(cfg.eps);
    let bc1 = F::cast_from(1.0 - cfg.beta1.powi(t));
    let bc2 = F::cast_from(1.0 - cfg.beta2.powi(t));
    let depth = model.cfg.depth;
    for (name, g) in grads {
        let lr = F::cast_from(layerwise_lr(name, depth, cfg));
        let wd = if decays(name) {
            F::cast_from(cfg.weight_decay)
        } else {
            F::zero()
        };
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
        let p = model
            .param_mut(name)
            .unwrap_or_else(|| panic!("adamw: unknown parameter {name}"));
        let one = F::one();
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - lr * (mhat / (vhat.sqrt() + eps) + wd * pi);
        }
    }
}

// ---------------------------------------------------------------------------
// Data handling
// ---------------------------------------------------------------------------

/// A manifest with its images decoded into memory at original resolution.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    /// One (1, H, W) tensor per manifest record, values in [0, 1].
    pub images: Vec<Tensor<f32>>,
}

impl LoadedDataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, TrainerError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = load_manifest(manifest_path)?;
        let mut images = Vec::with_capacity(manifest.images.len());
        for rec in &manifest.images {
            let img = load_gray_image(resolve_image_path(manifest_path, &rec.spec.path))?;
            if img.shape() != [1, rec.spec.height, rec.spec.width] {
                return Err(TrainerError::Config(format!(
                    "image {} is {}x{} but manifest says {}x{}",
                    rec.spec.path.display(),
                    img.shape()[2],
                    img.shape()[1],
                    rec.spec.width,
                    rec.spec.height
                )));
            }
            images.push(img);
        }
        Ok(Self { manifest, images })
    }

    /// Wraps a generated dataset without touching the filesystem.
    pub fn from_synth(synth: &SynthDataset) -> Self {
        let images = synth
            .images
            .iter()
            .map(|img| {
                let (w, h) = img.dimensions();
                let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
                Tensor::new(vec![1, h as usize, w as usize], data)
            })
            .collect();
        Self {
            manifest: synth.manifest.clone(),
            images,
        }
    }

    /// Keeps only the records whose index passes the filter.
    fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut manifest = self.manifest.clone();
        let mut images = Vec::new();
        let mut records = Vec::new();
        for (i, rec) in self.manifest.images.iter().enumerate() {
            if keep(i) {
                records.push(rec.clone());
                images.push(self.images[i].clone());
            }
        }
        manifest.images = records;
        Self { manifest, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Splits a dataset into k training patients and the remaining validation
/// patients. Patients, not images, are partitioned, so the split is
/// patient-disjoint by construction.
pub fn few_shot_split(
    ds: &LoadedDataset,
    k: usize,
    seed: u64,
) -> Result<(LoadedDataset, LoadedDataset), TrainerError> {
    let mut patients = ds.manifest.patient_ids();
    patients.sort();
    patients.dedup();
    if k == 0 || k >= patients.len() {
        return Err(TrainerError::Config(format!(
            "few-shot k = {k} must be in 1..{} (patient count)",
            patients.len()
        )));
    }
    // Deterministic Fisher-Yates on the sorted patient list.
    let mut rng = augment::sample_rng(seed, 0, u64::MAX);
    for i in (1..patients.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        patients.swap(i, j);
    }
    let train_patients: std::collections::BTreeSet<&str> =
        patients[..k].iter().map(|s| s.as_str()).collect();
    let train = ds.subset(|i| train_patients.contains(ds.manifest.images[i].patient_id.as_str()));
    let val = ds.subset(|i| !train_patients.contains(ds.manifest.images[i].patient_id.as_str()));
    Ok((train, val))
}

/// One epoch of batches: each batch draws from a single dataset, every sample
/// of every dataset appears exactly once, and batch order interleaves
/// datasets proportionally to their batch counts.
pub fn multi_dataset_schedule(
    sizes: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<(usize, Vec<usize>)> {
    assert!(batch_size >= 1);
    let mut rng = augment::sample_rng(seed, epoch, u64::MAX - 1);
    let mut per_dataset: Vec<Vec<Vec<usize>>> = Vec::with_capacity(sizes.len());
    let mut tags: Vec<usize> = Vec::new();
    for (d, &n) in sizes.iter().enumerate() {
        let mut idxs: Vec<usize> = (0..n).collect();
        for i in (1..idxs.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            idxs.swap(i, j);
        }
        let batches: Vec<Vec<usize>> = idxs.chunks(batch_size).map(|c| c.to_vec()).collect();
        tags.extend(std::iter::repeat(d).take(batches.len()));
        per_dataset.push(batches);
    }
    for i in (1..tags.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        tags.swap(i, j);
    }
    let mut cursors = vec![0usize; sizes.len()];
    tags.into_iter()
        .map(|d| {
            let b = per_dataset[d][cursors[d]].clone();
            cursors[d] += 1;
            (d, b)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Train loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sigma: f64,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    /// Training aborts once the loss exceeds this or goes non-finite.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            sigma: 2.0,
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            divergence_threshold: 1e6,
        }
    }
}

/// Loss/metric curves recorded during training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// (global step, batch loss)
    pub steps: Vec<(u64, f64)>,
    /// (epoch, split name, value): mean loss for "train", MRE for "val".
    pub epochs: Vec<(usize, String, f64)>,
}

impl TrainHistory {
    /// Two-section CSV: `step,loss` rows followed by `epoch,split,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.steps {
            out.push_str(&format!("{s},{l}\n"));
        }
        out.push_str("epoch,split,value\n");
        for (e, split, v) in &self.epochs {
            out.push_str(&format!("{e},{split},{v}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainerError> {
        let bad = |line: &str| TrainerError::HistoryParse(format!("bad line: {line:?}"));
        let mut hist = TrainHistory::default();
        let mut lines = text.lines();
        if lines.next() != Some("step,loss") {
            return Err(TrainerError::HistoryParse("missing step,loss header".into()));
        }
        let mut in_epochs = false;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if line == "epoch,split,value" {
                in_epochs = true;
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if in_epochs {
                let [e, split, v] = parts.as_slice() else {
                    return Err(bad(line));
                };
                hist.epochs.push((
                    e.parse().map_err(|_| bad(line))?,
                    split.to_string(),
                    v.parse().map_err(|_| bad(line))?,
                ));
            } else {
                let [s, l] = parts.as_slice() else {
                    return Err(bad(line));
                };
                hist.steps
                    .push((s.parse().map_err(|_| bad(line))?, l.parse().map_err(|_| bad(line))?));
            }
        }
        Ok(hist)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_epoch: usize,
    /// Best validation MRE (or best mean train loss when no validation set).
    pub best_score: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub history_path: PathBuf,
}

/// Prepares one training sample: augment at original resolution, resize to
/// model input, map landmarks, encode heatmaps.
fn prepare_sample(
    ds: &LoadedDataset,
    idx: usize,
    model_cfg: &crate::model::ModelConfig,
    cfg: &TrainConfig,
    step: u64,
    slot: u64,
) -> (Tensor<f32>, HeatmapStack<f32>, Vec<f32>) {
    let rec = &ds.manifest.images[idx];
    let mut rng = augment::sample_rng(cfg.seed, step, slot);
    let aug = augment::compose(
        &cfg.augment,
        &Sample {
            img: ds.images[idx].clone(),
            landmarks: rec.landmarks.clone(),
        },
        &ds.manifest.flip_pairs,
        &mut rng,
    );
    let (hin, win) = model_cfg.input_size;
    let img = resize_bilinear(&aug.img, hin, win);
    let t = full_image_transform(&rec.spec, model_cfg.input_size);
    let lms = apply_transform(&t, &aug.landmarks, Some((win as f64, hin as f64)));
    let (hm, weights) = heatmap::encode(
        &lms,
        GaussianSpec { sigma: cfg.sigma },
        model_cfg.heatmap_grid(),
        model_cfg.stride() as f64,
    );
    (img, hm, weights)
}

/// Trains `model` over the given datasets, checkpointing `best.ckpt` (lowest
/// validation MRE, or lowest mean train loss without validation data) and
/// `last.ckpt` (with optimizer state) into `out_dir`, plus `history.csv`.
pub fn train(
    model: &mut Model<f32>,
    train_sets: &[LoadedDataset],
    val_sets: &[LoadedDataset],
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome, TrainerError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    if train_sets.is_empty() || train_sets.iter().any(|d| d.is_empty()) {
        return Err(TrainerError::Config("empty training dataset".into()));
    }
    for ds in train_sets.iter().chain(val_sets) {
        match model.cfg.landmark_count(&ds.manifest.name) {
            None => {
                return Err(TrainerError::Config(format!(
                    "model has no head for dataset {:?}",
                    ds.manifest.name
                )))
            }
            Some(n) if n != ds.manifest.landmark_count => {
                return Err(TrainerError::Config(format!(
                    "head for {:?} has {n} landmarks, manifest has {}",
                    ds.manifest.name, ds.manifest.landmark_count
                )))
            }
            _ => {}
        }
    }
    cfg.augment
        .validate()
        .map_err(TrainerError::Config)?;
    if cfg.sigma <= 0.0 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(TrainerError::Config(
            "sigma, epochs and batch_size must be positive".into(),
        ));
    }

    let sizes: Vec<usize> = train_sets.iter().map(|d| d.len()).collect();
    let mut state = OptimState::new();
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0usize;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    for epoch in 0..cfg.epochs {
        let schedule = multi_dataset_schedule(&sizes, cfg.batch_size, cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for (ds_idx, batch) in schedule {
            let ds = &train_sets[ds_idx];
            let model_cfg = model.cfg.clone();
            let prepped: Vec<(Tensor<f32>, HeatmapStack<f32>, Vec<f32>)> =
                par::map_indexed(batch.len(), |j| {
                    prepare_sample(ds, batch[j], &model_cfg, cfg, step, j as u64)
                });
            let imgs: Vec<Tensor<f32>> = prepped.iter().map(|(i, _, _)| i.clone()).collect();
            let gts: Vec<HeatmapStack<f32>> = prepped.iter().map(|(_, h, _)| h.clone()).collect();
            let ws: Vec<Vec<f32>> = prepped.iter().map(|(_, _, w)| w.clone()).collect();
            let (loss, grads) = model.loss_and_grads(&imgs, &gts, &ws, &ds.manifest.name)?;
            let loss = loss as f64;
            if !loss.is_finite() || loss > cfg.divergence_threshold {
                return Err(TrainerError::Diverged { step, loss });
            }
            adamw_step(model, &grads, &mut state, &cfg.optim);
            history.steps.push((step, loss));
            epoch_loss += loss;
            epoch_batches += 1;
            step += 1;
        }
        let mean_loss = epoch_loss / epoch_batches.max(1) as f64;
        history.epochs.push((epoch, "train".to_string(), mean_loss));

        let score = if val_sets.is_empty() {
            mean_loss
        } else {
            let mut total = 0.0;
            for ds in val_sets {
                let report = evaluate(model, ds)?;
                total += report.mre.mean;
            }
            let val_mre = total / val_sets.len() as f64;
            history.epochs.push((epoch, "val".to_string(), val_mre));
            val_mre
        };
        if score < best_score {
            best_score = score;
            best_epoch = epoch;
            save_checkpoint(model, &best_path, None)?;
        }
    }

    save_checkpoint(model, &last_path, Some(&state.to_snapshot()))?;
    let history_path = out_dir.join("history.csv");
    std::fs::write(&history_path, history.to_csv())?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_score,
        best_path,
        last_path,
        history_path,
    })
}

// ---------------------------------------------------------------------------
// Evaluation / inference
// ---------------------------------------------------------------------------

/// Runs the model over every record and returns per-image predictions in
/// original pixel coordinates with per-landmark confidences.
pub fn predict_dataset(
    model: &Model<f32>,
    ds: &LoadedDataset,
) -> Result<Vec<(LandmarkSet, Vec<f64>)>, TrainerError> {
    let name = &ds.manifest.name;
    if model.cfg.landmark_count(name) != Some(ds.manifest.landmark_count) {
        return Err(TrainerError::Config(format!(
            "model head mismatch for dataset {name:?}"
        )));
    }
    let (hin, win) = model.cfg.input_size;
    let imgs: Vec<Tensor<f32>> = par::map_indexed(ds.len(), |i| {
        resize_bilinear(&ds.images[i], hin, win)
    });
    let stacks = model.forward_batch(&imgs, name)?;
    let mut out = Vec::with_capacity(stacks.len());
    for (stack, rec) in stacks.iter().zip(&ds.manifest.images) {
        let (lms, conf) = heatmap::decode(stack);
        let t = full_image_transform(&rec.spec, model.cfg.input_size);
        let back = invert_transform(&t)?;
        let lms = apply_transform(&back, &lms, None);
        out.push((lms, conf));
    }
    Ok(out)
}

/// Radial errors of the model's predictions pooled over the whole dataset,
/// in the dataset's native unit.
pub fn pooled_errors(model: &Model<f32>, ds: &LoadedDataset) -> Result<RadialErrors, TrainerError> {
    if ds.is_empty() {
        return Err(TrainerError::Config("cannot evaluate an empty dataset".into()));
    }
    let preds = predict_dataset(model, ds)?;
    let mut pooled: Option<RadialErrors> = None;
    for ((lms, _), rec) in preds.iter().zip(&ds.manifest.images) {
        let spacing = effective_spacing(&rec.spec, &rec.landmarks)?;
        let errs = metrics::radial_errors(lms, &rec.landmarks, spacing);
        match &mut pooled {
            None => pooled = Some(errs),
            Some(p) => {
                if p.unit != errs.unit {
                    return Err(TrainerError::Config(
                        "mixed spacing units within one dataset".into(),
                    ));
                }
                p.merge(&errs);
            }
        }
    }
    Ok(pooled.expect("non-empty dataset"))
}

/// Full evaluation: predictions, per-image radial errors pooled across the
/// dataset, and an MRE/SDR report at the manifest's thresholds.
pub fn evaluate(model: &Model<f32>, ds: &LoadedDataset) -> Result<MetricsReport, TrainerError> {
    let pooled = pooled_errors(model, ds)?;
    let report = metrics::build_report(
        &ds.manifest.name,
        &pooled,
        &ds.manifest.sdr_thresholds.values,
        ds.manifest.sdr_thresholds.unit,
    )?;
    Ok(report)
}
