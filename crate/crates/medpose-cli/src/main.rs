//! `medpose`: train/eval/predict/synth/report entry point.
//!
//! Every failure path writes one structured error JSON line to stderr and
//! exits with a documented code: 0 ok, 2 config/validation, 3 runtime, 4 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use medpose::landmark::{
    full_image_transform, invert_transform, load_gray_image, load_manifest, synth_generate,
    apply_transform, resize_bilinear, ImageSpec, LandmarkError, LandmarkSet, SpacingModel,
};
use medpose::metrics::{build_report, emit_report, MetricsError, ReportFormat};
use medpose::model::{
    load_checkpoint, LoraConfig, Model, ModelConfig, ModelError, TrainMode,
};
use medpose::trainer::{
    evaluate, few_shot_split, pooled_errors, train, LoadedDataset, OptimConfig, TrainConfig,
    TrainHistory, TrainerError,
};
use medpose::augment::AugmentConfig;

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
enum ErrorKind {
    Config,
    Runtime,
    Io,
}

impl ErrorKind {
    fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Runtime => 3,
            ErrorKind::Io => 4,
        }
    }
}

#[derive(Debug)]
struct CliError {
    kind: ErrorKind,
    message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: msg.into(),
        }
    }

    fn io(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: msg.into(),
        }
    }
}

impl From<LandmarkError> for CliError {
    fn from(e: LandmarkError) -> Self {
        let kind = match &e {
            LandmarkError::Io(_) | LandmarkError::Image(_) => ErrorKind::Io,
            LandmarkError::Singular { .. } => ErrorKind::Runtime,
            _ => ErrorKind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match &e {
            ModelError::Io(_) => ErrorKind::Io,
            ModelError::InvalidConfig(_) | ModelError::UnknownDataset(_) => ErrorKind::Config,
            _ => ErrorKind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let kind = match &e {
            MetricsError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Landmark(e) => e.into(),
            TrainerError::Model(e) => e.into(),
            TrainerError::Metrics(e) => e.into(),
            TrainerError::Io(e) => CliError::io(e.to_string()),
            TrainerError::Diverged { .. } => CliError {
                kind: ErrorKind::Runtime,
                message: e.to_string(),
            },
            TrainerError::Config(m) => CliError::config(m),
            TrainerError::HistoryParse(m) => CliError::config(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::config(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RunMode {
    Generalist,
    Specialist,
    FewShot,
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    8
}
fn default_sigma() -> f64 {
    2.0
}
fn default_divergence() -> f64 {
    1e6
}

/// One reproducible training run, stored as a single JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lora: Option<LoraConfig>,
    #[serde(default)]
    augment: AugmentConfig,
    #[serde(default)]
    optimizer: OptimConfig,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_sigma")]
    sigma: f64,
    #[serde(default = "default_divergence")]
    divergence_threshold: f64,
    datasets: Vec<PathBuf>,
    mode: RunMode,
    #[serde(default)]
    seed: u64,
    output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    few_shot_k: Option<usize>,
}

/// Applies `--set path.to.key=value` overrides onto the raw config document.
fn apply_overrides(
    doc: &mut serde_json::Value,
    overrides: &[String],
) -> Result<(), CliError> {
    for spec in overrides {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {spec:?} is not key=value")))?;
        // Values parse as JSON first (numbers, bools, arrays), else as string.
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        fn descend<'a>(
            node: &'a mut serde_json::Value,
            seg: &str,
            path: &str,
        ) -> Result<&'a mut serde_json::Value, CliError> {
            if let Ok(idx) = seg.parse::<usize>() {
                let arr = node
                    .as_array_mut()
                    .ok_or_else(|| CliError::config(format!("{path}: {seg} indexes a non-array")))?;
                arr.get_mut(idx)
                    .ok_or_else(|| CliError::config(format!("{path}: index {idx} out of range")))
            } else {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| CliError::config(format!("{path}: {seg} keys a non-object")))?;
                Ok(obj
                    .entry(seg.to_string())
                    .or_insert(serde_json::Value::Object(Default::default())))
            }
        }

        let segments: Vec<&str> = path.split('.').collect();
        let (last, init) = segments.split_last().expect("split_once gives a nonempty path");
        let mut node = &mut *doc;
        for seg in init {
            node = descend(node, seg, path)?;
        }
        if let Ok(idx) = last.parse::<usize>() {
            let arr = node
                .as_array_mut()
                .ok_or_else(|| CliError::config(format!("{path}: {last} indexes a non-array")))?;
            *arr.get_mut(idx).ok_or_else(|| {
                CliError::config(format!("{path}: index {idx} out of range"))
            })? = value;
        } else {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::config(format!("{path}: {last} keys a non-object")))?;
            obj.insert(last.to_string(), value);
        }
    }
    Ok(())
}

fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
    apply_overrides(&mut doc, overrides)?;
    let cfg: RunConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
    cfg.model.validate()?;
    if let Some(l) = &cfg.lora {
        l.validate()?;
    }
    if cfg.datasets.is_empty() {
        return Err(CliError::config("config lists no datasets"));
    }
    for p in &cfg.datasets {
        if !p.exists() {
            return Err(CliError::config(format!(
                "manifest path does not exist: {}",
                p.display()
            )));
        }
    }
    match cfg.mode {
        RunMode::Generalist => {}
        RunMode::Specialist => {
            if cfg.datasets.len() != 1 {
                return Err(CliError::config("specialist mode requires exactly one dataset"));
            }
            if cfg.base_checkpoint.is_none() {
                return Err(CliError::config("specialist mode requires base_checkpoint"));
            }
        }
        RunMode::FewShot => {
            if cfg.datasets.len() != 1 {
                return Err(CliError::config("few_shot mode requires exactly one dataset"));
            }
            if cfg.few_shot_k.is_none() {
                return Err(CliError::config("few_shot mode requires few_shot_k"));
            }
        }
    }
    if let Some(ckpt) = &cfg.base_checkpoint {
        if !ckpt.exists() {
            return Err(CliError::config(format!(
                "base checkpoint does not exist: {}",
                ckpt.display()
            )));
        }
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "medpose", about = "Anatomical landmark detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a manifest.
    Eval(EvalArgs),
    /// Predict landmarks for one image and render an overlay.
    Predict(PredictArgs),
    /// Generate a synthetic landmark dataset.
    Synth(SynthArgs),
    /// Render convergence curves from training history files.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set optimizer.base_lr=1e-3
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated SDR thresholds overriding the manifest's defaults.
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset head to predict with.
    #[arg(long)]
    dataset: String,
    /// Standalone image (no ground truth).
    #[arg(long, conflicts_with_all = ["manifest", "index"])]
    image: Option<PathBuf>,
    /// Manifest supplying both the image and its ground truth.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Record index within the manifest.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// Landmarks per image.
    #[arg(long)]
    landmarks: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more history.csv files; curves are named by parent directory.
    histories: Vec<PathBuf>,
    /// Output image for the convergence plot.
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_run_config(&args.config, &args.overrides)?;
    std::fs::create_dir_all(&cfg.output_dir)?;

    let mut model: Model<f32> = match (&cfg.base_checkpoint, cfg.mode) {
        (Some(ckpt), _) => {
            let (m, _) = load_checkpoint(ckpt)?;
            m
        }
        (None, _) => Model::build(cfg.model.clone(), cfg.seed)?,
    };

    // Specialist fine-tuning: adapters on a frozen backbone. Other modes with
    // a lora section get adapters too; otherwise the model trains fully.
    if let Some(lc) = &cfg.lora {
        model.lora_inject(lc.clone(), cfg.seed)?;
    } else if cfg.mode == RunMode::Specialist {
        model.lora_inject(LoraConfig::rank(4), cfg.seed)?;
    } else {
        model.set_trainable(TrainMode::Full)?;
    }

    let mut train_sets = Vec::new();
    let mut val_sets = Vec::new();
    for path in &cfg.datasets {
        let ds = LoadedDataset::load(path)?;
        if cfg.mode == RunMode::FewShot {
            let k = cfg.few_shot_k.expect("validated above");
            let (tr, va) = few_shot_split(&ds, k, cfg.seed)?;
            train_sets.push(tr);
            val_sets.push(va);
        } else {
            train_sets.push(ds);
        }
    }

    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        sigma: cfg.sigma,
        optim: cfg.optimizer.clone(),
        augment: cfg.augment.clone(),
        divergence_threshold: cfg.divergence_threshold,
    };

    // Resolved config snapshot for reproducibility.
    std::fs::write(
        cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;

    let outcome = train(&mut model, &train_sets, &val_sets, &tc, &cfg.output_dir)?;
    println!(
        "trained {} epochs; best epoch {} (score {:.6})",
        cfg.epochs, outcome.best_epoch, outcome.best_score
    );
    println!("best: {}", outcome.best_path.display());
    println!("last: {}", outcome.last_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let ds = LoadedDataset::load(&args.manifest)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let report = if args.thresholds.is_empty() {
        evaluate(&model, &ds)?
    } else {
        let pooled = pooled_errors(&model, &ds)?;
        build_report(&ds.manifest.name, &pooled, &args.thresholds, pooled.unit)?
    };
    emit_report(&report, args.out_dir.join("report.json"), ReportFormat::Json)?;
    emit_report(&report, args.out_dir.join("report.txt"), ReportFormat::Text)?;
    print!("{}", report.to_text_table());
    Ok(())
}

#[derive(Serialize)]
struct PredictionOut {
    dataset: String,
    image: PathBuf,
    /// Original-image pixel coordinates.
    landmarks: Vec<[f64; 2]>,
    confidence: Vec<f64>,
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let dataset = args.dataset.clone();

    let (image_path, img, gt): (PathBuf, medpose::Tensor<f32>, Option<LandmarkSet>) =
        match (&args.image, &args.manifest) {
            (Some(p), None) => (p.clone(), load_gray_image(p)?, None),
            (None, Some(mp)) => {
                let manifest = load_manifest(mp)?;
                let rec = manifest.images.get(args.index).ok_or_else(|| {
                    CliError::config(format!(
                        "index {} out of range ({} records)",
                        args.index,
                        manifest.images.len()
                    ))
                })?;
                let path =
                    medpose::landmark::resolve_image_path(mp, &rec.spec.path);
                (path.clone(), load_gray_image(&path)?, Some(rec.landmarks.clone()))
            }
            _ => {
                return Err(CliError::config(
                    "predict needs exactly one of --image or --manifest",
                ))
            }
        };

    let (h, w) = (img.shape()[1], img.shape()[2]);
    let spec = ImageSpec {
        path: image_path.clone(),
        width: w,
        height: h,
        spacing: SpacingModel::Pixel,
    };
    let (hin, win) = model.cfg.input_size;
    let resized = resize_bilinear(&img, hin, win);
    let stacks = model.forward_batch(&[resized], &dataset)?;
    let (lms, conf) = medpose::heatmap::decode(&stacks[0]);
    let t = full_image_transform(&spec, model.cfg.input_size);
    let back = invert_transform(&t)?;
    let lms = apply_transform(&back, &lms, None);

    std::fs::create_dir_all(&args.out_dir)?;
    let out = PredictionOut {
        dataset,
        image: image_path,
        landmarks: lms.points.iter().map(|&(x, y)| [x, y]).collect(),
        confidence: conf,
    };
    std::fs::write(
        args.out_dir.join("landmarks.json"),
        serde_json::to_string_pretty(&out)?,
    )?;

    let overlay = render_overlay(&img, &lms, gt.as_ref());
    overlay
        .save(args.out_dir.join("overlay.png"))
        .map_err(|e| CliError::io(e.to_string()))?;
    println!("{}", serde_json::to_string(&out.landmarks)?);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.count == 0 || args.landmarks == 0 {
        return Err(CliError::config("count and landmarks must be >= 1"));
    }
    let synth = synth_generate(args.seed, args.count, args.landmarks, (args.height, args.width))?;
    let manifest_path = synth.write_to(&args.out_dir)?;
    println!(
        "wrote {} images + {}",
        args.count,
        manifest_path.display()
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    if args.histories.is_empty() {
        return Err(CliError::config("report needs at least one history file"));
    }
    let mut runs: Vec<(String, TrainHistory)> = Vec::new();
    for path in &args.histories {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
        let hist = TrainHistory::from_csv(&text)?;
        if hist.steps.is_empty() && hist.epochs.is_empty() {
            return Err(CliError::config(format!("{} holds no data", path.display())));
        }
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("run{}", runs.len() + 1));
        runs.push((name, hist));
    }
    let img = render_convergence_plot(&runs);
    img.save(&args.out)
        .map_err(|e| CliError::io(e.to_string()))?;
    for (i, (name, hist)) in runs.iter().enumerate() {
        let series = curve_of(hist);
        let best = series
            .iter()
            .cloned()
            .fold((0usize, f64::INFINITY), |acc, (e, v)| {
                if v < acc.1 {
                    (e, v)
                } else {
                    acc
                }
            });
        let last = series.last().cloned().unwrap_or((0, f64::NAN));
        let (r, g, b) = PALETTE[i % PALETTE.len()];
        println!(
            "{name} [rgb({r},{g},{b})]: best {:.6} @ epoch {}, final {:.6} @ epoch {}",
            best.1, best.0, last.1, last.0
        );
    }
    println!("plot: {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

const PALETTE: [(u8, u8, u8); 6] = [
    (214, 39, 40),
    (31, 119, 180),
    (44, 160, 44),
    (255, 127, 14),
    (148, 103, 189),
    (23, 190, 207),
];

fn to_rgb(img: &medpose::Tensor<f32>) -> image::RgbImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (img.data()[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0) as u8;
        image::Rgb([v, v, v])
    })
}

fn draw_cross(img: &mut image::RgbImage, x: f64, y: f64, color: [u8; 3], arm: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for d in -arm..=arm {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if px >= 0 && px < w && py >= 0 && py < h {
                img.put_pixel(px as u32, py as u32, image::Rgb(color));
            }
        }
    }
}

/// Predictions in red; ground truth (when given) in green.
fn render_overlay(
    img: &medpose::Tensor<f32>,
    pred: &LandmarkSet,
    gt: Option<&LandmarkSet>,
) -> image::RgbImage {
    let mut canvas = to_rgb(img);
    if let Some(gt) = gt {
        for (&(x, y), &vis) in gt.points.iter().zip(&gt.visibility) {
            if vis {
                draw_cross(&mut canvas, x, y, [0, 200, 0], 3);
            }
        }
    }
    for (&(x, y), &vis) in pred.points.iter().zip(&pred.visibility) {
        if vis {
            draw_cross(&mut canvas, x, y, [220, 0, 0], 3);
        }
    }
    canvas
}

fn draw_line(img: &mut image::RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    // Bresenham.
    let (mut x, mut y) = (x0, y0);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (w, h) = (img.width() as i64, img.height() as i64);
    loop {
        if x >= 0 && x < w && y >= 0 && y < h {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Epoch-indexed series to plot: validation MRE when recorded, otherwise the
/// per-epoch mean train loss.
fn curve_of(hist: &TrainHistory) -> Vec<(usize, f64)> {
    let val: Vec<(usize, f64)> = hist
        .epochs
        .iter()
        .filter(|(_, split, _)| split == "val")
        .map(|&(e, _, v)| (e, v))
        .collect();
    if !val.is_empty() {
        return val;
    }
    hist.epochs
        .iter()
        .filter(|(_, split, _)| split == "train")
        .map(|&(e, _, v)| (e, v))
        .collect()
}

fn render_convergence_plot(runs: &[(String, TrainHistory)]) -> image::RgbImage {
    let (width, height) = (640u32, 480u32);
    let margin = 48i64;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let (w, h) = (width as i64, height as i64);
    // Axes.
    draw_line(&mut img, margin, h - margin, w - margin / 2, h - margin, [0, 0, 0]);
    draw_line(&mut img, margin, margin / 2, margin, h - margin, [0, 0, 0]);

    let series: Vec<Vec<(usize, f64)>> = runs.iter().map(|(_, h)| curve_of(h)).collect();
    let max_epoch = series
        .iter()
        .flat_map(|s| s.iter().map(|&(e, _)| e))
        .max()
        .unwrap_or(0)
        .max(1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(_, v) in series.iter().flatten() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return img;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);

    let plot_w = (w - margin - margin / 2) as f64;
    let plot_h = (h - margin - margin / 2) as f64;
    let map = |e: usize, v: f64| -> (i64, i64) {
        let x = margin as f64 + e as f64 / max_epoch as f64 * plot_w;
        let y = (h - margin) as f64 - (v - lo) / (hi - lo) * plot_h;
        (x.round() as i64, y.round() as i64)
    };

    for (i, s) in series.iter().enumerate() {
        let (r, g, b) = PALETTE[i % PALETTE.len()];
        let color = [r, g, b];
        for pair in s.windows(2) {
            let (x0, y0) = map(pair[0].0, pair[0].1);
            let (x1, y1) = map(pair[1].0, pair[1].1);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
        if s.len() == 1 {
            let (x, y) = map(s[0].0, s[0].1);
            draw_cross(&mut img, x as f64, y as f64, color, 3);
        }
        // Legend swatch, one row per run in the top-right corner.
        let ly = margin / 2 + i as i64 * 12;
        draw_line(&mut img, w - margin - 40, ly, w - margin - 8, ly, color);
    }
    img
}

// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind, "message": e.message }
            });
            eprintln!("{payload}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
