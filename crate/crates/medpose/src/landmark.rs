//! Domain types for images, landmarks, physical spacing and coordinate
//! transforms, plus manifest ingestion and the synthetic dataset generator.
//!
//! Coordinate convention: continuous coordinates, pixel centers at integer
//! positions, origin top-left, x rightward, y downward.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum LandmarkError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("manifest validation error{}: {message}", image_index.map(|i| format!(" (image {i})")).unwrap_or_default())]
    Validation {
        message: String,
        image_index: Option<usize>,
    },
    #[error("singular transform (determinant {det})")]
    Singular { det: f64 },
    #[error("spacing rule error: {0}")]
    Spacing(String),
    #[error("cannot place {n} landmarks in a {h}x{w} image; minimum size is {min}x{min}")]
    SynthTooSmall { n: usize, h: usize, w: usize, min: usize },
    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),
}

fn validation(message: impl Into<String>, image_index: Option<usize>) -> LandmarkError {
    LandmarkError::Validation {
        message: message.into(),
        image_index,
    }
}

/// How pixel coordinates relate to physical millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SpacingModel {
    /// Explicit (sx, sy) mm per pixel.
    Physical { mm_per_px: [f64; 2] },
    /// Isotropic spacing derived from a known anatomical distance between two
    /// landmarks (e.g. wrist width 50 mm).
    LandmarkNormalized { a: usize, b: usize, distance_mm: f64 },
    /// No physical calibration; errors and thresholds are in pixels.
    Pixel,
}

/// Resolved spacing: mm per pixel, or the pixel-unit sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spacing {
    MmPerPx(f64, f64),
    Pixel,
}

impl Spacing {
    /// Scale factors applied to pixel deltas; (1, 1) in pixel mode.
    pub fn factors(self) -> (f64, f64) {
        match self {
            Spacing::MmPerPx(sx, sy) => (sx, sy),
            Spacing::Pixel => (1.0, 1.0),
        }
    }
}

/// Unit tag for radial errors and SDR thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Mm,
    Px,
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Unit::Mm => write!(f, "mm"),
            Unit::Px => write!(f, "px"),
        }
    }
}

/// One image on disk with its dimensions and spacing model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSpec {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub spacing: SpacingModel,
}

/// Ordered sub-pixel landmark coordinates with visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
    pub visibility: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>, visibility: Vec<bool>) -> Self {
        assert_eq!(points.len(), visibility.len());
        Self { points, visibility }
    }

    pub fn all_visible(points: Vec<(f64, f64)>) -> Self {
        let n = points.len();
        Self {
            points,
            visibility: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One manifest entry: image + ground-truth landmarks + patient id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub spec: ImageSpec,
    pub landmarks: LandmarkSet,
    pub patient_id: String,
}

/// SDR threshold list with its unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrThresholds {
    pub unit: Unit,
    pub values: Vec<f64>,
}

/// Declarative description of a landmark dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub landmark_count: usize,
    pub sdr_thresholds: SdrThresholds,
    pub flip_pairs: Vec<(usize, usize)>,
    pub images: Vec<ImageRecord>,
}

// Wire format, kept separate so the in-memory types stay idiomatic.
#[derive(Serialize, Deserialize)]
struct WireManifest {
    name: String,
    landmark_count: usize,
    sdr_thresholds: SdrThresholds,
    flip_pairs: Vec<[usize; 2]>,
    images: Vec<WireImage>,
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    path: String,
    width: usize,
    height: usize,
    patient_id: String,
    spacing: SpacingModel,
    landmarks: Vec<[f64; 2]>,
    visibility: Vec<bool>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self, LandmarkError> {
        let wire: WireManifest = serde_json::from_str(text)?;
        let manifest = DatasetManifest {
            name: wire.name,
            landmark_count: wire.landmark_count,
            sdr_thresholds: wire.sdr_thresholds,
            flip_pairs: wire.flip_pairs.iter().map(|p| (p[0], p[1])).collect(),
            images: wire
                .images
                .into_iter()
                .map(|im| ImageRecord {
                    spec: ImageSpec {
                        path: PathBuf::from(im.path),
                        width: im.width,
                        height: im.height,
                        spacing: im.spacing,
                    },
                    landmarks: LandmarkSet {
                        points: im.landmarks.iter().map(|p| (p[0], p[1])).collect(),
                        visibility: im.visibility,
                    },
                    patient_id: im.patient_id,
                })
                .collect(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let wire = WireManifest {
            name: self.name.clone(),
            landmark_count: self.landmark_count,
            sdr_thresholds: self.sdr_thresholds.clone(),
            flip_pairs: self.flip_pairs.iter().map(|&(a, b)| [a, b]).collect(),
            images: self
                .images
                .iter()
                .map(|r| WireImage {
                    path: r.spec.path.to_string_lossy().into_owned(),
                    width: r.spec.width,
                    height: r.spec.height,
                    patient_id: r.patient_id.clone(),
                    spacing: r.spec.spacing.clone(),
                    landmarks: r.landmarks.points.iter().map(|&(x, y)| [x, y]).collect(),
                    visibility: r.landmarks.visibility.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("manifest serialization")
    }

    /// Checks every structural invariant, naming the first violation and the
    /// offending image index.
    pub fn validate(&self) -> Result<(), LandmarkError> {
        let n = self.landmark_count;
        if n == 0 {
            return Err(validation("landmark_count must be >= 1", None));
        }
        if !self
            .sdr_thresholds
            .values
            .windows(2)
            .all(|w| w[0] < w[1])
            || self.sdr_thresholds.values.iter().any(|&v| v <= 0.0)
        {
            return Err(validation(
                "sdr_thresholds must be positive and strictly increasing",
                None,
            ));
        }
        let mut seen = vec![false; n];
        for &(a, b) in &self.flip_pairs {
            if a >= n || b >= n || a == b {
                return Err(validation(
                    format!("flip pair ({a},{b}) out of range for N={n}"),
                    None,
                ));
            }
            if seen[a] || seen[b] {
                return Err(validation(
                    format!("flip pair index reused in ({a},{b})"),
                    None,
                ));
            }
            seen[a] = true;
            seen[b] = true;
        }
        for (idx, rec) in self.images.iter().enumerate() {
            if rec.spec.width == 0 || rec.spec.height == 0 {
                return Err(validation("image dimensions must be >= 1", Some(idx)));
            }
            if rec.landmarks.points.len() != n {
                return Err(validation(
                    format!(
                        "image has {} landmarks, dataset declares {n}",
                        rec.landmarks.points.len()
                    ),
                    Some(idx),
                ));
            }
            if rec.landmarks.visibility.len() != n {
                return Err(validation(
                    format!(
                        "visibility length {} does not match N={n}",
                        rec.landmarks.visibility.len()
                    ),
                    Some(idx),
                ));
            }
            for (i, (&(x, y), &vis)) in rec
                .landmarks
                .points
                .iter()
                .zip(&rec.landmarks.visibility)
                .enumerate()
            {
                if vis
                    && !(x >= 0.0
                        && x < rec.spec.width as f64
                        && y >= 0.0
                        && y < rec.spec.height as f64)
                {
                    return Err(validation(
                        format!("visible landmark {i} at ({x},{y}) outside image bounds"),
                        Some(idx),
                    ));
                }
            }
            match &rec.spec.spacing {
                SpacingModel::Physical { mm_per_px: [sx, sy] } => {
                    if *sx <= 0.0 || *sy <= 0.0 {
                        return Err(validation("physical spacing must be positive", Some(idx)));
                    }
                }
                SpacingModel::LandmarkNormalized { a, b, distance_mm } => {
                    if a == b || *a >= n || *b >= n {
                        return Err(validation(
                            "normalization rule landmark indices must be distinct and in range",
                            Some(idx),
                        ));
                    }
                    if *distance_mm <= 0.0 {
                        return Err(validation(
                            "normalization distance must be positive",
                            Some(idx),
                        ));
                    }
                }
                SpacingModel::Pixel => {}
            }
        }
        Ok(())
    }

    pub fn patient_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.images.iter().map(|r| r.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Loads and validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, LandmarkError> {
    let text = std::fs::read_to_string(path.as_ref())?;
    DatasetManifest::from_json(&text)
}

/// 2×3 affine map from original-image coordinates to model-input coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    /// Row-major [[a, b, c], [d, e, f]]: x' = ax + by + c, y' = dx + ey + f.
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply_point(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }
}

/// Anisotropic scale mapping [0,width)×[0,height) onto [0,Win)×[0,Hin).
pub fn full_image_transform(spec: &ImageSpec, input_size: (usize, usize)) -> AffineTransform {
    let (hin, win) = input_size;
    assert!(hin >= 1 && win >= 1);
    AffineTransform::scale(
        win as f64 / spec.width as f64,
        hin as f64 / spec.height as f64,
    )
}

/// Maps every visible point through `t`; points landing outside the target
/// rectangle (when given) are marked invisible rather than clamped.
pub fn apply_transform(
    t: &AffineTransform,
    pts: &LandmarkSet,
    target: Option<(f64, f64)>,
) -> LandmarkSet {
    let mut points = Vec::with_capacity(pts.len());
    let mut visibility = Vec::with_capacity(pts.len());
    for (&p, &vis) in pts.points.iter().zip(&pts.visibility) {
        let q = t.apply_point(p);
        let vis = vis
            && match target {
                Some((w, h)) => q.0 >= 0.0 && q.0 < w && q.1 >= 0.0 && q.1 < h,
                None => true,
            };
        points.push(q);
        visibility.push(vis);
    }
    LandmarkSet { points, visibility }
}

/// Inverse of an invertible affine transform.
pub fn invert_transform(t: &AffineTransform) -> Result<AffineTransform, LandmarkError> {
    let det = t.det();
    if det.abs() < 1e-12 {
        return Err(LandmarkError::Singular { det });
    }
    let [[a, b, c], [d, e, f]] = t.m;
    let inv = [[e / det, -b / det, 0.0], [-d / det, a / det, 0.0]];
    let tx = -(inv[0][0] * c + inv[0][1] * f);
    let ty = -(inv[1][0] * c + inv[1][1] * f);
    Ok(AffineTransform {
        m: [
            [inv[0][0], inv[0][1], tx],
            [inv[1][0], inv[1][1], ty],
        ],
    })
}

/// Resolves the spacing model of an image to mm-per-pixel factors (or the
/// pixel sentinel), using ground-truth landmarks for the normalization rule.
pub fn effective_spacing(spec: &ImageSpec, gt: &LandmarkSet) -> Result<Spacing, LandmarkError> {
    match &spec.spacing {
        SpacingModel::Physical { mm_per_px: [sx, sy] } => Ok(Spacing::MmPerPx(*sx, *sy)),
        SpacingModel::Pixel => Ok(Spacing::Pixel),
        SpacingModel::LandmarkNormalized { a, b, distance_mm } => {
            for i in [*a, *b] {
                if i >= gt.len() {
                    return Err(LandmarkError::Spacing(format!(
                        "rule landmark {i} out of range"
                    )));
                }
                if !gt.visibility[i] {
                    return Err(LandmarkError::Spacing(format!(
                        "rule landmark {i} is not visible"
                    )));
                }
            }
            let (xa, ya) = gt.points[*a];
            let (xb, yb) = gt.points[*b];
            let dist = ((xa - xb).powi(2) + (ya - yb).powi(2)).sqrt();
            if dist <= 0.0 {
                return Err(LandmarkError::Spacing(format!(
                    "rule landmarks {a} and {b} coincide"
                )));
            }
            let s = distance_mm / dist;
            Ok(Spacing::MmPerPx(s, s))
        }
    }
}

/// Loads an 8- or 16-bit grayscale PNG as a (1, H, W) tensor in [0, 1].
pub fn load_gray_image(path: impl AsRef<Path>) -> Result<Tensor<f32>, LandmarkError> {
    let img = image::open(path.as_ref())?;
    let (data, w, h): (Vec<f32>, u32, u32) = match img {
        image::DynamicImage::ImageLuma16(im) => {
            let (w, h) = (im.width(), im.height());
            (
                im.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
                w,
                h,
            )
        }
        other => {
            let im = other.into_luma8();
            let (w, h) = (im.width(), im.height());
            (
                im.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
                w,
                h,
            )
        }
    };
    Ok(Tensor::new(vec![1, h as usize, w as usize], data))
}

/// Bilinear resize of a (1, H, W) tensor to (1, Hout, Wout), sampling with the
/// same plain-scale convention as [`full_image_transform`].
pub fn resize_bilinear(img: &Tensor<f32>, hout: usize, wout: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h == hout && w == wout {
        return img.clone();
    }
    let sx = w as f64 / wout as f64;
    let sy = h as f64 / hout as f64;
    let mut out = vec![0.0f32; hout * wout];
    for oy in 0..hout {
        for ox in 0..wout {
            let fx = (ox as f64 * sx).min(w as f64 - 1.0);
            let fy = (oy as f64 * sy).min(h as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = (fx - x0 as f64) as f32;
            let ay = (fy - y0 as f64) as f32;
            let v00 = img.data()[y0 * w + x0];
            let v01 = img.data()[y0 * w + x1];
            let v10 = img.data()[y1 * w + x0];
            let v11 = img.data()[y1 * w + x1];
            out[oy * wout + ox] =
                v00 * (1.0 - ax) * (1.0 - ay) + v01 * ax * (1.0 - ay) + v10 * (1.0 - ax) * ay
                    + v11 * ax * ay;
        }
    }
    Tensor::new(vec![1, hout, wout], out)
}

/// A generated dataset: pixel buffers plus a manifest whose paths name them.
#[derive(Debug)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<image::GrayImage>,
}

const SYNTH_MARGIN: usize = 6;
const SYNTH_MIN_SEP: f64 = 7.0;

/// Deterministic synthetic dataset: each image holds `n` distinguishable blob
/// patterns at known sub-pixel locations; spacing is physical 1.0 mm/px.
pub fn synth_generate(
    seed: u64,
    count: usize,
    n: usize,
    size: (usize, usize),
) -> Result<SynthDataset, LandmarkError> {
    assert!(count >= 1 && n >= 1);
    let (h, w) = size;
    let interior_h = h.saturating_sub(2 * SYNTH_MARGIN);
    let interior_w = w.saturating_sub(2 * SYNTH_MARGIN);
    // Packing bound: a sep/2-spaced grid must hold n points.
    let cells = ((interior_h as f64 / SYNTH_MIN_SEP + 1.0).floor()
        * (interior_w as f64 / SYNTH_MIN_SEP + 1.0).floor()) as usize;
    if interior_h == 0 || interior_w == 0 || cells < n {
        let per_axis = (n as f64).sqrt().ceil() as usize;
        let min = 2 * SYNTH_MARGIN + per_axis * SYNTH_MIN_SEP.ceil() as usize + 1;
        return Err(LandmarkError::SynthTooSmall { n, h, w, min });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for img_idx in 0..count {
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while points.len() < n {
            attempts += 1;
            if attempts > 20_000 {
                let per_axis = (n as f64).sqrt().ceil() as usize;
                let min = 2 * SYNTH_MARGIN + per_axis * SYNTH_MIN_SEP.ceil() as usize + 1;
                return Err(LandmarkError::SynthTooSmall { n, h, w, min });
            }
            let x = rng.gen_range(SYNTH_MARGIN as f64..(w - SYNTH_MARGIN) as f64);
            let y = rng.gen_range(SYNTH_MARGIN as f64..(h - SYNTH_MARGIN) as f64);
            if points
                .iter()
                .all(|&(px, py)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() >= SYNTH_MIN_SEP)
            {
                points.push((x, y));
            }
        }

        let mut pixels = vec![0.0f64; h * w];
        // Soft background gradient so images are not degenerate.
        for y in 0..h {
            for x in 0..w {
                pixels[y * w + x] =
                    0.08 + 0.10 * (x as f64 / w as f64) + 0.06 * (y as f64 / h as f64);
            }
        }
        for (i, &(cx, cy)) in points.iter().enumerate() {
            // Distinguishable blobs: intensity and width cycle with the
            // landmark index, plus an angular lobe pattern.
            let amp = 0.55 + 0.45 * ((i % 4) as f64 / 3.0).min(1.0);
            let sigma = 1.6 + 0.35 * (i % 3) as f64;
            let lobes = (i % 4) as f64;
            let r_max = (3.0 * sigma).ceil() as isize;
            for dy in -r_max..=r_max {
                for dx in -r_max..=r_max {
                    let px = cx.round() as isize + dx;
                    let py = cy.round() as isize + dy;
                    if px < 0 || py < 0 || px as usize >= w || py as usize >= h {
                        continue;
                    }
                    let rx = px as f64 - cx;
                    let ry = py as f64 - cy;
                    let r2 = rx * rx + ry * ry;
                    let theta = ry.atan2(rx);
                    let shape = 1.0 + 0.35 * (lobes * theta).cos();
                    let v = amp * shape * (-r2 / (2.0 * sigma * sigma)).exp();
                    let idx = py as usize * w + px as usize;
                    pixels[idx] = (pixels[idx] + v).min(1.0);
                }
            }
        }
        let buf: Vec<u8> = pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, buf).unwrap();
        images.push(img);
        records.push(ImageRecord {
            spec: ImageSpec {
                path: PathBuf::from(format!("img_{img_idx:03}.png")),
                width: w,
                height: h,
                spacing: SpacingModel::Physical { mm_per_px: [1.0, 1.0] },
            },
            landmarks: LandmarkSet::all_visible(points),
            patient_id: format!("patient_{img_idx:03}"),
        });
    }

    let manifest = DatasetManifest {
        name: "synthetic".to_string(),
        landmark_count: n,
        sdr_thresholds: SdrThresholds {
            unit: Unit::Mm,
            values: vec![2.0, 4.0, 10.0],
        },
        flip_pairs: vec![],
        images: records,
    };
    manifest.validate()?;
    Ok(SynthDataset { manifest, images })
}

impl SynthDataset {
    /// Writes the PNGs plus `manifest.json` into `out_dir`.
    pub fn write_to(&self, out_dir: impl AsRef<Path>) -> Result<PathBuf, LandmarkError> {
        let out_dir = out_dir.as_ref();
        std::fs::create_dir_all(out_dir)?;
        for (img, rec) in self.images.iter().zip(&self.manifest.images) {
            img.save(out_dir.join(&rec.spec.path))?;
        }
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, self.manifest.to_json())?;
        Ok(path)
    }
}

/// Resolves a manifest-relative image path against the manifest's directory.
pub fn resolve_image_path(manifest_path: &Path, image_path: &Path) -> PathBuf {
    if image_path.is_absolute() {
        image_path.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(image_path)
    }
}
