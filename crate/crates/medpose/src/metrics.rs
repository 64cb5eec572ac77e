//! Evaluation protocol: radial errors on the original scale, MRE with
//! dispersion, SDR at per-dataset thresholds, SDR_avg, and report files.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::landmark::{LandmarkSet, Spacing, Unit};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    Empty,
    #[error("unit mismatch: errors in {errors}, threshold in {threshold}")]
    UnitMismatch { errors: Unit, threshold: Unit },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pooled per-landmark radial errors for one dataset, restricted to
/// ground-truth-visible landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialErrors {
    pub unit: Unit,
    pub values: Vec<f64>,
    pub n_images: usize,
}

impl RadialErrors {
    pub fn empty(unit: Unit) -> Self {
        Self {
            unit,
            values: Vec::new(),
            n_images: 0,
        }
    }

    pub fn merge(&mut self, other: &RadialErrors) {
        assert_eq!(self.unit, other.unit, "cannot merge errors with mixed units");
        self.values.extend_from_slice(&other.values);
        self.n_images += other.n_images;
    }
}

/// e_i = sqrt((sx·Δx)² + (sy·Δy)²) per GT-visible landmark; pixel-mode
/// spacing yields plain pixel distances.
pub fn radial_errors(pred: &LandmarkSet, gt: &LandmarkSet, spacing: Spacing) -> RadialErrors {
    assert_eq!(pred.len(), gt.len(), "radial_errors: landmark count mismatch");
    let (sx, sy) = spacing.factors();
    let unit = match spacing {
        Spacing::Pixel => Unit::Px,
        Spacing::MmPerPx(..) => Unit::Mm,
    };
    let mut values = Vec::new();
    for i in 0..gt.len() {
        if !gt.visibility[i] {
            continue;
        }
        let dx = (pred.points[i].0 - gt.points[i].0) * sx;
        let dy = (pred.points[i].1 - gt.points[i].1) * sy;
        values.push((dx * dx + dy * dy).sqrt());
    }
    RadialErrors {
        unit,
        values,
        n_images: 1,
    }
}

/// Mean and population standard deviation over all pooled landmark errors.
pub fn mre(errs: &RadialErrors) -> Result<(f64, f64), MetricsError> {
    if errs.values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = errs.values.len() as f64;
    let mean = errs.values.iter().sum::<f64>() / n;
    let var = errs.values.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// 100 · |{e ≤ t}| / |evaluated|; the boundary counts as detected.
pub fn sdr(errs: &RadialErrors, threshold: f64) -> Result<f64, MetricsError> {
    if errs.values.is_empty() {
        return Err(MetricsError::Empty);
    }
    assert!(threshold > 0.0);
    let hits = errs.values.iter().filter(|&&e| e <= threshold).count();
    Ok(100.0 * hits as f64 / errs.values.len() as f64)
}

/// Arithmetic mean of the per-threshold SDR values.
pub fn sdr_avg(sdrs: &[f64]) -> f64 {
    assert!(!sdrs.is_empty(), "sdr_avg of empty list");
    sdrs.iter().sum::<f64>() / sdrs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MreStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrEntry {
    pub threshold: f64,
    pub value: f64,
}

/// Per-dataset MRE and SDR results, serializable to report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub unit: Unit,
    pub mre: MreStat,
    pub sdr: Vec<SdrEntry>,
    pub sdr_avg: f64,
    pub n_images: usize,
    pub n_landmarks: usize,
}

/// Aggregates pooled errors into a full report at the given thresholds
/// (which must share the errors' unit).
pub fn build_report(
    dataset: &str,
    errs: &RadialErrors,
    thresholds: &[f64],
    threshold_unit: Unit,
) -> Result<MetricsReport, MetricsError> {
    if threshold_unit != errs.unit {
        return Err(MetricsError::UnitMismatch {
            errors: errs.unit,
            threshold: threshold_unit,
        });
    }
    let (mean, std) = mre(errs)?;
    let sdr_entries: Vec<SdrEntry> = thresholds
        .iter()
        .map(|&t| {
            Ok(SdrEntry {
                threshold: t,
                value: sdr(errs, t)?,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    let avg = sdr_avg(&sdr_entries.iter().map(|e| e.value).collect::<Vec<_>>());
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        unit: errs.unit,
        mre: MreStat { mean, std },
        sdr: sdr_entries,
        sdr_avg: avg,
        n_images: errs.n_images,
        n_landmarks: errs.values.len(),
    })
}

/// Output format for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

impl MetricsReport {
    /// Table in the comparison-literature style: 2-decimal SDR percentages,
    /// 3-decimal MRE mean ± std.
    pub fn to_text_table(&self) -> String {
        let mut header: Vec<String> = self
            .sdr
            .iter()
            .map(|e| format!("{} {}", trim_num(e.threshold), self.unit))
            .collect();
        header.push("SDR_avg".to_string());
        header.push(format!("MRE({})", self.unit));
        let mut row: Vec<String> = self.sdr.iter().map(|e| format!("{:.2}", e.value)).collect();
        row.push(format!("{:.2}", self.sdr_avg));
        row.push(format!("{:.3}±{:.3}", self.mre.mean, self.mre.std));
        format!(
            "dataset: {} ({} images, {} landmarks)\n{}\n{}\n",
            self.dataset,
            self.n_images,
            self.n_landmarks,
            header.join(" | "),
            row.join(" | "),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,unit,metric,value\n");
        for e in &self.sdr {
            out.push_str(&format!(
                "{},{},sdr@{},{}\n",
                self.dataset,
                self.unit,
                trim_num(e.threshold),
                e.value
            ));
        }
        out.push_str(&format!("{},{},sdr_avg,{}\n", self.dataset, self.unit, self.sdr_avg));
        out.push_str(&format!("{},{},mre_mean,{}\n", self.dataset, self.unit, self.mre.mean));
        out.push_str(&format!("{},{},mre_std,{}\n", self.dataset, self.unit, self.mre.std));
        out.push_str(&format!("{},{},n_images,{}\n", self.dataset, self.unit, self.n_images));
        out.push_str(&format!("{},{},n_landmarks,{}\n", self.dataset, self.unit, self.n_landmarks));
        out
    }
}

fn trim_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Writes the report in the requested format.
pub fn emit_report(
    r: &MetricsReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<(), MetricsError> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(r).expect("report serialization"),
        ReportFormat::Csv => r.to_csv(),
        ReportFormat::Text => r.to_text_table(),
    };
    std::fs::write(path, text)?;
    Ok(())
}
