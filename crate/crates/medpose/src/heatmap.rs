//! Gaussian heatmap codec: landmark → heatmap encoding, sub-pixel decoding of
//! predicted heatmaps, and the keypoint MSE loss with its gradient.

use crate::landmark::LandmarkSet;
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Per-landmark confidence maps: (N, h', w') plus the model-input stride.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack<F = f32> {
    pub data: Tensor<F>,
    pub stride: f64,
}

impl<F: Scalar> HeatmapStack<F> {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn channel(&self, i: usize) -> &[F] {
        let (h, w) = self.grid();
        &self.data.data()[i * h * w..(i + 1) * h * w]
    }
}

/// Gaussian kernel width in heatmap pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub sigma: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self { sigma: 2.0 }
    }
}

/// Encodes ground-truth landmarks (model-input space) into peak-1 Gaussian
/// heatmaps. Channel i holds exp(−((c−u)² + (r−v)²)/(2σ²)) with
/// (u, v) = (x/stride, y/stride). Invisible landmarks and landmarks whose
/// entire 3σ support is off-grid yield zero channels with target weight 0.
pub fn encode<F: Scalar>(
    gt: &LandmarkSet,
    spec: GaussianSpec,
    grid: (usize, usize),
    stride: f64,
) -> (HeatmapStack<F>, Vec<f32>) {
    let (h, w) = grid;
    assert!(h >= 1 && w >= 1 && stride > 0.0);
    assert!(spec.sigma > 0.0);
    let sigma = spec.sigma;
    let n = gt.len();
    let channels: Vec<(Vec<F>, f32)> = par::map_indexed(n, |i| {
        let mut ch = vec![F::zero(); h * w];
        if !gt.visibility[i] {
            return (ch, 0.0);
        }
        let (x, y) = gt.points[i];
        let u = x / stride;
        let v = y / stride;
        let support = 3.0 * sigma;
        let on_grid = u >= -support
            && u <= (w - 1) as f64 + support
            && v >= -support
            && v <= (h - 1) as f64 + support;
        if !on_grid {
            return (ch, 0.0);
        }
        let denom = 2.0 * sigma * sigma;
        for r in 0..h {
            for c in 0..w {
                let d2 = (c as f64 - u).powi(2) + (r as f64 - v).powi(2);
                ch[r * w + c] = F::cast_from((-d2 / denom).exp());
            }
        }
        (ch, 1.0)
    });
    let mut data = Vec::with_capacity(n * h * w);
    let mut weights = Vec::with_capacity(n);
    for (ch, wt) in channels {
        data.extend(ch);
        weights.push(wt);
    }
    (
        HeatmapStack {
            data: Tensor::new(vec![n, h, w], data),
            stride,
        },
        weights,
    )
}

/// Sub-pixel decode: per-channel argmax (row-major smallest index on ties)
/// plus a quarter-pixel shift toward the larger immediate neighbor along each
/// axis (no shift at borders or exact ties). Returns model-input coordinates
/// and per-channel confidence (the max value).
pub fn decode<F: Scalar>(pred: &HeatmapStack<F>) -> (LandmarkSet, Vec<f64>) {
    let n = pred.channels();
    let (h, w) = pred.grid();
    let stride = pred.stride;
    let decoded: Vec<((f64, f64), f64)> = par::map_indexed(n, |i| {
        let ch = pred.channel(i);
        let mut best = 0usize;
        for (j, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = j;
            }
        }
        let (r, c) = (best / w, best % w);
        let quarter = |lo: F, hi: F| -> f64 {
            if hi > lo {
                0.25
            } else if hi < lo {
                -0.25
            } else {
                0.0
            }
        };
        let dx = if c > 0 && c + 1 < w {
            quarter(ch[r * w + c - 1], ch[r * w + c + 1])
        } else {
            0.0
        };
        let dy = if r > 0 && r + 1 < h {
            quarter(ch[(r - 1) * w + c], ch[(r + 1) * w + c])
        } else {
            0.0
        };
        (
            ((c as f64 + dx) * stride, (r as f64 + dy) * stride),
            ch[best].to_f64_(),
        )
    });
    let points: Vec<(f64, f64)> = decoded.iter().map(|d| d.0).collect();
    let confidence: Vec<f64> = decoded.iter().map(|d| d.1).collect();
    (LandmarkSet::all_visible(points), confidence)
}

/// L = (1/N) Σᵢ wᵢ · ‖pred_i − gt_i‖₂² (per-channel sum of squared per-pixel
/// differences, weighted, averaged over channels).
pub fn keypoint_mse<F: Scalar>(
    pred: &HeatmapStack<F>,
    gt: &HeatmapStack<F>,
    target_weight: &[f32],
) -> F {
    assert_eq!(pred.data.shape(), gt.data.shape(), "keypoint_mse: shape mismatch");
    let n = pred.channels();
    assert_eq!(target_weight.len(), n);
    let (h, w) = pred.grid();
    let mut total = F::zero();
    for i in 0..n {
        let wt = F::cast_from(target_weight[i] as f64);
        if target_weight[i] == 0.0 {
            continue;
        }
        let (p, g) = (pred.channel(i), gt.channel(i));
        let mut acc = F::zero();
        for j in 0..h * w {
            let d = p[j] - g[j];
            acc = acc + d * d;
        }
        total = total + wt * acc;
    }
    total / F::cast_from(n as f64)
}

/// ∂L/∂pred = (2/N) · wᵢ · (pred_i − gt_i).
pub fn keypoint_mse_grad<F: Scalar>(
    pred: &HeatmapStack<F>,
    gt: &HeatmapStack<F>,
    target_weight: &[f32],
) -> Tensor<F> {
    assert_eq!(pred.data.shape(), gt.data.shape(), "keypoint_mse_grad: shape mismatch");
    let n = pred.channels();
    let (h, w) = pred.grid();
    let scale = F::cast_from(2.0 / n as f64);
    let mut out = vec![F::zero(); pred.data.numel()];
    for i in 0..n {
        let wt = F::cast_from(target_weight[i] as f64);
        let (p, g) = (pred.channel(i), gt.channel(i));
        for j in 0..h * w {
            out[i * h * w + j] = scale * wt * (p[j] - g[j]);
        }
    }
    Tensor::new(pred.data.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_landmark(x: f64, y: f64) -> LandmarkSet {
        LandmarkSet::all_visible(vec![(x, y)])
    }

    #[test]
    fn encode_peak_and_analytic_value() {
        // Landmark on grid node (10, 20) at stride 1: peak exactly 1.
        let (hm, wts) = encode::<f64>(&one_landmark(10.0, 20.0), GaussianSpec { sigma: 2.0 }, (32, 32), 1.0);
        assert_eq!(wts, vec![1.0]);
        let ch = hm.channel(0);
        assert_eq!(ch[20 * 32 + 10], 1.0);
        // Node at Euclidean distance 2 from the center, sigma 2: exp(-0.5).
        let v = ch[20 * 32 + 12];
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!(ch.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encode_invisible_channel_is_zero_with_weight_zero() {
        let gt = LandmarkSet::new(vec![(5.0, 5.0)], vec![false]);
        let (hm, wts) = encode::<f32>(&gt, GaussianSpec::default(), (16, 16), 4.0);
        assert_eq!(wts, vec![0.0]);
        assert!(hm.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_fully_off_grid_gets_weight_zero() {
        let gt = one_landmark(1000.0, 1000.0);
        let (hm, wts) = encode::<f32>(&gt, GaussianSpec::default(), (16, 16), 1.0);
        assert_eq!(wts, vec![0.0]);
        assert!(hm.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_exact_grid_node() {
        let (hm, _) = encode::<f64>(&one_landmark(40.0, 80.0), GaussianSpec { sigma: 2.0 }, (32, 32), 4.0);
        let (pts, conf) = decode(&hm);
        assert_eq!(pts.points[0], (40.0, 80.0));
        assert_eq!(conf[0], 1.0);
    }

    #[test]
    fn decode_quarter_offset_near_half_pixel() {
        let (hm, _) = encode::<f64>(&one_landmark(10.4, 20.0), GaussianSpec { sigma: 2.0 }, (40, 40), 1.0);
        let (pts, _) = decode(&hm);
        let (x, y) = pts.points[0];
        assert!((x - 10.25).abs() <= 0.15, "x = {x}");
        assert!((x - 10.4).abs() <= 0.5);
        assert_eq!(y, 20.0);
    }

    #[test]
    fn decode_uniform_ties_to_origin() {
        let hm = HeatmapStack {
            data: Tensor::filled(vec![1, 8, 8], 0.5f32),
            stride: 4.0,
        };
        let (pts, conf) = decode(&hm);
        assert_eq!(pts.points[0], (0.0, 0.0));
        assert_eq!(conf[0], 0.5);
    }

    #[test]
    fn mse_examples() {
        let (gt, wts) = encode::<f64>(&one_landmark(8.0, 8.0), GaussianSpec::default(), (16, 16), 1.0);
        assert_eq!(keypoint_mse(&gt, &gt, &wts), 0.0);

        // pred = gt + c everywhere: L = c^2 * P
        let c = 0.3;
        let pred = HeatmapStack {
            data: gt.data.map(|v| v + c),
            stride: gt.stride,
        };
        let p = 16.0 * 16.0;
        assert!((keypoint_mse(&pred, &gt, &wts) - c * c * p).abs() < 1e-9);

        // weight 0 masks a garbage channel
        let garbage = HeatmapStack {
            data: gt.data.map(|_| 123.0),
            stride: gt.stride,
        };
        assert_eq!(keypoint_mse(&garbage, &gt, &[0.0]), 0.0);
    }

    #[test]
    fn mse_grad_single_pixel() {
        let n = 2;
        let mut pred = HeatmapStack {
            data: Tensor::zeros(vec![n, 4, 4]),
            stride: 1.0,
        };
        let gt = HeatmapStack {
            data: Tensor::zeros(vec![n, 4, 4]),
            stride: 1.0,
        };
        let d = 0.7f64;
        pred.data.data_mut()[5] = d;
        let g = keypoint_mse_grad(&pred, &gt, &[1.0, 1.0]);
        assert!((g.data()[5] - 2.0 * d / n as f64).abs() < 1e-12);
        assert!(g.data().iter().enumerate().all(|(i, &v)| i == 5 || v == 0.0));
    }

    #[test]
    fn mse_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = vec![3, 6, 6];
        let numel: usize = shape.iter().product();
        let randt = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                shape.clone(),
                (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            )
        };
        let pred = HeatmapStack { data: randt(&mut rng), stride: 1.0 };
        let gt = HeatmapStack { data: randt(&mut rng), stride: 1.0 };
        let wts = [1.0, 0.0, 1.0];
        let analytic = keypoint_mse_grad(&pred, &gt, &wts);
        let err = crate::nn::grad_check(
            |t| {
                let p = HeatmapStack { data: t.clone(), stride: 1.0 };
                keypoint_mse(&p, &gt, &wts)
            },
            &pred.data,
            &analytic,
            1e-5,
            &mut rng,
        );
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn encode_translation_equivariance_one_stride() {
        let stride = 4.0;
        let (a, _) = encode::<f64>(&one_landmark(24.3, 40.0), GaussianSpec::default(), (32, 32), stride);
        let (b, _) = encode::<f64>(&one_landmark(24.3 + stride, 40.0), GaussianSpec::default(), (32, 32), stride);
        // Shifting by one stride shifts the pattern one grid cell right.
        for r in 0..32 {
            for c in 0..31 {
                let va = a.channel(0)[r * 32 + c];
                let vb = b.channel(0)[r * 32 + c + 1];
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn mse_shape_mismatch_panics() {
        let a = HeatmapStack { data: Tensor::<f32>::zeros(vec![1, 4, 4]), stride: 1.0 };
        let b = HeatmapStack { data: Tensor::<f32>::zeros(vec![1, 5, 5]), stride: 1.0 };
        let _ = keypoint_mse(&a, &b, &[1.0]);
    }
}
