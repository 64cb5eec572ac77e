//! Dense row-major tensors, the numeric carrier for every module.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! with `f64`, so everything numeric is generic over [`Scalar`].

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Element trait for all numeric code: `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn cast_from(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }
    fn to_f64_(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense n-dimensional array, flat row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Truncated-normal init (resample outside 2 std), the ViT convention.
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller; pairs keep the draw count deterministic per sample.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(F::cast_from(z * std));
            }
        }
        Self { shape, data }
    }

    /// Plain normal init (no truncation).
    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(F::cast_from(z * std));
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast to another scalar type through f64.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::cast_from(v.to_f64_())).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.cast()
    }

    pub fn at2(&self, r: usize, c: usize) -> F {
        let cols = self.shape[self.shape.len() - 1];
        self.data[r * cols + c]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> F {
        let (d1, d2) = (self.shape[1], self.shape[2]);
        self.data[(i * d1 + j) * d2 + k]
    }
}

/// y = x · Wᵀ, x: (rows, din), w: (dout, din) → (rows, dout).
/// Row-major inner loops keep the reduction order fixed.
pub fn matmul_nt<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
    let (rows, din) = (x.shape()[0], x.shape()[1]);
    let (dout, din2) = (w.shape()[0], w.shape()[1]);
    assert_eq!(din, din2, "matmul_nt inner dim mismatch");
    let mut out = vec![F::zero(); rows * dout];
    for r in 0..rows {
        let xr = &x.data[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &w.data[o * din..(o + 1) * din];
            let mut acc = F::zero();
            for i in 0..din {
                acc = acc + xr[i] * wr[i];
            }
            out[r * dout + o] = acc;
        }
    }
    Tensor::new(vec![rows, dout], out)
}

/// y = aᵀ · b, a: (k, m), b: (k, n) → (m, n).
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul_tn inner dim mismatch");
    let mut out = vec![F::zero(); m * n];
    for t in 0..k {
        let ar = &a.data[t * m..(t + 1) * m];
        let br = &b.data[t * n..(t + 1) * n];
        for i in 0..m {
            let ai = ar[i];
            let row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = row[j] + ai * br[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// y = a · b, a: (m, k), b: (k, n) → (m, n).
pub fn matmul_nn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul_nn inner dim mismatch");
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        let row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in ar.iter().enumerate() {
            let br = &b.data[t * n..(t + 1) * n];
            for j in 0..n {
                row[j] = row[j] + av * br[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}
