use crate::tensor::{matmul_nn, matmul_tn, Scalar, Tensor};

/// y = x·Wᵀ + b over the last axis. x: (..., din), w: (dout, din), b: (dout).
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> (Tensor<F>, LinearCtx<F>) {
    let din = *x.shape().last().expect("linear: x must have at least 1 dim");
    let (dout, din2) = (w.shape()[0], w.shape()[1]);
    assert_eq!(din, din2, "linear: x last dim {din} vs w inner dim {din2}");
    assert_eq!(b.shape(), &[dout], "linear: bias shape");
    let rows = x.numel() / din;
    let x2 = x.clone().reshape(vec![rows, din]);
    let mut y = crate::tensor::matmul_nt(&x2, w);
    for r in 0..rows {
        for o in 0..dout {
            y.data_mut()[r * dout + o] = y.data()[r * dout + o] + b.data()[o];
        }
    }
    let mut out_shape: Vec<usize> = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = dout;
    (y.reshape(out_shape), LinearCtx { x: x2, w: w.clone() })
}

pub struct LinearCtx<F> {
    x: Tensor<F>, // (rows, din)
    w: Tensor<F>, // (dout, din)
}

impl<F: Scalar> LinearCtx<F> {
    /// Returns (dx with x's flattened shape (rows, din), dw, db).
    pub fn backward(self, grad: &Tensor<F>) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let (rows, din) = (self.x.shape()[0], self.x.shape()[1]);
        let dout = self.w.shape()[0];
        let g = grad.clone().reshape(vec![rows, dout]);
        let dx = matmul_nn(&g, &self.w);
        let dw = matmul_tn(&g, &self.x); // (dout, din)
        let mut db = vec![F::zero(); dout];
        for r in 0..rows {
            for o in 0..dout {
                db[o] = db[o] + g.data()[r * dout + o];
            }
        }
        (
            dx.reshape(vec![rows, din]),
            dw,
            Tensor::new(vec![dout], db),
        )
    }
}

/// Last-axis layer normalization with biased variance, then affine γ, β.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> (Tensor<F>, LayerNormCtx<F>) {
    let d = *x.shape().last().expect("layer_norm: empty shape");
    assert_eq!(gamma.shape(), &[d]);
    assert_eq!(beta.shape(), &[d]);
    assert!(eps > F::zero());
    let rows = x.numel() / d;
    let df = F::cast_from(d as f64);
    let mut xhat = vec![F::zero(); x.numel()];
    let mut inv_std = vec![F::zero(); rows];
    let mut y = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<F>() / df;
        let var = xs
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<F>()
            / df;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for i in 0..d {
            let h = (xs[i] - mean) * istd;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma.data()[i] + beta.data()[i];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), y),
        LayerNormCtx {
            xhat: Tensor::new(x.shape().to_vec(), xhat),
            inv_std,
            gamma: gamma.clone(),
        },
    )
}

pub struct LayerNormCtx<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
    gamma: Tensor<F>,
}

impl<F: Scalar> LayerNormCtx<F> {
    /// Returns (dx, dgamma, dbeta).
    pub fn backward(self, grad: &Tensor<F>) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let d = *self.xhat.shape().last().unwrap();
        let rows = self.xhat.numel() / d;
        let df = F::cast_from(d as f64);
        let mut dx = vec![F::zero(); self.xhat.numel()];
        let mut dgamma = vec![F::zero(); d];
        let mut dbeta = vec![F::zero(); d];
        for r in 0..rows {
            let g = &grad.data()[r * d..(r + 1) * d];
            let xh = &self.xhat.data()[r * d..(r + 1) * d];
            let istd = self.inv_std[r];
            let mut sum_dh = F::zero();
            let mut sum_dh_xh = F::zero();
            for i in 0..d {
                let dh = g[i] * self.gamma.data()[i];
                sum_dh = sum_dh + dh;
                sum_dh_xh = sum_dh_xh + dh * xh[i];
                dgamma[i] = dgamma[i] + g[i] * xh[i];
                dbeta[i] = dbeta[i] + g[i];
            }
            for i in 0..d {
                let dh = g[i] * self.gamma.data()[i];
                dx[r * d + i] = istd * (dh - sum_dh / df - xh[i] * sum_dh_xh / df);
            }
        }
        (
            Tensor::new(self.xhat.shape().to_vec(), dx),
            Tensor::new(vec![d], dgamma),
            Tensor::new(vec![d], dbeta),
        )
    }
}

/// Tanh-approximation GELU: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, GeluCtx<F>) {
    let y = x.map(|v| gelu_scalar(v));
    (y, GeluCtx { x: x.clone() })
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let k = F::cast_from(0.044715);
    let half = F::cast_from(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub struct GeluCtx<F> {
    x: Tensor<F>,
}

impl<F: Scalar> GeluCtx<F> {
    pub fn backward(self, grad: &Tensor<F>) -> Tensor<F> {
        let c = F::cast_from((2.0 / std::f64::consts::PI).sqrt());
        let k = F::cast_from(0.044715);
        let half = F::cast_from(0.5);
        let three = F::cast_from(3.0);
        let mut out = Vec::with_capacity(self.x.numel());
        for (&x, &g) in self.x.data().iter().zip(grad.data()) {
            let u = c * (x + k * x * x * x);
            let t = u.tanh();
            let sech2 = F::one() - t * t;
            let du = c * (F::one() + three * k * x * x);
            let dy = half * (F::one() + t) + half * x * sech2 * du;
            out.push(g * dy);
        }
        Tensor::new(self.x.shape().to_vec(), out)
    }
}

/// Max-subtracted softmax over the last axis.
pub fn softmax<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, SoftmaxCtx<F>) {
    let k = *x.shape().last().expect("softmax: empty shape");
    assert!(k >= 1);
    let rows = x.numel() / k;
    let mut y = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let xs = &x.data()[r * k..(r + 1) * k];
        let m = xs.iter().copied().fold(xs[0], F::max);
        let mut z = F::zero();
        for i in 0..k {
            let e = (xs[i] - m).exp();
            y[r * k + i] = e;
            z = z + e;
        }
        for i in 0..k {
            y[r * k + i] = y[r * k + i] / z;
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y);
    (y.clone(), SoftmaxCtx { y })
}

pub struct SoftmaxCtx<F> {
    y: Tensor<F>,
}

impl<F: Scalar> SoftmaxCtx<F> {
    pub fn backward(self, grad: &Tensor<F>) -> Tensor<F> {
        let k = *self.y.shape().last().unwrap();
        let rows = self.y.numel() / k;
        let mut dx = vec![F::zero(); self.y.numel()];
        for r in 0..rows {
            let ys = &self.y.data()[r * k..(r + 1) * k];
            let gs = &grad.data()[r * k..(r + 1) * k];
            let dot = ys
                .iter()
                .zip(gs)
                .map(|(&y, &g)| y * g)
                .sum::<F>();
            for i in 0..k {
                dx[r * k + i] = ys[i] * (gs[i] - dot);
            }
        }
        Tensor::new(self.y.shape().to_vec(), dx)
    }
}
