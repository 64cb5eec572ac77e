use super::basic::{linear, LinearCtx};
use crate::tensor::{matmul_nn, matmul_tn, Scalar, Tensor};

/// Non-overlapping p×p patches of img (C, H, W), flattened row-major as
/// (c, ph, pw), projected by wp: (d, C·p·p) + bp. Output: (T, d) with
/// T = (H/p)(W/p), patches ordered row-major over the patch grid.
pub fn patch_embed<F: Scalar>(
    img: &Tensor<F>,
    wp: &Tensor<F>,
    bp: &Tensor<F>,
    p: usize,
) -> (Tensor<F>, PatchEmbedCtx<F>) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert!(h % p == 0 && w % p == 0, "patch_embed: p={p} must divide H={h}, W={w}");
    let (gh, gw) = (h / p, w / p);
    let t = gh * gw;
    let pv = c * p * p;
    assert_eq!(wp.shape()[1], pv, "patch_embed: wp inner dim");
    let mut patches = vec![F::zero(); t * pv];
    for gy in 0..gh {
        for gx in 0..gw {
            let ti = gy * gw + gx;
            for ci in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        patches[ti * pv + ci * p * p + py * p + px] =
                            img.data()[(ci * h + gy * p + py) * w + gx * p + px];
                    }
                }
            }
        }
    }
    let patches = Tensor::new(vec![t, pv], patches);
    let (tokens, lin_ctx) = linear(&patches, wp, bp);
    (
        tokens,
        PatchEmbedCtx {
            lin_ctx,
            img_shape: [c, h, w],
            p,
        },
    )
}

pub struct PatchEmbedCtx<F> {
    lin_ctx: LinearCtx<F>,
    img_shape: [usize; 3],
    p: usize,
}

impl<F: Scalar> PatchEmbedCtx<F> {
    /// Returns (dimg, dwp, dbp).
    pub fn backward(self, grad: &Tensor<F>) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let [c, h, w] = self.img_shape;
        let p = self.p;
        let (gh, gw) = (h / p, w / p);
        let pv = c * p * p;
        let (dpatches, dwp, dbp) = self.lin_ctx.backward(grad);
        let mut dimg = vec![F::zero(); c * h * w];
        for gy in 0..gh {
            for gx in 0..gw {
                let ti = gy * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            dimg[(ci * h + gy * p + py) * w + gx * p + px] =
                                dpatches.data()[ti * pv + ci * p * p + py * p + px];
                        }
                    }
                }
            }
        }
        (Tensor::new(vec![c, h, w], dimg), dwp, dbp)
    }
}

/// Transposed 2D convolution. x: (Cin, H, W), k: (Cin, Cout, kh, kw),
/// b: (Cout). Output dims H' = (H−1)·stride − 2·pad + kh (same for W').
/// With k=4, stride=2, pad=1 this exactly doubles the spatial dims.
pub fn conv_transpose2d<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, ConvTranspose2dCtx<F>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kcin, cout, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    assert_eq!(cin, kcin, "conv_transpose2d: channel mismatch");
    assert_eq!(b.shape(), &[cout]);
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    assert!(
        oh > 2 * pad && ow > 2 * pad,
        "conv_transpose2d: nonpositive output dims"
    );
    let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
    let mut y = vec![F::zero(); cout * oh * ow];
    for co in 0..cout {
        let ybase = co * oh * ow;
        for v in y[ybase..ybase + oh * ow].iter_mut() {
            *v = b.data()[co];
        }
        for ci in 0..cin {
            for ih in 0..h {
                for iw in 0..w {
                    let xv = x.data()[(ci * h + ih) * w + iw];
                    for ky in 0..kh {
                        let oy = (ih * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy as usize >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (iw * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox as usize >= ow {
                                continue;
                            }
                            let kv = kernel.data()[((ci * cout + co) * kh + ky) * kw + kx];
                            y[ybase + oy as usize * ow + ox as usize] =
                                y[ybase + oy as usize * ow + ox as usize] + xv * kv;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![cout, oh, ow], y),
        ConvTranspose2dCtx {
            x: x.clone(),
            kernel: kernel.clone(),
            stride,
            pad,
        },
    )
}

pub struct ConvTranspose2dCtx<F> {
    x: Tensor<F>,
    kernel: Tensor<F>,
    stride: usize,
    pad: usize,
}

impl<F: Scalar> ConvTranspose2dCtx<F> {
    /// Returns (dx, dkernel, db).
    pub fn backward(self, grad: &Tensor<F>) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let (cin, h, w) = (self.x.shape()[0], self.x.shape()[1], self.x.shape()[2]);
        let (cout, kh, kw) = (
            self.kernel.shape()[1],
            self.kernel.shape()[2],
            self.kernel.shape()[3],
        );
        let (oh, ow) = (grad.shape()[1], grad.shape()[2]);
        let (stride, pad) = (self.stride, self.pad);
        let mut dx = vec![F::zero(); cin * h * w];
        let mut dk = vec![F::zero(); self.kernel.numel()];
        let mut db = vec![F::zero(); cout];
        for co in 0..cout {
            let gb = co * oh * ow;
            let mut acc = F::zero();
            for v in &grad.data()[gb..gb + oh * ow] {
                acc = acc + *v;
            }
            db[co] = acc;
        }
        for ci in 0..cin {
            for ih in 0..h {
                for iw in 0..w {
                    let xv = self.x.data()[(ci * h + ih) * w + iw];
                    let mut dxv = F::zero();
                    for ky in 0..kh {
                        let oy = (ih * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy as usize >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (iw * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox as usize >= ow {
                                continue;
                            }
                            for co in 0..cout {
                                let g = grad.data()[(co * oh + oy as usize) * ow + ox as usize];
                                let ki = ((ci * cout + co) * kh + ky) * kw + kx;
                                dxv = dxv + g * self.kernel.data()[ki];
                                dk[ki] = dk[ki] + g * xv;
                            }
                        }
                    }
                    dx[(ci * h + ih) * w + iw] = dxv;
                }
            }
        }
        (
            Tensor::new(vec![cin, h, w], dx),
            Tensor::new(self.kernel.shape().to_vec(), dk),
            Tensor::new(vec![cout], db),
        )
    }
}

/// Per-pixel linear map. x: (Cin, H, W), k: (Cout, Cin), b: (Cout).
pub fn conv1x1<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    b: &Tensor<F>,
) -> (Tensor<F>, Conv1x1Ctx<F>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kcin) = (kernel.shape()[0], kernel.shape()[1]);
    assert_eq!(cin, kcin, "conv1x1: channel mismatch");
    assert_eq!(b.shape(), &[cout]);
    let xflat = x.clone().reshape(vec![cin, h * w]);
    let mut y = matmul_nn(kernel, &xflat); // (cout, h*w)
    for co in 0..cout {
        for i in 0..h * w {
            y.data_mut()[co * h * w + i] = y.data()[co * h * w + i] + b.data()[co];
        }
    }
    (
        y.reshape(vec![cout, h, w]),
        Conv1x1Ctx {
            xflat,
            kernel: kernel.clone(),
            hw: (h, w),
        },
    )
}

pub struct Conv1x1Ctx<F> {
    xflat: Tensor<F>, // (cin, h*w)
    kernel: Tensor<F>,
    hw: (usize, usize),
}

impl<F: Scalar> Conv1x1Ctx<F> {
    /// Returns (dx, dkernel, db).
    pub fn backward(self, grad: &Tensor<F>) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let (h, w) = self.hw;
        let (cout, cin) = (self.kernel.shape()[0], self.kernel.shape()[1]);
        let gflat = grad.clone().reshape(vec![cout, h * w]);
        let dx = matmul_tn(&self.kernel, &gflat); // (cin, h*w)
        // dk[co,ci] = sum_px g[co,px] x[ci,px]
        let mut dk = vec![F::zero(); cout * cin];
        for co in 0..cout {
            for ci in 0..cin {
                let mut acc = F::zero();
                for i in 0..h * w {
                    acc = acc + gflat.data()[co * h * w + i] * self.xflat.data()[ci * h * w + i];
                }
                dk[co * cin + ci] = acc;
            }
        }
        let mut db = vec![F::zero(); cout];
        for co in 0..cout {
            let mut acc = F::zero();
            for i in 0..h * w {
                acc = acc + gflat.data()[co * h * w + i];
            }
            db[co] = acc;
        }
        (
            dx.reshape(vec![cin, h, w]),
            Tensor::new(vec![cout, cin], dk),
            Tensor::new(vec![cout], db),
        )
    }
}
