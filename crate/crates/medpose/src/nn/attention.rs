use super::basic::{linear, softmax, LinearCtx, SoftmaxCtx};
use crate::tensor::{Scalar, Tensor};

/// Standard multi-head scaled dot-product self-attention over a token
/// sequence x: (T, d). Wqkv: (3d, d), Wproj: (d, d).
pub fn multi_head_attention<F: Scalar>(
    x: &Tensor<F>,
    w_qkv: &Tensor<F>,
    b_qkv: &Tensor<F>,
    w_proj: &Tensor<F>,
    b_proj: &Tensor<F>,
    heads: usize,
) -> (Tensor<F>, AttentionCtx<F>) {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    assert_eq!(w_qkv.shape(), &[3 * d, d], "attention: w_qkv shape");
    assert_eq!(w_proj.shape(), &[d, d], "attention: w_proj shape");
    assert!(d % heads == 0, "attention: d={d} not divisible by heads={heads}");
    let dh = d / heads;
    let scale = F::cast_from(1.0 / (dh as f64).sqrt());

    let (qkv, qkv_ctx) = linear(x, w_qkv, b_qkv); // (T, 3d)

    // Per-head Q, K, V as (T, dh) slices of the qkv rows.
    let get = |which: usize, h: usize, ti: usize, j: usize| -> F {
        qkv.data()[ti * 3 * d + which * d + h * dh + j]
    };

    let mut concat = vec![F::zero(); t * d];
    let mut attn_ctxs: Vec<SoftmaxCtx<F>> = Vec::with_capacity(heads);
    let mut attn_probs: Vec<Tensor<F>> = Vec::with_capacity(heads);
    for h in 0..heads {
        // scores (T, T)
        let mut scores = vec![F::zero(); t * t];
        for i in 0..t {
            for j in 0..t {
                let mut acc = F::zero();
                for c in 0..dh {
                    acc = acc + get(0, h, i, c) * get(1, h, j, c);
                }
                scores[i * t + j] = acc * scale;
            }
        }
        let (probs, sm_ctx) = softmax(&Tensor::new(vec![t, t], scores));
        // out_h = probs · V
        for i in 0..t {
            for c in 0..dh {
                let mut acc = F::zero();
                for j in 0..t {
                    acc = acc + probs.data()[i * t + j] * get(2, h, j, c);
                }
                concat[i * d + h * dh + c] = acc;
            }
        }
        attn_ctxs.push(sm_ctx);
        attn_probs.push(probs);
    }

    let concat = Tensor::new(vec![t, d], concat);
    let (out, proj_ctx) = linear(&concat, w_proj, b_proj);
    (
        out,
        AttentionCtx {
            qkv,
            qkv_ctx,
            proj_ctx,
            attn_ctxs,
            attn_probs,
            dh,
            scale,
        },
    )
}

pub struct AttentionCtx<F> {
    qkv: Tensor<F>,
    qkv_ctx: LinearCtx<F>,
    proj_ctx: LinearCtx<F>,
    attn_ctxs: Vec<SoftmaxCtx<F>>,
    attn_probs: Vec<Tensor<F>>,
    dh: usize,
    scale: F,
}

/// Gradients returned by [`AttentionCtx::backward`].
pub struct AttentionGrads<F> {
    pub dx: Tensor<F>,
    pub dw_qkv: Tensor<F>,
    pub db_qkv: Tensor<F>,
    pub dw_proj: Tensor<F>,
    pub db_proj: Tensor<F>,
}

impl<F: Scalar> AttentionCtx<F> {
    pub fn backward(self, grad: &Tensor<F>) -> AttentionGrads<F> {
        let (t, d) = (grad.shape()[0], grad.shape()[1]);
        let (dh, scale) = (self.dh, self.scale);
        let qkv = &self.qkv;
        let get = |which: usize, h: usize, ti: usize, j: usize| -> F {
            qkv.data()[ti * 3 * d + which * d + h * dh + j]
        };

        let (dconcat, dw_proj, db_proj) = self.proj_ctx.backward(grad);

        let mut dqkv = vec![F::zero(); t * 3 * d];
        for (h, (probs, sm_ctx)) in self
            .attn_probs
            .into_iter()
            .zip(self.attn_ctxs)
            .enumerate()
        {
            // d(out_h) is the h-th column block of dconcat.
            // dprobs[i,j] = sum_c dout[i,c] * V[j,c]; dV[j,c] = sum_i probs[i,j] dout[i,c]
            let mut dprobs = vec![F::zero(); t * t];
            for i in 0..t {
                for j in 0..t {
                    let mut acc = F::zero();
                    for c in 0..dh {
                        acc = acc + dconcat.data()[i * d + h * dh + c] * get(2, h, j, c);
                    }
                    dprobs[i * t + j] = acc;
                }
            }
            for j in 0..t {
                for c in 0..dh {
                    let mut acc = F::zero();
                    for i in 0..t {
                        acc = acc + probs.data()[i * t + j] * dconcat.data()[i * d + h * dh + c];
                    }
                    dqkv[j * 3 * d + 2 * d + h * dh + c] = acc;
                }
            }
            let dscores = sm_ctx.backward(&Tensor::new(vec![t, t], dprobs));
            // dQ[i,c] = scale * sum_j dS[i,j] K[j,c]; dK[j,c] = scale * sum_i dS[i,j] Q[i,c]
            for i in 0..t {
                for c in 0..dh {
                    let mut acc = F::zero();
                    for j in 0..t {
                        acc = acc + dscores.data()[i * t + j] * get(1, h, j, c);
                    }
                    dqkv[i * 3 * d + h * dh + c] = acc * scale;
                }
            }
            for j in 0..t {
                for c in 0..dh {
                    let mut acc = F::zero();
                    for i in 0..t {
                        acc = acc + dscores.data()[i * t + j] * get(0, h, i, c);
                    }
                    dqkv[j * 3 * d + d + h * dh + c] = acc * scale;
                }
            }
        }

        let (dx, dw_qkv, db_qkv) = self.qkv_ctx.backward(&Tensor::new(vec![t, 3 * d], dqkv));
        AttentionGrads {
            dx,
            dw_qkv,
            db_qkv,
            dw_proj,
            db_proj,
        }
    }
}
