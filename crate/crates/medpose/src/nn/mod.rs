//! Differentiable building blocks: each primitive is a forward function
//! returning the output plus a context, and the context's `backward` consumes
//! itself (one backward per forward) and returns exact gradients for every
//! input and parameter.
//!
//! Shape mismatches are programmer errors and panic; numeric validity is the
//! caller's contract. Reductions use a fixed row-major order so repeated runs
//! are bit-identical.

mod attention;
mod basic;
mod check;
mod conv;

pub use attention::{multi_head_attention, AttentionCtx};
pub use basic::{gelu, layer_norm, linear, softmax, GeluCtx, LayerNormCtx, LinearCtx, SoftmaxCtx};
pub use check::grad_check;
pub use conv::{
    conv1x1, conv_transpose2d, patch_embed, Conv1x1Ctx, ConvTranspose2dCtx, PatchEmbedCtx,
};
