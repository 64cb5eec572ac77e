//! Model assembly: ViT backbone + transposed-convolution heatmap head with
//! per-dataset 1×1 output convolutions, LoRA adapter injection/merging,
//! trainability masks, and binary checkpoint persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::heatmap::HeatmapStack;
use crate::nn;
use crate::par;
use crate::tensor::{matmul_nn, Scalar, Tensor};

const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown dataset head: {0}")]
    UnknownDataset(String),
    #[error("LoRA adapters already present")]
    DoubleInjection,
    #[error("no LoRA adapters present")]
    NoAdapters,
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint shape mismatch for parameter `{name}`: file {file:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("checkpoint names unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint missing parameter `{0}`")]
    MissingParameter(String),
}

/// Backbone + head architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model input (H, W) in pixels.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub deconv_stages: usize,
    pub deconv_channels: usize,
    /// (dataset name, landmark count) per output head.
    pub dataset_heads: Vec<(String, usize)>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || self.in_channels == 0 {
            return err("input dims and channels must be >= 1");
        }
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return err("patch size must divide input dims");
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err("embed dim must be divisible by heads");
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return err("depth and mlp_ratio must be >= 1");
        }
        if self.deconv_stages == 0 || self.deconv_channels == 0 {
            return err("deconv stages and channels must be >= 1");
        }
        if self.patch_size % (1 << self.deconv_stages) != 0 {
            return err("2^deconv_stages must divide patch size");
        }
        if self.dataset_heads.is_empty() || self.dataset_heads.iter().any(|(_, n)| *n == 0) {
            return err("every dataset head needs landmark count >= 1");
        }
        let mut names: Vec<&str> = self.dataset_heads.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.dataset_heads.len() {
            return err("dataset head names must be unique");
        }
        Ok(())
    }

    /// Model-input pixels per heatmap pixel: p / 2^deconv_stages.
    pub fn stride(&self) -> usize {
        self.patch_size >> self.deconv_stages
    }

    /// Heatmap grid (h', w').
    pub fn heatmap_grid(&self) -> (usize, usize) {
        (self.input_size.0 / self.stride(), self.input_size.1 / self.stride())
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.patch_size,
            self.input_size.1 / self.patch_size,
        )
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.token_grid();
        gh * gw
    }

    pub fn landmark_count(&self, dataset: &str) -> Option<usize> {
        self.dataset_heads
            .iter()
            .find(|(n, _)| n == dataset)
            .map(|(_, c)| *c)
    }
}

/// Which weight sites receive LoRA adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraSite {
    Qkv,
    Proj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target_sites: Vec<LoraSite>,
}

impl LoraConfig {
    /// Rank-r adapters on both qkv and proj, with the α = r convention.
    pub fn rank(r: usize) -> Self {
        Self {
            rank: r,
            alpha: r as f64,
            target_sites: vec![LoraSite::Qkv, LoraSite::Proj],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::InvalidConfig("LoRA rank must be >= 1".into()));
        }
        if !(self.alpha / self.rank as f64).is_finite() || self.alpha <= 0.0 {
            return Err(ModelError::InvalidConfig("LoRA alpha must be positive".into()));
        }
        if self.target_sites.is_empty() {
            return Err(ModelError::InvalidConfig("LoRA needs at least one target site".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Trainability regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    LoraOnly,
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<F> {
    /// (r, din)
    pub a: Tensor<F>,
    /// (dout, r), zero right after injection.
    pub b: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
struct Block<F> {
    norm1_gamma: Tensor<F>,
    norm1_beta: Tensor<F>,
    qkv_w: Tensor<F>,
    qkv_b: Tensor<F>,
    proj_w: Tensor<F>,
    proj_b: Tensor<F>,
    norm2_gamma: Tensor<F>,
    norm2_beta: Tensor<F>,
    fc1_w: Tensor<F>,
    fc1_b: Tensor<F>,
    fc2_w: Tensor<F>,
    fc2_b: Tensor<F>,
    lora_qkv: Option<LoraPair<F>>,
    lora_proj: Option<LoraPair<F>>,
}

#[derive(Debug, Clone, PartialEq)]
struct DeconvStage<F> {
    w: Tensor<F>,
    b: Tensor<F>,
    norm_gamma: Tensor<F>,
    norm_beta: Tensor<F>,
}

/// The trainable model: named parameter tensors plus a trainability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f32> {
    pub cfg: ModelConfig,
    pub lora_cfg: Option<LoraConfig>,
    patch_w: Tensor<F>,
    patch_b: Tensor<F>,
    pos_embed: Tensor<F>,
    blocks: Vec<Block<F>>,
    deconvs: Vec<DeconvStage<F>>,
    out_heads: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
    trainable: BTreeSet<String>,
}

impl<F: Scalar> Model<F> {
    /// Deterministic initialization: truncated-normal (std 0.02) weights,
    /// zero biases, zero position embedding, unit norm scales.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let pv = cfg.in_channels * p * p;
        let t = cfg.tokens();
        let patch_w = Tensor::trunc_normal(vec![d, pv], INIT_STD, &mut rng);
        let patch_b = Tensor::zeros(vec![d]);
        let pos_embed = Tensor::zeros(vec![t, d]);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(Block {
                norm1_gamma: Tensor::filled(vec![d], F::one()),
                norm1_beta: Tensor::zeros(vec![d]),
                qkv_w: Tensor::trunc_normal(vec![3 * d, d], INIT_STD, &mut rng),
                qkv_b: Tensor::zeros(vec![3 * d]),
                proj_w: Tensor::trunc_normal(vec![d, d], INIT_STD, &mut rng),
                proj_b: Tensor::zeros(vec![d]),
                norm2_gamma: Tensor::filled(vec![d], F::one()),
                norm2_beta: Tensor::zeros(vec![d]),
                fc1_w: Tensor::trunc_normal(vec![cfg.mlp_ratio * d, d], INIT_STD, &mut rng),
                fc1_b: Tensor::zeros(vec![cfg.mlp_ratio * d]),
                fc2_w: Tensor::trunc_normal(vec![d, cfg.mlp_ratio * d], INIT_STD, &mut rng),
                fc2_b: Tensor::zeros(vec![d]),
                lora_qkv: None,
                lora_proj: None,
            });
        }
        let mut deconvs = Vec::with_capacity(cfg.deconv_stages);
        let mut cin = d;
        for _ in 0..cfg.deconv_stages {
            let cout = cfg.deconv_channels;
            deconvs.push(DeconvStage {
                w: Tensor::trunc_normal(vec![cin, cout, 4, 4], INIT_STD, &mut rng),
                b: Tensor::zeros(vec![cout]),
                norm_gamma: Tensor::filled(vec![cout], F::one()),
                norm_beta: Tensor::zeros(vec![cout]),
            });
            cin = cout;
        }
        let mut out_heads = BTreeMap::new();
        for (name, n) in &cfg.dataset_heads {
            out_heads.insert(
                name.clone(),
                (
                    Tensor::trunc_normal(vec![*n, cfg.deconv_channels], INIT_STD, &mut rng),
                    Tensor::zeros(vec![*n]),
                ),
            );
        }
        let mut model = Self {
            cfg,
            lora_cfg: None,
            patch_w,
            patch_b,
            pos_embed,
            blocks,
            deconvs,
            out_heads,
            trainable: BTreeSet::new(),
        };
        model.set_trainable(TrainMode::Full)?;
        Ok(model)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f("patch_embed.w".into(), &self.patch_w);
        f("patch_embed.b".into(), &self.patch_b);
        f("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("blocks.{i}.norm1.gamma"), &b.norm1_gamma);
            f(format!("blocks.{i}.norm1.beta"), &b.norm1_beta);
            f(format!("blocks.{i}.attn.qkv.w"), &b.qkv_w);
            f(format!("blocks.{i}.attn.qkv.b"), &b.qkv_b);
            if let Some(l) = &b.lora_qkv {
                f(format!("blocks.{i}.attn.qkv.lora.a"), &l.a);
                f(format!("blocks.{i}.attn.qkv.lora.b"), &l.b);
            }
            f(format!("blocks.{i}.attn.proj.w"), &b.proj_w);
            f(format!("blocks.{i}.attn.proj.b"), &b.proj_b);
            if let Some(l) = &b.lora_proj {
                f(format!("blocks.{i}.attn.proj.lora.a"), &l.a);
                f(format!("blocks.{i}.attn.proj.lora.b"), &l.b);
            }
            f(format!("blocks.{i}.norm2.gamma"), &b.norm2_gamma);
            f(format!("blocks.{i}.norm2.beta"), &b.norm2_beta);
            f(format!("blocks.{i}.mlp.fc1.w"), &b.fc1_w);
            f(format!("blocks.{i}.mlp.fc1.b"), &b.fc1_b);
            f(format!("blocks.{i}.mlp.fc2.w"), &b.fc2_w);
            f(format!("blocks.{i}.mlp.fc2.b"), &b.fc2_b);
        }
        for (i, s) in self.deconvs.iter().enumerate() {
            f(format!("head.deconv.{i}.w"), &s.w);
            f(format!("head.deconv.{i}.b"), &s.b);
            f(format!("head.deconv.{i}.norm.gamma"), &s.norm_gamma);
            f(format!("head.deconv.{i}.norm.beta"), &s.norm_beta);
        }
        for (name, (w, b)) in &self.out_heads {
            f(format!("head.out.{name}.w"), w);
            f(format!("head.out.{name}.b"), b);
        }
    }

    /// Stable (name, tensor) listing in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        let mut found = None;
        self.visit(&mut |n, t| {
            if n == name {
                found = Some(t);
            }
        });
        found
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        // Mirrors `visit`; kept in sync by the naming tests.
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["patch_embed", "w"] => Some(&mut self.patch_w),
            ["patch_embed", "b"] => Some(&mut self.patch_b),
            ["pos_embed"] => Some(&mut self.pos_embed),
            ["blocks", i, rest @ ..] => {
                let i: usize = i.parse().ok()?;
                let b = self.blocks.get_mut(i)?;
                match rest {
                    ["norm1", "gamma"] => Some(&mut b.norm1_gamma),
                    ["norm1", "beta"] => Some(&mut b.norm1_beta),
                    ["attn", "qkv", "w"] => Some(&mut b.qkv_w),
                    ["attn", "qkv", "b"] => Some(&mut b.qkv_b),
                    ["attn", "qkv", "lora", "a"] => b.lora_qkv.as_mut().map(|l| &mut l.a),
                    ["attn", "qkv", "lora", "b"] => b.lora_qkv.as_mut().map(|l| &mut l.b),
                    ["attn", "proj", "w"] => Some(&mut b.proj_w),
                    ["attn", "proj", "b"] => Some(&mut b.proj_b),
                    ["attn", "proj", "lora", "a"] => b.lora_proj.as_mut().map(|l| &mut l.a),
                    ["attn", "proj", "lora", "b"] => b.lora_proj.as_mut().map(|l| &mut l.b),
                    ["norm2", "gamma"] => Some(&mut b.norm2_gamma),
                    ["norm2", "beta"] => Some(&mut b.norm2_beta),
                    ["mlp", "fc1", "w"] => Some(&mut b.fc1_w),
                    ["mlp", "fc1", "b"] => Some(&mut b.fc1_b),
                    ["mlp", "fc2", "w"] => Some(&mut b.fc2_w),
                    ["mlp", "fc2", "b"] => Some(&mut b.fc2_b),
                    _ => None,
                }
            }
            ["head", "deconv", i, rest @ ..] => {
                let i: usize = i.parse().ok()?;
                let s = self.deconvs.get_mut(i)?;
                match rest {
                    ["w"] => Some(&mut s.w),
                    ["b"] => Some(&mut s.b),
                    ["norm", "gamma"] => Some(&mut s.norm_gamma),
                    ["norm", "beta"] => Some(&mut s.norm_beta),
                    _ => None,
                }
            }
            ["head", "out", ds, "w"] => self.out_heads.get_mut(*ds).map(|(w, _)| w),
            ["head", "out", ds, "b"] => self.out_heads.get_mut(*ds).map(|(_, b)| b),
            _ => None,
        }
    }

    pub fn trainable_names(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.lora_qkv.is_some() || b.lora_proj.is_some())
    }

    /// Updates the trainability mask: `Full` trains everything, `LoraOnly`
    /// trains adapters plus the whole head, `HeadOnly` just the head.
    pub fn set_trainable(&mut self, mode: TrainMode) -> Result<(), ModelError> {
        if mode == TrainMode::LoraOnly && !self.has_adapters() {
            return Err(ModelError::NoAdapters);
        }
        let mut set = BTreeSet::new();
        self.visit(&mut |n, _| {
            let keep = match mode {
                TrainMode::Full => true,
                TrainMode::HeadOnly => n.starts_with("head."),
                TrainMode::LoraOnly => n.starts_with("head.") || n.contains(".lora."),
            };
            if keep {
                set.insert(n);
            }
        });
        self.trainable = set;
        Ok(())
    }

    /// Attaches rank-r adapters (A ~ N(0, 0.02²), B = 0) to the configured
    /// sites of every block and switches to the LoRA-only regime.
    pub fn lora_inject(&mut self, lc: LoraConfig, seed: u64) -> Result<(), ModelError> {
        lc.validate()?;
        if self.has_adapters() {
            return Err(ModelError::DoubleInjection);
        }
        let d = self.cfg.embed_dim;
        let r = lc.rank;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut self.blocks {
            if lc.target_sites.contains(&LoraSite::Qkv) {
                b.lora_qkv = Some(LoraPair {
                    a: Tensor::normal(vec![r, d], INIT_STD, &mut rng),
                    b: Tensor::zeros(vec![3 * d, r]),
                });
            }
            if lc.target_sites.contains(&LoraSite::Proj) {
                b.lora_proj = Some(LoraPair {
                    a: Tensor::normal(vec![r, d], INIT_STD, &mut rng),
                    b: Tensor::zeros(vec![d, r]),
                });
            }
        }
        self.lora_cfg = Some(lc);
        self.set_trainable(TrainMode::LoraOnly)?;
        Ok(())
    }

    /// Folds every adapter into its base weight (W ← W + (α/r)·B·A) and
    /// removes the adapters.
    pub fn lora_merge(&mut self) -> Result<(), ModelError> {
        if !self.has_adapters() {
            return Err(ModelError::NoAdapters);
        }
        let scaling = F::cast_from(self.lora_cfg.as_ref().map(|c| c.scaling()).unwrap_or(1.0));
        for blk in &mut self.blocks {
            if let Some(l) = blk.lora_qkv.take() {
                let mut delta = matmul_nn(&l.b, &l.a);
                delta.scale(scaling);
                blk.qkv_w.add_assign(&delta);
            }
            if let Some(l) = blk.lora_proj.take() {
                let mut delta = matmul_nn(&l.b, &l.a);
                delta.scale(scaling);
                blk.proj_w.add_assign(&delta);
            }
        }
        self.lora_cfg = None;
        self.set_trainable(TrainMode::Full)?;
        Ok(())
    }

    fn effective_site_weight(base: &Tensor<F>, lora: &Option<LoraPair<F>>, scaling: F) -> Tensor<F> {
        match lora {
            None => base.clone(),
            Some(pair) => {
                let mut delta = matmul_nn(&pair.b, &pair.a);
                delta.scale(scaling);
                let mut w = base.clone();
                w.add_assign(&delta);
                w
            }
        }
    }

    /// Forward pass for one (C, H, W) image; returns the (N, h', w') heatmap
    /// tensor and the context for the backward pass.
    pub fn forward_one(
        &self,
        img: &Tensor<F>,
        dataset: &str,
    ) -> Result<(Tensor<F>, ForwardCtx<F>), ModelError> {
        let (head_w, head_b) = self
            .out_heads
            .get(dataset)
            .ok_or_else(|| ModelError::UnknownDataset(dataset.to_string()))?;
        let cfg = &self.cfg;
        assert_eq!(
            img.shape(),
            &[cfg.in_channels, cfg.input_size.0, cfg.input_size.1],
            "forward: image shape mismatch"
        );
        let eps = F::cast_from(NORM_EPS);
        let scaling = F::cast_from(self.lora_cfg.as_ref().map(|c| c.scaling()).unwrap_or(1.0));

        let (tokens, patch_ctx) = nn::patch_embed(img, &self.patch_w, &self.patch_b, cfg.patch_size);
        let mut x = tokens;
        x.add_assign(&self.pos_embed);

        let mut block_ctxs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (h1, norm1_ctx) = nn::layer_norm(&x, &blk.norm1_gamma, &blk.norm1_beta, eps);
            let qkv_eff = Self::effective_site_weight(&blk.qkv_w, &blk.lora_qkv, scaling);
            let proj_eff = Self::effective_site_weight(&blk.proj_w, &blk.lora_proj, scaling);
            let (attn, attn_ctx) = nn::multi_head_attention(
                &h1, &qkv_eff, &blk.qkv_b, &proj_eff, &blk.proj_b, cfg.heads,
            );
            x.add_assign(&attn);
            let (h2, norm2_ctx) = nn::layer_norm(&x, &blk.norm2_gamma, &blk.norm2_beta, eps);
            let (m1, fc1_ctx) = nn::linear(&h2, &blk.fc1_w, &blk.fc1_b);
            let (g, gelu_ctx) = nn::gelu(&m1);
            let (m2, fc2_ctx) = nn::linear(&g, &blk.fc2_w, &blk.fc2_b);
            x.add_assign(&m2);
            block_ctxs.push(BlockCtx {
                norm1_ctx,
                attn_ctx,
                norm2_ctx,
                fc1_ctx,
                gelu_ctx,
                fc2_ctx,
            });
        }

        // Token grid (T, d) -> feature map (d, gh, gw).
        let (gh, gw) = cfg.token_grid();
        let d = cfg.embed_dim;
        let mut fmap = vec![F::zero(); d * gh * gw];
        for t in 0..gh * gw {
            for c in 0..d {
                fmap[c * gh * gw + t] = x.data()[t * d + c];
            }
        }
        let mut feat = Tensor::new(vec![d, gh, gw], fmap);

        let mut deconv_ctxs = Vec::with_capacity(self.deconvs.len());
        for stage in &self.deconvs {
            let (y, conv_ctx) = nn::conv_transpose2d(&feat, &stage.w, &stage.b, 2, 1);
            let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            let hwc = chw_to_hwc(&y);
            let (normed, norm_ctx) = nn::layer_norm(&hwc, &stage.norm_gamma, &stage.norm_beta, eps);
            let (act, gelu_ctx) = nn::gelu(&normed);
            feat = hwc_to_chw(&act, c, h, w);
            deconv_ctxs.push(DeconvCtx {
                conv_ctx,
                norm_ctx,
                gelu_ctx,
                chw: (c, h, w),
            });
        }

        let (out, head_ctx) = nn::conv1x1(&feat, head_w, head_b);
        Ok((
            out,
            ForwardCtx {
                dataset: dataset.to_string(),
                patch_ctx,
                block_ctxs,
                deconv_ctxs,
                head_ctx,
                token_grid: (gh, gw),
                embed_dim: d,
                scaling,
            },
        ))
    }

    /// Batch forward without gradient bookkeeping; per-example results are
    /// computed independently (parallelizable) and returned in input order.
    pub fn forward_batch(
        &self,
        imgs: &[Tensor<F>],
        dataset: &str,
    ) -> Result<Vec<HeatmapStack<F>>, ModelError> {
        if self.cfg.landmark_count(dataset).is_none() {
            return Err(ModelError::UnknownDataset(dataset.to_string()));
        }
        let stride = self.cfg.stride() as f64;
        let outs: Vec<Tensor<F>> = par::map_indexed(imgs.len(), |i| {
            let (out, _) = self
                .forward_one(&imgs[i], dataset)
                .expect("dataset head checked above");
            out
        });
        Ok(outs
            .into_iter()
            .map(|data| HeatmapStack { data, stride })
            .collect())
    }

    /// Composite forward + keypoint MSE over a batch; returns the mean loss
    /// and gradients for the trainable parameters only.
    pub fn loss_and_grads(
        &self,
        imgs: &[Tensor<F>],
        gts: &[HeatmapStack<F>],
        target_weights: &[Vec<f32>],
        dataset: &str,
    ) -> Result<(F, BTreeMap<String, Tensor<F>>), ModelError> {
        assert_eq!(imgs.len(), gts.len());
        assert_eq!(imgs.len(), target_weights.len());
        if self.cfg.landmark_count(dataset).is_none() {
            return Err(ModelError::UnknownDataset(dataset.to_string()));
        }
        let batch = imgs.len();
        let stride = self.cfg.stride() as f64;
        let inv_batch = F::cast_from(1.0 / batch as f64);
        let per_sample: Vec<(F, BTreeMap<String, Tensor<F>>)> = par::map_indexed(batch, |i| {
            let (out, ctx) = self
                .forward_one(&imgs[i], dataset)
                .expect("dataset head checked above");
            let pred = HeatmapStack { data: out, stride };
            let loss = crate::heatmap::keypoint_mse(&pred, &gts[i], &target_weights[i]);
            let mut grad = crate::heatmap::keypoint_mse_grad(&pred, &gts[i], &target_weights[i]);
            grad.scale(inv_batch);
            let grads = self.backward_one(ctx, &grad);
            (loss * inv_batch, grads)
        });
        // Deterministic reduction in sample order.
        let mut total = F::zero();
        let mut acc: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (loss, grads) in per_sample {
            total = total + loss;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        acc.retain(|name, _| self.trainable.contains(name));
        Ok((total, acc))
    }

    /// Backward through one forward context; returns gradients for every
    /// parameter touched (filtering to trainable happens in the caller).
    fn backward_one(&self, ctx: ForwardCtx<F>, grad_out: &Tensor<F>) -> BTreeMap<String, Tensor<F>> {
        let mut grads: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        let add = |map: &mut BTreeMap<String, Tensor<F>>, name: String, g: Tensor<F>| {
            match map.get_mut(&name) {
                Some(t) => t.add_assign(&g),
                None => {
                    map.insert(name, g);
                }
            }
        };

        let (dfeat_head, dhead_w, dhead_b) = ctx.head_ctx.backward(grad_out);
        let ds = &ctx.dataset;
        add(&mut grads, format!("head.out.{ds}.w"), dhead_w);
        add(&mut grads, format!("head.out.{ds}.b"), dhead_b);

        let mut dfeat = dfeat_head;
        for (i, dc) in ctx.deconv_ctxs.into_iter().enumerate().rev() {
            let (c, h, w) = dc.chw;
            let dact = chw_to_hwc(&dfeat);
            let dnormed = dc.gelu_ctx.backward(&dact);
            let (dhwc, dgamma, dbeta) = dc.norm_ctx.backward(&dnormed);
            add(&mut grads, format!("head.deconv.{i}.norm.gamma"), dgamma);
            add(&mut grads, format!("head.deconv.{i}.norm.beta"), dbeta);
            let dy = hwc_to_chw(&dhwc, c, h, w);
            let (dx, dw, db) = dc.conv_ctx.backward(&dy);
            add(&mut grads, format!("head.deconv.{i}.w"), dw);
            add(&mut grads, format!("head.deconv.{i}.b"), db);
            dfeat = dx;
        }

        // Feature map (d, gh, gw) -> token gradient (T, d).
        let (gh, gw) = ctx.token_grid;
        let d = ctx.embed_dim;
        let mut dtokens = vec![F::zero(); gh * gw * d];
        for t in 0..gh * gw {
            for c in 0..d {
                dtokens[t * d + c] = dfeat.data()[c * gh * gw + t];
            }
        }
        let mut dx = Tensor::new(vec![gh * gw, d], dtokens);

        for (i, bc) in ctx.block_ctxs.into_iter().enumerate().rev() {
            // x_out = x_mid + fc2(gelu(fc1(norm2(x_mid))))
            let (dg, dfc2_w, dfc2_b) = bc.fc2_ctx.backward(&dx);
            add(&mut grads, format!("blocks.{i}.mlp.fc2.w"), dfc2_w);
            add(&mut grads, format!("blocks.{i}.mlp.fc2.b"), dfc2_b);
            let dm1 = bc.gelu_ctx.backward(&dg);
            let (dh2, dfc1_w, dfc1_b) = bc.fc1_ctx.backward(&dm1);
            add(&mut grads, format!("blocks.{i}.mlp.fc1.w"), dfc1_w);
            add(&mut grads, format!("blocks.{i}.mlp.fc1.b"), dfc1_b);
            let (dx_mid_norm, dgamma2, dbeta2) = bc.norm2_ctx.backward(&dh2);
            add(&mut grads, format!("blocks.{i}.norm2.gamma"), dgamma2);
            add(&mut grads, format!("blocks.{i}.norm2.beta"), dbeta2);
            dx.add_assign(&dx_mid_norm); // residual

            // x_mid = x_in + attn(norm1(x_in))
            let attn_grads = bc.attn_ctx.backward(&dx);
            self.split_site_grads(
                &mut grads,
                i,
                "qkv",
                attn_grads.dw_qkv,
                attn_grads.db_qkv,
                ctx.scaling,
            );
            self.split_site_grads(
                &mut grads,
                i,
                "proj",
                attn_grads.dw_proj,
                attn_grads.db_proj,
                ctx.scaling,
            );
            let (dh1, dgamma1, dbeta1) = bc.norm1_ctx.backward(&attn_grads.dx);
            add(&mut grads, format!("blocks.{i}.norm1.gamma"), dgamma1);
            add(&mut grads, format!("blocks.{i}.norm1.beta"), dbeta1);
            dx.add_assign(&dh1); // residual
        }

        add(&mut grads, "pos_embed".into(), dx.clone());
        let (_dimg, dpatch_w, dpatch_b) = ctx.patch_ctx.backward(&dx);
        add(&mut grads, "patch_embed.w".into(), dpatch_w);
        add(&mut grads, "patch_embed.b".into(), dpatch_b);
        grads
    }

    /// Distributes the gradient of an effective site weight W_eff = W + s·B·A
    /// to the base weight and, when present, the adapter pair.
    fn split_site_grads(
        &self,
        grads: &mut BTreeMap<String, Tensor<F>>,
        block: usize,
        site: &str,
        dw_eff: Tensor<F>,
        db: Tensor<F>,
        scaling: F,
    ) {
        let blk = &self.blocks[block];
        let lora = match site {
            "qkv" => &blk.lora_qkv,
            _ => &blk.lora_proj,
        };
        if let Some(pair) = lora {
            // dB = s · dW_eff · Aᵀ ; dA = s · Bᵀ · dW_eff
            let mut db_l = crate::tensor::matmul_nt(&dw_eff, &pair.a);
            db_l.scale(scaling);
            let mut da_l = crate::tensor::matmul_tn(&pair.b, &dw_eff);
            da_l.scale(scaling);
            grads.insert(format!("blocks.{block}.attn.{site}.lora.a"), da_l);
            grads.insert(format!("blocks.{block}.attn.{site}.lora.b"), db_l);
        }
        grads.insert(format!("blocks.{block}.attn.{site}.w"), dw_eff);
        grads.insert(format!("blocks.{block}.attn.{site}.b"), db);
    }

    /// Bilinear resize of the learned position embedding to a new token grid.
    pub fn resize_pos_embed(&mut self, new_grid: (usize, usize)) {
        let (gh, gw) = self.cfg.token_grid();
        let (nh, nw) = new_grid;
        if (gh, gw) == (nh, nw) {
            return;
        }
        let d = self.cfg.embed_dim;
        let old = self.pos_embed.clone();
        let mut out = vec![F::zero(); nh * nw * d];
        for y in 0..nh {
            for x in 0..nw {
                let fy = if nh > 1 {
                    y as f64 * (gh - 1) as f64 / (nh - 1) as f64
                } else {
                    0.0
                };
                let fx = if nw > 1 {
                    x as f64 * (gw - 1) as f64 / (nw - 1) as f64
                } else {
                    0.0
                };
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
                let (ay, ax) = (
                    F::cast_from(fy - y0 as f64),
                    F::cast_from(fx - x0 as f64),
                );
                for c in 0..d {
                    let v00 = old.data()[(y0 * gw + x0) * d + c];
                    let v01 = old.data()[(y0 * gw + x1) * d + c];
                    let v10 = old.data()[(y1 * gw + x0) * d + c];
                    let v11 = old.data()[(y1 * gw + x1) * d + c];
                    let one = F::one();
                    out[(y * nw + x) * d + c] = v00 * (one - ax) * (one - ay)
                        + v01 * ax * (one - ay)
                        + v10 * (one - ax) * ay
                        + v11 * ax * ay;
                }
            }
        }
        self.pos_embed = Tensor::new(vec![nh * nw, d], out);
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            lora_cfg: self.lora_cfg.clone(),
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1_gamma: b.norm1_gamma.cast(),
                    norm1_beta: b.norm1_beta.cast(),
                    qkv_w: b.qkv_w.cast(),
                    qkv_b: b.qkv_b.cast(),
                    proj_w: b.proj_w.cast(),
                    proj_b: b.proj_b.cast(),
                    norm2_gamma: b.norm2_gamma.cast(),
                    norm2_beta: b.norm2_beta.cast(),
                    fc1_w: b.fc1_w.cast(),
                    fc1_b: b.fc1_b.cast(),
                    fc2_w: b.fc2_w.cast(),
                    fc2_b: b.fc2_b.cast(),
                    lora_qkv: b.lora_qkv.as_ref().map(|l| LoraPair {
                        a: l.a.cast(),
                        b: l.b.cast(),
                    }),
                    lora_proj: b.lora_proj.as_ref().map(|l| LoraPair {
                        a: l.a.cast(),
                        b: l.b.cast(),
                    }),
                })
                .collect(),
            deconvs: self
                .deconvs
                .iter()
                .map(|s| DeconvStage {
                    w: s.w.cast(),
                    b: s.b.cast(),
                    norm_gamma: s.norm_gamma.cast(),
                    norm_beta: s.norm_beta.cast(),
                })
                .collect(),
            out_heads: self
                .out_heads
                .iter()
                .map(|(k, (w, b))| (k.clone(), (w.cast(), b.cast())))
                .collect(),
            trainable: self.trainable.clone(),
        }
    }
}

struct BlockCtx<F> {
    norm1_ctx: nn::LayerNormCtx<F>,
    attn_ctx: nn::AttentionCtx<F>,
    norm2_ctx: nn::LayerNormCtx<F>,
    fc1_ctx: nn::LinearCtx<F>,
    gelu_ctx: nn::GeluCtx<F>,
    fc2_ctx: nn::LinearCtx<F>,
}

struct DeconvCtx<F> {
    conv_ctx: nn::ConvTranspose2dCtx<F>,
    norm_ctx: nn::LayerNormCtx<F>,
    gelu_ctx: nn::GeluCtx<F>,
    chw: (usize, usize, usize),
}

/// Saved activations for one full forward pass.
pub struct ForwardCtx<F> {
    dataset: String,
    patch_ctx: nn::PatchEmbedCtx<F>,
    block_ctxs: Vec<BlockCtx<F>>,
    deconv_ctxs: Vec<DeconvCtx<F>>,
    head_ctx: nn::Conv1x1Ctx<F>,
    token_grid: (usize, usize),
    embed_dim: usize,
    scaling: F,
}

fn chw_to_hwc<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for i in 0..h * w {
            out[i * c + ci] = x.data()[ci * h * w + i];
        }
    }
    Tensor::new(vec![h * w, c], out)
}

fn hwc_to_chw<F: Scalar>(x: &Tensor<F>, c: usize, h: usize, w: usize) -> Tensor<F> {
    let mut out = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for i in 0..h * w {
            out[ci * h * w + i] = x.data()[i * c + ci];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "MSAP", u32 LE version = 1, u64 LE JSON header
// length, JSON header, then a raw little-endian f32 payload.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"MSAP";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    trainable: Vec<String>,
    tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer_state: Option<OptimHeader>,
}

/// Optimizer moments snapshot carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    /// (param name, first moment, second moment)
    pub moments: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

/// Atomically writes the model (and optional optimizer state) to `path`.
pub fn save_checkpoint(
    model: &Model<f32>,
    path: impl AsRef<Path>,
    optim: Option<&OptimSnapshot>,
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let push_tensor = |entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, name: String, t: &Tensor<f32>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in model.named_params() {
        push_tensor(&mut entries, &mut payload, name, t);
    }
    if let Some(o) = optim {
        for (name, m, v) in &o.moments {
            push_tensor(&mut entries, &mut payload, format!("optim.m.{name}"), m);
            push_tensor(&mut entries, &mut payload, format!("optim.v.{name}"), v);
        }
    }
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        lora: model.lora_cfg.clone(),
        trainable: model.trainable.iter().cloned().collect(),
        tensors: entries,
        optimizer_state: optim.map(|o| OptimHeader { step: o.step }),
    };
    let header_json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&CKPT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, verifying magic, version and the shape table.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Model<f32>, Option<OptimSnapshot>), ModelError> {
    let mut f = std::fs::File::open(path.as_ref())?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| ModelError::Truncated)?;
    if &magic != CKPT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4).map_err(|_| ModelError::Truncated)?;
    let version = u32::from_le_bytes(buf4);
    if version != CKPT_VERSION {
        return Err(ModelError::Version(version));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8).map_err(|_| ModelError::Truncated)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json).map_err(|_| ModelError::Truncated)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut model: Model<f32> = Model::build(header.config, 0)?;
    if let Some(lc) = header.lora.clone() {
        model.lora_inject(lc, 0)?;
    }
    let mut expected: BTreeSet<String> =
        model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut optim_moments: BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> =
        BTreeMap::new();

    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(ModelError::InvalidConfig(format!(
                "unsupported dtype {} for {}",
                e.dtype, e.name
            )));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(ModelError::Truncated);
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(e.shape.clone(), data);
        if let Some(rest) = e.name.strip_prefix("optim.m.") {
            optim_moments.entry(rest.to_string()).or_default().0 = Some(tensor);
        } else if let Some(rest) = e.name.strip_prefix("optim.v.") {
            optim_moments.entry(rest.to_string()).or_default().1 = Some(tensor);
        } else {
            let slot = model
                .param_mut(&e.name)
                .ok_or_else(|| ModelError::UnknownParameter(e.name.clone()))?;
            if slot.shape() != e.shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: e.name.clone(),
                    file: e.shape.clone(),
                    model: slot.shape().to_vec(),
                });
            }
            *slot = tensor;
            expected.remove(&e.name);
        }
    }
    if let Some(missing) = expected.into_iter().next() {
        return Err(ModelError::MissingParameter(missing));
    }
    model.trainable = header.trainable.into_iter().collect();

    let optim = header.optimizer_state.map(|o| OptimSnapshot {
        step: o.step,
        moments: optim_moments
            .into_iter()
            .filter_map(|(name, (m, v))| Some((name, m?, v?)))
            .collect(),
    });
    Ok((model, optim))
}
