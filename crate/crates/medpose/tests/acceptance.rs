//! Acceptance gate: one test per criterion, each printing a single
//! `[PASS] criterion N` line (run with `--nocapture` to see them inline).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use medpose::augment::{self, AugmentConfig, Sample};
use medpose::heatmap::{self, GaussianSpec, HeatmapStack};
use medpose::landmark::{
    effective_spacing, synth_generate, ImageSpec, LandmarkSet, Spacing, SpacingModel, Unit,
};
use medpose::metrics::{radial_errors, sdr, sdr_avg, RadialErrors};
use medpose::model::{
    load_checkpoint, save_checkpoint, LoraConfig, Model, ModelConfig, TrainMode,
};
use medpose::nn;
use medpose::trainer::{
    adamw_step, evaluate, few_shot_split, train, LoadedDataset, OptimConfig, OptimState,
    TrainConfig,
};
use medpose::tensor::Tensor;

fn pass(n: u32, detail: &str) {
    println!("[PASS] criterion {n}: {detail}");
}

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::normal(shape, 1.0, rng)
}

/// Weighted-sum loss ⟨w, y⟩ turning any tensor output into a scalar.
fn dot(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    let tol = 1e-5;
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: f64 = 0.0;
    let mut record = |err: f64, what: &str| {
        assert!(err <= tol, "{what}: max rel error {err:.3e} > {tol:e}");
        if err > worst {
            worst = err;
        }
    };

    // linear: 3 input shapes, grads for x, w, b.
    for (batch, din, dout) in [(vec![2usize], 3usize, 4usize), (vec![1], 5, 2), (vec![2, 2], 3, 5)] {
        let mut xshape = batch.clone();
        xshape.push(din);
        let x = randn(xshape.clone(), &mut rng);
        let w = randn(vec![dout, din], &mut rng);
        let b = randn(vec![dout], &mut rng);
        let mut oshape = batch.clone();
        oshape.push(dout);
        let lw = randn(oshape, &mut rng);
        let (_, ctx) = nn::linear(&x, &w, &b);
        let (dx, dw, db) = ctx.backward(&lw);
        let dx = dx.reshape(xshape); // backward flattens leading dims
        record(
            nn::grad_check(|t| dot(&nn::linear(t, &w, &b).0, &lw), &x, &dx, h, &mut rng),
            "linear/x",
        );
        record(
            nn::grad_check(|t| dot(&nn::linear(&x, t, &b).0, &lw), &w, &dw, h, &mut rng),
            "linear/w",
        );
        record(
            nn::grad_check(|t| dot(&nn::linear(&x, &w, t).0, &lw), &b, &db, h, &mut rng),
            "linear/b",
        );
    }

    // layer_norm: grads for x, gamma, beta.
    for (rows, d) in [(2usize, 4usize), (3, 5), (1, 7)] {
        let x = randn(vec![rows, d], &mut rng);
        let g = randn(vec![d], &mut rng);
        let b = randn(vec![d], &mut rng);
        let lw = randn(vec![rows, d], &mut rng);
        let (_, ctx) = nn::layer_norm(&x, &g, &b, 1e-6);
        let (dx, dg, db) = ctx.backward(&lw);
        record(
            nn::grad_check(|t| dot(&nn::layer_norm(t, &g, &b, 1e-6).0, &lw), &x, &dx, h, &mut rng),
            "layer_norm/x",
        );
        record(
            nn::grad_check(|t| dot(&nn::layer_norm(&x, t, &b, 1e-6).0, &lw), &g, &dg, h, &mut rng),
            "layer_norm/gamma",
        );
        record(
            nn::grad_check(|t| dot(&nn::layer_norm(&x, &g, t, 1e-6).0, &lw), &b, &db, h, &mut rng),
            "layer_norm/beta",
        );
    }

    // gelu
    for shape in [vec![6usize], vec![2, 3], vec![2, 2, 2]] {
        let x = randn(shape.clone(), &mut rng);
        let lw = randn(shape, &mut rng);
        let (_, ctx) = nn::gelu(&x);
        let dx = ctx.backward(&lw);
        record(
            nn::grad_check(|t| dot(&nn::gelu(t).0, &lw), &x, &dx, h, &mut rng),
            "gelu/x",
        );
    }

    // softmax (row-wise)
    for (rows, cols) in [(2usize, 4usize), (3, 3), (1, 6)] {
        let x = randn(vec![rows, cols], &mut rng);
        let lw = randn(vec![rows, cols], &mut rng);
        let (_, ctx) = nn::softmax(&x);
        let dx = ctx.backward(&lw);
        record(
            nn::grad_check(|t| dot(&nn::softmax(t).0, &lw), &x, &dx, h, &mut rng),
            "softmax/x",
        );
    }

    // multi-head attention: grads for x and all four weight tensors.
    for (t_len, d, heads) in [(3usize, 4usize, 2usize), (2, 6, 3), (4, 4, 1)] {
        let x = randn(vec![t_len, d], &mut rng);
        let wq = Tensor::normal(vec![3 * d, d], 0.5, &mut rng);
        let bq = Tensor::normal(vec![3 * d], 0.5, &mut rng);
        let wp = Tensor::normal(vec![d, d], 0.5, &mut rng);
        let bp = Tensor::normal(vec![d], 0.5, &mut rng);
        let lw = randn(vec![t_len, d], &mut rng);
        let (_, ctx) = nn::multi_head_attention(&x, &wq, &bq, &wp, &bp, heads);
        let g = ctx.backward(&lw);
        let f_x = |t: &Tensor<f64>| dot(&nn::multi_head_attention(t, &wq, &bq, &wp, &bp, heads).0, &lw);
        record(nn::grad_check(f_x, &x, &g.dx, h, &mut rng), "attention/x");
        let f_wq = |t: &Tensor<f64>| dot(&nn::multi_head_attention(&x, t, &bq, &wp, &bp, heads).0, &lw);
        record(nn::grad_check(f_wq, &wq, &g.dw_qkv, h, &mut rng), "attention/w_qkv");
        // The K-bias block has an exactly-zero gradient: a constant added to
        // every key shifts each score row uniformly and softmax cancels the
        // shift. grad_check's relative-error floor would amplify finite-
        // difference roundoff on those zeros, so check the bias coordinate
        // by coordinate: zeros must be exact, the rest meet the usual tol.
        for i in d..2 * d {
            assert!(
                g.db_qkv.data()[i].abs() < 1e-12,
                "attention/b_qkv k-block not ~zero: {}",
                g.db_qkv.data()[i]
            );
        }
        let mut bq_probe = bq.clone();
        for i in 0..3 * d {
            let orig = bq_probe.data()[i];
            bq_probe.data_mut()[i] = orig + h;
            let fp = dot(&nn::multi_head_attention(&x, &wq, &bq_probe, &wp, &bp, heads).0, &lw);
            bq_probe.data_mut()[i] = orig - h;
            let fm = dot(&nn::multi_head_attention(&x, &wq, &bq_probe, &wp, &bp, heads).0, &lw);
            bq_probe.data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = g.db_qkv.data()[i];
            if a.abs() < 1e-12 {
                assert!(num.abs() < 1e-8, "attention/b_qkv[{i}]: fd {num:.3e} on zero grad");
            } else {
                record((a - num).abs() / a.abs().max(num.abs()), "attention/b_qkv");
            }
        }
        let f_wp = |t: &Tensor<f64>| dot(&nn::multi_head_attention(&x, &wq, &bq, t, &bp, heads).0, &lw);
        record(nn::grad_check(f_wp, &wp, &g.dw_proj, h, &mut rng), "attention/w_proj");
        let f_bp = |t: &Tensor<f64>| dot(&nn::multi_head_attention(&x, &wq, &bq, &wp, t, heads).0, &lw);
        record(nn::grad_check(f_bp, &bp, &g.db_proj, h, &mut rng), "attention/b_proj");
    }

    // patch_embed: grads for image, weight, bias.
    for (c, hh, ww, p, d) in [(1usize, 4usize, 4usize, 2usize, 3usize), (2, 6, 6, 3, 4), (1, 8, 4, 2, 5)] {
        let img = randn(vec![c, hh, ww], &mut rng);
        let wp = randn(vec![d, c * p * p], &mut rng);
        let bp = randn(vec![d], &mut rng);
        let tokens = (hh / p) * (ww / p);
        let lw = randn(vec![tokens, d], &mut rng);
        let (_, ctx) = nn::patch_embed(&img, &wp, &bp, p);
        let (dimg, dwp, dbp) = ctx.backward(&lw);
        record(
            nn::grad_check(|t| dot(&nn::patch_embed(t, &wp, &bp, p).0, &lw), &img, &dimg, h, &mut rng),
            "patch_embed/img",
        );
        record(
            nn::grad_check(|t| dot(&nn::patch_embed(&img, t, &bp, p).0, &lw), &wp, &dwp, h, &mut rng),
            "patch_embed/w",
        );
        record(
            nn::grad_check(|t| dot(&nn::patch_embed(&img, &wp, t, p).0, &lw), &bp, &dbp, h, &mut rng),
            "patch_embed/b",
        );
    }

    // conv_transpose2d (k=4, s=2, pad=1): grads for x, kernel, bias.
    for (cin, cout, hh, ww) in [(2usize, 3usize, 2usize, 2usize), (1, 2, 3, 3), (3, 2, 2, 3)] {
        let x = randn(vec![cin, hh, ww], &mut rng);
        let k = randn(vec![cin, cout, 4, 4], &mut rng);
        let b = randn(vec![cout], &mut rng);
        let (y, ctx) = nn::conv_transpose2d(&x, &k, &b, 2, 1);
        let lw = randn(y.shape().to_vec(), &mut rng);
        let (dx, dk, db) = ctx.backward(&lw);
        record(
            nn::grad_check(|t| dot(&nn::conv_transpose2d(t, &k, &b, 2, 1).0, &lw), &x, &dx, h, &mut rng),
            "conv_transpose2d/x",
        );
        record(
            nn::grad_check(|t| dot(&nn::conv_transpose2d(&x, t, &b, 2, 1).0, &lw), &k, &dk, h, &mut rng),
            "conv_transpose2d/k",
        );
        record(
            nn::grad_check(|t| dot(&nn::conv_transpose2d(&x, &k, t, 2, 1).0, &lw), &b, &db, h, &mut rng),
            "conv_transpose2d/b",
        );
    }

    // conv1x1: grads for x, kernel, bias.
    for (cin, cout, hh, ww) in [(2usize, 4usize, 3usize, 3usize), (1, 1, 2, 2), (3, 2, 1, 4)] {
        let x = randn(vec![cin, hh, ww], &mut rng);
        let k = randn(vec![cout, cin], &mut rng);
        let b = randn(vec![cout], &mut rng);
        let lw = randn(vec![cout, hh, ww], &mut rng);
        let (_, ctx) = nn::conv1x1(&x, &k, &b);
        let (dx, dk, db) = ctx.backward(&lw);
        record(
            nn::grad_check(|t| dot(&nn::conv1x1(t, &k, &b).0, &lw), &x, &dx, h, &mut rng),
            "conv1x1/x",
        );
        record(
            nn::grad_check(|t| dot(&nn::conv1x1(&x, t, &b).0, &lw), &k, &dk, h, &mut rng),
            "conv1x1/k",
        );
        record(
            nn::grad_check(|t| dot(&nn::conv1x1(&x, &k, t).0, &lw), &b, &db, h, &mut rng),
            "conv1x1/b",
        );
    }

    // Full tiny model (<= 5k params), composite tolerance 1e-4.
    let cfg = ModelConfig {
        input_size: (16, 16),
        in_channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        deconv_stages: 2,
        deconv_channels: 4,
        dataset_heads: vec![("synthetic".to_string(), 2)],
    };
    let mut model: Model<f64> = Model::build(cfg, 7).unwrap();
    model.lora_inject(LoraConfig::rank(2), 11).unwrap();
    model.set_trainable(TrainMode::Full).unwrap();
    let n_params: usize = model.named_params().iter().map(|(_, t)| t.numel()).sum();
    assert!(n_params <= 5000, "tiny model has {n_params} params");
    let img = randn(vec![1, 16, 16], &mut rng).map(|v| v.abs().min(1.0));
    let gt = HeatmapStack {
        data: randn(vec![2, 16, 16], &mut rng).map(|v| v.abs().min(1.0)),
        stride: 1.0,
    };
    let weights = vec![vec![1.0f32, 1.0]];
    let loss_of = |m: &Model<f64>| -> f64 {
        m.loss_and_grads(
            std::slice::from_ref(&img),
            std::slice::from_ref(&gt),
            &weights,
            "synthetic",
        )
        .unwrap()
        .0
    };
    let (_, grads) = model
        .loss_and_grads(
            std::slice::from_ref(&img),
            std::slice::from_ref(&gt),
            &weights,
            "synthetic",
        )
        .unwrap();
    let mut model_worst: f64 = 0.0;
    let hm = 1e-5;
    for (name, g) in &grads {
        let n = g.numel();
        for k in 0..3.min(n) {
            let idx = (k * 6151) % n;
            let mut mp = model.clone();
            mp.param_mut(name).unwrap().data_mut()[idx] += hm;
            let mut mm = model.clone();
            mm.param_mut(name).unwrap().data_mut()[idx] -= hm;
            let numeric = (loss_of(&mp) - loss_of(&mm)) / (2.0 * hm);
            let analytic = g.data()[idx];
            let abs = (numeric - analytic).abs();
            let rel = abs / numeric.abs().max(analytic.abs()).max(1e-8);
            // The absolute escape covers the finite-difference noise floor:
            // gradients damped to ~1e-6 by the head's channel norm cannot be
            // resolved to 1e-4 relative by central differences in f64.
            assert!(
                rel <= 1e-4 || abs <= 1e-8,
                "model {name}[{idx}]: rel {rel:.3e} abs {abs:.3e}"
            );
            model_worst = model_worst.max(rel.min(1.0));
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "gradient suite took {elapsed:?}");
    pass(
        1,
        &format!(
            "primitive max rel err {worst:.2e} (tol 1e-5), tiny model ({n_params} params) checked at 1e-4, {elapsed:.1?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Codec round-trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_codec_roundtrip() {
    let sigma = 2.0;
    let stride = 4.0;
    let grid = (64usize, 64usize);
    let input = (grid.0 as f64 * stride, grid.1 as f64 * stride);
    let margin = 3.0 * sigma * stride; // ≥3σ from every border, in input units
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let n = 1000;
    let points: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.gen_range(margin..input.1 - margin),
                rng.gen_range(margin..input.0 - margin),
            )
        })
        .collect();
    let gt = LandmarkSet::all_visible(points.clone());
    let (stack, weights) = heatmap::encode::<f32>(&gt, GaussianSpec { sigma }, grid, stride);
    assert!(weights.iter().all(|&w| w == 1.0));
    let (decoded, conf) = heatmap::decode(&stack);
    assert!(conf.iter().all(|&c| c > 0.5));
    let mut mean_err = 0.0;
    for (p, q) in points.iter().zip(&decoded.points) {
        let (dx, dy) = ((p.0 - q.0).abs(), (p.1 - q.1).abs());
        assert!(
            dx <= 0.5 * stride && dy <= 0.5 * stride,
            "round-trip error ({dx:.3}, {dy:.3}) for {p:?} -> {q:?}"
        );
        mean_err += (dx * dx + dy * dy).sqrt();
    }
    mean_err /= n as f64;
    pass(
        2,
        &format!("1000/1000 within 0.5·stride per axis; mean error {mean_err:.4} px"),
    );
}

// ---------------------------------------------------------------------------
// 3. LoRA identities
// ---------------------------------------------------------------------------

fn lora_cfg_model() -> ModelConfig {
    ModelConfig {
        input_size: (32, 32),
        in_channels: 1,
        patch_size: 8,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        deconv_stages: 2,
        deconv_channels: 8,
        dataset_heads: vec![("synthetic".to_string(), 3)],
    }
}

fn rand_imgs(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = cfg.in_channels * cfg.input_size.0 * cfg.input_size.1;
    (0..count)
        .map(|_| {
            Tensor::new(
                vec![cfg.in_channels, cfg.input_size.0, cfg.input_size.1],
                (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
        })
        .collect()
}

#[test]
fn criterion_03_lora_identities() {
    let cfg = lora_cfg_model();
    let base: Model<f32> = Model::build(cfg.clone(), 3).unwrap();
    let mut injected = base.clone();
    injected.lora_inject(LoraConfig::rank(4), 5).unwrap();

    // Zero-init equivalence on 100 random inputs.
    let imgs = rand_imgs(&cfg, 100, 30);
    let a = base.forward_batch(&imgs, "synthetic").unwrap();
    let b = injected.forward_batch(&imgs, "synthetic").unwrap();
    let mut max_abs = 0.0f32;
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.data.data().iter().zip(y.data.data()) {
            max_abs = max_abs.max((p - q).abs());
        }
    }
    assert!(max_abs <= 1e-6, "zero-init diff {max_abs}");

    // Merge equivalence after perturbing the adapters ("post-training").
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let names: Vec<String> = injected
        .named_params()
        .iter()
        .filter(|(n, _)| n.contains(".lora."))
        .map(|(n, _)| n.clone())
        .collect();
    for n in names {
        let t = injected.param_mut(&n).unwrap();
        *t = Tensor::normal(t.shape().to_vec(), 0.05, &mut rng);
    }
    let unmerged: Model<f64> = injected.cast();
    let mut merged = unmerged.clone();
    merged.lora_merge().unwrap();
    let imgs64: Vec<Tensor<f64>> = imgs.iter().map(|t| t.cast()).collect();
    let a = unmerged.forward_batch(&imgs64, "synthetic").unwrap();
    let b = merged.forward_batch(&imgs64, "synthetic").unwrap();
    let mut max_rel = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.data.data().iter().zip(y.data.data()) {
            let rel = (p - q).abs() / p.abs().max(q.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    assert!(max_rel <= 1e-5, "merge rel diff {max_rel:.3e}");
    pass(
        3,
        &format!("zero-init max abs {max_abs:.1e} (≤1e-6), merge max rel {max_rel:.1e} (≤1e-5), 100 inputs each"),
    );
}

// ---------------------------------------------------------------------------
// 4. Freeze correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_freeze_correctness() {
    let cfg = lora_cfg_model();
    let mut model: Model<f32> = Model::build(cfg.clone(), 9).unwrap();
    model.lora_inject(LoraConfig::rank(4), 10).unwrap();
    let frozen: BTreeMap<String, Vec<u32>> = model
        .named_params()
        .into_iter()
        .filter(|(n, _)| !model.is_trainable(n))
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert!(!frozen.is_empty());

    let imgs = rand_imgs(&cfg, 2, 40);
    let gt = LandmarkSet::all_visible(vec![(8.0, 8.0), (16.0, 20.0), (24.0, 10.0)]);
    let (hm, w) = heatmap::encode::<f32>(
        &gt,
        GaussianSpec::default(),
        cfg.heatmap_grid(),
        cfg.stride() as f64,
    );
    let gts = vec![hm.clone(), hm];
    let ws = vec![w.clone(), w];
    let mut state = OptimState::new();
    let ocfg = OptimConfig::default();
    for _ in 0..100 {
        let (_, grads) = model
            .loss_and_grads(&imgs, &gts, &ws, "synthetic")
            .unwrap();
        adamw_step(&mut model, &grads, &mut state, &ocfg);
    }
    assert_eq!(state.step, 100);
    for (name, bits) in &frozen {
        let now: Vec<u32> = model
            .param(name)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(&now, bits, "frozen parameter {name} changed");
    }
    // And the trainable set did move.
    let moved = model
        .named_params()
        .iter()
        .any(|(n, t)| model.is_trainable(n) && !frozen.contains_key(n) && t.data().iter().any(|v| *v != 0.0));
    assert!(moved);
    pass(
        4,
        &format!("{} frozen tensors bit-identical after 100 lora_only steps", frozen.len()),
    );
}

// ---------------------------------------------------------------------------
// 5. Overfit fixture
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_overfit_fixture() {
    let started = Instant::now();
    let cfg = ModelConfig {
        input_size: (64, 64),
        in_channels: 1,
        patch_size: 8,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        deconv_stages: 2,
        deconv_channels: 16,
        dataset_heads: vec![("synthetic".to_string(), 4)],
    };
    let synth = synth_generate(5, 8, 4, (64, 64)).unwrap();
    let ds = LoadedDataset::from_synth(&synth);
    let mut model: Model<f32> = Model::build(cfg.clone(), 0).unwrap();

    // Fixed batch of all 8 images, no augmentation: pure memorization.
    let sigma = 2.0;
    let mut imgs = Vec::new();
    let mut gts = Vec::new();
    let mut ws = Vec::new();
    for (img, rec) in ds.images.iter().zip(&ds.manifest.images) {
        let (hm, w) = heatmap::encode::<f32>(
            &rec.landmarks,
            GaussianSpec { sigma },
            cfg.heatmap_grid(),
            cfg.stride() as f64,
        );
        imgs.push(img.clone());
        gts.push(hm);
        ws.push(w);
    }

    let ocfg = OptimConfig {
        base_lr: 2e-3,
        layer_decay: 1.0,
        ..OptimConfig::default()
    };
    let mut state = OptimState::new();
    let mut losses: Vec<f64> = Vec::new();
    let mut final_mre = f64::INFINITY;
    let mut steps_used = 0;
    for step in 0..2000usize {
        let (loss, grads) = model.loss_and_grads(&imgs, &gts, &ws, "synthetic").unwrap();
        assert!(loss.is_finite(), "loss diverged at step {step}");
        adamw_step(&mut model, &grads, &mut state, &ocfg);
        losses.push(loss as f64);
        steps_used = step + 1;
        if step >= 100 && step % 25 == 0 {
            let report = evaluate(&model, &ds).unwrap();
            final_mre = report.mre.mean; // 1.0 mm/px spacing => mm == px
            if final_mre < 2.0 {
                break;
            }
        }
    }
    assert!(final_mre < 2.0, "train MRE {final_mre:.3} px after {steps_used} steps");

    // Smoothed (trailing-100) loss monotone decreasing after step 100.
    let smoothed: Vec<f64> = (99..losses.len())
        .map(|i| losses[i - 99..=i].iter().sum::<f64>() / 100.0)
        .collect();
    for pair in smoothed.windows(2).skip(1) {
        assert!(
            pair[1] <= pair[0],
            "smoothed loss rose: {} -> {}",
            pair[0],
            pair[1]
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 300, "overfit run took {elapsed:?}");
    pass(
        5,
        &format!("train MRE {final_mre:.3} px in {steps_used} steps, smoothed loss monotone, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// 6. Metric oracle vs paper
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_sdr_avg_vs_published() {
    // MedSapiens rows of Tables 1-3: ([sdr triple], published SDR_avg).
    // The chest LoRA row is excluded: its printed average (77.41) is not the
    // mean of its own printed triple (75.89), a source inconsistency.
    let rows: [(&str, [f64; 3], f64); 8] = [
        ("hand generalist", [95.87, 99.70, 100.0], 98.52),
        ("head generalist", [82.29, 92.80, 97.33], 90.81),
        ("hand LoRA", [96.32, 99.74, 100.0], 98.68),
        ("head LoRA", [83.14, 92.88, 97.09], 91.04),
        ("legs generalist", [48.08, 85.08, 97.15], 76.77),
        ("chest generalist", [54.00, 83.67, 93.33], 77.00),
        ("legs LoRA", [53.54, 87.77, 97.54], 79.61),
        ("teeth few-shot", [65.66, 87.31, 94.21], 82.39),
    ];
    // Anchor rows reproduce within ±0.005; the remaining published averages
    // were truncated rather than rounded, so the triples bound them by ±0.01.
    let anchors = ["head generalist", "hand generalist", "teeth few-shot"];
    for (name, triple, published) in rows {
        let avg = sdr_avg(&triple);
        let tol = if anchors.contains(&name) { 0.005 } else { 0.01 };
        assert!(
            (avg - published).abs() <= tol,
            "{name}: computed {avg:.4} vs published {published} (tol {tol})"
        );
    }
    pass(6, "8 published MedSapiens SDR_avg rows reproduced (anchors ±0.005)");
}

// ---------------------------------------------------------------------------
// 7. Metric analytics
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_metric_analytics() {
    // Δ = (3, 4) px at 0.1 mm/px is exactly 0.5 mm.
    let pred = LandmarkSet::all_visible(vec![(13.0, 24.0)]);
    let gt = LandmarkSet::all_visible(vec![(10.0, 20.0)]);
    let errs = radial_errors(&pred, &gt, Spacing::MmPerPx(0.1, 0.1));
    assert_eq!(errs.values, vec![0.5]);
    assert_eq!(errs.unit, Unit::Mm);

    // SDR monotone in threshold over 1000 random error sets.
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let errs = RadialErrors {
            unit: Unit::Mm,
            values,
            n_images: 1,
        };
        let mut prev = -1.0;
        for t in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let s = sdr(&errs, t).unwrap();
            assert!(s >= prev, "SDR not monotone: {prev} > {s} at {t}");
            prev = s;
        }
    }

    // Wrist rule: 50 mm across a 100 px landmark distance = 0.5 mm/px.
    let spec = ImageSpec {
        path: "x.png".into(),
        width: 256,
        height: 256,
        spacing: SpacingModel::LandmarkNormalized {
            a: 0,
            b: 1,
            distance_mm: 50.0,
        },
    };
    let gt = LandmarkSet::all_visible(vec![(50.0, 100.0), (150.0, 100.0)]);
    match effective_spacing(&spec, &gt).unwrap() {
        Spacing::MmPerPx(sx, sy) => {
            assert!((sx - 0.5).abs() < 1e-12 && (sy - 0.5).abs() < 1e-12);
        }
        other => panic!("unexpected spacing {other:?}"),
    }
    pass(7, "3-4-5 px @0.1 mm/px = 0.5 mm exact; SDR monotone ×1000; wrist rule 0.5 mm/px");
}

// ---------------------------------------------------------------------------
// 8. Determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_determinism() {
    let synth = synth_generate(8, 4, 3, (32, 32)).unwrap();
    let ds = LoadedDataset::from_synth(&synth);
    let cfg = lora_cfg_model();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 17,
        augment: AugmentConfig::default(), // augmentation on: still seeded
        ..TrainConfig::default()
    };
    let run = |dir: &std::path::Path| -> Vec<u8> {
        let mut model: Model<f32> = Model::build(cfg.clone(), 1).unwrap();
        train(&mut model, &[ds.clone()], &[], &tc, dir).unwrap();
        std::fs::read(dir.join("best.ckpt")).unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let bytes1 = run(d1.path());
    let bytes2 = run(d2.path());
    assert_eq!(bytes1, bytes2, "best.ckpt differs across identical runs");

    // Checkpoint save/load round-trips bit-exactly.
    let (model, _) = load_checkpoint(d1.path().join("best.ckpt")).unwrap();
    let resaved = d1.path().join("resaved.ckpt");
    save_checkpoint(&model, &resaved, None).unwrap();
    let (model2, _) = load_checkpoint(&resaved).unwrap();
    for ((n1, t1), (n2, t2)) in model.named_params().iter().zip(model2.named_params().iter()) {
        assert_eq!(n1, n2);
        let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2, "{n1} not bit-exact through save/load");
    }
    pass(8, "two seeded runs → bit-identical best.ckpt; save/load bit-exact");
}

// ---------------------------------------------------------------------------
// 9. Augmentation laws
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_augmentation_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(9009);
    let flip_pairs = [(0usize, 1usize)];
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(8..32usize), rng.gen_range(8..32usize));
        let img = Tensor::new(
            vec![1, h, w],
            (0..h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        );
        // Quarter-pixel coordinates are exactly representable, so the mirror
        // map (w−1)−x is an exact involution.
        let mut pt = || {
            (
                rng.gen_range(0..4 * w as u32) as f64 / 4.0,
                rng.gen_range(0..4 * h as u32) as f64 / 4.0,
            )
        };
        let lms = LandmarkSet::new(vec![pt(), pt(), pt()], vec![true, true, rng.gen()]);

        // flip ∘ flip = identity, exactly.
        let (img1, lms1) = augment::flip_h(&img, &lms, &flip_pairs);
        let (img2, lms2) = augment::flip_h(&img1, &lms1, &flip_pairs);
        assert_eq!(img2, img);
        assert_eq!(lms2, lms);

        // Photometric and dropout never touch the landmark arrays.
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment::compose(
            &cfg,
            &Sample {
                img: img.clone(),
                landmarks: lms.clone(),
            },
            &flip_pairs,
            &mut rng,
        );
        assert_eq!(out.landmarks, lms);
    }
    pass(9, "flip involution exact ×100; photometric/dropout leave landmarks bit-identical");
}

// ---------------------------------------------------------------------------
// 10. Few-shot protocol
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_few_shot_protocol() {
    let synth = synth_generate(12, 22, 3, (48, 48)).unwrap();
    let ds = LoadedDataset::from_synth(&synth);
    assert_eq!(ds.manifest.patient_ids().len(), 22);
    let (train_ds, val_ds) = few_shot_split(&ds, 3, 77).unwrap();
    let tp: std::collections::BTreeSet<String> =
        train_ds.manifest.patient_ids().into_iter().collect();
    let vp: std::collections::BTreeSet<String> =
        val_ds.manifest.patient_ids().into_iter().collect();
    assert_eq!((tp.len(), vp.len()), (3, 19));
    assert!(tp.is_disjoint(&vp));
    // Stable per seed.
    for _ in 0..3 {
        let (t2, v2) = few_shot_split(&ds, 3, 77).unwrap();
        assert_eq!(t2.manifest.patient_ids(), train_ds.manifest.patient_ids());
        assert_eq!(v2.manifest.patient_ids(), val_ds.manifest.patient_ids());
    }
    pass(10, "22 patients split 3/19, patient-disjoint, stable per seed");
}
