//! Convolutional autoencoder to the quarter-resolution latent space.
//!
//! The encoder E(.) is the workhorse of the rest of the pipeline: diffusion
//! runs on its latents and the latent similarity loss differentiates through
//! it (with frozen weights). Two stride-2 stages with one residual block
//! each; reconstruction-MSE training with an optional vector-quantization
//! bottleneck.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::image::Image2D;
use crate::tensor::{Adam, BoundParams, ParamSet, Tape, Tensor, Var};

/// Multi-channel feature raster at 1/4 image resolution, shaped [C,H,W].
pub type LatentGrid = Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AutoencoderConfig {
    pub channels: usize,
    pub latent_channels: usize,
    pub vq_enabled: bool,
    pub codebook_size: usize,
    pub commitment: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            latent_channels: 4,
            vq_enabled: false,
            codebook_size: 256,
            commitment: 0.25,
        }
    }
}

/// Encoder/decoder weights plus the config they were built with.
#[derive(Clone, Debug)]
pub struct AutoencoderParams {
    pub config: AutoencoderConfig,
    pub params: ParamSet,
}

fn conv_init<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    params.insert(&format!("{name}.w"), Tensor::randn(&[c_out, c_in, k, k], std, rng));
    params.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]));
}

fn conv_apply(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    tape.conv2d(x, w, Some(b), stride, pad)
}

fn res_block_init<R: Rng>(params: &mut ParamSet, name: &str, c: usize, rng: &mut R) {
    conv_init(params, &format!("{name}.c1"), c, c, 3, rng);
    conv_init(params, &format!("{name}.c2"), c, c, 3, rng);
}

fn res_block_apply(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Var {
    let h = conv_apply(tape, p, &format!("{name}.c1"), x, 1, 1);
    let h = tape.silu(h);
    let h = conv_apply(tape, p, &format!("{name}.c2"), h, 1, 1);
    tape.add(h, x)
}

pub fn init_autoencoder(config: AutoencoderConfig, seed: u64) -> AutoencoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let w = config.channels;
    let zc = config.latent_channels;
    // encoder: two stride-2 stages, one residual block each
    conv_init(&mut params, "enc.down1", 1, w, 3, &mut rng);
    res_block_init(&mut params, "enc.res1", w, &mut rng);
    conv_init(&mut params, "enc.down2", w, w, 3, &mut rng);
    res_block_init(&mut params, "enc.res2", w, &mut rng);
    conv_init(&mut params, "enc.out", w, zc, 3, &mut rng);
    // decoder mirrors the encoder with nearest upsampling
    conv_init(&mut params, "dec.in", zc, w, 3, &mut rng);
    res_block_init(&mut params, "dec.res1", w, &mut rng);
    conv_init(&mut params, "dec.up1", w, w, 3, &mut rng);
    res_block_init(&mut params, "dec.res2", w, &mut rng);
    conv_init(&mut params, "dec.up2", w, w, 3, &mut rng);
    conv_init(&mut params, "dec.out", w, 1, 3, &mut rng);
    if config.vq_enabled {
        params.insert("vq.codebook", Tensor::randn(&[config.codebook_size, zc], 0.5, &mut rng));
    }
    AutoencoderParams { config, params }
}

/// Encoder graph: [1,H,W] -> [zc, H/4, W/4]. When VQ is enabled the output
/// is the quantized latent with straight-through gradients.
pub fn encode_on_tape(tape: &mut Tape, p: &BoundParams, cfg: &AutoencoderConfig, img: Var) -> Var {
    let h = conv_apply(tape, p, "enc.down1", img, 2, 1);
    let h = tape.silu(h);
    let h = res_block_apply(tape, p, "enc.res1", h);
    let h = conv_apply(tape, p, "enc.down2", h, 2, 1);
    let h = tape.silu(h);
    let h = res_block_apply(tape, p, "enc.res2", h);
    let ze = conv_apply(tape, p, "enc.out", h, 1, 1);
    if cfg.vq_enabled {
        let (zq, _) = vq_quantize(tape, p, cfg, ze);
        zq
    } else {
        ze
    }
}

/// Nearest-codebook quantization with straight-through gradients.
/// Returns (quantized latent, flat codebook row per position).
pub fn vq_quantize(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &AutoencoderConfig,
    ze: Var,
) -> (Var, Vec<usize>) {
    let shape = tape.shape(ze).to_vec();
    let (zc, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(zc, cfg.latent_channels);
    let codebook = p.var("vq.codebook");
    let cb = tape.value(codebook).data().to_vec();
    let zed = tape.value(ze).data().to_vec();
    let hw = h * w;
    // nearest codebook entry per spatial position
    let mut assign = vec![0usize; hw];
    for pos in 0..hw {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..cfg.codebook_size {
            let mut d = 0.0;
            for c in 0..zc {
                let diff = zed[c * hw + pos] - cb[k * zc + c];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        assign[pos] = best;
    }
    // gather codebook rows into latent layout [zc, h, w]
    let mut idx = vec![0i64; zc * hw];
    for c in 0..zc {
        for pos in 0..hw {
            idx[c * hw + pos] = (assign[pos] * zc + c) as i64;
        }
    }
    let zq = tape.index_map(codebook, std::sync::Arc::new(idx), &[zc, h, w]);
    // straight-through: value of zq, gradient of ze
    let diff = tape.sub(zq, ze);
    let sg = tape.stop_grad(diff);
    let st = tape.add(sg, ze);
    (st, assign)
}

/// Decoder graph: [zc, H/4, W/4] -> [1, H, W].
pub fn decode_on_tape(tape: &mut Tape, p: &BoundParams, img: Var) -> Var {
    let h = conv_apply(tape, p, "dec.in", img, 1, 1);
    let h = tape.silu(h);
    let h = res_block_apply(tape, p, "dec.res1", h);
    let h = tape.upsample2(h);
    let h = conv_apply(tape, p, "dec.up1", h, 1, 1);
    let h = tape.silu(h);
    let h = res_block_apply(tape, p, "dec.res2", h);
    let h = tape.upsample2(h);
    let h = conv_apply(tape, p, "dec.up2", h, 1, 1);
    let h = tape.silu(h);
    conv_apply(tape, p, "dec.out", h, 1, 1)
}

fn check_encodable(h: usize, w: usize) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(CoreError::invalid(format!(
            "encode: image sides must divide by 4, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Deterministic encode of one image.
pub fn encode(image: &Image2D, ae: &AutoencoderParams) -> Result<LatentGrid> {
    check_encodable(image.height, image.width)?;
    let mut tape = Tape::new();
    let bound = ae.params.bind(&mut tape);
    let img = tape.leaf(image.to_tensor());
    let z = encode_on_tape(&mut tape, &bound, &ae.config, img);
    Ok(tape.value(z).clone())
}

/// Deterministic decode of one latent grid.
pub fn decode(latent: &LatentGrid, ae: &AutoencoderParams) -> Result<Image2D> {
    let s = latent.shape();
    if s.len() != 3 || s[0] != ae.config.latent_channels {
        return Err(CoreError::shape(format!(
            "decode: latent shape {s:?} does not match {} channels",
            ae.config.latent_channels
        )));
    }
    let mut tape = Tape::new();
    let bound = ae.params.bind(&mut tape);
    let z = tape.leaf(latent.clone());
    let img = decode_on_tape(&mut tape, &bound, z);
    Ok(Image2D::from_tensor(tape.value(img)))
}

/// Hyperparameters of one autoencoder training run.
#[derive(Clone, Copy, Debug)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { epochs: 8, lr: 1e-3, seed: 0 }
    }
}

/// One (epoch, train loss, val loss) row per epoch.
pub type TrainingCurve = Vec<(usize, f64, f64)>;

/// Reconstruction-MSE training; returns the checkpoint with the lowest
/// validation reconstruction error and the loss curve.
pub fn train_autoencoder(
    train: &[Image2D],
    val: &[Image2D],
    config: AutoencoderConfig,
    tc: AeTrainConfig,
) -> Result<(AutoencoderParams, TrainingCurve)> {
    if train.is_empty() {
        return Err(CoreError::invalid("train_autoencoder: empty training set"));
    }
    let mut ae = init_autoencoder(config, tc.seed);
    let mut opt = Adam::new(&ae.params, tc.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xAE);
    let mut curve = TrainingCurve::new();
    let mut best: Option<(f64, ParamSet)> = None;
    for epoch in 0..tc.epochs {
        shuffle(&mut order, &mut rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let bound = ae.params.bind(&mut tape);
            let img = tape.leaf(train[i].to_tensor());
            let loss = recon_loss(&mut tape, &bound, &config, img);
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "autoencoder loss became non-finite at epoch {epoch}"
                )));
            }
            train_loss += lv;
            let mut grads = tape.backward(loss);
            let gvec: Vec<Option<Tensor>> =
                bound.vars().iter().map(|&v| grads.take(v)).collect();
            opt.step(&mut ae.params, &gvec);
        }
        train_loss /= train.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { validation_mse(&ae, val)? };
        curve.push((epoch, train_loss, val_loss));
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, ae.params.clone()));
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((AutoencoderParams { config, params: best_params }, curve))
}

fn recon_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &AutoencoderConfig,
    img: Var,
) -> Var {
    if config.vq_enabled {
        let h = conv_apply(tape, bound, "enc.down1", img, 2, 1);
        let h = tape.silu(h);
        let h = res_block_apply(tape, bound, "enc.res1", h);
        let h = conv_apply(tape, bound, "enc.down2", h, 2, 1);
        let h = tape.silu(h);
        let h = res_block_apply(tape, bound, "enc.res2", h);
        let ze = conv_apply(tape, bound, "enc.out", h, 1, 1);
        let (zq, assign) = vq_quantize(tape, bound, config, ze);
        let recon = decode_on_tape(tape, bound, zq);
        let rloss = tape.mse(recon, img);
        // codebook and commitment terms
        let shape = tape.shape(ze).to_vec();
        let (zc, hh, ww) = (shape[0], shape[1], shape[2]);
        let hw = hh * ww;
        let codebook = bound.var("vq.codebook");
        let mut idx = vec![0i64; zc * hw];
        for c in 0..zc {
            for pos in 0..hw {
                idx[c * hw + pos] = (assign[pos] * zc + c) as i64;
            }
        }
        let e = tape.index_map(codebook, std::sync::Arc::new(idx), &[zc, hh, ww]);
        let ze_sg = tape.stop_grad(ze);
        let codebook_term = tape.mse(e, ze_sg);
        let e_sg = tape.stop_grad(e);
        let commit_term = tape.mse(ze, e_sg);
        let commit_scaled = tape.scale(commit_term, config.commitment);
        let t1 = tape.add(rloss, codebook_term);
        tape.add(t1, commit_scaled)
    } else {
        let z = encode_on_tape(tape, bound, config, img);
        let recon = decode_on_tape(tape, bound, z);
        tape.mse(recon, img)
    }
}

/// Mean reconstruction MSE over a batch with the current weights.
pub fn validation_mse(ae: &AutoencoderParams, images: &[Image2D]) -> Result<f64> {
    let mut acc = 0.0;
    for img in images {
        let mut tape = Tape::new();
        let bound = ae.params.bind(&mut tape);
        let iv = tape.leaf(img.to_tensor());
        let z = encode_on_tape(&mut tape, &bound, &ae.config, iv);
        let recon = decode_on_tape(&mut tape, &bound, z);
        let loss = tape.mse(recon, iv);
        acc += tape.scalar(loss);
    }
    Ok(acc / images.len() as f64)
}

pub(crate) fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_err, rel_err};

    fn tiny_cfg() -> AutoencoderConfig {
        AutoencoderConfig {
            channels: 6,
            latent_channels: 2,
            vq_enabled: false,
            codebook_size: 8,
            commitment: 0.25,
        }
    }

    fn test_image(seed: u64, side: usize) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::new(side, side, (0..side * side).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn latent_is_quarter_resolution() {
        let ae = init_autoencoder(tiny_cfg(), 0);
        let img = test_image(1, 128);
        let z = encode(&img, &ae).unwrap();
        assert_eq!(z.shape(), &[2, 32, 32]);
        let img64 = test_image(2, 64);
        let z = encode(&img64, &ae).unwrap();
        assert_eq!(z.shape(), &[2, 16, 16]);
    }

    #[test]
    fn rejects_sides_not_divisible_by_four() {
        let ae = init_autoencoder(tiny_cfg(), 0);
        let img = test_image(1, 66);
        assert!(encode(&img, &ae).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let ae = init_autoencoder(tiny_cfg(), 3);
        let img = test_image(4, 32);
        let a = encode(&img, &ae).unwrap();
        let b = encode(&img, &ae).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_of_zero_latent_is_finite_and_shaped() {
        let ae = init_autoencoder(tiny_cfg(), 5);
        let z = Tensor::zeros(&[2, 8, 8]);
        let img = decode(&z, &ae).unwrap();
        assert_eq!((img.height, img.width), (32, 32));
        assert!(img.all_finite());
    }

    #[test]
    fn decode_rejects_wrong_channel_count() {
        let ae = init_autoencoder(tiny_cfg(), 5);
        let z = Tensor::zeros(&[3, 8, 8]);
        assert!(decode(&z, &ae).is_err());
    }

    #[test]
    fn encode_input_gradient_matches_finite_differences() {
        let cfg = AutoencoderConfig {
            channels: 4,
            latent_channels: 2,
            vq_enabled: false,
            codebook_size: 8,
            commitment: 0.25,
        };
        let ae = init_autoencoder(cfg, 7);
        let img0 = test_image(8, 16).to_tensor();
        // fixed random probe over latent elements
        let probe: Vec<f64> = (0..2 * 4 * 4)
            .map(|i| 0.25 + ((i as u64 * 2654435761) % 89) as f64 / 89.0)
            .collect();
        let run = |xt: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let bound = ae.params.bind(&mut tape);
            let x = tape.leaf(xt.clone());
            let z = encode_on_tape(&mut tape, &bound, &cfg, x);
            let pv = tape.leaf(Tensor::new(&[2, 4, 4], probe.clone()));
            let prod = tape.mul(z, pv);
            let s = tape.sum_all(prod);
            tape.scalar(s)
        };
        let mut tape = Tape::new();
        let bound = ae.params.bind(&mut tape);
        let x = tape.leaf(img0.clone());
        let z = encode_on_tape(&mut tape, &bound, &cfg, x);
        let pv = tape.leaf(Tensor::new(&[2, 4, 4], probe.clone()));
        let prod = tape.mul(z, pv);
        let s = tape.sum_all(prod);
        let grads = tape.backward(s);
        let analytic = grads.get(x).unwrap().clone();
        let numeric = finite_diff_grad(&img0, run, 1e-6);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-4, "encode input-gradient rel err {err:.3e}");
        // perturbing one pixel visibly changes the latent
        let mut dimg = img0.clone();
        dimg.data_mut()[40] += 0.1;
        assert!(rel_err(run(&img0), run(&dimg)) > 0.0);
    }

    #[test]
    fn single_image_overfits() {
        // a smooth image that fits through the 4x bottleneck
        let side = 24;
        let img = Image2D::new(
            side,
            side,
            (0..side * side)
                .map(|i| {
                    let (y, x) = ((i / side) as f64, (i % side) as f64);
                    0.5 + 0.5 * (0.3 * y).sin() * (0.2 * x).cos()
                })
                .collect(),
        );
        let cfg = tiny_cfg();
        let tc = AeTrainConfig { epochs: 300, lr: 3e-3, seed: 1 };
        let (ae, curve) = train_autoencoder(&[img.clone()], &[img.clone()], cfg, tc).unwrap();
        let mse = validation_mse(&ae, &[img]).unwrap();
        assert!(mse < 1e-3, "memorization failed: mse {mse:.2e}");
        assert_eq!(curve.len(), 300);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let imgs = vec![test_image(10, 16)];
        let cfg = tiny_cfg();
        let init = init_autoencoder(cfg, 2);
        let tc = AeTrainConfig { epochs: 2, lr: 0.0, seed: 2 };
        let (ae, _) = train_autoencoder(&imgs, &[], cfg, tc).unwrap();
        assert_eq!(init.params.bit_hash(), ae.params.bit_hash());
    }

    #[test]
    fn loss_trend_decreases_over_seeds() {
        // epoch-k loss <= epoch-1 loss on average over 5 seeds
        let mut first = 0.0;
        let mut last = 0.0;
        for seed in 0..5 {
            let imgs: Vec<Image2D> = (0..4).map(|i| test_image(100 + seed * 7 + i, 16)).collect();
            let cfg = tiny_cfg();
            let tc = AeTrainConfig { epochs: 6, lr: 1e-3, seed };
            let (_, curve) = train_autoencoder(&imgs, &[], cfg, tc).unwrap();
            first += curve.first().unwrap().1;
            last += curve.last().unwrap().1;
        }
        assert!(last <= first, "training loss did not trend down: {first:.4} -> {last:.4}");
    }

    #[test]
    fn vq_latents_live_on_the_codebook() {
        let cfg = AutoencoderConfig {
            channels: 4,
            latent_channels: 2,
            vq_enabled: true,
            codebook_size: 8,
            commitment: 0.25,
        };
        let ae = init_autoencoder(cfg, 11);
        let img = test_image(12, 16);
        let z = encode(&img, &ae).unwrap();
        let cb = ae.params.get("vq.codebook");
        let hw = 4 * 4;
        for pos in 0..hw {
            let vec: Vec<f64> = (0..2).map(|c| z.data()[c * hw + pos]).collect();
            let found = (0..8).any(|k| {
                (0..2).all(|c| (cb.data()[k * 2 + c] - vec[c]).abs() < 1e-12)
            });
            assert!(found, "latent vector at {pos} not on the codebook");
        }
    }

    #[test]
    fn vq_training_step_runs() {
        let cfg = AutoencoderConfig {
            channels: 4,
            latent_channels: 2,
            vq_enabled: true,
            codebook_size: 8,
            commitment: 0.25,
        };
        let imgs = vec![test_image(13, 16)];
        let tc = AeTrainConfig { epochs: 3, lr: 1e-3, seed: 3 };
        let (ae, curve) = train_autoencoder(&imgs, &[], cfg, tc).unwrap();
        assert!(curve.iter().all(|(_, t, v)| t.is_finite() && v.is_finite()));
        assert!(ae.params.contains("vq.codebook"));
    }
}
