//! Latent diffusion: noise schedule, forward/reverse process, the
//! noise-prediction U-Net with time embedding, DDIM inversion, and
//! extraction of the U-Net encoder features that feed the registration
//! network's upper stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autoenc::{encode_on_tape, AutoencoderParams, LatentGrid};
use crate::error::{CoreError, Result};
use crate::image::Image2D;
use crate::tensor::{Adam, BoundParams, ParamSet, Tape, Tensor, Var};

/// Per-step noise variances and their running products.
/// `beta[t-1]` is the step-t variance; `alpha_bar[t-1]` the product of
/// (1 - beta_s) for s <= t; `sigma[t-1] = sqrt(beta_t)` drives the
/// stochastic reverse step.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// alpha_bar at step t with the convention alpha_bar(0) = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma_at(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(CoreError::invalid(format!(
                "step {t} outside schedule range 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Linear beta ramp with running-product alpha_bar. `beta_start = 0` is
/// admitted as a degenerate test schedule (alpha_bar stays 1).
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(CoreError::invalid("make_schedule: T must be >= 1"));
    }
    if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_start > beta_end
    {
        return Err(CoreError::invalid(
            "make_schedule: need 0 <= beta_start <= beta_end < 1",
        ));
    }
    let mut beta = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let frac = if t_max == 1 { 0.0 } else { t as f64 / (t_max - 1) as f64 };
        beta.push(beta_start + frac * (beta_end - beta_start));
    }
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { t_max, beta, alpha_bar, sigma })
}

/// A latent with its diffusion step index (0 = clean).
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub z: LatentGrid,
    pub t: usize,
}

/// Closed-form forward sample: z_t = sqrt(a_t) z0 + sqrt(1 - a_t) eps.
pub fn q_sample(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(CoreError::shape("q_sample: eps must be shaped like z0"));
    }
    let ab = schedule.alpha_bar_at(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| sa * z + sn * e).collect();
    Ok(Tensor::new(z0.shape(), data))
}

/// Learned reverse mean, mu = (z_t - beta_t/sqrt(1-a_t) * eps_hat) / sqrt(1-beta_t).
/// A zero-beta step is the identity.
pub fn reverse_mean(
    z_t: &LatentGrid,
    t: usize,
    eps_hat: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    schedule.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(CoreError::shape("reverse_mean: eps_hat must be shaped like z_t"));
    }
    let beta = schedule.beta_at(t);
    if beta == 0.0 {
        return Ok(z_t.clone());
    }
    let ab = schedule.alpha_bar_at(t);
    let denom = (1.0 - ab).sqrt();
    let pref = 1.0 / (1.0 - beta).sqrt();
    let corr = beta / denom;
    let data =
        z_t.data().iter().zip(eps_hat.data()).map(|(z, e)| pref * (z - corr * e)).collect();
    Ok(Tensor::new(z_t.shape(), data))
}

/// Configuration of the denoising U-Net and its schedule.
#[derive(Clone, Debug)]
pub struct DiffusionConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// latent channels the U-Net sees
    pub latent_channels: usize,
    /// constant channel width of every encoder block
    pub unet_width: usize,
    /// number of encoder levels n
    pub levels: usize,
    /// convolution layers per encoder block
    pub layers_per_block: usize,
    /// sinusoidal time embedding dimension
    pub time_dim: usize,
    /// encoder levels whose features feed the registration network
    pub feature_layers: Vec<usize>,
    /// diffusion step at which features are extracted
    pub feature_t: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            latent_channels: 4,
            unet_width: 64,
            levels: 4,
            layers_per_block: 3,
            time_dim: 128,
            feature_layers: vec![1, 3],
            feature_t: 1,
        }
    }
}

/// U-Net weights and the schedule they were trained under.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub config: DiffusionConfig,
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
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

pub fn init_denoiser(config: DiffusionConfig, seed: u64) -> Result<DenoiserParams> {
    let schedule = make_schedule(config.t_max, config.beta_start, config.beta_end)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let w = config.unet_width;
    conv_init(&mut params, "unet.stem", config.latent_channels, w, 3, &mut rng);
    for lvl in 0..config.levels {
        // time projection per level
        let std = (2.0 / config.time_dim as f64).sqrt();
        params.insert(
            &format!("unet.enc{lvl}.temb.w"),
            Tensor::randn(&[config.time_dim, w], std, &mut rng),
        );
        params.insert(&format!("unet.enc{lvl}.temb.b"), Tensor::zeros(&[w]));
        for layer in 0..config.layers_per_block {
            conv_init(&mut params, &format!("unet.enc{lvl}.c{layer}"), w, w, 3, &mut rng);
        }
        if lvl + 1 < config.levels {
            conv_init(&mut params, &format!("unet.down{lvl}"), w, w, 3, &mut rng);
        }
    }
    for lvl in (0..config.levels - 1).rev() {
        conv_init(&mut params, &format!("unet.up{lvl}"), w, w, 3, &mut rng);
        conv_init(&mut params, &format!("unet.dec{lvl}"), 2 * w, w, 3, &mut rng);
    }
    conv_init(&mut params, "unet.out", w, config.latent_channels, 3, &mut rng);
    Ok(DenoiserParams { config, params, schedule })
}

/// Sinusoidal time embedding of dimension `dim`.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000.0f64.ln()) * k as f64 / half as f64).exp();
        data[2 * k] = (t as f64 * freq).sin();
        data[2 * k + 1] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, dim], data)
}

/// Encoder pass: returns the per-level feature vars (after each block's
/// convolutions, before downsampling). Level i lives at 1/2^i of the
/// latent resolution.
pub fn unet_encoder_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &DiffusionConfig,
    z: Var,
    t: usize,
) -> Vec<Var> {
    let temb = tape.leaf(time_embedding(t, cfg.time_dim));
    let temb = tape.silu(temb);
    let mut h = conv_apply(tape, p, "unet.stem", z, 1, 1);
    let mut feats = Vec::with_capacity(cfg.levels);
    for lvl in 0..cfg.levels {
        let tw = p.var(&format!("unet.enc{lvl}.temb.w"));
        let tb = p.var(&format!("unet.enc{lvl}.temb.b"));
        let tproj = tape.linear(temb, tw, Some(tb));
        let tvec = {
            let n = tape.shape(tproj)[1];
            let idx = std::sync::Arc::new((0..n as i64).collect::<Vec<i64>>());
            tape.index_map(tproj, idx, &[n])
        };
        for layer in 0..cfg.layers_per_block {
            h = conv_apply(tape, p, &format!("unet.enc{lvl}.c{layer}"), h, 1, 1);
            if layer == 0 {
                h = tape.add_chan_bias(h, tvec);
            }
            h = tape.silu(h);
        }
        feats.push(h);
        if lvl + 1 < cfg.levels {
            h = conv_apply(tape, p, &format!("unet.down{lvl}"), h, 2, 1);
            h = tape.silu(h);
        }
    }
    feats
}

/// Full U-Net: noise prediction eps_hat shaped like the input latent.
pub fn unet_forward_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &DiffusionConfig,
    z: Var,
    t: usize,
) -> Var {
    let feats = unet_encoder_on_tape(tape, p, cfg, z, t);
    let mut h = *feats.last().unwrap();
    for lvl in (0..cfg.levels - 1).rev() {
        h = tape.upsample2(h);
        h = conv_apply(tape, p, &format!("unet.up{lvl}"), h, 1, 1);
        h = tape.silu(h);
        h = tape.concat(h, feats[lvl], 0);
        h = conv_apply(tape, p, &format!("unet.dec{lvl}"), h, 1, 1);
        h = tape.silu(h);
    }
    conv_apply(tape, p, "unet.out", h, 1, 1)
}

fn check_latent_geometry(cfg: &DiffusionConfig, z: &LatentGrid) -> Result<()> {
    let s = z.shape();
    if s.len() != 3 || s[0] != cfg.latent_channels {
        return Err(CoreError::shape(format!(
            "latent shape {s:?} incompatible with {} channels",
            cfg.latent_channels
        )));
    }
    let div = 1 << (cfg.levels - 1);
    if s[1] % div != 0 || s[2] % div != 0 {
        return Err(CoreError::shape(format!(
            "latent sides {}x{} must divide by {div} for {} levels",
            s[1], s[2], cfg.levels
        )));
    }
    Ok(())
}

/// Deterministic noise estimate for one state.
pub fn denoiser_predict(state: &DiffusionState, dp: &DenoiserParams) -> Result<LatentGrid> {
    dp.schedule.check_t(state.t)?;
    check_latent_geometry(&dp.config, &state.z)?;
    let mut tape = Tape::new();
    let bound = dp.params.bind(&mut tape);
    let z = tape.leaf(state.z.clone());
    let out = unet_forward_on_tape(&mut tape, &bound, &dp.config, z, state.t);
    Ok(tape.value(out).clone())
}

/// One stochastic reverse step: z_{t-1} = mu + sigma_t * noise.
pub fn ddpm_reverse_step(
    state: &DiffusionState,
    dp: &DenoiserParams,
    noise: &LatentGrid,
) -> Result<DiffusionState> {
    let eps_hat = denoiser_predict(state, dp)?;
    let mu = reverse_mean(&state.z, state.t, &eps_hat, &dp.schedule)?;
    let sigma = dp.schedule.sigma_at(state.t);
    if noise.shape() != mu.shape() {
        return Err(CoreError::shape("ddpm_reverse_step: noise shape mismatch"));
    }
    let data = mu.data().iter().zip(noise.data()).map(|(m, n)| m + sigma * n).collect();
    Ok(DiffusionState { z: Tensor::new(mu.shape(), data), t: state.t - 1 })
}

fn ddim_combine(
    z: &LatentGrid,
    eps: &LatentGrid,
    ab_from: f64,
    ab_to: f64,
) -> LatentGrid {
    // z0_hat = (z - sqrt(1-ab_from) eps) / sqrt(ab_from)
    // out    = sqrt(ab_to) z0_hat + sqrt(1-ab_to) eps
    let sf = ab_from.sqrt();
    let nf = (1.0 - ab_from).sqrt();
    let st = ab_to.sqrt();
    let nt = (1.0 - ab_to).sqrt();
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(zv, ev)| {
            let z0 = (zv - nf * ev) / sf;
            st * z0 + nt * ev
        })
        .collect();
    Tensor::new(z.shape(), data)
}

/// Deterministic forward traversal to step `t_target` using the model's own
/// noise predictions (no sampled noise).
pub fn ddim_invert(
    z0: &LatentGrid,
    t_target: usize,
    dp: &DenoiserParams,
) -> Result<DiffusionState> {
    dp.schedule.check_t(t_target)?;
    check_latent_geometry(&dp.config, z0)?;
    let mut z = z0.clone();
    for s in 1..=t_target {
        // evaluate the model at the step being entered
        let eps = denoiser_predict(&DiffusionState { z: z.clone(), t: s }, dp)?;
        let ab_prev = dp.schedule.alpha_bar_at(s - 1);
        let ab_next = dp.schedule.alpha_bar_at(s);
        z = ddim_combine(&z, &eps, ab_prev, ab_next);
    }
    Ok(DiffusionState { z, t: t_target })
}

/// Deterministic DDIM denoising from the state's step down to 0.
pub fn ddim_denoise(state: &DiffusionState, dp: &DenoiserParams) -> Result<LatentGrid> {
    let mut z = state.z.clone();
    for s in (1..=state.t).rev() {
        let eps = denoiser_predict(&DiffusionState { z: z.clone(), t: s }, dp)?;
        let ab_from = dp.schedule.alpha_bar_at(s);
        let ab_to = dp.schedule.alpha_bar_at(s - 1);
        z = ddim_combine(&z, &eps, ab_from, ab_to);
    }
    Ok(z)
}

/// Training options for the denoiser.
#[derive(Clone, Copy, Debug)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, seed: 0 }
    }
}

/// Noise-prediction training: minimize E||eps - eps_w(z_t, t)||^2 with
/// uniform t. Returns the best-validation checkpoint and the loss curve.
pub fn train_ldm(
    latents: &[LatentGrid],
    val_latents: &[LatentGrid],
    config: DiffusionConfig,
    tc: LdmTrainConfig,
) -> Result<(DenoiserParams, crate::autoenc::TrainingCurve)> {
    if latents.is_empty() {
        return Err(CoreError::invalid("train_ldm: empty latent set"));
    }
    let mut dp = init_denoiser(config.clone(), tc.seed)?;
    for z in latents.iter().chain(val_latents) {
        check_latent_geometry(&config, z)?;
    }
    let mut opt = Adam::new(&dp.params, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x1d);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut curve = crate::autoenc::TrainingCurve::new();
    let mut best: Option<(f64, ParamSet)> = None;
    for epoch in 0..tc.epochs {
        crate::autoenc::shuffle(&mut order, &mut rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let t = rng.gen_range(1..=config.t_max);
            let mut eps = Tensor::zeros(latents[i].shape());
            for v in eps.data_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            let z_t = q_sample(&latents[i], t, &eps, &dp.schedule)?;
            let mut tape = Tape::new();
            let bound = dp.params.bind(&mut tape);
            let zv = tape.leaf(z_t);
            let pred = unet_forward_on_tape(&mut tape, &bound, &config, zv, t);
            let target = tape.leaf(eps);
            let loss = tape.mse(pred, target);
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "ldm loss became non-finite at epoch {epoch}"
                )));
            }
            train_loss += lv;
            let mut grads = tape.backward(loss);
            let gvec: Vec<Option<Tensor>> =
                bound.vars().iter().map(|&v| grads.take(v)).collect();
            opt.step(&mut dp.params, &gvec);
        }
        train_loss /= latents.len() as f64;
        let val_loss = if val_latents.is_empty() {
            train_loss
        } else {
            ldm_validation_loss(&dp, val_latents, tc.seed)?
        };
        curve.push((epoch, train_loss, val_loss));
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, dp.params.clone()));
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((DenoiserParams { config, params: best_params, schedule: dp.schedule }, curve))
}

/// Validation loss with per-index frozen (t, eps) draws so epochs compare
/// the same integrand.
pub fn ldm_validation_loss(
    dp: &DenoiserParams,
    latents: &[LatentGrid],
    seed: u64,
) -> Result<f64> {
    let mut acc = 0.0;
    for (i, z0) in latents.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a ^ (i as u64) << 8);
        let t = rng.gen_range(1..=dp.config.t_max);
        let mut eps = Tensor::zeros(z0.shape());
        for v in eps.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let z_t = q_sample(z0, t, &eps, &dp.schedule)?;
        let pred = denoiser_predict(&DiffusionState { z: z_t, t }, dp)?;
        let n = eps.len() as f64;
        acc += pred
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
    }
    Ok(acc / latents.len() as f64)
}

/// Per-level concatenated features f_M^i (+) f_F^i for the requested encoder
/// levels, in ascending level order (finer levels first).
pub fn extract_features(
    moving: &Image2D,
    fixed: &Image2D,
    t: usize,
    layer_set: &[usize],
    dp: &DenoiserParams,
    ae: &AutoencoderParams,
) -> Result<Vec<Tensor>> {
    if layer_set.is_empty() {
        return Err(CoreError::invalid("extract_features: empty layer set"));
    }
    let mut layers = layer_set.to_vec();
    layers.sort_unstable();
    layers.dedup();
    for &l in &layers {
        if l < 1 || l > dp.config.levels {
            return Err(CoreError::invalid(format!(
                "extract_features: layer {l} outside 1..={}",
                dp.config.levels
            )));
        }
    }
    let feats_m = image_features(moving, t, &layers, dp, ae)?;
    let feats_f = image_features(fixed, t, &layers, dp, ae)?;
    let mut out = Vec::with_capacity(layers.len());
    for (fm, ff) in feats_m.into_iter().zip(feats_f) {
        let sm = fm.shape().to_vec();
        let mut data = fm.into_data();
        data.extend_from_slice(ff.data());
        out.push(Tensor::new(&[2 * sm[0], sm[1], sm[2]], data));
    }
    Ok(out)
}

fn image_features(
    image: &Image2D,
    t: usize,
    layers: &[usize],
    dp: &DenoiserParams,
    ae: &AutoencoderParams,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound_ae = ae.params.bind(&mut tape);
    let img = tape.leaf(image.to_tensor());
    let z0 = encode_on_tape(&mut tape, &bound_ae, &ae.config, img);
    let z0_val = tape.value(z0).clone();
    // deterministic inversion runs outside the tape (frozen weights)
    let state = ddim_invert(&z0_val, t, dp)?;
    let bound = dp.params.bind(&mut tape);
    let zt = tape.leaf(state.z);
    let feats = unet_encoder_on_tape(&mut tape, &bound, &dp.config, zt, t);
    Ok(layers.iter().map(|&l| tape.value(feats[l - 1]).clone()).collect())
}
