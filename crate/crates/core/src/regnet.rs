//! The registration network: an upper stream that adapts diffusion-encoder
//! features, a lower stream of window-attention blocks over the raw image
//! pair, per-level cross-attention fusion, and an upsampling decoder that
//! emits the dense displacement field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    gfe_block, init_gfe_params, init_lgca_params, init_patch_merge_params, lgca_block,
    patch_merge, raster_from_tokens, tokens_from_raster, AttentionConfig,
};
use crate::error::{CoreError, Result};
use crate::image::{DisplacementField2D, Image2D};
use crate::tensor::{BoundParams, ParamSet, Tape, Tensor, Var};

/// Which stream a feature pyramid came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    Latent,
    Global,
}

/// Ordered multi-resolution feature rasters (finest first).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub tag: StreamTag,
}

/// Architecture of the registration network.
#[derive(Clone, Debug)]
pub struct RegNetConfig {
    /// encoder levels; level i sits at 1/(patch_stride * 2^i) resolution
    pub levels: usize,
    /// channel width per level
    pub widths: Vec<usize>,
    /// attention heads per level
    pub heads: Vec<usize>,
    pub patch_stride: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub use_relative_bias: bool,
    /// channels of the full-resolution low-level branch
    pub lowlevel_width: usize,
    /// ablation: feed diffusion features through the upper stream
    pub use_ldmfe: bool,
    /// ablation: cross-attention fusion (true) or concat + linear (false)
    pub use_lgca: bool,
    /// channel count of each incoming latent feature group
    pub upper_in_channels: usize,
    /// encoder levels of the diffusion U-Net supplying those groups (1-based)
    pub feature_layers: Vec<usize>,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            widths: vec![64, 128, 256],
            heads: vec![4, 8, 16],
            patch_stride: 4,
            window: 4,
            mlp_ratio: 4,
            use_relative_bias: true,
            lowlevel_width: 16,
            use_ldmfe: true,
            use_lgca: true,
            upper_in_channels: 128,
            feature_layers: vec![1, 3],
        }
    }
}

impl RegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 4 {
            return Err(CoreError::Config("regnet levels must be 1..=4".into()));
        }
        if self.widths.len() != self.levels || self.heads.len() != self.levels {
            return Err(CoreError::Config(
                "regnet widths/heads must have one entry per level".into(),
            ));
        }
        for (w, h) in self.widths.iter().zip(&self.heads) {
            if w % h != 0 {
                return Err(CoreError::Config(format!("width {w} not divisible by heads {h}")));
            }
        }
        if self.widths[0] % 4 != 0 {
            return Err(CoreError::Config("finest width must divide by 4".into()));
        }
        if self.use_ldmfe && self.feature_layers.is_empty() {
            return Err(CoreError::Config("feature_layers empty with use_ldmfe".into()));
        }
        Ok(())
    }

    fn attn_cfg(&self, level: usize) -> AttentionConfig {
        AttentionConfig {
            dim: self.widths[level],
            heads: self.heads[level],
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            use_relative_bias: self.use_relative_bias,
        }
    }

    /// Decoder stages that carry a convolution, deepest first. Upsampling
    /// stages halve the downsampling factor; the final full-resolution
    /// fusion stage concatenates the low-level branch.
    pub fn decoder_conv_stages(&self) -> usize {
        // log2(patch_stride * 2^(levels-1)) upsampling stages + fusion stage
        let depth = self.patch_stride.trailing_zeros() as usize + self.levels - 1;
        depth + 1
    }
}

/// Registration network weights.
#[derive(Clone, Debug)]
pub struct RegNetParams {
    pub config: RegNetConfig,
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

pub fn init_regnet(config: RegNetConfig, seed: u64) -> Result<RegNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let w0 = config.widths[0];
    // lower stream
    conv_init(&mut params, "lower.embed", 2, w0, config.patch_stride, &mut rng);
    for l in 0..config.levels {
        init_gfe_params(&mut params, &format!("lower.l{l}.gfe"), &config.attn_cfg(l), &mut rng);
        if l + 1 < config.levels {
            init_patch_merge_params(
                &mut params,
                &format!("lower.merge{l}"),
                config.widths[l],
                config.widths[l + 1],
                &mut rng,
            );
        }
    }
    // upper stream + fusion
    if config.use_ldmfe {
        for l in 0..config.levels {
            conv_init(
                &mut params,
                &format!("upper.l{l}.conv"),
                config.upper_in_channels,
                config.widths[l],
                3,
                &mut rng,
            );
            if config.use_lgca {
                init_lgca_params(&mut params, &format!("fuse.l{l}"), &config.attn_cfg(l), &mut rng);
            } else {
                // concat + 1x1 reduction fallback
                let std = (2.0 / (2 * config.widths[l]) as f64).sqrt();
                params.insert(
                    &format!("fuse.l{l}.reduce.w"),
                    Tensor::randn(&[2 * config.widths[l], config.widths[l]], std, &mut rng),
                );
                params.insert(&format!("fuse.l{l}.reduce.b"), Tensor::zeros(&[config.widths[l]]));
            }
        }
    }
    // decoder: one conv per upsampling stage with skip concatenation where a
    // fused level matches, then the full-resolution fusion stage
    let mut ch = config.widths[config.levels - 1];
    let mut stage = 0usize;
    for l in (0..config.levels.saturating_sub(1)).rev() {
        conv_init(
            &mut params,
            &format!("dec.s{stage}"),
            ch + config.widths[l],
            config.widths[l],
            3,
            &mut rng,
        );
        ch = config.widths[l];
        stage += 1;
    }
    let mut post = config.patch_stride.trailing_zeros() as usize;
    while post > 0 {
        let next = (ch / 2).max(4);
        conv_init(&mut params, &format!("dec.s{stage}"), ch, next, 3, &mut rng);
        ch = next;
        stage += 1;
        post -= 1;
    }
    conv_init(&mut params, "lowlevel", 2, config.lowlevel_width, 3, &mut rng);
    conv_init(&mut params, &format!("dec.s{stage}"), ch + config.lowlevel_width, ch, 3, &mut rng);
    // flow head starts at zero so training begins from the identity warp
    params.insert("flow.w", Tensor::zeros(&[2, ch, 3, 3]));
    params.insert("flow.b", Tensor::zeros(&[2]));
    Ok(RegNetParams { config, params })
}

/// Map each encoder level to the nearest extracted feature group (index into
/// the ascending `feature_layers`), preferring the deeper group on ties.
pub fn assign_groups(levels: usize, feature_layers: &[usize]) -> Vec<usize> {
    let mut sorted: Vec<usize> = feature_layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    (0..levels)
        .map(|l| {
            let mut best = 0usize;
            let mut best_d = usize::MAX;
            for (gi, &layer) in sorted.iter().enumerate() {
                let glog = layer - 1;
                let d = glog.abs_diff(l);
                if d < best_d || (d == best_d && gi > best) {
                    best_d = d;
                    best = gi;
                }
            }
            best
        })
        .collect()
}

/// Upper stream: per-level 3x3 convolution of the assigned feature group,
/// resampled to the lower-stream geometry. Returns rasters per level.
fn upper_stream_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &RegNetConfig,
    groups: &[Var],
    group_layers: &[usize],
    level_hw: &[(usize, usize)],
) -> Vec<Var> {
    let assign = assign_groups(cfg.levels, group_layers);
    let mut sorted_layers: Vec<usize> = group_layers.to_vec();
    sorted_layers.sort_unstable();
    sorted_layers.dedup();
    let mut out = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let gi = assign[l];
        let glog = sorted_layers[gi] - 1;
        let mut h = groups[gi];
        // resample the group raster to the level resolution
        if glog < l {
            for _ in glog..l {
                h = tape.avgpool2(h);
            }
        } else {
            for _ in l..glog {
                h = tape.upsample2(h);
            }
        }
        let s = tape.shape(h);
        assert_eq!(
            (s[1], s[2]),
            level_hw[l],
            "upper stream level {l} geometry mismatch"
        );
        let c = conv_apply(tape, p, &format!("upper.l{l}.conv"), h, 1, 1);
        out.push(c);
    }
    out
}

/// Lower stream: channel-concatenated pair -> patch embedding -> per-level
/// global feature extraction with patch merging in between. Returns token
/// matrices per level plus their raster sizes.
fn lower_stream_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &RegNetConfig,
    moving: Var,
    fixed: Var,
) -> (Vec<Var>, Vec<(usize, usize)>) {
    let pair = tape.concat(moving, fixed, 0);
    let embed = conv_apply(tape, p, "lower.embed", pair, cfg.patch_stride, 0);
    let s = tape.shape(embed).to_vec();
    let (mut h, mut w) = (s[1], s[2]);
    let mut tokens = tokens_from_raster(tape, embed);
    let mut outs = Vec::with_capacity(cfg.levels);
    let mut sizes = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let t = gfe_block(tape, p, &format!("lower.l{l}.gfe"), tokens, h, w, &cfg.attn_cfg(l));
        outs.push(t);
        sizes.push((h, w));
        if l + 1 < cfg.levels {
            tokens = patch_merge(tape, p, &format!("lower.merge{l}"), t, h, w);
            h /= 2;
            w /= 2;
        }
    }
    (outs, sizes)
}

/// Per-level fusion of the two streams; returns token matrices.
fn fuse_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &RegNetConfig,
    upper: Option<&[Var]>,
    lower: &[Var],
    sizes: &[(usize, usize)],
) -> Vec<Var> {
    match upper {
        None => lower.to_vec(),
        Some(upper) => (0..cfg.levels)
            .map(|l| {
                let (h, w) = sizes[l];
                let up_tokens = tokens_from_raster(tape, upper[l]);
                if cfg.use_lgca {
                    lgca_block(
                        tape,
                        p,
                        &format!("fuse.l{l}"),
                        up_tokens,
                        lower[l],
                        h,
                        w,
                        &cfg.attn_cfg(l),
                    )
                } else {
                    let cat = tape.concat(up_tokens, lower[l], 1);
                    let w_ = p.var(&format!("fuse.l{l}.reduce.w"));
                    let b_ = p.var(&format!("fuse.l{l}.reduce.b"));
                    tape.linear(cat, w_, Some(b_))
                }
            })
            .collect(),
    }
}

/// Decoder: alternate 2x upsampling and 3x3 convolution from the deepest
/// fused level, concatenating matching fused levels as skips, then the
/// low-level branch at full resolution, then the zero-initialized flow head.
fn decode_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &RegNetConfig,
    fused_rasters: &[Var],
    moving: Var,
    fixed: Var,
) -> Var {
    let mut h = fused_rasters[cfg.levels - 1];
    let mut stage = 0usize;
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        h = tape.upsample2(h);
        h = tape.concat(h, fused_rasters[l], 0);
        h = conv_apply(tape, p, &format!("dec.s{stage}"), h, 1, 1);
        h = tape.silu(h);
        stage += 1;
    }
    let mut post = cfg.patch_stride.trailing_zeros() as usize;
    while post > 0 {
        h = tape.upsample2(h);
        h = conv_apply(tape, p, &format!("dec.s{stage}"), h, 1, 1);
        h = tape.silu(h);
        stage += 1;
        post -= 1;
    }
    // full-resolution fusion with the low-level branch
    let pair = tape.concat(moving, fixed, 0);
    let low = conv_apply(tape, p, "lowlevel", pair, 1, 1);
    let low = tape.silu(low);
    h = tape.concat(h, low, 0);
    h = conv_apply(tape, p, &format!("dec.s{stage}"), h, 1, 1);
    h = tape.silu(h);
    conv_apply(tape, p, "flow", h, 1, 1)
}

/// Reject feature groups whose channel count or resolution ladder cannot
/// align with the configured levels.
pub fn validate_features(
    cfg: &RegNetConfig,
    features: &[Tensor],
    image_h: usize,
    image_w: usize,
) -> Result<()> {
    if !cfg.use_ldmfe {
        return Ok(());
    }
    let mut sorted_layers = cfg.feature_layers.clone();
    sorted_layers.sort_unstable();
    sorted_layers.dedup();
    if features.len() != sorted_layers.len() {
        return Err(CoreError::shape(format!(
            "expected {} feature groups, got {}",
            sorted_layers.len(),
            features.len()
        )));
    }
    for (g, &layer) in features.iter().zip(&sorted_layers) {
        let s = g.shape();
        if s.len() != 3 {
            return Err(CoreError::shape(format!("feature group for layer {layer} not [C,H,W]")));
        }
        if s[0] != cfg.upper_in_channels {
            return Err(CoreError::shape(format!(
                "feature group for layer {layer}: {} channels, expected {}",
                s[0], cfg.upper_in_channels
            )));
        }
        let denom = cfg.patch_stride << (layer - 1);
        if s[1] != image_h / denom || s[2] != image_w / denom {
            return Err(CoreError::shape(format!(
                "feature group for layer {layer}: raster {}x{} does not sit at 1/{denom} of {image_h}x{image_w}",
                s[1], s[2]
            )));
        }
    }
    Ok(())
}

/// Full forward pass on an existing tape. `features` are the extracted
/// diffusion feature groups (ignored when the upper stream is disabled).
pub fn forward_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &RegNetConfig,
    moving: Var,
    fixed: Var,
    features: &[Tensor],
) -> Var {
    let (lower, sizes) = lower_stream_on_tape(tape, p, cfg, moving, fixed);
    let upper_vars: Option<Vec<Var>> = if cfg.use_ldmfe {
        let groups: Vec<Var> = features.iter().map(|t| tape.leaf(t.clone())).collect();
        Some(upper_stream_on_tape(tape, p, cfg, &groups, &cfg.feature_layers, &sizes))
    } else {
        None
    };
    let fused = fuse_on_tape(tape, p, cfg, upper_vars.as_deref(), &lower, &sizes);
    let fused_rasters: Vec<Var> = fused
        .iter()
        .zip(&sizes)
        .map(|(&t, &(h, w))| raster_from_tokens(tape, t, h, w))
        .collect();
    decode_on_tape(tape, p, cfg, &fused_rasters, moving, fixed)
}

/// Predict the displacement field for one preprocessed pair.
pub fn predict_field(
    reg: &RegNetParams,
    moving: &Image2D,
    fixed: &Image2D,
    features: &[Tensor],
) -> Result<DisplacementField2D> {
    if moving.height != fixed.height || moving.width != fixed.width {
        return Err(CoreError::shape("predict_field: image shape mismatch"));
    }
    let div = reg.config.patch_stride << (reg.config.levels - 1);
    if moving.height % div != 0 || moving.width % div != 0 {
        return Err(CoreError::shape(format!(
            "predict_field: image sides must divide by {div}"
        )));
    }
    validate_features(&reg.config, features, moving.height, moving.width)?;
    let mut tape = Tape::new();
    let bound = reg.params.bind(&mut tape);
    let m = tape.leaf(moving.to_tensor());
    let f = tape.leaf(fixed.to_tensor());
    let field = forward_on_tape(&mut tape, &bound, &reg.config, m, f, features);
    Ok(DisplacementField2D::from_tensor(tape.value(field)))
}

/// Spec-level wrappers returning value pyramids.
pub fn lower_stream(
    reg: &RegNetParams,
    moving: &Image2D,
    fixed: &Image2D,
) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let bound = reg.params.bind(&mut tape);
    let m = tape.leaf(moving.to_tensor());
    let f = tape.leaf(fixed.to_tensor());
    let (tokens, sizes) = lower_stream_on_tape(&mut tape, &bound, &reg.config, m, f);
    let levels = tokens
        .iter()
        .zip(&sizes)
        .map(|(&t, &(h, w))| {
            let r = raster_from_tokens(&mut tape, t, h, w);
            tape.value(r).clone()
        })
        .collect();
    Ok(FeaturePyramid { levels, tag: StreamTag::Global })
}

pub fn upper_stream(reg: &RegNetParams, features: &[Tensor]) -> Result<FeaturePyramid> {
    if !reg.config.use_ldmfe {
        return Err(CoreError::Config("upper stream disabled in this config".into()));
    }
    let mut tape = Tape::new();
    let bound = reg.params.bind(&mut tape);
    let groups: Vec<Var> = features.iter().map(|t| tape.leaf(t.clone())).collect();
    // level geometries follow the finest group's raster
    let finest = features
        .first()
        .ok_or_else(|| CoreError::invalid("upper_stream: no feature groups"))?;
    let mut sorted_layers = reg.config.feature_layers.clone();
    sorted_layers.sort_unstable();
    sorted_layers.dedup();
    let base_log = sorted_layers[0] - 1;
    let (bh, bw) = (finest.shape()[1] << base_log, finest.shape()[2] << base_log);
    let sizes: Vec<(usize, usize)> =
        (0..reg.config.levels).map(|l| (bh >> l, bw >> l)).collect();
    let vars = upper_stream_on_tape(
        &mut tape,
        &bound,
        &reg.config,
        &groups,
        &reg.config.feature_layers,
        &sizes,
    );
    let levels = vars.iter().map(|&v| tape.value(v).clone()).collect();
    Ok(FeaturePyramid { levels, tag: StreamTag::Latent })
}
