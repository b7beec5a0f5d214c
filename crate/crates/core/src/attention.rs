//! Window attention machinery: partitioning with cyclic shift and padding,
//! multi-head self- and cross-attention inside windows, relative position
//! bias, the global feature extraction block, and the dual-branch
//! cross-attention fusion block.
//!
//! Feature maps travel as token matrices [H*W, C]; all layout changes are
//! expressed as index maps so they stay bit-exact invertible.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{BoundParams, ParamSet, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;
const MASK_NEG: f64 = -1e30;

/// Per-level attention settings.
#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub use_relative_bias: bool,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        assert!(self.dim % self.heads == 0, "dim must divide by heads");
        self.dim / self.heads
    }
}

/// Token-raster geometry for one window partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    /// padded sides, multiples of the window
    pub ph: usize,
    pub pw: usize,
    pub win: usize,
    /// cyclic shift (per axis); zero when the axis fits one window
    pub shift_y: usize,
    pub shift_x: usize,
}

impl WindowGeometry {
    pub fn new(h: usize, w: usize, win: usize, shifted: bool) -> Self {
        let ph = h.div_ceil(win) * win;
        let pw = w.div_ceil(win) * win;
        let shift_y = if shifted && ph > win { win / 2 } else { 0 };
        let shift_x = if shifted && pw > win { win / 2 } else { 0 };
        Self { h, w, ph, pw, win, shift_y, shift_x }
    }

    pub fn windows(&self) -> usize {
        (self.ph / self.win) * (self.pw / self.win)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win * self.win
    }
}

type MapKey = (u8, usize, usize, usize, usize, usize, usize);

thread_local! {
    static MAP_CACHE: RefCell<HashMap<MapKey, Arc<Vec<i64>>>> = RefCell::new(HashMap::new());
    static MASK_CACHE: RefCell<HashMap<(WindowGeometry, usize), Arc<Tensor>>> =
        RefCell::new(HashMap::new());
}

fn cached_map(key: MapKey, build: impl FnOnce() -> Vec<i64>) -> Arc<Vec<i64>> {
    MAP_CACHE.with(|c| {
        if let Some(m) = c.borrow().get(&key) {
            return m.clone();
        }
        let m = Arc::new(build());
        c.borrow_mut().insert(key, m.clone());
        m
    })
}

/// [C,H,W] raster -> [H*W, C] tokens.
pub fn tokens_from_raster(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    assert_eq!(s.len(), 3, "tokens_from_raster expects [C,H,W]");
    let (c, h, w) = (s[0], s[1], s[2]);
    let idx = cached_map((0, c, h, w, 0, 0, 0), || {
        let mut m = vec![0i64; c * h * w];
        for t in 0..h * w {
            for ch in 0..c {
                m[t * c + ch] = (ch * h * w + t) as i64;
            }
        }
        m
    });
    tape.index_map(x, idx, &[h * w, c])
}

/// [H*W, C] tokens -> [C,H,W] raster.
pub fn raster_from_tokens(tape: &mut Tape, x: Var, h: usize, w: usize) -> Var {
    let s = tape.shape(x).to_vec();
    assert_eq!(s.len(), 2, "raster_from_tokens expects [N,C]");
    assert_eq!(s[0], h * w, "token count mismatch");
    let c = s[1];
    let idx = cached_map((1, c, h, w, 0, 0, 0), || {
        let mut m = vec![0i64; c * h * w];
        for ch in 0..c {
            for t in 0..h * w {
                m[ch * h * w + t] = (t * c + ch) as i64;
            }
        }
        m
    });
    tape.index_map(x, idx, &[c, h, w])
}

fn partition_key(g: &WindowGeometry, c: usize, kind: u8) -> MapKey {
    (kind, g.h * 4096 + g.w, g.ph * 4096 + g.pw, c, g.win, g.shift_y, g.shift_x)
}

/// Tokens [h*w, C] -> windowed tokens [nwin*P*P, C], zero-padding rasters
/// that do not divide evenly and applying the cyclic shift.
pub fn window_partition(tape: &mut Tape, x: Var, g: &WindowGeometry) -> Var {
    let s = tape.shape(x).to_vec();
    assert_eq!(s, vec![g.h * g.w, tape.shape(x)[1]], "window_partition shape mismatch");
    let c = s[1];
    let idx = cached_map(partition_key(g, c, 2), || {
        let mut m = vec![-1i64; g.windows() * g.tokens_per_window() * c];
        let wx_count = g.pw / g.win;
        for wy in 0..g.ph / g.win {
            for wx in 0..wx_count {
                for iy in 0..g.win {
                    for ix in 0..g.win {
                        let gy = wy * g.win + iy;
                        let gx = wx * g.win + ix;
                        // cyclic shift on the padded raster
                        let sy = (gy + g.shift_y) % g.ph;
                        let sx = (gx + g.shift_x) % g.pw;
                        if sy < g.h && sx < g.w {
                            let widx = wy * wx_count + wx;
                            let pidx = iy * g.win + ix;
                            let out = (widx * g.tokens_per_window() + pidx) * c;
                            let src = (sy * g.w + sx) * c;
                            for ch in 0..c {
                                m[out + ch] = (src + ch) as i64;
                            }
                        }
                    }
                }
            }
        }
        m
    });
    tape.index_map(x, idx, &[g.windows() * g.tokens_per_window(), c])
}

/// Inverse of [`window_partition`]: windowed tokens back to [h*w, C],
/// dropping padding.
pub fn window_reverse(tape: &mut Tape, x: Var, g: &WindowGeometry) -> Var {
    let s = tape.shape(x).to_vec();
    assert_eq!(s[0], g.windows() * g.tokens_per_window(), "window_reverse shape mismatch");
    let c = s[1];
    let idx = cached_map(partition_key(g, c, 3), || {
        let mut m = vec![-1i64; g.h * g.w * c];
        let wx_count = g.pw / g.win;
        for sy in 0..g.h {
            for sx in 0..g.w {
                let gy = (sy + g.ph - g.shift_y) % g.ph;
                let gx = (sx + g.pw - g.shift_x) % g.pw;
                let widx = (gy / g.win) * wx_count + gx / g.win;
                let pidx = (gy % g.win) * g.win + gx % g.win;
                let src = (widx * g.tokens_per_window() + pidx) * c;
                let out = (sy * g.w + sx) * c;
                for ch in 0..c {
                    m[out + ch] = (src + ch) as i64;
                }
            }
        }
        m
    });
    tape.index_map(x, idx, &[g.h * g.w, c])
}

/// [nwin*P2, C] -> [nwin*heads, P2, hd]
fn split_heads(tape: &mut Tape, x: Var, nwin: usize, p2: usize, heads: usize, hd: usize) -> Var {
    let c = heads * hd;
    let idx = cached_map((4, nwin, p2, heads, hd, 0, 0), || {
        let mut m = vec![0i64; nwin * heads * p2 * hd];
        for win in 0..nwin {
            for h in 0..heads {
                for t in 0..p2 {
                    for k in 0..hd {
                        let out = (((win * heads + h) * p2 + t) * hd) + k;
                        let src = (win * p2 + t) * c + h * hd + k;
                        m[out] = src as i64;
                    }
                }
            }
        }
        m
    });
    tape.index_map(x, idx, &[nwin * heads, p2, hd])
}

/// [nwin*heads, P2, hd] -> [nwin*P2, C]
fn merge_heads(tape: &mut Tape, x: Var, nwin: usize, p2: usize, heads: usize, hd: usize) -> Var {
    let c = heads * hd;
    let idx = cached_map((5, nwin, p2, heads, hd, 0, 0), || {
        let mut m = vec![0i64; nwin * p2 * c];
        for win in 0..nwin {
            for t in 0..p2 {
                for h in 0..heads {
                    for k in 0..hd {
                        let out = (win * p2 + t) * c + h * hd + k;
                        let src = (((win * heads + h) * p2 + t) * hd) + k;
                        m[out] = src as i64;
                    }
                }
            }
        }
        m
    });
    tape.index_map(x, idx, &[nwin * p2, c])
}

/// Relative-position index table for a P x P window (Swin layout).
fn relative_index(win: usize) -> Vec<usize> {
    let p2 = win * win;
    let side = 2 * win - 1;
    let mut idx = vec![0usize; p2 * p2];
    for i in 0..p2 {
        let (yi, xi) = (i / win, i % win);
        for j in 0..p2 {
            let (yj, xj) = (j / win, j % win);
            let ry = yi as i64 - yj as i64 + win as i64 - 1;
            let rx = xi as i64 - xj as i64 + win as i64 - 1;
            idx[i * p2 + j] = (ry as usize) * side + rx as usize;
        }
    }
    idx
}

/// Expand the learned bias table [(2P-1)^2, heads] to full logits shape
/// [nwin*heads, P2, P2].
fn expand_bias(tape: &mut Tape, table: Var, nwin: usize, heads: usize, win: usize) -> Var {
    let p2 = win * win;
    let idx = cached_map((6, nwin, heads, win, 0, 0, 0), || {
        let rel = relative_index(win);
        let mut m = vec![0i64; nwin * heads * p2 * p2];
        for w in 0..nwin {
            for h in 0..heads {
                for i in 0..p2 {
                    for j in 0..p2 {
                        let out = ((w * heads + h) * p2 + i) * p2 + j;
                        m[out] = (rel[i * p2 + j] * heads + h) as i64;
                    }
                }
            }
        }
        m
    });
    tape.index_map(table, idx, &[nwin * heads, p2, p2])
}

/// Swin attention mask for shifted windows (and padded tokens), expanded to
/// [nwin*heads, P2, P2]. Pairs from different shift regions get a large
/// negative logit offset; padded tokens form their own region.
fn shift_mask(g: &WindowGeometry, heads: usize) -> Arc<Tensor> {
    MASK_CACHE.with(|c| {
        let key = (*g, heads);
        if let Some(m) = c.borrow().get(&key) {
            return m.clone();
        }
        let p2 = g.tokens_per_window();
        let nwin = g.windows();
        // region label per padded-raster position
        let region = |len: usize, plen: usize, win: usize, shift: usize, v: usize| -> usize {
            let _ = len;
            if shift == 0 || plen == win {
                return 0;
            }
            if v < plen - win {
                0
            } else if v < plen - shift {
                1
            } else {
                2
            }
        };
        let mut mask = vec![0.0f64; nwin * heads * p2 * p2];
        let wx_count = g.pw / g.win;
        // region id per window token (after the cyclic shift), pad = usize::MAX
        let mut ids = vec![0usize; nwin * p2];
        for wy in 0..g.ph / g.win {
            for wx in 0..wx_count {
                for iy in 0..g.win {
                    for ix in 0..g.win {
                        let gy = wy * g.win + iy;
                        let gx = wx * g.win + ix;
                        let sy = (gy + g.shift_y) % g.ph;
                        let sx = (gx + g.shift_x) % g.pw;
                        let id = if sy < g.h && sx < g.w {
                            region(g.h, g.ph, g.win, g.shift_y, sy) * 3
                                + region(g.w, g.pw, g.win, g.shift_x, sx)
                        } else {
                            usize::MAX
                        };
                        ids[(wy * wx_count + wx) * p2 + iy * g.win + ix] = id;
                    }
                }
            }
        }
        for w in 0..nwin {
            for i in 0..p2 {
                for j in 0..p2 {
                    if ids[w * p2 + i] != ids[w * p2 + j] {
                        for h in 0..heads {
                            mask[((w * heads + h) * p2 + i) * p2 + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
        let t = Arc::new(Tensor::new(&[nwin * heads, p2, p2], mask));
        c.borrow_mut().insert(key, t.clone());
        t
    })
}

/// softmax(q k^T / sqrt(d)) v per window and head.
/// q, k, v: [B, T, hd] with B = windows*heads. Optional additive bias and
/// mask share that shape.
pub fn scaled_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<&Tensor>,
) -> Var {
    let hd = *tape.shape(q).last().unwrap();
    let mut logits = tape.bmm(q, k, true);
    logits = tape.scale(logits, 1.0 / (hd as f64).sqrt());
    if let Some(b) = bias {
        logits = tape.add(logits, b);
    }
    if let Some(m) = mask {
        logits = tape.add_const(logits, m);
    }
    let attn = tape.softmax_rows(logits);
    tape.bmm(attn, v, false)
}

/// Self-attention over pre-projected windowed streams.
pub fn self_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<&Tensor>,
) -> Var {
    scaled_attention(tape, q, k, v, bias, mask)
}

/// Cross-attention: queries from stream a, keys/values from stream b.
/// With identical arguments this reduces to [`self_attention`] exactly.
pub fn cross_attention(
    tape: &mut Tape,
    q_a: Var,
    k_b: Var,
    v_b: Var,
    bias: Option<Var>,
    mask: Option<&Tensor>,
) -> Var {
    scaled_attention(tape, q_a, k_b, v_b, bias, mask)
}

fn linear_init<R: Rng>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    params.insert(&format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    params.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn ln_init(params: &mut ParamSet, name: &str, dim: usize) {
    params.insert(&format!("{name}.g"), Tensor::full(&[dim], 1.0));
    params.insert(&format!("{name}.b"), Tensor::zeros(&[dim]));
}

fn linear_apply(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    tape.linear(x, w, Some(b))
}

fn ln_apply(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Var {
    let g = p.var(&format!("{name}.g"));
    let b = p.var(&format!("{name}.b"));
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Parameters of one windowed attention sublayer (QKV + output projection
/// and optionally a relative position bias table).
pub fn init_attention_params<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut R,
) {
    linear_init(params, &format!("{prefix}.q"), cfg.dim, cfg.dim, rng);
    linear_init(params, &format!("{prefix}.k"), cfg.dim, cfg.dim, rng);
    linear_init(params, &format!("{prefix}.v"), cfg.dim, cfg.dim, rng);
    linear_init(params, &format!("{prefix}.o"), cfg.dim, cfg.dim, rng);
    if cfg.use_relative_bias {
        let side = 2 * cfg.window - 1;
        params.insert(
            &format!("{prefix}.bias"),
            Tensor::randn(&[side * side, cfg.heads], 0.02, rng),
        );
    }
}

pub fn init_mlp_params<R: Rng>(params: &mut ParamSet, prefix: &str, dim: usize, ratio: usize, rng: &mut R) {
    linear_init(params, &format!("{prefix}.fc1"), dim, dim * ratio, rng);
    linear_init(params, &format!("{prefix}.fc2"), dim * ratio, dim, rng);
}

fn mlp_apply(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let h = linear_apply(tape, p, &format!("{prefix}.fc1"), x);
    let h = tape.gelu(h);
    linear_apply(tape, p, &format!("{prefix}.fc2"), h)
}

/// One windowed multi-head attention pass over token rasters.
/// `q_tokens` and `kv_tokens` are [H*W, C] in the same geometry; for
/// self-attention they are the same var.
fn windowed_mha(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    q_tokens: Var,
    kv_tokens: Var,
    cfg: &AttentionConfig,
    geom: &WindowGeometry,
    use_bias: bool,
) -> Var {
    let nwin = geom.windows();
    let p2 = geom.tokens_per_window();
    let hd = cfg.head_dim();
    let qw = window_partition(tape, q_tokens, geom);
    let kw = if q_tokens == kv_tokens { qw } else { window_partition(tape, kv_tokens, geom) };
    let q = linear_apply(tape, p, &format!("{prefix}.q"), qw);
    let k = linear_apply(tape, p, &format!("{prefix}.k"), kw);
    let v = linear_apply(tape, p, &format!("{prefix}.v"), kw);
    let qh = split_heads(tape, q, nwin, p2, cfg.heads, hd);
    let kh = split_heads(tape, k, nwin, p2, cfg.heads, hd);
    let vh = split_heads(tape, v, nwin, p2, cfg.heads, hd);
    let bias = if use_bias && cfg.use_relative_bias {
        let table = p.var(&format!("{prefix}.bias"));
        Some(expand_bias(tape, table, nwin, cfg.heads, cfg.window))
    } else {
        None
    };
    let needs_mask =
        geom.shift_y > 0 || geom.shift_x > 0 || geom.ph != geom.h || geom.pw != geom.w;
    let mask = if needs_mask { Some(shift_mask(geom, cfg.heads)) } else { None };
    let out = scaled_attention(tape, qh, kh, vh, bias, mask.as_deref());
    let merged = merge_heads(tape, out, nwin, p2, cfg.heads, hd);
    let proj = linear_apply(tape, p, &format!("{prefix}.o"), merged);
    window_reverse(tape, proj, geom)
}

/// Parameter layout of the global feature extraction block:
/// LN -> W-MSA -> +res -> LN -> MLP -> +res -> LN -> SW-MSA -> +res -> LN -> MLP -> +res.
pub fn init_gfe_params<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut R,
) {
    ln_init(params, &format!("{prefix}.ln1"), cfg.dim);
    init_attention_params(params, &format!("{prefix}.wmsa"), cfg, rng);
    ln_init(params, &format!("{prefix}.ln2"), cfg.dim);
    init_mlp_params(params, &format!("{prefix}.mlp1"), cfg.dim, cfg.mlp_ratio, rng);
    ln_init(params, &format!("{prefix}.ln3"), cfg.dim);
    init_attention_params(params, &format!("{prefix}.swmsa"), cfg, rng);
    ln_init(params, &format!("{prefix}.ln4"), cfg.dim);
    init_mlp_params(params, &format!("{prefix}.mlp2"), cfg.dim, cfg.mlp_ratio, rng);
}

/// Global feature extraction block on [H*W, C] tokens.
pub fn gfe_block(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    s: Var,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
) -> Var {
    let plain = WindowGeometry::new(h, w, cfg.window, false);
    let shifted = WindowGeometry::new(h, w, cfg.window, true);
    // W-MSA + residual
    let n1 = ln_apply(tape, p, &format!("{prefix}.ln1"), s);
    let a1 = windowed_mha(tape, p, &format!("{prefix}.wmsa"), n1, n1, cfg, &plain, true);
    let s1 = tape.add(a1, s);
    // MLP + residual
    let n2 = ln_apply(tape, p, &format!("{prefix}.ln2"), s1);
    let m1 = mlp_apply(tape, p, &format!("{prefix}.mlp1"), n2);
    let s2 = tape.add(m1, s1);
    // SW-MSA + residual
    let n3 = ln_apply(tape, p, &format!("{prefix}.ln3"), s2);
    let a2 = windowed_mha(tape, p, &format!("{prefix}.swmsa"), n3, n3, cfg, &shifted, true);
    let s3 = tape.add(a2, s2);
    // MLP + residual
    let n4 = ln_apply(tape, p, &format!("{prefix}.ln4"), s3);
    let m2 = mlp_apply(tape, p, &format!("{prefix}.mlp2"), n4);
    tape.add(m2, s3)
}

/// Parameters of the dual-branch cross-attention fusion block. Each branch
/// owns a full QKV/projection set, the post-attention tail of the GFE block,
/// and the final concat projection maps 2C back to C.
pub fn init_lgca_params<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut R,
) {
    for branch in ["s", "g"] {
        ln_init(params, &format!("{prefix}.{branch}.ln1"), cfg.dim);
        init_attention_params(params, &format!("{prefix}.{branch}.wmca"), cfg, rng);
        ln_init(params, &format!("{prefix}.{branch}.ln2"), cfg.dim);
        init_mlp_params(params, &format!("{prefix}.{branch}.mlp1"), cfg.dim, cfg.mlp_ratio, rng);
        ln_init(params, &format!("{prefix}.{branch}.ln3"), cfg.dim);
        init_attention_params(params, &format!("{prefix}.{branch}.swmsa"), cfg, rng);
        ln_init(params, &format!("{prefix}.{branch}.ln4"), cfg.dim);
        init_mlp_params(params, &format!("{prefix}.{branch}.mlp2"), cfg.dim, cfg.mlp_ratio, rng);
    }
    linear_init(params, &format!("{prefix}.proj"), 2 * cfg.dim, cfg.dim, rng);
}

/// Swapped-query cross-attention fusion of the latent stream `s` and the
/// global stream `g` (both [H*W, C]):
///   s_hat = W-MCA(K,V from LN(s); Q from LN(g)) + s
///   g_hat = W-MCA(K,V from LN(g); Q from LN(s)) + g
/// followed by each branch running MLP / SW-MSA / MLP with residuals, then
/// channel concatenation and projection back to C.
pub fn lgca_block(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    s: Var,
    g: Var,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
) -> Var {
    let (s_out, g_out) = lgca_branches(tape, p, prefix, s, g, h, w, cfg);
    let cat = tape.concat(s_out, g_out, 1);
    linear_apply(tape, p, &format!("{prefix}.proj"), cat)
}

/// The two branch outputs before concatenation/projection.
pub fn lgca_branches(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    s: Var,
    g: Var,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
) -> (Var, Var) {
    assert_eq!(tape.shape(s), tape.shape(g), "lgca streams must share geometry");
    let plain = WindowGeometry::new(h, w, cfg.window, false);
    let shifted = WindowGeometry::new(h, w, cfg.window, true);
    let nwin = plain.windows();
    let p2 = plain.tokens_per_window();
    let hd = cfg.head_dim();

    let sn = ln_apply(tape, p, &format!("{prefix}.s.ln1"), s);
    let gn = ln_apply(tape, p, &format!("{prefix}.g.ln1"), g);
    let sw = window_partition(tape, sn, &plain);
    let gw = window_partition(tape, gn, &plain);

    // branch projections: each branch embeds its own stream
    let q_s = linear_apply(tape, p, &format!("{prefix}.s.wmca.q"), sw);
    let k_s = linear_apply(tape, p, &format!("{prefix}.s.wmca.k"), sw);
    let v_s = linear_apply(tape, p, &format!("{prefix}.s.wmca.v"), sw);
    let q_g = linear_apply(tape, p, &format!("{prefix}.g.wmca.q"), gw);
    let k_g = linear_apply(tape, p, &format!("{prefix}.g.wmca.k"), gw);
    let v_g = linear_apply(tape, p, &format!("{prefix}.g.wmca.v"), gw);

    let split = |tape: &mut Tape, v: Var| split_heads(tape, v, nwin, p2, cfg.heads, hd);
    let (qsh, ksh, vsh) = (split(tape, q_s), split(tape, k_s), split(tape, v_s));
    let (qgh, kgh, vgh) = (split(tape, q_g), split(tape, k_g), split(tape, v_g));

    let needs_mask = plain.ph != plain.h || plain.pw != plain.w;
    let mask = if needs_mask { Some(shift_mask(&plain, cfg.heads)) } else { None };

    // swapped queries: the s-branch keeps K_s/V_s and takes Q_g, and
    // conversely for the g-branch
    let attn_s = cross_attention(tape, qgh, ksh, vsh, None, mask.as_deref());
    let attn_g = cross_attention(tape, qsh, kgh, vgh, None, mask.as_deref());

    let tail = |tape: &mut Tape, branch: &str, attn: Var, residual: Var| -> Var {
        let merged = merge_heads(tape, attn, nwin, p2, cfg.heads, hd);
        let proj = linear_apply(tape, p, &format!("{prefix}.{branch}.wmca.o"), merged);
        let rev = window_reverse(tape, proj, &plain);
        let x1 = tape.add(rev, residual);
        // last three lines of the GFE recipe
        let n2 = ln_apply(tape, p, &format!("{prefix}.{branch}.ln2"), x1);
        let m1 = mlp_apply(tape, p, &format!("{prefix}.{branch}.mlp1"), n2);
        let x2 = tape.add(m1, x1);
        let n3 = ln_apply(tape, p, &format!("{prefix}.{branch}.ln3"), x2);
        let a2 =
            windowed_mha(tape, p, &format!("{prefix}.{branch}.swmsa"), n3, n3, cfg, &shifted, true);
        let x3 = tape.add(a2, x2);
        let n4 = ln_apply(tape, p, &format!("{prefix}.{branch}.ln4"), x3);
        let m2 = mlp_apply(tape, p, &format!("{prefix}.{branch}.mlp2"), n4);
        tape.add(m2, x3)
    };
    let s_out = tail(tape, "s", attn_s, s);
    let g_out = tail(tape, "g", attn_g, g);
    (s_out, g_out)
}

/// Swin-style patch merging: 2x2 token neighborhoods concatenated (4C) and
/// linearly reduced. Returns tokens at half resolution.
pub fn init_patch_merge_params<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    dim_in: usize,
    dim_out: usize,
    rng: &mut R,
) {
    linear_init(params, &format!("{prefix}.reduce"), 4 * dim_in, dim_out, rng);
}

pub fn patch_merge(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    h: usize,
    w: usize,
) -> Var {
    let s = tape.shape(x).to_vec();
    assert_eq!(s[0], h * w, "patch_merge token count mismatch");
    assert!(h % 2 == 0 && w % 2 == 0, "patch_merge needs even sides");
    let c = s[1];
    let (ho, wo) = (h / 2, w / 2);
    let idx = cached_map((7, c, h, w, 0, 0, 0), || {
        let mut m = vec![0i64; ho * wo * 4 * c];
        for y in 0..ho {
            for x in 0..wo {
                let n = y * wo + x;
                for q in 0..4 {
                    let (qy, qx) = (q / 2, q % 2);
                    let src = ((2 * y + qy) * w + (2 * x + qx)) * c;
                    for ch in 0..c {
                        m[(n * 4 + q) * c + ch] = (src + ch) as i64;
                    }
                }
            }
        }
        m
    });
    let gathered = tape.index_map(x, idx, &[ho * wo, 4 * c]);
    linear_apply(tape, p, &format!("{prefix}.reduce"), gathered)
}

#[cfg(test)]
mod tests;
