//! Synthetic cardiac-like phantom pairs: a speckled bright-ring "ventricle"
//! on a dark background, deformed by a known random smooth field. Every
//! output is a pure function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::image::{DisplacementField2D, Image2D, LabelMap2D};
use crate::warp::{warp_image, warp_labels};

/// Label values emitted by the generator.
pub const LABEL_INTERIOR: u8 = 1;
pub const LABEL_RING: u8 = 2;
pub const PHANTOM_LABEL_SET: [u8; 2] = [LABEL_INTERIOR, LABEL_RING];

const MAX_ATTEMPTS: u32 = 8;
/// A label that shrinks below this pixel count counts as vanished.
const MIN_LABEL_PIXELS: usize = 16;

/// A moving/fixed image pair with optional segmentations.
#[derive(Clone, Debug)]
pub struct RegistrationPair {
    pub moving: Image2D,
    pub fixed: Image2D,
    pub moving_labels: Option<LabelMap2D>,
    pub fixed_labels: Option<LabelMap2D>,
    pub pair_id: String,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 over (seed, salt)
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Gaussian-smoothed white noise per component, rescaled so the maximum
/// displacement magnitude equals `amplitude`. Deterministic per seed.
pub fn random_smooth_field(
    seed: u64,
    size: usize,
    amplitude: f64,
    smoothness: f64,
) -> Result<DisplacementField2D> {
    if amplitude < 0.0 {
        return Err(CoreError::invalid("random_smooth_field: amplitude must be >= 0"));
    }
    if smoothness <= 0.0 {
        return Err(CoreError::invalid("random_smooth_field: smoothness must be > 0"));
    }
    if size == 0 {
        return Err(CoreError::invalid("random_smooth_field: size must be positive"));
    }
    let mut field = DisplacementField2D::zeros(size, size);
    if amplitude == 0.0 {
        return Ok(field);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = vec![0.0f64; 2 * size * size];
    for v in &mut noise {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let kernel = gaussian_kernel(smoothness);
    let mut smoothed = vec![0.0f64; 2 * size * size];
    for plane in 0..2 {
        let src = &noise[plane * size * size..(plane + 1) * size * size];
        let dst = &mut smoothed[plane * size * size..(plane + 1) * size * size];
        blur_separable(src, dst, size, size, &kernel);
    }
    field.data_mut().copy_from_slice(&smoothed);
    let max_mag = field.max_magnitude();
    if max_mag > 0.0 {
        let scale = amplitude / max_mag;
        for v in field.data_mut() {
            *v *= scale;
        }
    }
    Ok(field)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable blur normalized by the in-domain kernel mass, which keeps the
/// smoothed-noise variance stationary up to the borders (edge replication
/// would concentrate the field maximum at the corners).
fn blur_separable(src: &[f64], dst: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + i as isize - radius as isize;
                if sx >= 0 && sx < w as isize {
                    acc += kv * src[y * w + sx as usize];
                    mass += kv;
                }
            }
            tmp[y * w + x] = acc / mass;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + i as isize - radius as isize;
                if sy >= 0 && sy < h as isize {
                    acc += kv * tmp[sy as usize * w + x];
                    mass += kv;
                }
            }
            dst[y * w + x] = acc / mass;
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// One random annulus appearance plus its exact label map.
fn render_fixed(
    rng: &mut ChaCha8Rng,
    size: usize,
    noise_level: f64,
) -> (Image2D, LabelMap2D) {
    let s = size as f64;
    let cx = s / 2.0 + rng.gen_range(-s / 16.0..s / 16.0);
    let cy = s / 2.0 + rng.gen_range(-s / 16.0..s / 16.0);
    let a_out = s * rng.gen_range(0.20..0.30);
    let b_out = s * rng.gen_range(0.20..0.30);
    let thickness = rng.gen_range(0.22..0.35); // fraction of the outer radius
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let rho_in = 1.0 - thickness;

    let bg = 0.12;
    let pool = 0.05;
    let ring = 0.9;
    // soft edges ~1.2px wide, measured in normalized radius units
    let r_eff = 0.5 * (a_out + b_out);
    let edge = 1.2 / r_eff;

    let mut img = Image2D::zeros(size, size);
    let mut labels = LabelMap2D::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let xr = ct * dx + st * dy;
            let yr = -st * dx + ct * dy;
            let rho = ((xr / a_out).powi(2) + (yr / b_out).powi(2)).sqrt();
            // blend pool -> ring at rho_in, ring -> background at 1
            let inner_mix = smoothstep(rho_in - edge, rho_in + edge, rho);
            let outer_mix = smoothstep(1.0 - edge, 1.0 + edge, rho);
            let v = pool * (1.0 - inner_mix) + ring * inner_mix;
            let v = v * (1.0 - outer_mix) + bg * outer_mix;
            img.set(y, x, v);
            if rho < rho_in {
                labels.set(y, x, LABEL_INTERIOR);
            } else if rho < 1.0 {
                labels.set(y, x, LABEL_RING);
            }
        }
    }

    // multiplicative speckle: slightly correlated positive noise
    if noise_level > 0.0 {
        let mut raw = vec![0.0f64; size * size];
        for v in &mut raw {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let kernel = gaussian_kernel(0.8);
        let mut smooth = vec![0.0f64; size * size];
        blur_separable(&raw, &mut smooth, size, size, &kernel);
        for (px, n) in img.data_mut().iter_mut().zip(&smooth) {
            *px = (*px * (1.0 + noise_level * n)).max(0.0);
        }
    }

    let normalized = crate::image::minmax_normalize(&img);
    (normalized, labels)
}

/// Generate one phantom pair together with the ground-truth field that
/// produced the moving image from the fixed one.
pub fn generate_phantom_pair_with_field(
    seed: u64,
    size: usize,
    deform_amplitude: f64,
    smoothness: f64,
    noise_level: f64,
) -> Result<(RegistrationPair, DisplacementField2D)> {
    if size < 32 {
        return Err(CoreError::invalid("generate_phantom_pair: size must be >= 32"));
    }
    if deform_amplitude < 0.0 {
        return Err(CoreError::invalid("generate_phantom_pair: amplitude must be >= 0"));
    }
    if smoothness <= 0.0 {
        return Err(CoreError::invalid("generate_phantom_pair: smoothness must be > 0"));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, attempt as u64));
        let (mut fixed, fixed_labels) = render_fixed(&mut rng, size, noise_level);
        fixed.quantize_u16();
        let field_seed = mix_seed(seed, 0x8000_0000 | attempt as u64);
        let field = random_smooth_field(field_seed, size, deform_amplitude, smoothness)?;
        let mut moving = if deform_amplitude == 0.0 {
            fixed.clone()
        } else {
            let mut m = warp_image(&fixed, &field)?;
            m.quantize_u16();
            m
        };
        let moving_labels = warp_labels(&fixed_labels, &field)?;
        if deform_amplitude == 0.0 {
            moving = fixed.clone();
        }
        // a label counts as vanished when the warp wipes out most of it
        let ok = PHANTOM_LABEL_SET.iter().all(|&l| {
            let fixed_count = fixed_labels.count(l);
            fixed_count >= MIN_LABEL_PIXELS
                && moving_labels.count(l) >= MIN_LABEL_PIXELS.max(fixed_count / 4)
        });
        if !ok {
            continue; // regenerate with fresh interior randomness
        }
        let pair = RegistrationPair {
            moving,
            fixed,
            moving_labels: Some(moving_labels),
            fixed_labels: Some(fixed_labels),
            pair_id: format!("phantom-{seed:08x}"),
        };
        return Ok((pair, field));
    }
    Err(CoreError::data(format!(
        "generate_phantom_pair: label regions vanished after {MAX_ATTEMPTS} attempts \
         (amplitude {deform_amplitude} too large for size {size})"
    )))
}

/// Spec-level entry point; see [`generate_phantom_pair_with_field`].
pub fn generate_phantom_pair(
    seed: u64,
    size: usize,
    deform_amplitude: f64,
    smoothness: f64,
    noise_level: f64,
) -> Result<RegistrationPair> {
    generate_phantom_pair_with_field(seed, size, deform_amplitude, smoothness, noise_level)
        .map(|(pair, _)| pair)
}
