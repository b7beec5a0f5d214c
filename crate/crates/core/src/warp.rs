//! Differentiable resampling through displacement fields and the
//! registration objective (pixel-space MSE, latent-space MSE, and the
//! diffusion regularizer on field gradients).

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::image::{DisplacementField2D, Image2D, LabelMap2D};
use crate::tensor::{bilinear_stencil, Tape, Tensor, Var};

/// Similarity/regularizer weights. `beta` mixes pixel and latent MSE,
/// `lambda` scales the smoothness penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.01, beta: 0.6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(CoreError::invalid("lambda must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CoreError::invalid("beta must be in [0,1]"));
        }
        Ok(())
    }
}

/// All loss terms of one evaluation. `total = sim + lambda*smooth` with
/// `sim = beta*org + (1-beta)*lat`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: f64,
    pub org: f64,
    pub lat: f64,
    pub smooth: f64,
}

/// Warp an image through a displacement field: out(p) = img(p + u(p)),
/// bilinear with border clamping.
pub fn warp_image(img: &Image2D, field: &DisplacementField2D) -> Result<Image2D> {
    if img.height != field.height || img.width != field.width {
        return Err(CoreError::shape(format!(
            "warp_image: image {}x{} vs field {}x{}",
            img.height, img.width, field.height, field.width
        )));
    }
    if !field.all_finite() {
        return Err(CoreError::data("warp_image: non-finite displacement field"));
    }
    let (h, w) = (img.height, img.width);
    let mut out = Image2D::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (ux, uy) = field.at(y, x);
            let (idx, wts, _, _) = bilinear_stencil(h, w, y as f64 + uy, x as f64 + ux);
            let mut v = 0.0;
            for q in 0..4 {
                v += wts[q] * img.data()[idx[q]];
            }
            out.set(y, x, v);
        }
    }
    Ok(out)
}

/// Warp a label map with nearest-neighbor sampling; output labels are a
/// subset of the input labels.
pub fn warp_labels(labels: &LabelMap2D, field: &DisplacementField2D) -> Result<LabelMap2D> {
    if labels.height != field.height || labels.width != field.width {
        return Err(CoreError::shape(format!(
            "warp_labels: labels {}x{} vs field {}x{}",
            labels.height, labels.width, field.height, field.width
        )));
    }
    if !field.all_finite() {
        return Err(CoreError::data("warp_labels: non-finite displacement field"));
    }
    let (h, w) = (labels.height, labels.width);
    let mut out = LabelMap2D::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (ux, uy) = field.at(y, x);
            let sy = ((y as f64 + uy).round().max(0.0) as usize).min(h - 1);
            let sx = ((x as f64 + ux).round().max(0.0) as usize).min(w - 1);
            out.set(y, x, labels.get(sy, sx));
        }
    }
    Ok(out)
}

/// Pixel-space similarity: mean squared difference over the image domain.
pub fn loss_org(warped: &Image2D, fixed: &Image2D) -> Result<f64> {
    if warped.height != fixed.height || warped.width != fixed.width {
        return Err(CoreError::shape("loss_org: image shape mismatch"));
    }
    let n = warped.data().len() as f64;
    Ok(warped
        .data()
        .iter()
        .zip(fixed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Smoothness penalty: sum of squared forward differences of the
/// displacement, each partial accumulated where its stencil fits.
pub fn loss_smooth(field: &DisplacementField2D) -> f64 {
    let (h, w) = (field.height, field.width);
    let hw = h * w;
    let d = field.data();
    let mut acc = 0.0;
    for plane in 0..2 {
        let p = &d[plane * hw..(plane + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let dx = p[y * w + x + 1] - p[y * w + x];
                    acc += dx * dx;
                }
                if y + 1 < h {
                    let dy = p[(y + 1) * w + x] - p[y * w + x];
                    acc += dy * dy;
                }
            }
        }
    }
    acc
}

/// Index maps that shift a [2,H,W] field tensor for forward differences.
fn forward_diff_indices(h: usize, w: usize) -> (Arc<Vec<i64>>, Arc<Vec<i64>>, Arc<Vec<i64>>, Arc<Vec<i64>>) {
    let hw = (h * w) as i64;
    // x direction: sites with x+1 < w, both planes
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for plane in 0..2i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 - 1 {
                xa.push(plane * hw + y * w as i64 + x + 1);
                xb.push(plane * hw + y * w as i64 + x);
            }
        }
    }
    // y direction: sites with y+1 < h
    let mut ya = Vec::new();
    let mut yb = Vec::new();
    for plane in 0..2i64 {
        for y in 0..h as i64 - 1 {
            for x in 0..w as i64 {
                ya.push(plane * hw + (y + 1) * w as i64 + x);
                yb.push(plane * hw + y * w as i64 + x);
            }
        }
    }
    (Arc::new(xa), Arc::new(xb), Arc::new(ya), Arc::new(yb))
}

/// Tape version of [`loss_smooth`] for training.
pub fn loss_smooth_on_tape(tape: &mut Tape, field: Var) -> Var {
    let s = tape.shape(field).to_vec();
    assert!(s.len() == 3 && s[0] == 2, "loss_smooth expects [2,H,W]");
    let (h, w) = (s[1], s[2]);
    let (xa, xb, ya, yb) = forward_diff_indices(h, w);
    let nx = xa.len();
    let ny = ya.len();
    let fx_a = tape.index_map(field, xa, &[nx]);
    let fx_b = tape.index_map(field, xb, &[nx]);
    let dx = tape.sub(fx_a, fx_b);
    let dx2 = tape.mul(dx, dx);
    let sx = tape.sum_all(dx2);
    let fy_a = tape.index_map(field, ya, &[ny]);
    let fy_b = tape.index_map(field, yb, &[ny]);
    let dy = tape.sub(fy_a, fy_b);
    let dy2 = tape.mul(dy, dy);
    let sy = tape.sum_all(dy2);
    tape.add(sx, sy)
}

/// Scalar handles of the composed objective on a tape.
pub struct LossVars {
    pub total: Var,
    pub org: Var,
    pub lat: Option<Var>,
    pub smooth: Var,
}

/// Build `beta*org + (1-beta)*lat + lambda*smooth` on the tape.
/// `lat` is the precomputed latent MSE (None disables the latent term and
/// gives `org` its full weight, as in the ablation without L_lat).
pub fn loss_total_on_tape(
    tape: &mut Tape,
    warped: Var,
    fixed: Var,
    field: Var,
    lat: Option<Var>,
    weights: LossWeights,
) -> LossVars {
    let org = tape.mse(warped, fixed);
    let smooth = loss_smooth_on_tape(tape, field);
    let sim = match lat {
        Some(lat_var) => {
            let a = tape.scale(org, weights.beta);
            let b = tape.scale(lat_var, 1.0 - weights.beta);
            tape.add(a, b)
        }
        None => org,
    };
    let sm = tape.scale(smooth, weights.lambda);
    let total = tape.add(sim, sm);
    LossVars { total, org, lat, smooth }
}

impl LossBreakdown {
    /// Read scalar values out of the tape after a forward pass.
    pub fn from_tape(tape: &Tape, vars: &LossVars, weights: LossWeights) -> Self {
        let org = tape.scalar(vars.org);
        let lat = vars.lat.map_or(0.0, |v| tape.scalar(v));
        let smooth = tape.scalar(vars.smooth);
        let sim = if vars.lat.is_some() {
            weights.beta * org + (1.0 - weights.beta) * lat
        } else {
            org
        };
        Self { total: tape.scalar(vars.total), sim, org, lat, smooth }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn zero_field_identity_bit_exact() {
        let img = random_image(1, 12, 9);
        let field = DisplacementField2D::zeros(12, 9);
        let out = warp_image(&img, &field).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_shift_translates_with_clamped_border() {
        // u = (1, 0): out(y,x) = img(y, x+1), last column clamps
        let img = random_image(2, 6, 6);
        let mut field = DisplacementField2D::zeros(6, 6);
        for y in 0..6 {
            for x in 0..6 {
                field.set_at(y, x, 1.0, 0.0);
            }
        }
        let out = warp_image(&img, &field).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let exp = img.get(y, (x + 1).min(5));
                assert!((out.get(y, x) - exp).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn half_pixel_shift_averages_neighbors() {
        let mut img = Image2D::zeros(1, 2);
        img.set(0, 0, 0.2);
        img.set(0, 1, 0.8);
        let mut field = DisplacementField2D::zeros(1, 2);
        field.set_at(0, 0, 0.5, 0.0);
        let out = warp_image(&img, &field).unwrap();
        assert!((out.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn warp_rejects_non_finite_field() {
        let img = random_image(3, 4, 4);
        let mut field = DisplacementField2D::zeros(4, 4);
        field.data_mut()[5] = f64::NAN;
        assert!(warp_image(&img, &field).is_err());
        let labels = LabelMap2D::zeros(4, 4);
        assert!(warp_labels(&labels, &field).is_err());
    }

    #[test]
    fn label_warp_matches_rounding_oracle_and_preserves_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut labels = LabelMap2D::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                labels.set(y, x, rng.gen_range(0..4u8));
            }
        }
        let mut field = DisplacementField2D::zeros(16, 16);
        for i in 0..field.data().len() {
            field.data_mut()[i] = rng.gen_range(-3.0..3.0);
        }
        let out = warp_labels(&labels, &field).unwrap();
        let input_set = labels.label_set();
        for y in 0..16 {
            for x in 0..16 {
                let (ux, uy) = field.at(y, x);
                let sy = ((y as f64 + uy).round().max(0.0) as usize).min(15);
                let sx = ((x as f64 + ux).round().max(0.0) as usize).min(15);
                assert_eq!(out.get(y, x), labels.get(sy, sx));
                let v = out.get(y, x);
                assert!(v == 0 || input_set.contains(&v));
            }
        }
    }

    #[test]
    fn zero_field_label_identity() {
        let mut labels = LabelMap2D::zeros(5, 5);
        labels.set(2, 2, 3);
        let out = warp_labels(&labels, &DisplacementField2D::zeros(5, 5)).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn loss_org_hand_values() {
        let a = Image2D::new(128, 128, vec![1.0; 128 * 128]);
        let b = Image2D::zeros(128, 128);
        assert_eq!(loss_org(&a, &b).unwrap(), 1.0);
        assert_eq!(loss_org(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn loss_org_matches_loop_oracle_and_is_symmetric() {
        let a = random_image(5, 9, 7);
        let b = random_image(6, 9, 7);
        let got = loss_org(&a, &b).unwrap();
        let mut acc = 0.0;
        for y in 0..9 {
            for x in 0..7 {
                let d = a.get(y, x) - b.get(y, x);
                acc += d * d;
            }
        }
        acc /= 63.0;
        assert!((got - acc).abs() < 1e-12);
        assert_eq!(got, loss_org(&b, &a).unwrap());
    }

    #[test]
    fn loss_smooth_hand_count() {
        // u_x(p) = x, u_y = 0 on a 4x4 grid: 12 unit x-differences
        let mut field = DisplacementField2D::zeros(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                field.set_at(y, x, x as f64, 0.0);
            }
        }
        assert_eq!(loss_smooth(&field), 12.0);
        // constant field has zero penalty
        let mut cst = DisplacementField2D::zeros(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                cst.set_at(y, x, 3.5, -2.0);
            }
        }
        assert_eq!(loss_smooth(&cst), 0.0);
    }

    #[test]
    fn loss_smooth_tape_matches_plain_and_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut field = DisplacementField2D::zeros(6, 5);
        for i in 0..field.data().len() {
            field.data_mut()[i] = rng.gen_range(-2.0..2.0);
        }
        // independent loop oracle
        let mut acc = 0.0;
        for plane in 0..2 {
            for y in 0..6 {
                for x in 0..5 {
                    let v = |yy: usize, xx: usize| {
                        if plane == 0 {
                            field.at(yy, xx).0
                        } else {
                            field.at(yy, xx).1
                        }
                    };
                    if x + 1 < 5 {
                        acc += (v(y, x + 1) - v(y, x)).powi(2);
                    }
                    if y + 1 < 6 {
                        acc += (v(y + 1, x) - v(y, x)).powi(2);
                    }
                }
            }
        }
        let plain = loss_smooth(&field);
        assert!((plain - acc).abs() < 1e-12);
        let mut tape = Tape::new();
        let f = tape.leaf(field.to_tensor());
        let s = loss_smooth_on_tape(&mut tape, f);
        assert!((tape.scalar(s) - acc).abs() < 1e-12);
    }

    #[test]
    fn loss_total_weighting() {
        let mut tape = Tape::new();
        let a = random_image(8, 6, 6);
        let b = random_image(9, 6, 6);
        let mut field = DisplacementField2D::zeros(6, 6);
        for y in 0..6 {
            for x in 0..6 {
                field.set_at(y, x, 0.1 * y as f64, -0.05 * x as f64);
            }
        }
        let wv = tape.leaf(a.to_tensor());
        let fv = tape.leaf(b.to_tensor());
        let fd = tape.leaf(field.to_tensor());
        let lat = tape.leaf(Tensor::scalar(0.0));
        let lat_loss = tape.mean_all(lat); // 0.0 latent term
        let weights = LossWeights::default();
        let vars = loss_total_on_tape(&mut tape, wv, fv, fd, Some(lat_loss), weights);
        let bd = LossBreakdown::from_tape(&tape, &vars, weights);
        let org = loss_org(&a, &b).unwrap();
        let smooth = loss_smooth(&field);
        assert!((bd.total - (0.6 * org + 0.01 * smooth)).abs() < 1e-12);
        assert!((bd.sim - 0.6 * org).abs() < 1e-12);
        // beta = 1: latent term contributes nothing
        let w1 = LossWeights { lambda: 0.01, beta: 1.0 };
        let vars1 = loss_total_on_tape(&mut tape, wv, fv, fd, Some(lat_loss), w1);
        let bd1 = LossBreakdown::from_tape(&tape, &vars1, w1);
        assert!((bd1.total - (org + 0.01 * smooth)).abs() < 1e-12);
    }

    #[test]
    fn perfect_alignment_constant_field_zero_total() {
        let a = random_image(10, 6, 6);
        let mut tape = Tape::new();
        let wv = tape.leaf(a.to_tensor());
        let fv = tape.leaf(a.to_tensor());
        let fd = tape.leaf(Tensor::full(&[2, 6, 6], 1.25));
        let vars = loss_total_on_tape(&mut tape, wv, fv, fd, None, LossWeights::default());
        assert_eq!(tape.scalar(vars.total), 0.0);
    }

    #[test]
    fn grad_of_total_wrt_field_matches_finite_differences() {
        use crate::tensor::{finite_diff_grad, max_rel_err};
        let moving = random_image(11, 8, 8);
        let fixed = random_image(12, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut field0 = Tensor::zeros(&[2, 8, 8]);
        for v in field0.data_mut().iter_mut() {
            *v = rng.gen_range(-1.3..1.3);
        }
        let weights = LossWeights::default();
        let run = |ft: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let m = tape.leaf(moving.to_tensor());
            let f = tape.leaf(fixed.to_tensor());
            let fd = tape.leaf(ft.clone());
            let warped = tape.warp_bilinear(m, fd);
            let vars = loss_total_on_tape(&mut tape, warped, f, fd, None, weights);
            tape.scalar(vars.total)
        };
        let mut tape = Tape::new();
        let m = tape.leaf(moving.to_tensor());
        let f = tape.leaf(fixed.to_tensor());
        let fd = tape.leaf(field0.clone());
        let warped = tape.warp_bilinear(m, fd);
        let vars = loss_total_on_tape(&mut tape, warped, f, fd, None, weights);
        let grads = tape.backward(vars.total);
        let analytic = grads.get(fd).unwrap().clone();
        let numeric = finite_diff_grad(&field0, run, 1e-6);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-4, "field gradient rel err {err:.3e}");
    }

    #[test]
    fn warp_is_linear_in_image() {
        let img_a = random_image(14, 7, 7);
        let img_b = random_image(15, 7, 7);
        let mut field = DisplacementField2D::zeros(7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for i in 0..field.data().len() {
            field.data_mut()[i] = rng.gen_range(-2.0..2.0);
        }
        let wa = warp_image(&img_a, &field).unwrap();
        let wb = warp_image(&img_b, &field).unwrap();
        let combo = Image2D::new(
            7,
            7,
            img_a.data().iter().zip(img_b.data()).map(|(a, b)| 0.3 * a + 0.7 * b).collect(),
        );
        let wc = warp_image(&combo, &field).unwrap();
        for i in 0..49 {
            let expect = 0.3 * wa.data()[i] + 0.7 * wb.data()[i];
            assert!((wc.data()[i] - expect).abs() < 1e-12);
        }
    }
}
