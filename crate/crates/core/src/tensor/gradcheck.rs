//! Central finite differences for verifying analytic gradients.

use super::Tensor;

/// Central-difference gradient of scalar `f` at `x`.
pub fn finite_diff_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        diff / 1e-9
    } else {
        diff / scale
    }
}

/// Largest elementwise relative error between two same-shaped tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}
