//! Registration quality metrics: per-label Dice overlap, Jacobian
//! determinant maps of the deformation, folding percentage, and wall-clock
//! timing of a forward pass.

use std::time::Instant;

use crate::error::{CoreError, Result};
use crate::image::{DisplacementField2D, LabelMap2D};

/// Per-pixel determinants of the Jacobian of the full map p + u(p),
/// evaluated with forward differences on the (H-1)x(W-1) stencil domain.
#[derive(Clone, Debug)]
pub struct JacobianMap {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl JacobianMap {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Dice coefficients per requested label plus their mean. Labels absent
/// from both maps count as perfect agreement (DSC 1).
pub fn dsc(pred: &LabelMap2D, target: &LabelMap2D, label_set: &[u8]) -> Result<(Vec<f64>, f64)> {
    if pred.height != target.height || pred.width != target.width {
        return Err(CoreError::shape("dsc: label map shape mismatch"));
    }
    if label_set.is_empty() {
        return Err(CoreError::invalid("dsc: empty label set"));
    }
    let mut scores = Vec::with_capacity(label_set.len());
    for &label in label_set {
        let mut inter = 0usize;
        let mut a = 0usize;
        let mut b = 0usize;
        for (p, t) in pred.data().iter().zip(target.data()) {
            let pa = *p == label;
            let tb = *t == label;
            a += pa as usize;
            b += tb as usize;
            inter += (pa && tb) as usize;
        }
        let score = if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 };
        scores.push(score);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

/// det J of the full map phi(p) = p + u(p): forward differences give
/// det = (1 + du_x/dx)(1 + du_y/dy) - (du_x/dy)(du_y/dx).
pub fn jacobian_determinant(field: &DisplacementField2D) -> Result<JacobianMap> {
    if !field.all_finite() {
        return Err(CoreError::data("jacobian_determinant: non-finite field"));
    }
    if field.height < 2 || field.width < 2 {
        return Err(CoreError::invalid("jacobian_determinant: field too small"));
    }
    let (h, w) = (field.height, field.width);
    let (ho, wo) = (h - 1, w - 1);
    let mut data = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let (ux, uy) = field.at(y, x);
            let (ux_xp, uy_xp) = field.at(y, x + 1);
            let (ux_yp, uy_yp) = field.at(y + 1, x);
            let dux_dx = ux_xp - ux;
            let duy_dx = uy_xp - uy;
            let dux_dy = ux_yp - ux;
            let duy_dy = uy_yp - uy;
            data[y * wo + x] = (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx;
        }
    }
    Ok(JacobianMap { height: ho, width: wo, data })
}

/// Percentage of stencil sites with non-positive determinant.
pub fn folding_percent(jmap: &JacobianMap) -> f64 {
    let n = jmap.data.len();
    if n == 0 {
        return 0.0;
    }
    let folded = jmap.data.iter().filter(|&&v| v <= 0.0).count();
    100.0 * folded as f64 / n as f64
}

/// Median wall-clock seconds of `runs` timed calls after one warm-up call.
pub fn time_registration<F: FnMut()>(mut f: F, runs: usize) -> f64 {
    let runs = runs.max(3);
    f(); // warm-up, excluded
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[runs / 2]
}

/// One evaluated pair in a report.
#[derive(Clone, Debug)]
pub struct PairEval {
    pub pair_id: String,
    pub dsc_per_label: Vec<f64>,
    pub dsc_mean: f64,
    pub folding_percent: f64,
    pub runtime_s: f64,
}

/// Aggregate evaluation results, mirroring the usual DSC / |J|<=0 (%) /
/// time summary columns.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub pairs: Vec<PairEval>,
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = values.clone().count();
        if n == 0 {
            return (0.0, 0.0);
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    }

    pub fn dsc_mean_std(&self) -> (f64, f64) {
        Self::mean_std(self.pairs.iter().map(|p| p.dsc_mean))
    }

    pub fn folding_mean_std(&self) -> (f64, f64) {
        Self::mean_std(self.pairs.iter().map(|p| p.folding_percent))
    }

    pub fn time_mean(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.runtime_s).sum::<f64>() / self.pairs.len() as f64
    }

    /// CSV with one row per pair.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair_id,dsc_mean,dsc_per_label,folding_percent,runtime_s\n");
        for p in &self.pairs {
            let labels =
                p.dsc_per_label.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";");
            s.push_str(&format!(
                "{},{:.6},{},{:.6},{:.6}\n",
                p.pair_id, p.dsc_mean, labels, p.folding_percent, p.runtime_s
            ));
        }
        s
    }

    /// Text block shaped like the usual quantitative table.
    pub fn summary(&self, name: &str) -> String {
        let (dm, ds) = self.dsc_mean_std();
        let (fm, fs) = self.folding_mean_std();
        format!(
            "{name}: n={} | Avg. DSC {:.3} ({:.3}) | |J|<=0 (%) {:.3} ({:.3}) | Time (s) {:.4}{}",
            self.pairs.len(),
            dm,
            ds,
            fm,
            fs,
            self.time_mean(),
            if self.skipped.is_empty() {
                String::new()
            } else {
                format!(" | skipped {}", self.skipped.len())
            }
        )
    }
}
