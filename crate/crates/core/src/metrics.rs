//! Depth error and accuracy metrics over valid pixels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest predicted depth used in the metrics.
pub const MIN_DEPTH: f64 = 1e-3;
/// Disparities below this are clamped before inversion.
pub const DISPARITY_GUARD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    /// Root mean squared difference of natural logs.
    pub rms_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixel_count: usize,
    pub cap: f64,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 8] = ["rel", "sq_rel", "rms", "rms_log", "log10", "d1", "d2", "d3"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.rel,
            self.sq_rel,
            self.rms,
            self.rms_log,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }
}

/// `depth = f * B / max(d, 1e-6)`.
pub fn disparity_to_depth(d: &Tensor, focal_px: f64, baseline_m: f64) -> Tensor {
    d.map(|v| focal_px * baseline_m / v.max(DISPARITY_GUARD))
}

/// Metrics over pixels with `0 < gt <= cap` (and `mask`, when given).
/// Predictions are clamped into `[1e-3, cap]` first.
pub fn evaluate(pred: &[f64], gt: &[f64], cap: f64, mask: Option<&[bool]>) -> Result<MetricReport> {
    if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            expected: alloc::vec![gt.len()],
            found: alloc::vec![pred.len()],
        });
    }
    if !(cap > 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("cap must be positive, got {cap}")));
    }
    let (mut rel, mut sq_rel, mut sq, mut sq_log, mut log10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for i in 0..gt.len() {
        let g = gt[i];
        if !(g > 0.0 && g <= cap) || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let p = pred[i].clamp(MIN_DEPTH, cap);
        let diff = p - g;
        rel += libm::fabs(diff) / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = libm::log(p) - libm::log(g);
        sq_log += dl * dl;
        log10 += libm::fabs(libm::log10(p) - libm::log10(g));
        let delta = (g / p).max(p / g);
        for (k, t) in [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if delta < *t {
                hits[k] += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let q = n as f64;
    Ok(MetricReport {
        rel: rel / q,
        sq_rel: sq_rel / q,
        rms: libm::sqrt(sq / q),
        rms_log: libm::sqrt(sq_log / q),
        log10: log10 / q,
        delta1: hits[0] as f64 / q,
        delta2: hits[1] as f64 / q,
        delta3: hits[2] as f64 / q,
        valid_pixel_count: n,
        cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity() {
        let d = [1.0, 2.5, 7.0];
        let r = evaluate(&d, &d, 80.0, None).unwrap();
        assert_eq!((r.rel, r.rms, r.delta1), (0.0, 0.0, 1.0));
    }

    #[test]
    fn two_pixel_case() {
        let r = evaluate(&[2.0, 2.0], &[1.0, 4.0], 80.0, None).unwrap();
        assert_eq!(r.rel, 0.75);
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 0.0);
        assert_eq!(r.delta3, 0.0);
    }

    #[test]
    fn within_threshold() {
        let r = evaluate(&[1.2], &[1.0], 80.0, None).unwrap();
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn cap_and_mask_filter() {
        let r = evaluate(&[1.0, 1.0, 1.0], &[1.0, 90.0, 0.0], 80.0, None).unwrap();
        assert_eq!(r.valid_pixel_count, 1);
        let r = evaluate(&[1.0, 2.0], &[1.0, 1.0], 80.0, Some(&[false, true])).unwrap();
        assert_eq!(r.rel, 1.0);
        assert!(matches!(evaluate(&[1.0], &[0.0], 80.0, None), Err(Error::EmptyValidSet)));
    }

    #[test]
    fn depth_conversion() {
        let d = Tensor::from_vec(alloc::vec![32.0, 64.0]);
        let z = disparity_to_depth(&d, 64.0, 0.5);
        assert_eq!(z.data(), &[1.0, 0.5]);
    }
}
