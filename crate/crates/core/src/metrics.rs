//! Scale-invariant signal-to-distortion ratio.
//!
//! No mean removal is applied before the projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Value reported when the residual vanishes.
pub const SI_SDR_CAP_DB: f64 = 300.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10 log10(|s|^2 / |e|^2)` with `s = (<est, ref> / <ref, ref>) ref` and
/// `e = est - s`, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr(estimate: &Tensor, reference: &Tensor) -> Result<f64> {
    if estimate.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "si_sdr",
            lhs: estimate.shape().to_vec(),
            rhs: reference.shape().to_vec(),
        });
    }
    let (est, r) = (estimate.data(), reference.data());
    let rr = dot(r, r);
    if rr == 0.0 {
        return Err(Error::InvalidArgument("si_sdr reference is identically zero".into()));
    }
    let alpha = dot(est, r) / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (&e, &x) in est.iter().zip(r) {
        let s = alpha * x;
        target += s * s;
        resid += (e - s) * (e - s);
    }
    if !target.is_finite() || !resid.is_finite() {
        return Err(Error::NonFinite { op: "si_sdr" });
    }
    // Treat residual at the rounding level of the target as zero.
    if resid <= target * 1e-30 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / resid).log10()).min(SI_SDR_CAP_DB))
}

/// Mean SI-SDR of noisy and enhanced signals over a set of items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub improvement: f64,
    pub n_items: usize,
}

impl EvalReport {
    /// Builds a report from `(noisy, enhanced)` SI-SDR pairs in dB.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no items to evaluate".into()));
        }
        let n = pairs.len() as f64;
        let noisy = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let enhanced = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        Ok(EvalReport {
            si_sdr_noisy: noisy,
            si_sdr_enhanced: enhanced,
            improvement: enhanced - noisy,
            n_items: pairs.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn hand_example() {
        let v = si_sdr(&t(&[1.0, 1.0]), &t(&[1.0, 0.0])).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn exact_and_scaled_hit_cap() {
        let r = t(&[0.3, -1.2, 0.5, 2.0]);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(si_sdr(&r.map(|x| 2.0 * x), &r).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(si_sdr(&t(&[1.0]), &t(&[0.0])).is_err());
        assert!(si_sdr(&t(&[1.0, 2.0]), &t(&[1.0])).is_err());
    }

    #[test]
    fn report_improvement() {
        let r = EvalReport::from_pairs(&[(0.0, 6.0), (2.0, 10.0)]).unwrap();
        assert_eq!(r.improvement, r.si_sdr_enhanced - r.si_sdr_noisy);
        assert_eq!(r.n_items, 2);
        assert!(EvalReport::from_pairs(&[]).is_err());
    }
}
