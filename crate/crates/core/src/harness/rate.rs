//! Linear-rate estimation from residual sequences.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    /// `exp(slope)` of `ln residual` against `k`.
    pub rate: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit over the last `tail_fraction` of the `(k, residual)`
/// points. Non-positive residuals in the window are skipped; at least five
/// positive ones are required.
pub fn rate_fit(points: &[(usize, f64)], tail_fraction: f64) -> Result<RateFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("tail fraction {tail_fraction} must lie in (0, 1]")));
    }
    let take = ((points.len() as f64) * tail_fraction).ceil() as usize;
    let tail: Vec<(f64, f64)> = points[points.len() - take..]
        .iter()
        .filter(|(_, r)| *r > 0.0 && r.is_finite())
        .map(|&(k, r)| (k as f64, r.ln()))
        .collect();
    if tail.len() < 5 {
        return Err(Error::InsufficientData(format!("{} positive residuals in the tail, need 5", tail.len())));
    }
    let n = tail.len() as f64;
    let mx = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = tail.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("tail points share one k".into()));
    }
    let slope = sxy / sxx;
    let ss_tot: f64 = tail.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = tail.iter().map(|p| (p.1 - (my + slope * (p.0 - mx))).powi(2)).sum();
    // a flat tail leaves only rounding noise in both sums
    let flat = ss_tot <= n * (16.0 * f64::EPSILON * my.abs().max(1.0)).powi(2);
    let r_squared = if flat { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(RateFit { rate: slope.exp(), r_squared, points: tail.len() })
}

/// Fit on a trace's records.
pub fn rate_fit_trace(trace: &crate::record::RunTrace, tail_fraction: f64) -> Result<RateFit> {
    let pts: Vec<(usize, f64)> = trace.records.iter().map(|r| (r.k, r.residual)).collect();
    rate_fit(&pts, tail_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_and_constant() {
        let pts: Vec<_> = (0..40).map(|k| (k, 0.5f64.powi(k as i32))).collect();
        let f = rate_fit(&pts, 0.5).unwrap();
        assert!((f.rate - 0.5).abs() <= 1e-9);
        assert!((f.r_squared - 1.0).abs() <= 1e-12);
        let flat: Vec<_> = (0..10).map(|k| (k, 3.0)).collect();
        let f = rate_fit(&flat, 1.0).unwrap();
        assert_eq!(f.rate, 1.0);
        assert_eq!(f.r_squared, 1.0);
    }

    #[test]
    fn needs_five_points() {
        let pts: Vec<_> = (0..4).map(|k| (k, 1.0)).collect();
        assert!(matches!(rate_fit(&pts, 1.0), Err(Error::InsufficientData(_))));
        let zeros: Vec<_> = (0..10).map(|k| (k, if k < 6 { 1.0 } else { 0.0 })).collect();
        assert!(matches!(rate_fit(&zeros, 0.5), Err(Error::InsufficientData(_))));
    }
}
