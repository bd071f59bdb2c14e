use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Default window width, in HU.
pub const DEFAULT_WINDOW_HU: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Mean of `sCT - mCT`.
    Signed,
    /// Mean of `mCT - sCT`, the prediction-error orientation.
    PredictionError,
    /// Mean of `|sCT - mCT|`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Centre of the window on the true-intensity axis.
    pub center: f64,
    pub value: f64,
    pub count: usize,
}

/// Windowed mean residual over the true-intensity range.
///
/// Windows are `[min + k w, min + (k+1) w)` with `min` the smallest true
/// intensity; only non-empty windows are emitted, in increasing order.
pub fn smoothed_residuals(mct: &[f64], sct: &[f64], window: f64, mode: ResidualMode) -> Result<Vec<CurvePoint>> {
    if mct.len() != sct.len() {
        return Err(Error::dims("residual pairs", mct.len(), sct.len()));
    }
    if mct.is_empty() {
        return Err(Error::EmptyInput("no residual pairs"));
    }
    if !(window > 0.0) || !window.is_finite() {
        return Err(Error::InvalidArgument(format!("window must be > 0, got {window}")));
    }
    if mct.iter().chain(sct).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual pairs"));
    }
    let lo = mct.iter().copied().fold(f64::INFINITY, f64::min);
    let mut bins: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (&m, &s) in mct.iter().zip(sct) {
        let k = ((m - lo) / window).floor() as u64;
        let r = match mode {
            ResidualMode::Signed => s - m,
            ResidualMode::PredictionError => m - s,
            ResidualMode::Absolute => (s - m).abs(),
        };
        let e = bins.entry(k).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(k, (sum, count))| CurvePoint {
            center: lo + (k as f64 + 0.5) * window,
            value: sum / count as f64,
            count,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_and_shifted() {
        let m: Vec<f64> = (0..50).map(|i| -100.0 + 7.3 * i as f64).collect();
        for mode in [ResidualMode::Signed, ResidualMode::Absolute] {
            assert!(smoothed_residuals(&m, &m, 20.0, mode).unwrap().iter().all(|p| p.value == 0.0));
        }
        // Integer-valued inputs keep the shift exact.
        let m: Vec<f64> = (0..50).map(|i| -100.0 + 7.0 * i as f64).collect();
        let s: Vec<f64> = m.iter().map(|v| v + 7.0).collect();
        for mode in [ResidualMode::Signed, ResidualMode::Absolute] {
            assert!(smoothed_residuals(&m, &s, 20.0, mode).unwrap().iter().all(|p| p.value == 7.0));
        }
        let e = smoothed_residuals(&m, &s, 20.0, ResidualMode::PredictionError).unwrap();
        assert!(e.iter().all(|p| p.value == -7.0));
    }

    #[test]
    fn hand_computed_three_windows() {
        // Anchor 0: windows [0,20) [20,40) [40,60).
        let m = [0.0, 5.0, 19.0, 20.0, 25.0, 39.5, 40.0, 41.0, 55.0, 59.0];
        let s = [2.0, 3.0, 19.0, 30.0, 20.0, 40.5, 35.0, 51.0, 55.0, 62.0];
        let signed = smoothed_residuals(&m, &s, 20.0, ResidualMode::Signed).unwrap();
        let abs = smoothed_residuals(&m, &s, 20.0, ResidualMode::Absolute).unwrap();
        // Residuals: [2, -2, 0] [10, -5, 1] [-5, 10, 0, 3]
        let want_signed = [0.0 / 3.0, 6.0 / 3.0, 8.0 / 4.0];
        let want_abs = [4.0 / 3.0, 16.0 / 3.0, 18.0 / 4.0];
        let centers = [10.0, 30.0, 50.0];
        let counts = [3, 3, 4];
        for i in 0..3 {
            assert_eq!(signed[i].center, centers[i]);
            assert_eq!(signed[i].count, counts[i]);
            assert!((signed[i].value - want_signed[i]).abs() <= 1e-12);
            assert!((abs[i].value - want_abs[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_windows_are_skipped_and_bad_input_rejected() {
        let c = smoothed_residuals(&[0.0, 100.0], &[1.0, 101.0], 20.0, ResidualMode::Signed).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].center, 110.0);
        assert!(smoothed_residuals(&[], &[], 20.0, ResidualMode::Signed).is_err());
        assert!(smoothed_residuals(&[1.0], &[1.0], 0.0, ResidualMode::Signed).is_err());
        assert!(smoothed_residuals(&[1.0], &[], 20.0, ResidualMode::Signed).is_err());
    }

    proptest! {
        #[test]
        fn count_weighted_windows_give_global_mean(
            pairs in proptest::collection::vec((-1000.0f64..3000.0, -300.0f64..300.0), 1..400),
            window in 1.0f64..100.0,
        ) {
            let m: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let s: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let curve = smoothed_residuals(&m, &s, window, ResidualMode::Signed).unwrap();
            let n: usize = curve.iter().map(|p| p.count).sum();
            prop_assert_eq!(n, m.len());
            let pooled: f64 = curve.iter().map(|p| p.value * p.count as f64).sum::<f64>() / n as f64;
            let direct: f64 = s.iter().zip(&m).map(|(a, b)| a - b).sum::<f64>() / n as f64;
            prop_assert!((pooled - direct).abs() <= 1e-9);
        }
    }
}
