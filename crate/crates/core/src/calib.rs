//! Isotonic regression for rate calibration: a weighted least-squares fit
//! constrained to be non-decreasing in the predicted rate, solved by
//! pool-adjacent-violators, plus piecewise-linear application of the
//! fitted map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("cannot fit a calibration map to zero points")]
    Empty,
    #[error("weight {0} is not strictly positive")]
    BadWeight(f64),
    #[error("non-finite input ({0}, {1})")]
    NonFinite(f64, f64),
}

/// A fitted monotone map from predicted rate to calibrated rate:
/// strictly increasing breakpoints with non-decreasing fitted values,
/// applied by linear interpolation and constant extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub breakpoints: Vec<f64>,
    pub fitted: Vec<f64>,
    pub weights: Vec<f64>,
}

/// One calibration observation: a predicted rate, the observed outcome
/// (e.g. empirical click frequency), and its weight.
pub type CalibPoint = (f64, f64, f64);

/// Weighted isotonic fit. Ties in the predicted value are pre-merged by
/// weighted average, then adjacent blocks whose means violate the
/// non-decreasing order are pooled until none remain.
pub fn fit_isotonic(points: &[CalibPoint]) -> Result<CalibrationMap, CalibError> {
    if points.is_empty() {
        return Err(CalibError::Empty);
    }
    for &(p, y, w) in points {
        if !(p.is_finite() && y.is_finite() && w.is_finite()) {
            return Err(CalibError::NonFinite(p, y));
        }
        if w <= 0.0 {
            return Err(CalibError::BadWeight(w));
        }
    }
    let mut sorted: Vec<CalibPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Merge duplicate predicted values into one weighted point each.
    let mut merged: Vec<CalibPoint> = Vec::with_capacity(sorted.len());
    for (p, y, w) in sorted {
        match merged.last_mut() {
            Some((lp, ly, lw)) if *lp == p => {
                let total = *lw + w;
                *ly = (*ly * *lw + y * w) / total;
                *lw = total;
            }
            _ => merged.push((p, y, w)),
        }
    }

    // Pool adjacent violators: each block tracks (Σw, Σw·y, point count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(merged.len());
    for &(_, y, w) in &merged {
        blocks.push((w, w * y, 1));
        while blocks.len() >= 2 {
            let (w2, wy2, n2) = blocks[blocks.len() - 1];
            let (w1, wy1, n1) = blocks[blocks.len() - 2];
            if wy2 / w2 < wy1 / w1 {
                blocks.pop();
                blocks.pop();
                blocks.push((w1 + w2, wy1 + wy2, n1 + n2));
            } else {
                break;
            }
        }
    }

    let mut fitted = Vec::with_capacity(merged.len());
    for &(w, wy, n) in &blocks {
        let mean = wy / w;
        fitted.extend(std::iter::repeat(mean).take(n));
    }
    Ok(CalibrationMap {
        breakpoints: merged.iter().map(|&(p, _, _)| p).collect(),
        fitted,
        weights: merged.iter().map(|&(_, _, w)| w).collect(),
    })
}

impl CalibrationMap {
    /// Calibrated value at `predicted`: linear interpolation between
    /// breakpoints, constant beyond the ends, clamped to [0, 1].
    pub fn apply(&self, predicted: f64) -> f64 {
        let b = &self.breakpoints;
        let f = &self.fitted;
        let raw = if predicted <= b[0] {
            f[0]
        } else if predicted >= b[b.len() - 1] {
            f[f.len() - 1]
        } else {
            let hi = b.partition_point(|&x| x <= predicted);
            let (x0, x1) = (b[hi - 1], b[hi]);
            let t = (predicted - x0) / (x1 - x0);
            f[hi - 1] + t * (f[hi] - f[hi - 1])
        };
        raw.clamp(0.0, 1.0)
    }

    /// Weighted squared error of this map against the given points.
    pub fn weighted_sse(&self, points: &[CalibPoint]) -> f64 {
        points
            .iter()
            .map(|&(p, y, w)| {
                let d = self.apply(p) - y;
                w * d * d
            })
            .sum()
    }
}
