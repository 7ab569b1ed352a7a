use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use crate::error::{FslmError, Result};

/// Relative size of the distance substituted for an exact zero.
pub const DUPLICATE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub n: usize,
    pub m: usize,
    pub dim: usize,
    /// Points of X whose nearest other X coincided with them.
    pub duplicates_within_x: usize,
    /// Points of X that coincided with some point of Y.
    pub duplicates_across: usize,
    pub epsilon: f64,
}

/// 1-NN estimate of KL(p_X ‖ p_Y) from samples,
///
/// `(d/N) Σᵢ ln(νᵢ/ρᵢ) + ln(M/(N−1))`,
///
/// with `ρᵢ` the distance from `Xᵢ` to its nearest other `X` and `νᵢ` the
/// distance to its nearest `Y`. Zero distances are replaced by
/// `DUPLICATE_EPSILON` times the largest coordinate standard deviation of
/// the pooled samples and counted.
pub fn kl_estimate(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<KlEstimate> {
    let (n, d) = x.dim();
    let m = y.nrows();
    if n < 2 {
        return Err(FslmError::TooFewSamples { needed: 2, got: n });
    }
    if m < 1 {
        return Err(FslmError::TooFewSamples { needed: 1, got: 0 });
    }
    if y.ncols() != d {
        return Err(FslmError::Dimension { expected: d, got: y.ncols() });
    }
    let tx = KdTree::build(x)?;
    let ty = KdTree::build(y)?;
    let epsilon = DUPLICATE_EPSILON * pooled_scale(x, y);

    let terms: Vec<(f64, bool, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (_, rho) = tx.nearest_excluding_self(i).expect("n >= 2");
            let (_, nu) = ty.nearest(tx.point(i));
            let (rho, dup_x) = if rho == 0.0 { (epsilon, true) } else { (rho, false) };
            let (nu, dup_y) = if nu == 0.0 { (epsilon, true) } else { (nu, false) };
            ((nu / rho).ln(), dup_x, dup_y)
        })
        .collect();
    let mut logs: Vec<f64> = terms.iter().map(|t| t.0).collect();
    logs.sort_by(f64::total_cmp);
    let sum: f64 = logs.iter().sum();
    let value = d as f64 / n as f64 * sum + (m as f64 / (n - 1) as f64).ln();
    Ok(KlEstimate {
        value,
        n,
        m,
        dim: d,
        duplicates_within_x: terms.iter().filter(|t| t.1).count(),
        duplicates_across: terms.iter().filter(|t| t.2).count(),
        epsilon,
    })
}

fn pooled_scale(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let total = (x.nrows() + y.nrows()) as f64;
    let mut scale: f64 = 0.0;
    for j in 0..x.ncols() {
        let vals = x.column(j).into_iter().chain(y.column(j).into_iter());
        let mean = vals.clone().sum::<f64>() / total;
        let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / total;
        scale = scale.max(var.sqrt());
    }
    if scale > 0.0 {
        scale
    } else {
        1.0
    }
}
