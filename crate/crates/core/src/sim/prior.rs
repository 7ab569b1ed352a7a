use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};
use crate::rng::{self, Rng};

/// Independent uniform prior over an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrior {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxPrior {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(FslmError::Dimension { expected: lower.len(), got: upper.len() });
        }
        if lower.is_empty() {
            return Err(FslmError::config("prior box has no dimensions"));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(FslmError::config(format!("prior dimension {i}: need finite lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(BoxPrior { lower, upper })
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }

    /// Normalized log density: `-Σ log(width)` inside, `-∞` outside.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -(0..self.dim()).map(|i| self.width(i).ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn sample_one(&self, rng: &mut Rng) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect()
    }

    pub fn sample_with(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.lower[j] + (self.upper[j] - self.lower[j]) * rng.random::<f64>();
            }
        }
        out
    }

    /// `n` i.i.d. draws, one row each; identical for identical seeds.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(FslmError::config("sample count must be at least 1"));
        }
        Ok(self.sample_with(n, &mut rng::rng_from_seed(seed)))
    }

    /// Maps a point of the box to unconstrained coordinates.
    pub fn to_unbounded(&self, theta: &[f64], out: &mut [f64]) {
        for i in 0..self.dim() {
            let u = ((theta[i] - self.lower[i]) / self.width(i)).clamp(1e-300, 1.0 - 1e-16);
            out[i] = (u / (1.0 - u)).ln();
        }
    }

    /// Inverse of [`to_unbounded`](Self::to_unbounded); returns the log
    /// Jacobian `log |dθ/dz|`.
    pub fn from_unbounded(&self, z: &[f64], out: &mut [f64]) -> f64 {
        let mut log_jac = 0.0;
        for i in 0..self.dim() {
            let s = 1.0 / (1.0 + (-z[i]).exp());
            out[i] = self.lower[i] + self.width(i) * s;
            // log σ(z) + log(1 - σ(z)), written to stay finite for large |z|
            log_jac += self.width(i).ln() - softplus(-z[i]) - softplus(z[i]);
        }
        log_jac
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
