use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};
use crate::linalg::spd_solve;
use crate::nn::column_moments;

/// Logistic model `c(θ) = σ(w·θ̃ + b)` of the probability that a simulation
/// at θ is valid, with θ̃ the standardized parameters. Single-class data
/// yields the constant model `c ≡ observed rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Set when the model is constant; `log_prob_valid` then returns its log.
    pub constant: Option<f64>,
}

fn log_sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        -(-eta).exp().ln_1p()
    } else {
        eta - eta.exp().ln_1p()
    }
}

impl CalibrationModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn constant(dim: usize, rate: f64) -> Self {
        CalibrationModel { mean: vec![0.0; dim], scale: vec![1.0; dim], weights: vec![0.0; dim], bias: 0.0, constant: Some(rate) }
    }

    fn eta(&self, theta: &[f64]) -> f64 {
        self.bias + theta.iter().zip(&self.mean).zip(&self.scale).zip(&self.weights).map(|(((t, m), s), w)| w * (t - m) / s).sum::<f64>()
    }

    pub fn log_prob_valid(&self, theta: &[f64]) -> f64 {
        match self.constant {
            Some(c) => c.ln(),
            None => log_sigmoid(self.eta(theta)),
        }
    }

    pub fn prob_valid(&self, theta: &[f64]) -> f64 {
        self.log_prob_valid(theta).exp()
    }

    /// Coefficients in original parameter units.
    pub fn direction(&self) -> Vec<f64> {
        self.weights.iter().zip(&self.scale).map(|(w, s)| w / s).collect()
    }
}

/// Logistic regression by Newton's method (IRLS) with a tiny ridge term for
/// separable data.
pub fn fit_calibration(thetas: ArrayView2<f64>, valid: &[bool]) -> Result<CalibrationModel> {
    let (n, d) = thetas.dim();
    if valid.len() != n {
        return Err(FslmError::Dimension { expected: n, got: valid.len() });
    }
    if n == 0 {
        return Err(FslmError::TooFewSamples { needed: 1, got: 0 });
    }
    let positives = valid.iter().filter(|v| **v).count();
    if positives == 0 || positives == n {
        log::warn!("calibration data has a single class; using a constant model");
        return Ok(CalibrationModel::constant(d, positives as f64 / n as f64));
    }
    let (mean, scale) = column_moments(thetas);
    let p = d + 1;
    let rows: Vec<Vec<f64>> = thetas
        .rows()
        .into_iter()
        .map(|r| {
            let mut x: Vec<f64> = r.iter().zip(&mean).zip(&scale).map(|((t, m), s)| (t - m) / s).collect();
            x.push(1.0);
            x
        })
        .collect();
    let mut beta = vec![0.0; p];
    const RIDGE: f64 = 1e-6;
    for _ in 0..100 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        for (x, &y) in rows.iter().zip(valid) {
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let r = if y { 1.0 } else { 0.0 } - mu;
            let w = (mu * (1.0 - mu)).max(1e-12);
            for i in 0..p {
                grad[i] += r * x[i];
                for j in 0..=i {
                    hess[i * p + j] += w * x[i] * x[j];
                }
            }
        }
        for i in 0..p {
            grad[i] -= RIDGE * n as f64 * beta[i];
            hess[i * p + i] += RIDGE * n as f64;
            for j in 0..i {
                hess[j * p + i] = hess[i * p + j];
            }
        }
        let step = spd_solve(&hess, p, &grad).ok_or_else(|| FslmError::config("calibration Hessian is singular"))?;
        let mut change: f64 = 0.0;
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
            change = change.max(s.abs());
        }
        if change < 1e-10 {
            break;
        }
    }
    Ok(CalibrationModel { mean, scale, weights: beta[..d].to_vec(), bias: beta[d], constant: None })
}
