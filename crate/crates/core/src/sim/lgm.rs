//! Linear Gaussian model: `x = μ₀ + Lθ + η`, `η ~ N(0, σ²·I)`.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};
use crate::rng::{self, Rng};
use crate::sim::BoxPrior;

pub const LGM_PARAM_NAMES: [&str; 3] = ["theta0", "theta1", "theta2"];
pub const LGM_FEATURE_NAMES: [&str; 4] = ["x0", "x1", "x2", "x3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgmConfig {
    pub mu0: Vec<f64>,
    /// Row-major, one row per feature.
    pub l: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl Default for LgmConfig {
    /// x₀ senses θ₀, x₁ senses θ₁, x₂ senses θ₁ + θ₂ and x₃ is pure noise.
    fn default() -> Self {
        LgmConfig {
            mu0: vec![0.0; 4],
            l: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]],
            sigma: 1.0,
        }
    }
}

impl LgmConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            problems.push(format!("sigma must be positive and finite, got {}", self.sigma));
        }
        if self.l.len() != self.mu0.len() {
            problems.push(format!("L has {} rows but mu0 has {} entries", self.l.len(), self.mu0.len()));
        }
        if self.l.is_empty() || self.l[0].is_empty() {
            problems.push("L must be non-empty".into());
        } else if self.l.iter().any(|r| r.len() != self.l[0].len()) {
            problems.push("L rows have unequal lengths".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FslmError::config(problems.join("; ")))
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.l.len()
    }

    pub fn param_dim(&self) -> usize {
        self.l.first().map_or(0, Vec::len)
    }

    /// Noise-free mean `μ₀ + Lθ`.
    pub fn mean(&self, theta: &[f64]) -> Vec<f64> {
        self.l
            .iter()
            .zip(&self.mu0)
            .map(|(row, m)| m + row.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>())
            .collect()
    }

    pub fn simulate_with(&self, theta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        if theta.len() != self.param_dim() {
            return Err(FslmError::Dimension { expected: self.param_dim(), got: theta.len() });
        }
        let mut x = self.mean(theta);
        for v in &mut x {
            let eta: f64 = rng.sample(StandardNormal);
            *v += self.sigma * eta;
        }
        Ok(x)
    }

    pub fn simulate(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
        self.simulate_with(theta, &mut rng::rng_from_seed(seed))
    }
}

/// Exact posterior of the LGM under a box prior, with the likelihood
/// restricted to the features in `keep`. This is the ground truth that
/// learned posteriors are checked against.
#[derive(Debug, Clone)]
pub struct LgmPosterior {
    config: LgmConfig,
    prior: BoxPrior,
    keep: Vec<usize>,
    /// `(x_S - μ₀_S) / σ`
    target: Vec<f64>,
    /// `L_S / σ`, row-major `|S| × p`.
    design: Vec<f64>,
    log_norm: f64,
    min_sq_residual: f64,
}

impl LgmPosterior {
    pub fn new(config: &LgmConfig, prior: &BoxPrior, x_obs: &[f64], keep: &[usize]) -> Result<Self> {
        config.validate()?;
        let p = config.param_dim();
        if prior.dim() != p {
            return Err(FslmError::Dimension { expected: p, got: prior.dim() });
        }
        if x_obs.len() != config.feature_dim() {
            return Err(FslmError::Dimension { expected: config.feature_dim(), got: x_obs.len() });
        }
        if keep.is_empty() {
            return Err(FslmError::EmptyKeep);
        }
        for &k in keep {
            if k >= config.feature_dim() {
                return Err(FslmError::BadIndex { index: k, dim: config.feature_dim() });
            }
        }
        let s = config.sigma;
        let target: Vec<f64> = keep.iter().map(|&k| (x_obs[k] - config.mu0[k]) / s).collect();
        let design: Vec<f64> = keep.iter().flat_map(|&k| config.l[k].iter().map(move |a| a / s)).collect();
        let log_norm = -(keep.len() as f64) * (0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln());
        let min_sq_residual = least_squares_residual(&design, keep.len(), p, &target);
        Ok(LgmPosterior {
            config: config.clone(),
            prior: prior.clone(),
            keep: keep.to_vec(),
            target,
            design,
            log_norm,
            min_sq_residual,
        })
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn param_dim(&self) -> usize {
        self.config.param_dim()
    }

    pub fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        let p = self.config.param_dim();
        let mut sq = 0.0;
        for (i, t) in self.target.iter().enumerate() {
            let row = &self.design[i * p..(i + 1) * p];
            let r = t - row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
            sq += r * r;
        }
        self.log_norm - 0.5 * sq
    }

    /// Unnormalized log posterior: Gaussian log likelihood of the kept
    /// features plus the (normalized) box prior.
    pub fn logpdf(&self, theta: &[f64]) -> f64 {
        let lp = self.prior.log_density(theta);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        self.log_likelihood(theta) + lp
    }

    /// Exact draws by rejection from the prior. The envelope is the
    /// likelihood at the unconstrained least-squares optimum.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng::rng_from_seed(seed);
        let p = self.config.param_dim();
        let log_max = self.log_norm - 0.5 * self.min_sq_residual;
        let mut out = Array2::zeros((n, p));
        let mut filled = 0;
        while filled < n {
            let theta = self.prior.sample_one(&mut rng);
            let u: f64 = rng.random();
            if u.ln() < self.log_likelihood(&theta) - log_max {
                out.row_mut(filled).iter_mut().zip(&theta).for_each(|(o, t)| *o = *t);
                filled += 1;
            }
        }
        out
    }
}

/// Free-function form of [`LgmPosterior::logpdf`].
pub fn lgm_posterior_logpdf(
    config: &LgmConfig,
    prior: &BoxPrior,
    x_obs: &[f64],
    keep: &[usize],
    theta: &[f64],
) -> Result<f64> {
    Ok(LgmPosterior::new(config, prior, x_obs, keep)?.logpdf(theta))
}

/// `min_θ ‖Aθ - y‖²` via modified Gram–Schmidt on the columns of `A`
/// (`rows × cols`, row-major). Rank-deficient columns are skipped.
fn least_squares_residual(a: &[f64], rows: usize, cols: usize, y: &[f64]) -> f64 {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| a[i * cols + j]).collect();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for q in &basis {
            let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= d * qi);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * norm0.max(1.0) {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut r = y.to_vec();
    for q in &basis {
        let d: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
        r.iter_mut().zip(q).for_each(|(x, qi)| *x -= d * qi);
    }
    r.iter().map(|x| x * x).sum()
}
