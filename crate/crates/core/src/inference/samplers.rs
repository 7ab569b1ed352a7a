use ndarray::{s, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::posterior::{LogDensity, SampleSet, SamplerDiagnostics};
use crate::error::{FslmError, Result};
use crate::linalg::cholesky_in_place;
use crate::rng::{child_rng, derive_seed, Rng};
use crate::sim::BoxPrior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Rejection,
    Mcmc,
    Slice,
}

impl std::str::FromStr for SamplerKind {
    type Err = FslmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rejection" => Ok(SamplerKind::Rejection),
            "mcmc" => Ok(SamplerKind::Mcmc),
            "slice" => Ok(SamplerKind::Slice),
            other => Err(FslmError::config(format!("unknown sampler {other:?} (rejection, mcmc, slice)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n: usize,
    /// Chain count for the Markov samplers.
    pub chains: usize,
    /// Burn-in per chain as a fraction of its kept draws.
    pub burn_in_fraction: f64,
    /// Lower bound on burn-in iterations per chain.
    pub min_burn_in: usize,
    /// Keep every `thin`-th state of a Markov chain.
    pub thin: usize,
    /// Prior draws used to locate the rejection envelope and chain starts.
    pub envelope_draws: usize,
    /// Added to the maximum log density found among the envelope draws.
    pub envelope_log_margin: f64,
    pub min_acceptance: f64,
    /// Slice sampler initial bracket width, in logit units.
    pub slice_width: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Rejection,
            n: 500,
            chains: 4,
            burn_in_fraction: 0.25,
            min_burn_in: 200,
            thin: 1,
            envelope_draws: 10_000,
            envelope_log_margin: 10f64.ln(),
            min_acceptance: 1e-6,
            slice_width: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n == 0 {
            v.push("sampler n must be at least 1".to_string());
        }
        if self.kind != SamplerKind::Rejection && self.chains < 2 {
            v.push("Markov samplers need at least 2 chains".to_string());
        }
        if !(self.burn_in_fraction >= 0.0 && self.burn_in_fraction.is_finite()) {
            v.push("burn_in_fraction must be non-negative".to_string());
        }
        if self.thin == 0 {
            v.push("thin must be at least 1".to_string());
        }
        if self.envelope_draws == 0 {
            v.push("envelope_draws must be at least 1".to_string());
        }
        if !(self.envelope_log_margin >= 0.0) {
            v.push("envelope_log_margin must be non-negative".to_string());
        }
        if !(self.min_acceptance > 0.0 && self.min_acceptance < 1.0) {
            v.push("min_acceptance must lie in (0, 1)".to_string());
        }
        if !(self.slice_width > 0.0 && self.slice_width.is_finite()) {
            v.push("slice_width must be positive".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(FslmError::config(v.join("; ")))
        }
    }
}

pub fn sample_posterior(target: &dyn LogDensity, prior: &BoxPrior, config: &SamplerConfig, seed: u64) -> Result<SampleSet> {
    match config.kind {
        SamplerKind::Rejection => rejection_sample(target, prior, config, seed),
        SamplerKind::Mcmc => mcmc_sample(target, prior, config, seed),
        SamplerKind::Slice => slice_sample(target, prior, config, seed),
    }
}

const PROPOSAL_BATCH: usize = 4096;

/// Rejection sampling with the prior as proposal. The envelope is the
/// largest log density among `envelope_draws` prior draws plus a margin;
/// proposals exceeding it are counted, since they make the draws inexact.
pub fn rejection_sample(target: &dyn LogDensity, prior: &BoxPrior, config: &SamplerConfig, seed: u64) -> Result<SampleSet> {
    config.validate()?;
    check_dims(target, prior)?;
    let mut rng = child_rng(seed, 0);
    let probe = prior.sample_with(config.envelope_draws, &mut rng);
    let max = target.logpdf_batch(probe.view()).into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(FslmError::EnvelopeFailure { rate: 0.0, min: config.min_acceptance });
    }
    let log_m = max + config.envelope_log_margin;
    let d = prior.dim();
    let mut out = Array2::zeros((config.n, d));
    let (mut filled, mut proposals, mut violations) = (0usize, 0u64, 0u64);
    let give_up = (10.0 / config.min_acceptance).ceil() as u64;
    while filled < config.n {
        let batch = prior.sample_with(PROPOSAL_BATCH, &mut rng);
        let lps = target.logpdf_batch(batch.view());
        for (row, lp) in batch.rows().into_iter().zip(lps) {
            proposals += 1;
            if lp > log_m {
                violations += 1;
            }
            let u: f64 = rng.random();
            if u.ln() < lp - log_m {
                out.row_mut(filled).assign(&row);
                filled += 1;
                if filled == config.n {
                    break;
                }
            }
        }
        let rate = filled as f64 / proposals as f64;
        if proposals >= give_up && rate < config.min_acceptance {
            return Err(FslmError::EnvelopeFailure { rate, min: config.min_acceptance });
        }
    }
    let mut warnings = Vec::new();
    if violations > 0 {
        warnings.push(format!("{violations} proposals exceeded the envelope; draws are approximate"));
    }
    Ok(SampleSet {
        samples: out,
        diagnostics: SamplerDiagnostics {
            sampler: "rejection".into(),
            seed,
            n: config.n,
            proposals: Some(proposals),
            acceptance_rate: Some(config.n as f64 / proposals as f64),
            log_envelope: Some(log_m),
            envelope_violations: Some(violations),
            warnings,
            ..SamplerDiagnostics::default()
        },
    })
}

fn check_dims(target: &dyn LogDensity, prior: &BoxPrior) -> Result<()> {
    if target.dim() != prior.dim() {
        return Err(FslmError::Dimension { expected: prior.dim(), got: target.dim() });
    }
    Ok(())
}

/// Log density in logit coordinates, including the Jacobian.
fn unbounded_logpdf(target: &dyn LogDensity, prior: &BoxPrior, z: &[f64], theta: &mut [f64]) -> f64 {
    let log_jac = prior.from_unbounded(z, theta);
    let lp = target.logpdf(theta);
    if lp == f64::NEG_INFINITY {
        lp
    } else {
        lp + log_jac
    }
}

/// Best of `draws` prior samples, as the starting point of a chain.
fn chain_start(target: &dyn LogDensity, prior: &BoxPrior, draws: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let cands = prior.sample_with(draws, rng);
    let lps = target.logpdf_batch(cands.view());
    let (best, lp) = lps
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if !lp.is_finite() {
        return Err(FslmError::config("target density is -inf at every initial candidate"));
    }
    let mut z = vec![0.0; prior.dim()];
    prior.to_unbounded(cands.row(best).as_slice().unwrap(), &mut z);
    Ok(z)
}

struct Chain {
    draws: Array2<f64>,
    accepted: u64,
    steps: u64,
}

fn burn_in(config: &SamplerConfig, per_chain: usize) -> usize {
    ((config.burn_in_fraction * (per_chain * config.thin) as f64).ceil() as usize).max(config.min_burn_in)
}

fn run_chains<F>(config: &SamplerConfig, seed: u64, run: F) -> Result<(Vec<Chain>, usize)>
where
    F: Fn(usize, usize, &mut Rng) -> Result<Chain> + Sync,
{
    let per_chain = config.n.div_ceil(config.chains);
    let burn = burn_in(config, per_chain);
    let chains: Result<Vec<Chain>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(derive_seed(seed, 1), c as u64);
            run(per_chain, burn, &mut rng)
        })
        .collect();
    Ok((chains?, burn))
}

fn assemble(chains: Vec<Chain>, config: &SamplerConfig, seed: u64, name: &str, burn: usize) -> SampleSet {
    let views: Vec<_> = chains.iter().map(|c| c.draws.view()).collect();
    let r_hat = split_r_hat(&views);
    let lag1 = lag1_autocorrelation(&views);
    let all = ndarray::concatenate(Axis(0), &views).expect("equal chain shapes");
    let samples = all.slice(s![..config.n, ..]).to_owned();
    let (acc, steps) = chains.iter().fold((0, 0), |a, c| (a.0 + c.accepted, a.1 + c.steps));
    let mut warnings = Vec::new();
    if let Some(bad) = r_hat.iter().position(|r| !(*r <= 1.2)) {
        warnings.push(format!("R-hat {:.3} > 1.2 on dimension {bad}; chains may not have converged", r_hat[bad]));
    }
    SampleSet {
        samples,
        diagnostics: SamplerDiagnostics {
            sampler: name.into(),
            seed,
            n: config.n,
            proposals: Some(steps),
            acceptance_rate: Some(acc as f64 / steps.max(1) as f64),
            chains: Some(config.chains),
            burn_in: Some(burn),
            thin: Some(config.thin),
            r_hat: Some(r_hat),
            lag1_autocorrelation: Some(lag1),
            warnings,
            ..SamplerDiagnostics::default()
        },
    }
}

/// Adaptive random-walk Metropolis in logit coordinates. During burn-in the
/// proposal covariance tracks the chain's empirical covariance and the
/// global scale is tuned toward 23.4% acceptance; afterwards both are
/// frozen.
pub fn mcmc_sample(target: &dyn LogDensity, prior: &BoxPrior, config: &SamplerConfig, seed: u64) -> Result<SampleSet> {
    config.validate()?;
    check_dims(target, prior)?;
    let d = prior.dim();
    let (chains, burn) = run_chains(config, seed, |per_chain, burn, rng| {
        let mut z = chain_start(target, prior, config.envelope_draws.min(1000), rng)?;
        let mut theta = vec![0.0; d];
        let mut lp = unbounded_logpdf(target, prior, &z, &mut theta);
        let mut chol: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 0.1f64.sqrt() } else { 0.0 }).collect();
        let mut log_scale = (2.38 / (d as f64).sqrt()).ln();
        let mut history: Vec<Vec<f64>> = Vec::new();
        let mut draws = Array2::zeros((per_chain, d));
        let (mut accepted, mut steps) = (0u64, 0u64);
        let total = burn + per_chain * config.thin;
        let mut eps = vec![0.0; d];
        let mut prop = vec![0.0; d];
        for it in 0..total {
            eps.iter_mut().for_each(|e| *e = StandardNormal.sample(rng));
            let scale = log_scale.exp();
            for i in 0..d {
                prop[i] = z[i] + scale * (0..=i).map(|j| chol[i * d + j] * eps[j]).sum::<f64>();
            }
            let lp_new = unbounded_logpdf(target, prior, &prop, &mut theta);
            let u: f64 = rng.random();
            let accept = u.ln() < lp_new - lp;
            if accept {
                z.copy_from_slice(&prop);
                lp = lp_new;
            }
            if it < burn {
                let rate = if accept { 1.0 } else { 0.0 };
                log_scale += (rate - 0.234) / ((it + 1) as f64).sqrt();
                if it >= burn / 2 {
                    history.push(z.clone());
                    if history.len() >= 2 * d && history.len() % 50 == 0 {
                        if let Some(l) = empirical_chol(&history, d) {
                            chol = l;
                        }
                    }
                }
            } else {
                steps += 1;
                accepted += accept as u64;
                let k = it - burn;
                if k % config.thin == config.thin - 1 {
                    let mut th = vec![0.0; d];
                    prior.from_unbounded(&z, &mut th);
                    draws.row_mut(k / config.thin).iter_mut().zip(&th).for_each(|(o, v)| *o = *v);
                }
            }
        }
        Ok(Chain { draws, accepted, steps })
    })?;
    Ok(assemble(chains, config, seed, "mcmc", burn))
}

fn empirical_chol(history: &[Vec<f64>], d: usize) -> Option<Vec<f64>> {
    let n = history.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| history.iter().map(|h| h[i]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for h in history {
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] += (h[i] - mean[i]) * (h[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        cov[i * d + i] += 1e-6;
        for j in 0..i {
            cov[j * d + i] = cov[i * d + j];
        }
    }
    cholesky_in_place(&mut cov, d).then_some(cov)
}

/// Coordinate-wise slice sampling (stepping out, then shrinkage) in logit
/// coordinates. Every update moves, so draws never repeat.
pub fn slice_sample(target: &dyn LogDensity, prior: &BoxPrior, config: &SamplerConfig, seed: u64) -> Result<SampleSet> {
    config.validate()?;
    check_dims(target, prior)?;
    let d = prior.dim();
    const MAX_STEPS_OUT: usize = 32;
    const MAX_SHRINK: usize = 200;
    let (chains, burn) = run_chains(config, seed, |per_chain, burn, rng| {
        let mut z = chain_start(target, prior, config.envelope_draws.min(1000), rng)?;
        let mut theta = vec![0.0; d];
        let mut lp = unbounded_logpdf(target, prior, &z, &mut theta);
        let mut draws = Array2::zeros((per_chain, d));
        let mut evals = 0u64;
        let total = burn + per_chain * config.thin;
        let w = config.slice_width;
        for it in 0..total {
            for i in 0..d {
                let e: f64 = rng.random::<f64>();
                let level = lp + e.max(f64::MIN_POSITIVE).ln();
                let x0 = z[i];
                let mut lo = x0 - w * rng.random::<f64>();
                let mut hi = lo + w;
                let mut eval = |zi: f64, z: &mut Vec<f64>, theta: &mut Vec<f64>| {
                    z[i] = zi;
                    evals += 1;
                    unbounded_logpdf(target, prior, z, theta)
                };
                for _ in 0..MAX_STEPS_OUT {
                    if eval(lo, &mut z, &mut theta) <= level {
                        break;
                    }
                    lo -= w;
                }
                for _ in 0..MAX_STEPS_OUT {
                    if eval(hi, &mut z, &mut theta) <= level {
                        break;
                    }
                    hi += w;
                }
                let mut moved = false;
                for _ in 0..MAX_SHRINK {
                    let cand = lo + (hi - lo) * rng.random::<f64>();
                    let lp_c = eval(cand, &mut z, &mut theta);
                    if lp_c > level {
                        lp = lp_c;
                        moved = true;
                        break;
                    }
                    if cand < x0 {
                        lo = cand;
                    } else {
                        hi = cand;
                    }
                }
                if !moved {
                    z[i] = x0;
                }
            }
            if it >= burn {
                let k = it - burn;
                if k % config.thin == config.thin - 1 {
                    prior.from_unbounded(&z, &mut theta);
                    draws.row_mut(k / config.thin).iter_mut().zip(&theta).for_each(|(o, v)| *o = *v);
                }
            }
        }
        Ok(Chain { draws, accepted: 0, steps: evals })
    })?;
    let mut set = assemble(chains, config, seed, "slice", burn);
    set.diagnostics.acceptance_rate = None;
    Ok(set)
}

/// Split-chain potential scale reduction per dimension.
pub fn split_r_hat(chains: &[ndarray::ArrayView2<f64>]) -> Vec<f64> {
    let d = chains[0].ncols();
    let half = chains[0].nrows() / 2;
    if half < 2 {
        return vec![f64::NAN; d];
    }
    let mut pieces = Vec::new();
    for c in chains {
        pieces.push(c.slice(s![..half, ..]));
        pieces.push(c.slice(s![half..2 * half, ..]));
    }
    let m = pieces.len() as f64;
    let n = half as f64;
    (0..d)
        .map(|j| {
            let means: Vec<f64> = pieces.iter().map(|p| p.column(j).mean().unwrap()).collect();
            let vars: Vec<f64> = pieces
                .iter()
                .zip(&means)
                .map(|(p, mu)| p.column(j).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0))
                .collect();
            let grand = means.iter().sum::<f64>() / m;
            let b = n * means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / (m - 1.0);
            let w = vars.iter().sum::<f64>() / m;
            if w <= 0.0 {
                return if b <= 0.0 { 1.0 } else { f64::INFINITY };
            }
            (((n - 1.0) / n * w + b / n) / w).sqrt()
        })
        .collect()
}

/// Lag-1 autocorrelation per dimension, averaged over chains.
pub fn lag1_autocorrelation(chains: &[ndarray::ArrayView2<f64>]) -> Vec<f64> {
    let d = chains[0].ncols();
    (0..d)
        .map(|j| {
            let vals: Vec<f64> = chains
                .iter()
                .filter_map(|c| {
                    let col = c.column(j);
                    let n = col.len();
                    if n < 3 {
                        return None;
                    }
                    let mu = col.mean().unwrap();
                    let var: f64 = col.iter().map(|v| (v - mu) * (v - mu)).sum();
                    if var <= 0.0 {
                        return None;
                    }
                    let cov: f64 = (0..n - 1).map(|t| (col[t] - mu) * (col[t + 1] - mu)).sum();
                    Some(cov / var)
                })
                .collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect()
}
