use std::io::Write;
use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};
use crate::inference::{
    sample_posterior, CalibrationModel, SampleSet, SamplerConfig, TrainingSet, UnnormalizedPosterior,
};
use crate::mdn::{train, Covariance, MdnArchitecture, MdnModel, TrainConfig, TrainReport};
use crate::metrics::{column_iqrs, kl_estimate};
use crate::rng::{derive_seed, stream};
use crate::sim::BoxPrior;

/// Bit `i` set iff feature `i` is kept.
pub fn subset_mask(keep: &[usize]) -> u64 {
    keep.iter().fold(0, |m, &i| m | (1u64 << i))
}

/// Sampler seed for the posterior conditioned on `keep`. Every workflow
/// derives subset seeds this way, so the same subset is sampled identically
/// wherever it appears in a run.
pub fn subset_seed(run_seed: u64, keep: &[usize]) -> u64 {
    derive_seed(run_seed, stream::SUBSET + subset_mask(keep))
}

pub fn reference_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, stream::REFERENCE)
}

/// What is needed to build posteriors for any feature subset of one model.
#[derive(Debug, Clone)]
pub struct PosteriorSpec<'m> {
    pub model: &'m MdnModel,
    pub prior: BoxPrior,
    pub calibration: Option<CalibrationModel>,
    /// One value per model feature.
    pub x_obs: Vec<f64>,
}

impl<'m> PosteriorSpec<'m> {
    pub fn new(model: &'m MdnModel, prior: BoxPrior, calibration: Option<CalibrationModel>, x_obs: Vec<f64>) -> Result<Self> {
        if model.feature_dim() > 63 {
            return Err(FslmError::config("at most 63 features are supported"));
        }
        UnnormalizedPosterior::new(model, prior.clone(), &x_obs, &all_features(model.feature_dim()), calibration.clone())?;
        Ok(PosteriorSpec { model, prior, calibration, x_obs })
    }

    pub fn n_features(&self) -> usize {
        self.model.feature_dim()
    }

    pub fn posterior(&self, keep: &[usize]) -> Result<UnnormalizedPosterior<'m>> {
        UnnormalizedPosterior::new(self.model, self.prior.clone(), &self.x_obs, keep, self.calibration.clone())
    }

    pub fn sample(&self, keep: &[usize], sampler: &SamplerConfig, seed: u64) -> Result<SampleSet> {
        let post = self.posterior(keep)?;
        sample_posterior(&post, &self.prior, sampler, seed)
    }

    /// Reference posterior on every feature.
    pub fn sample_full(&self, sampler: &SamplerConfig, run_seed: u64) -> Result<SampleSet> {
        self.sample(&all_features(self.n_features()), sampler, reference_seed(run_seed))
    }
}

pub fn all_features(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn leave_one_out(n: usize, removed: usize) -> Vec<usize> {
    (0..n).filter(|&j| j != removed).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Fslm,
    Brute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub removed: String,
    pub keep: Vec<usize>,
    /// KL(reduced ‖ full); `None` when the subset failed.
    pub kl: Option<f64>,
    pub iqr_ratios: Vec<Option<f64>>,
    pub n_samples: usize,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub sample_seconds: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.train_seconds + self.sample_seconds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub mode: RankMode,
    pub param_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub run_seed: u64,
    pub full_samples: usize,
    pub rows: Vec<RankRow>,
    /// Wall clock; kept out of the CSV so tables are reproducible bytes.
    pub timings: Timings,
}

impl RankTable {
    pub fn row(&self, feature: &str) -> Option<&RankRow> {
        self.rows.iter().find(|r| r.removed == feature)
    }

    /// `removed,kl,n_samples,seed,error,iqr_<param>...`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["removed", "kl", "n_samples", "seed", "error"].iter().map(|s| s.to_string()).collect();
        header.extend(self.param_names.iter().map(|p| format!("iqr_{p}")));
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.removed.clone(),
                r.kl.map_or(String::new(), |v| v.to_string()),
                r.n_samples.to_string(),
                r.seed.to_string(),
                r.error.clone().unwrap_or_default(),
            ];
            rec.extend(r.iqr_ratios.iter().map(|e| e.map_or(String::new(), |v| v.to_string())));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn iqr_matrix(&self) -> crate::metrics::IqrMatrix {
        crate::metrics::IqrMatrix {
            rows: self.rows.iter().map(|r| r.removed.clone()).collect(),
            columns: self.param_names.clone(),
            entries: self.rows.iter().map(|r| r.iqr_ratios.clone()).collect(),
        }
    }
}

/// A ranking plus the draws behind it.
#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub table: RankTable,
    pub full: SampleSet,
    /// Per row; `None` where sampling failed.
    pub reduced: Vec<Option<SampleSet>>,
}

fn score_row(
    removed: String,
    keep: Vec<usize>,
    seed: u64,
    result: Result<SampleSet>,
    full: ArrayView2<f64>,
    full_iqr: &[f64],
) -> (RankRow, Option<SampleSet>) {
    let scored = result.and_then(|s| {
        let kl = kl_estimate(s.samples.view(), full)?.value;
        let iqrs = column_iqrs(s.samples.view())?;
        Ok((kl, iqrs, s))
    });
    match scored {
        Ok((kl, iqrs, s)) => {
            let ratios = iqrs.iter().zip(full_iqr).map(|(a, b)| if *b > 0.0 { Some(a / b) } else { None }).collect();
            (RankRow { removed, keep, kl: Some(kl), iqr_ratios: ratios, n_samples: s.len(), seed, error: None }, Some(s))
        }
        Err(e) => {
            log::warn!("subset without {removed} failed: {e}");
            let d = full_iqr.len();
            (RankRow { removed, keep, kl: None, iqr_ratios: vec![None; d], n_samples: 0, seed, error: Some(e.to_string()) }, None)
        }
    }
}

/// FSLM ranking: marginalizes the one trained model over each single
/// feature in turn, samples every reduced posterior and compares it to the
/// full one. Never trains.
pub fn leave_one_out_rank(spec: &PosteriorSpec, sampler: &SamplerConfig, run_seed: u64) -> Result<RankOutcome> {
    sampler.validate()?;
    let n = spec.n_features();
    if n < 2 {
        return Err(FslmError::config("leave-one-out needs at least two features"));
    }
    let start = Instant::now();
    let full = spec.sample_full(sampler, run_seed)?;
    let full_iqr = column_iqrs(full.samples.view())?;
    let scored: Vec<(RankRow, Option<SampleSet>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let keep = leave_one_out(n, i);
            let seed = subset_seed(run_seed, &keep);
            let result = spec.sample(&keep, sampler, seed);
            score_row(spec.model.feature_names()[i].clone(), keep, seed, result, full.samples.view(), &full_iqr)
        })
        .collect();
    let (rows, reduced) = scored.into_iter().unzip();
    let table = RankTable {
        mode: RankMode::Fslm,
        param_names: spec.model.param_names().to_vec(),
        feature_names: spec.model.feature_names().to_vec(),
        run_seed,
        full_samples: full.len(),
        rows,
        timings: Timings { train_seconds: 0.0, sample_seconds: start.elapsed().as_secs_f64() },
    };
    Ok(RankOutcome { table, full, reduced })
}

/// Network shape and optimizer settings for every network a workflow trains;
/// input and output sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub hidden: Vec<usize>,
    pub components: usize,
    pub covariance: Covariance,
    pub train: TrainConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        let std = MdnArchitecture::standard(1, 1);
        RetrainConfig { hidden: std.hidden, components: std.components, covariance: std.covariance, train: TrainConfig::default() }
    }
}

impl RetrainConfig {
    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> MdnArchitecture {
        MdnArchitecture {
            input_dim,
            output_dim,
            hidden: self.hidden.clone(),
            components: self.components,
            covariance: self.covariance,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.components == 0 {
            v.push("components must be positive".to_string());
        }
        if self.hidden.iter().any(|h| *h == 0) {
            v.push("hidden widths must be positive".to_string());
        }
        v.extend(self.train.violations().into_iter().map(|s| format!("train.{s}")));
        v
    }
}

/// Trains a network on the valid rows of `data` restricted to `keep`.
/// Network initialization and minibatch order both derive from `seed`.
pub fn train_on_subset(
    data: &TrainingSet,
    keep: &[usize],
    config: &RetrainConfig,
    seed: u64,
) -> Result<(MdnModel, TrainReport)> {
    let (thetas, xs) = data.valid_pairs()?;
    let xs = xs.select(Axis(1), keep);
    let arch = config.architecture(thetas.ncols(), keep.len());
    let names = keep.iter().map(|&i| data.feature_names[i].clone()).collect();
    let model = MdnModel::new(arch, data.param_names.clone(), names, derive_seed(seed, stream::INIT))?;
    let cfg = TrainConfig { seed: derive_seed(seed, stream::TRAIN), ..config.train.clone() };
    train(model, thetas.view(), xs.view(), &cfg)
}

/// The naive baseline: one network trained from scratch per leave-one-out
/// subset plus one on all features. Training seeds match the FSLM pipeline,
/// so the all-feature network is the one FSLM marginalizes; sampler seeds
/// come from a separate stream, keeping the two methods' draws independent.
pub fn brute_force_rank(
    data: &TrainingSet,
    prior: &BoxPrior,
    calibration: Option<&CalibrationModel>,
    x_obs: &[f64],
    retrain: &RetrainConfig,
    sampler: &SamplerConfig,
    run_seed: u64,
) -> Result<RankOutcome> {
    sampler.validate()?;
    let n = data.feature_names.len();
    if x_obs.len() != n {
        return Err(FslmError::Dimension { expected: n, got: x_obs.len() });
    }
    let mut timings = Timings::default();
    let fit_and_sample = |keep: &[usize], sample_seed: u64, timings: &mut Timings| -> Result<SampleSet> {
        let t0 = Instant::now();
        let (model, _) = train_on_subset(data, keep, retrain, subset_seed(run_seed, keep))?;
        timings.train_seconds += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let xs: Vec<f64> = keep.iter().map(|&i| x_obs[i]).collect();
        let post = UnnormalizedPosterior::new(&model, prior.clone(), &xs, &all_features(keep.len()), calibration.cloned())?;
        let s = sample_posterior(&post, prior, sampler, sample_seed);
        timings.sample_seconds += t1.elapsed().as_secs_f64();
        s
    };
    let own = |seed: u64| derive_seed(seed, stream::RETRAIN_SAMPLER);
    let full = fit_and_sample(&all_features(n), own(reference_seed(run_seed)), &mut timings)?;
    let full_iqr = column_iqrs(full.samples.view())?;
    let mut rows = Vec::with_capacity(n);
    let mut reduced = Vec::with_capacity(n);
    for i in 0..n {
        let keep = leave_one_out(n, i);
        let seed = own(subset_seed(run_seed, &keep));
        let result = fit_and_sample(&keep, seed, &mut timings);
        let (row, s) = score_row(data.feature_names[i].clone(), keep, seed, result, full.samples.view(), &full_iqr);
        rows.push(row);
        reduced.push(s);
    }
    let table = RankTable {
        mode: RankMode::Brute,
        param_names: data.param_names.clone(),
        feature_names: data.feature_names.clone(),
        run_seed,
        full_samples: full.len(),
        rows,
        timings,
    };
    Ok(RankOutcome { table, full, reduced })
}
