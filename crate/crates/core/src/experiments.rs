//! End-to-end building blocks shared by the command line and the
//! acceptance checks: simulate, handle invalid simulations, train, and
//! build posteriors.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};
use crate::features::FeatureSet;
use crate::inference::{
    fit_calibration, generate_training_set, train_validity_classifier, CalibrationModel, ClassifierConfig,
    HhSimulator, LgmSimulator, Simulator, ThetaSource, TrainingSet, ValidityClassifier,
};
use crate::mdn::{MdnModel, TrainReport};
use crate::rng::{child_rng, derive_seed, stream};
use crate::select::{all_features, subset_seed, train_on_subset, PosteriorSpec, RetrainConfig};
use crate::sim::{hh_prior, BoxPrior, HhParams, LgmConfig, LgmPosterior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub n_train: usize,
    /// Train a validity classifier, draw from the restricted prior and
    /// attach a calibration term.
    pub handle_invalid: bool,
    /// Classifier simulations as a fraction of `n_train`.
    pub classifier_fraction: f64,
    pub classifier: ClassifierConfig,
    pub retrain: RetrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_train: 10_000,
            handle_invalid: false,
            classifier_fraction: 0.1,
            classifier: ClassifierConfig::default(),
            retrain: RetrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_train < 2 {
            v.push("n_train must be at least 2".into());
        }
        if !(self.classifier_fraction > 0.0 && self.classifier_fraction <= 1.0) {
            v.push("classifier_fraction must lie in (0, 1]".into());
        }
        v.extend(self.retrain.violations());
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineTimings {
    pub simulate_seconds: f64,
    pub classifier_seconds: f64,
    pub train_seconds: f64,
}

/// Simulations, plus the classifier stage when invalid data is handled.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub classifier: Option<ValidityClassifier>,
    /// Prior draws simulated to fit the classifier.
    pub classifier_data: Option<TrainingSet>,
    pub data: TrainingSet,
    pub timings: PipelineTimings,
}

/// Everything produced on the way to a trained surrogate.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub classifier: Option<ValidityClassifier>,
    pub classifier_data: Option<TrainingSet>,
    pub data: TrainingSet,
    pub calibration: Option<CalibrationModel>,
    pub model: MdnModel,
    pub report: TrainReport,
    pub timings: PipelineTimings,
}

impl Pipeline {
    pub fn spec(&self, prior: &BoxPrior, x_obs: &[f64]) -> Result<PosteriorSpec<'_>> {
        PosteriorSpec::new(&self.model, prior.clone(), self.calibration.clone(), x_obs.to_vec())
    }
}

/// Simulates a training set, through the restricted prior when
/// `handle_invalid` is set. When every classifier simulation is valid there
/// is nothing to restrict and the raw prior is used.
pub fn simulate_data(sim: &dyn Simulator, prior: &BoxPrior, config: &PipelineConfig, seed: u64) -> Result<SimulatedData> {
    let problems = config.violations();
    if !problems.is_empty() {
        return Err(FslmError::config(problems.join("; ")));
    }
    let mut timings = PipelineTimings::default();
    let mut classifier = None;
    let mut classifier_data = None;
    if config.handle_invalid {
        let n_cls = ((config.n_train as f64 * config.classifier_fraction).ceil() as usize).max(2);
        let t0 = Instant::now();
        let raw = generate_training_set(sim, ThetaSource::Prior(prior), n_cls, derive_seed(seed, stream::CLASSIFIER_DATA));
        timings.simulate_seconds += t0.elapsed().as_secs_f64();
        let raw = match raw {
            Ok(r) => r,
            Err(FslmError::NoValidRows) => {
                return Err(FslmError::config("no classifier simulation was valid; the prior yields no usable data"))
            }
            Err(e) => return Err(e),
        };
        let t1 = Instant::now();
        if raw.valid.iter().all(|v| *v) {
            log::info!("all {n_cls} classifier simulations valid; using the raw prior");
        } else {
            classifier = Some(train_validity_classifier(raw.thetas.view(), &raw.valid, &config.classifier, seed)?);
        }
        timings.classifier_seconds = t1.elapsed().as_secs_f64();
        classifier_data = Some(raw);
    }
    let t0 = Instant::now();
    let source = match &classifier {
        Some(c) => ThetaSource::Restricted(prior, c),
        None => ThetaSource::Prior(prior),
    };
    let data = generate_training_set(sim, source, config.n_train, derive_seed(seed, stream::TRAINING_DATA))?;
    timings.simulate_seconds += t0.elapsed().as_secs_f64();
    Ok(SimulatedData { classifier, classifier_data, data, timings })
}

/// Trains the surrogate on all features of the valid rows and, when
/// `calibrate` is set, fits the calibration term on every row.
pub fn fit_surrogate(
    data: &TrainingSet,
    retrain: &RetrainConfig,
    calibrate: bool,
    seed: u64,
) -> Result<(MdnModel, TrainReport, Option<CalibrationModel>)> {
    let calibration = if calibrate { Some(fit_calibration(data.thetas.view(), &data.valid)?) } else { None };
    let keep = all_features(data.feature_names.len());
    let (model, report) = train_on_subset(data, &keep, retrain, subset_seed(seed, &keep))?;
    Ok((model, report, calibration))
}

pub fn run_pipeline(sim: &dyn Simulator, prior: &BoxPrior, config: &PipelineConfig, seed: u64) -> Result<Pipeline> {
    let SimulatedData { classifier, classifier_data, data, mut timings } = simulate_data(sim, prior, config, seed)?;
    let t0 = Instant::now();
    let (model, report, calibration) = fit_surrogate(&data, &config.retrain, config.handle_invalid, seed)?;
    timings.train_seconds = t0.elapsed().as_secs_f64();
    Ok(Pipeline { classifier, classifier_data, data, calibration, model, report, timings })
}

/// The linear Gaussian benchmark with its ground truth and one observation.
#[derive(Debug, Clone)]
pub struct LgmProblem {
    pub config: LgmConfig,
    pub prior: BoxPrior,
    pub theta_true: Vec<f64>,
    pub x_obs: Vec<f64>,
}

impl LgmProblem {
    /// `θ_true` is drawn from the prior and observed once, both from `seed`.
    pub fn new(config: LgmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let prior = BoxPrior::uniform(config.param_dim(), -5.0, 5.0)?;
        let theta_true = prior.sample_one(&mut child_rng(seed, stream::OBSERVATION));
        let x_obs = config.simulate(&theta_true, derive_seed(seed, stream::OBSERVATION))?;
        Ok(LgmProblem { config, prior, theta_true, x_obs })
    }

    pub fn simulator(&self) -> LgmSimulator {
        LgmSimulator { config: self.config.clone() }
    }

    pub fn analytic(&self, keep: &[usize]) -> Result<LgmPosterior> {
        LgmPosterior::new(&self.config, &self.prior, &self.x_obs, keep)
    }
}

/// The HH neuron observed noise-free at a reference parameter set.
#[derive(Debug, Clone)]
pub struct HhProblem {
    pub simulator: HhSimulator,
    pub prior: BoxPrior,
    pub theta_obs: Vec<f64>,
    pub x_obs: Vec<f64>,
}

impl HhProblem {
    pub fn new(features: FeatureSet) -> Result<Self> {
        Self::with_simulator(HhSimulator { features, ..HhSimulator::default() })
    }

    pub fn with_simulator(simulator: HhSimulator) -> Result<Self> {
        let theta_obs = HhParams::reference().to_vec();
        let fv = simulator.simulate(&theta_obs, 0);
        if !fv.all_valid() {
            let bad: Vec<&str> =
                fv.names.iter().zip(&fv.valid).filter(|(_, v)| !**v).map(|(n, _)| n.as_str()).collect();
            return Err(FslmError::config(format!("reference observation leaves features undefined: {bad:?}")));
        }
        Ok(HhProblem { simulator, prior: hh_prior(), theta_obs, x_obs: fv.values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdn::TrainConfig;

    fn quick(n: usize, handle_invalid: bool) -> PipelineConfig {
        PipelineConfig {
            n_train: n,
            handle_invalid,
            retrain: RetrainConfig {
                hidden: vec![16],
                components: 2,
                train: TrainConfig { max_epochs: 5, ..TrainConfig::default() },
                ..RetrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn lgm_problem_is_seeded() {
        let a = LgmProblem::new(LgmConfig::default(), 3).unwrap();
        let b = LgmProblem::new(LgmConfig::default(), 3).unwrap();
        assert_eq!(a.x_obs, b.x_obs);
        assert!(a.prior.contains(&a.theta_true));
        assert_ne!(LgmProblem::new(LgmConfig::default(), 4).unwrap().x_obs, a.x_obs);
    }

    #[test]
    fn all_valid_pipeline_skips_classifier_and_calibrates_to_one() {
        let p = LgmProblem::new(LgmConfig::default(), 1).unwrap();
        let with = run_pipeline(&p.simulator(), &p.prior, &quick(400, true), 2).unwrap();
        let without = run_pipeline(&p.simulator(), &p.prior, &quick(400, false), 2).unwrap();
        assert!(with.classifier.is_none());
        assert_eq!(with.calibration.as_ref().unwrap().log_prob_valid(&[0.0; 3]), 0.0);
        assert_eq!(with.model, without.model);
    }

    #[test]
    fn config_violations_are_all_listed() {
        let mut c = quick(1, true);
        c.classifier_fraction = 0.0;
        c.retrain.train.patience = 0;
        assert_eq!(c.violations().len(), 3);
    }

    #[test]
    fn hh_reference_observation_is_valid() {
        let p = HhProblem::new(FeatureSet::hh_core()).unwrap();
        assert_eq!(p.x_obs.len(), 10);
        assert!(p.prior.contains(&p.theta_obs));
    }
}
