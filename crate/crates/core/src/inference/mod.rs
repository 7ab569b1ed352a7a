//! Posterior construction and sampling, including handling of simulations
//! that yield undefined features.

mod calibration;
mod classifier;
mod dataset;
mod posterior;
mod samplers;

pub use calibration::{fit_calibration, CalibrationModel};
pub use classifier::{
    restricted_prior_sample, train_validity_classifier, ClassifierConfig, ValidityClassifier, ValidityModel,
};
pub use dataset::{generate_training_set, HhSimulator, LgmSimulator, Simulator, ThetaSource, TrainingSet};
pub use posterior::{LogDensity, SampleSet, SamplerDiagnostics, UnnormalizedPosterior};
pub use samplers::{
    lag1_autocorrelation, mcmc_sample, rejection_sample, sample_posterior, slice_sample, split_r_hat, SamplerConfig,
    SamplerKind,
};
