use ndarray::{Array2, Axis};
use rayon::prelude::*;

use super::classifier::{restricted_prior_sample, ValidityModel};
use crate::error::{FslmError, Result};
use crate::features::{extract_features, FeatureConfig, FeatureSet, FeatureVector};
use crate::io::LabeledMatrix;
use crate::rng::{derive_seed, stream};
use crate::sim::{simulate_hh, BoxPrior, HhConstants, HhParams, LgmConfig, StimulusProtocol, HH_PARAM_NAMES};

/// A stochastic or deterministic forward model followed by featurization.
pub trait Simulator: Sync {
    fn param_names(&self) -> Vec<String>;

    fn feature_names(&self) -> Vec<String>;

    /// Undefined features come back as NaN with their mask bit cleared.
    fn simulate(&self, theta: &[f64], seed: u64) -> FeatureVector;
}

#[derive(Debug, Clone, Default)]
pub struct LgmSimulator {
    pub config: LgmConfig,
}

impl Simulator for LgmSimulator {
    fn param_names(&self) -> Vec<String> {
        (0..self.config.param_dim()).map(|i| format!("theta{i}")).collect()
    }

    fn feature_names(&self) -> Vec<String> {
        (0..self.config.feature_dim()).map(|i| format!("x{i}")).collect()
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> FeatureVector {
        let values = self.config.simulate(theta, seed).unwrap_or_else(|_| vec![f64::NAN; self.config.feature_dim()]);
        FeatureVector::from_values(self.feature_names(), values)
    }
}

/// The HH neuron is deterministic; `seed` is ignored.
#[derive(Debug, Clone)]
pub struct HhSimulator {
    pub constants: HhConstants,
    pub stimulus: StimulusProtocol,
    pub features: FeatureSet,
    pub feature_config: FeatureConfig,
}

impl Default for HhSimulator {
    fn default() -> Self {
        HhSimulator {
            constants: HhConstants::default(),
            stimulus: StimulusProtocol::default(),
            features: FeatureSet::hh_core(),
            feature_config: FeatureConfig::default(),
        }
    }
}

impl Simulator for HhSimulator {
    fn param_names(&self) -> Vec<String> {
        HH_PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn feature_names(&self) -> Vec<String> {
        self.features.names().to_vec()
    }

    fn simulate(&self, theta: &[f64], _seed: u64) -> FeatureVector {
        let trace = HhParams::from_slice(theta).and_then(|p| simulate_hh(&p, &self.constants, &self.stimulus));
        match trace {
            Ok(trace) => extract_features(&trace, &self.stimulus, &self.features, &self.feature_config),
            Err(e) => {
                log::debug!("simulation failed at {theta:?}: {e}");
                FeatureVector::from_values(self.feature_names(), vec![f64::NAN; self.features.len()])
            }
        }
    }
}

/// Where training parameters are drawn from.
#[derive(Clone, Copy)]
pub enum ThetaSource<'a> {
    Prior(&'a BoxPrior),
    Restricted(&'a BoxPrior, &'a dyn ValidityModel),
}

/// Simulated pairs. `valid[i]` is true iff every feature of row `i` is
/// defined; invalid rows keep their NaNs for classifier and calibration fits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub thetas: Array2<f64>,
    pub features: Array2<f64>,
    pub valid: Vec<bool>,
    pub param_names: Vec<String>,
    pub feature_names: Vec<String>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.nrows() == 0
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        self.valid.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_rows().len() as f64 / self.len().max(1) as f64
    }

    /// `(θ, x)` restricted to fully valid rows.
    pub fn valid_pairs(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        let rows = self.valid_rows();
        if rows.is_empty() {
            return Err(FslmError::NoValidRows);
        }
        Ok((self.thetas.select(Axis(0), &rows), self.features.select(Axis(0), &rows)))
    }

    /// Columns: parameters, features, then a 0/1 `valid` column.
    pub fn to_matrix(&self) -> LabeledMatrix {
        let (n, p, f) = (self.len(), self.thetas.ncols(), self.features.ncols());
        let mut data = Array2::zeros((n, p + f + 1));
        for i in 0..n {
            for j in 0..p {
                data[[i, j]] = self.thetas[[i, j]];
            }
            for j in 0..f {
                data[[i, p + j]] = self.features[[i, j]];
            }
            data[[i, p + f]] = if self.valid[i] { 1.0 } else { 0.0 };
        }
        let mut columns = self.param_names.clone();
        columns.extend(self.feature_names.iter().cloned());
        columns.push("valid".into());
        LabeledMatrix::new(data, columns)
    }

    pub fn from_matrix(m: &LabeledMatrix, param_dim: usize) -> Result<Self> {
        let cols = m.columns.len();
        if cols < param_dim + 2 || m.columns[cols - 1] != "valid" {
            return Err(FslmError::config("dataset matrix must hold parameters, features and a trailing valid column"));
        }
        let f = cols - param_dim - 1;
        let thetas = m.data.slice(ndarray::s![.., ..param_dim]).to_owned();
        let features = m.data.slice(ndarray::s![.., param_dim..param_dim + f]).to_owned();
        let valid = m.data.column(cols - 1).iter().map(|v| *v != 0.0).collect();
        Ok(TrainingSet {
            thetas,
            features,
            valid,
            param_names: m.columns[..param_dim].to_vec(),
            feature_names: m.columns[param_dim..param_dim + f].to_vec(),
        })
    }
}

/// Draws `n` parameters, simulates them in parallel and featurizes. Row `i`
/// uses a seed derived from `(seed, i)` only, so output is independent of the
/// thread count.
pub fn generate_training_set(sim: &dyn Simulator, source: ThetaSource, n: usize, seed: u64) -> Result<TrainingSet> {
    if n == 0 {
        return Err(FslmError::TooFewSamples { needed: 1, got: 0 });
    }
    let thetas = match source {
        ThetaSource::Prior(prior) => prior.sample(n, derive_seed(seed, stream::PRIOR))?,
        ThetaSource::Restricted(prior, clf) => restricted_prior_sample(prior, clf, n, seed)?.samples,
    };
    let sim_seed = derive_seed(seed, stream::SIMULATION);
    let rows: Vec<FeatureVector> = (0..n)
        .into_par_iter()
        .map(|i| sim.simulate(thetas.row(i).as_slice().expect("contiguous"), derive_seed(sim_seed, i as u64)))
        .collect();
    let names = sim.feature_names();
    let mut features = Array2::from_elem((n, names.len()), f64::NAN);
    let mut valid = Vec::with_capacity(n);
    for (i, fv) in rows.iter().enumerate() {
        features.row_mut(i).iter_mut().zip(&fv.values).for_each(|(o, v)| *o = *v);
        valid.push(fv.all_valid());
    }
    if !valid.iter().any(|v| *v) {
        return Err(FslmError::NoValidRows);
    }
    Ok(TrainingSet { thetas, features, valid, param_names: sim.param_names(), feature_names: names })
}
