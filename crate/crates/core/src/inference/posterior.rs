use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::calibration::CalibrationModel;
use crate::error::{FslmError, Result};
use crate::mdn::{normalize_keep, MdnModel};
use crate::sim::{BoxPrior, LgmPosterior};

/// An unnormalized log density over parameters.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn logpdf(&self, theta: &[f64]) -> f64;

    fn logpdf_batch(&self, thetas: ArrayView2<f64>) -> Vec<f64> {
        thetas.rows().into_iter().map(|r| self.logpdf(&r.to_vec())).collect()
    }
}

impl LogDensity for LgmPosterior {
    fn dim(&self) -> usize {
        self.param_dim()
    }

    fn logpdf(&self, theta: &[f64]) -> f64 {
        LgmPosterior::logpdf(self, theta)
    }
}

/// `log q(x_obs,S | θ) + log p(θ) [+ log c(θ)]` with `q` the marginal of the
/// network's mixture over the kept features `S`.
#[derive(Debug, Clone)]
pub struct UnnormalizedPosterior<'m> {
    model: &'m MdnModel,
    keep: Vec<usize>,
    x_obs: Vec<f64>,
    prior: BoxPrior,
    calibration: Option<CalibrationModel>,
}

const BATCH_CHUNK: usize = 512;

impl<'m> UnnormalizedPosterior<'m> {
    /// `x_obs` holds a value for every model feature; only kept entries are
    /// read and they must be finite.
    pub fn new(
        model: &'m MdnModel,
        prior: BoxPrior,
        x_obs: &[f64],
        keep: &[usize],
        calibration: Option<CalibrationModel>,
    ) -> Result<Self> {
        if x_obs.len() != model.feature_dim() {
            return Err(FslmError::Dimension { expected: model.feature_dim(), got: x_obs.len() });
        }
        if prior.dim() != model.param_dim() {
            return Err(FslmError::Dimension { expected: model.param_dim(), got: prior.dim() });
        }
        let keep = normalize_keep(keep, model.feature_dim())?;
        let x_obs: Vec<f64> = keep.iter().map(|&i| x_obs[i]).collect();
        if let Some(pos) = x_obs.iter().position(|v| !v.is_finite()) {
            return Err(FslmError::config(format!(
                "observed feature {} is invalid but kept",
                model.feature_names()[keep[pos]]
            )));
        }
        if let Some(c) = &calibration {
            if c.dim() != model.param_dim() {
                return Err(FslmError::Dimension { expected: model.param_dim(), got: c.dim() });
            }
        }
        Ok(UnnormalizedPosterior { model, keep, x_obs, prior, calibration })
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    pub fn model(&self) -> &MdnModel {
        self.model
    }

    pub fn calibration(&self) -> Option<&CalibrationModel> {
        self.calibration.as_ref()
    }
}

impl LogDensity for UnnormalizedPosterior<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn logpdf(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.prior.dim() || !self.prior.contains(theta) {
            return f64::NEG_INFINITY;
        }
        let view = ArrayView2::from_shape((1, theta.len()), theta).expect("one row");
        match self.model.marginal_log_prob_batch(view, &self.keep, &self.x_obs) {
            Ok(l) => {
                let cal = self.calibration.as_ref().map_or(0.0, |c| c.log_prob_valid(theta));
                l[0] + self.prior.log_density(theta) + cal
            }
            Err(e) => {
                log::warn!("surrogate likelihood failed at {theta:?}: {e}");
                f64::NEG_INFINITY
            }
        }
    }

    /// Chunked so the result does not depend on the thread count.
    fn logpdf_batch(&self, thetas: ArrayView2<f64>) -> Vec<f64> {
        if thetas.ncols() != self.prior.dim() {
            return vec![f64::NEG_INFINITY; thetas.nrows()];
        }
        let rows: Vec<usize> = (0..thetas.nrows()).collect();
        rows.par_chunks(BATCH_CHUNK)
            .flat_map_iter(|chunk| {
                let mut out = vec![f64::NEG_INFINITY; chunk.len()];
                let inside: Vec<usize> =
                    chunk.iter().copied().filter(|&r| self.prior.contains(thetas.row(r).as_slice().unwrap())).collect();
                if inside.is_empty() {
                    return out;
                }
                let sub = thetas.select(Axis(0), &inside);
                match self.model.marginal_log_prob_batch(sub.view(), &self.keep, &self.x_obs) {
                    Ok(liks) => {
                        for ((r, lik), row) in inside.iter().zip(liks).zip(sub.rows()) {
                            let theta = row.as_slice().unwrap();
                            let cal = self.calibration.as_ref().map_or(0.0, |c| c.log_prob_valid(theta));
                            out[r - chunk[0]] = lik + self.prior.log_density(theta) + cal;
                        }
                    }
                    Err(e) => log::warn!("surrogate likelihood failed: {e}"),
                }
                out
            })
            .collect()
    }
}

/// Draws from a posterior plus how they were obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Array2<f64>,
    pub diagnostics: SamplerDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub sampler: String,
    pub seed: u64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposals: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_envelope: Option<f64>,
    /// Proposals whose density exceeded the envelope.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope_violations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thin: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_hat: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lag1_autocorrelation: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdn::{MdnArchitecture, Standardization};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn model(seed: u64) -> MdnModel {
        let arch = MdnArchitecture { hidden: vec![8, 8], components: 3, ..MdnArchitecture::standard(2, 3) };
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        let mut m = MdnModel::new(arch, names("t", 2), names("x", 3), seed).unwrap();
        m.set_standardization(Standardization {
            theta_mean: vec![0.5, -1.0],
            theta_scale: vec![2.0, 0.5],
            x_mean: vec![0.1, 0.2, 0.3],
            x_scale: vec![1.5, 0.7, 1.1],
        })
        .unwrap();
        m
    }

    fn prior() -> BoxPrior {
        BoxPrior::uniform(2, -3.0, 3.0).unwrap()
    }

    const X: [f64; 3] = [0.4, -0.2, 1.0];

    #[test]
    fn outside_box_is_negative_infinity() {
        let m = model(1);
        let post = UnnormalizedPosterior::new(&m, prior(), &X, &[0, 1, 2], None).unwrap();
        assert_eq!(post.logpdf(&[3.5, 0.0]), f64::NEG_INFINITY);
        assert_eq!(post.logpdf(&[0.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn full_keep_is_likelihood_plus_prior() {
        let m = model(2);
        let post = UnnormalizedPosterior::new(&m, prior(), &X, &[0, 1, 2], None).unwrap();
        let theta = [0.3, -1.2];
        let expect = m.log_prob(&theta, &X).unwrap() + prior().log_density(&theta);
        assert_eq!(post.logpdf(&theta), expect);
    }

    #[test]
    fn subset_matches_independent_composition() {
        let m = model(3);
        let mut rng = rng_from_seed(3);
        for keep in [vec![0], vec![1, 2], vec![0, 2]] {
            let post = UnnormalizedPosterior::new(&m, prior(), &X, &keep, None).unwrap();
            for _ in 0..20 {
                let theta = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let mix = m.forward(&theta).unwrap().marginalize(&keep).unwrap();
                let xs: Vec<f64> = keep.iter().map(|&i| X[i]).collect();
                let expect = mix.log_prob(&xs).unwrap() + prior().log_density(&theta);
                assert!((post.logpdf(&theta) - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn calibration_shift_is_bounded_by_its_log() {
        let m = model(4);
        let cal = CalibrationModel { mean: vec![0.0; 2], scale: vec![1.0; 2], weights: vec![1.5, -0.7], bias: 0.2, constant: None };
        let plain = UnnormalizedPosterior::new(&m, prior(), &X, &[1], None).unwrap();
        let with = UnnormalizedPosterior::new(&m, prior(), &X, &[1], Some(cal.clone())).unwrap();
        let mut rng = rng_from_seed(4);
        for _ in 0..50 {
            let theta = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let shift = with.logpdf(&theta) - plain.logpdf(&theta);
            assert!(shift <= 0.0);
            assert!(shift.abs() <= cal.log_prob_valid(&theta).abs() + 1e-12);
        }
        let one = UnnormalizedPosterior::new(&m, prior(), &X, &[1], Some(CalibrationModel::constant(2, 1.0))).unwrap();
        assert_eq!(one.logpdf(&[0.1, 0.2]), plain.logpdf(&[0.1, 0.2]));
    }

    #[test]
    fn batch_matches_single_and_thread_count() {
        let m = model(5);
        let post = UnnormalizedPosterior::new(&m, prior(), &X, &[0, 2], None).unwrap();
        let mut rng = rng_from_seed(5);
        let thetas = Array2::from_shape_simple_fn((1100, 2), || rng.random_range(-3.5..3.5));
        let batch = post.logpdf_batch(thetas.view());
        for (row, b) in thetas.rows().into_iter().zip(&batch) {
            let s = post.logpdf(row.as_slice().unwrap());
            assert!(s == *b || (s - b).abs() < 1e-12 * s.abs().max(1.0));
        }
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(one.install(|| post.logpdf_batch(thetas.view())), batch);
    }

    #[test]
    fn rejects_invalid_kept_observation() {
        let m = model(6);
        let x = [f64::NAN, 0.0, 0.0];
        assert!(UnnormalizedPosterior::new(&m, prior(), &x, &[0, 1], None).is_err());
        assert!(UnnormalizedPosterior::new(&m, prior(), &x, &[1, 2], None).is_ok());
        assert!(UnnormalizedPosterior::new(&m, prior(), &x, &[], None).is_err());
    }
}
