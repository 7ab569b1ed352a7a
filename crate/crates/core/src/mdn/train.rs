use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{MdnModel, Standardization};
use crate::error::{FslmError, Result};
use crate::nn::{column_moments, Adam};
use crate::rng::{child_rng, stream};

static TRAIN_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`train`] invocations in this process.
pub fn train_calls() -> usize {
    TRAIN_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 256, learning_rate: 1e-3, max_epochs: 1000, validation_fraction: 0.1, patience: 20, seed: 0 }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push("learning_rate must be positive".to_string());
        }
        if self.max_epochs == 0 {
            v.push("max_epochs must be at least 1".to_string());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            v.push("validation_fraction must lie in (0, 0.5]".to_string());
        }
        if self.patience == 0 {
            v.push("patience must be at least 1".to_string());
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation NLL before the first update.
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (1-based) of the returned checkpoint; 0 means the initial
    /// weights were never improved upon.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Maximum-likelihood fit with Adam and early stopping on a held-out split.
/// Standardization constants are recomputed from the training split.
pub fn train(
    mut model: MdnModel,
    thetas: ArrayView2<f64>,
    xs: ArrayView2<f64>,
    config: &TrainConfig,
) -> Result<(MdnModel, TrainReport)> {
    TRAIN_CALLS.fetch_add(1, Ordering::SeqCst);
    config.validate()?;
    let n = thetas.nrows();
    if n != xs.nrows() {
        return Err(FslmError::Dimension { expected: n, got: xs.nrows() });
    }
    if thetas.ncols() != model.param_dim() {
        return Err(FslmError::Dimension { expected: model.param_dim(), got: thetas.ncols() });
    }
    if xs.ncols() != model.feature_dim() {
        return Err(FslmError::Dimension { expected: model.feature_dim(), got: xs.ncols() });
    }
    if n == 0 {
        return Err(FslmError::NoValidRows);
    }
    if n < 2 {
        return Err(FslmError::TooFewSamples { needed: 2, got: n });
    }
    if thetas.iter().chain(xs.iter()).any(|v| !v.is_finite()) {
        return Err(FslmError::config("training data contains non-finite values; filter invalid rows first"));
    }

    let mut rng = child_rng(config.seed, stream::TRAIN);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.validation_fraction).ceil() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let t_train = thetas.select(Axis(0), &train_idx);
    let x_train = xs.select(Axis(0), &train_idx);
    let (theta_mean, theta_scale) = column_moments(t_train.view());
    let (x_mean, x_scale) = column_moments(x_train.view());
    model.set_standardization(Standardization { theta_mean, theta_scale, x_mean, x_scale })?;
    let jac = model.standardization().x_log_jacobian();

    let zt_all = model.standardize_thetas(thetas);
    let zx_all = model.standardize_xs(xs);
    let zt_val = zt_all.select(Axis(0), val_idx);
    let zx_val = zx_all.select(Axis(0), val_idx);
    let val_loss_of = |m: &MdnModel| m.nll_standardized(zt_val.view(), zx_val.view(), false).map(|(l, _)| l + jac);

    let initial_val_loss = val_loss_of(&model).map_err(|_| FslmError::TrainingDiverged { epoch: 0 })?;
    let mut best = (initial_val_loss, model.weights(), 0usize);
    let mut params = model.weights();
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut report = TrainReport {
        initial_val_loss,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial_val_loss,
        n_train: train_idx.len(),
        n_val,
    };

    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let zt = zt_all.select(Axis(0), batch);
            let zx = zx_all.select(Axis(0), batch);
            let (loss, grad) =
                model.nll_standardized(zt.view(), zx.view(), true).map_err(|_| FslmError::TrainingDiverged { epoch })?;
            let grad = grad.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(FslmError::TrainingDiverged { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            opt.step(&mut params, &grad);
            model.set_weights(&params);
        }
        let val = val_loss_of(&model).map_err(|_| FslmError::TrainingDiverged { epoch })?;
        report.train_loss.push(epoch_loss / train_idx.len() as f64 + jac);
        report.val_loss.push(val);
        log::debug!("epoch {epoch}: train {:.4} val {:.4}", report.train_loss[epoch - 1], val);
        if val < best.0 {
            best = (val, params.clone(), epoch);
        } else if epoch - best.2 >= config.patience {
            break;
        }
    }
    model.set_weights(&best.1);
    report.best_epoch = best.2;
    report.best_val_loss = best.0;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::super::model::MdnArchitecture;
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::Array2;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn names(p: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    fn small_arch(din: usize, dout: usize) -> MdnArchitecture {
        MdnArchitecture { hidden: vec![16, 16], components: 2, ..MdnArchitecture::standard(din, dout) }
    }

    #[test]
    fn one_epoch_with_patience_one() {
        let mut rng = rng_from_seed(1);
        let t = Array2::from_shape_simple_fn((200, 2), || rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_simple_fn((200, 1), || rng.random_range(-1.0..1.0));
        let model = MdnModel::new(small_arch(2, 1), names("t", 2), names("x", 1), 0).unwrap();
        let cfg = TrainConfig { max_epochs: 1, patience: 1, ..TrainConfig::default() };
        let (_, report) = train(model, t.view(), x.view(), &cfg).unwrap();
        assert_eq!(report.val_loss.len(), 1);
    }

    #[test]
    fn learns_theta_independent_gaussian() {
        let mut rng = rng_from_seed(2);
        let n = 3000;
        let t = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_simple_fn((n, 2), || {
            let e: f64 = StandardNormal.sample(&mut rng);
            3.0 + 0.5 * e
        });
        let model = MdnModel::new(small_arch(2, 2), names("t", 2), names("x", 2), 4).unwrap();
        let cfg = TrainConfig { max_epochs: 200, seed: 5, ..TrainConfig::default() };
        let (model, report) = train(model, t.view(), x.view(), &cfg).unwrap();
        assert!(report.best_val_loss < report.initial_val_loss);
        let se = 0.5 / (n as f64).sqrt();
        for theta in [[0.0, 0.0], [0.7, -0.4], [-0.9, 0.9]] {
            let mix = model.forward(&theta).unwrap();
            for i in 0..2 {
                let mean: f64 = (0..mix.n_components()).map(|k| mix.weights()[k] * mix.mean(k)[i]).sum();
                assert!((mean - 3.0).abs() < 3.0 * se + 0.02, "mean {mean}");
            }
        }
        // entropy of N(3, 0.25·I₂) is a lower bound for the expected NLL
        let entropy = 2.0 * (0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.25f64).ln());
        assert!(report.best_val_loss > entropy - 0.1);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = rng_from_seed(3);
        let t = Array2::from_shape_simple_fn((300, 1), || rng.random_range(-1.0..1.0));
        let x = t.mapv(|v| 2.0 * v + 0.1);
        let run = || {
            let model = MdnModel::new(small_arch(1, 1), names("t", 1), names("x", 1), 9).unwrap();
            let cfg = TrainConfig { max_epochs: 5, seed: 9, ..TrainConfig::default() };
            train(model, t.view(), x.view(), &cfg).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn rejects_bad_input() {
        let model = MdnModel::new(small_arch(1, 1), names("t", 1), names("x", 1), 0).unwrap();
        let t = Array2::from_elem((10, 1), 0.0);
        let mut x = Array2::from_elem((10, 1), 0.0);
        x[[3, 0]] = f64::NAN;
        assert!(train(model.clone(), t.view(), x.view(), &TrainConfig::default()).is_err());
        let bad = TrainConfig { validation_fraction: 0.7, patience: 0, ..TrainConfig::default() };
        assert_eq!(bad.violations().len(), 2);
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(matches!(train(model, empty.view(), empty.view(), &TrainConfig::default()), Err(FslmError::NoValidRows)));
    }
}
