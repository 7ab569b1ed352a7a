use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::posterior::{SampleSet, SamplerDiagnostics};
use crate::error::{FslmError, Result};
use crate::nn::{column_moments, Adam, Dense, Mlp};
use crate::rng::{child_rng, stream};
use crate::sim::BoxPrior;

/// Anything that predicts `p(valid | θ)`.
pub trait ValidityModel: Sync {
    fn prob_valid(&self, theta: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> ValidityModel for F {
    fn prob_valid(&self, theta: &[f64]) -> f64 {
        self(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![32, 32],
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 20,
            validation_fraction: 0.1,
        }
    }
}

/// Small tanh network with a two-way softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityClassifier {
    net: Mlp,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Accuracy on the held-out split at the returned checkpoint.
    pub holdout_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct ClassifierState {
    sizes: Vec<usize>,
    params: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    holdout_accuracy: f64,
}

impl Serialize for ValidityClassifier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ClassifierState {
            sizes: self.net.sizes(),
            params: self.net.params(),
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            holdout_accuracy: self.holdout_accuracy,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ValidityClassifier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let st = ClassifierState::deserialize(d)?;
        if st.sizes.len() < 2 || st.sizes.last() != Some(&2) || st.mean.len() != st.sizes[0] || st.scale.len() != st.sizes[0] {
            return Err(D::Error::custom("inconsistent classifier shape"));
        }
        let layers: Vec<Dense> = st
            .sizes
            .windows(2)
            .map(|w| Dense { weights: Array2::zeros((w[0], w[1])), bias: ndarray::Array1::zeros(w[1]) })
            .collect();
        let mut net = Mlp::from_layers(layers);
        if st.params.len() != net.n_params() {
            return Err(D::Error::custom("classifier parameter count mismatch"));
        }
        net.set_params(&st.params);
        Ok(ValidityClassifier { net, mean: st.mean, scale: st.scale, holdout_accuracy: st.holdout_accuracy })
    }
}

fn log_softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    (a - lse, b - lse)
}

impl ValidityClassifier {
    fn standardize(&self, thetas: ArrayView2<f64>) -> Array2<f64> {
        let mut z = thetas.to_owned();
        for mut r in z.rows_mut() {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        z
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn prob_valid_batch(&self, thetas: ArrayView2<f64>) -> Vec<f64> {
        let out = self.net.forward(self.standardize(thetas).view());
        out.rows().into_iter().map(|r| log_softmax2(r[0], r[1]).1.exp().clamp(1e-12, 1.0 - 1e-12)).collect()
    }

    /// Mean NLL and gradient of a standardized batch; `labels[i]` is true for
    /// valid rows.
    fn loss_and_grad(&self, z: ArrayView2<f64>, labels: &[bool], with_grad: bool) -> (f64, Option<Vec<f64>>, usize) {
        let n = z.nrows() as f64;
        let (out, tape) = self.net.forward_tape(z);
        let mut g = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        let mut correct = 0;
        for (i, (r, &y)) in out.rows().into_iter().zip(labels).enumerate() {
            let (l0, l1) = log_softmax2(r[0], r[1]);
            loss -= if y { l1 } else { l0 };
            correct += ((l1 > l0) == y) as usize;
            let (p0, p1) = (l0.exp(), l1.exp());
            g[[i, 0]] = (p0 - if y { 0.0 } else { 1.0 }) / n;
            g[[i, 1]] = (p1 - if y { 1.0 } else { 0.0 }) / n;
        }
        let grad = with_grad.then(|| self.net.backward(&tape, g));
        (loss / n, grad, correct)
    }
}

impl ValidityModel for ValidityClassifier {
    fn prob_valid(&self, theta: &[f64]) -> f64 {
        let z: Vec<f64> = theta.iter().zip(&self.mean).zip(&self.scale).map(|((t, m), s)| (t - m) / s).collect();
        let o = self.net.forward_one(&z);
        log_softmax2(o[0], o[1]).1.exp().clamp(1e-12, 1.0 - 1e-12)
    }
}

/// Trains a validity classifier by NLL with early stopping on a held-out
/// split. Both classes must be present.
pub fn train_validity_classifier(
    thetas: ArrayView2<f64>,
    valid: &[bool],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ValidityClassifier> {
    let n = thetas.nrows();
    if valid.len() != n {
        return Err(FslmError::Dimension { expected: n, got: valid.len() });
    }
    if valid.iter().all(|v| *v) || valid.iter().all(|v| !*v) {
        return Err(FslmError::SingleClass);
    }
    if n < 4 {
        return Err(FslmError::TooFewSamples { needed: 4, got: n });
    }
    let mut rng = child_rng(seed, stream::CLASSIFIER);
    let mut sizes = vec![thetas.ncols()];
    sizes.extend(&config.hidden);
    sizes.push(2);
    let net = Mlp::new(&sizes, &mut rng);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.validation_fraction).ceil() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let (mean, scale) = column_moments(thetas.select(Axis(0), &train_idx).view());
    let mut clf = ValidityClassifier { net, mean, scale, holdout_accuracy: 0.0 };
    let z = clf.standardize(thetas);
    let z_val = z.select(Axis(0), val_idx);
    let y_val: Vec<bool> = val_idx.iter().map(|&i| valid[i]).collect();

    let mut params = clf.net.params();
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let (l0, _, c0) = clf.loss_and_grad(z_val.view(), &y_val, false);
    let mut best = (l0, params.clone(), c0, 0usize);
    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(config.batch_size) {
            let zb = z.select(Axis(0), batch);
            let yb: Vec<bool> = batch.iter().map(|&i| valid[i]).collect();
            let (_, g, _) = clf.loss_and_grad(zb.view(), &yb, true);
            opt.step(&mut params, &g.expect("gradient requested"));
            clf.net.set_params(&params);
        }
        let (l, _, c) = clf.loss_and_grad(z_val.view(), &y_val, false);
        if !l.is_finite() {
            return Err(FslmError::TrainingDiverged { epoch });
        }
        if l < best.0 {
            best = (l, params.clone(), c, epoch);
        } else if epoch - best.3 >= config.patience {
            break;
        }
    }
    clf.net.set_params(&best.1);
    clf.holdout_accuracy = best.2 as f64 / n_val as f64;
    Ok(clf)
}

/// Draws from `p(θ | valid) ∝ p̂(valid | θ) p(θ)`: prior proposals accepted
/// with the predicted probability.
pub fn restricted_prior_sample(prior: &BoxPrior, classifier: &dyn ValidityModel, n: usize, seed: u64) -> Result<SampleSet> {
    const MIN_ACCEPTANCE: f64 = 1e-4;
    if n == 0 {
        return Err(FslmError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut rng = child_rng(seed, stream::PRIOR);
    let d = prior.dim();
    let mut out = Array2::zeros((n, d));
    let (mut filled, mut proposals) = (0usize, 0u64);
    let give_up = (10.0 / MIN_ACCEPTANCE) as u64;
    while filled < n {
        let theta = prior.sample_one(&mut rng);
        let u: f64 = rng.random();
        proposals += 1;
        if u < classifier.prob_valid(&theta) {
            out.row_mut(filled).iter_mut().zip(&theta).for_each(|(o, t)| *o = *t);
            filled += 1;
        }
        if proposals >= give_up && (filled as f64 / proposals as f64) < MIN_ACCEPTANCE {
            return Err(FslmError::RestrictedPriorFailure { rate: filled as f64 / proposals as f64, min: MIN_ACCEPTANCE });
        }
    }
    Ok(SampleSet {
        samples: out,
        diagnostics: SamplerDiagnostics {
            sampler: "restricted-prior".into(),
            seed,
            n,
            proposals: Some(proposals),
            acceptance_rate: Some(n as f64 / proposals as f64),
            ..SamplerDiagnostics::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = rng_from_seed(seed);
        let t = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0..1.0));
        let y = t.rows().into_iter().map(|r| r[0] + 0.5 * r[1] > 0.1).collect();
        (t, y)
    }

    #[test]
    fn separable_data_is_learned() {
        let (t, y) = separable(3000, 1);
        let clf = train_validity_classifier(t.view(), &y, &ClassifierConfig::default(), 2).unwrap();
        let (tt, yt) = separable(1000, 99);
        let probs = clf.prob_valid_batch(tt.view());
        let acc = probs.iter().zip(&yt).filter(|(p, y)| (**p > 0.5) == **y).count() as f64 / 1000.0;
        assert!(acc >= 0.95, "held-out accuracy {acc}");
        assert!(clf.holdout_accuracy >= 0.9);
    }

    #[test]
    fn uninformative_labels_give_half() {
        let mut rng = rng_from_seed(3);
        let t = Array2::from_shape_simple_fn((2000, 2), || rng.random_range(-1.0..1.0));
        let y: Vec<bool> = (0..2000).map(|_| rng.random::<bool>()).collect();
        let clf = train_validity_classifier(t.view(), &y, &ClassifierConfig::default(), 4).unwrap();
        let probs = clf.prob_valid_batch(t.view());
        let mean = probs.iter().sum::<f64>() / probs.len() as f64;
        assert!((0.4..=0.6).contains(&mean), "{mean}");
    }

    #[test]
    fn classifier_is_deterministic_and_serializable() {
        let (t, y) = separable(500, 5);
        let cfg = ClassifierConfig { max_epochs: 20, ..ClassifierConfig::default() };
        let a = train_validity_classifier(t.view(), &y, &cfg, 6).unwrap();
        let b = train_validity_classifier(t.view(), &y, &cfg, 6).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        let back: ValidityClassifier = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
        assert!((a.prob_valid(&[0.2, 0.3]) - a.prob_valid_batch(Array2::from_shape_vec((1, 2), vec![0.2, 0.3]).unwrap().view())[0]).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        let t = Array2::zeros((10, 2));
        assert!(matches!(
            train_validity_classifier(t.view(), &[true; 10], &ClassifierConfig::default(), 0),
            Err(FslmError::SingleClass)
        ));
    }

    #[test]
    fn restricted_prior_with_trivial_classifier() {
        let prior = BoxPrior::uniform(2, 0.0, 1.0).unwrap();
        let one = |_: &[f64]| 1.0;
        let set = restricted_prior_sample(&prior, &one, 500, 3).unwrap();
        assert_eq!(set.diagnostics.acceptance_rate, Some(1.0));
        for j in 0..2 {
            let col: Vec<f64> = set.samples.column(j).to_vec();
            assert!(crate::testutil::ks_uniform_p(&col, 0.0, 1.0) > 0.01);
        }
        let half = |t: &[f64]| if t[0] < 0.5 { 1.0 } else { 0.0 };
        let set = restricted_prior_sample(&prior, &half, 500, 3).unwrap();
        assert!(set.samples.column(0).iter().all(|v| *v < 0.5));
        let never = |_: &[f64]| 0.0;
        assert!(matches!(restricted_prior_sample(&prior, &never, 5, 3), Err(FslmError::RestrictedPriorFailure { .. })));
    }
}
