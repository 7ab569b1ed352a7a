use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::mixture::{GaussianMixture, WEIGHT_FLOOR};
use crate::error::{FslmError, Result};
use crate::linalg::{cholesky_in_place, fast_exp, log_sum_exp, solve_lower_in_place, solve_lower_transpose_in_place};
use crate::nn::Mlp;
use crate::rng::{child_rng, stream};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    #[default]
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdnArchitecture {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub components: usize,
    #[serde(default)]
    pub covariance: Covariance,
}

impl MdnArchitecture {
    /// Three hidden layers of 50 and ten components.
    pub fn standard(input_dim: usize, output_dim: usize) -> Self {
        MdnArchitecture { input_dim, output_dim, hidden: vec![50, 50, 50], components: 10, covariance: Covariance::Full }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be positive");
        }
        if self.output_dim == 0 {
            problems.push("output_dim must be positive");
        }
        if self.components == 0 {
            problems.push("components must be positive");
        }
        if self.hidden.iter().any(|h| *h == 0) {
            problems.push("hidden widths must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FslmError::config(problems.join("; ")))
        }
    }

    fn off_diagonal(&self) -> usize {
        match self.covariance {
            Covariance::Full => self.output_dim * (self.output_dim - 1) / 2,
            Covariance::Diagonal => 0,
        }
    }

    /// Network output width: logits, means, log-diagonals, off-diagonals.
    pub fn head_dim(&self) -> usize {
        let (k, d) = (self.components, self.output_dim);
        k + 2 * k * d + k * self.off_diagonal()
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.hidden);
        s.push(self.head_dim());
        s
    }
}

/// Affine maps to and from the network's working coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub theta_mean: Vec<f64>,
    pub theta_scale: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Standardization {
            theta_mean: vec![0.0; input_dim],
            theta_scale: vec![1.0; input_dim],
            x_mean: vec![0.0; output_dim],
            x_scale: vec![1.0; output_dim],
        }
    }

    pub fn theta(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.theta_mean).zip(&self.theta_scale).map(|((t, m), s)| (t - m) / s).collect()
    }

    pub fn x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.x_mean).zip(&self.x_scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// `Σ log scale_x`, the log-Jacobian between standardized and original
    /// feature densities.
    pub fn x_log_jacobian(&self) -> f64 {
        self.x_scale.iter().map(|s| s.ln()).sum()
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = &f64> {
        self.theta_mean.iter().chain(&self.theta_scale).chain(&self.x_mean).chain(&self.x_scale)
    }
}

/// Conditional mixture density network `θ ↦ q(x | θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnModel {
    pub(crate) arch: MdnArchitecture,
    pub(crate) net: Mlp,
    pub(crate) standardization: Standardization,
    pub(crate) param_names: Vec<String>,
    pub(crate) feature_names: Vec<String>,
    /// Free-form metadata persisted with the model.
    pub meta: serde_json::Value,
}

impl MdnModel {
    /// Fresh network: Glorot weights with the output layer scaled down so
    /// every component starts near a unit Gaussian.
    pub fn new(arch: MdnArchitecture, param_names: Vec<String>, feature_names: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if param_names.len() != arch.input_dim {
            return Err(FslmError::Dimension { expected: arch.input_dim, got: param_names.len() });
        }
        if feature_names.len() != arch.output_dim {
            return Err(FslmError::Dimension { expected: arch.output_dim, got: feature_names.len() });
        }
        let mut rng = child_rng(seed, stream::INIT);
        let mut net = Mlp::new(&arch.layer_sizes(), &mut rng);
        if let Some(last) = net.layers_mut().last_mut() {
            last.weights.mapv_inplace(|w| 0.1 * w);
        }
        let standardization = Standardization::identity(arch.input_dim, arch.output_dim);
        Ok(MdnModel { arch, net, standardization, param_names, feature_names, meta: serde_json::Value::Null })
    }

    /// Sets the output layer to zero: uniform weights, identical components.
    pub fn zero_output_head(&mut self) {
        if let Some(last) = self.net.layers_mut().last_mut() {
            last.weights.fill(0.0);
            last.bias.fill(0.0);
        }
    }

    pub fn architecture(&self) -> &MdnArchitecture {
        &self.arch
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn set_standardization(&mut self, s: Standardization) -> Result<()> {
        let dims = [
            (s.theta_mean.len(), self.arch.input_dim),
            (s.theta_scale.len(), self.arch.input_dim),
            (s.x_mean.len(), self.arch.output_dim),
            (s.x_scale.len(), self.arch.output_dim),
        ];
        if let Some((got, expected)) = dims.into_iter().find(|(g, e)| g != e) {
            return Err(FslmError::Dimension { expected, got });
        }
        if s.theta_scale.iter().chain(&s.x_scale).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(FslmError::config("standardization scales must be positive and finite"));
        }
        self.standardization = s;
        Ok(())
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn param_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.output_dim
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn n_weights(&self) -> usize {
        self.net.n_params()
    }

    /// Flat parameter vector, in the order of the loss gradient.
    pub fn weights(&self) -> Vec<f64> {
        self.net.params()
    }

    /// Panics unless `w.len() == self.n_weights()`.
    pub fn set_weights(&mut self, w: &[f64]) {
        self.net.set_params(w);
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.arch.input_dim {
            return Err(FslmError::Dimension { expected: self.arch.input_dim, got: theta.len() });
        }
        Ok(())
    }

    /// Mixture over features in original units.
    pub fn forward(&self, theta: &[f64]) -> Result<GaussianMixture> {
        self.check_theta(theta)?;
        let out = self.net.forward_one(&self.standardization.theta(theta));
        self.decode(&out)
    }

    pub fn forward_batch(&self, thetas: ArrayView2<f64>) -> Result<Vec<GaussianMixture>> {
        if thetas.ncols() != self.arch.input_dim {
            return Err(FslmError::Dimension { expected: self.arch.input_dim, got: thetas.ncols() });
        }
        let z = self.standardize_thetas(thetas);
        let out = self.net.forward(z.view());
        out.rows().into_iter().map(|r| self.decode(r.as_slice().expect("row-major output"))).collect()
    }

    pub fn log_prob(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.forward(theta)?.log_prob(x)
    }

    pub(crate) fn standardize_thetas(&self, thetas: ArrayView2<f64>) -> Array2<f64> {
        let s = &self.standardization;
        let mut z = thetas.to_owned();
        for mut row in z.rows_mut() {
            for ((v, m), sc) in row.iter_mut().zip(&s.theta_mean).zip(&s.theta_scale) {
                *v = (*v - m) / sc;
            }
        }
        z
    }

    pub(crate) fn standardize_xs(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let s = &self.standardization;
        let mut z = xs.to_owned();
        for mut row in z.rows_mut() {
            for ((v, m), sc) in row.iter_mut().zip(&s.x_mean).zip(&s.x_scale) {
                *v = (*v - m) / sc;
            }
        }
        z
    }

    /// `log q(x_S | θ)` per row for the mixture marginalized onto the sorted,
    /// distinct indices `keep`, with `x` holding the kept values. Equivalent
    /// to `forward` then `marginalize` then `log_prob` but allocation-free per
    /// row. Rows whose head is non-finite or whose marginal covariance is not
    /// positive definite give −∞.
    pub fn marginal_log_prob_batch(&self, thetas: ArrayView2<f64>, keep: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        if thetas.ncols() != self.arch.input_dim {
            return Err(FslmError::Dimension { expected: self.arch.input_dim, got: thetas.ncols() });
        }
        let (k, d) = (self.arch.components, self.arch.output_dim);
        let keep = super::mixture::normalize_keep(keep, d)?;
        if x.len() != keep.len() {
            return Err(FslmError::Dimension { expected: keep.len(), got: x.len() });
        }
        let m = keep.len();
        let s = &self.standardization;
        let zx: Vec<f64> = keep.iter().zip(x).map(|(&i, v)| (v - s.x_mean[i]) / s.x_scale[i]).collect();
        let jac: f64 = keep.iter().map(|&i| s.x_scale[i].ln()).sum();
        let full = m == d;
        let off = self.arch.off_diagonal();
        let log_floor = WEIGHT_FLOOR.ln();
        let z_thetas = self.standardize_thetas(thetas);
        let mut z = vec![0.0; m];
        let mut lp = vec![0.0; k];
        let mut result = Vec::with_capacity(thetas.nrows());
        if full {
            let out = self.net.forward(z_thetas.view());
            let mut l = vec![0.0; d * d];
            for o in out.rows() {
                let o = o.as_slice().expect("row-major output");
                if o.iter().any(|v| !v.is_finite()) {
                    result.push(f64::NEG_INFINITY);
                    continue;
                }
                let lse = log_sum_exp(&o[..k]);
                for c in 0..k {
                    let diag = &o[k + k * d + c * d..k + k * d + (c + 1) * d];
                    for i in 0..d {
                        l[i * d + i] = fast_exp(diag[i]);
                    }
                    let mut at = k + 2 * k * d + c * off;
                    for i in 1..d {
                        for j in 0..i {
                            l[i * d + j] = o[at];
                            at += 1;
                        }
                    }
                    for i in 0..d {
                        z[i] = zx[i] - o[k + c * d + i];
                    }
                    solve_lower_in_place(&l, d, &mut z);
                    let quad: f64 = z.iter().map(|v| v * v).sum();
                    let half_log_det: f64 = diag.iter().sum();
                    lp[c] = (o[c] - lse).max(log_floor) - 0.5 * quad - half_log_det - d as f64 * HALF_LOG_2PI;
                }
                result.push(log_sum_exp(&lp) - jac);
            }
            return Ok(result);
        }
        // Only the heads the kept features read: logits, then per component
        // the kept means, kept log-diagonals and kept rows of the Cholesky
        // factor below the diagonal.
        let row_len: usize = keep.iter().sum();
        let stride = 2 * m + row_len;
        let mut cols: Vec<usize> = (0..k).collect();
        for c in 0..k {
            cols.extend(keep.iter().map(|&i| k + c * d + i));
            cols.extend(keep.iter().map(|&i| k + k * d + c * d + i));
            for &i in &keep {
                let row = k + 2 * k * d + c * off + i * i.saturating_sub(1) / 2;
                cols.extend(row..row + i);
            }
        }
        let last = self.net.layers().last().expect("network has an output layer");
        let w = last.weights.select(Axis(1), &cols);
        let b = last.bias.select(Axis(0), &cols);
        let out = self.net.forward_hidden(z_thetas.view()).dot(&w) + &b;
        let mut l = vec![0.0; m * d];
        let mut sig = vec![0.0; m * m];
        for o in out.rows() {
            let o = o.as_slice().expect("row-major output");
            if o.iter().any(|v| !v.is_finite()) {
                result.push(f64::NEG_INFINITY);
                continue;
            }
            let lse = log_sum_exp(&o[..k]);
            let mut ok = true;
            for c in 0..k {
                let base = k + c * stride;
                let mut at = base + 2 * m;
                for (a, &i) in keep.iter().enumerate() {
                    l[a * d + i] = fast_exp(o[base + m + a]);
                    l[a * d..a * d + i].copy_from_slice(&o[at..at + i]);
                    at += i;
                }
                for a in 0..m {
                    for bb in 0..=a {
                        let (ra, rb) = (&l[a * d..], &l[bb * d..]);
                        let v: f64 = (0..=keep[bb]).map(|j| ra[j] * rb[j]).sum();
                        sig[a * m + bb] = v;
                        sig[bb * m + a] = v;
                    }
                }
                if !cholesky_in_place(&mut sig, m) {
                    ok = false;
                    break;
                }
                for a in 0..m {
                    z[a] = zx[a] - o[base + a];
                }
                solve_lower_in_place(&sig, m, &mut z);
                let quad: f64 = z.iter().map(|v| v * v).sum();
                let half_log_det = (0..m).map(|a| sig[a * m + a]).product::<f64>().ln();
                lp[c] = (o[c] - lse).max(log_floor) - 0.5 * quad - half_log_det - m as f64 * HALF_LOG_2PI;
            }
            result.push(if ok { log_sum_exp(&lp) - jac } else { f64::NEG_INFINITY });
        }
        Ok(result)
    }

    /// Turns one raw head row into a mixture in original feature units.
    fn decode(&self, out: &[f64]) -> Result<GaussianMixture> {
        if out.iter().any(|v| !v.is_finite()) {
            return Err(FslmError::ModelCorrupt("non-finite network output".into()));
        }
        let (k, d) = (self.arch.components, self.arch.output_dim);
        let off = self.arch.off_diagonal();
        let s = &self.standardization;
        let logits = &out[..k];
        let lse = log_sum_exp(logits);
        let weights: Vec<f64> = logits.iter().map(|a| (a - lse).exp()).collect();
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        let mut means = Vec::with_capacity(k * d);
        let mut chols = vec![0.0; k * d * d];
        for c in 0..k {
            for i in 0..d {
                means.push(s.x_mean[i] + s.x_scale[i] * out[k + c * d + i]);
            }
            let l = &mut chols[c * d * d..(c + 1) * d * d];
            for i in 0..d {
                l[i * d + i] = s.x_scale[i] * out[k + k * d + c * d + i].exp();
            }
            let mut at = k + 2 * k * d + c * off;
            if off > 0 {
                for i in 1..d {
                    for j in 0..i {
                        l[i * d + j] = s.x_scale[i] * out[at];
                        at += 1;
                    }
                }
            }
        }
        GaussianMixture::from_cholesky(weights, means, chols, d)
    }

    /// Mean negative log-likelihood (original units) of a batch and its
    /// gradient with respect to the flat weight vector.
    pub fn nll_loss_and_grad(&self, thetas: ArrayView2<f64>, xs: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
        let zt = self.standardize_thetas(thetas);
        let zx = self.standardize_xs(xs);
        let (loss, grad) = self.nll_standardized(zt.view(), zx.view(), true)?;
        Ok((loss + self.standardization.x_log_jacobian(), grad.expect("gradient requested")))
    }

    /// Mean NLL in standardized coordinates; optionally with its gradient.
    pub(crate) fn nll_standardized(
        &self,
        zt: ArrayView2<f64>,
        zx: ArrayView2<f64>,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        if zt.nrows() == 0 || zt.nrows() != zx.nrows() {
            return Err(FslmError::TooFewSamples { needed: 1, got: zt.nrows().min(zx.nrows()) });
        }
        if zx.ncols() != self.arch.output_dim {
            return Err(FslmError::Dimension { expected: self.arch.output_dim, got: zx.ncols() });
        }
        let n = zt.nrows();
        let (out, tape) = if with_grad {
            let (o, t) = self.net.forward_tape(zt);
            (o, Some(t))
        } else {
            (self.net.forward(zt), None)
        };
        let mut grad_out = if with_grad { Array2::zeros(out.raw_dim()) } else { Array2::zeros((0, 0)) };
        let mut total = 0.0;
        let mut ws = HeadWorkspace::new(&self.arch);
        for r in 0..n {
            let o = out.row(r);
            let x = zx.row(r);
            let g = if with_grad { Some(grad_out.row_mut(r).into_slice().expect("row-major")) } else { None };
            let lp = head_log_prob(&self.arch, o.as_slice().expect("row-major"), x.as_slice().expect("row-major"), g, &mut ws);
            total += lp;
        }
        let loss = -total / n as f64;
        if !loss.is_finite() {
            return Err(FslmError::ModelCorrupt("non-finite loss".into()));
        }
        let grad = tape.map(|t| {
            grad_out.mapv_inplace(|v| -v / n as f64);
            self.net.backward(&t, grad_out)
        });
        Ok((loss, grad))
    }
}

struct HeadWorkspace {
    lp: Vec<f64>,
    z: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    l: Vec<f64>,
}

impl HeadWorkspace {
    fn new(arch: &MdnArchitecture) -> Self {
        let (k, d) = (arch.components, arch.output_dim);
        HeadWorkspace { lp: vec![0.0; k], z: vec![vec![0.0; d]; k], u: vec![vec![0.0; d]; k], l: vec![0.0; k * d * d] }
    }
}

/// `log q(z_x)` for one head row in standardized space. When `grad` is
/// given, writes `∂ log q / ∂ head`.
fn head_log_prob(arch: &MdnArchitecture, o: &[f64], x: &[f64], grad: Option<&mut [f64]>, ws: &mut HeadWorkspace) -> f64 {
    let (k, d) = (arch.components, arch.output_dim);
    let off = arch.off_diagonal();
    let lse_a = log_sum_exp(&o[..k]);
    let log_floor = WEIGHT_FLOOR.ln();
    for c in 0..k {
        let l = &mut ws.l[c * d * d..(c + 1) * d * d];
        l.fill(0.0);
        let mut half_log_det = 0.0;
        for i in 0..d {
            let raw = o[k + k * d + c * d + i];
            l[i * d + i] = raw.exp();
            half_log_det += raw;
        }
        let mut at = k + 2 * k * d + c * off;
        if off > 0 {
            for i in 1..d {
                for j in 0..i {
                    l[i * d + j] = o[at];
                    at += 1;
                }
            }
        }
        let z = &mut ws.z[c];
        for i in 0..d {
            z[i] = x[i] - o[k + c * d + i];
        }
        solve_lower_in_place(l, d, z);
        let quad: f64 = z.iter().map(|v| v * v).sum();
        let log_w = (o[c] - lse_a).max(log_floor);
        ws.lp[c] = log_w - 0.5 * quad - half_log_det - d as f64 * HALF_LOG_2PI;
    }
    let total = log_sum_exp(&ws.lp);
    let Some(g) = grad else {
        return total;
    };
    // responsibilities and the softmax with floor
    let mut resp_unfloored = 0.0;
    for c in 0..k {
        let r = (ws.lp[c] - total).exp();
        ws.lp[c] = r;
        if o[c] - lse_a > log_floor {
            resp_unfloored += r;
        }
    }
    for c in 0..k {
        let pi = (o[c] - lse_a).exp();
        let active = o[c] - lse_a > log_floor;
        g[c] = if active { ws.lp[c] } else { 0.0 } - pi * resp_unfloored;
    }
    for c in 0..k {
        let r = ws.lp[c];
        let l = &ws.l[c * d * d..(c + 1) * d * d];
        let (z, u) = (&ws.z[c], &mut ws.u[c]);
        u.copy_from_slice(z);
        solve_lower_transpose_in_place(l, d, u);
        for i in 0..d {
            g[k + c * d + i] = r * u[i];
            g[k + k * d + c * d + i] = r * (u[i] * z[i] * l[i * d + i] - 1.0);
        }
        let mut at = k + 2 * k * d + c * off;
        if off > 0 {
            for i in 1..d {
                for j in 0..i {
                    g[at] = r * u[i] * z[j];
                    at += 1;
                }
            }
        }
    }
    total
}
