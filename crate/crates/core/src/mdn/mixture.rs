use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};
use crate::linalg::{cholesky_in_place, log_diag_sum, log_sum_exp, lower_times_transpose, solve_lower_in_place};
use crate::rng::Rng;
use rand::Rng as _;

/// Mixture weights below this are treated as this inside the log-sum-exp.
pub const WEIGHT_FLOOR: f64 = 1e-12;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Full-covariance Gaussian mixture. Covariances are kept next to their
/// Cholesky factors so that marginalizing twice extracts the same numbers as
/// marginalizing once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    /// `K × D`, row-major
    means: Vec<f64>,
    /// `K × D × D`
    covs: Vec<f64>,
    chols: Vec<f64>,
    half_log_dets: Vec<f64>,
}

/// Sorts and checks a set of feature indices.
pub fn normalize_keep(keep: &[usize], dim: usize) -> Result<Vec<usize>> {
    if keep.is_empty() {
        return Err(FslmError::EmptyKeep);
    }
    let mut k = keep.to_vec();
    k.sort_unstable();
    k.dedup();
    if let Some(&bad) = k.iter().find(|&&i| i >= dim) {
        return Err(FslmError::BadIndex { index: bad, dim });
    }
    Ok(k)
}

impl GaussianMixture {
    /// Builds a mixture from lower Cholesky factors (`K × D × D`, only the
    /// lower triangle is read).
    pub fn from_cholesky(weights: Vec<f64>, means: Vec<f64>, mut chols: Vec<f64>, dim: usize) -> Result<Self> {
        let k = weights.len();
        Self::check_shapes(k, dim, &means, chols.len())?;
        for c in chols.chunks_mut(dim * dim) {
            for i in 0..dim {
                if !(c[i * dim + i] > 0.0) {
                    return Err(FslmError::ModelCorrupt("non-positive Cholesky diagonal".into()));
                }
                for j in (i + 1)..dim {
                    c[i * dim + j] = 0.0;
                }
            }
        }
        let covs = chols.chunks(dim * dim).flat_map(|c| lower_times_transpose(c, dim)).collect();
        Self::assemble(weights, means, covs, chols, dim)
    }

    pub fn from_covariances(weights: Vec<f64>, means: Vec<f64>, covs: Vec<f64>, dim: usize) -> Result<Self> {
        let k = weights.len();
        Self::check_shapes(k, dim, &means, covs.len())?;
        let mut chols = covs.clone();
        for c in chols.chunks_mut(dim * dim) {
            if !cholesky_in_place(c, dim) {
                return Err(FslmError::ModelCorrupt("covariance is not positive definite".into()));
            }
        }
        Self::assemble(weights, means, covs, chols, dim)
    }

    fn check_shapes(k: usize, dim: usize, means: &[f64], mats: usize) -> Result<()> {
        if k == 0 || dim == 0 {
            return Err(FslmError::config("mixture needs at least one component and one dimension"));
        }
        if means.len() != k * dim {
            return Err(FslmError::Dimension { expected: k * dim, got: means.len() });
        }
        if mats != k * dim * dim {
            return Err(FslmError::Dimension { expected: k * dim * dim, got: mats });
        }
        Ok(())
    }

    fn assemble(weights: Vec<f64>, means: Vec<f64>, covs: Vec<f64>, chols: Vec<f64>, dim: usize) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(FslmError::ModelCorrupt(format!("mixture weights do not form a simplex (sum {total})")));
        }
        if means.iter().chain(&covs).chain(&chols).any(|v| !v.is_finite()) {
            return Err(FslmError::ModelCorrupt("non-finite mixture parameters".into()));
        }
        let half_log_dets = chols.chunks(dim * dim).map(|c| log_diag_sum(c, dim)).collect();
        Ok(GaussianMixture { dim, weights, means, covs, chols, half_log_dets })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn cov(&self, k: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.covs[k * s..(k + 1) * s]
    }

    pub fn chol(&self, k: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.chols[k * s..(k + 1) * s]
    }

    /// `log π_k + log N(x; μ_k, Σ_k)` for every component.
    pub fn component_log_probs(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut z = vec![0.0; d];
        for (k, o) in out.iter_mut().enumerate() {
            for ((zi, xi), mi) in z.iter_mut().zip(x).zip(self.mean(k)) {
                *zi = xi - mi;
            }
            solve_lower_in_place(self.chol(k), d, &mut z);
            let quad: f64 = z.iter().map(|v| v * v).sum();
            *o = self.weights[k].max(WEIGHT_FLOOR).ln() - 0.5 * quad - self.half_log_dets[k] - d as f64 * HALF_LOG_2PI;
        }
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(FslmError::Dimension { expected: self.dim, got: x.len() });
        }
        let mut lp = vec![0.0; self.n_components()];
        self.component_log_probs(x, &mut lp);
        Ok(log_sum_exp(&lp))
    }

    /// Marginal over the features in `keep`: weights unchanged, mean entries
    /// and covariance sub-blocks extracted, factors recomputed.
    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        let keep = normalize_keep(keep, self.dim)?;
        let (d, m) = (self.dim, keep.len());
        let k = self.n_components();
        let mut means = Vec::with_capacity(k * m);
        let mut covs = Vec::with_capacity(k * m * m);
        for c in 0..k {
            let mu = self.mean(c);
            let cov = self.cov(c);
            means.extend(keep.iter().map(|&i| mu[i]));
            for &i in &keep {
                covs.extend(keep.iter().map(|&j| cov[i * d + j]));
            }
        }
        Self::from_covariances(self.weights.clone(), means, covs, m)
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let d = self.dim;
        let mut out = Array2::zeros((n, d));
        let mut e = vec![0.0; d];
        for mut row in out.rows_mut() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut c = self.n_components() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    c = k;
                    break;
                }
            }
            e.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            let l = self.chol(c);
            for i in 0..d {
                row[i] = self.mean(c)[i] + (0..=i).map(|j| l[i * d + j] * e[j]).sum::<f64>();
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Random mixture with well-conditioned covariances.
    pub fn random_mixture(k: usize, d: usize, rng: &mut Rng) -> GaussianMixture {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let means = (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut chols = vec![0.0; k * d * d];
        for c in chols.chunks_mut(d * d) {
            for i in 0..d {
                c[i * d + i] = rng.random_range(0.5..1.5);
                for j in 0..i {
                    c[i * d + j] = rng.random_range(-0.5..0.5);
                }
            }
        }
        GaussianMixture::from_cholesky(weights, means, chols, d).unwrap()
    }

    /// Adaptive Gauss–Kronrod (7/15) on a finite interval.
    pub fn integrate(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        const XK: [f64; 8] = [
            0.991_455_371_120_812_6,
            0.949_107_912_342_758_5,
            0.864_864_423_359_769_1,
            0.741_531_185_599_394_4,
            0.586_087_235_467_691_1,
            0.405_845_151_377_397_2,
            0.207_784_955_007_898_5,
            0.0,
        ];
        const WK: [f64; 8] = [
            0.022_935_322_010_529_22,
            0.063_092_092_629_978_55,
            0.104_790_010_322_250_2,
            0.140_653_259_715_525_9,
            0.169_004_726_639_267_9,
            0.190_350_578_064_785_4,
            0.204_432_940_075_298_9,
            0.209_482_141_084_727_8,
        ];
        const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];
        let mut rule = |a: f64, b: f64| {
            let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
            let fc = f(c);
            let (mut k, mut g) = (WK[7] * fc, WG[3] * fc);
            for i in 0..7 {
                let s = f(c - h * XK[i]) + f(c + h * XK[i]);
                k += WK[i] * s;
                if i % 2 == 1 {
                    g += WG[i / 2] * s;
                }
            }
            (k * h, ((k - g) * h).abs())
        };
        let mut stack = vec![(a, b, 0)];
        let mut total = 0.0;
        while let Some((lo, hi, depth)) = stack.pop() {
            let (val, err) = rule(lo, hi);
            if err <= tol * (hi - lo) / (b - a) || depth > 40 {
                total += val;
            } else {
                let mid = 0.5 * (lo + hi);
                stack.push((lo, mid, depth + 1));
                stack.push((mid, hi, depth + 1));
            }
        }
        total
    }

    /// Density of the marginal at `x_kept`, by nested quadrature of the joint
    /// over the dropped coordinates.
    pub fn quadrature_marginal(mix: &GaussianMixture, keep: &[usize], x_kept: &[f64], tol: f64) -> f64 {
        let d = mix.dim();
        let dropped: Vec<usize> = (0..d).filter(|i| !keep.contains(i)).collect();
        let bounds: Vec<(f64, f64)> = (0..d)
            .map(|i| {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for k in 0..mix.n_components() {
                    let s = mix.cov(k)[i * d + i].sqrt();
                    lo = lo.min(mix.mean(k)[i] - 12.0 * s);
                    hi = hi.max(mix.mean(k)[i] + 12.0 * s);
                }
                (lo, hi)
            })
            .collect();
        let mut x = vec![0.0; d];
        for (&i, v) in keep.iter().zip(x_kept) {
            x[i] = *v;
        }
        fn rec(mix: &GaussianMixture, x: &mut Vec<f64>, dropped: &[usize], bounds: &[(f64, f64)], tol: f64) -> f64 {
            match dropped.split_first() {
                None => mix.log_prob(x).unwrap().exp(),
                Some((&i, rest)) => {
                    let (a, b) = bounds[i];
                    let mut f = |t: f64| {
                        x[i] = t;
                        rec(mix, x, rest, bounds, tol)
                    };
                    integrate(&mut f, a, b, tol)
                }
            }
        }
        rec(mix, &mut x, &dropped, &bounds, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(mean: Vec<f64>, cov: Vec<f64>) -> GaussianMixture {
        let d = mean.len();
        GaussianMixture::from_covariances(vec![1.0], mean, cov, d).unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = single(vec![0.0], vec![1.0]);
        assert_relative_eq!(m.log_prob(&[0.0]).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-15);
    }

    #[test]
    fn identical_components_collapse() {
        let one = single(vec![0.3, -1.0], vec![2.0, 0.5, 0.5, 1.0]);
        let two = GaussianMixture::from_covariances(
            vec![0.5, 0.5],
            vec![0.3, -1.0, 0.3, -1.0],
            vec![2.0, 0.5, 0.5, 1.0, 2.0, 0.5, 0.5, 1.0],
            2,
        )
        .unwrap();
        for x in [[0.0, 0.0], [1.0, -2.0], [5.0, 3.0]] {
            assert_relative_eq!(one.log_prob(&x).unwrap(), two.log_prob(&x).unwrap(), epsilon = 1e-13);
        }
    }

    #[test]
    fn matches_naive_density_sum() {
        let mut rng = rng_from_seed(11);
        let mix = random_mixture(3, 4, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut naive = 0.0;
            for k in 0..3 {
                let inv_x = {
                    let mut e: Vec<f64> = x.iter().zip(mix.mean(k)).map(|(a, b)| a - b).collect();
                    crate::linalg::spd_solve(mix.cov(k), 4, &e.clone()).map(|s| {
                        e.iter_mut().zip(&s).map(|(a, b)| *a * b).sum::<f64>()
                    })
                }
                .unwrap();
                let det: f64 = (0..4).map(|i| mix.chol(k)[i * 4 + i]).product::<f64>().powi(2);
                naive += mix.weights()[k] * (-0.5 * inv_x).exp() / ((2.0 * std::f64::consts::PI).powi(4) * det).sqrt();
            }
            let lp = mix.log_prob(&x).unwrap();
            assert!((lp.exp() - naive).abs() <= 1e-10 * naive, "{} vs {naive}", lp.exp());
        }
    }

    #[test]
    fn dimension_checked() {
        let m = single(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(m.log_prob(&[0.0]), Err(FslmError::Dimension { expected: 2, got: 1 })));
    }

    #[test]
    fn marginal_of_independent_coordinates() {
        let m = single(vec![1.0, 2.0], vec![1.0, 0.0, 0.0, 1.0]).marginalize(&[0]).unwrap();
        assert_eq!(m.mean(0), &[1.0]);
        assert_eq!(m.cov(0), &[1.0]);
    }

    #[test]
    fn marginal_is_sub_block_not_conditional() {
        let m = single(vec![0.0, 0.0], vec![2.0, 1.0, 1.0, 2.0]).marginalize(&[0]).unwrap();
        assert_eq!(m.cov(0), &[2.0]);
        assert_relative_eq!(m.chol(0)[0], 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn marginal_matches_quadrature() {
        let mut rng = rng_from_seed(2024);
        let mix = random_mixture(10, 4, &mut rng);
        let marg = mix.marginalize(&[0, 2]).unwrap();
        for _ in 0..20 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let q = quadrature_marginal(&mix, &[0, 2], &x, 1e-12);
            let p = marg.log_prob(&x).unwrap().exp();
            assert!((p - q).abs() <= 1e-6 * q, "{p} vs {q}");
        }
    }

    #[test]
    fn bad_keep_sets() {
        let mut rng = rng_from_seed(1);
        let mix = random_mixture(2, 3, &mut rng);
        assert!(matches!(mix.marginalize(&[]), Err(FslmError::EmptyKeep)));
        assert!(matches!(mix.marginalize(&[3]), Err(FslmError::BadIndex { index: 3, dim: 3 })));
        assert_eq!(mix.marginalize(&[2, 0, 2]).unwrap(), mix.marginalize(&[0, 2]).unwrap());
    }

    #[test]
    fn integrates_to_one_by_monte_carlo() {
        // importance sampling from a wide Gaussian
        let mut rng = rng_from_seed(9);
        let mix = random_mixture(4, 2, &mut rng);
        let s = 6.0;
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let y = [x[0] * s, x[1] * s];
            let q = (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI * s * s);
            acc += mix.log_prob(&y).unwrap().exp() / q;
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn samples_have_mixture_mean() {
        let mut rng = rng_from_seed(4);
        let mix = random_mixture(3, 2, &mut rng);
        let xs = mix.sample(100_000, &mut rng);
        for i in 0..2 {
            let want: f64 = (0..3).map(|k| mix.weights()[k] * mix.mean(k)[i]).sum();
            let got = xs.column(i).mean().unwrap();
            assert!((got - want).abs() < 0.03, "{got} vs {want}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nested_marginals_are_exact(seed in any::<u64>(), k in 1usize..6, mask in 1u32..16, sub in 1u32..16) {
            let mut rng = rng_from_seed(seed);
            let mix = random_mixture(k, 4, &mut rng);
            let outer: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
            let inner_pos: Vec<usize> = (0..outer.len()).filter(|i| sub & (1 << i) != 0).collect();
            prop_assume!(!inner_pos.is_empty());
            let inner: Vec<usize> = inner_pos.iter().map(|&p| outer[p]).collect();
            let twice = mix.marginalize(&outer).unwrap().marginalize(&inner_pos).unwrap();
            let once = mix.marginalize(&inner).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn keeping_everything_is_identity(seed in any::<u64>(), k in 1usize..6, d in 1usize..5) {
            let mut rng = rng_from_seed(seed);
            let mix = random_mixture(k, d, &mut rng);
            let all: Vec<usize> = (0..d).collect();
            let m = mix.marginalize(&all).unwrap();
            prop_assert_eq!(&m.means, &mix.means);
            prop_assert_eq!(&m.covs, &mix.covs);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            prop_assert!((m.log_prob(&x).unwrap() - mix.log_prob(&x).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn weights_sum_to_one_after_marginalizing(seed in any::<u64>(), k in 1usize..11) {
            let mut rng = rng_from_seed(seed);
            let mix = random_mixture(k, 3, &mut rng).marginalize(&[1]).unwrap();
            prop_assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
