use std::sync::OnceLock;

use fslm_core::experiments::{run_pipeline, LgmProblem, Pipeline, PipelineConfig};
use fslm_core::inference::{
    lag1_autocorrelation, sample_posterior, LogDensity, SampleSet, SamplerConfig, SamplerKind,
};
use fslm_core::metrics::iqr;
use fslm_core::select::leave_one_out_rank;
use fslm_core::sim::LgmConfig;
use ndarray::Array2;

fn fixture() -> &'static (LgmProblem, Pipeline) {
    static F: OnceLock<(LgmProblem, Pipeline)> = OnceLock::new();
    F.get_or_init(|| {
        let p = LgmProblem::new(LgmConfig::default(), 100).unwrap();
        let pipe = run_pipeline(&p.simulator(), &p.prior, &PipelineConfig::default(), 100).unwrap();
        (p, pipe)
    })
}

fn mean_sd(samples: &Array2<f64>, j: usize) -> (f64, f64) {
    let c = samples.column(j);
    let n = c.len() as f64;
    let m = c.sum() / n;
    (m, (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Monte Carlo standard error of each column mean, inflated by lag-1
/// autocorrelation for chains.
fn standard_errors(s: &SampleSet) -> Vec<f64> {
    let rho = s.diagnostics.lag1_autocorrelation.clone().unwrap_or_else(|| vec![0.0; s.dim()]);
    (0..s.dim())
        .map(|j| {
            let (_, sd) = mean_sd(&s.samples, j);
            let r = rho[j].clamp(0.0, 0.99);
            let ess = s.len() as f64 * (1.0 - r) / (1.0 + r);
            sd / ess.sqrt()
        })
        .collect()
}

#[test]
fn learned_log_density_tracks_analytic() {
    let (p, pipe) = fixture();
    let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
    let post = spec.posterior(&[0, 1, 2, 3]).unwrap();
    let truth = p.analytic(&[0, 1, 2, 3]).unwrap();
    let thetas = truth.sample(500, 7);
    let a = post.logpdf_batch(thetas.view());
    let b = truth.logpdf_batch(thetas.view());
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let r = cov / (va * vb).sqrt();
    assert!(r >= 0.95, "correlation {r}");
}

/// The surrogate is approximate, so the allowance is sampling error plus a
/// fifth of a posterior standard deviation.
#[test]
fn rejection_mean_matches_analytic_truncated_gaussian() {
    let (p, pipe) = fixture();
    let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
    let cfg = SamplerConfig { n: 500, ..SamplerConfig::default() };
    let s = spec.sample(&[0, 1, 2, 3], &cfg, 11).unwrap();
    let reference = p.analytic(&[0, 1, 2, 3]).unwrap().sample(200_000, 12);
    let se = standard_errors(&s);
    for j in 0..3 {
        let (m, _) = mean_sd(&s.samples, j);
        let (t, sd) = mean_sd(&reference, j);
        assert!((m - t).abs() < 3.0 * se[j] + 0.2 * sd, "θ{j}: {m} vs {t} (se {})", se[j]);
    }
    let again = spec.sample(&[0, 1, 2, 3], &cfg, 11).unwrap();
    assert_eq!(s, again);
}

#[test]
fn rejection_and_mcmc_agree() {
    let (p, pipe) = fixture();
    let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
    let post = spec.posterior(&[0, 1, 2, 3]).unwrap();
    for seed in 0..5 {
        let rej = sample_posterior(&post, &p.prior, &SamplerConfig { n: 500, ..SamplerConfig::default() }, seed).unwrap();
        let mc_cfg = SamplerConfig { kind: SamplerKind::Mcmc, n: 2000, chains: 4, ..SamplerConfig::default() };
        let mc = sample_posterior(&post, &p.prior, &mc_cfg, seed).unwrap();
        let (se_r, se_m) = (standard_errors(&rej), standard_errors(&mc));
        for j in 0..3 {
            let (a, _) = mean_sd(&rej.samples, j);
            let (b, _) = mean_sd(&mc.samples, j);
            let joint = (se_r[j].powi(2) + se_m[j].powi(2)).sqrt();
            assert!((a - b).abs() < 3.0 * joint, "seed {seed} θ{j}: {a} vs {b} (se {joint})");
        }
        assert!(mc.diagnostics.r_hat.as_ref().unwrap().iter().all(|r| *r < 1.2));
        let chains: Vec<_> = (0..4).map(|c| mc.samples.slice(ndarray::s![c * 500..(c + 1) * 500, ..])).collect();
        assert_eq!(lag1_autocorrelation(&chains).len(), 3);
    }
}

#[test]
fn dropping_x0_leaves_theta0_at_its_prior() {
    let (p, pipe) = fixture();
    let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
    let s = spec.sample(&[1, 2, 3], &SamplerConfig { n: 2000, ..SamplerConfig::default() }, 3).unwrap();
    let q = iqr(&s.samples.column(0).to_vec()).unwrap();
    assert!((q - 5.0).abs() <= 0.5, "IQR {q}");
}

#[test]
fn leave_one_out_matches_model_structure() {
    let (p, pipe) = fixture();
    let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
    let out = leave_one_out_rank(&spec, &SamplerConfig { n: 1000, ..SamplerConfig::default() }, 4).unwrap();
    let kl: Vec<f64> = out.table.rows.iter().map(|r| r.kl.unwrap()).collect();
    let smallest = (0..4).min_by(|&a, &b| kl[a].total_cmp(&kl[b])).unwrap();
    assert_eq!(smallest, 3, "{kl:?}");
    assert!(kl[3].abs() < 0.15, "{kl:?}");
    let r0 = &out.table.rows[0].iqr_ratios;
    assert!(r0[0].unwrap() > r0[1].unwrap() && r0[0].unwrap() > r0[2].unwrap(), "{r0:?}");
    let col0: Vec<f64> = out.table.rows.iter().map(|r| r.iqr_ratios[0].unwrap()).collect();
    assert!((1..4).all(|i| col0[0] > col0[i]), "{col0:?}");
}

#[test]
fn invalid_data_machinery_is_a_no_op_when_everything_is_valid() {
    let (p, pipe) = fixture();
    let cfg = PipelineConfig { handle_invalid: true, ..PipelineConfig::default() };
    let with = run_pipeline(&p.simulator(), &p.prior, &cfg, 100).unwrap();
    assert!(with.classifier.is_none());
    assert_eq!(with.model, pipe.model);
    let a = pipe.spec(&p.prior, &p.x_obs).unwrap().posterior(&[0, 2]).unwrap();
    let b = with.spec(&p.prior, &p.x_obs).unwrap().posterior(&[0, 2]).unwrap();
    let thetas = p.prior.sample(200, 9).unwrap();
    for row in thetas.rows() {
        let t = row.as_slice().unwrap();
        assert!((a.logpdf(t) - b.logpdf(t)).abs() <= 1e-6);
    }
}
