//! Feature-importance workflows built on subset posteriors.

mod greedy;
mod rank;

pub use greedy::{greedy_select, random_order_trace, write_traces_csv, Candidate, GreedyTrace};
pub use rank::{
    all_features, brute_force_rank, leave_one_out, leave_one_out_rank, reference_seed, subset_mask, subset_seed,
    train_on_subset, PosteriorSpec, RankMode, RankOutcome, RankRow, RankTable, RetrainConfig, Timings,
};

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::experiments::{run_pipeline, LgmProblem, Pipeline, PipelineConfig};
    use crate::inference::{SamplerConfig, SamplerKind};
    use crate::mdn::TrainConfig;
    use crate::sim::LgmConfig;

    fn fixture() -> &'static (LgmProblem, Pipeline) {
        static F: OnceLock<(LgmProblem, Pipeline)> = OnceLock::new();
        F.get_or_init(|| {
            let p = LgmProblem::new(LgmConfig::default(), 21).unwrap();
            let cfg = PipelineConfig {
                n_train: 3000,
                retrain: RetrainConfig {
                    hidden: vec![32, 32],
                    components: 2,
                    train: TrainConfig { max_epochs: 100, ..TrainConfig::default() },
                    ..RetrainConfig::default()
                },
                ..PipelineConfig::default()
            };
            let pipe = run_pipeline(&p.simulator(), &p.prior, &cfg, 21).unwrap();
            (p, pipe)
        })
    }

    fn sampler() -> SamplerConfig {
        SamplerConfig { kind: SamplerKind::Rejection, n: 300, envelope_draws: 2000, ..SamplerConfig::default() }
    }

    #[test]
    fn subset_seeds_are_distinct_per_subset() {
        assert_eq!(subset_mask(&[0, 3]), 0b1001);
        assert_eq!(subset_seed(1, &[0, 3]), subset_seed(1, &[0, 3]));
        assert_ne!(subset_seed(1, &[0, 3]), subset_seed(1, &[0, 2]));
        assert_ne!(subset_seed(1, &[0, 3]), reference_seed(1));
        assert_eq!(leave_one_out(4, 2), vec![0, 1, 3]);
    }

    #[test]
    fn leave_one_out_is_deterministic_and_well_formed() {
        let (p, pipe) = fixture();
        let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
        let a = leave_one_out_rank(&spec, &sampler(), 5).unwrap();
        let b = leave_one_out_rank(&spec, &sampler(), 5).unwrap();
        assert_eq!(a.table.rows, b.table.rows);
        assert_eq!(a.table.rows.len(), 4);
        for r in &a.table.rows {
            assert!(r.kl.unwrap() >= -0.15, "{r:?}");
            assert_eq!(r.n_samples, 300);
        }
        let mut csv = Vec::new();
        a.table.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), "removed,kl,n_samples,seed,error,iqr_theta0,iqr_theta1,iqr_theta2");
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn greedy_full_beam_finds_best_single_feature() {
        let (p, pipe) = fixture();
        let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
        let full = spec.sample_full(&sampler(), 6).unwrap();
        let t = greedy_select(&spec, &full, 1, 4, &sampler(), 6).unwrap();
        let best = t.candidates[0].iter().min_by(|a, b| a.kl.total_cmp(&b.kl)).unwrap();
        assert_eq!(t.selected, best.subset);
        assert_eq!(t.candidates[0].len(), 4);
    }

    #[test]
    fn greedy_to_all_features_ends_near_zero() {
        let (p, pipe) = fixture();
        let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
        let full = spec.sample_full(&sampler(), 7).unwrap();
        let t = greedy_select(&spec, &full, 4, 1, &sampler(), 7).unwrap();
        let mut sorted = t.selected.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(t.kl[3].abs() < 0.4, "{:?}", t.kl);
        let again = greedy_select(&spec, &full, 4, 1, &sampler(), 7).unwrap();
        assert_eq!(t, again);
        let wide = greedy_select(&spec, &full, 2, 3, &sampler(), 7).unwrap();
        assert_eq!(wide.selected.len(), 2);
        assert_ne!(wide.selected[0], wide.selected[1]);
    }

    #[test]
    fn random_baseline_is_a_seeded_permutation() {
        let (p, pipe) = fixture();
        let spec = pipe.spec(&p.prior, &p.x_obs).unwrap();
        let full = spec.sample_full(&sampler(), 8).unwrap();
        let a = random_order_trace(&spec, &full, 3, &sampler(), 8).unwrap();
        let b = random_order_trace(&spec, &full, 3, &sampler(), 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected.len(), 3);
        assert!(greedy_select(&spec, &full, 0, 1, &sampler(), 8).is_err());
        assert!(greedy_select(&spec, &full, 5, 1, &sampler(), 8).is_err());
        let mut csv = Vec::new();
        write_traces_csv(&[(0, &a)], &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }
}
