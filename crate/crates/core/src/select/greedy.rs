use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rank::{subset_mask, subset_seed, PosteriorSpec};
use crate::error::{FslmError, Result};
use crate::inference::{SampleSet, SamplerConfig};
use crate::metrics::kl_estimate;
use crate::rng::{child_rng, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Sorted feature indices.
    pub subset: Vec<usize>,
    /// KL(candidate ‖ full); infinite when sampling failed.
    pub kl: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    pub method: String,
    pub feature_names: Vec<String>,
    /// Features in the order they were added.
    pub selected: Vec<usize>,
    /// KL to the full posterior after each addition.
    pub kl: Vec<f64>,
    /// Every candidate scored at each step, best first.
    pub candidates: Vec<Vec<Candidate>>,
    pub run_seed: u64,
}

impl GreedyTrace {
    pub fn selected_names(&self) -> Vec<&str> {
        self.selected.iter().map(|&i| self.feature_names[i].as_str()).collect()
    }
}

/// Tidy trajectories: `run,method,step,feature,kl`.
pub fn write_traces_csv<W: Write>(traces: &[(usize, &GreedyTrace)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run", "method", "step", "feature", "kl"])?;
    for (run, t) in traces {
        for (step, (&f, kl)) in t.selected.iter().zip(&t.kl).enumerate() {
            out.write_record([run.to_string(), t.method.clone(), (step + 1).to_string(), t.feature_names[f].clone(), kl.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Scores subsets against one reference sample, caching by subset.
struct Scorer<'a, 'm> {
    spec: &'a PosteriorSpec<'m>,
    sampler: &'a SamplerConfig,
    full: &'a SampleSet,
    run_seed: u64,
    cache: HashMap<u64, Candidate>,
}

impl Scorer<'_, '_> {
    fn score_all(&mut self, subsets: Vec<Vec<usize>>) -> Vec<Candidate> {
        let fresh: Vec<Vec<usize>> = subsets.iter().filter(|s| !self.cache.contains_key(&subset_mask(s))).cloned().collect();
        let scored: Vec<Candidate> = fresh
            .into_par_iter()
            .map(|subset| {
                let kl = self
                    .spec
                    .sample(&subset, self.sampler, subset_seed(self.run_seed, &subset))
                    .and_then(|s| kl_estimate(s.samples.view(), self.full.samples.view()));
                match kl {
                    Ok(k) => Candidate { subset, kl: k.value, error: None },
                    Err(e) => Candidate { subset, kl: f64::INFINITY, error: Some(e.to_string()) },
                }
            })
            .collect();
        for c in scored {
            self.cache.insert(subset_mask(&c.subset), c);
        }
        subsets.iter().map(|s| self.cache[&subset_mask(s)].clone()).collect()
    }
}

fn by_score(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.kl.total_cmp(&b.kl).then_with(|| a.subset.cmp(&b.subset))
}

fn check_k(spec: &PosteriorSpec, k: usize) -> Result<()> {
    if k == 0 || k > spec.n_features() {
        return Err(FslmError::config(format!("k must lie in 1..={}, got {k}", spec.n_features())));
    }
    Ok(())
}

/// Forward selection by beam search: each step extends the best `beam`
/// partial sets by one unused feature and keeps the `beam` extensions with
/// the smallest KL to the full posterior. `full` is the shared reference.
pub fn greedy_select(
    spec: &PosteriorSpec,
    full: &SampleSet,
    k: usize,
    beam: usize,
    sampler: &SamplerConfig,
    run_seed: u64,
) -> Result<GreedyTrace> {
    check_k(spec, k)?;
    if beam == 0 {
        return Err(FslmError::config("beam must be at least 1"));
    }
    sampler.validate()?;
    let n = spec.n_features();
    let mut scorer = Scorer { spec, sampler, full, run_seed, cache: HashMap::new() };
    // each beam entry: features in insertion order
    let mut beams: Vec<Vec<usize>> = vec![Vec::new()];
    let mut history: Vec<Vec<Candidate>> = Vec::new();
    for _ in 0..k {
        let mut seen = HashMap::new();
        for path in &beams {
            for f in (0..n).filter(|f| !path.contains(f)) {
                let mut next = path.clone();
                next.push(f);
                let mut sorted = next.clone();
                sorted.sort_unstable();
                seen.entry(subset_mask(&sorted)).or_insert((sorted, next));
            }
        }
        let mut entries: Vec<(Vec<usize>, Vec<usize>)> = seen.into_values().collect();
        entries.sort();
        let scored = scorer.score_all(entries.iter().map(|e| e.0.clone()).collect());
        let mut ranked: Vec<(Candidate, Vec<usize>)> = scored.into_iter().zip(entries.into_iter().map(|e| e.1)).collect();
        ranked.sort_by(|a, b| by_score(&a.0, &b.0));
        beams = ranked.iter().take(beam).map(|(_, path)| path.clone()).collect();
        history.push(ranked.into_iter().map(|(c, _)| c).collect());
    }
    let best = &beams[0];
    let kl = (1..=best.len())
        .map(|j| {
            let mut s = best[..j].to_vec();
            s.sort_unstable();
            scorer.cache[&subset_mask(&s)].kl
        })
        .collect();
    Ok(GreedyTrace {
        method: "greedy".into(),
        feature_names: spec.model.feature_names().to_vec(),
        selected: best.clone(),
        kl,
        candidates: history,
        run_seed,
    })
}

/// Baseline trajectory adding features in a uniformly random order.
pub fn random_order_trace(
    spec: &PosteriorSpec,
    full: &SampleSet,
    k: usize,
    sampler: &SamplerConfig,
    run_seed: u64,
) -> Result<GreedyTrace> {
    check_k(spec, k)?;
    sampler.validate()?;
    let mut order: Vec<usize> = (0..spec.n_features()).collect();
    order.shuffle(&mut child_rng(run_seed, stream::BASELINE));
    order.truncate(k);
    let mut scorer = Scorer { spec, sampler, full, run_seed, cache: HashMap::new() };
    let prefixes: Vec<Vec<usize>> = (1..=k)
        .map(|j| {
            let mut s = order[..j].to_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let scored = scorer.score_all(prefixes);
    Ok(GreedyTrace {
        method: "random".into(),
        feature_names: spec.model.feature_names().to_vec(),
        selected: order,
        kl: scored.iter().map(|c| c.kl).collect(),
        candidates: scored.into_iter().map(|c| vec![c]).collect(),
        run_seed,
    })
}
