//! Summary statistics of simulator output.
//!
//! Spike-dependent statistics of a trace without enough spikes are marked
//! invalid rather than imputed; downstream code uses the mask to decide
//! which simulations may train the likelihood model.

mod hh;
mod spikes;

use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};

pub use hh::{extract_features, FeatureConfig};
pub use spikes::{detect_spikes, SpikeDetector, SpikeEvents};

/// The ten statistics used for HH inference, in canonical order.
pub const HH_CORE_FEATURES: [&str; 10] =
    ["APT", "APA", "APW", "AHP", "APA_adapt", "latency", "APC", "mean_Vm", "var_Vm", "mean_Vrest"];

/// Additional statistics for the extended reference set.
pub const HH_EXTENDED_FEATURES: [&str; 13] = [
    "APT_3",
    "APA_3",
    "APW_3",
    "AHP_3",
    "APC_T1_8",
    "APC_T1_4",
    "APC_T1_2",
    "APC_T2_2",
    "mean_APA_adapt",
    "CV_APA",
    "ISI_adapt",
    "CV_ISI",
    "std_Vrest",
];

pub fn hh_canonical_features() -> Vec<&'static str> {
    HH_CORE_FEATURES.iter().chain(HH_EXTENDED_FEATURES.iter()).copied().collect()
}

/// An ordered subset of the canonical HH statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    names: Vec<String>,
}

impl FeatureSet {
    pub fn hh_core() -> Self {
        FeatureSet { names: HH_CORE_FEATURES.iter().map(|s| s.to_string()).collect() }
    }

    pub fn hh_all() -> Self {
        FeatureSet { names: hh_canonical_features().into_iter().map(String::from).collect() }
    }

    /// Builds a set from names; they must be canonical, unique, and are
    /// reordered into canonical order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let canonical = hh_canonical_features();
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            let i = canonical
                .iter()
                .position(|c| *c == n)
                .ok_or_else(|| FslmError::config(format!("unknown HH feature {n:?}")))?;
            if idx.contains(&i) {
                return Err(FslmError::config(format!("duplicate HH feature {n:?}")));
            }
            idx.push(i);
        }
        if idx.is_empty() {
            return Err(FslmError::EmptyKeep);
        }
        idx.sort_unstable();
        Ok(FeatureSet { names: idx.into_iter().map(|i| canonical[i].to_string()).collect() })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Feature values with a validity mask; `values[i]` is finite iff
/// `valid[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub names: Vec<String>,
}

impl FeatureVector {
    /// Builds a vector and derives the mask from finiteness.
    pub fn from_values(names: Vec<String>, values: Vec<f64>) -> Self {
        let valid = values.iter().map(|v| v.is_finite()).collect();
        let values = values.into_iter().map(|v| if v.is_finite() { v } else { f64::NAN }).collect();
        FeatureVector { values, valid, names }
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }

    pub fn valid_on(&self, keep: &[usize]) -> bool {
        keep.iter().all(|&k| self.valid.get(k).copied().unwrap_or(false))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// LGM observations are their own features.
pub fn lgm_features(x: &[f64]) -> FeatureVector {
    let names = crate::sim::LGM_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    FeatureVector::from_values(names, x.to_vec())
}
