use std::path::Path;

use anyhow::{bail, Context, Result};
use fslm_core::experiments::PipelineConfig;
use fslm_core::features::{FeatureConfig, FeatureSet};
use fslm_core::inference::{HhSimulator, LgmSimulator, SamplerConfig, Simulator};
use fslm_core::sim::{hh_prior, BoxPrior, HhConstants, LgmConfig, StimulusProtocol};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lgm,
    Hh,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lgm => "lgm",
            ModelKind::Hh => "hh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HhSection {
    pub constants: HhConstants,
    pub stimulus: StimulusProtocol,
    pub features: Vec<String>,
    pub feature_config: FeatureConfig,
}

impl Default for HhSection {
    fn default() -> Self {
        HhSection {
            constants: HhConstants::default(),
            stimulus: StimulusProtocol::default(),
            features: FeatureSet::hh_core().names().to_vec(),
            feature_config: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    None,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreedySection {
    pub k: usize,
    pub beam: usize,
    pub runs: usize,
    pub baseline: Baseline,
}

impl Default for GreedySection {
    fn default() -> Self {
        GreedySection { k: 3, beam: 1, runs: 1, baseline: Baseline::None }
    }
}

/// Everything a run depends on besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelKind,
    pub lgm: LgmConfig,
    pub hh: HhSection,
    /// Replaces the model's default box.
    pub prior: Option<PriorSection>,
    pub pipeline: PipelineConfig,
    pub sampler: SamplerConfig,
    pub greedy: GreedySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelKind::Lgm,
            lgm: LgmConfig::default(),
            hh: HhSection::default(),
            prior: None,
            pipeline: PipelineConfig::default(),
            sampler: SamplerConfig::default(),
            greedy: GreedySection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::Error::new(ConfigErrors(vec![format!("{}: {e}", path.display())])))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != CONFIG_VERSION {
            v.push(format!("version: unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if let Err(e) = self.lgm.validate() {
            v.push(format!("lgm: {e}"));
        }
        if let Err(e) = self.hh.stimulus.validate() {
            v.push(format!("hh.stimulus: {e}"));
        }
        if let Err(e) = FeatureSet::from_names(&self.hh.features) {
            v.push(format!("hh.features: {e}"));
        }
        if let Some(p) = &self.prior {
            let dim = self.param_dim();
            if p.lower.len() != dim || p.upper.len() != dim {
                v.push(format!("prior: {} model needs {dim} bounds per side", self.model.name()));
            } else if let Err(e) = BoxPrior::new(p.lower.clone(), p.upper.clone()) {
                v.push(format!("prior: {e}"));
            }
        }
        v.extend(self.pipeline.violations().into_iter().map(|s| format!("pipeline: {s}")));
        v.extend(self.sampler.violations().into_iter().map(|s| format!("sampler: {s}")));
        if self.greedy.k == 0 {
            v.push("greedy.k: must be at least 1".into());
        }
        if self.greedy.beam == 0 {
            v.push("greedy.beam: must be at least 1".into());
        }
        if self.greedy.runs == 0 {
            v.push("greedy.runs: must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if !v.is_empty() {
            bail!(ConfigErrors(v));
        }
        Ok(())
    }

    pub fn param_dim(&self) -> usize {
        match self.model {
            ModelKind::Lgm => self.lgm.l.first().map_or(0, |r| r.len()),
            ModelKind::Hh => hh_prior().dim(),
        }
    }

    pub fn prior(&self) -> Result<BoxPrior> {
        Ok(match (&self.prior, self.model) {
            (Some(p), _) => BoxPrior::new(p.lower.clone(), p.upper.clone())?,
            (None, ModelKind::Lgm) => BoxPrior::uniform(self.param_dim(), -5.0, 5.0)?,
            (None, ModelKind::Hh) => hh_prior(),
        })
    }

    pub fn hh_simulator(&self) -> Result<HhSimulator> {
        Ok(HhSimulator {
            constants: self.hh.constants,
            stimulus: self.hh.stimulus,
            features: FeatureSet::from_names(&self.hh.features)?,
            feature_config: self.hh.feature_config,
        })
    }

    pub fn simulator(&self) -> Result<Box<dyn Simulator>> {
        Ok(match self.model {
            ModelKind::Lgm => Box::new(LgmSimulator { config: self.lgm.clone() }),
            ModelKind::Hh => Box::new(self.hh_simulator()?),
        })
    }
}

/// Every validation failure of a config, reported together.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration ({} problems): {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}
