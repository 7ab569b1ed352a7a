use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FORMAT: &str = "fslm-manifest";
pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
    /// Contents depend on wall-clock time; excluded from replay comparison.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub volatile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub config_sha256: String,
    pub threads: usize,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub seeds: BTreeMap<String, u64>,
}

pub fn config_hash(config: &RunConfig) -> Result<String> {
    Ok(sha256_bytes(serde_json::to_string(config)?.as_bytes()))
}

/// Collects what a command read, wrote and spent while it runs.
#[derive(Debug, Default)]
pub struct Recorder {
    pub inputs: Vec<FileRecord>,
    pending: Vec<(PathBuf, bool)>,
    pub timings: BTreeMap<String, f64>,
    pub seeds: BTreeMap<String, u64>,
}

impl Recorder {
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileRecord { path: path.to_owned(), sha256, volatile: false });
        Ok(())
    }

    /// Registers an output path; fails if something already lives there.
    pub fn claim(&mut self, path: &Path, volatile: bool) -> Result<()> {
        if path.exists() {
            bail!("refusing to overwrite existing {}", path.display());
        }
        if self.pending.iter().any(|(p, _)| p == path) {
            bail!("output {} claimed twice", path.display());
        }
        self.pending.push((path.to_owned(), volatile));
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_owned(), seed);
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings.entry(phase.to_owned()).or_insert(0.0) += start.elapsed().as_secs_f64();
        out
    }

    pub fn add_time(&mut self, phase: &str, seconds: f64) {
        *self.timings.entry(phase.to_owned()).or_insert(0.0) += seconds;
    }

    pub fn finish(self, command: &str, argv: Vec<String>, config: &RunConfig) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.pending.len());
        for (path, volatile) in self.pending {
            if !path.exists() {
                bail!("command did not produce {}", path.display());
            }
            outputs.push(FileRecord { sha256: sha256_file(&path)?, path, volatile });
        }
        Ok(RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.to_owned(),
            argv,
            config: config.clone(),
            config_sha256: config_hash(config)?,
            threads: rayon::current_num_threads(),
            inputs: self.inputs,
            outputs,
            timings: self.timings,
            seeds: self.seeds,
        })
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            bail!("{} is not a version {MANIFEST_VERSION} manifest", path.display());
        }
        if config_hash(&m.config)? != m.config_sha256 {
            bail!("manifest config does not match its recorded hash");
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fslm_core::io::write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn claim_refuses_existing_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let existing = dir.path().join("a");
        std::fs::write(&existing, b"x").unwrap();
        let mut r = Recorder::default();
        assert!(r.claim(&existing, false).is_err());
        let fresh = dir.path().join("b");
        r.claim(&fresh, false).unwrap();
        assert!(r.claim(&fresh, false).is_err());
        assert!(r.finish("t", vec![], &RunConfig::default()).is_err());
    }

    #[test]
    fn manifest_roundtrip_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let mut r = Recorder::default();
        r.claim(&out, false).unwrap();
        std::fs::write(&out, b"data").unwrap();
        r.seed("run", 4);
        let m = r.finish("t", vec!["x".into()], &RunConfig::default()).unwrap();
        let path = dir.path().join("m.json");
        m.write(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
        let mut tampered = m.clone();
        tampered.config.seed = 99;
        tampered.write(&dir.path().join("t.json")).unwrap();
        assert!(RunManifest::load(&dir.path().join("t.json")).is_err());
    }
}
