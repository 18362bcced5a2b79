//! Run configuration: one JSON document covering every stage, hashed into
//! every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::denoiser_net::NetworkConfig;
use crate::error::{Error, Result};
use crate::flm_train::TrainConfig;
use crate::flowmap::{DistillConfig, FlowMapKind};
use crate::sampler::SampleRun;

/// Environment variable consulted for the seed when no flag sets it.
pub const SEED_ENV: &str = "FLM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub flowmap_kind: FlowMapKind,
    pub sampler: SampleRun,
    pub corpus: CorpusSpec,
    pub corpus_size: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            flowmap_kind: FlowMapKind::EulerCorrection,
            sampler: SampleRun::default(),
            corpus: CorpusSpec::default(),
            corpus_size: 10_000,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        self.sampler.validate()?;
        if self.corpus_size == 0 {
            return Err(Error::Config("corpus_size must be positive".into()));
        }
        if let CorpusSpec::TextFile { path, .. } = &self.corpus {
            if !path.exists() {
                return Err(Error::Config(format!("text corpus {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The output directory is left
    /// out, so the same run hashes the same wherever it writes.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Copies the run seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.distill.seed = seed;
        self.sampler.seed = seed;
        self
    }
}

/// Seed from the flag, else from `FLM_SEED`, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an integer"))),
        Err(_) => Ok(fallback),
    }
}
