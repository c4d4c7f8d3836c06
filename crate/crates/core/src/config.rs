//! Experiment configuration: one JSON document with `"schema": 1`.
//!
//! Every field has a default, so `{"schema": 1}` is a complete config.
//! Unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, CrossOptions};
use crate::langevin::LangevinConfig;
use crate::nets::ArchSpec;
use crate::prior::ReferenceKind;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Unconditional samples for joint coherence.
    pub joint_samples: usize,
    /// Langevin steps for evaluation chains; defaults to the training value.
    pub langevin_steps: Option<usize>,
    /// Steps recorded by `chain-viz`.
    pub snapshot_steps: Vec<usize>,
    /// Chains dumped by `chain-viz`.
    pub chain_samples: usize,
    pub classifier: ClassifierConfig,
    pub cross: CrossOptions,
    pub partition_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            joint_samples: 2000,
            langevin_steps: None,
            snapshot_steps: vec![0, 10, 20, 30, 40, 50],
            chain_samples: 64,
            classifier: ClassifierConfig::default(),
            cross: CrossOptions::default(),
            partition_samples: 100_000,
            seed: 0,
        }
    }
}

/// Axes of the architecture/sampler ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub energy_units: Vec<usize>,
    pub energy_layers: Vec<usize>,
    pub steps: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            energy_units: vec![32, 64],
            energy_layers: vec![4, 6],
            steps: vec![30, 50],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub data: DatasetSpec,
    pub arch: ArchSpec,
    pub reference: ReferenceKind,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationGrid,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: SCHEMA_VERSION,
            data: DatasetSpec::default(),
            arch: ArchSpec::default(),
            reference: ReferenceKind::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationGrid::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// The subset of a configuration that fixes parameter shapes.
#[derive(Serialize)]
struct ModelIdentity<'a> {
    arch: &'a ArchSpec,
    reference: ReferenceKind,
    extension: bool,
    dims: Vec<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        self.data.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.eval.joint_samples == 0 || self.eval.chain_samples == 0 {
            return Err(Error::Config("eval.joint_samples and eval.chain_samples must be >= 1".into()));
        }
        if self.eval.langevin_steps == Some(0) {
            return Err(Error::Config("eval.langevin_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Langevin settings for evaluation chains.
    pub fn eval_langevin(&self, n_chains: usize) -> LangevinConfig {
        LangevinConfig {
            steps: self.eval.langevin_steps.unwrap_or(self.train.langevin.steps),
            n_chains,
            snapshot_steps: Vec::new(),
            seed: self.eval.seed,
            ..self.train.langevin.clone()
        }
    }

    /// Hex SHA-256 of everything that determines parameter names and shapes.
    pub fn model_digest(&self) -> String {
        let id = ModelIdentity {
            arch: &self.arch,
            reference: self.reference,
            extension: self.train.extension_enabled,
            dims: self.data.view_dims(),
        };
        hex_digest(serde_json::to_string(&id).expect("serializes").as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_is_complete() {
        let cfg = RunConfig::from_json(r#"{"schema": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.iterations = 17;
        cfg.arch.w_dim = 3;
        cfg.eval.langevin_steps = Some(5);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_fields_and_schema() {
        assert!(matches!(RunConfig::from_json(r#"{"schema": 1, "bogus": 2}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"schema": 2}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("{not json"), Err(Error::Config(_))));
    }

    #[test]
    fn digest_tracks_shapes_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.iterations = 5;
        assert_eq!(a.model_digest(), b.model_digest());
        b.arch.hidden_units = 8;
        assert_ne!(a.model_digest(), b.model_digest());
    }
}
