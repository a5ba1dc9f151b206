//! Top-level engine configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchgen::CatalogConfig;
use crate::decoder::DecoderConfig;
use crate::evalkit::EvalConfig;
use crate::par::Parallelism;
use crate::rltf::{ComparisonConfig, SupervisedConfig, TrainConfig};
use crate::simkit::SimParams;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn bad(field: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: e.to_string(),
    }
}

/// Every tunable of a run. Unknown keys are rejected when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// `"default"` or a path to a registry JSON file.
    pub registry: String,
    pub parallelism: Parallelism,
    pub split_seed: u64,
    /// Tools per branch for the oracle; defaults to the decoder limit.
    pub oracle_max_depth: Option<usize>,
    pub catalog: CatalogConfig,
    pub decoder: DecoderConfig,
    pub supervised: SupervisedConfig,
    pub train: TrainConfig,
    pub sim: SimParams,
    pub output_dir: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            registry: "default".into(),
            parallelism: Parallelism::default(),
            split_seed: 0,
            oracle_max_depth: None,
            catalog: CatalogConfig::default(),
            decoder: DecoderConfig::default(),
            supervised: SupervisedConfig::default(),
            train: TrainConfig::default(),
            sim: SimParams::default(),
            output_dir: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.check().map_err(|e| bad("sim", e))?;
        self.decoder.check().map_err(|e| bad("decoder", e))?;
        self.train.check().map_err(|e| bad("train", e))?;
        if self.catalog.samples_per_task == 0 {
            return Err(bad("catalog.samples_per_task", "must be >= 1"));
        }
        if self.supervised.lr < 0.0 || !self.supervised.lr.is_finite() {
            return Err(bad("supervised.lr", "must be finite and >= 0"));
        }
        if self.oracle_max_depth == Some(0) {
            return Err(bad("oracle_max_depth", "must be >= 1"));
        }
        Ok(())
    }

    /// Sets every seed in the configuration.
    pub fn reseed(&mut self, seed: u64) {
        self.split_seed = seed;
        self.catalog.seed = seed;
        self.decoder.seed = seed;
        self.train.seed = seed;
        self.train.sampling.seed = seed;
    }

    pub fn oracle_depth(&self) -> usize {
        self.oracle_max_depth.unwrap_or(self.decoder.max_tools_per_branch)
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut decoder = self.decoder;
        decoder.parallelism = self.parallelism;
        EvalConfig {
            decoder,
            sim: self.sim,
            parallelism: self.parallelism,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train;
        t.parallelism = self.parallelism;
        t.sampling.max_tools_per_branch = self.decoder.max_tools_per_branch;
        t
    }

    pub fn comparison(&self) -> ComparisonConfig {
        ComparisonConfig {
            split_seed: self.split_seed,
            oracle_max_depth: Some(self.oracle_depth()),
            supervised: self.supervised,
            train: self.train_config(),
            eval: self.eval_config(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let doc = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(doc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = EngineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.oracle_depth(), 5);
        assert_eq!(c.fingerprint(), EngineConfig::default().fingerprint());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<EngineConfig>(r#"{"decoder":{"beam":3}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let ok: EngineConfig = serde_json::from_str(r#"{"decoder":{"beam_size":3}}"#).unwrap();
        assert_eq!(ok.decoder.beam_size, 3);
        assert_eq!(ok.decoder.top_k, 5);
    }

    #[test]
    fn nested_invariants() {
        let mut c = EngineConfig::default();
        c.decoder.top_p = 0.0;
        assert_eq!(c.validate().unwrap_err().field, "decoder");
        let mut c = EngineConfig::default();
        c.sim.beta = 2.0;
        assert_eq!(c.validate().unwrap_err().field, "sim");
    }

    #[test]
    fn reseed_changes_fingerprint() {
        let mut c = EngineConfig::default();
        let before = c.fingerprint();
        c.reseed(99);
        assert_eq!(c.catalog.seed, 99);
        assert_ne!(c.fingerprint(), before);
    }
}
