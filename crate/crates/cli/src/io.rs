//! File plumbing: configs, catalogs, checkpoints and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toolplan::config::EngineConfig;
use toolplan::policy::PolicyParams;
use toolplan::{default_registry, TaskSpec, ToolRegistry};

use crate::error::{CliError, Result};

pub const CONFIG_ENV: &str = "ENGINE_CONFIG";

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn schema_err(path: &Path, field: String, message: impl ToString) -> CliError {
    CliError::Schema {
        path: path.to_path_buf(),
        field: if field.is_empty() || field == "." { "<root>".into() } else { field },
        message: message.to_string(),
    }
}

/// Parses JSON, reporting the failing field path.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| schema_err(path, e.path().to_string(), e.inner()))
}

fn parse_toml<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| schema_err(path, e.path().to_string(), e.inner().message()))
}

/// Loads the engine config from `explicit`, falling back to `ENGINE_CONFIG`,
/// then to defaults. Files ending in `.json` are JSON; anything else is TOML.
pub fn load_config(explicit: Option<&Path>, seed: Option<u64>) -> Result<EngineConfig> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    let mut cfg = match &path {
        None => EngineConfig::default(),
        Some(p) => {
            let text = read(p)?;
            if p.extension().is_some_and(|e| e == "json") {
                parse_json(p, &text)?
            } else {
                parse_toml(p, &text)?
            }
        }
    };
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_registry(cfg: &EngineConfig) -> Result<ToolRegistry> {
    if cfg.registry == "default" {
        return Ok(default_registry());
    }
    let path = Path::new(&cfg.registry);
    let text = read(path)?;
    ToolRegistry::from_json(&text).map_err(|e| schema_err(path, String::new(), e))
}

pub fn registry_hash(reg: &ToolRegistry) -> String {
    sha256_hex(reg.to_json())
}

pub fn load_catalog(path: &Path) -> Result<Vec<TaskSpec>> {
    let tasks: Vec<TaskSpec> = parse_json(path, &read(path)?)?;
    for (i, t) in tasks.iter().enumerate() {
        t.check().map_err(|e| schema_err(path, format!("[{i}]"), e))?;
    }
    Ok(tasks)
}

/// Reproducibility record written next to, or inside, every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub program: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub registry_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of each input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &EngineConfig, reg: &ToolRegistry) -> Self {
        let seeds = BTreeMap::from([
            ("catalog".to_string(), cfg.catalog.seed),
            ("decoder".to_string(), cfg.decoder.seed),
            ("split".to_string(), cfg.split_seed),
            ("train".to_string(), cfg.train.seed),
        ]);
        Self {
            program: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: cfg.fingerprint(),
            registry_hash: registry_hash(reg),
            seeds,
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, role: &str, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.insert(role.into(), sha256_hex(bytes));
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub schema: String,
    pub params: PolicyParams,
}

pub fn load_checkpoint(path: &Path, reg: &ToolRegistry) -> Result<Checkpoint> {
    let ck: Checkpoint = parse_json(path, &read(path)?)?;
    if ck.manifest.registry_hash != registry_hash(reg) {
        return Err(CliError::RegistryMismatch);
    }
    ck.params.check().map_err(|e| schema_err(path, "params".into(), e))?;
    Ok(ck)
}

pub fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}
