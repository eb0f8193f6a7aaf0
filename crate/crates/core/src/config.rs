//! Run configuration: JSON with every field defaulted, validated on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arm::PlantParams;
use crate::bench::{BenchConfig, DataConfig};
use crate::error::{Error, Result};
use crate::fit::{FitOptions, Ridge};
use crate::lifting::DictionaryConfig;
use crate::mpc::MpcConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "KOOPMAN_CCK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the training-data generator.
    pub seed: u64,
    /// Threads for Gram accumulation and benchmark runs.
    pub workers: usize,
    pub output_dir: String,
    pub plant: PlantParams,
    pub dictionary: DictionaryConfig,
    pub data: DataConfig,
    pub fit: FitOptions,
    pub mpc: MpcConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            output_dir: "out".into(),
            plant: PlantParams::default(),
            dictionary: DictionaryConfig::default(),
            data: DataConfig::default(),
            fit: FitOptions::default(),
            mpc: MpcConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document. Blank input yields the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(RunConfig::default());
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_data() {
                let field = if path == "." { "<root>".to_string() } else { path };
                Error::ConfigInvalid {
                    field,
                    reason: strip_position(&inner.to_string()),
                }
            } else {
                parse_error(text, &inner)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Validation failures are reported as [`Error::ConfigInvalid`].
    pub fn validate(&self) -> Result<()> {
        let check = || -> Result<()> {
            if self.workers == 0 {
                return Err(Error::invalid("workers", "must be >= 1"));
            }
            if self.output_dir.is_empty() {
                return Err(Error::invalid("output_dir", "must not be empty"));
            }
            self.plant.validate().map_err(|e| match e {
                Error::InvalidParameter { field, reason } => Error::InvalidParameter {
                    field: format!("plant.{field}"),
                    reason,
                },
                other => other,
            })?;
            self.dictionary.validate()?;
            self.data.validate()?;
            let (Ridge::Absolute(l) | Ridge::Trace(l) | Ridge::Relative(l)) = self.fit.ridge;
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid("fit.ridge.lambda", "must be finite and >= 0"));
            }
            self.mpc.validate()?;
            self.bench.validate()?;
            Ok(())
        };
        check().map_err(|e| match e {
            Error::InvalidParameter { field, reason } => Error::ConfigInvalid { field, reason },
            other => other,
        })
    }

    /// Canonical JSON of the fully resolved config.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    /// Applies the seed precedence: explicit flag, then environment, then file.
    pub fn apply_seed_override(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(raw) = env {
            self.seed = raw.trim().parse().map_err(|_| Error::ConfigInvalid {
                field: SEED_ENV.into(),
                reason: format!("`{raw}` is not an unsigned integer"),
            })?;
        }
        Ok(())
    }
}

/// Byte offset of a serde_json error position (1-based line and column).
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub(crate) fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: strip_position(&e.to_string()),
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}
