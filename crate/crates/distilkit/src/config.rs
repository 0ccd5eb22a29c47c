//! Run descriptions read from TOML or JSON, and the provenance header written
//! at the top of every emitted file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::CompressionLoss;
use crate::error::{Error, Result};
use crate::optim::{TrainConfig, UpdateRule};

/// Source of student training inputs for compression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// The training images, or a stratified fraction of them.
    Data {
        #[serde(default = "one")]
        fraction: f64,
    },
    /// Samples from a trained NADE.
    Nade { model: PathBuf },
    /// I.i.d. standard normal pixels.
    GaussianNoise,
}

fn one() -> f64 {
    1.0
}

/// A compression run: teacher ensemble, student family, loss, input
/// generator, optimiser and budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    pub teachers: Vec<PathBuf>,
    /// Architecture string, e.g. `784-relu-50-relu-30-logsoftmax-10`.
    pub student: String,
    pub loss: CompressionLoss,
    pub generator: GeneratorSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub rule: UpdateRule,
    /// Test images used for the accuracy trace; 0 disables it.
    #[serde(default = "default_heldout")]
    pub heldout: usize,
    pub seed: u64,
}

fn default_heldout() -> usize {
    1000
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::Config("at least one teacher network is required".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let GeneratorSpec::Data { fraction } = self.generator {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("data fraction {fraction} outside (0, 1]")));
            }
        }
        if let UpdateRule::Sgd { schedule } = self.rule {
            schedule.validate()?;
        }
        crate::nn::Network::from_arch(&self.student).map(|_| ())
    }
}

/// Parses TOML, or JSON when the text starts with `{`.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    if text.trim_start().starts_with('{') {
        Ok(serde_json::from_str(text)?)
    } else {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    parse_config(&std::fs::read_to_string(path)?)
}

/// SHA-256 of the canonical JSON form, in hex.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Provenance lines; writers prefix each with `# `.
pub fn header_lines(command: &str, hash: &str, seed: u64) -> Vec<String> {
    vec![
        format!("distilkit {} {command}", env!("CARGO_PKG_VERSION")),
        format!("config_sha256 {hash}"),
        format!("seed {seed}"),
    ]
}
