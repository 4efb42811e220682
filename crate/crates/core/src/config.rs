//! TOML experiment and sweep configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hwsim::HwConfig;
use crate::mnist::{self, Dataset};
use crate::network::Architecture;
use crate::quant::SUPPORTED_BITS;
use crate::sparsity::{CgsConfig, SUPPORTED_RATIOS};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four MNIST IDX files. Relative paths resolve
    /// against the config file's directory.
    pub dir: PathBuf,
    /// Use only the first `n` training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl DataConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = mnist::load_dir(&self.dir)?;
        if let Some(n) = self.train_limit {
            train = train.take(n);
        }
        if let Some(n) = self.test_limit {
            test = test.take(n);
        }
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: Architecture,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub hw: HwConfig,
}

/// The fields that determine a trained model.
#[derive(Serialize)]
struct HashedFields<'a> {
    model: &'a Architecture,
    train: &'a TrainConfig,
    train_limit: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.hw.validate()
    }

    /// SHA-256 over the model and training settings. The data directory,
    /// name and hardware settings do not affect the trained weights.
    pub fn hash(&self) -> [u8; 32] {
        let fields = HashedFields {
            model: &self.model,
            train: &self.train,
            train_limit: self.data.train_limit,
        };
        let text = toml::to_string(&fields).expect("config fields serialize");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex_string(&self.hash())
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = parse_toml(text, path)?;
        cfg.data.dir = resolve(path, &cfg.data.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        let msg = e.message().to_string();
        Error::Parse {
            path: path.to_path_buf(),
            msg: match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            },
        }
    })
}

fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    config_path.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
}

/// A grid of (activation bits, weight bits) × CGS ratio experiments sharing
/// one training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    /// `[activation_bits, weight_bits]` pairs.
    pub precisions: Vec<[u8; 2]>,
    pub ratios: Vec<usize>,
    pub widths: Vec<usize>,
    #[serde(default = "default_block")]
    pub block_size: usize,
    pub cgs_seed: u64,
    #[serde(default = "default_output_bits")]
    pub output_weight_bits: u8,
    /// Relative paths resolve against the spec file's directory.
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub hw: HwConfig,
}

fn default_block() -> usize {
    16
}

fn default_output_bits() -> u8 {
    8
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub id: String,
    pub act_bits: u8,
    pub weight_bits: u8,
    pub ratio: usize,
    pub config: ExperimentConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.precisions.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("sweep needs at least one precision and one ratio".into()));
        }
        for &[a, w] in &self.precisions {
            if !SUPPORTED_BITS.contains(&a) || !SUPPORTED_BITS.contains(&w) {
                return Err(Error::Config(format!("unsupported precision pair A{a}/W{w}")));
            }
        }
        if let Some(r) = self.ratios.iter().find(|r| !SUPPORTED_RATIOS.contains(r)) {
            return Err(Error::Config(format!("unsupported CGS ratio {r}")));
        }
        self.points().iter().try_for_each(|p| p.config.validate())
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let mut spec: SweepSpec = parse_toml(text, path)?;
        spec.data.dir = resolve(path, &spec.data.dir);
        spec.output_dir = resolve(path, &spec.output_dir);
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Points in spec order: precisions outer, ratios inner.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &[a, w] in &self.precisions {
            for &r in &self.ratios {
                let id = format!("a{a}w{w}_r{r}");
                let mut model = Architecture::mlp(&self.widths, a, w, Some(CgsConfig::new(self.block_size, r, self.cgs_seed)));
                model.output_weight_bits = self.output_weight_bits;
                out.push(SweepPoint {
                    config: ExperimentConfig {
                        name: format!("{}/{id}", self.name),
                        model,
                        train: self.train.clone(),
                        data: self.data.clone(),
                        hw: self.hw.clone(),
                    },
                    id,
                    act_bits: a,
                    weight_bits: w,
                    ratio: r,
                });
            }
        }
        out
    }
}
