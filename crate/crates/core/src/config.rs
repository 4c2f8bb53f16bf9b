//! Run configuration: one TOML document covering the task, model, adapter,
//! quantizer, trainer, and sweep. Unknown keys are rejected, missing keys
//! fall back to defaults, and the fully resolved document is echoed back and
//! hashed for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::eval::TaskSpec;
use crate::model::Head;
use crate::train::TrainConfig;

/// Quantizer geometry for the frozen bases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub block_size: usize,
    pub superblock_size: usize,
    pub double_quant: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            block_size: 64,
            superblock_size: 256,
            double_quant: true,
        }
    }
}

impl QuantConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.block_size == 0 {
            problems.push("quant.block_size must be >= 1".to_string());
        }
        if self.superblock_size == 0 {
            problems.push("quant.superblock_size must be >= 1".to_string());
        }
        problems
    }

    /// `Some(superblock)` when double quantization is on.
    pub fn superblock(&self) -> Option<usize> {
        self.double_quant.then_some(self.superblock_size)
    }
}

/// Model topology: hidden widths between the task's input and output dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub head: Option<Head>,
}

/// Evaluation sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Empty means the default list [1, 2, 4, 8, 16, 32, 64] clipped to r_max.
    pub ranks: Vec<usize>,
}

/// The whole run in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub quant: QuantConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid {
            problems: vec![e.to_string()],
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Collects every validation problem across all sections.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        problems.extend(self.task.problems());
        problems.extend(self.quant.problems());
        problems.extend(self.train.problems());
        if let Err(Error::ConfigInvalid { problems: p }) = self.adapter.validate() {
            problems.extend(p);
        }
        for (i, &h) in self.model.hidden.iter().enumerate() {
            if h == 0 {
                problems.push(format!("model.hidden[{i}] must be >= 1"));
            }
        }
        for &r in &self.sweep.ranks {
            if r < self.adapter.r_min || r > self.adapter.r_max {
                problems.push(format!(
                    "sweep rank {r} outside adapter range [{}, {}]",
                    self.adapter.r_min, self.adapter.r_max
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid { problems })
        }
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved config; stamped into reports and
    /// checkpoint headers.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// The sweep list, defaulted and clipped to the adapter range.
    pub fn resolved_ranks(&self) -> Vec<usize> {
        if self.sweep.ranks.is_empty() {
            crate::eval::default_rank_list(self.adapter.r_max)
        } else {
            self.sweep.ranks.clone()
        }
    }

    pub fn head(&self) -> Head {
        self.model.head.unwrap_or(Head::Identity)
    }

    /// Layer dimension chain: task input, hidden widths, task output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.model.hidden.len() + 2);
        dims.push(self.task.d);
        dims.extend(&self.model.hidden);
        dims.push(self.task.m);
        dims
    }
}
