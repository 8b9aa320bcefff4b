//! Run configuration, read from TOML or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, Family, SampleConfig, ScheduleConfig, ToyDatasetSpec};
use crate::error::{Error, Result};
use crate::quantizer::{check_bits, QuantPolicy};
use crate::training::{EvalConfig, PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain: ToyDatasetSpec,
    pub target: ToyDatasetSpec,
    pub prior: Option<ToyDatasetSpec>,
    /// Defaults to the target family with a different seed.
    pub eval: Option<ToyDatasetSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain: ToyDatasetSpec::new(Family::Blobs, 512, 0),
            target: ToyDatasetSpec::new(Family::Rings, 256, 1),
            prior: None,
            eval: None,
        }
    }
}

impl DataConfig {
    pub fn eval_spec(&self) -> ToyDatasetSpec {
        self.eval.clone().unwrap_or_else(|| ToyDatasetSpec {
            seed: self.target.seed.wrapping_add(1000),
            n_samples: 256,
            ..self.target.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeConfig {
    pub bits: u8,
    pub policy: QuantPolicy,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            policy: QuantPolicy::Interior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task_id: String,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub quantize: QuantizeConfig,
    pub finetune: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task_id: "task".into(),
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            quantize: QuantizeConfig::default(),
            finetune: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON for `.json` files and TOML otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        check_bits(self.quantize.bits)?;
        self.finetune.validate()?;
        for spec in [&self.data.pretrain, &self.data.target, &self.data.eval_spec()] {
            spec.validate()?;
            if spec.image_size != self.model.image_size {
                return Err(Error::Config(format!(
                    "dataset image size {} differs from model image size {}",
                    spec.image_size, self.model.image_size
                )));
            }
        }
        if let Some(p) = &self.data.prior {
            p.validate()?;
        }
        if self.model.channels != 1 {
            return Err(Error::Config("toy datasets are single-channel".into()));
        }
        Ok(())
    }
}
