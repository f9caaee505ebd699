//! Run configuration (TOML).
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//!
//! [encoder]
//! stage_channels = [8, 16, 32, 64, 64]
//! convs_per_stage = 2
//! dilation_rates = [1, 2, 4]
//! head_channels = 8
//!
//! [pigm]
//! mode = "sc_cc"        # off | sc | cc | sc_cc
//!
//! [uafm]
//! case = 4              # 1..4, or 0 for the plain baseline
//!
//! [ura]
//! formula = "prose"     # prose | floor
//!
//! [optim]
//! lr = 0.003
//! weight_decay = 0.0001
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! steps = 300
//! batch_size = 8
//!
//! [data]
//! dir = "data"
//! train_scenes = 64
//! val_scenes = 32
//! scene = { extent = 64, building_count = [2, 5], size = [8.0, 20.0] }
//! ```
//!
//! Every section and key is optional; omitted values take the defaults shown.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::model::{EncoderConfig, FusionCase, NetConfig, PigmMode, UraFormula};
use crate::seed;
use crate::synth::SceneSpec;
use crate::train::OptimConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PigmSection {
    pub mode: PigmMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UafmSection {
    /// 0 disables the cascade (baseline), 1..4 select the fusion case.
    pub case: u8,
}

impl Default for UafmSection {
    fn default() -> Self {
        UafmSection {
            case: FusionCase::default().number(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UraSection {
    pub formula: UraFormula,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_scenes: 64,
            val_scenes: 32,
            scene: SceneSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn train_manifest(&self) -> PathBuf {
        self.dir.join("train.txt")
    }

    pub fn val_manifest(&self) -> PathBuf {
        self.dir.join("val.txt")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub encoder: EncoderConfig,
    pub pigm: PigmSection,
    pub uafm: UafmSection,
    pub ura: UraSection,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            encoder: EncoderConfig::default(),
            pigm: PigmSection::default(),
            uafm: UafmSection::default(),
            ura: UraSection::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TensorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TensorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            TensorError::Config(msg) => TensorError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn fusion_case(&self) -> Result<Option<FusionCase>> {
        match self.uafm.case {
            0 => Ok(None),
            n => FusionCase::try_from(n).map(Some),
        }
    }

    pub fn net(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            encoder: self.encoder.clone(),
            pigm: self.pigm.mode,
            uafm: self.fusion_case()?,
            ura: self.ura.formula,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net()?;
        self.optim.validate()?;
        self.data
            .scene
            .validate()
            .map_err(|e| TensorError::Config(format!("data.scene: {e}")))?;
        Ok(())
    }

    /// Named sub-seed of the run seed ("data", "init", "augment", ...).
    pub fn sub_seed(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }
}
