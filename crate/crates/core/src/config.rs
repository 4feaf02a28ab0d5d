//! Experiment configuration: profile presets, TOML files and dotted-key
//! overrides such as `calib.modules.ensemble=false`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{BackboneConfig, CalibConfig, ModuleFlags};
use crate::degrade::MIXTURE_SIGMAS;
use crate::error::{Error, Result};
use crate::imaging::{PreprocessConfig, SplitRule};
use crate::restore::{DenoiserConfig, PatchSampler, PatchTrainOptions};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Class-folder image root. When absent the procedural desk set is
    /// generated under the output directory.
    pub root: Option<PathBuf>,
    /// Images per class of the generated set.
    pub per_class: usize,
    pub image_size: usize,
    pub split: SplitRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTraining {
    pub model: DenoiserConfig,
    pub patches: PatchTrainOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibSection {
    #[serde(flatten)]
    pub net: CalibConfig,
    /// Use the post-restoration halved mixture variance for normalization.
    pub restore_halving: bool,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneConfig,
    pub classifier: TrainConfig,
    pub restorer: ModelTraining,
    pub estimator: ModelTraining,
    pub calib: CalibSection,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Desk => Self::desk(seed),
            Profile::Paper => Self::paper(seed),
        }
    }

    /// Ten procedural classes at 32×32, a three-stage CNN and a 6-layer
    /// restorer; the whole matrix fits in CPU minutes.
    pub fn desk(seed: u64) -> Self {
        let mut preprocess = PreprocessConfig::train(32);
        preprocess.area_range = [0.3, 1.0];
        let mut classifier = TrainConfig::nag(30, seed);
        classifier.lr_init = 0.05;
        classifier.batch_size = 32;
        let patch_train = |epochs| {
            let mut t = TrainConfig::adam(epochs, seed);
            t.lr_init = 1e-3;
            t.batch_size = 8;
            t.warmup_epochs = 1;
            t
        };
        let mut calib_train = TrainConfig::nag(30, seed);
        calib_train.lr_init = 0.01;
        calib_train.batch_size = 32;
        Self {
            profile: Profile::Desk,
            seed,
            sigmas: MIXTURE_SIGMAS.to_vec(),
            data: DataConfig {
                root: None,
                per_class: 100,
                image_size: 32,
                split: SplitRule::default(),
            },
            preprocess,
            backbone: BackboneConfig::desk(crate::desk::CLASSES.len()),
            classifier,
            restorer: ModelTraining {
                model: DenoiserConfig::desk(),
                patches: PatchTrainOptions {
                    sampler: PatchSampler { patch: 16, stride: 16 },
                    sigmas: MIXTURE_SIGMAS.to_vec(),
                    train: patch_train(30),
                },
            },
            estimator: ModelTraining {
                model: DenoiserConfig::estimator(6, 16),
                patches: PatchTrainOptions {
                    sampler: PatchSampler { patch: 16, stride: 16 },
                    sigmas: MIXTURE_SIGMAS.to_vec(),
                    train: patch_train(20),
                },
            },
            calib: CalibSection {
                net: CalibConfig::desk(),
                restore_halving: true,
                train: calib_train,
            },
        }
    }

    /// Full-scale recipe: 224 crops, 120-epoch classifiers, a 17-layer
    /// restorer on 50×50 patches and 50-epoch calibration.
    pub fn paper(seed: u64) -> Self {
        let patch_train = |epochs| PatchTrainOptions {
            sampler: PatchSampler::PAPER,
            sigmas: MIXTURE_SIGMAS.to_vec(),
            train: TrainConfig::adam(epochs, seed),
        };
        Self {
            profile: Profile::Paper,
            seed,
            sigmas: MIXTURE_SIGMAS.to_vec(),
            data: DataConfig {
                root: None,
                per_class: 100,
                image_size: 256,
                split: SplitRule::default(),
            },
            preprocess: PreprocessConfig::train(224),
            backbone: BackboneConfig::resnet50_like(crate::desk::CLASSES.len()),
            classifier: TrainConfig::nag(120, seed),
            restorer: ModelTraining {
                model: DenoiserConfig::dncnn17(),
                patches: patch_train(50),
            },
            estimator: ModelTraining {
                model: DenoiserConfig::estimator(17, 64),
                patches: patch_train(50),
            },
            calib: CalibSection {
                net: CalibConfig::paper(),
                restore_halving: true,
                train: TrainConfig::nag(50, seed),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; values are TOML literals, bare words
    /// are taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("sigmas must be a non-empty list in [0, 1]".into()));
        }
        self.backbone.validate()?;
        for t in [
            &self.classifier,
            &self.restorer.patches.train,
            &self.estimator.patches.train,
            &self.calib.train,
        ] {
            t.validate()?;
        }
        self.restorer.model.validate()?;
        self.estimator.model.validate()?;
        if self.backbone.input_size != self.preprocess.crop_size {
            return Err(Error::Config(format!(
                "backbone input_size {} differs from preprocess crop_size {}",
                self.backbone.input_size, self.preprocess.crop_size
            )));
        }
        Ok(())
    }

    pub fn modules(&self) -> ModuleFlags {
        self.calib.net.modules
    }

    /// Replaces the global seed and every training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for t in [
            &mut self.classifier,
            &mut self.restorer.patches.train,
            &mut self.estimator.patches.train,
            &mut self.calib.train,
        ] {
            t.seed = seed;
        }
        self
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) && !is_optional_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    unreachable!("split always yields at least one part")
}

/// Keys that serialize as absent when unset.
fn is_optional_key(key: &str) -> bool {
    key == "data.root"
}
