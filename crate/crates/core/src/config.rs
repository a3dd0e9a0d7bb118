//! Run configuration: one nested TOML document per training run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boosting::EnsembleMode;
use crate::data::{generate_synthetic, DatasetManifest, SyntheticSpec, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ScseCombine, Upsampling};
use crate::supervision::EtaMode;
use crate::train::TrainSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `dataset.toml`.
    pub root: PathBuf,
    /// Generated into `root` when no manifest exists yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of boosting stages `T` (deepest learner).
    pub max_depth: usize,
    pub base_filters: usize,
    pub upsampling: Upsampling,
    pub scse: bool,
    pub scse_combine: ScseCombine,
    pub deep_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_depth: 4,
            base_filters: 8,
            upsampling: Upsampling::Transposed,
            scse: true,
            scse_combine: ScseCombine::Max,
            deep_supervision: true,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, image_channels: usize, classes: usize) -> ArchConfig {
        ArchConfig {
            image_channels,
            classes,
            base_filters: self.base_filters,
            max_depth: self.max_depth,
            upsampling: self.upsampling,
            scse: self.scse,
            scse_combine: self.scse_combine,
            deep_supervision: self.deep_supervision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub mode: EnsembleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory receiving checkpoints, logs and the ensemble manifest.
    pub output: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

impl RunConfig {
    /// Default configuration with synthetic data generated under `data_root`.
    pub fn synthetic(data_root: impl Into<PathBuf>, output: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            seed,
            output: output.into(),
            data: DataConfig { root: data_root.into(), synthetic: Some(SyntheticSpec { seed, ..Default::default() }) },
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            ensemble: EnsembleConfig::default(),
        }
    }

    /// Sets the three ablation toggles and the ensemble mode together.
    pub fn with_toggles(mut self, deep_supervision: bool, scse: bool, reweighting: bool, ensemble: EnsembleMode) -> Self {
        self.model.deep_supervision = deep_supervision;
        self.model.scse = scse;
        self.train.reweighting = reweighting;
        self.ensemble.mode = ensemble;
        self
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse { path: self.output.clone(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let m = &self.model;
        let t = &self.train;
        if m.max_depth == 0 || m.max_depth > 8 {
            p.push(format!("model.max_depth must be in 1..=8, got {}", m.max_depth));
        }
        if m.base_filters == 0 {
            p.push("model.base_filters must be positive".into());
        }
        if !m.deep_supervision && t.eta_mode != EtaMode::BoundedSum {
            p.push(format!(
                "train.eta_mode = {:?} has no effect without deep supervision (single head at the final block); leave the default",
                t.eta_mode
            ));
        }
        if t.epochs == 0 {
            p.push("train.epochs must be positive".into());
        }
        if t.epochs_per_stage.len() > m.max_depth {
            p.push(format!("train.epochs_per_stage lists {} stages, max_depth is {}", t.epochs_per_stage.len(), m.max_depth));
        }
        if t.epochs_per_stage.contains(&0) {
            p.push("train.epochs_per_stage entries must be positive".into());
        }
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            p.push("train.batch_size and train.eval_batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            p.push(format!("train.learning_rate must be positive, got {}", t.learning_rate));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            p.push(format!("train.weight_decay must be non-negative, got {}", t.weight_decay));
        }
        if !(t.eta_lr_scale > 0.0 && t.eta_lr_scale.is_finite()) {
            p.push(format!("train.eta_lr_scale must be positive, got {}", t.eta_lr_scale));
        }
        if !(0.0..0.5).contains(&t.shift_margin) {
            p.push(format!("train.shift_margin must be in [0, 0.5), got {}", t.shift_margin));
        }
        if !(t.bn_momentum > 0.0 && t.bn_momentum <= 1.0) {
            p.push(format!("train.bn_momentum must be in (0, 1], got {}", t.bn_momentum));
        }
        if let Some(s) = &self.data.synthetic {
            if let Err(Error::Config(mut e)) = s.validate() {
                p.append(&mut e);
            }
            let div = 1usize << m.max_depth.min(16);
            if s.tile_size % div != 0 {
                p.push(format!("synthetic tile size {} is not divisible by 2^{} = {div}", s.tile_size, m.max_depth));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Loads the dataset manifest, generating synthetic data first when the
    /// manifest is absent and a synthetic spec is configured.
    pub fn prepare_data(&self) -> Result<DatasetManifest> {
        let root = &self.data.root;
        let manifest = if root.join(MANIFEST_FILE).exists() {
            DatasetManifest::load(root)?
        } else if let Some(spec) = &self.data.synthetic {
            generate_synthetic(spec, root)?
        } else {
            return Err(Error::MissingFile {
                path: root.join(MANIFEST_FILE),
                hint: "run `gen-data` or add a [data.synthetic] section".into(),
            });
        };
        let div = 1usize << self.model.max_depth;
        if manifest.tile_size % div != 0 {
            return Err(Error::Config(vec![format!(
                "dataset tile size {} is not divisible by 2^{} = {div}",
                manifest.tile_size, self.model.max_depth
            )]));
        }
        Ok(manifest)
    }
}
