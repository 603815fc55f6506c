//! The experiment file: one TOML document describing data, backbone,
//! pretraining and probing for a run.

use std::path::{Path, PathBuf};

use fgno_core::model::ModelConfig;
use fgno_core::pretrain::TrainConfig;
use fgno_core::probe::{GridConfig, Pooling};
use fgno_core::signal::{Dataset, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Exactly one of `path` and `synth` is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding a dataset manifest.
    pub path: Option<PathBuf>,
    /// Generated in memory from the run seed when `path` is absent.
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub grid: GridConfig,
    /// Fraction of training labels kept for the head.
    pub label_fraction: f64,
    pub pooling: Pooling,
    /// Fixed cell for the ablation; selected by grid search when unset.
    pub layer: Option<usize>,
    pub s: Option<f64>,
    pub clean_reruns: usize,
    pub noise_seeds: usize,
    pub factors: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            label_fraction: 1.0,
            pooling: Pooling::Mean,
            layer: None,
            s: None,
            clean_reruns: 3,
            noise_seeds: 10,
            factors: vec![1, 2, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    /// Defaults to the desk-scale backbone sized to the data.
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Applies the seed override and fills every derived default so the
    /// written copy replays without consulting the environment.
    pub fn resolve(mut self, seed: Option<u64>) -> CliResult<Self> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => return Err(CliError::Config("data: set either path or synth, not both".into())),
            (None, None) => return Err(CliError::Config("data: one of path or synth is required".into())),
            _ => {}
        }
        if let Some(synth) = &self.data.synth {
            synth
                .validate()
                .map_err(|e| CliError::Config(format!("data.synth: {e}")))?;
        }
        self.train.seed = self.seed;
        self.train.log_path = None;
        self.train.checkpoint_dir = None;
        self.train.checkpoint_every = None;
        if let Some(model) = &mut self.model {
            model.seed = self.seed;
            model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        let p = &self.probe;
        if !(p.label_fraction > 0.0 && p.label_fraction <= 1.0) {
            return Err(CliError::Config(format!(
                "probe.label_fraction {} outside (0, 1]",
                p.label_fraction
            )));
        }
        if p.layer.is_some() != p.s.is_some() {
            return Err(CliError::Config("probe.layer and probe.s must be set together".into()));
        }
        if p.clean_reruns == 0 || p.noise_seeds == 0 {
            return Err(CliError::Config(
                "probe.clean_reruns and probe.noise_seeds must be positive".into(),
            ));
        }
        if p.factors.is_empty() {
            return Err(CliError::Config("probe.factors is empty".into()));
        }
        Ok(self)
    }

    /// The configured backbone, or the desk default sized to `data`.
    pub fn model_for(&self, data: &Dataset) -> CliResult<ModelConfig> {
        let (bins, frames) = data
            .windows
            .first()
            .map(|w| (w.spectrogram.bins(), w.spectrogram.frames()))
            .ok_or_else(|| CliError::Config("dataset has no windows".into()))?;
        let model = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig {
                seed: self.seed,
                ..ModelConfig::desk(bins, frames)
            },
        };
        if model.freq_bins != bins || model.max_frames < frames {
            return Err(CliError::Config(format!(
                "model expects {} bins and at most {} frames; data has {bins} bins and {frames} frames",
                model.freq_bins, model.max_frames
            )));
        }
        Ok(model)
    }

    /// Noise seeds of the ablation, derived from the run seed.
    pub fn noise_seeds(&self) -> Vec<u64> {
        (1..=self.probe.noise_seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }
}
