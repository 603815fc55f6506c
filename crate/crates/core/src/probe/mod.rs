//! Frozen-backbone probing: pooled features, linear heads, metrics and the
//! `(layer, flow time)` grid search.

mod extract;
mod grid;
mod head;
pub mod metrics;
mod subsample;

use crate::error::{invalid, Result};
use crate::signal::{Dataset, Label, Spectrogram, Split, Task};

pub use extract::{concat_channels, pool_features, BackboneExtractor, FeatureExtractor, NoiseSpec, Pooling};
pub use grid::{
    default_times, evaluate_features, grid_search, matrix_csv, select_optimum, GridConfig, GridSearchResult, Metric,
};
pub use head::{HeadConfig, ProbeHead, Scores, Standardizer};
pub use subsample::{subsample_labels, SubsampleReport};

/// Spectrograms with their labels, row-aligned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub inputs: Vec<Spectrogram>,
    pub labels: Vec<Label>,
}

impl LabeledSet {
    pub fn from_split(dataset: &Dataset, split: Split) -> Self {
        let windows = dataset.split(split);
        Self {
            inputs: windows.iter().map(|w| w.spectrogram.clone()).collect(),
            labels: windows.iter().map(|w| w.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Train, validation and test rows for one downstream task.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub task: Task,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

impl ProbeData {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self {
            task: dataset.task,
            train: LabeledSet::from_split(dataset, Split::Train),
            val: LabeledSet::from_split(dataset, Split::Val),
            test: LabeledSet::from_split(dataset, Split::Test),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if set.is_empty() {
                return Err(invalid(format!("{name} split is empty")));
            }
            if set.inputs.len() != set.labels.len() {
                return Err(invalid(format!("{name} split has mismatched inputs and labels")));
            }
        }
        Ok(())
    }

    /// Same validation and test rows with a label-subsampled training split.
    pub fn with_label_fraction(&self, fraction: f64, seed: u64) -> Result<(Self, SubsampleReport)> {
        let (train, report) = subsample_labels(&self.train, self.task, fraction, seed)?;
        Ok((Self { train, ..self.clone() }, report))
    }
}

#[cfg(test)]
mod tests;
