//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.json    name, mode, num_classes, sampling_rate_hz,
//!                        window_seconds, spectrogram, entries[]
//! <dir>/<entry.file>     raw samples of one window, little-endian f32
//! ```
//!
//! Each entry is `{ "file", "label", "split", "channel_id" }`. `label` is a
//! number: the class index for classification, the target for regression.
//! `split` is one of `train`, `val`, `test`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Label, LabeledWindow, SpectrogramConfig, Split, Task, TimeSeries};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: f64,
    pub split: Split,
    pub channel_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub mode: Mode,
    pub num_classes: Option<usize>,
    pub sampling_rate_hz: f64,
    pub window_seconds: f64,
    pub spectrogram: SpectrogramConfig,
    pub entries: Vec<ManifestEntry>,
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let (mode, num_classes) = match dataset.task {
        Task::Classification { num_classes } => (Mode::Classification, Some(num_classes)),
        Task::Regression => (Mode::Regression, None),
    };
    let mut entries = Vec::with_capacity(dataset.windows.len());
    for (i, w) in dataset.windows.iter().enumerate() {
        let file = format!("w{i:05}.f32");
        let mut bytes = Vec::with_capacity(w.signal.len() * 4);
        for &x in w.signal.samples() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(ManifestEntry {
            file,
            label: w.label.value(),
            split: w.split,
            channel_id: w.signal.channel_id().to_string(),
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        mode,
        num_classes,
        sampling_rate_hz: dataset.sampling_rate_hz,
        window_seconds: dataset.window_seconds,
        spectrogram: dataset.spectrogram,
        entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let task = match (manifest.mode, manifest.num_classes) {
        (Mode::Classification, Some(k)) if k >= 2 => Task::Classification { num_classes: k },
        (Mode::Classification, k) => {
            return Err(Error::Manifest(format!(
                "classification manifest needs num_classes >= 2, got {k:?}"
            )))
        }
        (Mode::Regression, _) => Task::Regression,
    };
    let mut windows = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Manifest(format!("{}: length not a multiple of 4", entry.file)));
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let label = match task {
            Task::Classification { num_classes } => {
                let c = entry.label;
                if c.fract() != 0.0 || c < 0.0 || c as usize >= num_classes {
                    return Err(Error::Manifest(format!(
                        "{}: class label {c} outside [0, {num_classes})",
                        entry.file
                    )));
                }
                Label::Class(c as usize)
            }
            Task::Regression => {
                if !entry.label.is_finite() {
                    return Err(Error::Manifest(format!("{}: target is not finite", entry.file)));
                }
                Label::Value(entry.label)
            }
        };
        let signal = TimeSeries::new(samples, manifest.sampling_rate_hz, entry.channel_id.clone())?;
        let spectrogram = manifest.spectrogram.transform(&signal)?;
        windows.push(LabeledWindow {
            signal,
            spectrogram,
            label,
            split: entry.split,
        });
    }
    Ok(Dataset {
        name: manifest.name,
        task,
        sampling_rate_hz: manifest.sampling_rate_hz,
        window_seconds: manifest.window_seconds,
        spectrogram: manifest.spectrogram,
        windows,
    })
}
