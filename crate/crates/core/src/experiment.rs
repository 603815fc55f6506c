//! End-to-end protocols built from the other modules: input normalization,
//! the clean-versus-noisy extraction ablation and the sampling-rate sweep.

use serde::{Deserialize, Serialize};

use crate::diff::Real;
use crate::error::{invalid, Result};
use crate::flow::VarianceSchedule;
use crate::model::FlowTransformer;
use crate::probe::{
    evaluate_features, grid_search, BackboneExtractor, FeatureExtractor, GridConfig, HeadConfig, Metric, Pooling,
    ProbeData,
};
use crate::signal::{
    downsample, normalize_apply, normalize_fit, zero_pad_frequency, Dataset, LabeledWindow, NormStats, Split,
};

/// Applies per-bin statistics to every window of `dataset`.
pub fn apply_stats(dataset: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let windows = dataset
        .windows
        .iter()
        .map(|w| {
            Ok(LabeledWindow {
                spectrogram: normalize_apply(&w.spectrogram, stats)?,
                ..w.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        windows,
        ..dataset.clone()
    })
}

/// Fits statistics on the training split and applies them everywhere.
pub fn normalized(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = normalize_fit(dataset.split(Split::Train).into_iter().map(|w| &w.spectrogram))?;
    Ok((apply_stats(dataset, &stats)?, stats))
}

/// Recomputes every window at `1/factor` of the sampling rate with the
/// window duration held fixed, normalizes the surviving bins with the
/// base-rate statistics and zero-pads the normalized frequency axis back to
/// the base bin count, so padded rows sit at the training mean.
pub fn at_resolution(raw: &Dataset, factor: usize, stats: &NormStats) -> Result<Dataset> {
    let config = raw.spectrogram.scaled_down(factor)?;
    let base_bins = raw.spectrogram.bins();
    let native = stats.truncated(config.bins())?;
    let windows = raw
        .windows
        .iter()
        .map(|w| {
            let signal = downsample(&w.signal, factor)?;
            let sg = normalize_apply(&config.transform(&signal)?, &native)?;
            Ok(LabeledWindow {
                signal,
                spectrogram: zero_pad_frequency(&sg, base_bins)?,
                label: w.label,
                split: w.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        sampling_rate_hz: raw.sampling_rate_hz / factor as f64,
        spectrogram: config,
        windows,
        ..raw.clone()
    })
}

/// Sample mean and standard deviation, shifted by the first element so that
/// identical runs report exactly zero spread.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs[0] + xs.iter().map(|x| x - xs[0]).sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub layer: usize,
    pub s: f64,
    pub metric: Metric,
    /// Test metric of each clean rerun.
    pub clean: Vec<f64>,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub noise_seeds: Vec<u64>,
    /// Test metric with noisy extraction, one entry per noise seed.
    pub noisy: Vec<f64>,
    pub noisy_mean: f64,
    pub noisy_std: f64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("input,seed,metric\n");
        for (i, v) in self.clean.iter().enumerate() {
            out.push_str(&format!("clean,{i},{v:?}\n"));
        }
        for (seed, v) in self.noise_seeds.iter().zip(&self.noisy) {
            out.push_str(&format!("noisy,{seed},{v:?}\n"));
        }
        out
    }
}

fn cell_metric(
    extractor: &dyn FeatureExtractor,
    data: &ProbeData,
    layer: usize,
    s: f64,
    metric: Metric,
    head: &HeadConfig,
) -> Result<f64> {
    let train = extractor.pooled(&data.train.inputs, &[layer], s)?;
    let test = extractor.pooled(&data.test.inputs, &[layer], s)?;
    let scores = evaluate_features(
        data.task,
        (&train[0], &data.train.labels),
        (&test[0], &data.test.labels),
        head,
    )?;
    metric.of(&scores)
}

/// Test metric at one cell with clean extraction (`clean_reruns` times)
/// and with noisy extraction (once per noise seed). The head is refit on
/// the matching train features each time.
#[allow(clippy::too_many_arguments)]
pub fn clean_vs_noisy<T: Real>(
    model: &FlowTransformer<T>,
    data: &ProbeData,
    layer: usize,
    s: f64,
    schedule: VarianceSchedule,
    metric: Metric,
    head: &HeadConfig,
    clean_reruns: usize,
    noise_seeds: &[u64],
) -> Result<AblationReport> {
    if clean_reruns == 0 || noise_seeds.is_empty() {
        return Err(invalid("ablation needs at least one clean rerun and one noise seed"));
    }
    data.validate()?;
    let clean = (0..clean_reruns)
        .map(|_| cell_metric(&BackboneExtractor::clean(model), data, layer, s, metric, head))
        .collect::<Result<Vec<_>>>()?;
    let noisy = noise_seeds
        .iter()
        .map(|&seed| {
            let ex = BackboneExtractor::noisy(model, schedule, seed);
            cell_metric(&ex, data, layer, s, metric, head)
        })
        .collect::<Result<Vec<_>>>()?;
    let (clean_mean, clean_std) = mean_std(&clean);
    let (noisy_mean, noisy_std) = mean_std(&noisy);
    Ok(AblationReport {
        layer,
        s,
        metric,
        clean,
        clean_mean,
        clean_std,
        noise_seeds: noise_seeds.to_vec(),
        noisy,
        noisy_mean,
        noisy_std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub factor: usize,
    pub sampling_rate_hz: f64,
    /// Bins before zero-padding.
    pub native_bins: usize,
    pub selected_layer: Option<usize>,
    pub selected_time: Option<f64>,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
    /// Why the factor was skipped, if it was.
    pub note: Option<String>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("factor,sampling_rate_hz,native_bins,layer,s,val_metric,test_metric,note\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{},{},{},{},{},{}\n",
            r.factor,
            r.sampling_rate_hz,
            r.native_bins,
            r.selected_layer.map(|l| l.to_string()).unwrap_or_default(),
            opt(r.selected_time),
            opt(r.val_metric),
            opt(r.test_metric),
            r.note.as_deref().unwrap_or("")
        ));
    }
    out
}

/// Probes a base-rate backbone on data recomputed at each downsampling
/// factor. `raw` holds unnormalized base-rate windows and `stats` the
/// base-rate training statistics. Factors whose window geometry is invalid
/// produce a row with a note instead of metrics.
pub fn resolution_sweep<T: Real>(
    model: &FlowTransformer<T>,
    raw: &Dataset,
    stats: &NormStats,
    factors: &[usize],
    grid: &GridConfig,
    pooling: Pooling,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(factors.len());
    for &factor in factors {
        let native_bins = raw.spectrogram.nperseg / factor.max(1) / 2 + 1;
        let mut row = SweepRow {
            factor,
            sampling_rate_hz: raw.sampling_rate_hz / factor.max(1) as f64,
            native_bins,
            selected_layer: None,
            selected_time: None,
            val_metric: None,
            test_metric: None,
            note: None,
        };
        let dataset = match at_resolution(raw, factor, stats) {
            Ok(d) => d,
            Err(e) => {
                row.note = Some(format!("skipped: {e}"));
                rows.push(row);
                continue;
            }
        };
        row.native_bins = dataset.spectrogram.bins();
        let data = ProbeData::from_dataset(&dataset);
        let extractor = BackboneExtractor {
            pooling,
            ..BackboneExtractor::clean(model)
        };
        let result = grid_search(&extractor, &data, grid)?;
        row.selected_layer = Some(result.selected_layer);
        row.selected_time = Some(result.selected_time);
        row.val_metric = Some(result.best_val());
        row.test_metric = Some(result.test_metric()?);
        rows.push(row);
    }
    Ok(rows)
}
