use super::{Spectrogram, TimeSeries};
use crate::error::{invalid, Result};

/// Consecutive non-overlapping windows of `window_seconds`; a trailing
/// partial window is dropped.
pub fn segment_windows(x: &TimeSeries, window_seconds: f64) -> Result<Vec<TimeSeries>> {
    let len = (window_seconds * x.sampling_rate()).round() as usize;
    if !(window_seconds > 0.0) || len < 1 {
        return Err(invalid(format!(
            "window of {window_seconds} s at {} Hz holds no samples",
            x.sampling_rate()
        )));
    }
    x.samples()
        .chunks_exact(len)
        .map(|c| TimeSeries::new(c.to_vec(), x.sampling_rate(), x.channel_id()))
        .collect()
}

/// Block-mean decimation: each output sample averages `factor` consecutive
/// inputs. Any remainder shorter than `factor` is dropped.
pub fn downsample(x: &TimeSeries, factor: usize) -> Result<TimeSeries> {
    if factor == 0 {
        return Err(invalid("downsampling factor must be >= 1"));
    }
    if x.len() < factor {
        return Err(invalid(format!("cannot decimate {} samples by {factor}", x.len())));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let samples = x
        .samples()
        .chunks_exact(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect();
    TimeSeries::new(samples, x.sampling_rate() / factor as f64, x.channel_id())
}

/// Appends zero rows up to `target_bins`.
pub fn zero_pad_frequency(sg: &Spectrogram, target_bins: usize) -> Result<Spectrogram> {
    if target_bins < sg.bins() {
        return Err(invalid(format!("cannot pad {} bins down to {target_bins}", sg.bins())));
    }
    let mut values = sg.values().to_vec();
    values.resize(target_bins * sg.frames(), 0.0);
    sg.with_values(target_bins, sg.frames(), values)
}

/// Keeps the first `bins` rows.
pub fn crop_frequency(sg: &Spectrogram, bins: usize) -> Result<Spectrogram> {
    if bins == 0 || bins > sg.bins() {
        return Err(invalid(format!("cannot crop {} bins to {bins}", sg.bins())));
    }
    sg.with_values(bins, sg.frames(), sg.values()[..bins * sg.frames()].to_vec())
}
