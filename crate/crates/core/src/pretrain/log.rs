use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::signal::Split;

pub const CSV_HEADER: &str = "step,epoch,split,loss";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Seconds since the trainer started. Not part of the CSV, which stays
    /// reproducible across runs.
    pub elapsed_seconds: f64,
}

impl TrainRecord {
    fn csv_line(&self) -> String {
        format!("{},{},{},{:?}", self.step, self.epoch, self.split.name(), self.loss)
    }
}

/// Training and validation losses in the order they were produced.
/// Train records carry strictly increasing step numbers; every loss is
/// finite.
#[derive(Debug, Default)]
pub struct TrainLog {
    records: Vec<TrainRecord>,
    sink: Option<File>,
}

impl TrainLog {
    /// A log that also appends each record to `path` as it arrives.
    pub fn with_sink(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{CSV_HEADER}")?;
        }
        Ok(Self {
            records: Vec::new(),
            sink: Some(file),
        })
    }

    pub fn push(&mut self, record: TrainRecord) -> Result<()> {
        if !record.loss.is_finite() {
            return Err(invalid(format!("non-finite loss at step {}", record.step)));
        }
        if record.split == Split::Train {
            if let Some(last) = self.train().last() {
                if record.step <= last.step {
                    return Err(invalid(format!(
                        "step {} does not follow step {}",
                        record.step, last.step
                    )));
                }
            }
        }
        if let Some(file) = &mut self.sink {
            writeln!(file, "{}", record.csv_line())?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train(&self) -> impl DoubleEndedIterator<Item = &TrainRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn val(&self) -> impl DoubleEndedIterator<Item = &TrainRecord> {
        self.records.iter().filter(|r| r.split == Split::Val)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.train().map(|r| r.loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.val().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.records {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    /// Parses a CSV written by this type. Elapsed times are not stored and
    /// come back as zero.
    pub fn read_csv(path: &Path) -> Result<Vec<TrainRecord>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("{}:{}: malformed row", path.display(), i + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            out.push(TrainRecord {
                step: cols[0].parse().map_err(|_| bad())?,
                epoch: cols[1].parse().map_err(|_| bad())?,
                split: cols[2].parse().map_err(|_| bad())?,
                loss: cols[3].parse().map_err(|_| bad())?,
                elapsed_seconds: 0.0,
            });
        }
        Ok(out)
    }
}

/// Trailing-window mean of `xs`.
pub fn smoothed(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
