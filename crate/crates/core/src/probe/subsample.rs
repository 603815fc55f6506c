use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::error::{invalid, Result};
use crate::signal::Task;

/// What a label subsample kept, per class for classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleReport {
    pub fraction: f64,
    pub original_rows: usize,
    pub kept_rows: usize,
    /// `(class, available, kept)`; empty for regression.
    pub per_class: Vec<(usize, usize, usize)>,
    /// Classes whose proportional share rounded below one row and were
    /// kept at one row instead.
    pub floored_classes: Vec<usize>,
}

/// Largest-remainder apportionment of `total` over `sizes`, with every
/// non-empty group guaranteed one slot.
fn apportion(sizes: &[usize], total: usize) -> (Vec<usize>, Vec<usize>) {
    let n: usize = sizes.iter().sum();
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(out.iter().sum());
    for &k in &order {
        if left == 0 {
            break;
        }
        if out[k] < sizes[k] {
            out[k] += 1;
            left -= 1;
        }
    }
    let mut floored = Vec::new();
    for (k, slot) in out.iter_mut().enumerate() {
        if sizes[k] > 0 && *slot == 0 {
            *slot = 1;
            floored.push(k);
        }
    }
    (out, floored)
}

/// Keeps `round(fraction * n)` rows: stratified by class for
/// classification, uniform for regression. Deterministic per seed; row
/// order within the result follows the original order.
pub fn subsample_labels(
    set: &LabeledSet,
    task: Task,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledSet, SubsampleReport)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("label fraction {fraction} outside (0, 1]")));
    }
    let n = set.len();
    if n == 0 {
        return Err(invalid("cannot subsample an empty set"));
    }
    let total = ((fraction * n as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::new();
    let mut per_class = Vec::new();
    let mut floored_classes = Vec::new();
    match task {
        Task::Classification { num_classes } => {
            let mut groups = vec![Vec::new(); num_classes];
            for (i, l) in set.labels.iter().enumerate() {
                let c = l
                    .class()
                    .ok_or_else(|| invalid("regression label in a classification set"))?;
                groups
                    .get_mut(c)
                    .ok_or_else(|| invalid(format!("class {c} outside 0..{num_classes}")))?
                    .push(i);
            }
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            let (counts, floored) = apportion(&sizes, total);
            floored_classes = floored;
            for (c, (mut g, k)) in groups.into_iter().zip(counts).enumerate() {
                per_class.push((c, g.len(), k));
                g.shuffle(&mut rng);
                keep.extend_from_slice(&g[..k]);
            }
        }
        Task::Regression => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            keep.extend_from_slice(&all[..total.max(2).min(n)]);
        }
    }
    keep.sort_unstable();
    let subset = LabeledSet {
        inputs: keep.iter().map(|&i| set.inputs[i].clone()).collect(),
        labels: keep.iter().map(|&i| set.labels[i]).collect(),
    };
    let report = SubsampleReport {
        fraction,
        original_rows: n,
        kept_rows: subset.len(),
        per_class,
        floored_classes,
    };
    Ok((subset, report))
}
