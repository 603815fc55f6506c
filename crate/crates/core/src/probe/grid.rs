use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::head::{HeadConfig, ProbeHead, Scores};
use super::{FeatureExtractor, ProbeData};
use crate::error::{invalid, Error, Result};
use crate::signal::{Label, Task};

/// Quantity the grid search optimizes on the validation split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Cross-entropy or mean squared error, minimized.
    #[default]
    Loss,
    Auroc,
    Accuracy,
    MacroF1,
    Rmse,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Auroc | Metric::Accuracy | Metric::MacroF1)
    }

    pub fn of(self, s: &Scores) -> Result<f64> {
        let v = match self {
            Metric::Loss => Some(s.loss),
            Metric::Auroc => s.auroc,
            Metric::Accuracy => s.accuracy,
            Metric::MacroF1 => s.macro_f1,
            Metric::Rmse => s.rmse,
        };
        v.ok_or_else(|| invalid(format!("metric {self} is undefined for these scores")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Auroc => "auroc",
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::Rmse => "rmse",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Metric::Loss,
            Metric::Auroc,
            Metric::Accuracy,
            Metric::MacroF1,
            Metric::Rmse,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| invalid(format!("unknown metric {s:?}")))
    }
}

/// `k / 9` for `k = 0..=9`.
pub fn default_times() -> Vec<f64> {
    (0..=9).map(|k| k as f64 / 9.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// 1-based layers; `None` means every layer of the backbone.
    pub layers: Option<Vec<usize>>,
    pub times: Vec<f64>,
    pub metric: Metric,
    pub head: HeadConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            layers: None,
            times: default_times(),
            metric: Metric::Loss,
            head: HeadConfig::default(),
        }
    }
}

impl GridConfig {
    /// Sorted, deduplicated axes so that index order is numeric order.
    pub fn resolve(&self, num_layers: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut layers = self.layers.clone().unwrap_or_else(|| (1..=num_layers).collect());
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(invalid("empty layer set"));
        }
        if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > num_layers) {
            return Err(invalid(format!("layer {l} outside 1..={num_layers}")));
        }
        let mut times = self.times.clone();
        if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("flow times must lie in [0, 1]"));
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        if times.is_empty() {
            return Err(invalid("empty flow-time set"));
        }
        Ok((layers, times))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub layers: Vec<usize>,
    pub times: Vec<f64>,
    pub metric: Metric,
    pub higher_is_better: bool,
    /// Selection metric on validation, `[layer][time]`.
    pub val_metric: Vec<Vec<f64>>,
    pub val_scores: Vec<Vec<Scores>>,
    pub selected_layer: usize,
    pub selected_time: f64,
    /// Test scores of the selected cell only.
    pub test: Scores,
    pub train_rows: usize,
}

impl GridSearchResult {
    pub fn best_val(&self) -> f64 {
        let (i, j) = self.selected_index();
        self.val_metric[i][j]
    }

    pub fn selected_index(&self) -> (usize, usize) {
        let i = self
            .layers
            .iter()
            .position(|&l| l == self.selected_layer)
            .expect("selected layer is on the grid");
        let j = self
            .times
            .iter()
            .position(|&t| t == self.selected_time)
            .expect("selected time is on the grid");
        (i, j)
    }

    pub fn test_metric(&self) -> Result<f64> {
        self.metric.of(&self.test)
    }

    /// Validation matrix: header row of flow times, then one row per layer.
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.layers, &self.times, &self.val_metric)
    }
}

pub fn matrix_csv(layers: &[usize], times: &[f64], values: &[Vec<f64>]) -> String {
    let mut out = String::from("layer");
    for t in times {
        out.push_str(&format!(",{t:?}"));
    }
    out.push('\n');
    for (l, row) in layers.iter().zip(values) {
        out.push_str(&l.to_string());
        for v in row {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

/// Index of the best entry; ties go to the smallest row, then the smallest
/// column. NaN never wins.
pub fn select_optimum(matrix: &[Vec<f64>], higher_is_better: bool) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, _, b)) => {
                    if higher_is_better {
                        v > b
                    } else {
                        v < b
                    }
                }
            };
            if better {
                best = Some((i, j, v));
            }
        }
    }
    best.map(|(i, j, _)| (i, j))
        .ok_or_else(|| invalid("no finite entry to select"))
}

/// Fits the head on train features and scores it on the evaluation rows.
pub fn evaluate_features(
    task: Task,
    train: (&[Vec<f64>], &[Label]),
    eval: (&[Vec<f64>], &[Label]),
    head: &HeadConfig,
) -> Result<Scores> {
    ProbeHead::fit(train.0, train.1, task, head)?.score(eval.0, eval.1)
}

/// Exhaustive search over `(layer, flow time)`. Selection reads validation
/// scores only; test windows are passed through the backbone once, after
/// the cell is fixed.
pub fn grid_search(
    extractor: &dyn FeatureExtractor,
    data: &ProbeData,
    config: &GridConfig,
) -> Result<GridSearchResult> {
    let (layers, times) = config.resolve(extractor.num_layers())?;
    data.validate()?;
    let mut val_metric = vec![vec![f64::NAN; times.len()]; layers.len()];
    let mut val_scores = vec![vec![Scores::default(); times.len()]; layers.len()];
    for (j, &s) in times.iter().enumerate() {
        let cell_err = |layer, e| Error::Cell {
            layer,
            s,
            source: Box::new(e),
        };
        let train = extractor
            .pooled(&data.train.inputs, &layers, s)
            .map_err(|e| cell_err(layers[0], e))?;
        let val = extractor
            .pooled(&data.val.inputs, &layers, s)
            .map_err(|e| cell_err(layers[0], e))?;
        for (i, &l) in layers.iter().enumerate() {
            let scores = evaluate_features(
                data.task,
                (&train[i], &data.train.labels),
                (&val[i], &data.val.labels),
                &config.head,
            )
            .map_err(|e| cell_err(l, e))?;
            val_metric[i][j] = config.metric.of(&scores).map_err(|e| cell_err(l, e))?;
            val_scores[i][j] = scores;
        }
    }
    let (bi, bj) = select_optimum(&val_metric, config.metric.higher_is_better())?;
    let (layer, s) = (layers[bi], times[bj]);
    let cell_err = |e| Error::Cell {
        layer,
        s,
        source: Box::new(e),
    };
    let train = extractor.pooled(&data.train.inputs, &[layer], s).map_err(cell_err)?;
    let test = extractor.pooled(&data.test.inputs, &[layer], s).map_err(cell_err)?;
    let test = evaluate_features(
        data.task,
        (&train[0], &data.train.labels),
        (&test[0], &data.test.labels),
        &config.head,
    )
    .map_err(cell_err)?;
    Ok(GridSearchResult {
        layers,
        times,
        metric: config.metric,
        higher_is_better: config.metric.higher_is_better(),
        val_metric,
        val_scores,
        selected_layer: layer,
        selected_time: s,
        test,
        train_rows: data.train.len(),
    })
}
