use super::*;
use crate::error::Error;

/// Feature 0 of every window carries its label in `value(0, 0)`. Cells
/// listed in `informative` expose it; every other cell returns constants.
struct Stub {
    layers: usize,
    informative: Vec<(usize, f64)>,
    fail_at: Option<(usize, f64)>,
}

impl FeatureExtractor for Stub {
    fn num_layers(&self) -> usize {
        self.layers
    }

    fn pooled(&self, inputs: &[Spectrogram], layers: &[usize], s: f64) -> Result<Vec<Vec<Vec<f64>>>> {
        if let Some((fl, fs)) = self.fail_at {
            if fs == s && layers.contains(&fl) {
                return Err(invalid("stub failure"));
            }
        }
        Ok(layers
            .iter()
            .map(|&l| {
                inputs
                    .iter()
                    .map(|x| {
                        if self.informative.contains(&(l, s)) {
                            vec![x.get(0, 0), 1.0]
                        } else {
                            vec![0.0, 1.0]
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

fn set(n: usize, offset: usize) -> LabeledSet {
    let labels: Vec<Label> = (0..n).map(|i| Label::Class((i + offset) % 2)).collect();
    let inputs = labels
        .iter()
        .map(|l| Spectrogram::new(1, 1, vec![l.value()], 1.0, 1.0, 1.0).unwrap())
        .collect();
    LabeledSet { inputs, labels }
}

fn data() -> ProbeData {
    ProbeData {
        task: Task::Classification { num_classes: 2 },
        train: set(20, 0),
        val: set(10, 1),
        test: set(10, 0),
    }
}

fn auroc_grid() -> GridConfig {
    GridConfig {
        times: vec![0.0, 0.5, 1.0],
        metric: Metric::Auroc,
        ..Default::default()
    }
}

#[test]
fn stub_matrix_is_recovered_with_its_unique_optimum() {
    let stub = Stub {
        layers: 3,
        informative: vec![(2, 0.5)],
        fail_at: None,
    };
    let r = grid_search(&stub, &data(), &auroc_grid()).unwrap();
    assert_eq!((r.selected_layer, r.selected_time), (2, 0.5));
    let mut want = vec![vec![0.5; 3]; 3];
    want[1][1] = 1.0;
    assert_eq!(r.val_metric, want);
    assert_eq!(r.test.auroc, Some(1.0));
    assert_eq!(r.best_val(), 1.0);
    assert_eq!(r.train_rows, 20);
}

#[test]
fn ties_go_to_the_smallest_layer_then_time() {
    let stub = Stub {
        layers: 3,
        informative: vec![(3, 0.0), (2, 1.0), (2, 0.5)],
        fail_at: None,
    };
    let r = grid_search(&stub, &data(), &auroc_grid()).unwrap();
    assert_eq!((r.selected_layer, r.selected_time), (2, 0.5));
    let loss = grid_search(
        &stub,
        &data(),
        &GridConfig {
            metric: Metric::Loss,
            ..auroc_grid()
        },
    )
    .unwrap();
    assert_eq!((loss.selected_layer, loss.selected_time), (2, 0.5));
}

#[test]
fn single_cell_grid() {
    let stub = Stub {
        layers: 2,
        informative: vec![],
        fail_at: None,
    };
    let cfg = GridConfig {
        layers: Some(vec![2]),
        times: vec![0.25],
        ..auroc_grid()
    };
    let r = grid_search(&stub, &data(), &cfg).unwrap();
    assert_eq!((r.layers.clone(), r.times.clone()), (vec![2], vec![0.25]));
    assert_eq!((r.selected_layer, r.selected_time), (2, 0.25));
}

#[test]
fn cell_errors_carry_coordinates() {
    let stub = Stub {
        layers: 2,
        informative: vec![],
        fail_at: Some((1, 0.5)),
    };
    match grid_search(&stub, &data(), &auroc_grid()) {
        Err(Error::Cell { s, .. }) => assert_eq!(s, 0.5),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn csv_has_one_row_per_layer() {
    let stub = Stub {
        layers: 2,
        informative: vec![(1, 1.0)],
        fail_at: None,
    };
    let r = grid_search(&stub, &data(), &auroc_grid()).unwrap();
    let csv = r.to_csv();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "layer,0.0,0.5,1.0");
    assert_eq!(rows[1], "1,0.5,0.5,1.0");
    assert_eq!(rows.len(), 3);
    let json = serde_json::to_string(&r).unwrap();
    let back: GridSearchResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn label_fraction_keeps_the_split_stratified() {
    let full = set(100, 0);
    let task = Task::Classification { num_classes: 2 };
    let (same, _) = subsample_labels(&full, task, 1.0, 3).unwrap();
    assert_eq!(same, full);
    let (small, report) = subsample_labels(&full, task, 0.05, 3).unwrap();
    assert_eq!(small.len(), 5);
    assert_eq!(report.kept_rows, 5);
    for c in 0..2 {
        assert!(small.labels.iter().any(|l| l.class() == Some(c)));
    }
    assert_eq!(subsample_labels(&full, task, 0.05, 3).unwrap().0, small);
    assert_ne!(subsample_labels(&full, task, 0.05, 4).unwrap().0, small);
    assert!(subsample_labels(&full, task, 0.0, 3).is_err());
}

#[test]
fn tiny_fractions_keep_one_row_per_class() {
    let task = Task::Classification { num_classes: 3 };
    let labels: Vec<Label> = (0..50).map(|i| Label::Class(if i < 48 { 0 } else { i - 47 })).collect();
    let inputs = labels
        .iter()
        .map(|_| Spectrogram::new(1, 1, vec![0.0], 1.0, 1.0, 1.0).unwrap())
        .collect();
    let (small, report) = subsample_labels(&LabeledSet { inputs, labels }, task, 0.1, 0).unwrap();
    assert_eq!(report.floored_classes, vec![1, 2]);
    assert_eq!(small.len(), 7);
}

#[test]
fn regression_subsample_is_uniform_size() {
    let labels: Vec<Label> = (0..40).map(|i| Label::Value(i as f64)).collect();
    let inputs = labels
        .iter()
        .map(|_| Spectrogram::new(1, 1, vec![0.0], 1.0, 1.0, 1.0).unwrap())
        .collect();
    let (small, _) = subsample_labels(&LabeledSet { inputs, labels }, Task::Regression, 0.25, 1).unwrap();
    assert_eq!(small.len(), 10);
}
