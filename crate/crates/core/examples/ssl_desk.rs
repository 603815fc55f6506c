//! Desk-scale end-to-end run: pretrain flow and masked backbones on the
//! synthetic two-class task, grid-probe both, and sweep sampling rates.
//! Knobs are read from environment variables so settings can be explored
//! without recompiling.

use std::env;
use std::time::Instant;

use fgno_core::experiment::{normalized, resolution_sweep};
use fgno_core::model::{FlowTransformer, ModelConfig};
use fgno_core::pretrain::{train_flow, train_mae, TrainConfig};
use fgno_core::probe::{grid_search, BackboneExtractor, GridConfig, Metric, Pooling, ProbeData};
use fgno_core::signal::{synth_dataset, Split, SynthConfig};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> fgno_core::Result<()> {
    let synth = SynthConfig {
        num_windows: knob("WINDOWS", 2500),
        noise_std: knob("NOISE", 1.0),
        burst_fraction: knob("BURST", 1.0),
        distractor_amplitude: knob("DISTRACT", 0.0),
        amplitude_low: knob("AMP_LO", 0.8),
        band_low_hz: knob("BAND_LO", 1.5),
        band_high_hz: knob("BAND_HI", 6.5),
        amplitude_high: knob("AMP_HI", 1.2),
        ..Default::default()
    };
    let seed = knob("SEED", 0u64);
    let raw = synth_dataset(&synth, seed)?;
    let (data, stats) = normalized(&raw)?;
    let train = data.unlabeled(Split::Train);
    let val = data.unlabeled(Split::Val);
    let train_cfg = TrainConfig {
        epochs: knob("EPOCHS", 5),
        learning_rate: knob("LR", 1e-3),
        seed,
        ..Default::default()
    };
    let model_cfg = ModelConfig {
        seed,
        ..ModelConfig::desk(33, 17)
    };
    let times: usize = knob("TIMES", 10);
    let grid = GridConfig {
        metric: Metric::Auroc,
        times: (0..times).map(|k| k as f64 / (times.max(2) - 1) as f64).collect(),
        head: fgno_core::probe::HeadConfig {
            lambda: knob("LAMBDA", 1e-4),
            ..Default::default()
        },
        ..Default::default()
    };
    let pooling = if knob("POOL", 0) == 1 {
        Pooling::Max
    } else {
        Pooling::Mean
    };
    let ex = |m| BackboneExtractor {
        pooling,
        ..BackboneExtractor::clean(m)
    };
    let probe = ProbeData::from_dataset(&data);

    if knob("RAW", 0) == 1 {
        let feats = |set: &fgno_core::probe::LabeledSet, max: bool| -> Vec<Vec<f64>> {
            set.inputs
                .iter()
                .map(|sg| {
                    (0..sg.bins())
                        .map(|b| {
                            let row = sg.row(b);
                            if max {
                                row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                row.iter().sum::<f64>() / row.len() as f64
                            }
                        })
                        .collect()
                })
                .collect()
        };
        for max in [false, true] {
            let s = fgno_core::probe::evaluate_features(
                probe.task,
                (&feats(&probe.train, max), &probe.train.labels),
                (&feats(&probe.val, max), &probe.val.labels),
                &grid.head,
            )?;
            println!(
                "raw {} pooled: val auroc {:.4}",
                if max { "max" } else { "mean" },
                s.auroc.unwrap()
            );
        }
        return Ok(());
    }
    let t = Instant::now();
    let random = FlowTransformer::<f32>::new(model_cfg.clone())?;
    let r = grid_search(&ex(&random), &probe, &grid)?;
    println!(
        "random: best val {:.4} at ({}, {:.3}) [{:.1}s]",
        r.best_val(),
        r.selected_layer,
        r.selected_time,
        t.elapsed().as_secs_f64()
    );
    if knob("ONLY_RANDOM", 0) == 1 {
        return Ok(());
    }

    let t = Instant::now();
    let (fgno, log) = train_flow(
        FlowTransformer::<f32>::new(model_cfg.clone())?,
        &train,
        &val,
        &train_cfg,
    )?;
    println!(
        "fgno trained [{:.1}s] val losses {:?}",
        t.elapsed().as_secs_f64(),
        log.val_losses()
    );
    let t = Instant::now();
    let f = grid_search(&ex(&fgno), &probe, &grid)?;
    println!(
        "fgno: best val {:.4} at ({}, {:.3}) test {:.4} [{:.1}s]",
        f.best_val(),
        f.selected_layer,
        f.selected_time,
        f.test_metric()?,
        t.elapsed().as_secs_f64()
    );
    println!("{}", f.to_csv());
    let (small, _) = probe.with_label_fraction(0.05, seed)?;
    let f5 = grid_search(&ex(&fgno), &small, &grid)?;
    println!("5% labels: best val {:.4} vs full {:.4}", f5.best_val(), f.best_val());

    let t = Instant::now();
    let (mae, log) = train_mae(FlowTransformer::<f32>::new(model_cfg)?, &train, &val, &train_cfg)?;
    println!(
        "mae trained [{:.1}s] val losses {:?}",
        t.elapsed().as_secs_f64(),
        log.val_losses()
    );

    let factors = [1, 2, 4];
    for (name, model) in [("fgno", &fgno), ("mae", &mae)] {
        let t = Instant::now();
        let rows = resolution_sweep(model, &raw, &stats, &factors, &grid, pooling)?;
        let m: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.4}/{:.4}", r.val_metric.unwrap(), r.test_metric.unwrap()))
            .collect();
        println!("{name} sweep val/test {m:?} [{:.1}s]", t.elapsed().as_secs_f64());
    }
    Ok(())
}
