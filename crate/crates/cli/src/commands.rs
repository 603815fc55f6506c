//! One function per subcommand. Each writes its resolved config next to its
//! outputs and returns the directory it wrote.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fgno_core::experiment::{clean_vs_noisy, normalized, resolution_sweep, sweep_csv};
use fgno_core::model::FlowTransformer;
use fgno_core::pretrain::{train_flow, train_mae, TrainConfig};
use fgno_core::probe::{grid_search, BackboneExtractor, GridSearchResult, ProbeData};
use fgno_core::signal::{read_dataset, synth_dataset, write_dataset, Dataset, Split, MANIFEST_FILE};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Fgno,
    Mae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fgno => "fgno",
            Method::Mae => "mae",
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(fgno_core::Error::from)?;
    write(path, text + "\n")
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> CliResult<()> {
    write(&dir.join(CONFIG_FILE), config.to_toml()?)
}

fn load_raw(config: &ExperimentConfig) -> CliResult<Dataset> {
    match (&config.data.path, &config.data.synth) {
        (Some(path), _) => {
            if !path.join(MANIFEST_FILE).is_file() {
                return Err(CliError::Config(format!(
                    "no dataset manifest under {}",
                    path.display()
                )));
            }
            Ok(read_dataset(path)?)
        }
        (None, Some(synth)) => Ok(synth_dataset(synth, config.seed)?),
        (None, None) => Err(CliError::Config("data: one of path or synth is required".into())),
    }
}

/// Raw data plus the config with its backbone filled in.
fn prepare(config: &ExperimentConfig) -> CliResult<(ExperimentConfig, Dataset)> {
    let raw = load_raw(config)?;
    let model = config.model_for(&raw)?;
    Ok((
        ExperimentConfig {
            model: Some(model),
            ..config.clone()
        },
        raw,
    ))
}

fn load_backbone(
    config: &ExperimentConfig,
    method: Method,
    checkpoint: Option<&Path>,
) -> CliResult<FlowTransformer<f32>> {
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| {
        config
            .output_dir
            .join(format!("pretrain-{}", method.name()))
            .join("checkpoint")
    });
    if !dir.is_dir() {
        return Err(CliError::Config(format!("no checkpoint at {}", dir.display())));
    }
    Ok(FlowTransformer::load(&dir, config.model.as_ref())?.0)
}

fn probe_data(config: &ExperimentConfig, data: &Dataset) -> CliResult<(ProbeData, fgno_core::probe::SubsampleReport)> {
    Ok(ProbeData::from_dataset(data).with_label_fraction(config.probe.label_fraction, config.seed)?)
}

/// Writes the synthetic dataset described by the config.
pub fn gen_synth(config: &ExperimentConfig, out: Option<&Path>) -> CliResult<PathBuf> {
    let synth = config
        .data
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("gen-synth needs a [data.synth] table".into()))?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join("dataset"));
    let dataset = synth_dataset(synth, config.seed)?;
    write_dataset(&dir, &dataset)?;
    write_config(&dir, config)?;
    Ok(dir)
}

pub fn pretrain(config: &ExperimentConfig, method: Method) -> CliResult<PathBuf> {
    let (config, raw) = prepare(config)?;
    let (data, stats) = normalized(&raw)?;
    let dir = config.output_dir.join(format!("pretrain-{}", method.name()));
    let log_path = dir.join("train_log.csv");
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    }
    write_config(&dir, &config)?;
    let train_config = TrainConfig {
        log_path: Some(log_path),
        ..config.train.clone()
    };
    let model = FlowTransformer::<f32>::new(config.model.clone().expect("prepared"))?;
    let (train, val) = (data.unlabeled(Split::Train), data.unlabeled(Split::Val));
    let (model, log) = match method {
        Method::Fgno => train_flow(model, &train, &val, &train_config)?,
        Method::Mae => train_mae(model, &train, &val, &train_config)?,
    };
    let header = model.save(&dir.join("checkpoint"), method.name())?;
    write_json(&dir.join("norm_stats.json"), &stats)?;
    write_json(
        &dir.join("result.json"),
        &json!({
            "method": method.name(),
            "steps": log.train().last().map(|r| r.step).unwrap_or(0),
            "final_train_loss": log.train_losses().last(),
            "final_val_loss": log.val_losses().last(),
            "checkpoint": "checkpoint",
            "config_hash": header.config_hash,
        }),
    )?;
    Ok(dir)
}

pub fn probe(config: &ExperimentConfig, method: Method, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let (config, raw) = prepare(config)?;
    let model = load_backbone(&config, method, checkpoint)?;
    let (data, _) = normalized(&raw)?;
    let (probe, subsample) = probe_data(&config, &data)?;
    let extractor = BackboneExtractor {
        pooling: config.probe.pooling,
        ..BackboneExtractor::clean(&model)
    };
    let result = grid_search(&extractor, &probe, &config.probe.grid)?;
    let dir = config.output_dir.join(format!("probe-{}", method.name()));
    write_config(&dir, &config)?;
    write_json(&dir.join("grid.json"), &result)?;
    write(&dir.join("val_matrix.csv"), result.to_csv())?;
    write_json(&dir.join("subsample.json"), &subsample)?;
    write_json(&dir.join("test_report.json"), &test_report(&result)?)?;
    Ok(dir)
}

fn test_report(result: &GridSearchResult) -> CliResult<serde_json::Value> {
    Ok(json!({
        "layer": result.selected_layer,
        "s": result.selected_time,
        "metric": result.metric,
        "val_metric": result.best_val(),
        "test_metric": result.test_metric()?,
        "test_scores": result.test,
        "train_rows": result.train_rows,
    }))
}

pub fn ablate(config: &ExperimentConfig, method: Method, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let (config, raw) = prepare(config)?;
    let model = load_backbone(&config, method, checkpoint)?;
    let (data, _) = normalized(&raw)?;
    let (probe, _) = probe_data(&config, &data)?;
    let p = &config.probe;
    let (layer, s, source) = match (p.layer, p.s) {
        (Some(l), Some(s)) => (l, s, "configured"),
        _ => {
            let extractor = BackboneExtractor {
                pooling: p.pooling,
                ..BackboneExtractor::clean(&model)
            };
            let r = grid_search(&extractor, &probe, &p.grid)?;
            (r.selected_layer, r.selected_time, "grid_search")
        }
    };
    let report = clean_vs_noisy(
        &model,
        &probe,
        layer,
        s,
        config.train.flow.schedule,
        p.grid.metric,
        &p.grid.head,
        p.clean_reruns,
        &config.noise_seeds(),
    )?;
    let dir = config.output_dir.join(format!("ablate-{}", method.name()));
    write_config(&dir, &config)?;
    write_json(
        &dir.join("ablation.json"),
        &json!({ "cell_source": source, "report": report }),
    )?;
    write(&dir.join("ablation.csv"), report.to_csv())?;
    Ok(dir)
}

/// Probes with every training label at each downsampling factor.
pub fn sweep(config: &ExperimentConfig, method: Method, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let (config, raw) = prepare(config)?;
    let model = load_backbone(&config, method, checkpoint)?;
    let (_, stats) = normalized(&raw)?;
    let p = &config.probe;
    let rows = resolution_sweep(&model, &raw, &stats, &p.factors, &p.grid, p.pooling)?;
    let dir = config.output_dir.join(format!("sweep-{}", method.name()));
    write_config(&dir, &config)?;
    write_json(&dir.join("sweep.json"), &rows)?;
    write(&dir.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(dir)
}

/// Artifacts each kind of command directory must hold.
const ARTIFACTS: [(&str, &[&str]); 3] = [
    ("probe-", &["val_matrix.csv", "test_report.json"]),
    ("sweep-", &["sweep.csv"]),
    ("ablate-", &["ablation.csv"]),
];

/// Copies grid matrices, sweep tables and ablation tables of every run into
/// `out` under `<run>.<command>.<file>` names, plus a summary of the
/// selected cells. Missing artifacts are listed in `missing.txt`.
pub fn report(runs: &[PathBuf], out: &Path) -> CliResult<PathBuf> {
    let mut names = BTreeSet::new();
    for run in runs {
        let name = run_name(run)?;
        if !names.insert(name.clone()) {
            return Err(CliError::Config(format!("two runs are named {name:?}")));
        }
    }
    let mut missing = Vec::new();
    let mut summary = String::from("run,command,layer,s,metric,val_metric,test_metric\n");
    let mut ordered: Vec<(String, &PathBuf)> = runs.iter().map(|r| (run_name(r).expect("checked"), r)).collect();
    ordered.sort();
    for (name, run) in ordered {
        if !run.is_dir() {
            missing.push(format!("{name}: run directory {} not found", run.display()));
            continue;
        }
        let mut found_probe = false;
        for sub in command_dirs(run)? {
            let sub_name = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let Some((_, files)) = ARTIFACTS.iter().find(|(prefix, _)| sub_name.starts_with(prefix)) else {
                continue;
            };
            found_probe |= sub_name.starts_with("probe-");
            for file in *files {
                let src = sub.join(file);
                if !src.is_file() {
                    missing.push(format!("{name}: {sub_name}/{file}"));
                    continue;
                }
                let bytes = fs::read(&src).map_err(|e| CliError::io(&src, e))?;
                write(&out.join(format!("{name}.{sub_name}.{file}")), bytes)?;
            }
            if sub_name.starts_with("probe-") {
                if let Some(line) = summary_line(&name, &sub_name, &sub.join("test_report.json"))? {
                    summary.push_str(&line);
                }
            }
        }
        if !found_probe {
            missing.push(format!("{name}: no probe results"));
        }
    }
    write(&out.join("summary.csv"), summary)?;
    let missing_path = out.join("missing.txt");
    if missing.is_empty() {
        if missing_path.exists() {
            fs::remove_file(&missing_path).map_err(|e| CliError::io(&missing_path, e))?;
        }
    } else {
        write(&missing_path, missing.join("\n") + "\n")?;
        for m in &missing {
            eprintln!("missing: {m}");
        }
    }
    Ok(out.to_path_buf())
}

fn run_name(run: &Path) -> CliResult<String> {
    run.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Config(format!("cannot name run {}", run.display())))
}

fn command_dirs(run: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(run).map_err(|e| CliError::io(run, e))? {
        let path = entry.map_err(|e| CliError::io(run, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn summary_line(run: &str, command: &str, path: &Path) -> CliResult<Option<String>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(fgno_core::Error::from)?;
    Ok(Some(format!(
        "{run},{command},{},{},{},{},{}\n",
        v["layer"],
        v["s"],
        v["metric"].as_str().unwrap_or_default(),
        v["val_metric"],
        v["test_metric"]
    )))
}
