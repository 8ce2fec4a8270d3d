use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use graphflow::checkpoint;
use graphflow::data::{load_series, write_series, SeriesTable, SplitName};
use graphflow::detector::{AnomalyReport, ThresholdSet, DEFAULT_ENTITY_LAMBDA};
use graphflow::synth::{synth_generate, AnomalyKind, SynthConfig, MAX_ANOMALY_RATE};
use graphflow::trainer::{self, NormFit, Preset};
use graphflow::{Error, FlowModel};
use log::{info, warn};

use crate::config::{read_config_file, resolve};
use crate::{CliError, InspectArgs, ScoreArgs, SynthArgs, TrainArgs, EXIT_NUMERIC};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn load_table(path: &Path) -> Result<SeriesTable, CliError> {
    load_series(path).map_err(|e| match e {
        Error::Io(io) => CliError::data(format!("cannot read {}: {io}", path.display())),
        other => CliError::data(format!("{}: {other}", path.display())),
    })
}

fn load_model(path: &Path) -> Result<FlowModel, CliError> {
    checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn synth(args: &SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    if !(0.0..=MAX_ANOMALY_RATE).contains(&args.rate) {
        return Err(CliError::usage(format!(
            "--rate {} outside [0, {MAX_ANOMALY_RATE}]",
            args.rate
        )));
    }
    let kinds = if args.kinds.is_empty() {
        AnomalyKind::ALL.to_vec()
    } else {
        args.kinds
            .iter()
            .map(|k| k.parse::<AnomalyKind>())
            .collect::<Result<_, _>>()?
    };
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        entities: args.k,
        len: args.len,
        anomaly_rate: args.rate,
        kinds,
        seed: seed.unwrap_or(defaults.seed),
    };
    let table = synth_generate(&config)?;
    let mut out = create(&args.out)?;
    write_series(&table, &mut out)?;
    out.flush()?;
    info!(
        "wrote {} steps of {} entities to {}",
        table.len(),
        table.num_entities(),
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    let mut flags: Vec<(&'static str, String)> = Vec::new();
    let mut push = |key: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((key, v));
        }
    };
    push("epochs", args.epochs.map(|v| v.to_string()));
    push("window", args.window.map(|v| v.to_string()));
    push("stride", args.stride.map(|v| v.to_string()));
    push("batch_size", args.batch_size.map(|v| v.to_string()));
    push("lr", args.lr.map(|v| v.to_string()));
    push("n_blocks", args.blocks.map(|v| v.to_string()));
    push("hidden", args.hidden.map(|v| v.to_string()));
    push("cond_dim", args.cond_dim.map(|v| v.to_string()));
    push("made_hidden", args.made_hidden.map(|v| v.to_string()));
    push("dropout", args.dropout.map(|v| v.to_string()));
    push("split_train", args.split_train.map(|v| v.to_string()));
    push("split_val", args.split_val.map(|v| v.to_string()));
    push(
        "norm_fit",
        args.norm_fit.map(|v| NormFit::from(v).as_str().to_string()),
    );
    push("seed", seed.map(|v| v.to_string()));
    push("no_graph", args.no_graph.then(|| "true".to_string()));
    push(
        "single_target",
        args.single_target.then(|| "true".to_string()),
    );
    let config = resolve(&file, args.preset.map(Preset::from), &flags)?;

    let table = load_table(&args.data)?;
    let (dataset, _, ranges) = trainer::prepare(&table, &config)?;
    info!(
        "{} entities, {} training windows (steps {:?}), validation steps {:?}",
        dataset.names.len(),
        dataset.train.len(),
        ranges.train,
        ranges.val
    );
    let outcome = match trainer::train(&dataset, &config) {
        Ok(o) => o,
        Err(Error::Diverged(d)) => {
            let fallback = with_suffix(&args.out, ".last_good");
            checkpoint::save(&d.last_good, &fallback)?;
            return Err(CliError {
                code: EXIT_NUMERIC,
                msg: format!(
                    "training diverged in epoch {}: {}; last good model saved to {}",
                    d.epoch,
                    d.cause,
                    fallback.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::save(&outcome.best, &args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    let mut log = create(&log_path)?;
    trainer::write_log(&outcome.log, &mut log)?;
    log.flush()?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs in {:.1}s; best epoch {}",
            config.epochs, last.wall_seconds, outcome.best_epoch
        );
    } else {
        println!("no epochs run; saved the initialized model");
    }
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn entity_lambdas(given: &[f64], k: usize) -> Result<Vec<f64>, CliError> {
    match given.len() {
        0 => Ok(vec![DEFAULT_ENTITY_LAMBDA; k]),
        1 => Ok(vec![given[0]; k]),
        n if n == k => Ok(given.to_vec()),
        n => Err(CliError::usage(format!(
            "--lambda has {n} values for {k} entities"
        ))),
    }
}

/// Shared by `score` and `eval`; `eval` insists on reporting AUROC.
pub fn score(args: &ScoreArgs, eval: bool) -> Result<(), CliError> {
    if !eval && args.out.is_none() {
        return Err(CliError::usage("score needs --out"));
    }
    let model = load_model(&args.ckpt)?;
    let table = load_table(&args.data)?;
    check_compatible(&model, &table)?;
    let lambdas = entity_lambdas(&args.lambda, model.num_entities())?;
    let train_scores = model.train_scores.as_ref().ok_or_else(|| {
        CliError::data("checkpoint holds no training scores to fit thresholds on")
    })?;
    let thresholds = ThresholdSet::fit(train_scores, &lambdas)?;
    let windows = model.windows_for(&table, SplitName::from(args.split))?;
    let report = AnomalyReport::build(&model, &windows, thresholds)?;
    if let Some(out) = &args.out {
        let mut w = create(out)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    print!("{}", report.summary());
    if eval && report.auroc.is_none() {
        let why = if report.labels.is_none() {
            "data has no label column"
        } else {
            "labels contain a single class"
        };
        warn!("AUROC undefined: {why}");
        println!("auroc: undefined ({why})");
    }
    Ok(())
}

fn check_compatible(model: &FlowModel, table: &SeriesTable) -> Result<(), CliError> {
    if table.num_entities() != model.num_entities() {
        return Err(CliError::data(format!(
            "configuration error: model has {} entities, data has {}",
            model.num_entities(),
            table.num_entities()
        )));
    }
    if table.names != model.entity_names {
        warn!(
            "entity names differ: model {:?}, data {:?}",
            model.entity_names, table.names
        );
    }
    Ok(())
}

pub fn inspect_graph(args: &InspectArgs) -> Result<(), CliError> {
    let model = load_model(&args.ckpt)?;
    let table = load_table(&args.data)?;
    check_compatible(&model, &table)?;
    let windows = model.windows_for(&table, SplitName::All)?;
    if let Some(&bad) = args.windows.iter().find(|&&i| i >= windows.len()) {
        return Err(CliError::usage(format!(
            "window index {bad} out of range; the series has {} windows",
            windows.len()
        )));
    }
    let picked = windows.select(&args.windows)?;
    let adjacency = model.adjacency(&picked.values)?;
    let names = &model.entity_names;
    for (&index, adj) in args.windows.iter().zip(&adjacency) {
        let path = if args.windows.len() == 1 {
            args.out.clone()
        } else {
            indexed_path(&args.out, index)
        };
        let mut w = create(&path)?;
        writeln!(w, "entity,{}", names.join(","))?;
        for (k, row) in adj.data().chunks(names.len()).enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{},{}", names[k], cells.join(","))?;
        }
        w.flush()?;
        println!(
            "window {index} (start {}): {}",
            windows.starts[index],
            path.display()
        );
    }
    Ok(())
}

fn indexed_path(base: &Path, index: usize) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}_w{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}_w{index}"),
    };
    base.with_file_name(name)
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}
