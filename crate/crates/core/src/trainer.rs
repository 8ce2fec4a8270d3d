//! Joint maximum-likelihood training of every module.

use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::data::{
    fit_normalize, make_windows_in, SeriesTable, SplitFractions, SplitRanges, WindowBatch,
};
use crate::detector::score;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{FlowModel, Mode};
use crate::tensor::Tensor;

/// Which timesteps the z-score statistics are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormFit {
    #[default]
    Train,
    All,
}

impl FromStr for NormFit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(NormFit::Train),
            "all" => Ok(NormFit::All),
            other => Err(Error::Config(format!(
                "unknown norm fit `{other}` (train|all)"
            ))),
        }
    }
}

impl NormFit {
    pub fn as_str(self) -> &'static str {
        match self {
            NormFit::Train => "train",
            NormFit::All => "all",
        }
    }
}

/// Per-dataset hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// One flow block, batch 512.
    Swat,
    /// Two flow blocks, batch 256.
    Wadi,
    /// Two flow blocks, batch 32, for series of a few thousand steps
    /// where a batch of 256 would cover a whole epoch.
    Small,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swat" => Ok(Preset::Swat),
            "wadi" => Ok(Preset::Wadi),
            "small" => Ok(Preset::Small),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (swat|wadi|small)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub window: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub n_blocks: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    /// Condition width per timestep.
    pub cond_dim: usize,
    /// MADE hidden width.
    pub made_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Replace the learned graph with the identity.
    pub no_graph: bool,
    /// Every entity targets `N(0, I)`.
    pub single_target: bool,
    pub split: SplitFractions,
    pub norm_fit: NormFit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 60,
            stride: 10,
            batch_size: 256,
            lr: 0.002,
            epochs: 40,
            n_blocks: 2,
            hidden: 32,
            cond_dim: 32,
            made_hidden: crate::flow::DEFAULT_MADE_HIDDEN,
            dropout: crate::attention::DEFAULT_DROPOUT,
            seed: 0,
            no_graph: false,
            single_target: false,
            split: SplitFractions::default(),
            norm_fit: NormFit::Train,
        }
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self::default();
        match preset {
            Preset::Swat => Self {
                n_blocks: 1,
                batch_size: 512,
                ..base
            },
            Preset::Wadi => base,
            Preset::Small => Self {
                batch_size: 32,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("window", self.window),
            ("stride", self.stride),
            ("batch_size", self.batch_size),
            ("n_blocks", self.n_blocks),
            ("hidden", self.hidden),
            ("cond_dim", self.cond_dim),
            ("made_hidden", self.made_hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Flat `key=value` pairs in a fixed order; [`TrainConfig::set`]
    /// parses them back.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("hidden", self.hidden.to_string()),
            ("cond_dim", self.cond_dim.to_string()),
            ("made_hidden", self.made_hidden.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
            ("no_graph", self.no_graph.to_string()),
            ("single_target", self.single_target.to_string()),
            ("split_train", self.split.train.to_string()),
            ("split_val", self.split.val.to_string()),
            ("norm_fit", self.norm_fit.as_str().to_string()),
        ]
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key.trim() {
            "window" => self.window = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "cond_dim" => self.cond_dim = parse(key, value)?,
            "made_hidden" => self.made_hidden = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "no_graph" => self.no_graph = parse(key, value)?,
            "single_target" => self.single_target = parse(key, value)?,
            "split_train" => self.split.train = parse(key, value)?,
            "split_val" => self.split.val = parse(key, value)?,
            "norm_fit" => self.norm_fit = value.trim().parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

/// Normalized, windowed, label-free training input.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub norm: crate::data::NormStats,
    pub train: WindowBatch,
    pub val: Option<WindowBatch>,
}

/// Split, normalize and window a raw table.
///
/// Labels are dropped before anything else so training can never see
/// them. Returns the dataset, the full normalized table (labels removed)
/// and the split ranges.
pub fn prepare(
    table: &SeriesTable,
    config: &TrainConfig,
) -> Result<(Dataset, SeriesTable, SplitRanges)> {
    config.validate()?;
    let table = table.without_labels();
    let ranges = config.split.ranges(table.len())?;
    if ranges.train.len() < config.window {
        return Err(Error::Config(format!(
            "training split has {} steps, fewer than the window size {}",
            ranges.train.len(),
            config.window
        )));
    }
    let fit_range = match config.norm_fit {
        NormFit::Train => ranges.train.clone(),
        NormFit::All => 0..table.len(),
    };
    let (normalized, norm) = fit_normalize(&table, fit_range)?;
    let train = make_windows_in(
        &normalized,
        ranges.train.clone(),
        config.window,
        config.stride,
    )?;
    let val = if ranges.val.len() >= config.window {
        Some(make_windows_in(
            &normalized,
            ranges.val.clone(),
            config.window,
            config.stride,
        )?)
    } else {
        None
    };
    let dataset = Dataset {
        names: table.names.clone(),
        norm,
        train,
        val,
    };
    Ok((dataset, normalized, ranges))
}

/// Training objective on `batch` in eval mode (no dropout):
/// `(1/(B·K)) Σ [½‖z − μ_k‖² − logdet]`.
pub fn loss(batch: &WindowBatch, model: &FlowModel) -> Result<f64> {
    model.check_windows(&batch.values)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let x = g.input(batch.values.clone());
    let out = model.forward_graph(&mut g, &vars, x, Mode::Eval)?;
    let rows = model.objective_rows(&mut g, &out, batch.len())?;
    let l = g.mean(rows)?;
    Ok(g.value(l).item())
}

/// Loss and gradient for every parameter, in [`FlowModel::named_params`] order.
pub fn loss_and_grads(
    batch: &WindowBatch,
    model: &FlowModel,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>)> {
    model.check_windows(&batch.values)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.input(batch.values.clone());
    let mode = match dropout_rng {
        Some(rng) => Mode::Train(rng),
        None => Mode::Eval,
    };
    let out = model.forward_graph(&mut g, &vars, x, mode)?;
    let rows = model.objective_rows(&mut g, &out, batch.len())?;
    let l = g.mean(rows)?;
    let grads = g.backward(l)?;
    let named = model.named_params();
    let grads = vars
        .flat
        .iter()
        .zip(&named)
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((g.value(l).item(), grads))
}

fn mean_loss(windows: &WindowBatch, model: &FlowModel) -> Result<f64> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(model.config.batch_size) {
        total += loss(&windows.select(chunk)?, model)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

/// Write the epoch log as CSV.
pub fn write_log(log: &[EpochLog], mut out: impl std::io::Write) -> Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,wall_seconds")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{:.3}",
            e.epoch, e.train_loss, e.val_loss, e.wall_seconds
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the lowest validation loss (training loss without a
    /// validation split).
    pub best: FlowModel,
    pub best_epoch: usize,
    /// Model after the final epoch.
    pub last: FlowModel,
    pub log: Vec<EpochLog>,
}

/// Train from scratch on `dataset`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let model = FlowModel::init(config, dataset.names.clone(), dataset.norm.clone())?;
    train_from(model, dataset)
}

/// Continue training an initialized model.
pub fn train_from(mut model: FlowModel, dataset: &Dataset) -> Result<TrainOutcome> {
    let config = model.config.clone();
    if dataset.train.is_empty() {
        return Err(Error::Config("training split has no windows".into()));
    }
    if dataset.train.labels.is_some() {
        return Err(Error::Usage(
            "training windows must not carry labels".into(),
        ));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let adam_config = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(
        adam_config,
        model.named_params().into_iter().map(|(_, t)| t),
    );
    let selection_set = dataset.val.as_ref().unwrap_or(&dataset.train);

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;
    let mut log = Vec::with_capacity(config.epochs);
    let started = Instant::now();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.train.select(chunk)?;
            let step =
                loss_and_grads(&batch, &model, Some(&mut dropout_rng)).and_then(|(l, grads)| {
                    if !l.is_finite() {
                        return Err(Error::NonFinite { op: "loss".into() });
                    }
                    adam.step(&mut model.params_mut(), &grads)?;
                    Ok(l)
                });
            match step {
                Ok(l) => total += l * chunk.len() as f64,
                Err(e) => return Err(diverged(epoch, e, best)),
            }
        }
        if model.named_params().iter().any(|(_, t)| !t.all_finite()) {
            return Err(diverged(
                epoch,
                Error::NonFinite {
                    op: "adam_step".into(),
                },
                best,
            ));
        }
        let train_loss = total / dataset.train.len() as f64;
        let val_loss = match mean_loss(selection_set, &model) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => {
                return Err(diverged(
                    epoch,
                    Error::NonFinite {
                        op: "validation loss".into(),
                    },
                    best,
                ))
            }
            Err(e) => return Err(diverged(epoch, e, best)),
        };
        let wall_seconds = started.elapsed().as_secs_f64();
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({wall_seconds:.1}s)");
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = model.clone();
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_seconds,
        });
    }
    info!(
        "trained {} epochs; best validation loss {best_loss:.5} at epoch {best_epoch}",
        config.epochs
    );

    best.train_scores = Some(score(&best, &dataset.train)?);
    model.train_scores = Some(score(&model, &dataset.train)?);
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}

fn diverged(epoch: usize, cause: Error, last_good: FlowModel) -> Error {
    Error::Diverged(Box::new(crate::error::Divergence {
        epoch,
        cause: cause.to_string(),
        last_good,
    }))
}
