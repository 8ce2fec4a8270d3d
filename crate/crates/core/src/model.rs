//! The full detector: attention graph, LSTM encoder, condition and flow,
//! plus the frozen entity targets and normalization statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{adjacency_graph, AttentionParams, AttentionVars};
use crate::condition::{condition_graph, ConditionVars, ConditionWeights};
use crate::data::{make_windows_in, NormStats, SeriesTable, SplitName, WindowBatch};
use crate::detector::ScoreSeries;
use crate::error::{Error, Result};
use crate::flow::{half_log_two_pi, EntityTargets, FlowStack, MadeVars};
use crate::graph::{Graph, Var};
use crate::temporal::{encode_graph, RnnParams, RnnVars};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: TrainConfig,
    pub entity_names: Vec<String>,
    pub attention: AttentionParams,
    pub rnn: RnnParams,
    pub condition: ConditionWeights,
    pub flow: FlowStack,
    pub targets: EntityTargets,
    pub norm: NormStats,
    /// Scores of the training windows, kept for threshold fitting.
    pub train_scores: Option<ScoreSeries>,
}

/// Graph handles for every parameter of a [`FlowModel`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub attention: AttentionVars,
    pub rnn: RnnVars,
    pub condition: ConditionVars,
    pub flow: Vec<MadeVars>,
    /// Same order as [`FlowModel::named_params`].
    pub flat: Vec<Var>,
}

/// Dropout is only active in training mode.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

pub struct PipelineOutput {
    /// `[B·K, T]`
    pub z: Var,
    /// `[B·K]`
    pub logdet: Var,
    /// `[B, K, K]`, absent when the graph is ablated.
    pub adjacency: Option<Var>,
}

impl FlowModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &TrainConfig, entity_names: Vec<String>, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let k = entity_names.len();
        if k == 0 || norm.mean.len() != k {
            return Err(Error::Config(format!(
                "{k} entity names but normalization for {} entities",
                norm.mean.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let attention = AttentionParams::init(config.window, config.dropout, &mut rng);
        let rnn = RnnParams::init(config.hidden, &mut rng);
        let condition = ConditionWeights::init(config.hidden, config.cond_dim, &mut rng);
        let flow = FlowStack::init(
            config.window,
            config.window * config.cond_dim,
            config.made_hidden,
            config.n_blocks,
            &mut rng,
        )?;
        let sampled = EntityTargets::sample(k, &mut rng);
        let targets = if config.single_target {
            EntityTargets::zeros(k)
        } else {
            sampled
        };
        Ok(Self {
            config: config.clone(),
            entity_names,
            attention,
            rnn,
            condition,
            flow,
            targets,
            norm,
            train_scores: None,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    /// Trainable tensors keyed by hierarchical path.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.attention.tensors() {
            out.push((format!("attention.{n}"), t));
        }
        for (n, t) in self.rnn.tensors() {
            out.push((format!("rnn.{n}"), t));
        }
        for (n, t) in self.condition.tensors() {
            out.push((format!("condition.{n}"), t));
        }
        for (n, t) in self.flow.tensors() {
            out.push((format!("flow.{n}"), t));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.attention.tensors_mut();
        out.extend(self.rnn.tensors_mut());
        out.extend(self.condition.tensors_mut());
        out.extend(self.flow.tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut flat = Vec::new();
        let attention = self.attention.bind(g, trainable, &mut flat);
        let rnn = self.rnn.bind(g, trainable, &mut flat);
        let condition = self.condition.bind(g, trainable, &mut flat);
        let flow = self.flow.bind(g, trainable, &mut flat);
        ModelVars {
            attention,
            rnn,
            condition,
            flow,
            flat,
        }
    }

    pub fn check_windows(&self, values: &Tensor) -> Result<()> {
        let s = values.shape();
        if s.len() != 3 || s[1] != self.num_entities() || s[2] != self.window() {
            return Err(Error::Config(format!(
                "model expects windows of {} entities × {} steps, got {s:?}",
                self.num_entities(),
                self.window()
            )));
        }
        Ok(())
    }

    /// Whole pipeline for windows `x: [B, K, T]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        mode: Mode<'_>,
    ) -> Result<PipelineOutput> {
        let (b, k, t) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let adjacency = if self.config.no_graph {
            None
        } else {
            let dropout = match mode {
                Mode::Train(rng) => Some((self.attention.dropout, rng)),
                Mode::Eval => None,
            };
            Some(adjacency_graph(g, x, vars.attention, dropout)?)
        };
        let hidden = encode_graph(g, x, vars.rnn)?;
        let cond = condition_graph(
            g,
            hidden.current,
            hidden.previous,
            adjacency,
            vars.condition,
        )?;
        let d = g.shape(cond)[2];
        let cond = g.reshape(cond, &[b * k, t * d])?;
        let rows = g.reshape(x, &[b * k, t])?;
        let (z, logdet) = self.flow.forward_graph(g, &vars.flow, rows, Some(cond))?;
        Ok(PipelineOutput {
            z,
            logdet,
            adjacency,
        })
    }

    /// `[B·K, T]` tensor holding `μ_k` on every row of entity `k`.
    pub fn target_rows(&self, batch: usize) -> Tensor {
        let (k, t) = (self.num_entities(), self.window());
        let mut data = Vec::with_capacity(batch * k * t);
        for _ in 0..batch {
            for &mu in &self.targets.mu {
                data.extend(std::iter::repeat_n(mu, t));
            }
        }
        Tensor::new(vec![batch * k, t], data).unwrap()
    }

    /// Per-row `½‖z − μ_k‖² − logdet`, shape `[B·K]`; the Gaussian
    /// normalizing constant is left out.
    pub fn objective_rows(&self, g: &mut Graph, out: &PipelineOutput, batch: usize) -> Result<Var> {
        let targets = g.input(self.target_rows(batch));
        let diff = g.sub(out.z, targets)?;
        let sq = g.square(diff)?;
        let sq = g.sum_last(sq)?;
        let half = g.scale(sq, 0.5)?;
        g.sub(half, out.logdet)
    }

    /// Negative log-likelihood per (window, entity), `B × K` row-major,
    /// including the Gaussian constant.
    pub fn entity_nll(&self, windows: &Tensor) -> Result<Vec<f64>> {
        self.check_windows(windows)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.input(windows.clone());
        let out = self.forward_graph(&mut g, &vars, x, Mode::Eval)?;
        let rows = self.objective_rows(&mut g, &out, windows.shape()[0])?;
        let constant = self.window() as f64 * half_log_two_pi();
        Ok(g.value(rows).data().iter().map(|v| v + constant).collect())
    }

    /// Normalize a raw table with the stored statistics and window the
    /// requested split with the trained `T` and `S`.
    pub fn windows_for(&self, table: &SeriesTable, split: SplitName) -> Result<WindowBatch> {
        if table.num_entities() != self.num_entities() {
            return Err(Error::Config(format!(
                "model has {} entities, data has {}",
                self.num_entities(),
                table.num_entities()
            )));
        }
        let normalized = self.norm.apply(table)?;
        let range = self
            .config
            .split
            .ranges(table.len())?
            .get(split, table.len());
        make_windows_in(&normalized, range, self.config.window, self.config.stride)
    }

    /// Eval-mode adjacency per window; identity matrices when ablated.
    pub fn adjacency(&self, windows: &Tensor) -> Result<Vec<Tensor>> {
        self.check_windows(windows)?;
        let k = self.num_entities();
        if self.config.no_graph {
            return Ok(vec![Tensor::eye(k); windows.shape()[0]]);
        }
        let mut g = Graph::new();
        let vars = self.attention.bind(&mut g, false, &mut Vec::new());
        let x = g.input(windows.clone());
        let adj = adjacency_graph::<ChaCha8Rng>(&mut g, x, vars, None)?;
        Ok(g.value(adj)
            .data()
            .chunks(k * k)
            .map(|c| Tensor::new(vec![k, k], c.to_vec()).unwrap())
            .collect())
    }
}
