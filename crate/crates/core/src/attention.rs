//! Per-window dependency graph from scaled dot-product self-attention.
//!
//! Each entity's window row `x_i` (length `T`) is projected to a query
//! `x_i W_Q` and key `x_i W_K`. The row-wise softmax of
//! `(x_i W_Q)(x_j W_K)ᵀ / √T` is the adjacency matrix of the window.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::data::WindowBatch;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `T × T` query weights.
    pub w_q: Tensor,
    /// `T × T` key weights.
    pub w_k: Tensor,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
}

impl AttentionParams {
    /// Uniform in `±1/√T`.
    pub fn init(window: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (window as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut draw = || {
            let data = (0..window * window).map(|_| dist.sample(rng)).collect();
            Tensor::new(vec![window, window], data).unwrap()
        };
        let w_q = draw();
        let w_k = draw();
        Self { w_q, w_k, dropout }
    }

    pub fn identity(window: usize) -> Self {
        Self {
            w_q: Tensor::eye(window),
            w_k: Tensor::eye(window),
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_q", &self.w_q), ("w_k", &self.w_k)]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_q, &mut self.w_k]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, flat: &mut Vec<Var>) -> AttentionVars {
        let mut leaf = |t: &Tensor| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            };
            flat.push(v);
            v
        };
        AttentionVars {
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
        }
    }
}

/// Adjacency `[B, K, K]` for windows `x: [B, K, T]`.
///
/// With `dropout = Some((rate, rng))` an inverted-dropout mask is applied
/// to the attention weights, so rows no longer sum to one.
pub fn adjacency_graph<R: Rng>(
    g: &mut Graph,
    x: Var,
    vars: AttentionVars,
    dropout: Option<(f64, &mut R)>,
) -> Result<Var> {
    let window = g.shape(x)[2];
    let q = g.matmul(x, vars.w_q)?;
    let k = g.matmul(x, vars.w_k)?;
    let kt = g.transpose_last(k)?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (window as f64).sqrt())?;
    let adj = g.softmax(scores)?;
    match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let shape = g.shape(adj).to_vec();
            let numel = shape.iter().product();
            let mask: Vec<f64> = (0..numel)
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let mask = g.input(Tensor::new(shape, mask)?);
            g.mul(adj, mask)
        }
        _ => Ok(adj),
    }
}

/// Adjacency matrix per window, each `K × K`.
pub fn attention_adjacency<R: Rng>(
    batch: &WindowBatch,
    params: &AttentionParams,
    training: bool,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.input(batch.values.clone());
    let vars = params.bind(&mut g, false, &mut Vec::new());
    let dropout = training.then_some((params.dropout, rng));
    let adj = adjacency_graph(&mut g, x, vars, dropout)?;
    let k = batch.num_entities();
    Ok(g.value(adj)
        .data()
        .chunks(k * k)
        .map(|c| Tensor::new(vec![k, k], c.to_vec()).unwrap())
        .collect())
}
