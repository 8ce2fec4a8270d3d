//! Single-layer LSTM run independently over every entity's window,
//! with parameters shared across entities. Input per step is the scalar
//! observation.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::data::WindowBatch;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// LSTM weights; gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    /// `1 × 4h`
    pub w_ih: Tensor,
    /// `h × 4h`
    pub w_hh: Tensor,
    /// `4h`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct RnnVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl RnnParams {
    /// Weights uniform in `±1/√h`, forget-gate bias 1, other biases 0.
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w_ih = (0..4 * hidden).map(|_| dist.sample(rng)).collect();
        let w_hh = (0..hidden * 4 * hidden).map(|_| dist.sample(rng)).collect();
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_ih: Tensor::new(vec![1, 4 * hidden], w_ih).unwrap(),
            w_hh: Tensor::new(vec![hidden, 4 * hidden], w_hh).unwrap(),
            bias: Tensor::from_vec(bias),
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[1, 4 * hidden]),
            w_hh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_ih", &self.w_ih),
            ("w_hh", &self.w_hh),
            ("bias", &self.bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, flat: &mut Vec<Var>) -> RnnVars {
        let mut leaf = |t: &Tensor| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            };
            flat.push(v);
            v
        };
        RnnVars {
            w_ih: leaf(&self.w_ih),
            w_hh: leaf(&self.w_hh),
            bias: leaf(&self.bias),
        }
    }
}

/// Hidden sequences `H` and the one-step-shifted `H^{t-1}`, both
/// `[B·K, T, h]`, with zeros at the first step of the shifted copy.
#[derive(Debug, Clone, Copy)]
pub struct HiddenVars {
    pub current: Var,
    pub previous: Var,
}

/// Run the LSTM over `x: [B, K, T]`.
pub fn encode_graph(g: &mut Graph, x: Var, vars: RnnVars) -> Result<HiddenVars> {
    let (b, k, t) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let rows = b * k;
    let hidden = g.shape(vars.w_hh)[0];
    let flat = g.reshape(x, &[rows, t])?;

    let mut h = g.input(Tensor::zeros(&[rows, hidden]));
    let mut c = g.input(Tensor::zeros(&[rows, hidden]));
    let mut outputs = Vec::with_capacity(t);
    for step in 0..t {
        let xt = g.slice(flat, 1, step, 1)?;
        let from_x = g.matmul(xt, vars.w_ih)?;
        let from_h = g.matmul(h, vars.w_hh)?;
        let gates = g.add(from_x, from_h)?;
        let gates = g.add_row(gates, vars.bias)?;
        let i = g.slice(gates, 1, 0, hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.slice(gates, 1, hidden, hidden)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice(gates, 1, 2 * hidden, hidden)?;
        let cand = g.tanh(cand)?;
        let o = g.slice(gates, 1, 3 * hidden, hidden)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let squashed = g.tanh(c)?;
        h = g.mul(o, squashed)?;
        outputs.push(g.reshape(h, &[rows, 1, hidden])?);
    }
    let current = g.concat(&outputs, 1)?;
    let zero = g.input(Tensor::zeros(&[rows, 1, hidden]));
    let previous = if t > 1 {
        let head = g.slice(current, 1, 0, t - 1)?;
        g.concat(&[zero, head], 1)?
    } else {
        zero
    };
    Ok(HiddenVars { current, previous })
}

/// Hidden states `[B·K, T, h]` and their shifted copy, evaluated without
/// recording gradients for the parameters.
pub fn encode(batch: &WindowBatch, params: &RnnParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(batch.values.clone());
    let vars = params.bind(&mut g, false, &mut Vec::new());
    let out = encode_graph(&mut g, x, vars)?;
    Ok((g.value(out.current).clone(), g.value(out.previous).clone()))
}
