//! Spatio-temporal condition: `C^t = ReLU(A H^t W1 + H^{t-1} W2) W3`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionWeights {
    /// `h × h` graph convolution weights.
    pub w1: Tensor,
    /// `h × h` history weights.
    pub w2: Tensor,
    /// `h × d` projection.
    pub w3: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

impl ConditionWeights {
    pub fn init(hidden: usize, cond: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data).unwrap()
        };
        let w1 = draw(hidden, hidden);
        let w2 = draw(hidden, hidden);
        let w3 = draw(hidden, cond);
        Self { w1, w2, w3 }
    }

    pub fn cond_dim(&self) -> usize {
        self.w3.shape()[1]
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("w2", &self.w2), ("w3", &self.w3)]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.w2, &mut self.w3]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, flat: &mut Vec<Var>) -> ConditionVars {
        let mut leaf = |t: &Tensor| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            };
            flat.push(v);
            v
        };
        ConditionVars {
            w1: leaf(&self.w1),
            w2: leaf(&self.w2),
            w3: leaf(&self.w3),
        }
    }
}

/// Conditions `[B·K, T, d]` from hidden states `[B·K, T, h]`.
///
/// `adjacency` is `[B, K, K]`; `None` means the identity graph (no mixing
/// between entities).
pub fn condition_graph(
    g: &mut Graph,
    hidden: Var,
    previous: Var,
    adjacency: Option<Var>,
    vars: ConditionVars,
) -> Result<Var> {
    let (rows, t, h) = {
        let s = g.shape(hidden);
        if s.len() != 3 {
            return Err(Error::shape("build_condition", format!("hidden {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    if g.shape(previous) != g.shape(hidden) {
        return Err(Error::shape(
            "build_condition",
            format!(
                "hidden {:?} vs previous {:?}",
                g.shape(hidden),
                g.shape(previous)
            ),
        ));
    }
    let mixed = match adjacency {
        Some(adj) => {
            let (b, k) = {
                let s = g.shape(adj);
                (s[0], s[1])
            };
            if adjacency_mismatch(g.shape(adj), b * k, rows) {
                return Err(Error::shape(
                    "build_condition",
                    format!("adjacency {:?} for {rows} hidden rows", g.shape(adj)),
                ));
            }
            let per_window = g.reshape(hidden, &[b, k, t * h])?;
            let mixed = g.batch_matmul(adj, per_window)?;
            g.reshape(mixed, &[rows * t, h])?
        }
        None => g.reshape(hidden, &[rows * t, h])?,
    };
    let conv = g.matmul(mixed, vars.w1)?;
    let prev = g.reshape(previous, &[rows * t, h])?;
    let history = g.matmul(prev, vars.w2)?;
    let pre = g.add(conv, history)?;
    let act = g.relu(pre)?;
    let out = g.matmul(act, vars.w3)?;
    let d = g.shape(out)[1];
    g.reshape(out, &[rows, t, d])
}

fn adjacency_mismatch(adj: &[usize], bk: usize, rows: usize) -> bool {
    adj.len() != 3 || adj[1] != adj[2] || bk != rows
}

/// Plain evaluation of the condition for hidden states `[B·K, T, h]`.
pub fn build_condition(
    hidden: &Tensor,
    previous: &Tensor,
    adjacency: Option<&Tensor>,
    weights: &ConditionWeights,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.input(hidden.clone());
    let p = g.input(previous.clone());
    let a = adjacency.map(|a| g.input(a.clone()));
    let vars = weights.bind(&mut g, false, &mut Vec::new());
    let c = condition_graph(&mut g, h, p, a, vars)?;
    Ok(g.value(c).clone())
}
