//! Conditional masked autoregressive flow with entity-specific Gaussian
//! targets.
//!
//! Each block is a MADE conditioner producing a shift `μ_t` and log-scale
//! `α_t` for every position `t` from the preceding positions and the
//! (unmasked) condition. The block maps `x` to
//! `z_t = (x_t − μ_t) · exp(−α_t)` with log-determinant `−Σ α_t`.
//! Consecutive blocks are separated by an order reversal.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Log-scales are clamped into `[-ALPHA_LIMIT, ALPHA_LIMIT]`.
pub const ALPHA_LIMIT: f64 = 8.0;
pub const DEFAULT_MADE_HIDDEN: usize = 64;

/// `−½ log(2π)`
pub fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// One MADE conditioner over `T` positions with a hidden layer of width `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeLayer {
    /// `T × m`, masked.
    pub w_in: Tensor,
    /// `(T·d) × m`, unmasked; absent for condition-free flows.
    pub w_cond: Option<Tensor>,
    /// `m`
    pub b_in: Tensor,
    /// `m × 2T`, masked; columns `[0, T)` give `μ`, `[T, 2T)` give `α`.
    pub w_out: Tensor,
    /// `2T`
    pub b_out: Tensor,
    mask_in: Tensor,
    mask_out: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MadeVars {
    pub w_in: Var,
    pub w_cond: Option<Var>,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Autoregressive masks for `window` positions and `hidden` units.
///
/// Hidden unit `j` gets degree `j mod T` and sees inputs `i < degree`;
/// output position `t` sees hidden units with degree `≤ t`. Position 0
/// therefore depends only on the condition and biases.
pub fn made_masks(window: usize, hidden: usize) -> (Tensor, Tensor) {
    let degree = |j: usize| j % window;
    let mut mask_in = Tensor::zeros(&[window, hidden]);
    for i in 0..window {
        for j in 0..hidden {
            if i < degree(j) {
                mask_in.data_mut()[i * hidden + j] = 1.0;
            }
        }
    }
    let mut mask_out = Tensor::zeros(&[hidden, 2 * window]);
    for j in 0..hidden {
        for t in 0..window {
            if degree(j) <= t {
                mask_out.data_mut()[j * 2 * window + t] = 1.0;
                mask_out.data_mut()[j * 2 * window + window + t] = 1.0;
            }
        }
    }
    (mask_in, mask_out)
}

impl MadeLayer {
    /// Input weights uniform in `±1/√fan_in`, output layer zero so the
    /// block starts as the identity map.
    pub fn init(window: usize, cond_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data).unwrap()
        };
        let w_in = uniform(window, hidden);
        let w_cond = (cond_dim > 0).then(|| uniform(cond_dim, hidden));
        let (mask_in, mask_out) = made_masks(window, hidden);
        Self {
            w_in,
            w_cond,
            b_in: Tensor::zeros(&[hidden]),
            w_out: Tensor::zeros(&[hidden, 2 * window]),
            b_out: Tensor::zeros(&[2 * window]),
            mask_in,
            mask_out,
        }
    }

    /// Rebuild from stored weights; masks are derived from the shapes.
    pub fn from_parts(
        w_in: Tensor,
        w_cond: Option<Tensor>,
        b_in: Tensor,
        w_out: Tensor,
        b_out: Tensor,
    ) -> Result<Self> {
        if w_in.ndim() != 2 {
            return Err(Error::shape("made", format!("w_in {:?}", w_in.shape())));
        }
        let (window, hidden) = (w_in.shape()[0], w_in.shape()[1]);
        let ok = b_in.shape() == [hidden]
            && w_out.shape() == [hidden, 2 * window]
            && b_out.shape() == [2 * window]
            && w_cond
                .as_ref()
                .is_none_or(|w| w.ndim() == 2 && w.shape()[1] == hidden);
        if !ok {
            return Err(Error::shape("made", "inconsistent layer shapes"));
        }
        let (mask_in, mask_out) = made_masks(window, hidden);
        Ok(Self {
            w_in,
            w_cond,
            b_in,
            w_out,
            b_out,
            mask_in,
            mask_out,
        })
    }

    pub fn window(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn cond_dim(&self) -> usize {
        self.w_cond.as_ref().map_or(0, |w| w.shape()[0])
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("w_in", &self.w_in)];
        if let Some(w) = &self.w_cond {
            out.push(("w_cond", w));
        }
        out.extend([
            ("b_in", &self.b_in),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_in];
        if let Some(w) = &mut self.w_cond {
            out.push(w);
        }
        out.extend([&mut self.b_in, &mut self.w_out, &mut self.b_out]);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, flat: &mut Vec<Var>) -> MadeVars {
        let mut leaf = |t: &Tensor| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            };
            flat.push(v);
            v
        };
        let w_in = leaf(&self.w_in);
        let w_cond = self.w_cond.as_ref().map(&mut leaf);
        MadeVars {
            w_in,
            w_cond,
            b_in: leaf(&self.b_in),
            w_out: leaf(&self.w_out),
            b_out: leaf(&self.b_out),
        }
    }

    /// `(μ, α)` for inputs `x: [N, T]`, each `[N, T]`; `α` is clamped.
    pub fn conditioner_graph(
        &self,
        g: &mut Graph,
        vars: &MadeVars,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let window = self.window();
        let mut pre = g.masked_matmul(x, vars.w_in, &self.mask_in)?;
        match (cond, vars.w_cond) {
            (Some(c), Some(w)) => {
                let from_cond = g.matmul(c, w)?;
                pre = g.add(pre, from_cond)?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::shape(
                    "made",
                    "condition supplied to a condition-free layer or missing",
                ))
            }
        }
        let pre = g.add_row(pre, vars.b_in)?;
        let act = g.relu(pre)?;
        let out = g.masked_matmul(act, vars.w_out, &self.mask_out)?;
        let out = g.add_row(out, vars.b_out)?;
        let mu = g.slice(out, 1, 0, window)?;
        let alpha = g.slice(out, 1, window, window)?;
        let alpha = g.clamp(alpha, -ALPHA_LIMIT, ALPHA_LIMIT)?;
        Ok((mu, alpha))
    }

    /// `(z, logdet)` with `z: [N, T]`, `logdet: [N]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &MadeVars,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (mu, alpha) = self.conditioner_graph(g, vars, x, cond)?;
        let centered = g.sub(x, mu)?;
        let neg = g.scale(alpha, -1.0)?;
        let inv_scale = g.exp(neg)?;
        let z = g.mul(centered, inv_scale)?;
        let total = g.sum_last(alpha)?;
        let logdet = g.scale(total, -1.0)?;
        Ok((z, logdet))
    }
}

/// Stack of MADE blocks separated by order reversals.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub blocks: Vec<MadeLayer>,
}

impl FlowStack {
    pub fn init(
        window: usize,
        cond_dim: usize,
        hidden: usize,
        n_blocks: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_blocks == 0 || window == 0 || hidden == 0 {
            return Err(Error::Config(
                "flow needs at least one block, window ≥ 1 and hidden ≥ 1".into(),
            ));
        }
        let blocks = (0..n_blocks)
            .map(|_| MadeLayer::init(window, cond_dim, hidden, rng))
            .collect();
        Ok(Self { blocks })
    }

    pub fn window(&self) -> usize {
        self.blocks[0].window()
    }

    pub fn cond_dim(&self) -> usize {
        self.blocks[0].cond_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, flat: &mut Vec<Var>) -> Vec<MadeVars> {
        self.blocks
            .iter()
            .map(|b| b.bind(g, trainable, flat))
            .collect()
    }

    /// `z: [N, T]` and total log-determinant `[N]` for `x: [N, T]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[MadeVars],
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let mut cur = x;
        let mut logdet: Option<Var> = None;
        for (i, (block, v)) in self.blocks.iter().zip(vars).enumerate() {
            let step = (|| -> Result<()> {
                if i > 0 {
                    cur = g.reverse_last(cur)?;
                }
                let (z, ld) = block.forward_graph(g, v, cur, cond)?;
                cur = z;
                logdet = Some(match logdet {
                    Some(acc) => g.add(acc, ld)?,
                    None => ld,
                });
                Ok(())
            })();
            step.map_err(|e| label_block(e, i))?;
        }
        Ok((cur, logdet.expect("at least one block")))
    }

    fn check_inputs(&self, x: &[f64], cond: Option<&[f64]>) -> Result<()> {
        if x.len() != self.window() {
            return Err(Error::shape(
                "flow",
                format!("input length {} for window {}", x.len(), self.window()),
            ));
        }
        match cond {
            Some(c) if c.len() != self.cond_dim() => Err(Error::shape(
                "flow",
                format!("condition length {} for width {}", c.len(), self.cond_dim()),
            )),
            None if self.cond_dim() > 0 => Err(Error::shape("flow", "condition required")),
            _ => Ok(()),
        }
    }

    fn row_inputs(&self, g: &mut Graph, x: &[f64], cond: Option<&[f64]>) -> (Var, Option<Var>) {
        let xv = g.input(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
        let cv = cond.map(|c| g.input(Tensor::new(vec![1, c.len()], c.to_vec()).unwrap()));
        (xv, cv)
    }

    /// Map one window row to latent space; returns `(z, logdet)`.
    pub fn forward(&self, x: &[f64], cond: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
        self.check_inputs(x, cond)?;
        let mut g = Graph::new();
        let (xv, cv) = self.row_inputs(&mut g, x, cond);
        let vars = self.bind(&mut g, false, &mut Vec::new());
        let (z, ld) = self.forward_graph(&mut g, &vars, xv, cv)?;
        Ok((g.value(z).data().to_vec(), g.value(ld).item()))
    }

    /// Output of block `index` alone on `x` (in that block's ordering).
    pub fn block_forward(&self, index: usize, x: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_inputs(x, cond)?;
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Usage(format!("block {index} of {}", self.blocks.len())))?;
        let mut g = Graph::new();
        let (xv, cv) = self.row_inputs(&mut g, x, cond);
        let vars = block.bind(&mut g, false, &mut Vec::new());
        let (z, _) = block
            .forward_graph(&mut g, &vars, xv, cv)
            .map_err(|e| label_block(e, index))?;
        Ok(g.value(z).data().to_vec())
    }

    /// Sequential inversion, one position at a time per block.
    pub fn inverse(&self, z: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_inputs(z, cond)?;
        let window = self.window();
        let mut cur = z.to_vec();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            if i + 1 < self.blocks.len() {
                cur.reverse();
            }
            let mut x = vec![0.0; window];
            for t in 0..window {
                let mut g = Graph::new();
                let (xv, cv) = self.row_inputs(&mut g, &x, cond);
                let vars = block.bind(&mut g, false, &mut Vec::new());
                let (mu, alpha) = block
                    .conditioner_graph(&mut g, &vars, xv, cv)
                    .map_err(|e| label_block(e, i))?;
                x[t] = cur[t] * g.value(alpha).data()[t].exp() + g.value(mu).data()[t];
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("flow block {i} inverse"),
                });
            }
            cur = x;
        }
        Ok(cur)
    }

    /// Exact log-density of `x` under entity `k`'s target, given `cond`.
    pub fn log_likelihood(
        &self,
        x: &[f64],
        cond: Option<&[f64]>,
        targets: &EntityTargets,
        k: usize,
    ) -> Result<f64> {
        let mu = targets.get(k)?;
        let (z, logdet) = self.forward(x, cond)?;
        let sq: f64 = z.iter().map(|v| (v - mu) * (v - mu)).sum();
        Ok(-(x.len() as f64) * half_log_two_pi() - 0.5 * sq + logdet)
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.tensors()
                    .into_iter()
                    .map(move |(name, t)| (format!("{i}.{name}"), t))
            })
            .collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.tensors_mut())
            .collect()
    }
}

fn label_block(e: Error, index: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("flow block {index} ({op})"),
        },
        other => other,
    }
}

/// Frozen per-entity target means; entity `k` targets `N(μ_k·1, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTargets {
    pub mu: Vec<f64>,
}

impl EntityTargets {
    /// One draw from `N(0, 1)` per entity.
    pub fn sample(entities: usize, rng: &mut impl Rng) -> Self {
        Self {
            mu: (0..entities).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }

    pub fn zeros(entities: usize) -> Self {
        Self {
            mu: vec![0.0; entities],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn get(&self, k: usize) -> Result<f64> {
        self.mu.get(k).copied().ok_or_else(|| {
            Error::Usage(format!(
                "entity index {k} out of range for {} entities",
                self.mu.len()
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Single block with `μ = 0`, `α = log 2` everywhere.
    fn halving_stack(window: usize) -> FlowStack {
        let mut stack = FlowStack::init(window, 0, 4, 1, &mut rng(0)).unwrap();
        let b = &mut stack.blocks[0];
        for t in 0..window {
            b.b_out.data_mut()[window + t] = 2f64.ln();
        }
        stack
    }

    #[test]
    fn fresh_stack_is_identity() {
        let stack = FlowStack::init(5, 6, 8, 2, &mut rng(1)).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, -0.4];
        let c = [0.5; 6];
        let (z, ld) = stack.forward(&x, Some(&c)).unwrap();
        let mut rev = x.to_vec();
        rev.reverse();
        assert_eq!(z, rev);
        assert_eq!(ld, 0.0);
        assert_eq!(stack.inverse(&rev, Some(&c)).unwrap(), x.to_vec());
    }

    #[test]
    fn uniform_scaling_halves() {
        let stack = halving_stack(4);
        let x = [2.0, -4.0, 1.0, 0.5];
        let (z, ld) = stack.forward(&x, None).unwrap();
        assert_eq!(z, vec![1.0, -2.0, 0.5, 0.25]);
        assert!((ld + 4.0 * 2f64.ln()).abs() < 1e-14);
        let back = stack.inverse(&[1.0, 1.0, 1.0, 1.0], None).unwrap();
        for v in back {
            assert!((v - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let stack = FlowStack::init(1, 0, 2, 1, &mut rng(2)).unwrap();
        let ll = stack
            .log_likelihood(&[0.0], None, &EntityTargets::zeros(1), 0)
            .unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn mode_of_entity_target() {
        let stack = FlowStack::init(3, 0, 4, 1, &mut rng(3)).unwrap();
        let targets = EntityTargets { mu: vec![0.0, 1.7] };
        let ll = stack.log_likelihood(&[1.7; 3], None, &targets, 1).unwrap();
        assert!((ll + 3.0 * half_log_two_pi()).abs() < 1e-12);
        let off = stack.log_likelihood(&[1.6; 3], None, &targets, 1).unwrap();
        assert!(off < ll);
    }

    #[test]
    fn halving_flow_change_of_variables() {
        let ll = halving_stack(1)
            .log_likelihood(&[0.0], None, &EntityTargets::zeros(1), 0)
            .unwrap();
        assert!((ll - (-half_log_two_pi() - 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn entity_index_out_of_range() {
        let stack = FlowStack::init(2, 0, 4, 1, &mut rng(4)).unwrap();
        let r = stack.log_likelihood(&[0.0, 0.0], None, &EntityTargets::zeros(2), 2);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn masks_are_strictly_autoregressive() {
        let (mi, mo) = made_masks(5, 12);
        // Connectivity input i -> output t is nonzero only for i < t.
        for i in 0..5 {
            for t in 0..5 {
                let path: f64 = (0..12).map(|j| mi.at(&[i, j]) * mo.at(&[j, t])).sum();
                assert_eq!(path > 0.0, i < t, "input {i} output {t}");
            }
        }
    }

    #[test]
    fn wrong_condition_width_is_rejected() {
        let stack = FlowStack::init(3, 4, 4, 1, &mut rng(5)).unwrap();
        assert!(stack.forward(&[0.0; 3], Some(&[0.0; 3])).is_err());
        assert!(stack.forward(&[0.0; 3], None).is_err());
    }
}
