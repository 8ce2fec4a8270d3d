#![allow(dead_code)]

use graphflow::adam::{AdamConfig, AdamState};
use graphflow::data::{NormStats, WindowBatch};
use graphflow::flow::{EntityTargets, FlowStack};
use graphflow::graph::{Graph, Var};
use graphflow::trainer::{loss, loss_and_grads, TrainConfig};
use graphflow::{FlowModel, Result, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::new(shape.to_vec(), normal_vec(shape.iter().product(), rng)).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Give every flow block random output weights so `μ` and `α` depend on
/// their inputs; a fresh stack is the identity.
pub fn randomize_flow(stack: &mut FlowStack, scale: f64, rng: &mut impl Rng) {
    for block in &mut stack.blocks {
        for v in block.w_out.data_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        for v in block.b_out.data_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// How to draw one input element.
#[derive(Clone, Copy)]
pub enum Domain {
    Normal,
    Positive,
    /// Normal, but at least 0.05 away from every listed point.
    AwayFrom(&'static [f64]),
}

impl Domain {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            Domain::Normal => rng.sample(StandardNormal),
            Domain::Positive => rng.gen_range(0.5..2.0),
            Domain::AwayFrom(points) => loop {
                let v: f64 = rng.sample(StandardNormal);
                if points.iter().all(|p| (v - p).abs() > 0.05) {
                    break v;
                }
            },
        }
    }
}

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Domain,
    pub build: Build,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    domain: Domain,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        domain,
        build: Box::new(build),
    }
}

/// One case per differentiable primitive.
pub fn primitive_cases() -> Vec<OpCase> {
    let mut mask_rng = rng(99);
    let mask = Tensor::new(
        vec![4, 5],
        (0..20)
            .map(|_| f64::from(mask_rng.gen_bool(0.5) as u8))
            .collect(),
    )
    .unwrap();
    vec![
        case("matmul", &[&[2, 3, 4], &[4, 5]], Domain::Normal, |g, v| {
            g.matmul(v[0], v[1])
        }),
        case(
            "masked_matmul",
            &[&[3, 4], &[4, 5]],
            Domain::Normal,
            move |g, v| g.masked_matmul(v[0], v[1], &mask),
        ),
        case(
            "batch_matmul",
            &[&[2, 3, 4], &[2, 4, 2]],
            Domain::Normal,
            |g, v| g.batch_matmul(v[0], v[1]),
        ),
        case("transpose_last", &[&[2, 3, 4]], Domain::Normal, |g, v| {
            g.transpose_last(v[0])
        }),
        case("add", &[&[3, 4], &[3, 4]], Domain::Normal, |g, v| {
            g.add(v[0], v[1])
        }),
        case("sub", &[&[3, 4], &[3, 4]], Domain::Normal, |g, v| {
            g.sub(v[0], v[1])
        }),
        case("mul", &[&[3, 4], &[3, 4]], Domain::Normal, |g, v| {
            g.mul(v[0], v[1])
        }),
        case("add_row", &[&[2, 3, 4], &[4]], Domain::Normal, |g, v| {
            g.add_row(v[0], v[1])
        }),
        case("scale", &[&[3, 4]], Domain::Normal, |g, v| {
            g.scale(v[0], -1.7)
        }),
        case("exp", &[&[3, 4]], Domain::Normal, |g, v| g.exp(v[0])),
        case("log", &[&[3, 4]], Domain::Positive, |g, v| g.log(v[0])),
        case("tanh", &[&[3, 4]], Domain::Normal, |g, v| g.tanh(v[0])),
        case("sigmoid", &[&[3, 4]], Domain::Normal, |g, v| {
            g.sigmoid(v[0])
        }),
        case("relu", &[&[3, 4]], Domain::AwayFrom(&[0.0]), |g, v| {
            g.relu(v[0])
        }),
        case("square", &[&[3, 4]], Domain::Normal, |g, v| g.square(v[0])),
        case(
            "clamp",
            &[&[3, 4]],
            Domain::AwayFrom(&[-0.5, 0.5]),
            |g, v| g.clamp(v[0], -0.5, 0.5),
        ),
        case("softmax", &[&[2, 3, 4]], Domain::Normal, |g, v| {
            g.softmax(v[0])
        }),
        case("concat", &[&[2, 3], &[2, 2]], Domain::Normal, |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        case("slice", &[&[2, 5, 3]], Domain::Normal, |g, v| {
            g.slice(v[0], 1, 1, 3)
        }),
        case("reshape", &[&[2, 6]], Domain::Normal, |g, v| {
            g.reshape(v[0], &[3, 4])
        }),
        case("reverse_last", &[&[3, 4]], Domain::Normal, |g, v| {
            g.reverse_last(v[0])
        }),
        case("sum", &[&[3, 4]], Domain::Normal, |g, v| g.sum(v[0])),
        case("mean", &[&[3, 4]], Domain::Normal, |g, v| g.mean(v[0])),
        case("sum_last", &[&[2, 3, 4]], Domain::Normal, |g, v| {
            g.sum_last(v[0])
        }),
    ]
}

/// `Σ op(inputs) ⊙ w` for a fixed random `w`, so every output element
/// receives a different upstream gradient.
fn weighted_output(c: &OpCase, g: &mut Graph, vars: &[Var], weights: &Tensor) -> Result<Var> {
    let out = (c.build)(g, vars)?;
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Largest relative error over `trials` random inputs.
pub fn check_primitive(c: &OpCase, trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = c
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(
                    s.clone(),
                    (0..n).map(|_| c.domain.sample(&mut rng)).collect(),
                )
                .unwrap()
            })
            .collect();
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = (c.build)(&mut g, &vars).unwrap();
            g.shape(out).to_vec()
        };
        let weights = normal_tensor(&out_shape, &mut rng);
        let eval = |inputs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let s = weighted_output(c, &mut g, &vars, &weights).unwrap();
            g.value(s).item()
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let s = weighted_output(c, &mut g, &vars, &weights).unwrap();
        let grads = g.backward(s).unwrap();

        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], t.shape());
            let mut numeric = vec![0.0; t.numel()];
            for (e, slot) in numeric.iter_mut().enumerate() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[e] -= h;
                *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            worst = worst.max(rel_err(analytic.data(), &numeric));
        }
    }
    worst
}

/// K=2, T=4, h=3, one flow block, with random flow output weights.
pub fn tiny_model(seed: u64, no_graph: bool, single_target: bool) -> (FlowModel, WindowBatch) {
    let config = TrainConfig {
        window: 4,
        stride: 2,
        batch_size: 8,
        n_blocks: 1,
        hidden: 3,
        cond_dim: 2,
        made_hidden: 6,
        seed,
        no_graph,
        single_target,
        ..TrainConfig::default()
    };
    let norm = NormStats {
        mean: vec![0.0; 2],
        std: vec![1.0; 2],
        fit_range: 0..10,
    };
    let mut model = FlowModel::init(&config, vec!["a".into(), "b".into()], norm).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    randomize_flow(&mut model.flow, 0.3, &mut r);
    let batch = WindowBatch {
        values: normal_tensor(&[3, 2, 4], &mut r),
        starts: vec![0, 2, 4],
        labels: None,
    };
    (model, batch)
}

/// Relative error of the full eval-mode loss gradient, per parameter
/// tensor, as `(name, error)`.
pub fn check_pipeline(model: &FlowModel, batch: &WindowBatch) -> Vec<(String, f64)> {
    let h = 1e-5;
    let (_, grads) = loss_and_grads(batch, model, None).unwrap();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (p, name) in names.iter().enumerate() {
        let n = grads[p].numel();
        let mut numeric = vec![0.0; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[e] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[e] -= h;
            *slot = (loss(batch, &plus).unwrap() - loss(batch, &minus).unwrap()) / (2.0 * h);
        }
        out.push((name.clone(), rel_err(grads[p].data(), &numeric)));
    }
    out
}

/// Fit a condition-free T=1 flow to samples by maximum likelihood.
pub fn train_one_dimensional_flow(seed: u64) -> FlowStack {
    let mut r = rng(seed);
    let mut stack = FlowStack::init(1, 0, 8, 2, &mut r).unwrap();
    let data: Vec<f64> = (0..512)
        .map(|_| 1.5 + 0.6 * r.sample::<f64, _>(StandardNormal))
        .collect();
    let x = Tensor::new(vec![data.len(), 1], data).unwrap();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        stack
            .blocks
            .iter()
            .flat_map(|b| [&b.w_in, &b.b_in, &b.w_out, &b.b_out]),
    );
    for _ in 0..300 {
        let mut g = Graph::new();
        let mut flat = Vec::new();
        let vars = stack.bind(&mut g, true, &mut flat);
        let xv = g.input(x.clone());
        let (z, logdet) = stack.forward_graph(&mut g, &vars, xv, None).unwrap();
        let sq = g.square(z).unwrap();
        let sq = g.sum_last(sq).unwrap();
        let half = g.scale(sq, 0.5).unwrap();
        let rows = g.sub(half, logdet).unwrap();
        let l = g.mean(rows).unwrap();
        let grads = g.backward(l).unwrap();
        let gs: Vec<Tensor> = flat
            .iter()
            .map(|&v| grads.get_or_zeros(v, g.shape(v)))
            .collect();
        let mut params: Vec<&mut Tensor> = stack
            .blocks
            .iter_mut()
            .flat_map(|b| [&mut b.w_in, &mut b.b_in, &mut b.w_out, &mut b.b_out])
            .collect();
        adam.step(&mut params, &gs).unwrap();
    }
    stack
}

/// Central-difference Jacobian `∂z/∂x`, row `t` holding `∂z_t/∂x_·`.
pub fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut plus = x.to_vec();
        plus[j] += h;
        let mut minus = x.to_vec();
        minus[j] -= h;
        let (zp, zm) = (f(&plus), f(&minus));
        for i in 0..n {
            jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Trapezoid rule for the density of a condition-free T=1 flow with a
/// standard-normal target over [−10, 10], 10k intervals.
pub fn integrate_density(stack: &FlowStack) -> f64 {
    let targets = EntityTargets::zeros(1);
    let density = |x: f64| stack.log_likelihood(&[x], None, &targets, 0).unwrap().exp();
    let n = 10_000;
    let h = 20.0 / n as f64;
    let mut total = 0.5 * (density(-10.0) + density(10.0));
    for i in 1..n {
        total += density(-10.0 + i as f64 * h);
    }
    total * h
}
