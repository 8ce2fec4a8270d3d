mod common;

use common::{check_pipeline, check_primitive, primitive_cases, rng, tiny_model};
use graphflow::graph::Graph;
use graphflow::trainer::loss_and_grads;
use graphflow::Tensor;

#[test]
fn every_primitive_matches_finite_differences() {
    for (i, c) in primitive_cases().iter().enumerate() {
        let err = check_primitive(c, 100, 1000 + i as u64);
        assert!(err < 1e-6, "{}: relative error {err:e}", c.name);
    }
}

#[test]
fn full_loss_matches_finite_differences() {
    for seed in 0..3 {
        let (model, batch) = tiny_model(seed, false, false);
        for (name, err) in check_pipeline(&model, &batch) {
            assert!(err < 1e-4, "seed {seed}, {name}: relative error {err:e}");
        }
    }
}

#[test]
fn ablated_loss_matches_finite_differences() {
    let (model, batch) = tiny_model(5, true, true);
    for (name, err) in check_pipeline(&model, &batch) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn no_graph_leaves_attention_without_gradient() {
    let (model, batch) = tiny_model(2, true, false);
    let (_, grads) = loss_and_grads(&batch, &model, None).unwrap();
    let names = model.named_params();
    let mut seen = 0;
    for ((name, _), g) in names.iter().zip(&grads) {
        if name.starts_with("attention.") {
            seen += 1;
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} has gradient");
        }
    }
    assert_eq!(seen, 2);
}

#[test]
fn graph_receives_gradient_when_enabled() {
    let (model, batch) = tiny_model(2, false, false);
    let (_, grads) = loss_and_grads(&batch, &model, None).unwrap();
    let names = model.named_params();
    let attention_norm: f64 = names
        .iter()
        .zip(&grads)
        .filter(|((n, _), _)| n.starts_with("attention."))
        .flat_map(|(_, g)| g.data().iter().map(|v| v * v))
        .sum();
    assert!(attention_norm > 0.0);
}

#[test]
fn reused_node_accumulates_gradient() {
    // f(x) = x·x + exp(x) reuses x on two paths.
    let mut r = rng(3);
    for _ in 0..20 {
        let x0 = common::normal_vec(5, &mut r);
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(x0.clone()));
        let sq = g.mul(x, x).unwrap();
        let ex = g.exp(x).unwrap();
        let s = g.add(sq, ex).unwrap();
        let total = g.sum(s).unwrap();
        let grads = g.backward(total).unwrap();
        for (gv, xv) in grads.get(x).unwrap().data().iter().zip(&x0) {
            assert!((gv - (2.0 * xv + xv.exp())).abs() < 1e-12);
        }
    }
}
