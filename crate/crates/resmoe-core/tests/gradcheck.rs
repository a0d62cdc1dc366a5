//! Central finite-difference checks for every differentiable op and for the
//! full sparse MoE forward. Everything runs in f64 where a step of 1e-5
//! leaves ~1e-10 of truncation error, far below the 1e-4 tolerance.

use resmoe_core::constraints::{importance_loss, kl_loss, ConstraintConfig, ConstraintKind};
use resmoe_core::model::{Model, ModelConfig, MoeSettings};
use resmoe_core::moe::{EvalMode, GateConfig};
use resmoe_core::rng::SeedRng;
use resmoe_core::tensor::{Graph, NodeId};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Build the loss from fresh leaves, compare analytic gradients against
/// central differences for every coordinate of every leaf.
fn check<F>(shapes: &[&[usize]], data: &[Vec<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let leaves: Vec<NodeId> = shapes
            .iter()
            .zip(data)
            .map(|(s, d)| g.leaf(s, d.clone(), true).unwrap())
            .collect();
        let loss = build(&mut g, &leaves);
        g.data(loss)[0]
    };

    let mut g: Graph<f64> = Graph::new();
    let leaves: Vec<NodeId> = shapes
        .iter()
        .zip(data)
        .map(|(s, d)| g.leaf(s, d.clone(), true).unwrap())
        .collect();
    let loss = build(&mut g, &leaves);
    assert_eq!(g.shape(loss), &[1]);
    g.backward(loss).unwrap();

    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(*leaf).unwrap().to_vec();
        for j in 0..data[li].len() {
            let mut plus = data.to_vec();
            plus[li][j] += STEP;
            let mut minus = data.to_vec();
            minus[li][j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let denom = analytic[j].abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic[j] - numeric).abs() / denom < TOL,
                "leaf {li} coord {j}: analytic {} vs numeric {}",
                analytic[j],
                numeric
            );
        }
    }
}

fn randn(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn randpos(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(0.2, 2.0)).collect()
}

#[test]
fn elementwise_ops() {
    let mut rng = SeedRng::new(11);
    let a = randn(&mut rng, 12);
    let b = randpos(&mut rng, 12);
    let shapes: &[&[usize]] = &[&[3, 4], &[3, 4]];
    check(shapes, &[a.clone(), b.clone()], |g, l| {
        let y = g.add(l[0], l[1]).unwrap();
        g.sum_all(y).unwrap()
    });
    check(shapes, &[a.clone(), b.clone()], |g, l| {
        let y = g.sub(l[0], l[1]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum_all(y).unwrap()
    });
    check(shapes, &[a.clone(), b.clone()], |g, l| {
        let y = g.mul(l[0], l[1]).unwrap();
        g.sum_all(y).unwrap()
    });
    check(shapes, &[a.clone(), b.clone()], |g, l| {
        let y = g.div(l[0], l[1]).unwrap();
        g.sum_all(y).unwrap()
    });
    check(shapes, &[a, b], |g, l| {
        let y = g.mul_scalar(l[0], -1.7).unwrap();
        let y = g.add(y, l[1]).unwrap();
        g.sum_all(y).unwrap()
    });
}

#[test]
fn relu_away_from_kink() {
    let mut rng = SeedRng::new(12);
    // keep every coordinate at least 10 steps from zero
    let a: Vec<f64> = randn(&mut rng, 20)
        .into_iter()
        .map(|v| if v.abs() < 1e-3 { 0.5 } else { v })
        .collect();
    check(&[&[4, 5]], &[a], |g, l| {
        let y = g.relu(l[0]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum_all(y).unwrap()
    });
}

#[test]
fn log_and_xlnx() {
    let mut rng = SeedRng::new(13);
    let a = randpos(&mut rng, 10);
    check(&[&[10]], &[a.clone()], |g, l| {
        let y = g.log(l[0]).unwrap();
        g.sum_all(y).unwrap()
    });
    check(&[&[10]], &[a], |g, l| {
        let y = g.xlnx(l[0]).unwrap();
        g.sum_all(y).unwrap()
    });
}

#[test]
fn softmax_weighted_sum() {
    let mut rng = SeedRng::new(14);
    let a = randn(&mut rng, 12);
    let w = randn(&mut rng, 12);
    check(&[&[3, 4], &[3, 4]], &[a, w], |g, l| {
        let p = g.softmax(l[0]).unwrap();
        let y = g.mul(p, l[1]).unwrap();
        g.sum_all(y).unwrap()
    });
}

#[test]
fn reductions_and_row_ops() {
    let mut rng = SeedRng::new(15);
    let a = randpos(&mut rng, 12);
    let d = randpos(&mut rng, 3);
    check(&[&[3, 4]], &[a.clone()], |g, l| {
        let cols = g.col_sum(l[0]).unwrap();
        let y = g.mul(cols, cols).unwrap();
        g.sum_all(y).unwrap()
    });
    check(&[&[3, 4]], &[a.clone()], |g, l| {
        let rows = g.row_sum(l[0]).unwrap();
        let y = g.mul(rows, rows).unwrap();
        g.sum_all(y).unwrap()
    });
    check(&[&[3, 4], &[3]], &[a.clone(), d.clone()], |g, l| {
        let y = g.row_div(l[0], l[1]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum_all(y).unwrap()
    });
    check(&[&[3, 4], &[3]], &[a.clone(), d], |g, l| {
        let y = g.row_scale(l[0], l[1]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum_all(y).unwrap()
    });
    check(&[&[3, 4]], &[a.clone()], |g, l| {
        let c = g.col_get(l[0], 2).unwrap();
        let y = g.mul(c, c).unwrap();
        g.sum_all(y).unwrap()
    });
    let s = vec![0.7];
    check(&[&[3, 4], &[1]], &[a, s], |g, l| {
        let y = g.sub_broadcast(l[0], l[1]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum_all(y).unwrap()
    });
}

#[test]
fn linear_layer() {
    let mut rng = SeedRng::new(16);
    let x = randn(&mut rng, 3 * 5);
    let w = randn(&mut rng, 2 * 5);
    let b = randn(&mut rng, 2);
    check(&[&[3, 5], &[2, 5], &[2]], &[x, w, b], |g, l| {
        let y = g.linear(l[0], l[1], Some(l[2])).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum_all(y).unwrap()
    });
}

#[test]
fn conv_layer_strided_padded() {
    let mut rng = SeedRng::new(17);
    let x = randn(&mut rng, 2 * 3 * 5 * 5);
    let w = randn(&mut rng, 4 * 3 * 3 * 3);
    let b = randn(&mut rng, 4);
    check(
        &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
        &[x, w, b],
        |g, l| {
            let y = g.conv2d(l[0], l[1], Some(l[2]), 2, 1).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum_all(y).unwrap()
        },
    );
}

#[test]
fn global_average_pool() {
    let mut rng = SeedRng::new(18);
    let x = randn(&mut rng, 2 * 3 * 4 * 4);
    check(&[&[2, 3, 4, 4]], &[x], |g, l| {
        let y = g.global_avg_pool(l[0]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.sum_all(y).unwrap()
    });
}

#[test]
fn batchnorm_train_and_eval() {
    let mut rng = SeedRng::new(19);
    let x = randn(&mut rng, 3 * 2 * 3 * 3);
    let gamma = randpos(&mut rng, 2);
    let beta = randn(&mut rng, 2);
    for training in [true, false] {
        check(
            &[&[3, 2, 3, 3], &[2], &[2]],
            &[x.clone(), gamma.clone(), beta.clone()],
            |g, l| {
                // fresh stats per evaluation; eval mode differentiates
                // through frozen statistics
                let mut mean = vec![0.1, -0.2];
                let mut var = vec![1.3, 0.8];
                let y = g
                    .batchnorm2d(l[0], l[1], l[2], &mut mean, &mut var, 0.1, 1e-5, training)
                    .unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum_all(y).unwrap()
            },
        );
    }
}

#[test]
fn cross_entropy_loss() {
    let mut rng = SeedRng::new(20);
    let logits = randn(&mut rng, 4 * 5);
    let labels = [3usize, 0, 4, 1];
    check(&[&[4, 5]], &[logits], |g, l| {
        g.cross_entropy(l[0], &labels).unwrap()
    });
}

#[test]
fn auxiliary_losses() {
    let mut rng = SeedRng::new(21);
    let imp = randpos(&mut rng, 4);
    check(&[&[4]], &[imp.clone()], |g, l| {
        importance_loss(g, l[0], 0.5).unwrap()
    });
    check(&[&[4]], &[imp], |g, l| kl_loss(g, l[0], 8, 0.5).unwrap());
}

/// End-to-end: cross entropy + both soft losses through the sparse MoE
/// model, gradients checked by perturbing raw parameters and re-running the
/// whole forward. Evaluation clones the model so batchnorm running stats
/// never leak between probes.
#[test]
fn full_sparse_moe_model() {
    let cfg = ModelConfig {
        num_classes: 3,
        input_channels: 3,
        input_resolution: (8, 8),
        width_divisor: 16,
        moe: Some(MoeSettings {
            position: 3,
            num_experts: 4,
            k: 2,
            gate: GateConfig::gap_fc(4),
            constraint: ConstraintConfig::new(ConstraintKind::ImportanceLoss),
            expert_bottleneck_ratio: Some(0.5),
        }),
    };
    let template: Model<f64> = Model::build(&cfg, 99).unwrap();
    let mut rng = SeedRng::new(7);
    let batch = 4;
    let input = randn(&mut rng, batch * 3 * 8 * 8);
    let labels = [0usize, 1, 2, 1];

    let eval = |params: &Model<f64>| -> f64 {
        let mut m = params.clone();
        let mut pass = m.forward(&input, batch, true, EvalMode::Sparse, None).unwrap();
        let gate = pass.gate.clone().unwrap();
        let ce = pass.graph.cross_entropy(pass.logits, &labels).unwrap();
        let li = importance_loss(&mut pass.graph, gate.importance_node, 0.5).unwrap();
        let lk = kl_loss(&mut pass.graph, gate.importance_node, batch, 0.5).unwrap();
        let t = pass.graph.add(ce, li).unwrap();
        let loss = pass.graph.add(t, lk).unwrap();
        pass.graph.data(loss)[0]
    };

    // the base run also yields analytic gradients
    let mut base = template.clone();
    let mut pass = base
        .forward(&input, batch, true, EvalMode::Sparse, None)
        .unwrap();
    let gate = pass.gate.clone().unwrap();
    // top-k selections must be stable under the probe step
    for b in 0..batch {
        let row = &pass.graph.data(gate.dense)[b * 4..(b + 1) * 4];
        let mut sorted = row.to_vec();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert!(
            sorted[1] - sorted[2] > 1e-4,
            "top-k margin too small for sample {b}: {row:?}"
        );
    }
    let ce = pass.graph.cross_entropy(pass.logits, &labels).unwrap();
    let li = importance_loss(&mut pass.graph, gate.importance_node, 0.5).unwrap();
    let lk = kl_loss(&mut pass.graph, gate.importance_node, batch, 0.5).unwrap();
    let t = pass.graph.add(ce, li).unwrap();
    let loss = pass.graph.add(t, lk).unwrap();
    pass.graph.backward(loss).unwrap();

    // probe ~40 random coordinates spread over every tensor kind
    let mut probe_rng = SeedRng::new(123);
    let num_tensors = template.params.len();
    let mut checked = 0;
    for _ in 0..40 {
        let ti = probe_rng.uniform_usize(num_tensors);
        let n = template.params.tensors[ti].data.len();
        let j = probe_rng.uniform_usize(n);
        let analytic = match pass.param_grad(ti) {
            Some(g) => g[j],
            None => 0.0,
        };
        let mut plus = template.clone();
        plus.params.tensors[ti].data[j] += STEP;
        let mut minus = template.clone();
        minus.params.tensors[ti].data[j] -= STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        let denom = analytic.abs().max(numeric.abs()).max(1.0);
        assert!(
            (analytic - numeric).abs() / denom < TOL,
            "tensor {} ({}) coord {j}: analytic {analytic} vs numeric {numeric}",
            ti,
            template.params.tensors[ti].name
        );
        checked += 1;
    }
    assert!(checked >= 20);
}
