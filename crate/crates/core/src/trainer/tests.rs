use super::*;
use crate::graph::{Node, WEIGHT};
use crate::tensor::{ConvSpec, DType, PoolSpec, Shape};
use crate::zoo::{init_weights, randomize_bn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

/// conv→bn→relu feeding both a conv→bn + 1×1-shortcut add and a concat,
/// then maxpool, global pool and fc. Touches every op the tape handles.
fn micro_net(dtype: DType, seed: u64) -> Graph {
    let mut g = Graph::new("x", Shape::new(1, 3, 6, 6), dtype);
    g.add(Node::conv(
        "c1",
        "x",
        ConvSpec::new(3, 3, 3, 1, 1).with_bias(true),
        dtype,
    ))
    .unwrap();
    g.add(Node::bn("b1", "c1", 3, dtype, 1e-5)).unwrap();
    g.add(Node::new("r1", Op::Relu, &["b1"])).unwrap();
    g.add(Node::conv("c2", "r1", ConvSpec::new(3, 3, 3, 1, 1), dtype))
        .unwrap();
    g.add(Node::bn("b2", "c2", 3, dtype, 1e-5)).unwrap();
    g.add(Node::conv("sc", "x", ConvSpec::new(3, 3, 1, 1, 0), dtype))
        .unwrap();
    g.add(Node::new("sum", Op::Add, &["b2", "sc"])).unwrap();
    g.add(Node::new("cat", Op::Concat, &["sum", "r1"])).unwrap();
    g.add(Node::new(
        "pool",
        Op::MaxPool(PoolSpec::new(2, 2, 0)),
        &["cat"],
    ))
    .unwrap();
    g.add(Node::new("gap", Op::GAvgPool, &["pool"])).unwrap();
    g.add(Node::fc("fc", "gap", 6, 4, dtype)).unwrap();
    g.add(Node::new("y", Op::Output, &["fc"])).unwrap();
    let mut g = randomize_bn(init_weights(g, seed), seed + 1);
    // Nonzero biases so their gradients are exercised away from zero.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for id in ["c1", "fc"] {
        let b = g.get_mut(id).unwrap().param_mut("bias").unwrap();
        let v: Vec<f64> = (0..b.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        *b = Tensor::from_f64(b.shape(), dtype, &v).unwrap();
    }
    g
}

fn batch(dtype: DType, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(n, 3, 6, 6);
    let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| (i * 3 + 1) % 4).collect();
    (Tensor::from_f64(shape, dtype, &v).unwrap(), labels)
}

fn perturbed(g: &Graph, key: &str, i: usize, delta: f64) -> Graph {
    let (node, name) = key.rsplit_once('/').unwrap();
    let mut g = g.clone();
    let t = g.get_mut(node).unwrap().param_mut(name).unwrap();
    let mut v = t.to_f64_vec();
    v[i] += delta;
    *t = Tensor::from_f64(t.shape(), t.dtype(), &v).unwrap();
    g
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = 1e-6 + 1e-5 * numeric.abs();
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

fn check_against_finite_differences(g: &Graph, x: &Tensor, y: &[usize]) {
    let h = 1e-6;
    let back = loss_and_gradients(g, x, y).unwrap();
    assert_eq!(back.grads.len(), trainable_params(g).len());
    for (key, grad) in &back.grads {
        let (node, name) = key.rsplit_once('/').unwrap();
        let n = g.get(node).unwrap();
        let frozen = if name == "gamma" || name == "beta" {
            n.frozen_channels(grad.len())
        } else {
            vec![false; grad.len()]
        };
        let gv = grad.to_f64_vec();
        for (i, &a) in gv.iter().enumerate() {
            if frozen[i] {
                // Frozen affine parameters are not trainable; their gradient is pinned to zero.
                assert_eq!(a, 0.0, "{key}[{i}]");
                continue;
            }
            let up = training_loss(&perturbed(g, key, i, h), x, y).unwrap();
            let down = training_loss(&perturbed(g, key, i, -h), x, y).unwrap();
            assert_close(a, (up - down) / (2.0 * h), &format!("{key}[{i}]"));
        }
    }
    let xv = x.to_f64_vec();
    let gx = back.input_grad.to_f64_vec();
    for i in (0..xv.len()).step_by(7) {
        let shift = |d: f64| {
            let mut v = xv.clone();
            v[i] += d;
            training_loss(g, &Tensor::from_f64(x.shape(), x.dtype(), &v).unwrap(), y).unwrap()
        };
        assert_close(
            gx[i],
            (shift(h) - shift(-h)) / (2.0 * h),
            &format!("input[{i}]"),
        );
    }
}

#[test]
fn fc_cross_entropy_matches_closed_form() {
    let mut g = Graph::new("x", Shape::new(1, 3, 1, 1), DType::F64);
    g.add(Node::fc("fc", "x", 3, 2, DType::F64)).unwrap();
    g.add(Node::new("y", Op::Output, &["fc"])).unwrap();
    let w = [0.5, -1.0, 2.0, 0.25, 0.0, -0.5];
    let b = [0.1, -0.2];
    {
        let n = g.get_mut("fc").unwrap();
        n.params.insert(
            WEIGHT.into(),
            Tensor::from_f64(Shape::new(2, 3, 1, 1), DType::F64, &w).unwrap(),
        );
        n.params.insert(
            "bias".into(),
            Tensor::from_f64(Shape::vector(2), DType::F64, &b).unwrap(),
        );
    }
    let xs = [[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
    let labels = [0usize, 1];
    let x = Tensor::from_f64(Shape::new(2, 3, 1, 1), DType::F64, &xs.concat()).unwrap();
    let back = loss_and_gradients(&g, &x, &labels).unwrap();

    let mut loss = 0.0;
    let mut dw = [0.0; 6];
    let mut db = [0.0; 2];
    for (s, row) in xs.iter().enumerate() {
        let z: Vec<f64> = (0..2)
            .map(|o| (0..3).map(|f| w[o * 3 + f] * row[f]).sum::<f64>() + b[o])
            .collect();
        let lse = (z[0].exp() + z[1].exp()).ln();
        loss += lse - z[labels[s]];
        for o in 0..2 {
            let d = ((z[o] - lse).exp() - (o == labels[s]) as u8 as f64) / 2.0;
            db[o] += d;
            for f in 0..3 {
                dw[o * 3 + f] += d * row[f];
            }
        }
    }
    assert!((back.loss - loss / 2.0).abs() < 1e-14);
    for (a, e) in back.grads["fc/weight"].to_f64_vec().iter().zip(dw) {
        assert!((a - e).abs() < 1e-14);
    }
    for (a, e) in back.grads["fc/bias"].to_f64_vec().iter().zip(db) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn uniform_logits_give_frequency_bias_gradient() {
    let mut g = Graph::new("x", Shape::new(1, 2, 1, 1), DType::F64);
    g.add(Node::fc("fc", "x", 2, 4, DType::F64)).unwrap();
    g.add(Node::new("y", Op::Output, &["fc"])).unwrap();
    let x = Tensor::full(Shape::new(5, 2, 1, 1), DType::F64, 0.3);
    let labels = [0, 0, 1, 3, 0];
    let back = loss_and_gradients(&g, &x, &labels).unwrap();
    assert!((back.loss - 4f64.ln()).abs() < 1e-15);
    let expect = [0.25 - 0.6, 0.25 - 0.2, 0.25, 0.25 - 0.2];
    for (a, e) in back.grads["fc/bias"].to_f64_vec().iter().zip(expect) {
        assert!((a - e).abs() < 1e-15);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in [1, 2] {
        let g = micro_net(DType::F64, seed);
        let (x, y) = batch(DType::F64, 3, seed + 10);
        check_against_finite_differences(&g, &x, &y);
    }
}

#[test]
fn frozen_channels_match_finite_differences() {
    let mut g = micro_net(DType::F64, 3);
    for id in ["b1", "b2"] {
        if let Op::Bn { frozen, .. } = &mut g.get_mut(id).unwrap().op {
            *frozen = vec![false, true, false];
        }
    }
    let (x, y) = batch(DType::F64, 3, 13);
    check_against_finite_differences(&g, &x, &y);
    let back = loss_and_gradients(&g, &x, &y).unwrap();
    assert_eq!(back.grads["b1/gamma"].to_f64_vec()[1], 0.0);
    assert_eq!(back.grads["b2/beta"].to_f64_vec()[1], 0.0);
}

#[test]
fn batch_norm_makes_loss_scale_invariant() {
    let mut g = micro_net(DType::F64, 4);
    // The invariance is exact only as ε → 0.
    if let Op::Bn { eps, .. } = &mut g.get_mut("b2").unwrap().op {
        *eps = 1e-300;
    }
    let (x, y) = batch(DType::F64, 4, 14);
    let mut scaled = g.clone();
    let w = scaled.get_mut("c2").unwrap().param_mut(WEIGHT).unwrap();
    let v: Vec<f64> = w.to_f64_vec().iter().map(|v| v * 3.0).collect();
    *w = Tensor::from_f64(w.shape(), DType::F64, &v).unwrap();
    let a = training_loss(&g, &x, &y).unwrap();
    let b = training_loss(&scaled, &x, &y).unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn training_batch_norm_normalizes_with_batch_statistics() {
    let mut g = Graph::new("x", Shape::new(1, 3, 4, 4), DType::F64);
    g.add(Node::bn("bn", "x", 3, DType::F64, 1e-12)).unwrap();
    g.add(Node::new("y", Op::Output, &["bn"])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shape = Shape::new(5, 3, 4, 4);
    let v: Vec<f64> = (0..shape.len())
        .map(|i| rng.gen_range(-2.0..2.0) + (i % 3) as f64 * 4.0)
        .collect();
    let y = training_forward(&g, &Tensor::from_f64(shape, DType::F64, &v).unwrap())
        .unwrap()
        .to_f64_vec();
    for c in 0..3 {
        let vals: Vec<f64> = (0..5)
            .flat_map(|n| y[(n * 3 + c) * 16..][..16].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(
            mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5,
            "channel {c}: {mean} {var}"
        );
    }
}

#[test]
fn running_statistics_update() {
    let mut g = micro_net(DType::F64, 5);
    if let Op::Bn { frozen, .. } = &mut g.get_mut("b1").unwrap().op {
        *frozen = vec![true, false, false];
    }
    let before = g.get("b1").unwrap().bn_params().unwrap();
    let (x, y) = batch(DType::F64, 4, 15);
    let back = forward_backward(&mut g, &x, &y, 0.1).unwrap();
    let after = g.get("b1").unwrap().bn_params().unwrap();
    let (mb, vb) = &back.batch_stats["b1"];
    let count = 4.0 * 36.0;
    let (m0, v0) = (before.mean.to_f64_vec(), before.var.to_f64_vec());
    let (m1, v1) = (after.mean.to_f64_vec(), after.var.to_f64_vec());
    assert_eq!((m1[0], v1[0]), (m0[0], v0[0]));
    for c in 1..3 {
        assert!((m1[c] - (0.9 * m0[c] + 0.1 * mb[c])).abs() < 1e-15);
        assert!((v1[c] - (0.9 * v0[c] + 0.1 * vb[c] * count / (count - 1.0))).abs() < 1e-14);
    }
}

#[test]
fn sgd_step_rule() {
    let g0 = micro_net(DType::F64, 6);
    let (x, y) = batch(DType::F64, 2, 16);
    let back = loss_and_gradients(&g0, &x, &y).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut g = g0.clone();
    let mut vel = BTreeMap::new();
    sgd_step(&mut g, &back.grads, &mut vel, &cfg).unwrap();
    let p0 = trainable_params(&g0);
    let p1 = trainable_params(&g);
    for (key, grad) in &back.grads {
        for ((a, b), d) in p0[key]
            .to_f64_vec()
            .iter()
            .zip(p1[key].to_f64_vec())
            .zip(grad.to_f64_vec())
        {
            assert_eq!(b, a - 0.1 * d, "{key}");
        }
    }

    // Two steps with momentum and decay against the recurrence by hand.
    let cfg = TrainConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let mut g = g0.clone();
    let mut vel = BTreeMap::new();
    sgd_step(&mut g, &back.grads, &mut vel, &cfg).unwrap();
    sgd_step(&mut g, &back.grads, &mut vel, &cfg).unwrap();
    let key = "c1/weight";
    let p = p0[key].to_f64_vec()[0];
    let d = back.grads[key].to_f64_vec()[0];
    let v1 = d + 0.01 * p;
    let q = p - 0.1 * v1;
    let v2 = 0.9 * v1 + d + 0.01 * q;
    let expect = q - 0.1 * v2;
    assert!((trainable_params(&g)[key].to_f64_vec()[0] - expect).abs() < 1e-15);
}

#[test]
fn frozen_channels_never_move() {
    let mut g = micro_net(DType::F32, 7);
    if let Op::Bn { frozen, .. } = &mut g.get_mut("b2").unwrap().op {
        *frozen = vec![false, false, true];
    }
    let before = g.get("b2").unwrap().bn_params().unwrap();
    let mut spec = SynthSpec::new(3);
    spec.channels = 3;
    spec.side = 6;
    spec.classes = 4;
    spec.train = 24;
    let data = spec.generate().unwrap();
    let mut t = Trainer::new(TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    })
    .unwrap();
    for e in 0..3 {
        t.train_epoch(&mut g, &data.train, e).unwrap();
    }
    let after = g.get("b2").unwrap().bn_params().unwrap();
    for (a, b) in [
        (&before.gamma, &after.gamma),
        (&before.beta, &after.beta),
        (&before.mean, &after.mean),
        (&before.var, &after.var),
    ] {
        let (a, b) = (a.to_f64_vec(), b.to_f64_vec());
        assert_eq!(a[2].to_bits(), b[2].to_bits());
        assert_ne!(a[0], b[0]);
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let mut spec = SynthSpec::new(11);
    spec.channels = 3;
    spec.side = 6;
    spec.classes = 4;
    spec.train = 64;
    spec.test = 32;
    let data = spec.generate().unwrap();
    let run = || {
        let mut g = micro_net(DType::F32, 8);
        let mut t = Trainer::new(TrainConfig {
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        })
        .unwrap();
        let losses: Vec<f64> = (0..8)
            .map(|e| t.train_epoch(&mut g, &data.train, e).unwrap())
            .collect();
        (g, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let acc = evaluate(&a, &data.test).unwrap();
    assert!(la[7] < la[0] * 0.5 && acc > 0.8, "{la:?} accuracy {acc}");
}

#[test]
fn rejects_bad_batches() {
    let g = micro_net(DType::F64, 9);
    let (x, _) = batch(DType::F64, 2, 1);
    assert!(matches!(
        loss_and_gradients(&g, &x, &[0, 4]),
        Err(TrainError::Label {
            label: 4,
            classes: 4
        })
    ));
    assert!(matches!(
        loss_and_gradients(&g, &x, &[0]),
        Err(TrainError::Shape(_))
    ));
    assert!(loss_and_gradients(&g, &x.cast(DType::F32), &[0, 1]).is_err());
    assert!(Trainer::new(TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    })
    .is_err());
    assert!(Trainer::new(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    })
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn epoch_order_is_a_permutation(seed in any::<u64>(), len in 0usize..200, epoch in 0usize..50) {
        let t = Trainer::new(TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        let mut o = t.epoch_order(len, epoch);
        prop_assert_eq!(&o, &t.epoch_order(len, epoch));
        o.sort_unstable();
        prop_assert_eq!(o, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero(seed in any::<u64>()) {
        let g = micro_net(DType::F64, seed % 1000);
        let (x, y) = batch(DType::F64, 2, seed);
        let back = loss_and_gradients(&g, &x, &y).unwrap();
        let db: f64 = back.grads["fc/bias"].to_f64_vec().iter().sum();
        prop_assert!(db.abs() < 1e-12);
        prop_assert!(back.loss > 0.0 && back.loss.is_finite());
    }
}
