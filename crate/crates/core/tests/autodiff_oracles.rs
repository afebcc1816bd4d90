//! Independent oracles for the autodiff substrate: naive loop convolution and
//! dense layers, and central finite differences for every differentiable op.

mod common;

use common::oracles::*;
use gaitdis_core::autodiff::{
    backprop, conv1d, dense, guided_backprop_gradients, Graph, Mode, NodeId, ParamStore,
    RunningStats, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn conv_matches_naive_oracle_fixed_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[3, 32]);
    let w = random_tensor(&mut rng, &[4, 3, 5]);
    let y = conv1d(&x, &w, 2, 2).unwrap();
    let oracle = naive_conv(&x, &w, 2, 2);
    assert_eq!(y.shape(), &[4, 16]);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn conv_matches_naive_oracle_100_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let c_in = rng.gen_range(1..6);
        let c_out = rng.gen_range(1..6);
        let k = rng.gen_range(1..8);
        let stride = rng.gen_range(1..4);
        let pad = rng.gen_range(0..4);
        let t = rng.gen_range(k.max(1)..40);
        let x = random_tensor(&mut rng, &[c_in, t]);
        let w = random_tensor(&mut rng, &[c_out, c_in, k]);
        let y = conv1d(&x, &w, stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, stride, pad);
        assert_eq!(y.len(), oracle.len());
        let err = y
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "conv error {err}");
    }
}

#[test]
fn dense_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[6]);
    let w = random_tensor(&mut rng, &[4, 6]);
    let b = random_tensor(&mut rng, &[4]);
    let y = dense(&x, &w, &b).unwrap();
    for m in 0..4 {
        let mut acc = b.data()[m];
        for n in 0..6 {
            acc += w.data()[m * 6 + n] * x.data()[n];
        }
        assert!((y.data()[m] - acc).abs() <= 1e-12);
    }
}

#[test]
fn fd_conv1d_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let leaves = vec![
        random_tensor(&mut rng, &[2, 3, 11]),
        random_tensor(&mut rng, &[4, 3, 3]),
    ];
    let build = |g: &mut Graph, ids: &[NodeId]| {
        let y = g.conv1d(ids[0], ids[1], 2, 1).unwrap();
        contract(g, y, 11)
    };
    assert!(max_fd_relative_error(&build, &leaves) < 1e-4);
}

#[test]
fn fd_dense_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let leaves = vec![
        random_tensor(&mut rng, &[3, 5]),
        random_tensor(&mut rng, &[4, 5]),
        random_tensor(&mut rng, &[4]),
    ];
    let build = |g: &mut Graph, ids: &[NodeId]| {
        let y = g.dense(ids[0], ids[1], ids[2]).unwrap();
        contract(g, y, 13)
    };
    assert!(max_fd_relative_error(&build, &leaves) < 1e-4);
}

#[test]
fn fd_relu_gradient_is_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let leaves = vec![random_away_from_zero(&mut rng, &[20])];
    let build = |g: &mut Graph, ids: &[NodeId]| {
        let y = g.relu(ids[0]).unwrap();
        contract(g, y, 15)
    };
    assert!(max_fd_relative_error(&build, &leaves) < 1e-4);

    // derivative of sum(relu(x)) is exactly 1 for x > 0 and 0 for x < 0
    let mut g = Graph::new();
    let x = g.input(leaves[0].clone()).unwrap();
    let y = g.relu(x).unwrap();
    let tape = backprop(&g, y, &Tensor::filled(&[20], 1.0)).unwrap();
    for (xv, gv) in leaves[0].data().iter().zip(tape.get(x).unwrap().data()) {
        assert_eq!(*gv, if *xv > 0.0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn fd_ic_layer_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let leaves = vec![random_tensor(&mut rng, &[3, 2, 6])];
    for mode in [Mode::Train, Mode::Eval] {
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let mut stats = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.8, 1.3],
            };
            let y = g.ic_layer(ids[0], &mut stats, 0.25, mode, 5).unwrap();
            contract(g, y, 17)
        };
        assert!(max_fd_relative_error(&build, &leaves) < 1e-4, "{mode:?}");
    }
}

#[test]
fn fd_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let leaves = vec![
        random_tensor(&mut rng, &[2, 3, 4]),
        random_tensor(&mut rng, &[2, 5]),
    ];
    let build = |g: &mut Graph, ids: &[NodeId]| {
        let mask = g.channel_mask(ids[0], &[true, false, true]).unwrap();
        let up = g.upsample_nearest(mask, 2).unwrap();
        let bias = g.input(Tensor::from_vec(vec![0.3, -0.1, 0.2])).unwrap();
        let up = g.add_channel_bias(up, bias).unwrap();
        let pooled = g.global_avg_pool(up).unwrap();
        let cat = g.concat_cols(pooled, ids[1]).unwrap();
        let rows = g.gather_rows(cat, &[1, 0, 1]).unwrap();
        let normed = g.l2_normalize_rows(rows).unwrap();
        contract(g, normed, 19)
    };
    assert!(max_fd_relative_error(&build, &leaves) < 1e-4);
}

#[test]
fn fd_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let leaves = vec![
        random_tensor(&mut rng, &[4, 3]),
        random_tensor(&mut rng, &[4, 3]),
        random_tensor(&mut rng, &[4, 3]),
        random_tensor(&mut rng, &[4, 3]),
    ];
    let build = |g: &mut Graph, ids: &[NodeId]| {
        let mse = g.mse(ids[0], ids[1]).unwrap();
        let a = g.l2_normalize_rows(ids[0]).unwrap();
        let p = g.l2_normalize_rows(ids[2]).unwrap();
        let n = g.l2_normalize_rows(ids[3]).unwrap();
        let trip = g.triplet(a, p, n, 0.7).unwrap();
        let ce = g.softmax_cross_entropy(ids[3], &[0, 2, 1, 2]).unwrap();
        g.weighted_sum(&[(mse, 1.0), (trip, 0.5), (ce, 2.0)])
            .unwrap()
    };
    let trip_active = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let a = g.l2_normalize_rows(ids[0]).unwrap();
        let p = g.l2_normalize_rows(ids[2]).unwrap();
        let n = g.l2_normalize_rows(ids[3]).unwrap();
        let t = g.triplet(a, p, n, 0.7).unwrap();
        g.value(t).item()
    };
    assert!(
        trip_active > 0.0,
        "fixture should exercise the active hinge"
    );
    assert!(max_fd_relative_error(&build, &leaves) < 1e-4);
}

/// Three-layer conv/dense/relu network: every parameter gradient agrees with
/// central differences.
#[test]
fn fd_three_layer_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let leaves = vec![
        random_tensor(&mut rng, &[2, 3, 16]),
        random_tensor(&mut rng, &[4, 3, 5]),
        random_tensor(&mut rng, &[6, 4]),
        random_tensor(&mut rng, &[6]),
        random_tensor(&mut rng, &[2, 6]),
        random_tensor(&mut rng, &[2]),
    ];
    let build = |g: &mut Graph, ids: &[NodeId]| {
        let h = g.conv1d(ids[0], ids[1], 2, 2).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.global_avg_pool(h).unwrap();
        let h = g.dense(h, ids[2], ids[3]).unwrap();
        let h = g.relu(h).unwrap();
        let logits = g.dense(h, ids[4], ids[5]).unwrap();
        g.softmax_cross_entropy(logits, &[1, 0]).unwrap()
    };
    assert!(max_fd_relative_error(&build, &leaves) < 1e-4);
}

#[test]
fn guided_equals_plain_without_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut g = Graph::new();
    let x = g.input(random_tensor(&mut rng, &[3, 10])).unwrap();
    let w = g.input(random_tensor(&mut rng, &[2, 3, 3])).unwrap();
    let y = g.conv1d(x, w, 1, 1).unwrap();
    let seed = random_tensor(&mut rng, &[2, 10]);
    let a = backprop(&g, y, &seed).unwrap();
    let b = guided_backprop_gradients(&g, y, &seed).unwrap();
    assert_eq!(a.get(x), b.get(x));
    assert_eq!(a.get(w), b.get(w));
}

#[test]
fn guided_equals_plain_on_all_positive_path() {
    // positive inputs, positive weights and positive seed keep every gate open
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let pos =
        |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape).map(|v| v.abs() + 0.1);
    let mut g = Graph::new();
    let x = g.input(pos(&mut rng, &[3, 12])).unwrap();
    let w1 = g.input(pos(&mut rng, &[4, 3, 3])).unwrap();
    let w2 = g.input(pos(&mut rng, &[2, 4, 3])).unwrap();
    let h = g.conv1d(x, w1, 1, 1).unwrap();
    let h = g.relu(h).unwrap();
    let h = g.conv1d(h, w2, 2, 1).unwrap();
    let y = g.relu(h).unwrap();
    let seed = pos(&mut rng, g.value(y).shape());
    let a = backprop(&g, y, &seed).unwrap();
    let b = guided_backprop_gradients(&g, y, &seed).unwrap();
    for id in [x, w1, w2] {
        assert!(a.get(id).unwrap().max_abs_diff(b.get(id).unwrap()) <= 1e-12);
    }
}

#[test]
fn param_gradients_accumulate_over_reuse() {
    let mut store = ParamStore::new();
    let pid = store.insert("w", Tensor::from_vec(vec![2.0])).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, pid).unwrap();
    let b = g.param(&store, pid).unwrap();
    let y = g.weighted_sum(&[(a, 3.0), (b, 4.0)]).unwrap();
    let tape = backprop(&g, y, &Tensor::scalar(1.0)).unwrap();
    let grads = tape.param_grads(&g, store.len());
    assert_eq!(grads[0].as_ref().unwrap().item(), 7.0);
}

#[test]
fn ops_are_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x = random_tensor(&mut rng, &[4, 3, 20]);
    let w = random_tensor(&mut rng, &[5, 3, 7]);
    let run = || {
        let mut g = Graph::new();
        let xi = g.input(x.clone()).unwrap();
        let wi = g.input(w.clone()).unwrap();
        let mut stats = RunningStats::new(5);
        let h = g.conv1d(xi, wi, 2, 3).unwrap();
        let h = g.ic_layer(h, &mut stats, 0.1, Mode::Train, 3).unwrap();
        let y = g.relu(h).unwrap();
        let seed = Tensor::filled(g.value(y).shape(), 1.0);
        let tape = backprop(&g, y, &seed).unwrap();
        (g.value(y).clone(), tape.get(wi).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_oracle_property(seed in 0u64..10_000, c_in in 1usize..4, c_out in 1usize..4,
                            k in 1usize..6, stride in 1usize..3, pad in 0usize..3, extra in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = k + extra;
        let x = random_tensor(&mut rng, &[c_in, t]);
        let w = random_tensor(&mut rng, &[c_out, c_in, k]);
        let y = conv1d(&x, &w, stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, stride, pad);
        for (a, b) in y.data().iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
