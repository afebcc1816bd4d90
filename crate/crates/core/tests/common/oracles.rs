//! Loop and finite-difference oracles shared by the test targets.

use gaitdis_core::autodiff::{backprop, Graph, Mode, NodeId, RunningStats, Tensor};
use gaitdis_core::model::{init_params, ConvSpec, ModelConfig, ModelParams};
use gaitdis_core::training::{loss_graph, CrossBatch, CrossPair, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Inputs bounded away from zero so ReLU kinks stay outside the FD stencil.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, t) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * t_out];
    for o in 0..c_out {
        for to in 0..t_out {
            let mut acc = 0.0;
            for c in 0..c_in {
                for kk in 0..k {
                    let pos = (to * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < t {
                        acc += x.data()[c * t + pos as usize] * w.data()[(o * c_in + c) * k + kk];
                    }
                }
            }
            out[o * t_out + to] = acc;
        }
    }
    out
}

pub fn loop_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc / a.len() as f64
}

/// A scalar function of leaf tensors, recorded on a fresh graph.
pub type Builder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> NodeId + 'a;

fn eval_scalar(build: &Builder, leaves: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let out = build(&mut g, &ids);
    g.value(out).item()
}

fn rel_err(a: f64, fd: f64) -> f64 {
    rel_err_floor(a, fd, 1e-5)
}

fn rel_err_floor(a: f64, fd: f64, floor: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(floor)
}

/// Max over all leaf entries of |analytic - fd| / max(|analytic|, |fd|, 1e-5).
pub fn max_fd_relative_error(build: &Builder, leaves: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let out = build(&mut g, &ids);
    let tape = backprop(&g, out, &Tensor::scalar(1.0)).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = tape.get_or_zeros(&g, ids[li]);
        for k in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += eps;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= eps;
            let fd = (eval_scalar(build, &plus) - eval_scalar(build, &minus)) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[k], fd));
        }
    }
    worst
}

/// Contracts a node with a fixed random tensor so every output entry matters.
pub fn contract(g: &mut Graph, node: NodeId, seed: u64) -> NodeId {
    let shape = g.value(node).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(random_tensor(&mut rng, &shape)).unwrap();
    let n: usize = shape.iter().product();
    let flat = g.reshape(node, &[1, n]).unwrap();
    let wf = g.reshape(w, &[1, n]).unwrap();
    let zero = g.input(Tensor::zeros(&[1])).unwrap();
    let row = g.dense(flat, wf, zero).unwrap();
    g.reshape(row, &[1]).unwrap()
}

/// Worst FD error of every differentiable graph op on one random
/// configuration of shapes, strides and values.
pub fn random_op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (n, c_in, c_out) = (
        rng.gen_range(1..3),
        rng.gen_range(1..4),
        rng.gen_range(1..4),
    );
    let (k, stride, pad) = (
        rng.gen_range(1..6),
        rng.gen_range(1..3),
        rng.gen_range(0..3),
    );
    let t = k + rng.gen_range(0..8);
    let leaves = vec![
        random_tensor(&mut rng, &[n, c_in, t]),
        random_tensor(&mut rng, &[c_out, c_in, k]),
    ];
    let cs = rng.gen();
    let build = move |g: &mut Graph, ids: &[NodeId]| {
        let y = g.conv1d(ids[0], ids[1], stride, pad).unwrap();
        contract(g, y, cs)
    };
    out.push(("conv1d", max_fd_relative_error(&build, &leaves)));

    let (rows, d_in, d_out) = (
        rng.gen_range(1..4),
        rng.gen_range(1..6),
        rng.gen_range(1..5),
    );
    let leaves = vec![
        random_tensor(&mut rng, &[rows, d_in]),
        random_tensor(&mut rng, &[d_out, d_in]),
        random_tensor(&mut rng, &[d_out]),
    ];
    let cs = rng.gen();
    let build = move |g: &mut Graph, ids: &[NodeId]| {
        let y = g.dense(ids[0], ids[1], ids[2]).unwrap();
        contract(g, y, cs)
    };
    out.push(("dense", max_fd_relative_error(&build, &leaves)));

    let len = rng.gen_range(1..20);
    let leaves = vec![random_away_from_zero(&mut rng, &[len])];
    let cs = rng.gen();
    let build = move |g: &mut Graph, ids: &[NodeId]| {
        let y = g.relu(ids[0]).unwrap();
        contract(g, y, cs)
    };
    out.push(("relu", max_fd_relative_error(&build, &leaves)));

    let (n, c, t) = (
        rng.gen_range(2..4),
        rng.gen_range(1..4),
        rng.gen_range(2..7),
    );
    let leaves = vec![random_tensor(&mut rng, &[n, c, t])];
    let stats = RunningStats {
        mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
    };
    let (rate, ds, cs) = (rng.gen_range(0.0..0.5), rng.gen(), rng.gen());
    for (name, mode) in [
        ("ic_layer/train", Mode::Train),
        ("ic_layer/eval", Mode::Eval),
    ] {
        let stats = stats.clone();
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let mut s = stats.clone();
            let y = g.ic_layer(ids[0], &mut s, rate, mode, ds).unwrap();
            contract(g, y, cs)
        };
        out.push((name, max_fd_relative_error(&build, &leaves)));
    }

    let (n, c, t, extra) = (
        rng.gen_range(1..3),
        rng.gen_range(2..5),
        rng.gen_range(1..5),
        rng.gen_range(1..4),
    );
    let leaves = vec![
        random_tensor(&mut rng, &[n, c, t]),
        random_tensor(&mut rng, &[n, extra]),
        random_tensor(&mut rng, &[c]),
    ];
    let keep: Vec<bool> = (0..c).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
    let factor = rng.gen_range(1..4);
    let gather: Vec<usize> = (0..rng.gen_range(1..5))
        .map(|_| rng.gen_range(0..n))
        .collect();
    let cs = rng.gen();
    let build = move |g: &mut Graph, ids: &[NodeId]| {
        let m = g.channel_mask(ids[0], &keep).unwrap();
        let up = g.upsample_nearest(m, factor).unwrap();
        let up = g.add_channel_bias(up, ids[2]).unwrap();
        let pooled = g.global_avg_pool(up).unwrap();
        let cat = g.concat_cols(pooled, ids[1]).unwrap();
        let rows = g.gather_rows(cat, &gather).unwrap();
        let normed = g.l2_normalize_rows(rows).unwrap();
        contract(g, normed, cs)
    };
    out.push(("structural", max_fd_relative_error(&build, &leaves)));

    let (rows, d) = (rng.gen_range(1..5), rng.gen_range(2..5));
    let leaves: Vec<Tensor> = (0..4)
        .map(|_| random_tensor(&mut rng, &[rows, d]))
        .collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..d)).collect();
    let margin = rng.gen_range(0.5..2.5);
    let w: [f64; 3] = [
        rng.gen_range(0.1..2.0),
        rng.gen_range(0.1..2.0),
        rng.gen_range(0.1..2.0),
    ];
    let build = move |g: &mut Graph, ids: &[NodeId]| {
        let mse = g.mse(ids[0], ids[1]).unwrap();
        let a = g.l2_normalize_rows(ids[0]).unwrap();
        let p = g.l2_normalize_rows(ids[2]).unwrap();
        let q = g.l2_normalize_rows(ids[3]).unwrap();
        let trip = g.triplet(a, p, q, margin).unwrap();
        let ce = g.softmax_cross_entropy(ids[3], &labels).unwrap();
        g.weighted_sum(&[(mse, w[0]), (trip, w[1]), (ce, w[2])])
            .unwrap()
    };
    out.push(("losses", max_fd_relative_error(&build, &leaves)));
    out
}

/// A small autoencoder with the same stage structure as the default one.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_channels: 6,
        input_len: 16,
        encoder: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(5, 3, 2)],
        subject_dim: 3,
        affect_dim: 2,
        decoder_seed: (4, 4),
        decoder: vec![ConvSpec::new(5, 3, 2), ConvSpec::new(6, 3, 2)],
        dropout: 0.1,
        masked_channels: vec![0, 1, 2],
    }
}

fn tiny_problem(seed: u64) -> (ModelParams, Vec<Tensor>, CrossBatch, LossWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let params = init_params(&cfg, rng.gen()).unwrap();
    let x: Vec<Tensor> = (0..8).map(|_| random_tensor(&mut rng, &[6, 16])).collect();
    let batch = CrossBatch::from_pairs(vec![
        CrossPair {
            a: 0,
            b: 1,
            kj: 2,
            il: 3,
        },
        CrossPair {
            a: 4,
            b: 5,
            kj: 6,
            il: 7,
        },
    ]);
    let weights = LossWeights {
        rec: rng.gen_range(0.1..2.0),
        cross: rng.gen_range(0.1..2.0),
        trip_s: rng.gen_range(0.1..2.0),
        trip_a: rng.gen_range(0.1..2.0),
        margin: rng.gen_range(0.2..2.0),
    };
    (params, x, batch, weights)
}

/// Worst FD error of the weighted training objective with respect to every
/// model parameter. FD roundoff grows with |loss|, so the floor under the
/// relative error is 1e-5 scaled by the loss value.
pub fn total_loss_fd_error(seed: u64, mode: Mode) -> f64 {
    let (params, x, batch, weights) = tiny_problem(seed);
    let xr: Vec<&Tensor> = x.iter().collect();
    let eval = |p: &ModelParams| {
        let lg = loss_graph(p, &xr, &batch, &weights, mode, seed).unwrap();
        lg.graph.value(lg.total).item()
    };
    let lg = loss_graph(&params, &xr, &batch, &weights, mode, seed).unwrap();
    let tape = backprop(&lg.graph, lg.total, &Tensor::scalar(1.0)).unwrap();
    let grads = tape.param_grads(&lg.graph, params.store.len());
    let floor = 1e-5 * lg.graph.value(lg.total).item().abs().max(1.0);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for id in params.store.ids().collect::<Vec<_>>() {
        let n = params.store.get(id).len();
        for k in 0..n {
            let mut plus = params.clone();
            plus.store.get_mut(id).data_mut()[k] += eps;
            let mut minus = params.clone();
            minus.store.get_mut(id).data_mut()[k] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = grads[id.0].as_ref().map_or(0.0, |g| g.data()[k]);
            worst = worst.max(rel_err_floor(a, fd, floor));
        }
    }
    worst
}
