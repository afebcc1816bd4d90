//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs have a
//! smaller index and reverse insertion order is a valid reverse topological
//! order. Values are computed eagerly when a node is added.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{ParamId, ParamStore, RunningStats};
use crate::autodiff::tensor::{self, gemm, ConvDims, Tensor};
use crate::error::{Error, Result};

pub const IC_EPSILON: f64 = 1e-5;
pub const IC_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// How ReLU nodes route gradients during the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReluRule {
    /// Pass the gradient where the forward input was positive.
    Standard,
    /// Additionally require the incoming gradient to be positive.
    Guided,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv1d {
        input: NodeId,
        kernels: NodeId,
        dims: ConvDims,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        batch: usize,
        n_in: usize,
        m: usize,
    },
    AddChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    IcTrain {
        input: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mask: Vec<f64>,
    },
    IcEval {
        input: NodeId,
        inv_std: Vec<f64>,
    },
    ChannelMask {
        input: NodeId,
        mask: Vec<f64>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Upsample {
        input: NodeId,
        factor: usize,
    },
    Reshape {
        input: NodeId,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    GatherRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    L2Normalize {
        input: NodeId,
        norms: Vec<f64>,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Triplet {
        anchor: NodeId,
        positive: NodeId,
        negative: NodeId,
        margin: f64,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv1d { .. } => "conv1d",
            Op::Dense { .. } => "dense",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Relu { .. } => "relu",
            Op::IcTrain { .. } | Op::IcEval { .. } => "ic_layer",
            Op::ChannelMask { .. } => "channel_mask",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::Reshape { .. } => "reshape",
            Op::ConcatCols { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Mse { .. } => "mse",
            Op::Triplet { .. } => "triplet",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `(N, C, T)` view of a 2-D `C x T` or 3-D `N x C x T` shape.
fn nct(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [n, c, t] => Ok((n, c, t)),
        _ => Err(Error::invalid(format!(
            "expected C x T or N x C x T, got {shape:?}"
        ))),
    }
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((1, d)),
        [n, d] => Ok((n, d)),
        _ => Err(Error::invalid(format!(
            "expected a vector or matrix, got {shape:?}"
        ))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value at node {}",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Internal(format!("dangling node reference {}", id.0)))
        }
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push(Op::Param(id), store.get(id).clone())
    }

    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernels)?;
        let x = self.value(input);
        let w = self.value(kernels);
        let dims = ConvDims::infer(x.shape(), w.shape(), stride, padding)?;
        let out = tensor::conv1d_raw(&dims, x.data(), w.data());
        let value = Tensor::new(dims.out_shape(x.ndim() == 3), out)?;
        self.push(
            Op::Conv1d {
                input,
                kernels,
                dims,
            },
            value,
        )
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(weights)?;
        self.check(bias)?;
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        let (batch, n_in) = tensor::dense_dims(x.shape(), w.shape(), b.shape())?;
        let m = w.shape()[0];
        let out = tensor::dense_raw(batch, n_in, m, x.data(), w.data(), b.data());
        let shape = if x.ndim() == 2 {
            vec![batch, m]
        } else {
            vec![m]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::Dense {
                input,
                weights,
                bias,
                batch,
                n_in,
                m,
            },
            value,
        )
    }

    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(bias)?;
        let x = self.value(input);
        let b = self.value(bias);
        let (n, c, t) = nct(x.shape())?;
        if b.shape() != [c] {
            return Err(Error::invalid(format!(
                "channel bias must be [{c}], got {:?}",
                b.shape()
            )));
        }
        let mut out = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * t;
                for v in &mut out.data_mut()[base..base + t] {
                    *v += b.data()[ci];
                }
            }
        }
        self.push(Op::AddChannelBias { input, bias }, out)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(Op::Relu { input }, value)
    }

    /// Batch normalization followed by dropout. In training mode channels are
    /// standardized with the batch statistics (over samples and time) and
    /// `stats` is updated; in evaluation mode the running statistics are used
    /// and no units are dropped.
    pub fn ic_layer(
        &mut self,
        input: NodeId,
        stats: &mut RunningStats,
        dropout_rate: f64,
        mode: Mode,
        seed: u64,
    ) -> Result<NodeId> {
        self.check(input)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let x = self.value(input);
        let (n, c, t) = nct(x.shape())?;
        if stats.channels() != c {
            return Err(Error::invalid(format!(
                "ic_layer has {} channels of statistics, input has {c}",
                stats.channels()
            )));
        }
        let xd = x.data();
        match mode {
            Mode::Eval => {
                let inv_std: Vec<f64> = stats
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + IC_EPSILON).sqrt())
                    .collect();
                let mut out = vec![0.0; xd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * t;
                        for k in base..base + t {
                            out[k] = (xd[k] - stats.mean[ci]) * inv_std[ci];
                        }
                    }
                }
                let value = Tensor::new(x.shape().to_vec(), out)?;
                self.push(Op::IcEval { input, inv_std }, value)
            }
            Mode::Train => {
                let count = (n * t) as f64;
                let mut xhat = vec![0.0; xd.len()];
                let mut inv_std = vec![0.0; c];
                for ci in 0..c {
                    let idx =
                        || (0..n).flat_map(move |ni| ((ni * c + ci) * t)..((ni * c + ci) * t + t));
                    let mean = idx().map(|k| xd[k]).sum::<f64>() / count;
                    let var = idx().map(|k| (xd[k] - mean).powi(2)).sum::<f64>() / count;
                    let is = 1.0 / (var + IC_EPSILON).sqrt();
                    inv_std[ci] = is;
                    for k in idx() {
                        xhat[k] = (xd[k] - mean) * is;
                    }
                    let unbiased = if n * t > 1 {
                        var * count / (count - 1.0)
                    } else {
                        var
                    };
                    stats.mean[ci] = (1.0 - IC_MOMENTUM) * stats.mean[ci] + IC_MOMENTUM * mean;
                    stats.var[ci] = (1.0 - IC_MOMENTUM) * stats.var[ci] + IC_MOMENTUM * unbiased;
                }
                let mask: Vec<f64> = if dropout_rate == 0.0 {
                    vec![1.0; xd.len()]
                } else {
                    let keep = 1.0 / (1.0 - dropout_rate);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..xd.len())
                        .map(|_| {
                            if rng.gen::<f64>() < dropout_rate {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect()
                };
                let out: Vec<f64> = xhat.iter().zip(&mask).map(|(a, m)| a * m).collect();
                let value = Tensor::new(x.shape().to_vec(), out)?;
                self.push(
                    Op::IcTrain {
                        input,
                        xhat,
                        inv_std,
                        mask,
                    },
                    value,
                )
            }
        }
    }

    /// Multiplies each channel by a fixed 0/1 gate.
    pub fn channel_mask(&mut self, input: NodeId, keep: &[bool]) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let (n, c, t) = nct(x.shape())?;
        if keep.len() != c {
            return Err(Error::invalid(format!(
                "mask has {} channels, input {c}",
                keep.len()
            )));
        }
        let mask: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let mut out = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * t;
                for v in &mut out.data_mut()[base..base + t] {
                    *v *= mask[ci];
                }
            }
        }
        self.push(Op::ChannelMask { input, mask }, out)
    }

    /// Mean over time: `N x C x T -> N x C` (or `C x T -> C`).
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let (n, c, t) = nct(x.shape())?;
        let out: Vec<f64> = x
            .data()
            .chunks(t)
            .map(|row| row.iter().sum::<f64>() / t as f64)
            .collect();
        let shape = if x.ndim() == 3 { vec![n, c] } else { vec![c] };
        self.push(Op::GlobalAvgPool { input }, Tensor::new(shape, out)?)
    }

    /// Nearest-neighbour upsampling along time by an integer factor.
    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        self.check(input)?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let x = self.value(input);
        let (n, c, t) = nct(x.shape())?;
        let mut out = Vec::with_capacity(x.len() * factor);
        for row in x.data().chunks(t) {
            for &v in row {
                for _ in 0..factor {
                    out.push(v);
                }
            }
        }
        let shape = if x.ndim() == 3 {
            vec![n, c, t * factor]
        } else {
            vec![c, t * factor]
        };
        self.push(Op::Upsample { input, factor }, Tensor::new(shape, out)?)
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).clone().reshape(shape)?;
        self.push(Op::Reshape { input }, value)
    }

    /// Row-wise concatenation `[N x A] ++ [N x B] -> N x (A + B)`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (na, wa) = rows_cols(va.shape())?;
        let (nb, wb) = rows_cols(vb.shape())?;
        if na != nb || va.ndim() != vb.ndim() {
            return Err(Error::invalid(format!(
                "concat row mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = Vec::with_capacity(na * (wa + wb));
        for r in 0..na {
            out.extend_from_slice(&va.data()[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&vb.data()[r * wb..(r + 1) * wb]);
        }
        let shape = if va.ndim() == 2 {
            vec![na, wa + wb]
        } else {
            vec![wa + wb]
        };
        self.push(Op::ConcatCols { a, b }, Tensor::new(shape, out)?)
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let [n, d] = *x.shape() else {
            return Err(Error::invalid(format!(
                "gather_rows needs a matrix, got {:?}",
                x.shape()
            )));
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::invalid(format!("row {r} out of range for {n} rows")));
            }
            out.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        self.push(
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let (_, d) = rows_cols(x.shape())?;
        let mut out = x.clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(Op::L2Normalize { input, norms }, out)
    }

    /// Mean squared error over all elements; a scalar node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.check(pred)?;
        self.check(target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "mse shape mismatch: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / p.len() as f64;
        self.push(Op::Mse { pred, target }, Tensor::scalar(loss))
    }

    /// Batch mean of `max(0, |a - p| - |a - n| + margin)` over rows.
    pub fn triplet(
        &mut self,
        anchor: NodeId,
        positive: NodeId,
        negative: NodeId,
        margin: f64,
    ) -> Result<NodeId> {
        for id in [anchor, positive, negative] {
            self.check(id)?;
        }
        let (a, p, n) = (
            self.value(anchor),
            self.value(positive),
            self.value(negative),
        );
        if a.shape() != p.shape() || a.shape() != n.shape() {
            return Err(Error::invalid("triplet operands must share a shape"));
        }
        let (rows, d) = rows_cols(a.shape())?;
        let loss = (0..rows)
            .map(|r| {
                let s = r * d..(r + 1) * d;
                triplet_hinge(
                    &a.data()[s.clone()],
                    &p.data()[s.clone()],
                    &n.data()[s],
                    margin,
                )
            })
            .sum::<f64>()
            / rows as f64;
        self.push(
            Op::Triplet {
                anchor,
                positive,
                negative,
                margin,
            },
            Tensor::scalar(loss),
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let z = self.value(logits);
        let (n, k) = rows_cols(z.shape())?;
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        let probs = softmax_rows(z.data(), k);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::invalid(format!("label {y} outside {k} classes")));
            }
            loss -= probs[r * k + y].max(1e-300).ln();
        }
        loss /= n as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            self.check(id)?;
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::invalid("weighted_sum terms must be scalars"));
            }
            total += w * v.item();
        }
        self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(total),
        )
    }

    /// Reverse-mode gradient of `output` contracted with `seed`.
    pub fn backprop(&self, output: NodeId, seed: &Tensor, rule: ReluRule) -> Result<GradientTape> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::invalid(format!(
                "seed shape {:?} differs from output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, rule, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientTape { grads })
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[f64],
        rule: ReluRule,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv1d {
                input,
                kernels,
                dims,
            } => {
                let (dx, dw) = tensor::conv1d_backward(dims, val(*input), val(*kernels), g);
                accumulate(grads, *input, &dx)?;
                accumulate(grads, *kernels, &dw)?;
            }
            Op::Dense {
                input,
                weights,
                bias,
                batch,
                n_in,
                m,
            } => {
                let (batch, n_in, m) = (*batch, *n_in, *m);
                let mut dx = vec![0.0; batch * n_in];
                gemm(batch, m, n_in, g, false, val(*weights), false, &mut dx, 0.0);
                let mut dw = vec![0.0; m * n_in];
                gemm(m, batch, n_in, g, true, val(*input), false, &mut dw, 0.0);
                let mut db = vec![0.0; m];
                for row in g.chunks(m) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *input, &dx)?;
                accumulate(grads, *weights, &dw)?;
                accumulate(grads, *bias, &db)?;
            }
            Op::AddChannelBias { input, bias } => {
                let (n, c, t) = nct(node.value.shape())?;
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for (ci, d) in db.iter_mut().enumerate() {
                        let base = (ni * c + ci) * t;
                        *d += g[base..base + t].iter().sum::<f64>();
                    }
                }
                accumulate(grads, *input, g)?;
                accumulate(grads, *bias, &db)?;
            }
            Op::Relu { input } => {
                let x = val(*input);
                let dx: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        let open = xv > 0.0 && (rule == ReluRule::Standard || gv > 0.0);
                        if open {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *input, &dx)?;
            }
            Op::IcTrain {
                input,
                xhat,
                inv_std,
                mask,
            } => {
                let (n, c, t) = nct(node.value.shape())?;
                let count = (n * t) as f64;
                let gx: Vec<f64> = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                let mut dx = vec![0.0; g.len()];
                for ci in 0..c {
                    let idx =
                        || (0..n).flat_map(move |ni| ((ni * c + ci) * t)..((ni * c + ci) * t + t));
                    let m1 = idx().map(|k| gx[k]).sum::<f64>() / count;
                    let m2 = idx().map(|k| gx[k] * xhat[k]).sum::<f64>() / count;
                    for k in idx() {
                        dx[k] = inv_std[ci] * (gx[k] - m1 - xhat[k] * m2);
                    }
                }
                accumulate(grads, *input, &dx)?;
            }
            Op::IcEval { input, inv_std } => {
                let (_, c, t) = nct(node.value.shape())?;
                let dx: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv * inv_std[(k / t) % c])
                    .collect();
                accumulate(grads, *input, &dx)?;
            }
            Op::ChannelMask { input, mask } => {
                let (_, c, t) = nct(node.value.shape())?;
                let dx: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv * mask[(k / t) % c])
                    .collect();
                accumulate(grads, *input, &dx)?;
            }
            Op::GlobalAvgPool { input } => {
                let (_, _, t) = nct(self.nodes[input.0].value.shape())?;
                let dx: Vec<f64> = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / t as f64, t))
                    .collect();
                accumulate(grads, *input, &dx)?;
            }
            Op::Upsample { input, factor } => {
                let dx: Vec<f64> = g.chunks(*factor).map(|c| c.iter().sum()).collect();
                accumulate(grads, *input, &dx)?;
            }
            Op::Reshape { input } => accumulate(grads, *input, g)?,
            Op::ConcatCols { a, b } => {
                let (_, wa) = rows_cols(self.nodes[a.0].value.shape())?;
                let (_, wb) = rows_cols(self.nodes[b.0].value.shape())?;
                let mut da = Vec::with_capacity(g.len() / (wa + wb) * wa);
                let mut db = Vec::with_capacity(g.len() / (wa + wb) * wb);
                for row in g.chunks(wa + wb) {
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                accumulate(grads, *a, &da)?;
                accumulate(grads, *b, &db)?;
            }
            Op::GatherRows { input, rows } => {
                let d = node.value.shape()[1];
                let mut dx = vec![0.0; self.nodes[input.0].value.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *input, &dx)?;
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let s = r * d..(r + 1) * d;
                    let yg: f64 = y[s.clone()]
                        .iter()
                        .zip(&g[s.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for k in s {
                        dx[k] = (g[k] - y[k] * yg) / norm;
                    }
                }
                accumulate(grads, *input, &dx)?;
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = 2.0 * g[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                accumulate(grads, *pred, &dp)?;
                accumulate(grads, *target, &dt)?;
            }
            Op::Triplet {
                anchor,
                positive,
                negative,
                margin,
            } => {
                let (a, p, n) = (val(*anchor), val(*positive), val(*negative));
                let (rows, d) = rows_cols(self.nodes[anchor.0].value.shape())?;
                let mut da = vec![0.0; a.len()];
                let mut dp = vec![0.0; a.len()];
                let mut dn = vec![0.0; a.len()];
                let scale = g[0] / rows as f64;
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let (ar, pr, nr) = (&a[s.clone()], &p[s.clone()], &n[s.clone()]);
                    if triplet_hinge(ar, pr, nr, *margin) <= 0.0 {
                        continue;
                    }
                    let d_ap = dist(ar, pr);
                    let d_an = dist(ar, nr);
                    for j in 0..d {
                        let u = if d_ap > 0.0 {
                            (ar[j] - pr[j]) / d_ap
                        } else {
                            0.0
                        };
                        let v = if d_an > 0.0 {
                            (ar[j] - nr[j]) / d_an
                        } else {
                            0.0
                        };
                        da[r * d + j] += scale * (u - v);
                        dp[r * d + j] -= scale * u;
                        dn[r * d + j] += scale * v;
                    }
                }
                accumulate(grads, *anchor, &da)?;
                accumulate(grads, *positive, &dp)?;
                accumulate(grads, *negative, &dn)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut dz = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * k + y] -= 1.0;
                }
                dz.iter_mut().for_each(|v| *v *= g[0] / n as f64);
                accumulate(grads, *logits, &dz)?;
            }
            Op::WeightedSum { terms } => {
                for &(id, w) in terms {
                    accumulate(grads, id, &[w * g[0]])?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) -> Result<()> {
    let slot = grads
        .get_mut(id.0)
        .ok_or_else(|| Error::Internal(format!("dangling node reference {}", id.0)))?;
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn triplet_hinge(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (dist(a, p) - dist(a, n) + margin).max(0.0)
}

/// Row-wise softmax of a `rows x k` matrix.
pub fn softmax_rows(z: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// Gradients produced by one backward pass. Nodes the output does not
/// depend on have no entry, which means a zero gradient.
#[derive(Clone, Debug)]
pub struct GradientTape {
    grads: Vec<Option<Tensor>>,
}

impl GradientTape {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, materializing zeros when absent.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    /// Sums gradients of every node that reads a parameter, indexed by
    /// parameter id.
    pub fn param_grads(&self, graph: &Graph, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(Some(g))) = (&node.op, self.grads.get(i)) {
                match &mut out[pid.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Plain reverse-mode backpropagation.
pub fn backprop(graph: &Graph, output: NodeId, seed: &Tensor) -> Result<GradientTape> {
    graph.backprop(output, seed, ReluRule::Standard)
}

/// Backpropagation with the guided ReLU rule: gradients pass a ReLU only
/// where both the forward input and the incoming gradient are positive.
pub fn guided_backprop_gradients(
    graph: &Graph,
    output: NodeId,
    seed: &Tensor,
) -> Result<GradientTape> {
    graph.backprop(output, seed, ReluRule::Guided)
}

/// Elementwise `max(0, x)` outside of a graph.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let y = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let y = relu(&Tensor::from_vec(vec![-1.0, -3.0]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_by_two_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.5)).unwrap();
        let y = g.weighted_sum(&[(x, 2.0)]).unwrap();
        let tape = backprop(&g, y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn relu_gradient_closed_at_negative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(-1.0)).unwrap();
        let y = g.relu(x).unwrap();
        let tape = backprop(&g, y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn guided_relu_blocks_negative_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0)).unwrap();
        let y = g.relu(x).unwrap();
        let seed = Tensor::scalar(-1.0);
        assert_eq!(backprop(&g, y, &seed).unwrap().get(x).unwrap().item(), -1.0);
        assert_eq!(
            guided_backprop_gradients(&g, y, &seed)
                .unwrap()
                .get(x)
                .unwrap()
                .item(),
            0.0
        );
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3])).unwrap();
        let y = g.relu(x).unwrap();
        assert!(backprop(&g, y, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dangling_reference_is_internal_error() {
        let g = Graph::new();
        let err = backprop(&g, NodeId(3), &Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    #[test]
    fn ic_eval_identity_with_unit_stats() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = g
            .input(Tensor::new(vec![3, 4], data.clone()).unwrap())
            .unwrap();
        let mut stats = RunningStats::new(3);
        stats.var = vec![1.0 - IC_EPSILON; 3];
        let y = g.ic_layer(x, &mut stats, 0.0, Mode::Eval, 0).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ic_eval_running_stats_standard_unit_variance() {
        // running mean 0 / var 1 with the epsilon guard is identity to ~5e-6
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let mut stats = RunningStats::new(1);
        let y = g.ic_layer(x, &mut stats, 0.0, Mode::Eval, 0).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-5);
    }

    #[test]
    fn ic_train_constant_channel_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 5], 4.0)).unwrap();
        let mut stats = RunningStats::new(2);
        let y = g.ic_layer(x, &mut stats, 0.0, Mode::Train, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        // running stats moved towards the batch statistics
        assert!((stats.mean[0] - 0.4).abs() < 1e-12);
        assert!((stats.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ic_train_seeded_dropout_repeats() {
        let data: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64).collect();
        let run = || {
            let mut g = Graph::new();
            let x = g
                .input(Tensor::new(vec![2, 4, 5], data.clone()).unwrap())
                .unwrap();
            let mut stats = RunningStats::new(4);
            let y = g.ic_layer(x, &mut stats, 0.3, Mode::Train, 99).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.data().contains(&0.0));
    }

    #[test]
    fn ic_rejects_bad_rate() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3])).unwrap();
        let mut stats = RunningStats::new(1);
        assert!(g.ic_layer(x, &mut stats, 1.0, Mode::Train, 0).is_err());
    }

    #[test]
    fn non_finite_value_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.input(Tensor::from_vec(vec![f64::NAN])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0, 2.0, 3.0, -5.0, 0.0, 5.0], 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
