use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::fs;
use std::path::Path;

use crate::autodiff::{
    adam_step, checkpoint, softmax_rows, AdamConfig, AdamState, Graph, Mode, NodeId, ParamStore,
    ReluRule, RunningStats, Tensor,
};
use crate::error::{Error, Result};
use crate::model::{config_path, ConvSpec, StatUpdates};

/// What a network classifies: `channels x len` cycles or flat vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetInput {
    Cycle { channels: usize, len: usize },
    Vector { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Conv stages (cycle inputs only), each followed by IC + ReLU.
    pub conv: Vec<ConvSpec>,
    /// Width of a hidden dense ReLU layer; 0 for none.
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Input channels zeroed before the first layer (cycle inputs only).
    pub masked_channels: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::cnn()
    }
}

impl NetConfig {
    /// The raw-cycle CNN.
    pub fn cnn() -> Self {
        let root = crate::mocap::SkeletonTopology::default().root;
        Self {
            conv: vec![ConvSpec::new(32, 7, 2), ConvSpec::new(32, 5, 2)],
            hidden: 0,
            dropout: 0.1,
            epochs: 20,
            batch: 32,
            lr: 3e-3,
            masked_channels: (root * 3..root * 3 + 3).collect(),
        }
    }

    /// The dense head over latent codes.
    pub fn latent() -> Self {
        Self {
            conv: Vec::new(),
            hidden: 32,
            dropout: 0.0,
            epochs: 60,
            batch: 32,
            lr: 1e-2,
            masked_channels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetClassifier {
    pub config: NetConfig,
    pub input: NetInput,
    pub n_classes: usize,
    pub store: ParamStore,
}

#[derive(Clone, Copy, Debug)]
pub struct NetNodes {
    pub input: NodeId,
    /// Post-activation output of the last conv stage, if any.
    pub last_conv: Option<NodeId>,
    pub logits: NodeId,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let b = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-b..b)).collect())
}

impl NetClassifier {
    pub fn init(config: &NetConfig, input: NetInput, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut width = match input {
            NetInput::Cycle { channels, .. } => {
                let mut c_in = channels;
                for (i, s) in config.conv.iter().enumerate() {
                    store.insert(
                        format!("conv{i}.w"),
                        uniform(&mut rng, vec![s.channels, c_in, s.kernel], c_in * s.kernel)?,
                    )?;
                    store.insert_stats(format!("ic{i}"), RunningStats::new(s.channels))?;
                    c_in = s.channels;
                }
                c_in
            }
            NetInput::Vector { dim } => {
                if !config.conv.is_empty() {
                    return Err(Error::UnsupportedModel(
                        "conv stages need cycle inputs".into(),
                    ));
                }
                dim
            }
        };
        if config.hidden > 0 {
            store.insert(
                "hidden.w",
                uniform(&mut rng, vec![config.hidden, width], width)?,
            )?;
            store.insert("hidden.b", Tensor::zeros(&[config.hidden]))?;
            width = config.hidden;
        }
        store.insert("out.w", uniform(&mut rng, vec![n_classes, width], width)?)?;
        store.insert("out.b", Tensor::zeros(&[n_classes]))?;
        Ok(Self {
            config: config.clone(),
            input,
            n_classes,
            store,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let ok = match self.input {
            NetInput::Cycle { channels, len } => x.shape() == [channels, len],
            NetInput::Vector { dim } => x.shape() == [dim],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "classifier input {:?} does not match {:?}",
                x.shape(),
                self.input
            )))
        }
    }

    pub fn stack(&self, xs: &[&Tensor]) -> Result<Tensor> {
        let mut data = Vec::new();
        for x in xs {
            self.check_input(x)?;
            data.extend_from_slice(x.data());
        }
        let shape = match self.input {
            NetInput::Cycle { channels, len } => vec![xs.len(), channels, len],
            NetInput::Vector { dim } => vec![xs.len(), dim],
        };
        Tensor::new(shape, data)
    }

    /// Adds the classifier on top of node `x` (`N x C x T` or `N x D`).
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        seed: u64,
        updates: &mut StatUpdates,
    ) -> Result<NetNodes> {
        let mut h = x;
        let mut last_conv = None;
        let mut input = x;
        if let NetInput::Cycle { channels, .. } = self.input {
            let keep: Vec<bool> = (0..channels)
                .map(|c| !self.config.masked_channels.contains(&c))
                .collect();
            h = g.channel_mask(h, &keep)?;
            input = h;
            for (i, s) in self.config.conv.iter().enumerate() {
                let w = g.param(&self.store, self.store.id(&format!("conv{i}.w"))?)?;
                h = g.conv1d(h, w, s.stride, s.kernel / 2)?;
                let name = format!("ic{i}");
                let mut stats = self.store.stats(&name)?.clone();
                h = g.ic_layer(
                    h,
                    &mut stats,
                    self.config.dropout,
                    mode,
                    seed.wrapping_add(i as u64),
                )?;
                if mode == Mode::Train {
                    updates.push((name, stats));
                }
                h = g.relu(h)?;
                last_conv = Some(h);
            }
            h = g.global_avg_pool(h)?;
        }
        if self.config.hidden > 0 {
            let w = g.param(&self.store, self.store.id("hidden.w")?)?;
            let b = g.param(&self.store, self.store.id("hidden.b")?)?;
            h = g.dense(h, w, b)?;
            h = g.relu(h)?;
        }
        let w = g.param(&self.store, self.store.id("out.w")?)?;
        let b = g.param(&self.store, self.store.id("out.b")?)?;
        let logits = g.dense(h, w, b)?;
        Ok(NetNodes {
            input,
            last_conv,
            logits,
        })
    }

    /// Softmax class scores of a batch, evaluated in parallel chunks.
    pub fn predict_proba(&self, xs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let chunks: Vec<&[&Tensor]> = xs.chunks(CHUNK).collect();
        let out = crate::parallel::try_map(&chunks, |c| {
            let mut g = Graph::new();
            let x = g.input(self.stack(c)?)?;
            let nodes = self.logits_graph(&mut g, x, Mode::Eval, 0, &mut Vec::new())?;
            Ok::<_, Error>(softmax_rows(g.value(nodes.logits).data(), self.n_classes))
        })?;
        Ok(out
            .iter()
            .flat_map(|p| p.chunks(self.n_classes).map(<[f64]>::to_vec))
            .collect())
    }

    pub fn predict(&self, xs: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(xs)?.iter().map(|p| argmax(p)).collect())
    }

    /// Writes the weights to `path` and the architecture to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        let side = config_path(path);
        let meta = HeadMeta {
            config: self.config.clone(),
            input: self.input,
            n_classes: self.n_classes,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&side, e))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = config_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: HeadMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let store = checkpoint::load(path)?;
        let template = Self::init(&meta.config, meta.input, meta.n_classes, 0)?;
        if store.len() != template.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, classifier expects {}",
                store.len(),
                template.store.len()
            )));
        }
        for (_, name, t) in template.store.iter() {
            let got = store
                .by_name(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: meta.config,
            input: meta.input,
            n_classes: meta.n_classes,
            store,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    config: NetConfig,
    input: NetInput,
    n_classes: usize,
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len())
        .max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)))
        .unwrap_or(0)
}

/// Minibatch Adam on softmax cross-entropy.
pub fn train_net(
    xs: &[&Tensor],
    labels: &[usize],
    n_classes: usize,
    input: NetInput,
    config: &NetConfig,
    seed: u64,
) -> Result<NetClassifier> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(Error::invalid(
            "classifier training needs one label per input",
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::invalid(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    if config.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut net = NetClassifier::init(config, input, n_classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut adam = AdamState::new(&net.store);
    let cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            // A single-sample batch has no usable batch statistics.
            if chunk.len() < 2 && !config.conv.is_empty() {
                continue;
            }
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| xs[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(net.stack(&batch)?)?;
            let mut updates = Vec::new();
            let nodes = net.logits_graph(&mut g, x, Mode::Train, rng.gen(), &mut updates)?;
            let loss = g.softmax_cross_entropy(nodes.logits, &y)?;
            let tape = g.backprop(loss, &Tensor::scalar(1.0), ReluRule::Standard)?;
            let grads = tape.param_grads(&g, net.store.len());
            adam_step(&mut net.store, &grads, &mut adam, &cfg)?;
            for (name, stats) in updates {
                *net.store.stats_mut(&name)? = stats;
            }
        }
    }
    Ok(net)
}
