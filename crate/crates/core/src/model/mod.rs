//! Two convolutional encoders (subject, affect) and one decoder.
//!
//! Each encoder maps a `45 x 128` cycle to a unit-norm code; the decoder maps
//! a concatenated `(subject, affect)` code pair back to a cycle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Graph, Mode, NodeId, ParamStore, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::mocap::{SkeletonTopology, NUM_SIGNALS};
use crate::preprocess::CYCLE_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    /// Encoder: convolution stride. Decoder: upsampling factor.
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_len: usize,
    pub encoder: Vec<ConvSpec>,
    pub subject_dim: usize,
    pub affect_dim: usize,
    /// Channels and length of the decoder's dense output before reshaping.
    pub decoder_seed: (usize, usize),
    pub decoder: Vec<ConvSpec>,
    pub dropout: f64,
    /// Input channels zeroed before both encoders (the root joint, which is
    /// constant after displacement removal).
    pub masked_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let root = SkeletonTopology::default().root;
        Self {
            input_channels: NUM_SIGNALS,
            input_len: CYCLE_LEN,
            encoder: vec![
                ConvSpec::new(64, 7, 2),
                ConvSpec::new(96, 5, 2),
                ConvSpec::new(128, 3, 2),
            ],
            subject_dim: 32,
            affect_dim: 16,
            decoder_seed: (128, 16),
            decoder: vec![
                ConvSpec::new(96, 3, 2),
                ConvSpec::new(64, 5, 2),
                ConvSpec::new(NUM_SIGNALS, 7, 2),
            ],
            dropout: 0.1,
            masked_channels: (root * 3..root * 3 + 3).collect(),
        }
    }
}

impl ModelConfig {
    fn encoder_len(&self) -> Result<usize> {
        let mut t = self.input_len;
        for s in &self.encoder {
            if t + 2 * (s.kernel / 2) < s.kernel {
                return Err(Error::invalid(format!(
                    "encoder collapses the time axis at kernel {}",
                    s.kernel
                )));
            }
            t = (t + 2 * (s.kernel / 2) - s.kernel) / s.stride + 1;
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_dim < 2 || self.affect_dim < 2 {
            return Err(Error::invalid("code dimensions must be at least 2"));
        }
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::invalid(
                "encoder and decoder need at least one conv stage",
            ));
        }
        let all = self.encoder.iter().chain(&self.decoder);
        if all
            .clone()
            .any(|s| s.channels == 0 || s.kernel == 0 || s.kernel % 2 == 0 || s.stride == 0)
        {
            return Err(Error::invalid(
                "conv stages need positive channels/stride and odd kernels",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if let Some(&c) = self
            .masked_channels
            .iter()
            .find(|&&c| c >= self.input_channels)
        {
            return Err(Error::invalid(format!("masked channel {c} out of range")));
        }
        self.encoder_len()?;
        let (c0, t0) = self.decoder_seed;
        let t_out = t0 * self.decoder.iter().map(|s| s.stride).product::<usize>();
        let c_out = self.decoder.last().map(|s| s.channels).unwrap_or(c0);
        if c0 == 0 || t_out != self.input_len || c_out != self.input_channels {
            return Err(Error::invalid(format!(
                "decoder produces {c_out} x {t_out}, input is {} x {}",
                self.input_channels, self.input_len
            )));
        }
        Ok(())
    }

    pub fn code_dim(&self, branch: Branch) -> usize {
        match branch {
            Branch::Subject => self.subject_dim,
            Branch::Affect => self.affect_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Subject,
    Affect,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Subject => "enc_s",
            Branch::Affect => "enc_a",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub s_code: Vec<f64>,
    pub a_code: Vec<f64>,
}

/// He-style uniform draw: U(−b, b) with b = √(6 / fan_in), i.e. standard
/// deviation √(2 / fan_in).
fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let b = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-b..b)).collect())
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for branch in [Branch::Subject, Branch::Affect] {
        let p = branch.prefix();
        let mut c_in = config.input_channels;
        for (i, s) in config.encoder.iter().enumerate() {
            let w = fan_in_uniform(&mut rng, vec![s.channels, c_in, s.kernel], c_in * s.kernel)?;
            store.insert(format!("{p}.conv{i}.w"), w)?;
            store.insert_stats(format!("{p}.ic{i}"), RunningStats::new(s.channels))?;
            c_in = s.channels;
        }
        let d = config.code_dim(branch);
        store.insert(
            format!("{p}.fc.w"),
            fan_in_uniform(&mut rng, vec![d, c_in], c_in)?,
        )?;
        store.insert(format!("{p}.fc.b"), Tensor::zeros(&[d]))?;
    }
    let n_code = config.subject_dim + config.affect_dim;
    let (c0, t0) = config.decoder_seed;
    store.insert(
        "dec.fc.w",
        fan_in_uniform(&mut rng, vec![c0 * t0, n_code], n_code)?,
    )?;
    store.insert("dec.fc.b", Tensor::zeros(&[c0 * t0]))?;
    let mut c_in = c0;
    for (i, s) in config.decoder.iter().enumerate() {
        let w = fan_in_uniform(&mut rng, vec![s.channels, c_in, s.kernel], c_in * s.kernel)?;
        store.insert(format!("dec.conv{i}.w"), w)?;
        store.insert(format!("dec.conv{i}.b"), Tensor::zeros(&[s.channels]))?;
        c_in = s.channels;
    }
    Ok(ModelParams {
        config: config.clone(),
        store,
    })
}

/// Graph nodes produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    /// The (masked) input the encoder read.
    pub input: NodeId,
    /// Post-activation output of the last conv stage, `N x C x T'`.
    pub last_conv: NodeId,
    /// Unit-norm codes, `N x D`.
    pub codes: NodeId,
}

/// IC-layer statistics updated by training-mode passes, to be written back
/// into the store once the step is accepted.
pub type StatUpdates = Vec<(String, RunningStats)>;

impl ModelParams {
    pub fn input_mask(&self) -> Vec<bool> {
        (0..self.config.input_channels)
            .map(|c| !self.config.masked_channels.contains(&c))
            .collect()
    }

    /// Adds one encoder to `g`. `x` is `N x 45 x 128`.
    pub fn encoder_graph(
        &self,
        g: &mut Graph,
        branch: Branch,
        x: NodeId,
        mode: Mode,
        seed: u64,
        updates: &mut StatUpdates,
    ) -> Result<EncoderNodes> {
        let p = branch.prefix();
        let input = g.channel_mask(x, &self.input_mask())?;
        let mut h = input;
        for (i, s) in self.config.encoder.iter().enumerate() {
            let w = g.param(&self.store, self.store.id(&format!("{p}.conv{i}.w"))?)?;
            h = g.conv1d(h, w, s.stride, s.kernel / 2)?;
            let name = format!("{p}.ic{i}");
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
        }
        let last_conv = h;
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(&self.store, self.store.id(&format!("{p}.fc.w"))?)?;
        let b = g.param(&self.store, self.store.id(&format!("{p}.fc.b"))?)?;
        let z = g.dense(pooled, w, b)?;
        let codes = g.l2_normalize_rows(z)?;
        Ok(EncoderNodes {
            input,
            last_conv,
            codes,
        })
    }

    /// Adds the decoder to `g`. `codes` is `N x (D_s + D_a)`; the output is
    /// `N x 45 x 128`.
    pub fn decoder_graph(&self, g: &mut Graph, codes: NodeId) -> Result<NodeId> {
        let n = g.value(codes).shape()[0];
        let (c0, t0) = self.config.decoder_seed;
        let w = g.param(&self.store, self.store.id("dec.fc.w")?)?;
        let b = g.param(&self.store, self.store.id("dec.fc.b")?)?;
        let h = g.dense(codes, w, b)?;
        let mut h = g.reshape(h, &[n, c0, t0])?;
        let last = self.config.decoder.len() - 1;
        for (i, s) in self.config.decoder.iter().enumerate() {
            h = g.upsample_nearest(h, s.stride)?;
            let w = g.param(&self.store, self.store.id(&format!("dec.conv{i}.w"))?)?;
            let b = g.param(&self.store, self.store.id(&format!("dec.conv{i}.b"))?)?;
            h = g.conv1d(h, w, 1, s.kernel / 2)?;
            h = g.add_channel_bias(h, b)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Pairs subject rows `s_rows` of `s_codes` with affect rows `a_rows` of
    /// `a_codes` and decodes them.
    pub fn decode_rows(
        &self,
        g: &mut Graph,
        s_codes: NodeId,
        s_rows: &[usize],
        a_codes: NodeId,
        a_rows: &[usize],
    ) -> Result<NodeId> {
        let s = g.gather_rows(s_codes, s_rows)?;
        let a = g.gather_rows(a_codes, a_rows)?;
        let z = g.concat_cols(s, a)?;
        self.decoder_graph(g, z)
    }

    fn check_cycle(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.input_channels, self.config.input_len];
        if x.shape() != want {
            return Err(Error::invalid(format!(
                "cycle tensor must be {want:?}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Stacks cycles into one `N x C x T` tensor.
    pub fn stack(&self, cycles: &[&Tensor]) -> Result<Tensor> {
        let mut data =
            Vec::with_capacity(cycles.len() * self.config.input_channels * self.config.input_len);
        for x in cycles {
            self.check_cycle(x)?;
            data.extend_from_slice(x.data());
        }
        Tensor::new(
            vec![
                cycles.len(),
                self.config.input_channels,
                self.config.input_len,
            ],
            data,
        )
    }

    /// Codes of a batch of cycles for one branch, `N x D`.
    pub fn encode_batch(
        &self,
        branch: Branch,
        cycles: &[&Tensor],
        mode: Mode,
        seed: u64,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(self.stack(cycles)?)?;
        let nodes = self.encoder_graph(&mut g, branch, x, mode, seed, &mut Vec::new())?;
        Ok(g.value(nodes.codes).clone())
    }

    pub fn encode_subject(&self, cycle: &Tensor, mode: Mode) -> Result<Vec<f64>> {
        Ok(self
            .encode_batch(Branch::Subject, &[cycle], mode, 0)?
            .into_data())
    }

    pub fn encode_affect(&self, cycle: &Tensor, mode: Mode) -> Result<Vec<f64>> {
        Ok(self
            .encode_batch(Branch::Affect, &[cycle], mode, 0)?
            .into_data())
    }

    pub fn encode(&self, cycle: &Tensor, mode: Mode) -> Result<LatentPair> {
        Ok(LatentPair {
            s_code: self.encode_subject(cycle, mode)?,
            a_code: self.encode_affect(cycle, mode)?,
        })
    }

    /// Eval-mode codes of many cycles, computed in parallel chunks.
    pub fn encode_all(&self, branch: Branch, cycles: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 32;
        let chunks: Vec<&[&Tensor]> = cycles.chunks(CHUNK).collect();
        let d = self.config.code_dim(branch);
        let out =
            crate::parallel::try_map(&chunks, |c| self.encode_batch(branch, c, Mode::Eval, 0))?;
        Ok(out
            .iter()
            .flat_map(|t| t.data().chunks(d).map(<[f64]>::to_vec))
            .collect())
    }

    /// Decodes one `(subject, affect)` code pair to a `45 x 128` cycle.
    pub fn decode(&self, s_code: &[f64], a_code: &[f64]) -> Result<Tensor> {
        if s_code.len() != self.config.subject_dim || a_code.len() != self.config.affect_dim {
            return Err(Error::invalid(format!(
                "codes must be {} + {} long, got {} + {}",
                self.config.subject_dim,
                self.config.affect_dim,
                s_code.len(),
                a_code.len()
            )));
        }
        let mut g = Graph::new();
        let z: Vec<f64> = s_code.iter().chain(a_code).copied().collect();
        let n = z.len();
        let z = g.input(Tensor::new(vec![1, n], z)?)?;
        let out = self.decoder_graph(&mut g, z)?;
        g.value(out)
            .clone()
            .reshape(&[self.config.input_channels, self.config.input_len])
    }

    pub fn reconstruct(&self, cycle: &Tensor) -> Result<Tensor> {
        let c = self.encode(cycle, Mode::Eval)?;
        self.decode(&c.s_code, &c.a_code)
    }

    /// For `x_a` of (i, j) and `x_b` of (k, l), returns
    /// `(decode(E_S(x_b), E_A(x_a)), decode(E_S(x_a), E_A(x_b)))`, the
    /// estimates of (k, j) and (i, l).
    pub fn cross_reconstruct(&self, x_a: &Tensor, x_b: &Tensor) -> Result<(Tensor, Tensor)> {
        let a = self.encode(x_a, Mode::Eval)?;
        let b = self.encode(x_b, Mode::Eval)?;
        Ok((
            self.decode(&b.s_code, &a.a_code)?,
            self.decode(&a.s_code, &b.a_code)?,
        ))
    }

    /// Writes the checkpoint and its config as `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        let cfg = config_path(path);
        let text = serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(&cfg, e))?;
        fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = config_path(path);
        let text = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(&cfg, e))?;
        let store = checkpoint::load(path)?;
        let template = init_params(&config, 0)?;
        for (_, name, t) in template.store.iter() {
            let got = store
                .by_name(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if store.len() != template.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, config expects {}",
                store.len(),
                template.store.len()
            )));
        }
        Ok(Self { config, store })
    }
}

pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
