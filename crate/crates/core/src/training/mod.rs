//! Reconstruction, cross-reconstruction and triplet losses, the
//! cross-subject batch sampler and the training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Mode, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::mocap::Affect;
use crate::model::{Branch, ModelParams, StatUpdates};
use crate::preprocess::GaitCycle;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub cross: f64,
    pub trip_s: f64,
    pub trip_a: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            cross: 1.0,
            trip_s: 1.0,
            trip_a: 1.0,
            margin: 1.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.rec, self.cross, self.trip_s, self.trip_a];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative with one > 0: {w:?}"
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!(
                "triplet margin {} must be positive",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Cross pairs per batch.
    pub batch: usize,
    /// Optimizer steps per epoch.
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 16,
            batches_per_epoch: 6,
            lr: 2e-3,
            seed: 7,
        }
    }
}

/// Subject and affect label of every cycle, plus the cycles of each
/// (subject, affect) pair.
#[derive(Clone, Debug)]
pub struct LabelIndex {
    pub subjects: Vec<String>,
    pub subject: Vec<usize>,
    pub affect: Vec<usize>,
    pools: BTreeMap<(usize, usize), Vec<usize>>,
    affects: Vec<usize>,
}

impl LabelIndex {
    pub fn new(cycles: &[GaitCycle]) -> Self {
        let subjects: Vec<String> = cycles
            .iter()
            .map(|c| c.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let subject: Vec<usize> = cycles
            .iter()
            .map(|c| {
                subjects
                    .binary_search(&c.subject_id)
                    .expect("collected above")
            })
            .collect();
        let affect: Vec<usize> = cycles.iter().map(|c| c.affect.index()).collect();
        let mut pools: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (n, (&s, &a)) in subject.iter().zip(&affect).enumerate() {
            pools.entry((s, a)).or_default().push(n);
        }
        let affects = affect
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self {
            subjects,
            subject,
            affect,
            pools,
            affects,
        }
    }

    pub fn pool(&self, subject: usize, affect: usize) -> &[usize] {
        self.pools
            .get(&(subject, affect))
            .map_or(&[], Vec::as_slice)
    }

    /// Fails unless every observed subject has cycles of every observed affect.
    pub fn check_coverage(&self) -> Result<()> {
        if self.subjects.len() < 2 || self.affects.len() < 2 {
            return Err(Error::invalid(format!(
                "cross training needs >= 2 subjects and >= 2 affects, found {} and {}",
                self.subjects.len(),
                self.affects.len()
            )));
        }
        let mut missing = Vec::new();
        for (s, name) in self.subjects.iter().enumerate() {
            for &a in &self.affects {
                if self.pool(s, a).is_empty() {
                    missing.push(format!("{name}/{}", Affect::ALL[a]));
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "no cycles for {}",
                missing.join(", ")
            )))
        }
    }
}

/// Dataset indices of one cross pair: `a` is labeled (i, j), `b` (k, l),
/// `kj` and `il` are ground truths drawn from those label pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossPair {
    pub a: usize,
    pub b: usize,
    pub kj: usize,
    pub il: usize,
}

/// Rows of a batch are laid out as `[a.., b.., kj.., il..]`; triplets are
/// `(anchor, positive, negative)` row indices into that layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossBatch {
    pub pairs: Vec<CrossPair>,
    pub subject_triplets: Vec<(usize, usize, usize)>,
    pub affect_triplets: Vec<(usize, usize, usize)>,
}

impl CrossBatch {
    pub fn rows(&self) -> Vec<usize> {
        let p = &self.pairs;
        p.iter()
            .map(|x| x.a)
            .chain(p.iter().map(|x| x.b))
            .chain(p.iter().map(|x| x.kj))
            .chain(p.iter().map(|x| x.il))
            .collect()
    }

    /// Builds the within-batch triplets for the given pairs. For the pair
    /// x_ij, x_kl with truths x_kj, x_il, the subject positive of x_ij is
    /// x_il and its negative x_kj; the affect positive is x_kj and its
    /// negative x_il. The same holds symmetrically for x_kl.
    pub fn from_pairs(pairs: Vec<CrossPair>) -> Self {
        let n = pairs.len();
        let (a, b, kj, il) = (0, n, 2 * n, 3 * n);
        let mut subject_triplets = Vec::with_capacity(2 * n);
        let mut affect_triplets = Vec::with_capacity(2 * n);
        for p in 0..n {
            subject_triplets.push((a + p, il + p, kj + p));
            subject_triplets.push((b + p, kj + p, il + p));
            affect_triplets.push((a + p, kj + p, il + p));
            affect_triplets.push((b + p, il + p, kj + p));
        }
        Self {
            pairs,
            subject_triplets,
            affect_triplets,
        }
    }
}

pub fn sample_cross_batch(
    labels: &LabelIndex,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CrossBatch> {
    labels.check_coverage()?;
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let ns = labels.subjects.len();
    let affects = &labels.affects;
    let mut pairs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.gen_range(0..ns);
        let k = (i + rng.gen_range(1..ns)) % ns;
        let ji = rng.gen_range(0..affects.len());
        let li = (ji + rng.gen_range(1..affects.len())) % affects.len();
        let (j, l) = (affects[ji], affects[li]);
        let mut draw = |s, a| *labels.pool(s, a).choose(rng).expect("coverage checked");
        pairs.push(CrossPair {
            a: draw(i, j),
            b: draw(k, l),
            kj: draw(k, j),
            il: draw(i, l),
        });
    }
    Ok(CrossBatch::from_pairs(pairs))
}

/// Same as [`sample_cross_batch`] with a fresh generator seeded by `seed`.
pub fn sample_cross_batch_seeded(
    labels: &LabelIndex,
    batch: usize,
    seed: u64,
) -> Result<CrossBatch> {
    sample_cross_batch(labels, batch, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cross: f64,
    pub trip_s: f64,
    pub trip_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        [self.rec, self.cross, self.trip_s, self.trip_a, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Graph of the weighted training objective over one batch.
pub struct LossGraph {
    pub graph: Graph,
    pub rec: NodeId,
    pub cross: NodeId,
    pub trip_s: NodeId,
    pub trip_a: NodeId,
    pub total: NodeId,
    pub updates: StatUpdates,
}

impl LossGraph {
    pub fn breakdown(&self) -> LossBreakdown {
        let v = |id| self.graph.value(id).item();
        LossBreakdown {
            rec: v(self.rec),
            cross: v(self.cross),
            trip_s: v(self.trip_s),
            trip_a: v(self.trip_a),
            total: v(self.total),
        }
    }
}

fn gather_codes(
    g: &mut Graph,
    codes: NodeId,
    triplets: &[(usize, usize, usize)],
) -> Result<[NodeId; 3]> {
    let a: Vec<usize> = triplets.iter().map(|t| t.0).collect();
    let p: Vec<usize> = triplets.iter().map(|t| t.1).collect();
    let n: Vec<usize> = triplets.iter().map(|t| t.2).collect();
    Ok([
        g.gather_rows(codes, &a)?,
        g.gather_rows(codes, &p)?,
        g.gather_rows(codes, &n)?,
    ])
}

/// Builds `λ_rec·L_rec + λ_cross·L_cross + λ_S·L_trip^S + λ_A·L_trip^A` for
/// `batch`, whose cycles are `x[batch.rows()]`.
///
/// L_rec is the MSE of self-reconstructing x_ij and x_kl. L_cross is
/// MSE(D(s_kl, a_ij), x_kj) + MSE(D(s_ij, a_kl), x_il).
pub fn loss_graph(
    params: &ModelParams,
    x: &[&Tensor],
    batch: &CrossBatch,
    weights: &LossWeights,
    mode: Mode,
    seed: u64,
) -> Result<LossGraph> {
    weights.validate()?;
    let n = batch.pairs.len();
    if n == 0 {
        return Err(Error::invalid("empty cross batch"));
    }
    let rows: Vec<&Tensor> = batch.rows().into_iter().map(|r| x[r]).collect();
    let mut g = Graph::new();
    let input = g.input(params.stack(&rows)?)?;
    let mut updates = Vec::new();
    let s = params.encoder_graph(&mut g, Branch::Subject, input, mode, seed, &mut updates)?;
    let a = params.encoder_graph(
        &mut g,
        Branch::Affect,
        input,
        mode,
        seed ^ 0x5eed,
        &mut updates,
    )?;

    let first: Vec<usize> = (0..2 * n).collect();
    let own = params.decode_rows(&mut g, s.codes, &first, a.codes, &first)?;
    let own_target = g.input(params.stack(&rows[..2 * n])?)?;
    let rec = g.mse(own, own_target)?;

    let s_rows: Vec<usize> = (n..2 * n).chain(0..n).collect();
    let a_rows: Vec<usize> = (0..n).chain(n..2 * n).collect();
    let crossed = params.decode_rows(&mut g, s.codes, &s_rows, a.codes, &a_rows)?;
    let cross_target = g.input(params.stack(&rows[2 * n..])?)?;
    let cross_mean = g.mse(crossed, cross_target)?;
    // Both halves have the same size, so the sum of their MSEs is twice the
    // MSE over the concatenation.
    let cross = g.weighted_sum(&[(cross_mean, 2.0)])?;

    let [sa, sp, sn] = gather_codes(&mut g, s.codes, &batch.subject_triplets)?;
    let trip_s = g.triplet(sa, sp, sn, weights.margin)?;
    let [aa, ap, an] = gather_codes(&mut g, a.codes, &batch.affect_triplets)?;
    let trip_a = g.triplet(aa, ap, an, weights.margin)?;

    let total = g.weighted_sum(&[
        (rec, weights.rec),
        (cross, weights.cross),
        (trip_s, weights.trip_s),
        (trip_a, weights.trip_a),
    ])?;
    Ok(LossGraph {
        graph: g,
        rec,
        cross,
        trip_s,
        trip_a,
        total,
        updates,
    })
}

pub fn total_loss(
    params: &ModelParams,
    x: &[&Tensor],
    batch: &CrossBatch,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(loss_graph(params, x, batch, weights, Mode::Eval, 0)?.breakdown())
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Mean self-reconstruction MSE over `cycles` (eval mode).
pub fn loss_rec(params: &ModelParams, cycles: &[&Tensor]) -> Result<f64> {
    if cycles.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let errs =
        crate::parallel::try_map(cycles, |x| Ok::<_, Error>(mse(&params.reconstruct(x)?, x)))?;
    Ok(errs.iter().sum::<f64>() / cycles.len() as f64)
}

/// One cross sample: inputs x_ij and x_kl with truths x_kj and x_il.
pub struct CrossSample<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub kj: &'a Tensor,
    pub il: &'a Tensor,
}

/// Mean over samples of MSE(x̂_kj, x_kj) + MSE(x̂_il, x_il) (eval mode).
pub fn loss_cross(params: &ModelParams, samples: &[CrossSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let errs = crate::parallel::try_map(samples, |s| {
        let (kj, il) = params.cross_reconstruct(s.a, s.b)?;
        Ok::<_, Error>(mse(&kj, s.kj) + mse(&il, s.il))
    })?;
    Ok(errs.iter().sum::<f64>() / samples.len() as f64)
}

/// Batch mean of max(0, ‖a − p‖ − ‖a − n‖ + margin).
pub fn loss_triplet(
    anchor: &[Vec<f64>],
    positive: &[Vec<f64>],
    negative: &[Vec<f64>],
    margin: f64,
) -> f64 {
    let dist = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let n = anchor.len().max(1) as f64;
    anchor
        .iter()
        .zip(positive)
        .zip(negative)
        .map(|((a, p), q)| (dist(a, p) - dist(a, q) + margin).max(0.0))
        .sum::<f64>()
        / n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_cross: f64,
    pub l_trip_s: f64,
    pub l_trip_a: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLosses>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_s: f64,
    /// Self-reconstruction MSE on held-out cycles after the last epoch.
    pub validation_rec: Option<f64>,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_rec,l_cross,l_trip_s,l_trip_a,total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.l_rec, e.l_cross, e.l_trip_s, e.l_trip_a, e.total
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// 64-bit FNV-1a of a byte string, as 16 hex digits.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub struct Trained {
    /// Parameters after the last accepted step.
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Adam on the weighted loss, `config.batches_per_epoch` freshly sampled
/// cross batches per epoch. Stops early (keeping the last good parameters
/// and recording the reason in the report) if a loss or gradient is not
/// finite.
pub fn train(
    cycles: &[GaitCycle],
    validation: &[GaitCycle],
    init: ModelParams,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<Trained> {
    weights.validate()?;
    if config.batch == 0 || config.batches_per_epoch == 0 {
        return Err(Error::invalid(
            "batch and batches_per_epoch must be positive",
        ));
    }
    let labels = LabelIndex::new(cycles);
    labels.check_coverage()?;
    let x: Vec<&Tensor> = cycles.iter().map(|c| &c.tensor).collect();
    let hash_src = serde_json::to_string(&(&init.config, weights, config))
        .map_err(|e| Error::Internal(e.to_string()))?;
    let started = Instant::now();
    let mut params = init;
    let mut adam = AdamState::new(&params.store);
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut aborted = None;
    'outer: for epoch in 0..config.epochs {
        let mut acc = LossBreakdown::default();
        for _ in 0..config.batches_per_epoch {
            let batch = sample_cross_batch(&labels, config.batch, &mut rng)?;
            let seed = rng.gen();
            let lg = match loss_graph(&params, &x, &batch, weights, Mode::Train, seed) {
                Ok(lg) => lg,
                Err(Error::NonFinite(msg)) => {
                    aborted = Some(format!("epoch {epoch}: {msg}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let b = lg.breakdown();
            if !b.is_finite() {
                aborted = Some(format!("epoch {epoch}: non-finite loss {b:?}"));
                break 'outer;
            }
            let tape = lg.graph.backprop(
                lg.total,
                &Tensor::scalar(1.0),
                crate::autodiff::ReluRule::Standard,
            )?;
            let grads = tape.param_grads(&lg.graph, params.store.len());
            match adam_step(&mut params.store, &grads, &mut adam, &adam_cfg) {
                Ok(()) => {}
                Err(Error::NonFinite(msg)) => {
                    aborted = Some(format!("epoch {epoch}: {msg}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
            for (name, stats) in lg.updates {
                *params.store.stats_mut(&name)? = stats;
            }
            acc.rec += b.rec;
            acc.cross += b.cross;
            acc.trip_s += b.trip_s;
            acc.trip_a += b.trip_a;
            acc.total += b.total;
        }
        let k = config.batches_per_epoch as f64;
        let e = EpochLosses {
            epoch,
            l_rec: acc.rec / k,
            l_cross: acc.cross / k,
            l_trip_s: acc.trip_s / k,
            l_trip_a: acc.trip_a / k,
            total: acc.total / k,
        };
        log::debug!("epoch {epoch}: {e:?}");
        epochs.push(e);
    }
    if let Some(msg) = &aborted {
        log::warn!("training stopped: {msg}");
    }
    let validation_rec = if validation.is_empty() {
        None
    } else {
        let v: Vec<&Tensor> = validation.iter().map(|c| &c.tensor).collect();
        Some(loss_rec(&params, &v)?)
    };
    Ok(Trained {
        params,
        report: TrainReport {
            epochs,
            seed: config.seed,
            config_hash: fnv1a_hex(hash_src.as_bytes()),
            wall_clock_s: started.elapsed().as_secs_f64(),
            validation_rec,
            aborted,
        },
    })
}
