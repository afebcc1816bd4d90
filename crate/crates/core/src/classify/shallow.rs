use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-feature standardization fitted on a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let first = x
            .first()
            .ok_or_else(|| Error::invalid("cannot standardize an empty set"))?;
        let d = first.len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| self.apply(r)).collect()
    }
}

/// k-nearest-neighbour vote by Euclidean distance. Ties go to the label
/// with the smallest summed distance, then the smallest label.
pub fn knn_classify(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    k: usize,
    query: &[f64],
) -> Result<usize> {
    if train_x.is_empty() || train_x.len() != train_y.len() {
        return Err(Error::invalid(format!(
            "knn needs a non-empty training set with one label per row ({} rows, {} labels)",
            train_x.len(),
            train_y.len()
        )));
    }
    if k == 0 || k > train_x.len() {
        return Err(Error::invalid(format!(
            "k = {k} with {} training rows",
            train_x.len()
        )));
    }
    let mut d: Vec<(f64, usize)> = train_x
        .iter()
        .map(|r| sq_dist(r, query))
        .zip(train_y.iter().copied())
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_labels = train_y.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![(0usize, 0.0f64); n_labels];
    for &(dist, y) in &d[..k] {
        votes[y].0 += 1;
        votes[y].1 += dist.sqrt();
    }
    let best = (0..n_labels)
        .filter(|&y| votes[y].0 > 0)
        .min_by(|&a, &b| {
            votes[b]
                .0
                .cmp(&votes[a].0)
                .then(votes[a].1.total_cmp(&votes[b].1))
                .then(a.cmp(&b))
        })
        .expect("k >= 1 votes cast");
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty λ in λ/2·‖w‖² + mean hinge.
    pub reg: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            reg: 1e-3,
        }
    }
}

/// One-vs-rest linear separators.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Stochastic subgradient descent on the L2-regularized hinge loss, one
/// binary problem per class, with step size lr / (1 + λ·lr·t).
pub fn svm_train(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    cfg: &SvmConfig,
    seed: u64,
) -> Result<LinearSvm> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(
            "svm needs a non-empty training set with one label per row",
        ));
    }
    let distinct = y.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::invalid("svm needs at least two classes"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    let d = x[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut weights = vec![vec![0.0; d]; n_classes];
    let mut bias = vec![0.0; n_classes];
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = cfg.lr / (1.0 + cfg.reg * cfg.lr * t as f64);
            t += 1;
            let row = &x[i];
            for c in 0..n_classes {
                let target = if y[i] == c { 1.0 } else { -1.0 };
                let w = &mut weights[c];
                let margin =
                    target * (w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + bias[c]);
                let shrink = 1.0 - eta * cfg.reg;
                if margin < 1.0 {
                    for (wk, xk) in w.iter_mut().zip(row) {
                        *wk = *wk * shrink + eta * target * xk;
                    }
                    bias[c] += eta * target;
                } else {
                    w.iter_mut().for_each(|wk| *wk *= shrink);
                }
            }
        }
    }
    Ok(LinearSvm { weights, bias })
}

impl LinearSvm {
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(query).map(|(a, q)| a * q).sum::<f64>() + b)
            .collect()
    }
}

/// Class with the largest margin; ties go to the smaller class index.
pub fn svm_predict(model: &LinearSvm, query: &[f64]) -> usize {
    let s = model.scores(query);
    (0..s.len())
        .max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a)))
        .unwrap_or(0)
}
