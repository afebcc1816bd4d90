use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsaParams {
    /// Embedding window L in frames.
    pub window: usize,
    /// Leading eigentriples kept.
    pub components: usize,
}

impl Default for SsaParams {
    fn default() -> Self {
        Self::for_frame_rate(60.0)
    }
}

impl SsaParams {
    /// L = frame_rate / 3 (rounded), k = 2.
    pub fn for_frame_rate(fr: f64) -> Self {
        Self {
            window: ((fr / 3.0).round() as usize).max(2),
            components: 2,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.window < 2 || 2 * self.window > len {
            return Err(Error::invalid(format!(
                "SSA window {} needs 2 <= L <= len/2 (len {len})",
                self.window
            )));
        }
        if self.components == 0 || self.components > self.window {
            return Err(Error::invalid(format!(
                "SSA components {} must lie in 1..={}",
                self.components, self.window
            )));
        }
        Ok(())
    }
}

/// Singular spectrum analysis smoother: embed in an L-lag trajectory matrix,
/// project every window onto the k leading eigenvectors of its lag
/// covariance, and average the anti-diagonals back into a series.
pub fn ssa_smooth(series: &[f64], params: &SsaParams) -> Result<Vec<f64>> {
    let n = series.len();
    params.validate(n)?;
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SSA input".into()));
    }
    if series.iter().all(|&v| v == series[0]) {
        return Ok(series.to_vec());
    }
    let l = params.window;
    let k = n - l + 1;

    let mut cov = DMatrix::<f64>::zeros(l, l);
    for a in 0..l {
        for b in a..l {
            let s: f64 = (0..k).map(|i| series[i + a] * series[i + b]).sum::<f64>() / k as f64;
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let basis: Vec<Vec<f64>> = order[..params.components]
        .iter()
        .map(|&c| eig.eigenvectors.column(c).iter().copied().collect())
        .collect();

    let mut out = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut window = vec![0.0; l];
    for i in 0..k {
        window.iter_mut().for_each(|w| *w = 0.0);
        for u in &basis {
            let proj: f64 = u.iter().zip(&series[i..i + l]).map(|(a, b)| a * b).sum();
            for (w, &ui) in window.iter_mut().zip(u) {
                *w += proj * ui;
            }
        }
        for (j, w) in window.iter().enumerate() {
            out[i + j] += w;
            counts[i + j] += 1;
        }
    }
    for (o, c) in out.iter_mut().zip(&counts) {
        *o /= *c as f64;
    }
    Ok(out)
}
