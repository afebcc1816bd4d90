use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::invalid("silhouette needs one label per point"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let scores = crate::parallel::map_range(points.len(), |i| {
        let own = labels[i];
        if sizes[own] < 2 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        for (j, p) in points.iter().enumerate() {
            if j != i {
                sums[labels[j]] += dist(&points[i], p);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            (b - a) / m
        } else {
            0.0
        }
    });
    Ok(scores.iter().sum::<f64>() / points.len() as f64)
}

/// Projection of centered points onto their `dims` leading principal axes.
/// Each axis is signed so that its largest-magnitude loading is positive.
pub fn pca_project(points: &[Vec<f64>], dims: usize) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n < 2 || dims == 0 || dims > d {
        return Err(Error::invalid(format!(
            "cannot project {n} points of dim {d} onto {dims} axes"
        )));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..dims]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let big = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            axes.iter()
                .map(|a| (0..d).map(|j| x[(i, j)] * a[j]).sum())
                .collect()
        })
        .collect())
}
