use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Domain, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions { perplexity: 15.0, iterations: 500, learning_rate: 100.0, seed: 0 }
    }
}

fn check(points: &[Vec<f64>]) -> Result<usize> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("projection needs at least 3 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("project_2d", "points of unequal or zero dimension"));
    }
    Ok(dim)
}

pub fn project_2d(points: &[Vec<f64>], method: ProjectionMethod, tsne: &TsneOptions) -> Result<Vec<[f64; 2]>> {
    match method {
        ProjectionMethod::Pca => Ok(pca(points)?.coords),
        ProjectionMethod::Tsne => tsne_2d(points, tsne),
    }
}

/// Top-two principal axes and the centered coordinates along them.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit axes; an axis is all zeros when the data has no variance left.
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

impl Pca {
    pub fn reconstruct(&self, c: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len()).map(|d| self.mean[d] + c[0] * self.axes[0][d] + c[1] * self.axes[1][d]).collect()
    }
}

/// Eigen-decomposition of the sample covariance. Components with no variance
/// come out as zero coordinates.
pub fn pca(points: &[Vec<f64>]) -> Result<Pca> {
    let dim = check(points)?;
    let n = points.len();
    let mean: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let axis = |k: usize| -> (Vec<f64>, f64) {
        match order.get(k) {
            Some(&i) if eig.eigenvalues[i] > 1e-12 * scale => {
                let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                // Sign convention: largest-magnitude coordinate positive.
                let big = (0..dim).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
                if v[big] < 0.0 {
                    v.iter_mut().for_each(|c| *c = -*c);
                }
                (v, eig.eigenvalues[i])
            }
            _ => (vec![0.0; dim], 0.0),
        }
    };
    let (a0, v0) = axis(0);
    let (a1, v1) = axis(1);
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            [row.iter().zip(&a0).map(|(p, q)| p * q).sum(), row.iter().zip(&a1).map(|(p, q)| p * q).sum()]
        })
        .collect();
    Ok(Pca { mean, axes: [a0, a1], variances: [v0, v1], coords })
}

/// Row `i` of the conditional affinities, with the Gaussian precision found
/// by bisection so that the row entropy matches `ln(perplexity)`.
fn affinity_row(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..100 {
        let mut sum = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = if j == i { 0.0 } else { (-beta * d2[j]).exp() };
            sum += *pj;
        }
        if sum == 0.0 {
            // Precision too high for every neighbour: relax it.
            hi = beta;
            beta = (lo + hi) / 2.0;
            continue;
        }
        let mut h = 0.0;
        for pj in p.iter_mut() {
            *pj /= sum;
            if *pj > 0.0 {
                h -= *pj * pj.ln();
            }
        }
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (lo + hi) / 2.0;
        }
    }
    p
}

/// Exact t-SNE: symmetric joint affinities, Student-t output kernel, gradient
/// descent with momentum and early exaggeration.
pub fn tsne_2d(points: &[Vec<f64>], opts: &TsneOptions) -> Result<Vec<[f64; 2]>> {
    check(points)?;
    let n = points.len();
    if !(opts.perplexity > 0.0) || opts.iterations == 0 {
        return Err(Error::InvalidArgument("t-SNE needs positive perplexity and iterations".into()));
    }
    // Perplexity cannot exceed the number of neighbours.
    let perplexity = opts.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d2: Vec<f64> = points.iter().map(|q| points[i].iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let row = affinity_row(&d2, i, perplexity);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = RngStream::derive(opts.seed, Domain::Projection, n as u64);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-4 * rng.normal(), 1e-4 * rng.normal()]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let exaggeration_until = (opts.iterations / 4).min(250);
    let mut q = vec![0.0; n * n];
    for it in 0..opts.iterations {
        let exaggeration = if it < exaggeration_until { 12.0 } else { 1.0 };
        let momentum = if it < exaggeration_until { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j { 0.0 } else { 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2)) };
                q[i * n + j] = v;
                z += v;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff = 4.0 * (exaggeration * joint[i * n + j] - w / z) * w;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                gains[i][d] = if (g[d] > 0.0) != (velocity[i][d] > 0.0) { gains[i][d] + 0.2 } else { (gains[i][d] * 0.8).max(0.01) };
                velocity[i][d] = momentum * velocity[i][d] - opts.learning_rate * gains[i][d] * g[d];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = [y.iter().map(|v| v[0]).sum::<f64>() / n as f64, y.iter().map(|v| v[1]).sum::<f64>() / n as f64];
        y.iter_mut().for_each(|v| {
            v[0] -= mean[0];
            v[1] -= mean[1];
        });
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::NonFinite { op: "tsne" });
    }
    Ok(y)
}
