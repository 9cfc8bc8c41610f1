use crate::error::{Error, Result};
use crate::numerics::{Domain, RngStream};

/// Restarts, iteration cap and relative-change tolerance of Lloyd's
/// iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions { restarts: 8, max_iter: 200, tol: 1e-6, seed: 0 }
    }
}

/// Best clustering found for one `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding: first center uniform, later ones drawn with
/// probability proportional to squared distance from the nearest center.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.below(points.len())
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("non-empty")));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, opts: &KMeansOptions) -> KMeansResult {
    let dim = points[0].len();
    let mut assignment = vec![0; points.len()];
    let mut inertia = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let mut next = 0.0;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (i, d) = nearest(p, &centers);
            *a = i;
            next += d;
        }
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for (c, (s, &n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            // An emptied cluster keeps its previous center.
            if n > 0 {
                *c = s.iter().map(|v| v / n as f64).collect();
            }
        }
        let converged = inertia.is_finite() && (inertia - next).abs() <= opts.tol * inertia.max(f64::MIN_POSITIVE);
        inertia = next;
        if converged {
            break;
        }
    }
    // Final inertia against the final centers.
    let mut total = 0.0;
    for (a, p) in assignment.iter_mut().zip(points) {
        let (i, d) = nearest(p, &centers);
        *a = i;
        total += d;
    }
    KMeansResult { centers, assignment, inertia: total }
}

/// Best of `opts.restarts` seeded k-means++ runs.
pub fn kmeans(points: &[Vec<f64>], k: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Empty("k-means points"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!("k = {k} with {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", "points of unequal dimension"));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng = RngStream::derive(opts.seed, Domain::Cluster, (k * 1000 + r) as u64);
        let res = lloyd(points, seed_centers(points, k, &mut rng), opts);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Inertia for each `k` in `ks`. Restarts can still leave a larger `k` above
/// a smaller one, so each value is capped by the previous one's clustering
/// with its widest cluster split in two, which is never worse.
pub fn kmeans_inertia_curve(points: &[Vec<f64>], ks: &[usize], opts: &KMeansOptions) -> Result<Vec<(usize, f64)>> {
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(ks.len());
    let mut prev: Option<KMeansResult> = None;
    for &k in ks {
        let mut res = kmeans(points, k, opts)?;
        if let Some(p) = prev.as_ref().filter(|p| p.centers.len() < k) {
            let mut centers = p.centers.clone();
            while centers.len() < k {
                // Add the point farthest from its center; Lloyd refinement
                // cannot increase inertia from there.
                let far = points
                    .iter()
                    .map(|q| nearest(q, &centers).1)
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b })
                    .0;
                centers.push(points[far].clone());
            }
            let grown = lloyd(points, centers, opts);
            if grown.inertia < res.inertia {
                res = grown;
            }
        }
        out.push((k, res.inertia));
        prev = Some(res);
    }
    Ok(out)
}
