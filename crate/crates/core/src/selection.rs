//! Turning weighted particles into equally weighted samples and picking
//! representative points among them.

use rand::Rng;

use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// Systematic resampling: one offset `u ~ U[0, 1/m)`, then the index whose
/// cumulative weight first exceeds `u + j/m` for each `j`.
///
/// Returned indices are sorted. Weights need not be normalized.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::InvalidConfig("resample count must be >= 1".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidConfig("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptySampleSet);
    }
    let u0: f64 = rng.random::<f64>() / m as f64;
    let mut out = Vec::with_capacity(m);
    let mut i = 0;
    let mut cum = weights[0] / total;
    for j in 0..m {
        let target = u0 + j as f64 / m as f64;
        while cum <= target && i + 1 < weights.len() {
            i += 1;
            cum += weights[i] / total;
        }
        // Rounding in the running sum must never land on a zero weight.
        while weights[i] == 0.0 && i > 0 {
            i -= 1;
        }
        out.push(i);
    }
    Ok(out)
}

/// Outcome of representative selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Medoids {
    /// Index into the input of each representative.
    pub indices: Vec<usize>,
    /// Cluster label per input point.
    pub labels: Vec<usize>,
    /// Sum of squared standardized distances to the assigned centroid.
    pub inertia: f64,
}

fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let dim = points[0].len();
    let mut out = points.to_vec();
    for d in 0..dim {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for p in &mut out {
            p[d] = if sd > 0.0 { (p[d] - mean) / sd } else { 0.0 };
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, x)| (c, sq_dist(p, x)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

fn kmeans_once(z: &[Vec<f64>], k: usize, rng: &mut Stream) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let n = z.len();
    // k-means++ seeding.
    let mut centers = vec![z[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = z.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > u && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(z[next].clone());
        for (d, p) in d2.iter_mut().zip(z) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in z.iter().enumerate() {
            let (c, _) = nearest(p, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = z[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in z.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = z.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (centers, labels, inertia)
}

/// Picks `k` representative input points: k-means++ and Lloyd iterations in
/// z-scored coordinates, best of `restarts` by inertia, then each cluster is
/// represented by its medoid (the member with the least summed Euclidean
/// distance to the other members).
pub fn kmedoids_select(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Medoids> {
    if points.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("points differ in dimension".into()));
    }
    let distinct = count_distinct(points);
    if k == 0 || k > distinct {
        return Err(Error::InsufficientDistinctPoints { requested: k, distinct });
    }
    let z = standardize(points);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = stream(seed, &[r as u64]);
        let (_, labels, inertia) = kmeans_once(&z, k, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    let (mut labels, inertia) = best.unwrap();

    // Lloyd can empty a cluster; give it the point farthest from its centroid.
    let mut indices = Vec::with_capacity(k);
    let mut used = vec![false; points.len()];
    for c in 0..k {
        let members: Vec<usize> = (0..z.len()).filter(|&i| labels[i] == c).collect();
        let medoid = if members.is_empty() {
            let i = (0..z.len())
                .filter(|&i| !used[i] && !indices.iter().any(|&m: &usize| points[m] == points[i]))
                .max_by(|&a, &b| {
                    let da = nearest(&z[a], &indices.iter().map(|&m| z[m].clone()).collect::<Vec<_>>()).1;
                    let db = nearest(&z[b], &indices.iter().map(|&m| z[m].clone()).collect::<Vec<_>>()).1;
                    da.total_cmp(&db)
                })
                .ok_or(Error::InsufficientDistinctPoints { requested: k, distinct })?;
            labels[i] = c;
            i
        } else {
            *members
                .iter()
                .min_by(|&&a, &&b| {
                    let sa: f64 = members.iter().map(|&j| sq_dist(&z[a], &z[j]).sqrt()).sum();
                    let sb: f64 = members.iter().map(|&j| sq_dist(&z[b], &z[j]).sqrt()).sum();
                    sa.total_cmp(&sb)
                })
                .unwrap()
        };
        used[medoid] = true;
        indices.push(medoid);
    }
    Ok(Medoids {
        indices,
        labels,
        inertia,
    })
}
