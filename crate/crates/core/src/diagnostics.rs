//! Posterior-quality metrics: histogram marginals, Jensen-Shannon
//! divergence, percentile bands and field statistics.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default number of histogram bins over a prior range.
pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalDensity {
    pub edges: Vec<f64>,
    pub probs: Vec<f64>,
    /// Weight mass that fell outside the edges and was put into an end bin.
    pub clipped: f64,
}

/// `bins` equal-width bins spanning `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::InvalidConfig(format!("cannot bin [{lo}, {hi}] into {bins} bins")));
    }
    Ok((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
}

/// Normalized (weighted) histogram; samples outside the edges go to the
/// nearest end bin. The last bin is closed on the right.
pub fn histogram_density(samples: &[f64], weights: Option<&[f64]>, edges: &[f64]) -> Result<MarginalDensity> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidConfig("bin edges must be strictly increasing".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::ShapeMismatch("weights and samples differ in length".into()));
        }
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidConfig("weights must be non-negative".into()));
        }
    }
    let bins = edges.len() - 1;
    let mut mass = vec![0.0; bins];
    let mut clipped = 0.0;
    for (k, &x) in samples.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        let b = if x < edges[0] {
            clipped += w;
            0
        } else if x > edges[bins] {
            clipped += w;
            bins - 1
        } else {
            (edges.partition_point(|e| *e <= x) - 1).min(bins - 1)
        };
        mass[b] += w;
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptySampleSet);
    }
    Ok(MarginalDensity {
        edges: edges.to_vec(),
        probs: mass.iter().map(|m| m / total).collect(),
        clipped: clipped / total,
    })
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, m)| p * (p / m).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats; zero-probability bins contribute 0.
pub fn js_divergence(p: &MarginalDensity, q: &MarginalDensity) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::EdgeMismatch);
    }
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(&p.probs, &m) + 0.5 * kl_to_mixture(&q.probs, &m);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Linear-interpolation percentile of sorted data (`prob` in `[0, 1]`).
fn percentile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-time percentiles of an ensemble of series; result is indexed
/// `[prob][time]`.
pub fn series_percentiles(members: &[Vec<f64>], probs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let len = members.first().map(Vec::len).ok_or(Error::EmptyEnsemble)?;
    if members.iter().any(|m| m.len() != len) {
        return Err(Error::ShapeMismatch("series differ in length".into()));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidConfig("percentile probabilities must lie in [0, 1]".into()));
    }
    let mut out = vec![Vec::with_capacity(len); probs.len()];
    let mut column = Vec::with_capacity(members.len());
    for t in 0..len {
        column.clear();
        column.extend(members.iter().map(|m| m[t]));
        column.sort_by(f64::total_cmp);
        for (row, &p) in out.iter_mut().zip(probs) {
            row.push(percentile_sorted(&column, p));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `1 - posterior variance / prior variance`; 0 where the prior variance is 0.
    pub variance_reduction: Vec<f64>,
}

fn mean_var(members: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    if members.len() < 2 {
        return Err(Error::InsufficientMembers {
            needed: 2,
            got: members.len(),
        });
    }
    let dim = members[0].len();
    if members.iter().any(|m| m.len() != dim) {
        return Err(Error::ShapeMismatch("members differ in dimension".into()));
    }
    let n = members.len() as f64;
    let mut mean = vec![0.0; dim];
    for m in members {
        for (a, b) in mean.iter_mut().zip(m.iter()) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0; dim];
    for m in members {
        for ((v, x), mu) in var.iter_mut().zip(m.iter()).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n - 1.0);
    Ok((mean, var))
}

/// Cell-wise mean and variance pooled over all posterior ensembles, and the
/// variance reduction against a prior ensemble.
pub fn field_posterior_stats(posterior: &[&[Vec<f64>]], prior: &[Vec<f64>]) -> Result<FieldStats> {
    let post: Vec<&[f64]> = posterior.iter().flat_map(|e| e.iter().map(Vec::as_slice)).collect();
    let (mean, variance) = mean_var(&post)?;
    let pri: Vec<&[f64]> = prior.iter().map(Vec::as_slice).collect();
    let (_, prior_var) = mean_var(&pri)?;
    if prior_var.len() != variance.len() {
        return Err(Error::ShapeMismatch("prior and posterior fields differ in size".into()));
    }
    let variance_reduction = variance
        .iter()
        .zip(&prior_var)
        .map(|(v, p)| if *p > 0.0 { 1.0 - v / p } else { 0.0 })
        .collect();
    Ok(FieldStats {
        mean,
        variance,
        variance_reduction,
    })
}

/// Weighted samples of one or more parameters at a given run count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub runs: u64,
    /// One column per parameter.
    pub values: Vec<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

/// JS divergence of every snapshot marginal against the reference, per
/// parameter; `edges[k]` bins parameter `k`.
pub fn convergence_curve(snapshots: &[Snapshot], reference: &Snapshot, edges: &[Vec<f64>]) -> Result<Vec<(u64, Vec<f64>)>> {
    if snapshots.windows(2).any(|w| w[1].runs < w[0].runs) {
        return Err(Error::UnsortedSnapshots);
    }
    let refs: Vec<MarginalDensity> = edges
        .iter()
        .enumerate()
        .map(|(k, e)| histogram_density(&reference.values[k], reference.weights.as_deref(), e))
        .collect::<Result<_>>()?;
    snapshots
        .iter()
        .map(|s| {
            let js = edges
                .iter()
                .enumerate()
                .map(|(k, e)| {
                    let h = histogram_density(&s.values[k], s.weights.as_deref(), e)?;
                    js_divergence(&h, &refs[k])
                })
                .collect::<Result<_>>()?;
            Ok((s.runs, js))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::LN_2;

    fn density(probs: Vec<f64>) -> MarginalDensity {
        let edges = uniform_edges(0.0, 1.0, probs.len()).unwrap();
        MarginalDensity {
            edges,
            probs,
            clipped: 0.0,
        }
    }

    #[test]
    fn histogram_cases() {
        let edges = uniform_edges(0.0, 10.0, 10).unwrap();
        let h = histogram_density(&[3.5], None, &edges).unwrap();
        assert_eq!(h.probs[3], 1.0);
        let h = histogram_density(&[0.5, 9.5, 4.2], Some(&[0.0, 1.0, 0.0]), &edges).unwrap();
        assert_eq!(h.probs[9], 1.0);
        let h = histogram_density(&[-3.0, 12.0, 10.0], None, &edges).unwrap();
        assert!((h.probs[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((h.probs[9] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h.clipped - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(histogram_density(&[], None, &edges), Err(Error::EmptySampleSet)));
    }

    #[test]
    fn uniform_histogram() {
        let mut rng = Stream::seed_from_u64(12);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 + 2.5).collect();
        let h = histogram_density(&xs, None, &uniform_edges(2.5, 4.5, 20).unwrap()).unwrap();
        let se = (0.05 * 0.95 / n as f64).sqrt();
        for p in &h.probs {
            assert!((p - 0.05).abs() < 4.0 * se, "{p}");
        }
    }

    #[test]
    fn js_cases() {
        let p = density(vec![0.5, 0.5, 0.0, 0.0]);
        let q = density(vec![0.0, 0.0, 0.25, 0.75]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!((js_divergence(&p, &q).unwrap() - LN_2).abs() < 1e-12);
        let r = density(vec![0.5, 0.5]);
        assert!(matches!(js_divergence(&p, &r), Err(Error::EdgeMismatch)));
    }

    #[test]
    fn percentile_cases() {
        let members: Vec<Vec<f64>> = (1..=100).map(|v| vec![v as f64, 3.0]).collect();
        let pct = series_percentiles(&members, &[0.1, 0.5, 0.9]).unwrap();
        assert!((pct[1][0] - 50.5).abs() < 1e-12);
        assert_eq!(pct[0][1], 3.0);
        assert_eq!(pct[2][1], 3.0);
        assert!(matches!(series_percentiles(&[], &[0.5]), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn field_stats_cases() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 2.0]];
        let prior = vec![vec![0.0, 0.0], vec![4.0, 2.0]];
        let s = field_posterior_stats(&[&a], &prior).unwrap();
        assert_eq!(s.mean, vec![2.0, 2.0]);
        assert_eq!(s.variance, vec![2.0, 0.0]);
        assert_eq!(s.variance_reduction, vec![0.75, 1.0]);
        let same = vec![vec![1.0, 1.0]; 4];
        let s = field_posterior_stats(&[&same], &same).unwrap();
        assert_eq!(s.variance_reduction, vec![0.0, 0.0]);
        let one = vec![vec![1.0]];
        assert!(matches!(
            field_posterior_stats(&[&one], &one),
            Err(Error::InsufficientMembers { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn field_stats_self_comparison() {
        let mut rng = Stream::seed_from_u64(4);
        let ens: Vec<Vec<f64>> = (0..500).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
        let s = field_posterior_stats(&[&ens], &ens).unwrap();
        assert!(s.variance_reduction.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn convergence_curve_cases() {
        let edges = vec![uniform_edges(0.0, 1.0, 4).unwrap()];
        let reference = Snapshot {
            runs: 100,
            values: vec![vec![0.1, 0.2, 0.3]],
            weights: None,
        };
        let prior = Snapshot {
            runs: 10,
            values: vec![vec![0.1, 0.4, 0.6, 0.9]],
            weights: None,
        };
        let curve = convergence_curve(&[prior.clone(), reference.clone()], &reference, &edges).unwrap();
        assert_eq!(curve[1], (100, vec![0.0]));
        assert!(curve[0].1[0] > curve[1].1[0]);
        assert!(matches!(
            convergence_curve(&[reference.clone(), prior], &reference, &edges),
            Err(Error::UnsortedSnapshots)
        ));
    }

    fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], n).prop_filter_map("all zero", |v| {
            let s: f64 = v.iter().sum();
            (s > 0.0).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn js_bounds_and_symmetry(p in probs(12), q in probs(12)) {
            let (p, q) = (density(p), density(q));
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert!((0.0..=LN_2).contains(&a));
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
            if p.probs.iter().zip(&q.probs).any(|(x, y)| (x - y).abs() > 1e-9) {
                prop_assert!(a > 0.0);
            }
        }

        #[test]
        fn histogram_mass_is_conserved(xs in prop::collection::vec(-5.0..15.0f64, 1..200), bins in 1usize..30) {
            let h = histogram_density(&xs, None, &uniform_edges(0.0, 10.0, bins).unwrap()).unwrap();
            prop_assert!((h.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(h.probs.iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn percentiles_ordered_and_permutation_invariant(
            mut vals in prop::collection::vec(-100.0..100.0f64, 1..60),
            pa in 0.0..1.0f64,
            pb in 0.0..1.0f64,
        ) {
            let (lo, hi) = if pa <= pb { (pa, pb) } else { (pb, pa) };
            let members: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v]).collect();
            let a = series_percentiles(&members, &[lo, 0.5, hi]).unwrap();
            prop_assert!(a[0][0] <= a[2][0]);
            if lo <= 0.5 {
                prop_assert!(a[0][0] <= a[1][0]);
            }
            if hi >= 0.5 {
                prop_assert!(a[1][0] <= a[2][0]);
            }
            vals.reverse();
            let rev: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v]).collect();
            prop_assert_eq!(series_percentiles(&rev, &[lo, 0.5, hi]).unwrap(), a);
        }
    }
}
