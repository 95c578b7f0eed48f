//! Samplers: SMC-ABC and rejection sampling for hyperparameters, ESMDA for
//! grid-block states, and the hierarchical driver that chains them.

mod esmda;
mod hierarchical;
mod rejection;
mod smc;

pub use esmda::{
    esmda_run, esmda_step, perturb_observations, perturb_observations_with, AlphaSchedule, EnsembleState,
    EsmdaConfig, EsmdaOutcome, ALPHAS_10, ALPHAS_20, ALPHAS_4,
};
pub use hierarchical::{
    hierarchical_run, hyper_from_state, modified_esmda_run, HierarchicalConfig, HierarchicalOutcome,
    ModifiedEsmdaOutcome, RepresentativeRun,
};
pub use rejection::{rejection_sampling, RsConfig, RsOutcome, RsSample};
pub use smc::{smc_abc, Particle, Population, SmcConfig, SmcOutcome, Termination};

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::forward::{observe, simulate, Channel, DataVector, NoiseModel, SimConfig};
use crate::geomodel::{FieldGenerator, FieldRealization, HyperParams};
use crate::{Error, Result};

/// Forward map from a hyperparameter set and a realization seed to
/// simulated data: one call is one forward run.
pub trait HyperForward: Sync {
    fn run(&self, h: &HyperParams, seed: u64) -> Result<DataVector>;
}

impl<F> HyperForward for F
where
    F: Fn(&HyperParams, u64) -> Result<DataVector> + Sync,
{
    fn run(&self, h: &HyperParams, seed: u64) -> Result<DataVector> {
        self(h, seed)
    }
}

/// Forward map from an ESMDA state vector to simulated data values.
pub trait StateForward: Sync {
    fn run(&self, state: &[f64]) -> Result<Vec<f64>>;
}

impl<F> StateForward for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    fn run(&self, state: &[f64]) -> Result<Vec<f64>> {
        self(state)
    }
}

/// Forward map from a permeability field to simulated data.
pub trait FieldForward: Sync {
    fn run_field(&self, m: &FieldRealization) -> Result<DataVector>;
}

/// Field generation, simulation and observation bundled as one forward map.
pub struct Simulator {
    pub generator: FieldGenerator,
    pub sim: SimConfig,
    /// Report indices that are observed.
    pub schedule: Vec<usize>,
    pub channels: Vec<Channel>,
    calls: AtomicU64,
}

impl Simulator {
    pub fn new(generator: FieldGenerator, sim: SimConfig, schedule: Vec<usize>, channels: Vec<Channel>) -> Result<Self> {
        sim.validate()?;
        if *generator.grid() != sim.grid {
            return Err(Error::ShapeMismatch("generator and simulation grids differ".into()));
        }
        if let Some(&index) = schedule.iter().find(|&&i| i >= sim.report_times.len()) {
            return Err(Error::IndexOutOfRange {
                index,
                len: sim.report_times.len(),
            });
        }
        Ok(Simulator {
            generator,
            sim,
            schedule,
            channels,
            calls: AtomicU64::new(0),
        })
    }

    /// Number of simulations run so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl FieldForward for Simulator {
    fn run_field(&self, m: &FieldRealization) -> Result<DataVector> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        observe(&simulate(m, &self.sim)?, &self.schedule, &self.channels)
    }
}

impl HyperForward for Simulator {
    fn run(&self, h: &HyperParams, seed: u64) -> Result<DataVector> {
        let m = self.generator.generate(h, seed)?;
        self.run_field(&m)
    }
}

/// Wraps a forward map and counts its invocations.
pub struct Counted<F> {
    inner: F,
    calls: AtomicU64,
}

impl<F> Counted<F> {
    pub fn new(inner: F) -> Self {
        Counted {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: HyperForward> HyperForward for Counted<F> {
    fn run(&self, h: &HyperParams, seed: u64) -> Result<DataVector> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.run(h, seed)
    }
}

impl<F: StateForward> StateForward for Counted<F> {
    fn run(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.run(state)
    }
}

/// Weighted squared distance between simulated `y` and observed `d`,
/// each residual scaled by its channel's noise standard deviation.
pub fn distance(y: &DataVector, d: &DataVector, nm: &NoiseModel) -> Result<f64> {
    y.ensure_same_layout(d)?;
    let mut total = 0.0;
    for ((a, b), ch) in y.values.iter().zip(&d.values).zip(&d.channels) {
        let sigma = nm.sigma(*ch);
        if sigma == 0.0 {
            return Err(Error::ZeroSigma(ch.name()));
        }
        let r = (a - b) / sigma;
        total += r * r;
    }
    Ok(total)
}

/// Gaussian log-likelihood with diagonal measurement covariance `r_diag`.
pub fn log_likelihood(y: &[f64], d_obs: &[f64], r_diag: &[f64]) -> Result<f64> {
    if y.len() != d_obs.len() || y.len() != r_diag.len() {
        return Err(Error::ShapeMismatch(format!(
            "likelihood sizes {} / {} / {}",
            y.len(),
            d_obs.len(),
            r_diag.len()
        )));
    }
    let mut ll = 0.0;
    for ((y, d), r) in y.iter().zip(d_obs).zip(r_diag) {
        if !(*r > 0.0) {
            return Err(Error::InvalidConfig("measurement variances must be > 0".into()));
        }
        let e = d - y;
        ll -= 0.5 * ((2.0 * std::f64::consts::PI * r).ln() + e * e / r);
    }
    Ok(ll)
}

/// Prior quadratic form `vᵀ Σ⁺ v` used by [`objective`].
pub trait PriorPrecision {
    fn dim(&self) -> usize;
    fn quad_form(&self, v: &[f64]) -> f64;
}

/// Independent prior variances.
pub struct DiagonalPrecision(pub Vec<f64>);

impl PriorPrecision for DiagonalPrecision {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn quad_form(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.0).map(|(x, s)| x * x / s).sum()
    }
}

/// Prior covariance represented by ensemble anomalies,
/// `Σ = A Aᵀ / (N - 1)`, applied through its pseudo-inverse.
pub struct EnsemblePrecision {
    basis: DMatrix<f64>,
    inv_eig: Vec<f64>,
}

impl EnsemblePrecision {
    /// `members` holds one state vector per column.
    pub fn new(members: &DMatrix<f64>) -> Result<Self> {
        let n_e = members.ncols();
        if n_e < 2 {
            return Err(Error::InsufficientMembers { needed: 2, got: n_e });
        }
        let mean = members.column_mean();
        let mut anomalies = members.clone();
        for mut col in anomalies.column_iter_mut() {
            col -= &mean;
        }
        let svd = anomalies.svd(true, false);
        let u = svd.u.ok_or(Error::FactorizationFailure)?;
        let smax = svd.singular_values.max();
        let tol = smax * 1e-10 * (members.nrows().max(n_e) as f64);
        let mut cols = Vec::new();
        let mut inv_eig = Vec::new();
        for (k, s) in svd.singular_values.iter().enumerate() {
            if *s > tol {
                cols.push(u.column(k).into_owned());
                inv_eig.push((n_e - 1) as f64 / (s * s));
            }
        }
        let basis = if cols.is_empty() {
            DMatrix::zeros(members.nrows(), 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Ok(EnsemblePrecision { basis, inv_eig })
    }
}

impl PriorPrecision for EnsemblePrecision {
    fn dim(&self) -> usize {
        self.basis.nrows()
    }

    fn quad_form(&self, v: &[f64]) -> f64 {
        let proj = self.basis.tr_mul(&DVector::from_column_slice(v));
        proj.iter().zip(&self.inv_eig).map(|(p, w)| p * p * w).sum()
    }
}

/// Regularized least-squares objective
/// `½‖d_obs − y‖²_R + ½‖m − m̄‖²_Σ`, reported for diagnostics only.
pub fn objective(
    m: &[f64],
    m_bar: &[f64],
    prior: &dyn PriorPrecision,
    y: &[f64],
    d_obs: &[f64],
    r_diag: &[f64],
) -> Result<f64> {
    if m.len() != m_bar.len() || m.len() != prior.dim() {
        return Err(Error::ShapeMismatch("model vector sizes differ".into()));
    }
    if y.len() != d_obs.len() || y.len() != r_diag.len() {
        return Err(Error::ShapeMismatch("data vector sizes differ".into()));
    }
    let data: f64 = y
        .iter()
        .zip(d_obs)
        .zip(r_diag)
        .map(|((y, d), r)| (d - y) * (d - y) / r)
        .sum();
    let dm: Vec<f64> = m.iter().zip(m_bar).map(|(a, b)| a - b).collect();
    Ok(0.5 * data + 0.5 * prior.quad_form(&dm))
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub(crate) fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dv(values: Vec<f64>, channels: Vec<Channel>) -> DataVector {
        let times = vec![1.0; values.len()];
        DataVector::new(values, channels, times).unwrap()
    }

    #[test]
    fn distance_cases() {
        let nm = NoiseModel::new(0.1, 0.05).unwrap();
        let mut ch = vec![Channel::Pressure; 5];
        ch.extend(vec![Channel::Saturation; 5]);
        let d = dv(vec![1.0; 10], ch.clone());
        assert_eq!(distance(&d, &d, &nm).unwrap(), 0.0);

        let y = dv(
            (0..10).map(|i| if i < 5 { 1.1 } else { 0.95 }).collect(),
            ch.clone(),
        );
        assert!((distance(&y, &d, &nm).unwrap() - 10.0).abs() < 1e-12);

        let dp = dv(vec![2.0, 3.0], vec![Channel::Pressure; 2]);
        let yp = dv(vec![2.2, 3.0], vec![Channel::Pressure; 2]);
        assert!((distance(&yp, &dp, &nm).unwrap() - 4.0).abs() < 1e-12);

        // Saturation sigma may be zero when only pressure is observed.
        let nm_p = NoiseModel::new(0.1, 0.0).unwrap();
        assert!(distance(&yp, &dp, &nm_p).is_ok());
        assert!(matches!(distance(&y, &d, &nm_p), Err(Error::ZeroSigma("saturation"))));
        assert!(matches!(distance(&yp, &d, &nm), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn likelihood_algebra() {
        let s2: f64 = 0.04;
        let ll = log_likelihood(&[1.0], &[1.0], &[s2]).unwrap();
        assert!((ll + 0.5 * (2.0 * PI * s2).ln()).abs() < 1e-14);
        let ll1 = log_likelihood(&[1.2], &[1.0], &[s2]).unwrap();
        assert!((ll1 - (-0.5 * (2.0 * PI * s2).ln() - 0.5)).abs() < 1e-12);

        let r = [0.01, 0.04, 0.0025];
        let d = [1.0, 2.0, 0.3];
        let y1 = [1.05, 1.7, 0.31];
        let y2 = [0.9, 2.2, 0.25];
        let q = |y: &[f64]| -> f64 { y.iter().zip(&d).zip(&r).map(|((y, d), r)| (d - y) * (d - y) / r).sum() };
        let diff = log_likelihood(&y1, &d, &r).unwrap() - log_likelihood(&y2, &d, &r).unwrap();
        assert!((diff - (-0.5 * (q(&y1) - q(&y2)))).abs() < 1e-12);
        assert!(log_likelihood(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn objective_cases() {
        let prior = DiagonalPrecision(vec![1.0; 3]);
        let m = [0.5, 1.0, -1.0];
        let d = vec![1.0; 10];
        let r = vec![0.04; 10];
        assert_eq!(objective(&m, &m, &prior, &d, &d, &r).unwrap(), 0.0);
        let y: Vec<f64> = d.iter().map(|v| v + 0.2).collect();
        let j1 = objective(&m, &m, &prior, &y, &d, &r).unwrap();
        assert!((j1 - 5.0).abs() < 1e-12);
        let y2: Vec<f64> = d.iter().map(|v| v + 0.4).collect();
        let j2 = objective(&m, &m, &prior, &y2, &d, &r).unwrap();
        assert!((j2 - 4.0 * j1).abs() < 1e-12);
        assert!(objective(&m[..2], &m[..2], &prior, &y, &d, &r).is_err());
    }

    #[test]
    fn ensemble_precision_inverts_on_span() {
        // Two-member ensemble along e1: Σ = diag(2, 0), pseudo-inverse 1/2 on e1.
        let members = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let p = EnsemblePrecision::new(&members).unwrap();
        assert!((p.quad_form(&[2.0, 5.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_is_lower() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), 3.0);
    }
}
