use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StateForward;
use crate::geomodel::HyperParams;
use crate::rng::stream;
use crate::{Error, Result};

/// Inflation coefficients for four assimilation steps.
pub const ALPHAS_4: [f64; 4] = [9.333, 7.0, 4.0, 2.0];

/// Inflation coefficients for ten assimilation steps.
pub const ALPHAS_10: [f64; 10] = [57.017, 35.0, 25.0, 20.0, 18.0, 15.0, 12.0, 8.0, 5.0, 3.0];

/// Inflation coefficients for twenty assimilation steps.
pub const ALPHAS_20: [f64; 20] = [
    129.635, 105.0, 95.0, 85.0, 75.0, 65.0, 60.0, 55.0, 50.0, 45.0, 40.0, 35.0, 30.0, 25.0, 20.0, 15.0, 12.0, 9.0,
    6.0, 4.0,
];

/// Validated sequence of inflation coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AlphaSchedule(Vec<f64>);

impl AlphaSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidConfig("alpha schedule is empty".into()));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a >= 1.0)) {
            return Err(Error::InvalidConfig(format!("alpha {a} is below 1")));
        }
        let s = AlphaSchedule(alphas);
        if (s.inverse_sum() - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidConfig(format!(
                "inverse alphas sum to {}, expected 1",
                s.inverse_sum()
            )));
        }
        Ok(s)
    }

    pub fn inverse_sum(&self) -> f64 {
        self.0.iter().map(|a| 1.0 / a).sum()
    }

    pub fn steps(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for AlphaSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        AlphaSchedule::new(v)
    }
}

impl From<AlphaSchedule> for Vec<f64> {
    fn from(s: AlphaSchedule) -> Self {
        s.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsmdaConfig {
    pub n_e: usize,
    pub alphas: AlphaSchedule,
    /// Measurement-error variances per observation.
    pub r_diag: Vec<f64>,
}

impl EsmdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_e < 2 {
            return Err(Error::InsufficientMembers {
                needed: 2,
                got: self.n_e,
            });
        }
        if self.r_diag.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidConfig("measurement variances must be > 0".into()));
        }
        Ok(())
    }

    pub fn forward_runs(&self) -> u64 {
        (self.n_e * self.alphas.steps()) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub members: Vec<Vec<f64>>,
    /// Predicted data per member; empty until evaluated.
    pub predicted: Vec<Vec<f64>>,
    /// Fixed hyperparameters of the run, if any.
    pub hyper: Option<HyperParams>,
}

impl EnsembleState {
    pub fn new(members: Vec<Vec<f64>>, hyper: Option<HyperParams>) -> Result<Self> {
        let dim = members.first().map(Vec::len).ok_or(Error::EmptyEnsemble)?;
        if members.iter().any(|m| m.len() != dim) {
            return Err(Error::ShapeMismatch("ensemble members differ in dimension".into()));
        }
        Ok(EnsembleState {
            members,
            predicted: Vec::new(),
            hyper,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    /// Member mean per state coordinate.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for x in &self.members {
            for (a, b) in m.iter_mut().zip(x) {
                *a += b / n;
            }
        }
        m
    }
}

/// `d_obs + sqrt(alpha) * R^{1/2} z` for a given standard-normal vector `z`.
pub fn perturb_observations_with(d_obs: &[f64], alpha: f64, r_diag: &[f64], z: &[f64]) -> Vec<f64> {
    let s = alpha.sqrt();
    d_obs
        .iter()
        .zip(r_diag)
        .zip(z)
        .map(|((d, r), z)| d + s * r.sqrt() * z)
        .collect()
}

pub fn perturb_observations<R: Rng + ?Sized>(d_obs: &[f64], alpha: f64, r_diag: &[f64], rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..d_obs.len()).map(|_| rng.sample(StandardNormal)).collect();
    perturb_observations_with(d_obs, alpha, r_diag, &z)
}

fn anomalies(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let n = cols.len();
    let dim = cols[0].len();
    let mut a = DMatrix::from_fn(dim, n, |i, j| cols[j][i]);
    let mean = a.column_mean();
    for mut c in a.column_iter_mut() {
        c -= &mean;
    }
    a
}

/// One ensemble-smoother update with inflation `alpha`.
///
/// Member `i` perturbs the observations with stream `[i]` under `seed`.
pub fn esmda_step(ens: &EnsembleState, d_obs: &[f64], alpha: f64, r_diag: &[f64], seed: u64) -> Result<EnsembleState> {
    let n_e = ens.len();
    if n_e < 2 {
        return Err(Error::InsufficientMembers { needed: 2, got: n_e });
    }
    if ens.predicted.len() != n_e {
        return Err(Error::ShapeMismatch("predicted data missing for some members".into()));
    }
    let n_d = d_obs.len();
    if r_diag.len() != n_d || ens.predicted.iter().any(|y| y.len() != n_d) {
        return Err(Error::ShapeMismatch("predicted data and observations differ in length".into()));
    }
    let scale = 1.0 / (n_e - 1) as f64;
    let dm = anomalies(&ens.members);
    let dd = anomalies(&ens.predicted);
    let c_md = &dm * dd.transpose() * scale;
    let mut innov = &dd * dd.transpose() * scale;
    for (i, r) in r_diag.iter().enumerate() {
        innov[(i, i)] += alpha * r;
    }
    let chol = innov.cholesky().ok_or(Error::SingularInnovationMatrix)?;

    let mut resid = DMatrix::zeros(n_d, n_e);
    for (i, y) in ens.predicted.iter().enumerate() {
        let mut rng = stream(seed, &[i as u64]);
        let d_uc = perturb_observations(d_obs, alpha, r_diag, &mut rng);
        for k in 0..n_d {
            resid[(k, i)] = d_uc[k] - y[k];
        }
    }
    let x = chol.solve(&resid);
    let update = &c_md * x;
    let members = ens
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let u = update.column(i);
            m.iter().zip(u.iter()).map(|(a, b)| a + b).collect()
        })
        .collect();
    Ok(EnsembleState {
        members,
        predicted: Vec::new(),
        hyper: ens.hyper,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsmdaOutcome {
    pub ensemble: EnsembleState,
    pub forward_runs: u64,
    /// Data mismatch `Σ (d - y)² / R` of the ensemble mean prediction per step.
    pub mean_misfit: Vec<f64>,
}

/// Runs all assimilation steps; step `j` updates with seed `[seed, j]`.
pub fn esmda_run<F: StateForward + ?Sized>(
    initial: EnsembleState,
    fwd: &F,
    d_obs: &[f64],
    cfg: &EsmdaConfig,
    seed: u64,
) -> Result<EsmdaOutcome> {
    cfg.validate()?;
    if initial.len() != cfg.n_e {
        return Err(Error::ShapeMismatch(format!(
            "ensemble has {} members, config expects {}",
            initial.len(),
            cfg.n_e
        )));
    }
    if cfg.r_diag.len() != d_obs.len() {
        return Err(Error::ShapeMismatch("r_diag and observations differ in length".into()));
    }
    let mut ens = initial;
    let mut runs = 0u64;
    let mut mean_misfit = Vec::new();
    for (j, &alpha) in cfg.alphas.as_slice().iter().enumerate() {
        let abort = |runs: u64, source: Error| Error::EsmdaAborted {
            completed_steps: j,
            forward_runs: runs,
            source: Box::new(source),
        };
        let predicted: Vec<Result<Vec<f64>>> = ens.members.par_iter().map(|m| fwd.run(m)).collect();
        runs += predicted.len() as u64;
        ens.predicted = predicted
            .into_iter()
            .collect::<Result<_>>()
            .map_err(|e| abort(runs, e))?;
        let n = ens.len() as f64;
        let mut y_bar = DVector::zeros(d_obs.len());
        for y in &ens.predicted {
            y_bar += DVector::from_column_slice(y) / n;
        }
        mean_misfit.push(
            d_obs
                .iter()
                .zip(y_bar.iter())
                .zip(&cfg.r_diag)
                .map(|((d, y), r)| (d - y) * (d - y) / r)
                .sum(),
        );
        let step_seed = crate::rng::derive_seed(seed, &[j as u64]);
        ens = esmda_step(&ens, d_obs, alpha, &cfg.r_diag, step_seed).map_err(|e| abort(runs, e))?;
    }
    Ok(EsmdaOutcome {
        ensemble: ens,
        forward_runs: runs,
        mean_misfit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Counted;
    use rand::SeedableRng;

    #[test]
    fn schedules_sum_to_one() {
        for s in [&ALPHAS_4[..], &ALPHAS_10[..], &ALPHAS_20[..]] {
            let a = AlphaSchedule::new(s.to_vec()).unwrap();
            assert!((a.inverse_sum() - 1.0).abs() < 1e-3, "{}", a.inverse_sum());
        }
        assert!(AlphaSchedule::new(vec![2.0, 2.0]).is_ok());
        assert!(AlphaSchedule::new(vec![2.0]).is_err());
        assert!(AlphaSchedule::new(vec![0.5, -1.0]).is_err());
        assert!(AlphaSchedule::new(vec![]).is_err());
        let parsed: std::result::Result<AlphaSchedule, _> = serde_json::from_str("[3.0, 3.0, 3.0]");
        assert!(parsed.is_ok());
    }

    #[test]
    fn zero_noise_perturbation_is_identity() {
        let d = [1.0, 2.0, 3.0];
        assert_eq!(perturb_observations_with(&d, 4.0, &[0.1, 0.2, 0.3], &[0.0; 3]), d.to_vec());
    }

    #[test]
    fn perturbation_variance() {
        let d = [0.0, 5.0];
        let r = [0.04, 0.0025];
        let alpha = 7.0;
        let mut rng = crate::rng::Stream::seed_from_u64(17);
        let n = 100_000;
        let mut sq = [0.0; 2];
        let mut cross = 0.0;
        for _ in 0..n {
            let p = perturb_observations(&d, alpha, &r, &mut rng);
            let e = [p[0] - d[0], p[1] - d[1]];
            sq[0] += e[0] * e[0];
            sq[1] += e[1] * e[1];
            cross += e[0] * e[1];
        }
        for k in 0..2 {
            let v = sq[k] / n as f64;
            assert!((v / (alpha * r[k]) - 1.0).abs() < 0.02, "component {k}: {v}");
        }
        let corr = cross / (sq[0] * sq[1]).sqrt();
        assert!(corr.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn zero_cross_covariance_leaves_members() {
        // Predictions identical across members: no anomaly, no gain.
        let members = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let mut ens = EnsembleState::new(members.clone(), None).unwrap();
        ens.predicted = vec![vec![4.0]; 3];
        let post = esmda_step(&ens, &[0.0], 1.0, &[1.0], 3).unwrap();
        assert_eq!(post.members, members);
    }

    #[test]
    fn run_counts_and_single_step() {
        let fwd = Counted::new(|m: &[f64]| -> Result<Vec<f64>> { Ok(vec![m[0] + m[1]]) });
        let members: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let ens = EnsembleState::new(members, None).unwrap();
        let cfg = EsmdaConfig {
            n_e: 50,
            alphas: AlphaSchedule::new(ALPHAS_4.to_vec()).unwrap(),
            r_diag: vec![0.1],
        };
        let out = esmda_run(ens.clone(), &fwd, &[1.0], &cfg, 9).unwrap();
        assert_eq!(out.forward_runs, 200);
        assert_eq!(fwd.calls(), 200);
        assert_eq!(out.mean_misfit.len(), 4);

        let one = EsmdaConfig {
            alphas: AlphaSchedule::new(vec![1.0]).unwrap(),
            ..cfg
        };
        let a = esmda_run(ens.clone(), &fwd, &[1.0], &one, 9).unwrap();
        let mut manual = ens;
        manual.predicted = manual.members.iter().map(|m| vec![m[0] + m[1]]).collect();
        let b = esmda_step(&manual, &[1.0], 1.0, &[0.1], crate::rng::derive_seed(9, &[0])).unwrap();
        assert_eq!(a.ensemble, b);
    }

    #[test]
    fn abort_reports_progress() {
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let fwd = |m: &[f64]| -> Result<Vec<f64>> {
            if calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) >= 10 {
                Err(Error::FactorizationFailure)
            } else {
                Ok(vec![m[0]])
            }
        };
        let ens = EnsembleState::new((0..10).map(|i| vec![i as f64]).collect(), None).unwrap();
        let cfg = EsmdaConfig {
            n_e: 10,
            alphas: AlphaSchedule::new(vec![2.0, 2.0]).unwrap(),
            r_diag: vec![1.0],
        };
        match esmda_run(ens, &fwd, &[0.0], &cfg, 1) {
            Err(Error::EsmdaAborted {
                completed_steps,
                forward_runs,
                ..
            }) => {
                assert_eq!(completed_steps, 1);
                assert_eq!(forward_runs, 20);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
