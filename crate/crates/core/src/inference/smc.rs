use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{distance, lower_median, HyperForward};
use crate::forward::{add_noise, DataVector, NoiseModel};
use crate::geomodel::{HyperParams, HyperPrior};
use crate::rng::{derive_seed, stream, TAG_FIELD, TAG_SMC};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub n_particles: usize,
    /// Stop once an iteration accepts less than this fraction of its runs.
    pub min_acceptance: f64,
    pub max_iterations: usize,
    /// Total forward-run cap.
    pub budget: Option<u64>,
    /// Add observation noise to each simulation before computing its distance.
    #[serde(default)]
    pub noisy: bool,
    /// Kernel jitter as a multiple of each prior range squared.
    pub kernel_jitter: f64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            n_particles: 500,
            min_acceptance: 0.05,
            max_iterations: 12,
            budget: None,
            noisy: false,
            kernel_jitter: 1e-8,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig("SMC-ABC needs at least 2 particles".into()));
        }
        if !(0.0..=1.0).contains(&self.min_acceptance) || self.max_iterations == 0 {
            return Err(Error::InvalidConfig("invalid SMC-ABC termination policy".into()));
        }
        if !(self.kernel_jitter >= 0.0) {
            return Err(Error::InvalidConfig("kernel_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub hyper: HyperParams,
    pub weight: f64,
    pub distance: f64,
    /// Field seed of the forward run that produced `distance`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Acceptance threshold of this iteration; infinite for the first.
    pub epsilon: f64,
    pub particles: Vec<Particle>,
    /// Weighted covariance of the previous population over the active
    /// parameters (row-major); empty for the first iteration.
    pub weighted_cov: Vec<f64>,
    pub acceptance_rate: f64,
    /// Forward runs spent on this iteration.
    pub runs: u64,
    /// Forward runs spent up to and including this iteration.
    pub cumulative_runs: u64,
}

impl Population {
    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AcceptanceRate,
    MaxIterations,
    BudgetExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcOutcome {
    pub populations: Vec<Population>,
    pub forward_runs: u64,
    pub termination: Termination,
}

impl SmcOutcome {
    pub fn last(&self) -> &Population {
        self.populations.last().expect("outcome holds at least one population")
    }
}

/// Gaussian perturbation kernel over the active coordinates.
struct Kernel {
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
}

impl Kernel {
    fn new(cov: DMatrix<f64>) -> Result<Self> {
        let c = cov.cholesky().ok_or(Error::DegenerateKernel)?;
        let inv = c.inverse();
        Ok(Kernel { chol: c.l(), inv })
    }

    fn log_density_unnormalized(&self, x: &DVector<f64>, center: &DVector<f64>) -> f64 {
        let d = x - center;
        -0.5 * d.dot(&(&self.inv * &d))
    }
}

fn weighted_covariance(points: &[DVector<f64>], weights: &[f64]) -> DMatrix<f64> {
    let dim = points[0].len();
    let mut mean = DVector::zeros(dim);
    for (p, w) in points.iter().zip(weights) {
        mean += p * *w;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (p, w) in points.iter().zip(weights) {
        let d = p - &mean;
        cov += &d * d.transpose() * *w;
    }
    cov
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Proposal {
    hyper: HyperParams,
    seed: u64,
    distance: f64,
}

/// Sequential Monte Carlo ABC over the active hyperparameters.
///
/// Proposal `k` of iteration `t` draws from its own stream, so results do
/// not depend on how many threads evaluate the forward runs.
pub fn smc_abc<F: HyperForward + ?Sized>(
    prior: &HyperPrior,
    fwd: &F,
    d_obs: &DataVector,
    nm: &NoiseModel,
    cfg: &SmcConfig,
    master: u64,
) -> Result<SmcOutcome> {
    cfg.validate()?;
    let n = cfg.n_particles;
    let budget = cfg.budget.unwrap_or(u64::MAX);
    let active = prior.active_params();
    if active.is_empty() {
        return Err(Error::InvalidConfig("no active hyperparameters to infer".into()));
    }
    let dim = active.len();

    let evaluate = |t: usize, k: usize, hyper: HyperParams| -> Result<Proposal> {
        let seed = derive_seed(master, &[TAG_SMC, t as u64, k as u64, TAG_FIELD]);
        let mut y = fwd.run(&hyper, seed)?;
        if cfg.noisy {
            let mut rng = stream(master, &[TAG_SMC, t as u64, k as u64, TAG_FIELD, 1]);
            y = add_noise(&y, nm, &mut rng);
        }
        Ok(Proposal {
            hyper,
            seed,
            distance: distance(&y, d_obs, nm)?,
        })
    };

    let mut populations: Vec<Population> = Vec::new();
    let mut total_runs: u64 = 0;

    // First iteration: prior draws, all accepted with equal weights.
    if budget < n as u64 {
        return Err(Error::BudgetExhausted { budget });
    }
    let first: Vec<Proposal> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(master, &[TAG_SMC, 1, k as u64]);
            let h = crate::geomodel::sample_prior(prior, &mut rng);
            evaluate(1, k, h)
        })
        .collect::<Result<_>>()?;
    total_runs += n as u64;
    populations.push(Population {
        iteration: 1,
        epsilon: f64::INFINITY,
        particles: first
            .into_iter()
            .map(|p| Particle {
                hyper: p.hyper,
                weight: 1.0 / n as f64,
                distance: p.distance,
                seed: p.seed,
            })
            .collect(),
        weighted_cov: Vec::new(),
        acceptance_rate: 1.0,
        runs: n as u64,
        cumulative_runs: total_runs,
    });

    let jitter = DVector::from_iterator(
        dim,
        active.iter().map(|p| cfg.kernel_jitter * prior.bounds(*p).width().powi(2)),
    );

    let termination = loop {
        let prev = populations.last().unwrap();
        let t = prev.iteration + 1;
        if prev.acceptance_rate < cfg.min_acceptance {
            break Termination::AcceptanceRate;
        }
        if prev.iteration >= cfg.max_iterations {
            break Termination::MaxIterations;
        }
        let eps = lower_median(&prev.particles.iter().map(|p| p.distance).collect::<Vec<_>>());
        let points: Vec<DVector<f64>> = prev
            .particles
            .iter()
            .map(|p| DVector::from_vec(prior.active_vector(&p.hyper)))
            .collect();
        let weights = prev.weights();
        let sigma = weighted_covariance(&points, &weights);
        let kernel = Kernel::new(&sigma * 2.0 + DMatrix::from_diagonal(&jitter))?;
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }

        let propose = |k: usize| -> Result<Proposal> {
            let mut rng = stream(master, &[TAG_SMC, t as u64, k as u64]);
            let h = loop {
                let u: f64 = rng.random::<f64>() * acc;
                let j = cumulative.partition_point(|c| *c <= u).min(n - 1);
                let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let x = &points[j] + &kernel.chol * z;
                let h = prior.from_active(x.as_slice());
                if prior.density(&h) > 0.0 {
                    break h;
                }
            };
            evaluate(t, k, h)
        };

        let mut accepted: Vec<Proposal> = Vec::with_capacity(n);
        let mut runs: u64 = 0;
        let mut next = 0usize;
        let mut exhausted = false;
        while accepted.len() < n {
            let room = budget - total_runs - runs;
            if room == 0 {
                exhausted = true;
                break;
            }
            let batch = ((n - accepted.len()) as u64).min(room) as usize;
            let results: Vec<Proposal> = (next..next + batch)
                .into_par_iter()
                .map(propose)
                .collect::<Result<_>>()?;
            next += batch;
            runs += batch as u64;
            accepted.extend(results.into_iter().filter(|p| p.distance <= eps));
        }
        total_runs += runs;
        if exhausted {
            break Termination::BudgetExhausted;
        }

        let log_w: Vec<f64> = accepted
            .par_iter()
            .map(|p| {
                let x = DVector::from_vec(prior.active_vector(&p.hyper));
                let terms: Vec<f64> = points
                    .iter()
                    .zip(&weights)
                    .map(|(c, w)| w.ln() + kernel.log_density_unnormalized(&x, c))
                    .collect();
                prior.density(&p.hyper).ln() - log_sum_exp(&terms)
            })
            .collect();
        let norm = log_sum_exp(&log_w);
        populations.push(Population {
            iteration: t,
            epsilon: eps,
            particles: accepted
                .into_iter()
                .zip(&log_w)
                .map(|(p, lw)| Particle {
                    hyper: p.hyper,
                    weight: (lw - norm).exp(),
                    distance: p.distance,
                    seed: p.seed,
                })
                .collect(),
            weighted_cov: sigma.transpose().as_slice().to_vec(),
            acceptance_rate: n as f64 / runs as f64,
            runs,
            cumulative_runs: total_runs,
        });
    };

    Ok(SmcOutcome {
        populations,
        forward_runs: total_runs,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Channel;
    use crate::geomodel::{Bounds, Param};
    use crate::inference::Counted;

    fn toy_prior() -> HyperPrior {
        let fixed = HyperParams {
            mu_logk: 5.0,
            sigma_logk: 1.0,
            log10_ar: -1.0,
            corr_len_h: 5.0,
            porosity: 0.2,
        };
        let mut bounds = [Bounds::new(0.0, 0.0); 5];
        for p in Param::ALL {
            bounds[p.index()] = Bounds::new(fixed.get(p), fixed.get(p));
        }
        bounds[0] = Bounds::new(0.0, 10.0);
        HyperPrior::new(bounds, [true, false, false, false, false], fixed).unwrap()
    }

    fn toy_obs() -> DataVector {
        DataVector::new(vec![4.0], vec![Channel::Pressure], vec![1.0]).unwrap()
    }

    fn toy_forward(h: &HyperParams, _seed: u64) -> Result<DataVector> {
        DataVector::new(vec![h.mu_logk], vec![Channel::Pressure], vec![1.0])
    }

    fn run(cfg: &SmcConfig, seed: u64) -> (SmcOutcome, u64) {
        let fwd = Counted::new(toy_forward);
        let nm = NoiseModel::new(0.5, 0.0).unwrap();
        let out = smc_abc(&toy_prior(), &fwd, &toy_obs(), &nm, cfg, seed).unwrap();
        (out, fwd.calls())
    }

    #[test]
    fn population_invariants() {
        let cfg = SmcConfig {
            n_particles: 100,
            noisy: true,
            ..SmcConfig::default()
        };
        let (out, calls) = run(&cfg, 3);
        assert_eq!(out.forward_runs, calls);
        assert_eq!(out.termination, Termination::AcceptanceRate);
        let first = &out.populations[0];
        assert!(first.epsilon.is_infinite());
        assert!(first.particles.iter().all(|p| p.weight == 0.01));
        let prior = toy_prior();
        let mut eps = f64::INFINITY;
        for pop in &out.populations {
            assert_eq!(pop.particles.len(), 100);
            assert!(pop.epsilon <= eps);
            eps = pop.epsilon;
            let sum: f64 = pop.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for p in &pop.particles {
                assert!(p.weight >= 0.0 && p.distance >= 0.0);
                assert!(p.distance <= pop.epsilon);
                assert!(prior.density(&p.hyper) > 0.0);
            }
        }
        assert_eq!(out.populations.last().unwrap().cumulative_runs, out.forward_runs);
    }

    #[test]
    fn budget_exhaustion_keeps_completed_iterations() {
        let cfg = SmcConfig {
            n_particles: 50,
            budget: Some(180),
            ..SmcConfig::default()
        };
        let (out, calls) = run(&cfg, 5);
        assert_eq!(out.termination, Termination::BudgetExhausted);
        assert_eq!(out.forward_runs, 180);
        assert_eq!(calls, 180);
        assert!(out.last().cumulative_runs <= 180);

        let tiny = SmcConfig {
            budget: Some(10),
            ..cfg
        };
        let fwd = Counted::new(toy_forward);
        let nm = NoiseModel::new(0.5, 0.0).unwrap();
        assert!(matches!(
            smc_abc(&toy_prior(), &fwd, &toy_obs(), &nm, &tiny, 1),
            Err(Error::BudgetExhausted { budget: 10 })
        ));
    }

    #[test]
    fn iteration_cap_and_replay() {
        let cfg = SmcConfig {
            n_particles: 40,
            max_iterations: 3,
            min_acceptance: 0.0,
            ..SmcConfig::default()
        };
        let (a, _) = run(&cfg, 11);
        assert_eq!(a.termination, Termination::MaxIterations);
        assert_eq!(a.populations.len(), 3);
        let (b, _) = run(&cfg, 11);
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (c, _) = pool.install(|| run(&cfg, 11));
        assert_eq!(a, c);
    }
}
