use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{log_likelihood, HyperForward};
use crate::forward::DataVector;
use crate::geomodel::{sample_prior, HyperParams, HyperPrior};
use crate::rng::{derive_seed, stream, TAG_FIELD, TAG_RS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    /// Total forward runs, pilot included.
    pub budget: u64,
    /// Runs used to fix the likelihood bound; defaults to 5% of the budget.
    pub pilot_count: Option<u64>,
}

impl RsConfig {
    pub fn new(budget: u64) -> Self {
        RsConfig {
            budget,
            pilot_count: None,
        }
    }

    pub fn pilot(&self) -> u64 {
        self.pilot_count.unwrap_or((self.budget / 20).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidConfig("rejection-sampling budget must be > 0".into()));
        }
        let pilot = self.pilot();
        if pilot == 0 || pilot >= self.budget {
            return Err(Error::InvalidConfig(format!(
                "pilot count {pilot} must be in [1, budget)"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsSample {
    pub hyper: HyperParams,
    pub log_likelihood: f64,
    pub seed: u64,
    /// 0-based index of the forward run that produced the sample.
    pub run: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsOutcome {
    pub samples: Vec<RsSample>,
    /// Natural log of the likelihood bound.
    pub ln_bound: f64,
    pub pilot_runs: u64,
    pub forward_runs: u64,
    /// Main-phase runs whose likelihood exceeded the bound.
    pub bound_violations: u64,
}

impl RsOutcome {
    /// Samples accepted within the first `runs` forward runs.
    pub fn prefix(&self, runs: u64) -> Vec<&RsSample> {
        self.samples.iter().filter(|s| s.run < runs).collect()
    }
}

fn draw(prior: &HyperPrior, master: u64, r: u64) -> (HyperParams, f64, u64) {
    let mut rng = stream(master, &[TAG_RS, r]);
    let h = sample_prior(prior, &mut rng);
    let u: f64 = rng.random();
    (h, u, derive_seed(master, &[TAG_RS, r, TAG_FIELD]))
}

/// Rejection sampling against a likelihood bound fixed by a pilot phase.
///
/// Pilot samples only set the bound and are not returned.
pub fn rejection_sampling<F: HyperForward + ?Sized>(
    prior: &HyperPrior,
    fwd: &F,
    d_obs: &DataVector,
    r_diag: &[f64],
    cfg: &RsConfig,
    master: u64,
) -> Result<RsOutcome> {
    cfg.validate()?;
    let pilot = cfg.pilot();
    let ll = |r: u64| -> Result<(HyperParams, f64, f64, u64)> {
        let (h, u, seed) = draw(prior, master, r);
        let y = fwd.run(&h, seed)?;
        y.ensure_same_layout(d_obs)?;
        Ok((h, u, log_likelihood(&y.values, &d_obs.values, r_diag)?, seed))
    };

    let pilot_ll: Vec<f64> = (0..pilot)
        .into_par_iter()
        .map(|r| ll(r).map(|x| x.2))
        .collect::<Result<_>>()?;
    let ln_bound = pilot_ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let main: Vec<(HyperParams, f64, f64, u64)> = (pilot..cfg.budget)
        .into_par_iter()
        .map(ll)
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut bound_violations = 0;
    for (r, (hyper, u, l, seed)) in (pilot..).zip(main) {
        if l > ln_bound {
            bound_violations += 1;
        }
        if u.ln() <= l - ln_bound {
            samples.push(RsSample {
                hyper,
                log_likelihood: l,
                seed,
                run: r,
            });
        }
    }
    Ok(RsOutcome {
        samples,
        ln_bound,
        pilot_runs: pilot,
        forward_runs: cfg.budget,
        bound_violations,
    })
}
