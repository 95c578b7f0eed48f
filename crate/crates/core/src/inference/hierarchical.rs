use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{esmda_run, AlphaSchedule, EnsembleState, EsmdaConfig, FieldForward, SmcOutcome, ALPHAS_4};
use crate::forward::DataVector;
use crate::geomodel::{sample_prior, FieldGenerator, FieldRealization, HyperParams, HyperPrior, Param};
use crate::rng::{derive_seed, stream, TAG_ESMDA, TAG_FIELD, TAG_HIER, TAG_MODIFIED, TAG_SELECT};
use crate::selection::{kmedoids_select, systematic_resample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchicalConfig {
    /// Number of representative hyperparameter sets.
    pub n_rep: usize,
    pub n_e: usize,
    pub alphas: AlphaSchedule,
    /// k-means restarts; the lowest inertia wins.
    pub restarts: usize,
    /// Also run the posterior ensembles once to predict the data. These
    /// runs are counted separately from the assimilation runs.
    pub predict: bool,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        HierarchicalConfig {
            n_rep: 10,
            n_e: 500,
            alphas: AlphaSchedule::new(ALPHAS_4.to_vec()).expect("valid schedule"),
            restarts: 10,
            predict: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeRun {
    pub hyper: HyperParams,
    /// Index of the representative in the final SMC-ABC population.
    pub particle: usize,
    /// Posterior log-permeability fields.
    pub ensemble: EnsembleState,
    /// Posterior predicted data, one entry per member, if requested.
    pub predicted: Vec<DataVector>,
    pub forward_runs: u64,
    pub mean_misfit: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalOutcome {
    pub representatives: Vec<RepresentativeRun>,
    pub smc_runs: u64,
    /// Forward runs of all assimilation steps.
    pub esmda_runs: u64,
    /// Posterior prediction runs, not part of the assimilation budget.
    pub prediction_runs: u64,
}

impl HierarchicalOutcome {
    pub fn total_runs(&self) -> u64 {
        self.smc_runs + self.esmda_runs
    }

    /// All posterior predictions across representatives.
    pub fn predictions(&self) -> impl Iterator<Item = &DataVector> {
        self.representatives.iter().flat_map(|r| r.predicted.iter())
    }
}

fn field_forward<'a, F: FieldForward + ?Sized>(
    fwd: &'a F,
    generator: &'a FieldGenerator,
    hyper: HyperParams,
) -> impl Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a {
    move |state: &[f64]| {
        let m = FieldRealization {
            grid: *generator.grid(),
            log_k: state.to_vec(),
            hyper,
        };
        Ok(fwd.run_field(&m)?.values)
    }
}

/// Conditions permeability fields on the data for representative
/// hyperparameter sets drawn from a finished SMC-ABC run.
pub fn hierarchical_run<F: FieldForward + ?Sized>(
    smc: &SmcOutcome,
    prior: &HyperPrior,
    fwd: &F,
    generator: &FieldGenerator,
    d_obs: &DataVector,
    r_diag: &[f64],
    cfg: &HierarchicalConfig,
    master: u64,
) -> Result<HierarchicalOutcome> {
    let pop = smc.populations.last().ok_or(Error::EmptySampleSet)?;
    let weights = pop.weights();
    let mut rng = stream(master, &[TAG_HIER, TAG_SELECT]);
    let resampled = systematic_resample(&weights, weights.len(), &mut rng)?;
    let points: Vec<Vec<f64>> = resampled
        .iter()
        .map(|&i| prior.active_vector(&pop.particles[i].hyper))
        .collect();
    let sel = kmedoids_select(&points, cfg.n_rep, cfg.restarts, derive_seed(master, &[TAG_HIER, TAG_SELECT, 1]))?;

    let esmda_cfg = EsmdaConfig {
        n_e: cfg.n_e,
        alphas: cfg.alphas.clone(),
        r_diag: r_diag.to_vec(),
    };
    let mut representatives = Vec::with_capacity(cfg.n_rep);
    let mut esmda_runs = 0;
    let mut prediction_runs = 0;
    for (r, &idx) in sel.indices.iter().enumerate() {
        let particle = resampled[idx];
        let hyper = pop.particles[particle].hyper;
        let members: Vec<Vec<f64>> = (0..cfg.n_e)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(master, &[TAG_HIER, r as u64, i as u64, TAG_FIELD]);
                generator.generate(&hyper, seed).map(|m| m.log_k)
            })
            .collect::<Result<_>>()?;
        let initial = EnsembleState::new(members, Some(hyper))?;
        let state_fwd = field_forward(fwd, generator, hyper);
        let seed = derive_seed(master, &[TAG_HIER, r as u64, TAG_ESMDA]);
        let out = esmda_run(initial, &state_fwd, &d_obs.values, &esmda_cfg, seed).map_err(|e| match e {
            Error::EsmdaAborted {
                completed_steps,
                forward_runs,
                source,
            } => Error::EsmdaAborted {
                completed_steps,
                forward_runs: smc.forward_runs + esmda_runs + forward_runs,
                source,
            },
            other => other,
        })?;
        esmda_runs += out.forward_runs;
        let predicted = if cfg.predict {
            let p: Vec<DataVector> = out
                .ensemble
                .members
                .par_iter()
                .map(|m| {
                    fwd.run_field(&FieldRealization {
                        grid: *generator.grid(),
                        log_k: m.clone(),
                        hyper,
                    })
                })
                .collect::<Result<_>>()?;
            prediction_runs += p.len() as u64;
            p
        } else {
            Vec::new()
        };
        representatives.push(RepresentativeRun {
            hyper,
            particle,
            ensemble: out.ensemble,
            predicted,
            forward_runs: out.forward_runs,
            mean_misfit: out.mean_misfit,
        });
    }
    Ok(HierarchicalOutcome {
        representatives,
        smc_runs: smc.forward_runs,
        esmda_runs,
        prediction_runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModifiedEsmdaOutcome {
    /// Final states: log-permeability per cell followed by `log10_ar`.
    pub ensemble: EnsembleState,
    /// Per-member hyperparameters read off the posterior states.
    pub posterior: Vec<HyperParams>,
    pub forward_runs: u64,
    pub mean_misfit: Vec<f64>,
}

/// Hyperparameters implied by an augmented state.
pub fn hyper_from_state(state: &[f64], fixed: &HyperParams) -> HyperParams {
    let (log_k, ar) = state.split_at(state.len() - 1);
    let n = log_k.len();
    let mean = log_k.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (log_k.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    HyperParams {
        mu_logk: mean,
        sigma_logk: sd,
        log10_ar: ar[0],
        ..*fixed
    }
}

/// Standalone ESMDA whose state carries the anisotropy ratio next to the
/// log-permeability field; member hyperparameters are drawn from the prior.
pub fn modified_esmda_run<F: FieldForward + ?Sized>(
    prior: &HyperPrior,
    fwd: &F,
    generator: &FieldGenerator,
    d_obs: &DataVector,
    cfg: &EsmdaConfig,
    master: u64,
) -> Result<ModifiedEsmdaOutcome> {
    let grid = *generator.grid();
    let members: Vec<Vec<f64>> = (0..cfg.n_e)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(master, &[TAG_MODIFIED, i as u64]);
            let h = sample_prior(prior, &mut rng);
            let seed = derive_seed(master, &[TAG_MODIFIED, i as u64, TAG_FIELD]);
            let mut state = generator.generate(&h, seed)?.log_k;
            state.push(h.get(Param::Log10Ar));
            Ok(state)
        })
        .collect::<Result<_>>()?;
    let initial = EnsembleState::new(members, None)?;
    let fixed = *prior.fixed();
    let state_fwd = move |state: &[f64]| -> Result<Vec<f64>> {
        let (log_k, ar) = state.split_at(state.len() - 1);
        let m = FieldRealization {
            grid,
            log_k: log_k.to_vec(),
            hyper: HyperParams {
                log10_ar: ar[0],
                ..fixed
            },
        };
        Ok(fwd.run_field(&m)?.values)
    };
    let out = esmda_run(initial, &state_fwd, &d_obs.values, cfg, derive_seed(master, &[TAG_MODIFIED, TAG_ESMDA]))?;
    let posterior = out.ensemble.members.iter().map(|s| hyper_from_state(s, &fixed)).collect();
    Ok(ModifiedEsmdaOutcome {
        ensemble: out.ensemble,
        posterior,
        forward_runs: out.forward_runs,
        mean_misfit: out.mean_misfit,
    })
}
