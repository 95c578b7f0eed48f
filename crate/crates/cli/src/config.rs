use std::path::{Path, PathBuf};

use hierassim::forward::{Channel, NoiseModel, SimConfig};
use hierassim::geomodel::{Bounds, CovarianceModel, HyperParams, HyperPrior, Param};
use hierassim::inference::{AlphaSchedule, EsmdaConfig, HierarchicalConfig, RsConfig, SmcConfig, ALPHAS_20, ALPHAS_4};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Run counts at which rejection sampling records a snapshot.
pub const DEFAULT_SNAPSHOTS: [u64; 10] = [
    1_000, 1_500, 5_000, 10_000, 20_000, 40_000, 60_000, 80_000, 120_000, 160_000,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub lower: f64,
    pub upper: f64,
    pub active: bool,
    /// Value used while the parameter is not inferred.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl ParamSpec {
    fn active(lower: f64, upper: f64) -> Self {
        ParamSpec {
            lower,
            upper,
            active: true,
            value: None,
        }
    }

    fn fixed(lower: f64, upper: f64, value: f64) -> Self {
        ParamSpec {
            lower,
            upper,
            active: false,
            value: Some(value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub mu_logk: ParamSpec,
    pub sigma_logk: ParamSpec,
    pub log10_ar: ParamSpec,
    pub corr_len_h: ParamSpec,
    pub porosity: ParamSpec,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            mu_logk: ParamSpec::active(2.5, 4.5),
            sigma_logk: ParamSpec::active(0.5, 2.0),
            log10_ar: ParamSpec::active(-2.0, 0.0),
            corr_len_h: ParamSpec::fixed(5.0, 20.0, 5.0),
            porosity: ParamSpec::fixed(0.13, 0.23, 0.2),
        }
    }
}

impl PriorConfig {
    fn spec(&self, p: Param) -> &ParamSpec {
        match p {
            Param::MuLogk => &self.mu_logk,
            Param::SigmaLogk => &self.sigma_logk,
            Param::Log10Ar => &self.log10_ar,
            Param::CorrLenH => &self.corr_len_h,
            Param::Porosity => &self.porosity,
        }
    }

    pub fn build(&self) -> CliResult<HyperPrior> {
        let mut fixed = HyperParams {
            mu_logk: 0.0,
            sigma_logk: 0.0,
            log10_ar: 0.0,
            corr_len_h: 0.0,
            porosity: 0.0,
        };
        let mut bounds = [Bounds::new(0.0, 0.0); 5];
        let mut active = [false; 5];
        for p in Param::ALL {
            let s = self.spec(p);
            bounds[p.index()] = Bounds::new(s.lower, s.upper);
            active[p.index()] = s.active;
            let v = match (s.active, s.value) {
                (_, Some(v)) => v,
                (true, None) => 0.5 * (s.lower + s.upper),
                (false, None) => {
                    return Err(CliError::Config {
                        path: format!("prior.{}.value", p.name()),
                        message: "a fixed parameter needs a value".into(),
                    })
                }
            };
            fixed.set(p, v);
        }
        Ok(HyperPrior::new(bounds, active, fixed)?)
    }
}

/// Explicit truth values; omitted fixed parameters come from the prior block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthValues {
    pub mu_logk: f64,
    pub sigma_logk: f64,
    pub log10_ar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr_len_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub porosity: Option<f64>,
}

impl TruthValues {
    pub fn resolve(&self, prior: &HyperPrior) -> HyperParams {
        let f = prior.fixed();
        HyperParams {
            mu_logk: self.mu_logk,
            sigma_logk: self.sigma_logk,
            log10_ar: self.log10_ar,
            corr_len_h: self.corr_len_h.unwrap_or(f.corr_len_h),
            porosity: self.porosity.unwrap_or(f.porosity),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// Indices into the simulation report times.
    pub schedule: Vec<usize>,
    pub channels: Vec<Channel>,
    pub noise: NoiseModel,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            schedule: (0..5).collect(),
            channels: vec![Channel::Pressure, Channel::Saturation],
            noise: NoiseModel {
                sigma_p: 0.1,
                sigma_s: 0.05,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsBlock {
    pub budget: u64,
    pub pilot_count: Option<u64>,
    pub snapshots: Vec<u64>,
}

impl Default for RsBlock {
    fn default() -> Self {
        RsBlock {
            budget: 200_000,
            pilot_count: None,
            snapshots: DEFAULT_SNAPSHOTS.to_vec(),
        }
    }
}

impl RsBlock {
    pub fn config(&self) -> RsConfig {
        RsConfig {
            budget: self.budget,
            pilot_count: self.pilot_count,
        }
    }
}

/// ESMDA on the permeability field with the hyperparameters held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsmdaBlock {
    pub n_e: usize,
    pub alphas: AlphaSchedule,
    /// Hyperparameters of the initial ensemble; the prior box centre if absent.
    pub hyper: Option<TruthValues>,
}

impl Default for EsmdaBlock {
    fn default() -> Self {
        EsmdaBlock {
            n_e: 500,
            alphas: AlphaSchedule::new(ALPHAS_4.to_vec()).expect("valid schedule"),
            hyper: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModifiedEsmdaBlock {
    pub n_e: usize,
    pub alphas: AlphaSchedule,
}

impl Default for ModifiedEsmdaBlock {
    fn default() -> Self {
        ModifiedEsmdaBlock {
            n_e: 1000,
            alphas: AlphaSchedule::new(ALPHAS_20.to_vec()).expect("valid schedule"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsBlock {
    pub bins: usize,
    /// Prior realizations used for field variance reduction.
    pub prior_members: usize,
}

impl Default for DiagnosticsBlock {
    fn default() -> Self {
        DiagnosticsBlock {
            bins: hierassim::diagnostics::DEFAULT_BINS,
            prior_members: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub simulation: SimConfig,
    pub field: CovarianceModel,
    pub prior: PriorConfig,
    pub truth: Option<TruthValues>,
    pub observation: ObservationConfig,
    pub smc: SmcConfig,
    pub rs: RsBlock,
    pub esmda: EsmdaBlock,
    pub modified_esmda: ModifiedEsmdaBlock,
    pub hierarchical: HierarchicalConfig,
    pub diagnostics: DiagnosticsBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            output_dir: None,
            simulation: SimConfig::desk_default(),
            field: CovarianceModel::default(),
            prior: PriorConfig::default(),
            truth: None,
            observation: ObservationConfig::default(),
            smc: SmcConfig::default(),
            rs: RsBlock::default(),
            esmda: EsmdaBlock::default(),
            modified_esmda: ModifiedEsmdaBlock::default(),
            hierarchical: HierarchicalConfig::default(),
            diagnostics: DiagnosticsBlock::default(),
        }
    }
}

fn check(path: &str, r: hierassim::Result<()>) -> CliResult<()> {
    r.map_err(|e| CliError::Config {
        path: path.into(),
        message: e.to_string(),
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        check("simulation", self.simulation.validate())?;
        check("field", self.field.validate())?;
        let prior = self.prior.build()?;
        if let Some(t) = &self.truth {
            check("truth", t.resolve(&prior).validate())?;
        }
        let n_times = self.simulation.report_times.len();
        if self.observation.schedule.is_empty() || self.observation.channels.is_empty() {
            return Err(CliError::Config {
                path: "observation".into(),
                message: "schedule and channels must be non-empty".into(),
            });
        }
        if let Some(&i) = self.observation.schedule.iter().find(|&&i| i >= n_times) {
            return Err(CliError::Config {
                path: "observation.schedule".into(),
                message: format!("index {i} is past the {n_times} report times"),
            });
        }
        let noise = self.observation.noise;
        if !(noise.sigma_p >= 0.0 && noise.sigma_s >= 0.0) {
            return Err(CliError::Config {
                path: "observation.noise".into(),
                message: "noise standard deviations must be >= 0".into(),
            });
        }
        check("smc", self.smc.validate())?;
        check("rs", self.rs.config().validate())?;
        if self.esmda.n_e < 2 || self.modified_esmda.n_e < 2 || self.hierarchical.n_e < 2 {
            return Err(CliError::Config {
                path: "esmda".into(),
                message: "ensembles need at least two members".into(),
            });
        }
        if self.hierarchical.n_rep == 0 || self.hierarchical.restarts == 0 {
            return Err(CliError::Config {
                path: "hierarchical".into(),
                message: "n_rep and restarts must be positive".into(),
            });
        }
        if self.diagnostics.bins == 0 {
            return Err(CliError::Config {
                path: "diagnostics.bins".into(),
                message: "at least one bin is needed".into(),
            });
        }
        Ok(())
    }

    /// Noise model for inference; zero standard deviations are rejected here.
    pub fn noise_model(&self) -> CliResult<NoiseModel> {
        let n = self.observation.noise;
        Ok(NoiseModel::new(n.sigma_p, n.sigma_s)?)
    }

    pub fn esmda_config(&self, n_e: usize, alphas: &AlphaSchedule, r_diag: Vec<f64>) -> EsmdaConfig {
        EsmdaConfig {
            n_e,
            alphas: alphas.clone(),
            r_diag,
        }
    }

    /// Whether two configs describe the same synthetic problem.
    pub fn same_problem(&self, other: &ExperimentConfig) -> bool {
        self.simulation == other.simulation
            && self.field == other.field
            && self.prior == other.prior
            && self.observation == other.observation
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let prior = cfg.prior.build().unwrap();
        assert_eq!(prior, HyperPrior::reference_box(5.0, 0.2).unwrap());
    }

    #[test]
    fn errors_carry_the_path() {
        let err = ExperimentConfig::from_json(r#"{"smc": {"n_particles": "many"}}"#).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "smc.n_particles"),
            e => panic!("unexpected {e}"),
        }
        let err = ExperimentConfig::from_json(r#"{"simulation": {"grid": {"nx": 4}}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { ref path, .. } if path.starts_with("simulation.grid")));
        assert!(ExperimentConfig::from_json(r#"{"smcc": {}}"#).is_err());
    }

    #[test]
    fn bad_alphas_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"esmda": {"alphas": [2.0, 3.0]}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config { ref path, .. } if path == "esmda.alphas"));
    }

    #[test]
    fn explicit_truth_uses_fixed_values() {
        let cfg = ExperimentConfig::from_json(
            r#"{"truth": {"mu_logk": 3.3, "sigma_logk": 0.9, "log10_ar": -0.5}}"#,
        )
        .unwrap();
        let prior = cfg.prior.build().unwrap();
        let h = cfg.truth.unwrap().resolve(&prior);
        assert_eq!((h.mu_logk, h.sigma_logk, h.log10_ar), (3.3, 0.9, -0.5));
        assert_eq!((h.corr_len_h, h.porosity), (5.0, 0.2));
    }

    #[test]
    fn schedule_must_fit_report_times() {
        assert!(ExperimentConfig::from_json(r#"{"observation": {"schedule": [10]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"observation": {"schedule": [9]}}"#).is_ok());
    }
}
