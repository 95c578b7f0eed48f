//! Desk-scale forward model: single-phase slightly-compressible Darcy flow
//! with a passive injected-fluid tracer.
//!
//! Pressure is advanced with backward Euler on a two-point-flux seven-point
//! stencil. After each pressure step the face fluxes are frozen and the
//! tracer is carried by first-order upwinding, sub-stepped so the update
//! stays a convex combination. Tracer and fluid volume are transported
//! together, so the tracer fraction ("saturation") is bounded by
//! construction and the stored tracer volume matches the injected volume.
//!
//! Units: pressure in MPa, time in years, lengths in m, permeability in md,
//! viscosity in Pa·s, compressibility in 1/MPa, injection rate in m³/year.

mod data;
mod solver;

pub use data::{add_noise, observe, self_convergence_errors, Channel, DataVector, NoiseModel, SATURATION_EPSILON};

use serde::{Deserialize, Serialize};

use crate::geomodel::{FieldRealization, GridSpec};
use crate::{Error, Result};
use solver::{BandCholesky, Preconditioner, PressureMatrix};

const MD_TO_M2: f64 = 9.869_233e-16;
const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;
const PA_PER_MPA: f64 = 1e6;
const MIC_OMEGA: f64 = 0.95;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    /// Complete banded Cholesky factor, one per distinct step size.
    #[default]
    Cholesky,
    /// Modified incomplete Cholesky.
    Mic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub grid: GridSpec,
    /// Injector column `(i, j)`.
    pub injector: [usize; 2],
    /// Perforated layers; empty means all layers.
    #[serde(default)]
    pub injector_layers: Vec<usize>,
    /// Monitoring column `(i, j)`.
    pub monitor: [usize; 2],
    pub monitor_layer: usize,
    pub injection_rate: f64,
    pub viscosity: f64,
    pub compressibility: f64,
    pub initial_pressure: f64,
    /// Report times in years, strictly increasing.
    pub report_times: Vec<f64>,
    /// Backward-Euler steps per report interval.
    pub inner_steps: usize,
    /// Pore-volume multiplier on the lateral edge cells.
    pub boundary_pv_multiplier: f64,
    pub solver_tolerance: f64,
    /// Iteration cap as a multiple of the cell count.
    pub solver_iteration_factor: usize,
    /// Sub-step the tracer update to honor the CFL limit.
    pub cfl_limiter: bool,
    pub preconditioner: PreconditionerKind,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::desk_default()
    }
}

impl SimConfig {
    /// The 16×16×4 desk problem.
    pub fn desk_default() -> Self {
        SimConfig {
            grid: GridSpec {
                nx: 16,
                ny: 16,
                nz: 4,
                dx: 100.0,
                dy: 100.0,
                dz: 10.0,
            },
            injector: [8, 8],
            injector_layers: vec![2, 3],
            monitor: [10, 9],
            monitor_layer: 0,
            injection_rate: 2.0e5,
            viscosity: 5e-4,
            compressibility: 1e-3,
            initial_pressure: 15.5,
            report_times: vec![1.0, 4.0, 7.0, 10.0, 13.0, 16.0, 20.0, 23.0, 26.0, 30.0],
            inner_steps: 2,
            boundary_pv_multiplier: 1e3,
            solver_tolerance: 1e-8,
            solver_iteration_factor: 10,
            cfl_limiter: true,
            preconditioner: PreconditionerKind::Cholesky,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        g.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.injector[0] >= g.nx || self.injector[1] >= g.ny {
            return bad(format!("injector {:?} outside grid", self.injector));
        }
        if self.monitor[0] >= g.nx || self.monitor[1] >= g.ny || self.monitor_layer >= g.nz {
            return bad(format!("monitor {:?} layer {} outside grid", self.monitor, self.monitor_layer));
        }
        if let Some(&l) = self.injector_layers.iter().find(|&&l| l >= g.nz) {
            return bad(format!("injector layer {l} outside grid"));
        }
        if !(self.injection_rate >= 0.0) {
            return bad("injection_rate must be >= 0".into());
        }
        if !(self.viscosity > 0.0 && self.compressibility > 0.0) {
            return bad("viscosity and compressibility must be > 0".into());
        }
        if !self.initial_pressure.is_finite() {
            return bad("initial_pressure must be finite".into());
        }
        if self.report_times.is_empty() {
            return bad("report_times must not be empty".into());
        }
        let mut prev = 0.0;
        for &t in &self.report_times {
            if !(t > prev) {
                return bad("report_times must be positive and strictly increasing".into());
            }
            prev = t;
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1".into());
        }
        if !(self.boundary_pv_multiplier >= 1.0) {
            return bad("boundary_pv_multiplier must be >= 1".into());
        }
        if !(self.solver_tolerance > 0.0) || self.solver_iteration_factor == 0 {
            return bad("solver tolerance and iteration factor must be positive".into());
        }
        Ok(())
    }

    /// The same problem, reporting only the first `n` report times.
    pub fn truncated(&self, n: usize) -> SimConfig {
        let mut c = self.clone();
        c.report_times.truncate(n.max(1));
        c
    }

    pub fn with_preconditioner(&self, preconditioner: PreconditionerKind) -> SimConfig {
        SimConfig {
            preconditioner,
            ..self.clone()
        }
    }

    pub fn with_inner_steps(&self, inner_steps: usize) -> SimConfig {
        SimConfig {
            inner_steps,
            ..self.clone()
        }
    }

    fn perforations(&self) -> Vec<usize> {
        if self.injector_layers.is_empty() {
            (0..self.grid.nz).collect()
        } else {
            let mut l = self.injector_layers.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    }
}

/// Solver bookkeeping of one simulation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub pressure_steps: usize,
    pub tracer_substeps: usize,
    pub solver_iterations: usize,
    pub max_relative_residual: f64,
    /// Injected volume per report time (m³).
    pub injected_volume: Vec<f64>,
    /// Stored tracer volume per report time (m³).
    pub tracer_volume: Vec<f64>,
    /// Tracer volume leaving through the outer boundary; zero with sealed boundaries.
    pub boundary_outflow: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub grid: GridSpec,
    pub times: Vec<f64>,
    /// Cell pressures per report time (MPa).
    pub pressure: Vec<Vec<f64>>,
    /// Injected-fluid fraction per report time.
    pub saturation: Vec<Vec<f64>>,
    pub monitor_pressure: Vec<f64>,
    pub monitor_saturation: Vec<f64>,
    /// Pressure in the shallowest perforated injector cell.
    pub injector_pressure: Vec<f64>,
    pub stats: SimStats,
}

impl SimOutput {
    /// Monitoring series of another layer of the monitoring column.
    pub fn column_series(&self, cfg: &SimConfig, layer: usize) -> (Vec<f64>, Vec<f64>) {
        let c = self.grid.index(cfg.monitor[0], cfg.monitor[1], layer);
        (
            self.pressure.iter().map(|p| p[c]).collect(),
            self.saturation.iter().map(|s| s[c]).collect(),
        )
    }
}

struct Problem {
    matrix: PressureMatrix,
    /// Pore volume per cell (m³), boundary multiplier included.
    pore_volume: Vec<f64>,
    /// Injection rate per cell (m³/year).
    source: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

fn build_problem(m: &FieldRealization, cfg: &SimConfig) -> Problem {
    let g = &cfg.grid;
    let n = g.n_cells();
    let nxy = g.nx * g.ny;
    let kh: Vec<f64> = m.log_k.iter().map(|v| v.exp()).collect();
    let ar = m.hyper.anisotropy_ratio();
    // m³/(year·MPa) per md.
    let unit = MD_TO_M2 * PA_PER_MPA * SECONDS_PER_YEAR / cfg.viscosity;
    let gx = unit * g.dy * g.dz / g.dx;
    let gy = unit * g.dx * g.dz / g.dy;
    let gz = unit * g.dx * g.dy / g.dz * ar;

    let mut tx = vec![0.0; n];
    let mut ty = vec![0.0; n];
    let mut tz = vec![0.0; n];
    for c in 0..n {
        let (i, j, k) = g.coords(c);
        if i + 1 < g.nx {
            tx[c] = gx * harmonic(kh[c], kh[c + 1]);
        }
        if j + 1 < g.ny {
            ty[c] = gy * harmonic(kh[c], kh[c + g.nx]);
        }
        if k + 1 < g.nz {
            tz[c] = gz * harmonic(kh[c], kh[c + nxy]);
        }
    }

    let base_pv = m.hyper.porosity * g.cell_volume();
    let pore_volume = (0..n)
        .map(|c| {
            let (i, j, _) = g.coords(c);
            let edge = i == 0 || j == 0 || i + 1 == g.nx || j + 1 == g.ny;
            if edge {
                base_pv * cfg.boundary_pv_multiplier
            } else {
                base_pv
            }
        })
        .collect();

    // Rate split between perforations in proportion to k_h.
    let mut source = vec![0.0; n];
    let perfs: Vec<usize> = cfg
        .perforations()
        .into_iter()
        .map(|k| g.index(cfg.injector[0], cfg.injector[1], k))
        .collect();
    let total_k: f64 = perfs.iter().map(|&c| kh[c]).sum();
    for &c in &perfs {
        source[c] = cfg.injection_rate * kh[c] / total_k;
    }

    Problem {
        matrix: PressureMatrix::new(g.nx, g.ny, g.nz, tx, ty, tz),
        pore_volume,
        source,
    }
}

/// Runs the flow and tracer model for one permeability field.
pub fn simulate(m: &FieldRealization, cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    if m.grid != cfg.grid {
        return Err(Error::ShapeMismatch("field grid differs from simulation grid".into()));
    }
    m.validate()?;
    let prob = build_problem(m, cfg);
    let g = &cfg.grid;
    let n = g.n_cells();
    let nxy = g.nx * g.ny;
    let mat = &prob.matrix;
    let max_iter = cfg.solver_iteration_factor * n;

    let mut p = vec![cfg.initial_pressure; n];
    let mut sat = vec![0.0; n];
    // Fluid volume per cell; evolves with the same fluxes as the tracer.
    let mut fluid = prob.pore_volume.clone();
    let mut dp = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut lap_p = vec![0.0; n];
    let mut outflow = vec![0.0; n];
    let mut flux = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let offsets = [1, g.nx, nxy];
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];

    let monitor_cell = g.index(cfg.monitor[0], cfg.monitor[1], cfg.monitor_layer);
    let injector_cell = g.index(cfg.injector[0], cfg.injector[1], cfg.perforations()[0]);
    let total_rate: f64 = prob.source.iter().sum();

    let mut out = SimOutput {
        grid: *g,
        times: cfg.report_times.clone(),
        pressure: Vec::with_capacity(cfg.report_times.len()),
        saturation: Vec::with_capacity(cfg.report_times.len()),
        monitor_pressure: Vec::with_capacity(cfg.report_times.len()),
        monitor_saturation: Vec::with_capacity(cfg.report_times.len()),
        injector_pressure: Vec::with_capacity(cfg.report_times.len()),
        stats: SimStats::default(),
    };

    let mut t_prev = 0.0;
    let mut dt_prev = f64::NAN;
    // Preconditioners are kept per step size; report intervals repeat.
    let mut factors: Vec<(f64, Vec<f64>, Preconditioner)> = Vec::new();
    let mut active = 0;
    for &t_report in &cfg.report_times {
        let dt = (t_report - t_prev) / cfg.inner_steps as f64;
        if dt != dt_prev {
            active = match factors.iter().position(|(d, _, _)| *d == dt) {
                Some(i) => i,
                None => {
                    let acc: Vec<f64> = prob.pore_volume.iter().map(|v| v * cfg.compressibility / dt).collect();
                    let pre = match cfg.preconditioner {
                        PreconditionerKind::Cholesky => {
                            Preconditioner::Band(BandCholesky::new(mat, g.ny, g.nz, &acc)?)
                        }
                        PreconditionerKind::Mic => Preconditioner::Incomplete(mat.ic0_pivots(&acc, MIC_OMEGA)),
                    };
                    factors.push((dt, acc, pre));
                    factors.len() - 1
                }
            };
            if dt_prev.is_finite() {
                let scale = dt / dt_prev;
                dp.iter_mut().for_each(|v| *v *= scale);
            }
            dt_prev = dt;
        }
        let (_, acc, pre) = &mut factors[active];
        for _ in 0..cfg.inner_steps {
            // (acc + L) dp = q - L p
            mat.laplacian(&p, &mut lap_p);
            for c in 0..n {
                rhs[c] = prob.source[c] - lap_p[c];
            }
            let stats = solver::pcg(mat, acc, pre, &rhs, &mut dp, cfg.solver_tolerance, max_iter)?;
            out.stats.solver_iterations += stats.iterations;
            out.stats.max_relative_residual = out.stats.max_relative_residual.max(stats.relative_residual);
            out.stats.pressure_steps += 1;
            for c in 0..n {
                p[c] += dp[c];
            }

            // Frozen face fluxes (m³/year), positive from c to its neighbor.
            outflow.iter_mut().for_each(|v| *v = 0.0);
            for (axis, &off) in offsets.iter().enumerate() {
                if off >= n {
                    continue;
                }
                let t = [&mat.tx, &mat.ty, &mat.tz][axis];
                let f = &mut flux[axis];
                for c in 0..n - off {
                    let v = t[c] * (p[c] - p[c + off]);
                    f[c] = v;
                    outflow[c] += v.max(0.0);
                    outflow[c + off] += (-v).max(0.0);
                }
            }

            let mut remaining = dt;
            while remaining > 0.0 {
                // Largest fraction of a cell's fluid leaving it per year.
                let rate = outflow
                    .iter()
                    .zip(&fluid)
                    .fold(0.0f64, |m, (o, w)| if *o > 0.0 { m.max(o / w) } else { m });
                let courant = remaining * rate;
                let tau = if courant <= 1.0 {
                    remaining
                } else if cfg.cfl_limiter && rate.is_finite() {
                    1.0 / rate
                } else {
                    return Err(Error::CflViolation { courant });
                };
                for c in 0..n {
                    let kept = (fluid[c] - tau * outflow[c]).max(0.0);
                    num[c] = sat[c] * kept;
                    den[c] = kept;
                }
                // Inflow enters numerator and denominator through identical
                // terms, scaled by the upwind fraction (<= 1) in the numerator.
                for (axis, &off) in offsets.iter().enumerate() {
                    if off >= n {
                        continue;
                    }
                    let f = &flux[axis];
                    for c in 0..n - off {
                        let fwd = tau * f[c].max(0.0);
                        let back = tau * (-f[c]).max(0.0);
                        num[c + off] += fwd * sat[c];
                        den[c + off] += fwd;
                        num[c] += back * sat[c + off];
                        den[c] += back;
                    }
                }
                for c in 0..n {
                    let q = tau * prob.source[c];
                    num[c] += q;
                    den[c] += q;
                    fluid[c] = den[c];
                    sat[c] = if den[c] > 0.0 { num[c] / den[c] } else { 0.0 };
                }
                out.stats.tracer_substeps += 1;
                remaining = if tau >= remaining { 0.0 } else { remaining - tau };
            }
        }
        t_prev = t_report;

        out.stats.injected_volume.push(total_rate * t_report);
        out.stats
            .tracer_volume
            .push(sat.iter().zip(&fluid).map(|(s, w)| s * w).sum());
        out.stats.boundary_outflow.push(0.0);
        out.monitor_pressure.push(p[monitor_cell]);
        out.monitor_saturation.push(sat[monitor_cell]);
        out.injector_pressure.push(p[injector_cell]);
        out.pressure.push(p.clone());
        out.saturation.push(sat.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomodel::HyperParams;

    fn homogeneous(grid: GridSpec, log_k: f64, log10_ar: f64) -> FieldRealization {
        FieldRealization {
            grid,
            log_k: vec![log_k; grid.n_cells()],
            hyper: HyperParams {
                mu_logk: log_k,
                sigma_logk: 0.0,
                log10_ar,
                corr_len_h: 5.0,
                porosity: 0.2,
            },
        }
    }

    #[test]
    fn zero_rate_is_equilibrium() {
        let mut cfg = SimConfig::desk_default();
        cfg.injection_rate = 0.0;
        let m = homogeneous(cfg.grid, 3.5, -1.0);
        let out = simulate(&m, &cfg).unwrap();
        for (p, s) in out.pressure.iter().zip(&out.saturation) {
            assert!(p.iter().all(|&v| v == cfg.initial_pressure));
            assert!(s.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let cfg = SimConfig::desk_default();
        let m = homogeneous(GridSpec::new(4, 4, 4, 100.0, 100.0, 10.0).unwrap(), 3.0, -1.0);
        assert!(matches!(simulate(&m, &cfg), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::desk_default();
        cfg.report_times = vec![1.0, 1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::desk_default();
        cfg.monitor = [16, 0];
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::desk_default();
        cfg.injection_rate = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cfl_violation_without_limiter() {
        let mut cfg = SimConfig::desk_default();
        cfg.cfl_limiter = false;
        cfg.inner_steps = 1;
        cfg.boundary_pv_multiplier = 1.0;
        let m = homogeneous(cfg.grid, 3.5, 0.0);
        assert!(matches!(simulate(&m, &cfg), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn saturation_bounded_and_tracer_conserved() {
        let cfg = SimConfig::desk_default();
        let mut m = homogeneous(cfg.grid, 3.5, -1.0);
        for (c, v) in m.log_k.iter_mut().enumerate() {
            *v += 2.0 * ((c as f64) * 0.37).sin();
        }
        let out = simulate(&m, &cfg).unwrap();
        for s in &out.saturation {
            assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for (inj, stored) in out.stats.injected_volume.iter().zip(&out.stats.tracer_volume) {
            assert!(((inj - stored) / inj).abs() < 1e-9, "{inj} vs {stored}");
        }
    }
}
