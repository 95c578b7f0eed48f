//! Hyperparameters, hyperpriors and unconditional Gaussian log-permeability
//! fields.
//!
//! Fields are sampled exactly: the correlation matrix of all grid cells is
//! factorized once per correlation structure and each realization is
//! `mu + sigma * L z`. The factor depends only on the correlation lengths,
//! so it is cached and shared across realizations that differ in mean or
//! standard deviation.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::Stream;
use crate::{Error, Result};

/// One named hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    MuLogk,
    SigmaLogk,
    Log10Ar,
    CorrLenH,
    Porosity,
}

impl Param {
    pub const ALL: [Param; 5] = [
        Param::MuLogk,
        Param::SigmaLogk,
        Param::Log10Ar,
        Param::CorrLenH,
        Param::Porosity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::MuLogk => "mu_logk",
            Param::SigmaLogk => "sigma_logk",
            Param::Log10Ar => "log10_ar",
            Param::CorrLenH => "corr_len_h",
            Param::Porosity => "porosity",
        }
    }
}

/// A point in hyperparameter space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Mean of natural-log permeability (k in md).
    pub mu_logk: f64,
    /// Standard deviation of natural-log permeability.
    pub sigma_logk: f64,
    /// Base-10 log of the vertical/horizontal permeability ratio.
    pub log10_ar: f64,
    /// Horizontal correlation length in cells.
    pub corr_len_h: f64,
    pub porosity: f64,
}

impl HyperParams {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::MuLogk => self.mu_logk,
            Param::SigmaLogk => self.sigma_logk,
            Param::Log10Ar => self.log10_ar,
            Param::CorrLenH => self.corr_len_h,
            Param::Porosity => self.porosity,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::MuLogk => self.mu_logk = v,
            Param::SigmaLogk => self.sigma_logk = v,
            Param::Log10Ar => self.log10_ar = v,
            Param::CorrLenH => self.corr_len_h = v,
            Param::Porosity => self.porosity = v,
        }
    }

    /// Vertical-to-horizontal permeability ratio `k_v / k_h`.
    pub fn anisotropy_ratio(&self) -> f64 {
        10f64.powf(self.log10_ar)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_logk >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_logk must be >= 0, got {}",
                self.sigma_logk
            )));
        }
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "porosity must lie in (0, 1), got {}",
                self.porosity
            )));
        }
        if !(self.corr_len_h > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "corr_len_h must be > 0, got {}",
                self.corr_len_h
            )));
        }
        if !(self.mu_logk.is_finite() && self.log10_ar.is_finite()) {
            return Err(Error::InvalidConfig("hyperparameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Bounds { lower, upper }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

/// Independent uniform hyperpriors with an active mask.
///
/// Inactive parameters take their value from `fixed` and are not inferred.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HyperPrior {
    bounds: [Bounds; 5],
    active: [bool; 5],
    fixed: HyperParams,
}

impl HyperPrior {
    pub fn new(bounds: [Bounds; 5], active: [bool; 5], fixed: HyperParams) -> Result<Self> {
        for (p, b) in Param::ALL.iter().zip(&bounds) {
            if !(b.lower <= b.upper) || !b.lower.is_finite() || !b.upper.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "prior bounds for {} are invalid: [{}, {}]",
                    p.name(),
                    b.lower,
                    b.upper
                )));
            }
        }
        fixed.validate()?;
        let prior = HyperPrior {
            bounds,
            active,
            fixed,
        };
        // Every point of the box must be a usable hyperparameter set.
        let mut lo = fixed;
        let mut hi = fixed;
        for p in prior.active_params() {
            lo.set(p, prior.bounds(p).lower);
            hi.set(p, prior.bounds(p).upper);
        }
        if prior.is_active(Param::SigmaLogk) && lo.sigma_logk < 0.0 {
            return Err(Error::InvalidConfig("sigma_logk prior must be >= 0".into()));
        }
        if prior.is_active(Param::Porosity) && !(lo.porosity > 0.0 && hi.porosity < 1.0) {
            return Err(Error::InvalidConfig("porosity prior must lie in (0, 1)".into()));
        }
        if prior.is_active(Param::CorrLenH) && !(lo.corr_len_h > 0.0) {
            return Err(Error::InvalidConfig("corr_len_h prior must be > 0".into()));
        }
        Ok(prior)
    }

    /// The uniform hyperpriors of the reference study, inferring the mean and
    /// standard deviation of log-permeability and the anisotropy ratio.
    pub fn reference_box(corr_len_h: f64, porosity: f64) -> Result<Self> {
        HyperPrior::new(
            [
                Bounds::new(2.5, 4.5),
                Bounds::new(0.5, 2.0),
                Bounds::new(-2.0, 0.0),
                Bounds::new(5.0, 20.0),
                Bounds::new(0.13, 0.23),
            ],
            [true, true, true, false, false],
            HyperParams {
                mu_logk: 3.5,
                sigma_logk: 1.25,
                log10_ar: -1.0,
                corr_len_h,
                porosity,
            },
        )
    }

    pub fn bounds(&self, p: Param) -> Bounds {
        self.bounds[p.index()]
    }

    pub fn is_active(&self, p: Param) -> bool {
        self.active[p.index()]
    }

    pub fn fixed(&self) -> &HyperParams {
        &self.fixed
    }

    pub fn active_params(&self) -> Vec<Param> {
        Param::ALL.into_iter().filter(|p| self.is_active(*p)).collect()
    }

    /// Active parameters whose bounds have non-zero width, i.e. the
    /// dimensions that carry a continuous density.
    pub fn free_params(&self) -> Vec<Param> {
        self.active_params()
            .into_iter()
            .filter(|p| self.bounds(*p).width() > 0.0)
            .collect()
    }

    pub fn contains(&self, h: &HyperParams) -> bool {
        self.active_params()
            .into_iter()
            .all(|p| self.bounds(p).contains(h.get(p)))
    }

    /// Prior density over the free dimensions; zero outside the box.
    pub fn density(&self, h: &HyperParams) -> f64 {
        if !self.contains(h) {
            return 0.0;
        }
        self.free_params()
            .into_iter()
            .map(|p| 1.0 / self.bounds(p).width())
            .product()
    }

    /// Projects a point onto the active coordinates.
    pub fn active_vector(&self, h: &HyperParams) -> Vec<f64> {
        self.active_params().into_iter().map(|p| h.get(p)).collect()
    }

    /// Builds a point from active coordinates, filling the rest from `fixed`.
    pub fn from_active(&self, values: &[f64]) -> HyperParams {
        let mut h = self.fixed;
        for (p, v) in self.active_params().into_iter().zip(values) {
            h.set(p, *v);
        }
        h
    }
}

/// Draws each active parameter uniformly from its bounds.
pub fn sample_prior<R: Rng + ?Sized>(prior: &HyperPrior, rng: &mut R) -> HyperParams {
    let mut h = prior.fixed;
    for p in prior.active_params() {
        let b = prior.bounds(p);
        let u: f64 = rng.random();
        let v = if b.width() > 0.0 {
            b.lower + b.width() * u
        } else {
            b.lower
        };
        h.set(p, v);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let g = GridSpec {
            nx,
            ny,
            nz,
            dx,
            dy,
            dz,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::InvalidConfig("grid cell counts must be >= 1".into()));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dz > 0.0) {
            return Err(Error::InvalidConfig("grid cell dimensions must be > 0".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index, x fastest, then y, then z (layer 0 on top).
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }
}

/// How the correlation length enters the exponential covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeConvention {
    /// Correlation drops to about 5% at the correlation length: `exp(-3h/l)`.
    #[default]
    Practical,
    /// `exp(-h/l)`.
    Scale,
}

impl RangeConvention {
    pub fn factor(self) -> f64 {
        match self {
            RangeConvention::Practical => 3.0,
            RangeConvention::Scale => 1.0,
        }
    }
}

/// Exponential covariance for a lag measured in cells.
pub fn covariance(lag: f64, h: &HyperParams, convention: RangeConvention) -> f64 {
    h.sigma_logk * h.sigma_logk * (-convention.factor() * lag / h.corr_len_h).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceModel {
    pub convention: RangeConvention,
    /// Vertical correlation length in cells.
    pub vertical_corr_len: f64,
    /// Diagonal jitter relative to the variance.
    pub jitter: f64,
    /// Largest grid for which the dense covariance is factorized.
    pub max_cells: usize,
}

impl Default for CovarianceModel {
    fn default() -> Self {
        CovarianceModel {
            convention: RangeConvention::Practical,
            vertical_corr_len: 1.0,
            jitter: 1e-10,
            max_cells: 4096,
        }
    }
}

impl CovarianceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.vertical_corr_len > 0.0) {
            return Err(Error::InvalidConfig("vertical_corr_len must be > 0".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidConfig("jitter must be >= 0".into()));
        }
        Ok(())
    }

    /// Anisotropic lag between two cells, in horizontal cells.
    ///
    /// The vertical offset is stretched by `corr_len_h / vertical_corr_len`
    /// so that a single exponential with length `corr_len_h` applies.
    pub fn lag(&self, grid: &GridSpec, a: usize, b: usize, corr_len_h: f64) -> f64 {
        let (ai, aj, ak) = grid.coords(a);
        let (bi, bj, bk) = grid.coords(b);
        let dx = ai as f64 - bi as f64;
        let dy = aj as f64 - bj as f64;
        let dz = (ak as f64 - bk as f64) * corr_len_h / self.vertical_corr_len;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Lower Cholesky factor of the unit-variance correlation matrix.
    pub fn correlation_factor(&self, grid: &GridSpec, corr_len_h: f64) -> Result<CorrelationFactor> {
        let n = grid.n_cells();
        if n > self.max_cells {
            return Err(Error::CellCapExceeded {
                cells: n,
                cap: self.max_cells,
            });
        }
        let c = self.convention.factor();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for a in 0..n {
            m[(a, a)] = 1.0 + self.jitter;
            for b in 0..a {
                let r = (-c * self.lag(grid, a, b, corr_len_h) / corr_len_h).exp();
                m[(a, b)] = r;
                m[(b, a)] = r;
            }
        }
        let chol = m.cholesky().ok_or(Error::FactorizationFailure)?;
        let l = chol.l();
        let mut packed = Vec::with_capacity(n * (n + 1) / 2);
        for a in 0..n {
            for b in 0..=a {
                packed.push(l[(a, b)]);
            }
        }
        if packed.iter().any(|v| !v.is_finite()) {
            return Err(Error::FactorizationFailure);
        }
        Ok(CorrelationFactor { n, packed })
    }
}

/// Packed row-major lower triangle of a Cholesky factor.
#[derive(Clone, Debug)]
pub struct CorrelationFactor {
    n: usize,
    packed: Vec<f64>,
}

impl CorrelationFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// `L z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n);
        let mut out = Vec::with_capacity(self.n);
        let mut offset = 0;
        for a in 0..self.n {
            let row = &self.packed[offset..offset + a + 1];
            out.push(crate::numeric::dot(row, &z[..a + 1]));
            offset += a + 1;
        }
        out
    }
}

/// A discretized natural-log horizontal permeability model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRealization {
    pub grid: GridSpec,
    pub log_k: Vec<f64>,
    pub hyper: HyperParams,
}

impl FieldRealization {
    pub fn new(grid: GridSpec, log_k: Vec<f64>, hyper: HyperParams) -> Result<Self> {
        let f = FieldRealization { grid, log_k, hyper };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_k.len() != self.grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} values for {} cells",
                self.log_k.len(),
                self.grid.n_cells()
            )));
        }
        if self.log_k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("field contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.log_k.iter().sum::<f64>() / self.log_k.len() as f64
    }

    /// Sample standard deviation over cells.
    pub fn std(&self) -> f64 {
        let n = self.log_k.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let ss: f64 = self.log_k.iter().map(|v| (v - m) * (v - m)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

fn check_hyper_for_field(h: &HyperParams) -> Result<()> {
    if !(h.sigma_logk >= 0.0 && h.corr_len_h > 0.0 && h.mu_logk.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "hyperparameters cannot generate a field: {h:?}"
        )));
    }
    Ok(())
}

fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn assemble(h: &HyperParams, grid: &GridSpec, factor: Option<&CorrelationFactor>, z: &[f64]) -> FieldRealization {
    let log_k = match factor {
        Some(f) if h.sigma_logk > 0.0 => f
            .apply(z)
            .into_iter()
            .map(|x| h.mu_logk + h.sigma_logk * x)
            .collect(),
        _ => vec![h.mu_logk; grid.n_cells()],
    };
    FieldRealization {
        grid: *grid,
        log_k,
        hyper: *h,
    }
}

/// Unconditional simulation without caching; factorizes on every call.
pub fn generate_field<R: Rng + ?Sized>(
    h: &HyperParams,
    grid: &GridSpec,
    model: &CovarianceModel,
    rng: &mut R,
) -> Result<FieldRealization> {
    check_hyper_for_field(h)?;
    let n = grid.n_cells();
    if n > model.max_cells {
        return Err(Error::CellCapExceeded {
            cells: n,
            cap: model.max_cells,
        });
    }
    let z = standard_normals(rng, n);
    if h.sigma_logk == 0.0 {
        return Ok(assemble(h, grid, None, &z));
    }
    let factor = model.correlation_factor(grid, h.corr_len_h)?;
    Ok(assemble(h, grid, Some(&factor), &z))
}

const FACTOR_CACHE_SIZE: usize = 8;

/// Field sampler bound to one grid and covariance model, caching Cholesky
/// factors by correlation length.
pub struct FieldGenerator {
    grid: GridSpec,
    model: CovarianceModel,
    cache: Mutex<VecDeque<(u64, Arc<CorrelationFactor>)>>,
}

impl FieldGenerator {
    pub fn new(grid: GridSpec, model: CovarianceModel) -> Result<Self> {
        grid.validate()?;
        model.validate()?;
        if grid.n_cells() > model.max_cells {
            return Err(Error::CellCapExceeded {
                cells: grid.n_cells(),
                cap: model.max_cells,
            });
        }
        Ok(FieldGenerator {
            grid,
            model,
            cache: Mutex::new(VecDeque::new()),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn model(&self) -> &CovarianceModel {
        &self.model
    }

    pub fn factor(&self, corr_len_h: f64) -> Result<Arc<CorrelationFactor>> {
        let key = corr_len_h.to_bits();
        {
            let cache = self.cache.lock().unwrap();
            if let Some((_, f)) = cache.iter().find(|(k, _)| *k == key) {
                return Ok(Arc::clone(f));
            }
        }
        // Factorize outside the lock; a concurrent duplicate is harmless.
        let f = Arc::new(self.model.correlation_factor(&self.grid, corr_len_h)?);
        let mut cache = self.cache.lock().unwrap();
        if let Some((_, existing)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(Arc::clone(existing));
        }
        if cache.len() == FACTOR_CACHE_SIZE {
            cache.pop_front();
        }
        cache.push_back((key, Arc::clone(&f)));
        Ok(f)
    }

    pub fn generate_with<R: Rng + ?Sized>(&self, h: &HyperParams, rng: &mut R) -> Result<FieldRealization> {
        check_hyper_for_field(h)?;
        let z = standard_normals(rng, self.grid.n_cells());
        if h.sigma_logk == 0.0 {
            return Ok(assemble(h, &self.grid, None, &z));
        }
        let factor = self.factor(h.corr_len_h)?;
        Ok(assemble(h, &self.grid, Some(&factor), &z))
    }

    /// Realization for a field seed; identical inputs give identical fields.
    pub fn generate(&self, h: &HyperParams, seed: u64) -> Result<FieldRealization> {
        let mut rng = Stream::seed_from_u64(seed);
        self.generate_with(h, &mut rng)
    }
}

/// Magic number opening every field file ("HDAFLD01", little-endian).
pub const FIELD_MAGIC: u64 = u64::from_le_bytes(*b"HDAFLD01");

/// Writes a field file: `magic, nx, ny, nz` as u64 then `dx, dy, dz` and
/// the values as f64, all little-endian, values x-fastest.
pub fn write_field<W: Write>(mut w: W, grid: &GridSpec, values: &[f64]) -> Result<()> {
    if values.len() != grid.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} cells",
            values.len(),
            grid.n_cells()
        )));
    }
    let mut buf = Vec::with_capacity(56 + 8 * values.len());
    for v in [FIELD_MAGIC, grid.nx as u64, grid.ny as u64, grid.nz as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [grid.dx, grid.dy, grid.dz].iter().chain(values) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<(GridSpec, Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 56 || bytes.len() % 8 != 0 {
        return Err(Error::InvalidConfig("truncated field file".into()));
    }
    let word = |i: usize| -> [u8; 8] { bytes[8 * i..8 * i + 8].try_into().unwrap() };
    if u64::from_le_bytes(word(0)) != FIELD_MAGIC {
        return Err(Error::InvalidConfig("not a field file (bad magic)".into()));
    }
    let grid = GridSpec::new(
        u64::from_le_bytes(word(1)) as usize,
        u64::from_le_bytes(word(2)) as usize,
        u64::from_le_bytes(word(3)) as usize,
        f64::from_le_bytes(word(4)),
        f64::from_le_bytes(word(5)),
        f64::from_le_bytes(word(6)),
    )?;
    let values: Vec<f64> = (7..bytes.len() / 8).map(|i| f64::from_le_bytes(word(i))).collect();
    if values.len() != grid.n_cells() {
        return Err(Error::InvalidConfig(format!(
            "field file holds {} values for {} cells",
            values.len(),
            grid.n_cells()
        )));
    }
    Ok((grid, values))
}

/// CSV export with columns `i,j,k,value`.
pub fn write_field_csv<W: Write>(mut w: W, grid: &GridSpec, values: &[f64]) -> Result<()> {
    writeln!(w, "i,j,k,value")?;
    for (idx, v) in values.iter().enumerate() {
        let (i, j, k) = grid.coords(idx);
        writeln!(w, "{i},{j},{k},{v}")?;
    }
    Ok(())
}
