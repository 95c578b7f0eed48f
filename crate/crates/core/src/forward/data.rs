use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SimOutput;
use crate::{Error, Result};

/// Constant in the saturation-error denominator.
pub const SATURATION_EPSILON: f64 = 0.025;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Pressure,
    Saturation,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Pressure => "pressure",
            Channel::Saturation => "saturation",
        }
    }
}

/// Observed or simulated monitoring data with per-entry channel and time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataVector {
    pub values: Vec<f64>,
    pub channels: Vec<Channel>,
    pub times: Vec<f64>,
}

impl DataVector {
    pub fn new(values: Vec<f64>, channels: Vec<Channel>, times: Vec<f64>) -> Result<Self> {
        if values.len() != channels.len() || values.len() != times.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values, {} channel tags, {} times",
                values.len(),
                channels.len(),
                times.len()
            )));
        }
        Ok(DataVector {
            values,
            channels,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same channels and times, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        DataVector::new(values, self.channels.clone(), self.times.clone())
    }

    /// Checks that `other` has the same layout (tags and times).
    pub fn ensure_same_layout(&self, other: &DataVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "data lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        if self.channels != other.channels {
            return Err(Error::ShapeMismatch("channel tags differ".into()));
        }
        if self.times != other.times {
            return Err(Error::ShapeMismatch("observation times differ".into()));
        }
        Ok(())
    }

    /// Entries of one channel.
    pub fn channel_values(&self, ch: Channel) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.channels)
            .filter(|(_, c)| **c == ch)
            .map(|(v, _)| *v)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Pressure noise standard deviation (MPa).
    pub sigma_p: f64,
    /// Saturation noise standard deviation.
    pub sigma_s: f64,
}

impl NoiseModel {
    pub fn new(sigma_p: f64, sigma_s: f64) -> Result<Self> {
        if !(sigma_p >= 0.0 && sigma_s >= 0.0) {
            return Err(Error::InvalidConfig("noise standard deviations must be >= 0".into()));
        }
        Ok(NoiseModel { sigma_p, sigma_s })
    }

    pub fn sigma(&self, ch: Channel) -> f64 {
        match ch {
            Channel::Pressure => self.sigma_p,
            Channel::Saturation => self.sigma_s,
        }
    }

    /// Measurement-error variances, one per entry of `d`.
    pub fn variances(&self, d: &DataVector) -> Vec<f64> {
        d.channels.iter().map(|c| self.sigma(*c).powi(2)).collect()
    }
}

/// Monitoring pressure at the scheduled report indices, then saturation.
///
/// Channels are emitted in the canonical order pressure, saturation,
/// regardless of the order they are listed in `channels`.
pub fn observe(out: &SimOutput, schedule: &[usize], channels: &[Channel]) -> Result<DataVector> {
    let n = out.times.len();
    if let Some(&index) = schedule.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index, len: n });
    }
    let mut d = DataVector::default();
    for ch in [Channel::Pressure, Channel::Saturation] {
        if !channels.contains(&ch) {
            continue;
        }
        let series = match ch {
            Channel::Pressure => &out.monitor_pressure,
            Channel::Saturation => &out.monitor_saturation,
        };
        for &i in schedule {
            d.values.push(series[i]);
            d.channels.push(ch);
            d.times.push(out.times[i]);
        }
    }
    Ok(d)
}

/// Adds independent Gaussian noise with the channel's standard deviation.
pub fn add_noise<R: Rng + ?Sized>(d: &DataVector, nm: &NoiseModel, rng: &mut R) -> DataVector {
    let values = d
        .values
        .iter()
        .zip(&d.channels)
        .map(|(v, c)| {
            let z: f64 = rng.sample(StandardNormal);
            v + nm.sigma(*c) * z
        })
        .collect();
    DataVector {
        values,
        channels: d.channels.clone(),
        times: d.times.clone(),
    }
}

/// Mean relative pressure and saturation errors of `coarse` against `fine`.
///
/// Pressure differences are normalized by the pressure range of `fine` at
/// each report time; saturation differences by `S_fine + 0.025`. Both are
/// averaged over all cells and report times.
pub fn self_convergence_errors(coarse: &SimOutput, fine: &SimOutput) -> Result<(f64, f64)> {
    if coarse.grid != fine.grid || coarse.times != fine.times {
        return Err(Error::ShapeMismatch("outputs differ in grid or report times".into()));
    }
    let n_cells = fine.grid.n_cells();
    let n_t = fine.times.len();
    let mut dp = 0.0;
    let mut ds = 0.0;
    for t in 0..n_t {
        let pf = &fine.pressure[t];
        let (lo, hi) = pf
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(Error::DegenerateRange { report: t });
        }
        dp += coarse.pressure[t]
            .iter()
            .zip(pf)
            .map(|(a, b)| (a - b).abs() / range)
            .sum::<f64>();
        ds += coarse.saturation[t]
            .iter()
            .zip(&fine.saturation[t])
            .map(|(a, b)| (a - b).abs() / (b + SATURATION_EPSILON))
            .sum::<f64>();
    }
    let norm = (n_cells * n_t) as f64;
    Ok((dp / norm, ds / norm))
}
