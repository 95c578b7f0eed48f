use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hierassim::diagnostics::Snapshot;
use hierassim::forward::{Channel, DataVector};
use hierassim::geomodel::{read_field, write_field, write_field_csv, GridSpec, HyperParams, Param};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const TRUTH_FILE: &str = "truth.json";
pub const TRUTH_FIELD_FILE: &str = "truth_field.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const SNAPSHOT_FILE: &str = "snapshots.json";
pub const PREDICTION_FILE: &str = "predictions.json";
pub const POSTERIOR_FILE: &str = "posterior.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIELD_MEAN_FILE: &str = "field_mean.bin";
pub const FIELD_VARIANCE_FILE: &str = "field_variance.bin";
pub const FIELD_REDUCTION_FILE: &str = "field_variance_reduction.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueSeries {
    pub times: Vec<f64>,
    pub monitor_pressure: Vec<f64>,
    pub monitor_saturation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle {
    pub seed: u64,
    pub hyper: HyperParams,
    /// True when the hyperparameters came from the config rather than the prior.
    pub explicit: bool,
    pub field_seed: u64,
    pub noise_seed: u64,
    pub true_data: DataVector,
    pub observed: DataVector,
    pub series: TrueSeries,
    pub simulate_calls: u64,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub method: String,
    pub seed: u64,
    pub truth_sha256: String,
    /// Every forward simulation performed for this run directory.
    pub simulate_calls: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smc_runs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub esmda_runs: Option<u64>,
    /// Runs spent on assimilation, excluding posterior predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assimilation_runs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_runs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot_runs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_violations: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub parameters: Vec<Param>,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub channels: Vec<Channel>,
    pub times: Vec<f64>,
    pub observed: Vec<f64>,
    /// Predicted data vector of every posterior member.
    pub members: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| CliError::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| CliError::io(&probe, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn save_field(path: &Path, grid: &GridSpec, values: &[f64]) -> CliResult<()> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_field(BufWriter::new(f), grid, values)?;
    Ok(())
}

pub fn write_field_csv_file(path: &Path, grid: &GridSpec, values: &[f64]) -> CliResult<()> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_field_csv(BufWriter::new(f), grid, values)?;
    Ok(())
}

pub fn load_field(path: &Path) -> CliResult<(GridSpec, Vec<f64>)> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_field(std::io::BufReader::new(f))?)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Lists every file in `dir` (except the manifest) with its checksum.
pub fn write_manifest(dir: &Path) -> CliResult<Vec<ManifestEntry>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    let entries = files
        .iter()
        .map(|p| {
            Ok(ManifestEntry {
                file: p.file_name().unwrap().to_string_lossy().into_owned(),
                bytes: fs::metadata(p).map_err(|e| CliError::io(p, e))?.len(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_json(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}
