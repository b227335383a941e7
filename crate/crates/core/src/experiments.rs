//! Accuracy sweeps over crosstalk level, multiplexing degree and algorithm,
//! their summary statistics, the layer power model, and result export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetKind, N_CLASSES};
use crate::error::{Error, Result};
use crate::network::{init_weights, Network, NetworkSpec};
use crate::soa::{PowerVector, SoaParams};
use crate::training::{train, Algorithm, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Default saturation power of the hidden-layer SOAs, in the same normalized
/// units as the input powers.
pub const DEFAULT_P_SAT: f64 = 0.01;
/// Per-neuron input power used by the power model when no trained network is
/// given: the mean first-hidden-layer input of a network trained with the
/// defaults (784-60-10, 6 channels, 26 dB, init seed 0) over the test subset,
/// rounded. Equals 1.69 P_sat.
pub const DEFAULT_OPERATING_POWER: f64 = 0.0169;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub g_ss_list: Vec<f64>,
    pub channels_list: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub repeats: usize,
    pub seed_base: u64,
    pub dataset: DatasetKind,
    pub hidden_size: usize,
    pub p_sat: f64,
    /// Number of trailing epochs the accuracy deviation is taken over.
    pub deviation_window: usize,
    /// Algorithm and seed are overridden per cell.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            g_ss_list: vec![20.0, 23.0, 26.0],
            channels_list: vec![2, 4, 6],
            algorithms: Algorithm::ALL.to_vec(),
            repeats: 10,
            seed_base: 0,
            dataset: DatasetKind::Mnist,
            hidden_size: 60,
            p_sat: DEFAULT_P_SAT,
            deviation_window: 10,
            train: TrainConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.g_ss_list.is_empty() || self.channels_list.is_empty() || self.algorithms.is_empty() {
            return bad("g_ss_list, channels_list and algorithms must be nonempty");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if self.deviation_window == 0 {
            return bad("deviation_window must be at least 1");
        }
        for &n in &self.channels_list {
            self.network_spec(784, self.g_ss_list[0], n)?;
        }
        for &g in &self.g_ss_list {
            SoaParams::new(g, self.p_sat, 1)?;
        }
        self.train.validate()
    }

    pub fn network_spec(&self, input_size: usize, g_ss_db: f64, channels: usize) -> Result<NetworkSpec> {
        NetworkSpec::new(vec![input_size, self.hidden_size, N_CLASSES], channels, g_ss_db, self.p_sat)
    }

    /// Every cell in deterministic order: crosstalk level, then channels,
    /// then algorithm, then repeat.
    pub fn plan(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &g_ss_db in &self.g_ss_list {
            for &channels in &self.channels_list {
                for &algorithm in &self.algorithms {
                    for repeat in 0..self.repeats {
                        cells.push(CellKey {
                            g_ss_db,
                            channels,
                            algorithm,
                            repeat,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub g_ss_db: f64,
    pub channels: usize,
    pub algorithm: Algorithm,
    pub repeat: usize,
}

impl CellKey {
    /// Canonical text form; the seed hash and error context are built from it.
    pub fn label(&self) -> String {
        format!(
            "g_ss_db={:?},channels={},algorithm={},repeat={}",
            self.g_ss_db, self.channels, self.algorithm, self.repeat
        )
    }

    /// `base XOR hash(cell)`: independent of which other cells exist.
    pub fn seed(&self, base: u64) -> u64 {
        base ^ hash64(self.label().as_bytes())
    }
}

fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable 16-hex-digit identifier of any serializable configuration.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex_digest(&serde_json::to_vec(value)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: CellKey,
    pub seed: u64,
    pub final_accuracy: f64,
    /// Test accuracy after every epoch.
    pub accuracy_history: Vec<f64>,
    pub wall_time_s: f64,
    pub fingerprint: String,
}

impl RunResult {
    /// Standard deviation of the last `window` epoch accuracies.
    pub fn accuracy_deviation(&self, window: usize) -> f64 {
        let tail = &self.accuracy_history[self.accuracy_history.len().saturating_sub(window)..];
        std_dev(tail)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation; zero for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    /// max - min of final accuracy over repeats.
    pub training_deviation: f64,
    /// Mean over repeats of the per-run last-window accuracy deviation.
    pub accuracy_deviation: f64,
}

impl DeviationStats {
    pub fn from_runs(runs: &[&RunResult], window: usize) -> Self {
        let finals: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
        let max = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = finals.iter().copied().fold(f64::INFINITY, f64::min);
        let devs: Vec<f64> = runs.iter().map(|r| r.accuracy_deviation(window)).collect();
        Self {
            training_deviation: if runs.is_empty() { 0.0 } else { max - min },
            accuracy_deviation: if runs.is_empty() { 0.0 } else { mean(&devs) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub g_ss_db: f64,
    pub channels: usize,
    pub algorithm: Algorithm,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub deviation: DeviationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub config: SweepConfig,
    /// In [`SweepConfig::plan`] order.
    pub runs: Vec<RunResult>,
}

impl SweepResult {
    /// Orders `runs` by the plan and checks that every planned cell is present once.
    pub fn assemble(config: SweepConfig, runs: Vec<RunResult>) -> Result<Self> {
        let mut by_label: BTreeMap<String, RunResult> =
            runs.into_iter().map(|r| (r.cell.label(), r)).collect();
        let mut ordered = Vec::with_capacity(by_label.len());
        for cell in config.plan() {
            let run = by_label
                .remove(&cell.label())
                .ok_or_else(|| Error::MissingCell(cell.label()))?;
            ordered.push(run);
        }
        if let Some(extra) = by_label.keys().next() {
            return Err(Error::InvalidConfig(format!("run {extra} is not part of the sweep plan")));
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            config,
            runs: ordered,
        })
    }

    pub fn cell_runs(&self, g_ss_db: f64, channels: usize, algorithm: Algorithm) -> Vec<&RunResult> {
        self.runs
            .iter()
            .filter(|r| r.cell.g_ss_db == g_ss_db && r.cell.channels == channels && r.cell.algorithm == algorithm)
            .collect()
    }

    pub fn mean_accuracy(&self, g_ss_db: f64, channels: usize, algorithm: Algorithm) -> Result<f64> {
        let runs = self.cell_runs(g_ss_db, channels, algorithm);
        if runs.is_empty() {
            return Err(Error::MissingCell(format!(
                "g_ss_db={g_ss_db:?},channels={channels},algorithm={algorithm}"
            )));
        }
        Ok(runs.iter().map(|r| r.final_accuracy).sum::<f64>() / runs.len() as f64)
    }

    /// One aggregate per (crosstalk level, channels, algorithm), in plan order.
    pub fn aggregates(&self) -> Vec<CellAggregate> {
        let mut out = Vec::new();
        for &g_ss_db in &self.config.g_ss_list {
            for &channels in &self.config.channels_list {
                for &algorithm in &self.config.algorithms {
                    let runs = self.cell_runs(g_ss_db, channels, algorithm);
                    if runs.is_empty() {
                        continue;
                    }
                    out.push(CellAggregate {
                        g_ss_db,
                        channels,
                        algorithm,
                        runs: runs.len(),
                        mean_accuracy: mean(&runs.iter().map(|r| r.final_accuracy).collect::<Vec<_>>()),
                        deviation: DeviationStats::from_runs(&runs, self.config.deviation_window),
                    });
                }
            }
        }
        out
    }
}

/// Mean over crosstalk levels of the NewBP minus TraditionalBP mean accuracy
/// at `channels`, as a fraction (multiply by 100 for accuracy points).
pub fn improvement_factor(result: &SweepResult, channels: usize) -> Result<f64> {
    let levels = &result.config.g_ss_list;
    let mut gap = 0.0;
    for &g in levels {
        gap += result.mean_accuracy(g, channels, Algorithm::NewBp)?
            - result.mean_accuracy(g, channels, Algorithm::Traditional)?;
    }
    Ok(gap / levels.len() as f64)
}

/// Trains one cell. Weight init and shuffling use distinct streams derived
/// from the cell seed.
pub fn run_cell(config: &SweepConfig, cell: &CellKey, train_set: &Dataset, test_set: &Dataset) -> Result<RunResult> {
    let with_ctx = |e: Error| Error::Cell {
        cell: cell.label(),
        source: Box::new(e),
    };
    let seed = cell.seed(config.seed_base);
    let spec = config
        .network_spec(train_set.input_dim(), cell.g_ss_db, cell.channels)
        .map_err(with_ctx)?;
    let train_config = TrainConfig {
        algorithm: cell.algorithm,
        seed: shuffle_seed(seed),
        ..config.train
    };
    let fingerprint = fingerprint(&(
        &spec,
        &train_config,
        train_set.len(),
        test_set.len(),
        train_set.input_scale(),
        seed,
    ))?;
    let start = Instant::now();
    let net = init_weights(&spec, seed).map_err(with_ctx)?;
    let outcome = train(net, train_set, test_set, &train_config).map_err(with_ctx)?;
    let accuracy_history: Vec<f64> = outcome.history.iter().map(|h| h.accuracy).collect();
    let final_accuracy = match accuracy_history.last() {
        Some(&a) => a,
        None => crate::training::evaluate(&outcome.network, test_set).map_err(with_ctx)?,
    };
    Ok(RunResult {
        cell: *cell,
        seed,
        final_accuracy,
        accuracy_history,
        wall_time_s: start.elapsed().as_secs_f64(),
        fingerprint,
    })
}

fn shuffle_seed(seed: u64) -> u64 {
    seed.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15
}

/// Runs `cells` on `jobs` threads (0 = all cores). Results come back in the
/// order of `cells`; `on_done` sees each result as it finishes.
pub fn run_cells<F>(
    config: &SweepConfig,
    cells: &[CellKey],
    train_set: &Dataset,
    test_set: &Dataset,
    jobs: usize,
    on_done: F,
) -> Result<Vec<RunResult>>
where
    F: Fn(&RunResult) -> Result<()> + Sync,
{
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let run = run_cell(config, cell, train_set, test_set)?;
                on_done(&run)?;
                Ok(run)
            })
            .collect()
    })
}

/// Runs the whole grid of `config`.
pub fn run_grid(config: &SweepConfig, train_set: &Dataset, test_set: &Dataset, jobs: usize) -> Result<SweepResult> {
    let runs = run_cells(config, &config.plan(), train_set, test_set, jobs, |_| Ok(()))?;
    SweepResult::assemble(config.clone(), runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

#[derive(Debug, Serialize)]
struct ResultRow<'a> {
    schema_version: u32,
    table: &'a str,
    crosstalk_level_db: f64,
    channels: usize,
    algorithm: &'a str,
    repeat: Option<usize>,
    seed: Option<u64>,
    runs: usize,
    accuracy: f64,
    training_deviation: Option<f64>,
    accuracy_deviation: f64,
}

/// Writes one `run` row per repeat followed by one `aggregate` row per cell
/// (CSV), or the full result (JSON). Wall times appear only in JSON.
pub fn export_results(result: &SweepResult, path: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Json => {
            let json = serde_json::to_string_pretty(result)?;
            fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
        }
        ExportFormat::Csv => {
            let window = result.config.deviation_window;
            let mut w = csv_writer(path)?;
            for r in &result.runs {
                w.serialize(ResultRow {
                    schema_version: SCHEMA_VERSION,
                    table: "run",
                    crosstalk_level_db: r.cell.g_ss_db,
                    channels: r.cell.channels,
                    algorithm: r.cell.algorithm.as_str(),
                    repeat: Some(r.cell.repeat),
                    seed: Some(r.seed),
                    runs: 1,
                    accuracy: r.final_accuracy,
                    training_deviation: None,
                    accuracy_deviation: r.accuracy_deviation(window),
                })?;
            }
            for a in result.aggregates() {
                w.serialize(ResultRow {
                    schema_version: SCHEMA_VERSION,
                    table: "aggregate",
                    crosstalk_level_db: a.g_ss_db,
                    channels: a.channels,
                    algorithm: a.algorithm.as_str(),
                    repeat: None,
                    seed: None,
                    runs: a.runs,
                    accuracy: a.mean_accuracy,
                    training_deviation: Some(a.deviation.training_deviation),
                    accuracy_deviation: a.deviation.accuracy_deviation,
                })?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn import_results(path: &Path) -> Result<SweepResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(serde_json::from_value(value)?)
}

/// Long-format per-epoch accuracies of every run.
pub fn export_history(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "schema_version",
        "crosstalk_level_db",
        "channels",
        "algorithm",
        "repeat",
        "epoch",
        "accuracy",
    ])?;
    for r in &result.runs {
        for (i, acc) in r.accuracy_history.iter().enumerate() {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                r.cell.g_ss_db.to_string(),
                r.cell.channels.to_string(),
                r.cell.algorithm.to_string(),
                r.cell.repeat.to_string(),
                (i + 1).to_string(),
                acc.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Improvement factor for every multiplexing degree that has both algorithms.
pub fn export_improvement(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["schema_version", "channels", "improvement_factor"])?;
    for &n in &result.config.channels_list {
        if let Ok(f) = improvement_factor(result, n) {
            w.write_record([SCHEMA_VERSION.to_string(), n.to_string(), f.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConfig {
    pub layer_neurons: usize,
    /// External quantum efficiency of SOAs and lasers.
    pub eta_quantum: f64,
    /// Transmission of the weighting stage, in (0, 1]; the lasers supply
    /// `input / insertion_loss`.
    pub insertion_loss: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            layer_neurons: 60,
            eta_quantum: 0.6,
            insertion_loss: 1.0,
        }
    }
}

impl PowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_neurons == 0 {
            return Err(Error::InvalidConfig("layer_neurons must be at least 1".into()));
        }
        if !(self.eta_quantum > 0.0 && self.eta_quantum <= 1.0) {
            return Err(Error::InvalidConfig(format!("eta_quantum must be in (0, 1], got {}", self.eta_quantum)));
        }
        if !(self.insertion_loss > 0.0 && self.insertion_loss <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "insertion_loss must be in (0, 1], got {}",
                self.insertion_loss
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub channels: usize,
    /// Number of SOAs, `layer_neurons / channels`.
    pub devices: usize,
    pub eta_quantum: f64,
    pub insertion_loss: f64,
    /// Electrical power of each SOA: optical power added over efficiency.
    pub soa_power_per_device: Vec<f64>,
    pub soa_power: f64,
    pub laser_power: f64,
    /// SOA plus laser power.
    pub total_power: f64,
    pub soa_share: f64,
    /// Summed optical output of all SOAs.
    pub soa_output_power: f64,
    /// Alternative total that counts SOA optical output instead of SOA
    /// electrical power.
    pub total_power_output_based: f64,
}

/// Power drawn by one layer of `config.layer_neurons` neurons grouped into
/// SOAs of `soa.n_channels` channels, at the per-neuron input powers `operating`.
pub fn power_report(config: &PowerConfig, soa: &SoaParams, operating: &PowerVector) -> Result<PowerReport> {
    config.validate()?;
    soa.validate()?;
    let n = soa.n_channels;
    if config.layer_neurons % n != 0 {
        return Err(Error::InvalidConfig(format!(
            "{} neurons cannot be grouped into devices of {n} channels",
            config.layer_neurons
        )));
    }
    if operating.len() != config.layer_neurons {
        return Err(Error::mismatch("operating inputs", config.layer_neurons, operating.len()));
    }
    let eta = config.eta_quantum;
    let mut out = vec![0.0; n];
    let mut soa_power_per_device = Vec::with_capacity(config.layer_neurons / n);
    let mut soa_output_power = 0.0;
    for x in operating.as_slice().chunks_exact(n) {
        soa.activate_into(x, &mut out);
        let p_out: f64 = out.iter().sum();
        let p_in: f64 = x.iter().sum();
        soa_output_power += p_out;
        soa_power_per_device.push((p_out - p_in) / eta);
    }
    let soa_power: f64 = soa_power_per_device.iter().sum();
    let laser_power = operating.total() / (eta * config.insertion_loss);
    let total_power = soa_power + laser_power;
    Ok(PowerReport {
        channels: n,
        devices: soa_power_per_device.len(),
        eta_quantum: eta,
        insertion_loss: config.insertion_loss,
        soa_power_per_device,
        soa_power,
        laser_power,
        total_power,
        soa_share: if total_power > 0.0 { soa_power / total_power } else { 0.0 },
        soa_output_power,
        total_power_output_based: soa_output_power + laser_power,
    })
}

/// Reports for each multiplexing degree at the same operating inputs.
pub fn power_sweep(
    config: &PowerConfig,
    g_ss_db: f64,
    p_sat: f64,
    channels: &[usize],
    operating: &PowerVector,
) -> Result<Vec<PowerReport>> {
    channels
        .iter()
        .map(|&n| power_report(config, &SoaParams::new(g_ss_db, p_sat, n)?, operating))
        .collect()
}

/// Per-neuron mean of the clamped pre-activation power entering the first
/// hidden layer, over `data`.
pub fn mean_hidden_input(net: &Network, data: &Dataset) -> Result<PowerVector> {
    if data.is_empty() {
        return Err(crate::error::DataError::Empty.into());
    }
    let mut input = vec![0.0; data.input_dim()];
    let mut acc = vec![0.0; net.spec().layer_sizes[1]];
    for i in 0..data.len() {
        data.encode_into(i, &mut input);
        let trace = net.forward_trace(&input)?;
        for (a, &s) in acc.iter_mut().zip(&trace.layers[0].s) {
            *a += s.max(0.0);
        }
    }
    PowerVector::new(acc.into_iter().map(|a| a / data.len() as f64).collect())
}

#[derive(Debug, Serialize)]
struct PowerRow {
    schema_version: u32,
    channels: usize,
    devices: usize,
    eta_quantum: f64,
    insertion_loss: f64,
    soa_power: f64,
    laser_power: f64,
    total_power: f64,
    soa_share: f64,
    soa_output_power: f64,
    total_power_output_based: f64,
}

pub fn export_power(reports: &[PowerReport], path: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Json => {
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "reports": reports,
            }))?;
            fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
        }
        ExportFormat::Csv => {
            let mut w = csv_writer(path)?;
            for r in reports {
                w.serialize(PowerRow {
                    schema_version: SCHEMA_VERSION,
                    channels: r.channels,
                    devices: r.devices,
                    eta_quantum: r.eta_quantum,
                    insertion_loss: r.insertion_loss,
                    soa_power: r.soa_power,
                    laser_power: r.laser_power,
                    total_power: r.total_power,
                    soa_share: r.soa_share,
                    soa_output_power: r.soa_output_power,
                    total_power_output_based: r.total_power_output_based,
                })?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}
