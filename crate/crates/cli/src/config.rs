//! The TOML config file. Every section is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use mns_core::dataset::DataConfig;
use mns_core::experiments::{PowerConfig, SweepConfig, DEFAULT_OPERATING_POWER, DEFAULT_P_SAT};
use mns_core::training::{Algorithm, TrainConfig};
use mns_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub output_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
    pub power: PowerSection,
    pub gradcheck: GradcheckSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden_size: usize,
    pub channels: usize,
    pub g_ss_db: f64,
    pub p_sat: f64,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden_size: 60,
            channels: 6,
            g_ss_db: 26.0,
            p_sat: DEFAULT_P_SAT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub g_ss_list: Vec<f64>,
    pub channels_list: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub repeats: usize,
    pub seed_base: u64,
    pub deviation_window: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        Self {
            g_ss_list: d.g_ss_list,
            channels_list: d.channels_list,
            algorithms: d.algorithms,
            repeats: d.repeats,
            seed_base: d.seed_base,
            deviation_window: d.deviation_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSection {
    pub channels_list: Vec<usize>,
    pub g_ss_db: f64,
    pub p_sat: f64,
    pub layer_neurons: usize,
    pub eta_quantum: f64,
    pub insertion_loss: f64,
    /// Input power of every neuron; ignored when a checkpoint is given.
    pub operating_power: f64,
}

impl Default for PowerSection {
    fn default() -> Self {
        let p = PowerConfig::default();
        Self {
            channels_list: (1..=6).collect(),
            g_ss_db: 26.0,
            p_sat: DEFAULT_P_SAT,
            layer_neurons: p.layer_neurons,
            eta_quantum: p.eta_quantum,
            insertion_loss: p.insertion_loss,
            operating_power: DEFAULT_OPERATING_POWER,
        }
    }
}

impl PowerSection {
    pub fn power_config(&self) -> PowerConfig {
        PowerConfig {
            layer_neurons: self.layer_neurons,
            eta_quantum: self.eta_quantum,
            insertion_loss: self.insertion_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub layer_sizes: Vec<usize>,
    pub channels: usize,
    pub g_ss_db: f64,
    pub p_sat: f64,
    pub algorithm: Algorithm,
    pub instances: usize,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            layer_sizes: vec![8, 12, 4],
            channels: 2,
            g_ss_db: 26.0,
            p_sat: 1.0,
            algorithm: Algorithm::NewBp,
            instances: 100,
            seed: 0,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            g_ss_list: self.sweep.g_ss_list.clone(),
            channels_list: self.sweep.channels_list.clone(),
            algorithms: self.sweep.algorithms.clone(),
            repeats: self.sweep.repeats,
            seed_base: self.sweep.seed_base,
            dataset: self.data.dataset,
            hidden_size: self.network.hidden_size,
            p_sat: self.network.p_sat,
            deviation_window: self.sweep.deviation_window,
            train: self.train,
        }
    }
}
