//! Simulation of wavelength-multiplexed neuron sets built on saturating
//! semiconductor optical amplifiers, with crosstalk-aware backpropagation.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod network;
pub mod soa;
pub mod training;

pub use dataset::{load_idx, load_subsets, partition, subsample, DataConfig, Dataset, DatasetKind, Sample, Split, N_CLASSES};
pub use error::{DataError, Error, Result};
pub use experiments::{
    improvement_factor, power_report, run_grid, CellKey, DeviationStats, ExportFormat, PowerConfig, PowerReport,
    RunResult, SweepConfig, SweepResult,
};
pub use linalg::Matrix;
pub use network::{ForwardTrace, Network, NetworkSpec, OutputActivation};
pub use soa::{PowerVector, SoaParams};
pub use training::{Algorithm, GradientSet, TrainConfig};
