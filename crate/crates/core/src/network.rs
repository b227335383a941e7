//! Fully connected networks whose hidden layers are built from multiplexed SOA devices.
//!
//! Hidden layer `l` computes `s = W^l o^(l-1)`, clamps `s` at zero (optical
//! power cannot be negative) and feeds contiguous groups of `n` channels into
//! one SOA each: device `d` owns neurons `[d*n, (d+1)*n)`. The output layer is
//! an electrical sigmoid applied to the unclamped `s`. There are no biases.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{support_of, Matrix};
use crate::soa::SoaParams;

pub const CHECKPOINT_FORMAT: &str = "mns-network";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

impl OutputActivation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            OutputActivation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Neuron counts from input to output, e.g. `[784, 60, 10]`.
    pub layer_sizes: Vec<usize>,
    /// Channels multiplexed into each SOA of every hidden layer.
    pub mns_channels: usize,
    pub g_ss_db: f64,
    pub p_sat: f64,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, mns_channels: usize, g_ss_db: f64, p_sat: f64) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            mns_channels,
            g_ss_db,
            p_sat,
            output_activation: OutputActivation::Sigmoid,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec("layer sizes must be positive".into()));
        }
        self.soa_params()
            .validate()
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let hidden = &self.layer_sizes[1..self.layer_sizes.len() - 1];
        if let Some(bad) = hidden.iter().find(|&&h| h % self.mns_channels != 0) {
            return Err(Error::InvalidSpec(format!(
                "hidden layer of {bad} neurons is not divisible by {} channels per device",
                self.mns_channels
            )));
        }
        Ok(())
    }

    /// Parameters shared by every MNS device.
    pub fn soa_params(&self) -> SoaParams {
        SoaParams {
            g_ss_db: self.g_ss_db,
            p_sat: self.p_sat,
            n_channels: self.mns_channels,
        }
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Whether weight layer `layer` feeds MNS devices (every layer but the last).
    pub fn is_hidden(&self, layer: usize) -> bool {
        layer + 1 < self.depth()
    }

    /// SOA count of weight layer `layer`; zero for the electrical output layer.
    pub fn device_count(&self, layer: usize) -> usize {
        if self.is_hidden(layer) {
            self.layer_sizes[layer + 1] / self.mns_channels
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    weights: Vec<Matrix>,
    seed: u64,
}

/// Pre- and post-activation of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `W . input`, before clamping.
    pub s: Vec<f64>,
    pub o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.layers.last().expect("trace has at least one layer").o
    }

    /// Input seen by weight layer `layer`.
    pub fn layer_input(&self, layer: usize) -> &[f64] {
        if layer == 0 {
            &self.input
        } else {
            &self.layers[layer - 1].o
        }
    }
}

/// Draws every weight i.i.d. from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Matrix::from_fn(fan_out, fan_in, |_, _| dist.sample(&mut rng))
        })
        .collect();
    Ok(Network {
        spec: spec.clone(),
        weights,
        seed,
    })
}

/// Clamp each channel at zero and run every device of an MNS layer.
pub(crate) fn mns_forward(soa: &SoaParams, s: &[f64], o: &mut [f64], clamped: &mut Vec<f64>) {
    clamped.clear();
    clamped.extend(s.iter().map(|&v| v.max(0.0)));
    let n = soa.n_channels;
    for (x, y) in clamped.chunks_exact(n).zip(o.chunks_exact_mut(n)) {
        soa.activate_into(x, y);
    }
}

/// Jacobian block `d o_i / d s_j` of one device, with respect to the unclamped
/// pre-activations: columns of clamped channels (`s_j <= 0`) are zero.
pub fn device_jacobian(soa: &SoaParams, s_block: &[f64], out: &mut [f64]) {
    let n = s_block.len();
    let x: Vec<f64> = s_block.iter().map(|&v| v.max(0.0)).collect();
    soa.jacobian_into(&x, out);
    for (j, &sj) in s_block.iter().enumerate() {
        if sj <= 0.0 {
            for i in 0..n {
                out[i * n + j] = 0.0;
            }
        }
    }
}

impl Network {
    pub fn from_parts(spec: NetworkSpec, weights: Vec<Matrix>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.depth() {
            return Err(Error::mismatch("weight layer count", spec.depth(), weights.len()));
        }
        for (l, (w, sizes)) in weights.iter().zip(spec.layer_sizes.windows(2)).enumerate() {
            if w.shape() != (sizes[1], sizes[0]) {
                return Err(Error::InvalidSpec(format!(
                    "layer {l} weights are {:?}, expected {:?}",
                    w.shape(),
                    (sizes[1], sizes[0])
                )));
            }
            if !w.is_finite() {
                return Err(Error::InvalidSpec(format!("layer {l} has non-finite weights")));
            }
        }
        Ok(Self { spec, weights, seed })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.layers.pop().unwrap().o)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        Ok(self.forward_trace_unchecked(input))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_size() {
            return Err(Error::mismatch("network input", self.spec.input_size(), input.len()));
        }
        if let Some(v) = input.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidPower(format!(
                "network inputs are optical powers and must be >= 0, got {v}"
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_trace_unchecked(&self, input: &[f64]) -> ForwardTrace {
        let soa = self.spec.soa_params();
        let act = self.spec.output_activation;
        let mut layers: Vec<LayerTrace> = Vec::with_capacity(self.weights.len());
        let mut support = Vec::new();
        let mut clamped = Vec::new();
        for (l, w) in self.weights.iter().enumerate() {
            let x = if l == 0 { input } else { &layers[l - 1].o };
            support_of(x, &mut support);
            let mut s = vec![0.0; w.rows()];
            w.sparse_matvec_into(x, &support, &mut s);
            let mut o = vec![0.0; w.rows()];
            if self.spec.is_hidden(l) {
                mns_forward(&soa, &s, &mut o, &mut clamped);
            } else {
                for (oi, &si) in o.iter_mut().zip(&s) {
                    *oi = act.apply(si);
                }
            }
            layers.push(LayerTrace { s, o });
        }
        ForwardTrace {
            input: input.to_vec(),
            layers,
        }
    }

    /// Checks that `trace` has the shape this network produces.
    pub fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.input.len() != self.spec.input_size() || trace.layers.len() != self.weights.len() {
            return Err(Error::StaleTrace("layer count or input size differs".into()));
        }
        for (l, (lt, w)) in trace.layers.iter().zip(&self.weights).enumerate() {
            if lt.s.len() != w.rows() || lt.o.len() != w.rows() {
                return Err(Error::StaleTrace(format!("layer {l} width differs")));
            }
        }
        Ok(())
    }

    /// Assembled Jacobian `J[(i, j)] = d o_i / d s_j` of layer `layer` at the traced point.
    ///
    /// Hidden layers are block diagonal, one `n x n` block per device; entries
    /// coupling different devices are exactly zero. The output layer is diagonal.
    pub fn layer_jacobian(&self, trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
        self.check_trace(trace)?;
        let lt = &trace.layers[layer];
        let width = lt.s.len();
        let mut jac = Matrix::zeros(width, width);
        if self.spec.is_hidden(layer) {
            let soa = self.spec.soa_params();
            let n = soa.n_channels;
            let mut block = vec![0.0; n * n];
            for (d, s_block) in lt.s.chunks_exact(n).enumerate() {
                device_jacobian(&soa, s_block, &mut block);
                for i in 0..n {
                    for j in 0..n {
                        jac[(d * n + i, d * n + j)] = block[i * n + j];
                    }
                }
            }
        } else {
            let act = self.spec.output_activation;
            for (i, &y) in lt.o.iter().enumerate() {
                jac[(i, i)] = act.derivative_from_output(y);
            }
        }
        Ok(jac)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint::from(self))?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(json)?;
        ckpt.into_network()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk layout of a network: spec, seed and row-major weights.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: NetworkSpec,
    seed: u64,
    weights: Vec<WeightRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Network> for Checkpoint {
    fn from(net: &Network) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: net.spec.clone(),
            seed: net.seed,
            weights: net
                .weights
                .iter()
                .map(|w| WeightRecord {
                    rows: w.rows(),
                    cols: w.cols(),
                    data: w.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl Checkpoint {
    fn into_network(self) -> Result<Network> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidSpec(format!("not a network checkpoint: {}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        let weights = self
            .weights
            .into_iter()
            .map(|w| Matrix::from_vec(w.rows, w.cols, w.data))
            .collect::<Result<Vec<_>>>()?;
        Network::from_parts(self.spec, weights, self.seed)
    }
}
