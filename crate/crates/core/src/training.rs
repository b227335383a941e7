//! Crosstalk-aware backpropagation and its diagonal-only baseline.
//!
//! Activation Jacobians enter the error recursion in the orientation
//! `M[(i, j)] = d output_j / d s_i` (the transpose of [`crate::soa::jacobian`]),
//! so every error vector is a plain product:
//!
//! ```text
//! delta^o = M^o . (output - e)
//! delta^l = M^l . (W^(l+1))^T . delta^(l+1)
//! dL/dW^l = delta^l . (o^(l-1))^T
//! ```
//!
//! [`Algorithm::NewBp`] uses the full matrix, including the negative
//! off-diagonal cross-gain terms inside each SOA block. [`Algorithm::Traditional`]
//! keeps only the diagonal, which is what a per-neuron derivative would give.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{DataError, Error, Result};
use crate::linalg::{support_of, Matrix};
use crate::network::{device_jacobian, init_weights, ForwardTrace, Network, NetworkSpec};

/// Finite-difference step for the full-network gradient oracle.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    /// Full crosstalk Jacobian.
    #[serde(rename = "new")]
    NewBp,
    /// Diagonal entries only.
    #[serde(rename = "traditional")]
    Traditional,
}

impl Algorithm {
    pub const ALL: [Algorithm; 2] = [Algorithm::NewBp, Algorithm::Traditional];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::NewBp => "new",
            Algorithm::Traditional => "traditional",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "new" | "newbp" | "new-bp" => Ok(Algorithm::NewBp),
            "traditional" | "trad" | "traditionalbp" => Ok(Algorithm::Traditional),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle. Weight init is seeded separately.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::NewBp,
            learning_rate: 0.3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `dL/dW` for every layer plus the error vectors `delta` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    /// `dL/ds` per layer. Empty when the set came from the finite-difference oracle.
    pub deltas: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            deltas: Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }

    /// Largest [`relative_error`] over all weight entries.
    pub fn max_relative_error(&self, other: &GradientSet) -> Result<f64> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::mismatch("gradient layers", self.weights.len(), other.weights.len()));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            if a.shape() != b.shape() {
                return Err(Error::mismatch("gradient layer size", a.rows() * a.cols(), b.rows() * b.cols()));
            }
            for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
                worst = worst.max(relative_error(x, y));
            }
        }
        Ok(worst)
    }
}

/// Relative tolerance used when comparing gradients.
pub const GRAD_REL_TOL: f64 = 1e-6;
/// Absolute floor below which differences count as agreement.
pub const GRAD_ABS_FLOOR: f64 = 1e-9;

/// `|a - b| / max(|a|, |b|, GRAD_ABS_FLOOR / GRAD_REL_TOL)`.
///
/// A value `<= GRAD_REL_TOL` means the entries agree to `1e-6` relative or
/// `1e-9` absolute, whichever is looser.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(GRAD_ABS_FLOOR / GRAD_REL_TOL);
    (a - b).abs() / scale
}

/// `L = 1/2 * sum_k (e_k - output_k)^2`.
pub fn loss(output: &[f64], expected: &[f64]) -> Result<f64> {
    if output.len() != expected.len() {
        return Err(Error::mismatch("loss", expected.len(), output.len()));
    }
    Ok(0.5
        * output
            .iter()
            .zip(expected)
            .map(|(o, e)| (e - o) * (e - o))
            .sum::<f64>())
}

/// `delta^o = jac . (output - e)` with `jac[(i, j)] = d output_j / d s_i`.
pub fn output_delta(trace: &ForwardTrace, expected: &[f64], jac: &Matrix) -> Result<Vec<f64>> {
    let out = trace
        .layers
        .last()
        .ok_or_else(|| Error::StaleTrace("empty trace".into()))?
        .o
        .as_slice();
    if expected.len() != out.len() {
        return Err(Error::mismatch("expected output", out.len(), expected.len()));
    }
    if jac.shape() != (out.len(), out.len()) {
        return Err(Error::mismatch("output Jacobian", out.len() * out.len(), jac.rows() * jac.cols()));
    }
    let residual: Vec<f64> = out.iter().zip(expected).map(|(o, e)| o - e).collect();
    Ok(jac.matvec(&residual))
}

/// Activation Jacobian of `layer` in error-recursion orientation
/// (`M[(i, j)] = d o_j / d s_i`), with off-diagonals dropped for the baseline.
pub fn crosstalk_matrix(
    net: &Network,
    trace: &ForwardTrace,
    layer: usize,
    algorithm: Algorithm,
) -> Result<Matrix> {
    let mut m = net.layer_jacobian(trace, layer)?.transpose();
    if algorithm == Algorithm::Traditional {
        let n = m.rows();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m[(i, j)] = 0.0;
                }
            }
        }
    }
    Ok(m)
}

/// Gradient of the per-sample loss with respect to every weight.
pub fn backprop(
    net: &Network,
    trace: &ForwardTrace,
    expected: &[f64],
    algorithm: Algorithm,
) -> Result<GradientSet> {
    net.check_trace(trace)?;
    let mut grads = GradientSet::zeros_like(net);
    let mut scratch = Scratch::default();
    accumulate(net, trace, expected, algorithm, 1.0, &mut grads, &mut scratch, true)?;
    Ok(grads)
}

#[derive(Default)]
struct Scratch {
    block: Vec<f64>,
    support: Vec<usize>,
}

/// Adds `scale * dL/dW` into `grads`.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    net: &Network,
    trace: &ForwardTrace,
    expected: &[f64],
    algorithm: Algorithm,
    scale: f64,
    grads: &mut GradientSet,
    scratch: &mut Scratch,
    keep_deltas: bool,
) -> Result<()> {
    let spec = net.spec();
    let depth = spec.depth();
    let last = depth - 1;
    let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); depth];

    let out_jac = crosstalk_matrix_output(net, trace, algorithm);
    deltas[last] = output_delta(trace, expected, &out_jac)?;

    let soa = spec.soa_params();
    let n = soa.n_channels;
    scratch.block.resize(n * n, 0.0);
    for l in (0..last).rev() {
        // dL/do^l
        let upstream = net.weights()[l + 1].matvec_transposed(&deltas[l + 1]);
        let s = &trace.layers[l].s;
        let mut delta = vec![0.0; s.len()];
        for ((s_block, g_block), d_block) in s
            .chunks_exact(n)
            .zip(upstream.chunks_exact(n))
            .zip(delta.chunks_exact_mut(n))
        {
            // J[(i, j)] = d o_i / d s_j; delta_j = sum_i J[(i, j)] * g_i
            device_jacobian(&soa, s_block, &mut scratch.block);
            for (j, dj) in d_block.iter_mut().enumerate() {
                *dj = match algorithm {
                    Algorithm::NewBp => (0..n).map(|i| scratch.block[i * n + j] * g_block[i]).sum(),
                    Algorithm::Traditional => scratch.block[j * n + j] * g_block[j],
                };
            }
        }
        deltas[l] = delta;
    }

    for (l, delta) in deltas.iter().enumerate() {
        let input = trace.layer_input(l);
        support_of(input, &mut scratch.support);
        grads.weights[l].add_outer(scale, delta, input, &scratch.support);
    }
    if keep_deltas {
        grads.deltas = deltas;
    }
    Ok(())
}

fn crosstalk_matrix_output(net: &Network, trace: &ForwardTrace, _algorithm: Algorithm) -> Matrix {
    // Electrical sigmoid: diagonal for both algorithms.
    let act = net.spec().output_activation;
    let out = trace.output();
    let mut m = Matrix::zeros(out.len(), out.len());
    for (i, &y) in out.iter().enumerate() {
        m[(i, i)] = act.derivative_from_output(y);
    }
    m
}

/// Central-difference estimate of `dL/dW` for every weight, using only
/// forward passes. Costs two forward passes per weight.
pub fn fd_gradient_oracle(net: &Network, input: &[f64], expected: &[f64]) -> Result<GradientSet> {
    let base = net.forward(input)?;
    loss(&base, expected)?;
    let mut probe = net.clone();
    let mut grads = GradientSet::zeros_like(net);
    for l in 0..net.weights().len() {
        for idx in 0..net.weights()[l].as_slice().len() {
            let w0 = net.weights()[l].as_slice()[idx];
            probe.weights_mut()[l].as_mut_slice()[idx] = w0 + FD_STEP;
            let up = loss(&probe.forward(input)?, expected)?;
            probe.weights_mut()[l].as_mut_slice()[idx] = w0 - FD_STEP;
            let down = loss(&probe.forward(input)?, expected)?;
            probe.weights_mut()[l].as_mut_slice()[idx] = w0;
            grads.weights[l].as_mut_slice()[idx] = (up - down) / (2.0 * FD_STEP);
        }
    }
    Ok(grads)
}

/// `W <- W - learning_rate * dL/dW`.
pub fn sgd_step(net: &Network, grads: &GradientSet, learning_rate: f64) -> Result<Network> {
    let mut next = net.clone();
    apply_gradients(&mut next, grads, learning_rate)?;
    Ok(next)
}

pub fn apply_gradients(net: &mut Network, grads: &GradientSet, learning_rate: f64) -> Result<()> {
    if grads.weights.len() != net.weights().len() {
        return Err(Error::mismatch("gradient layers", net.weights().len(), grads.weights.len()));
    }
    for (w, g) in net.weights().iter().zip(&grads.weights) {
        if w.shape() != g.shape() {
            return Err(Error::mismatch("gradient layer size", w.rows() * w.cols(), g.rows() * g.cols()));
        }
    }
    for (w, g) in net.weights_mut().iter_mut().zip(&grads.weights) {
        w.axpy(-learning_rate, g);
    }
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss seen during the epoch.
    pub loss: f64,
    /// Accuracy on the evaluation set after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochRecord>,
}

/// Fraction of samples whose largest output matches the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(DataError::Empty.into());
    }
    if data.input_dim() != net.spec().input_size() {
        return Err(Error::mismatch("dataset input", net.spec().input_size(), data.input_dim()));
    }
    let mut buf = vec![0.0; data.input_dim()];
    let mut correct = 0usize;
    for i in 0..data.len() {
        data.encode_into(i, &mut buf);
        let out = net.forward_trace_unchecked(&buf);
        if argmax(out.output()) == data.label(i) as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Mini-batch gradient descent with batch-averaged gradients.
///
/// The shuffle order is drawn from `config.seed`; `history` has one record per
/// epoch with the accuracy on `eval`.
pub fn train(net: Network, data: &Dataset, eval: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() || eval.is_empty() {
        return Err(DataError::Empty.into());
    }
    let spec = net.spec().clone();
    for d in [data, eval] {
        if d.input_dim() != spec.input_size() {
            return Err(Error::mismatch("dataset input", spec.input_size(), d.input_dim()));
        }
    }
    if spec.output_size() != crate::dataset::N_CLASSES {
        return Err(Error::mismatch("network output", crate::dataset::N_CLASSES, spec.output_size()));
    }

    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = GradientSet::zeros_like(&net);
    let mut scratch = Scratch::default();
    let mut input = vec![0.0; data.input_dim()];
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.weights.iter_mut().for_each(|g| g.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                data.encode_into(i, &mut input);
                let expected = data.expected(i);
                let trace = net.forward_trace_unchecked(&input);
                loss_sum += loss(trace.output(), &expected)?;
                accumulate(&net, &trace, &expected, config.algorithm, scale, &mut grads, &mut scratch, false)?;
            }
            apply_gradients(&mut net, &grads, config.learning_rate)?;
        }
        if !net.weights().iter().all(Matrix::is_finite) {
            return Err(Error::InvalidConfig(format!(
                "weights diverged in epoch {epoch}; lower the learning rate"
            )));
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: evaluate(&net, eval)?,
        });
    }
    Ok(TrainOutcome { network: net, history })
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidConfig(format!("{other:?}")),
    })?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A seeded random gradient-check instance: weights from [`init_weights`],
/// inputs and targets uniform in `[0, 1)`.
///
/// The output weights are scaled by `4 / G_lin` so the sigmoid stays out of
/// saturation whatever the gain.
pub fn random_instance(
    layer_sizes: &[usize],
    channels: usize,
    g_ss_db: f64,
    p_sat: f64,
    seed: u64,
) -> Result<(Network, Vec<f64>, Vec<f64>)> {
    let spec = NetworkSpec::new(layer_sizes.to_vec(), channels, g_ss_db, p_sat)?;
    let mut net = init_weights(&spec, seed)?;
    let g = spec.soa_params().linear_gain();
    net.weights_mut().last_mut().unwrap().scale(4.0 / g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let input = (0..spec.input_size()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let expected = (0..spec.output_size()).map(|_| rng.gen_range(0.0..1.0)).collect();
    Ok((net, input, expected))
}

/// Largest relative error of `algorithm`'s gradient against the
/// finite-difference oracle.
pub fn gradient_check(net: &Network, input: &[f64], expected: &[f64], algorithm: Algorithm) -> Result<f64> {
    let trace = net.forward_trace(input)?;
    let analytic = backprop(net, &trace, expected, algorithm)?;
    analytic.max_relative_error(&fd_gradient_oracle(net, input, expected)?)
}
