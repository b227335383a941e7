//! Multichannel semiconductor optical amplifier acting as a multiplexed neuron set.
//!
//! All `n` wavelength channels share one saturated gain
//!
//! ```text
//! G = G_ss / (1 + sum_k x_k / P_sat),    y_i = x_i * G
//! ```
//!
//! so every output depends on every input (cross-gain modulation). With
//! `D = 1 + sum_k x_k / P_sat` the Jacobian is
//!
//! ```text
//! dy_i/dx_j = G_ss * delta_ij / D - G_ss * x_i / (P_sat * D^2)
//! ```
//!
//! Matrices returned here use the convention `J[(i, j)] = dy_i / dx_j`
//! (row = output channel, column = input channel).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Physical parameters of one multiplexed SOA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoaParams {
    /// Small-signal single-pass gain in dB (power, factor 10).
    pub g_ss_db: f64,
    /// Saturation power, in the same units as every channel power.
    pub p_sat: f64,
    pub n_channels: usize,
}

impl SoaParams {
    pub fn new(g_ss_db: f64, p_sat: f64, n_channels: usize) -> Result<Self> {
        let params = Self {
            g_ss_db,
            p_sat,
            n_channels,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.g_ss_db.is_finite() || self.g_ss_db <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "g_ss_db must be finite and positive (linear gain > 1), got {}",
                self.g_ss_db
            )));
        }
        if !(self.p_sat > 0.0) {
            return Err(Error::InvalidParams(format!(
                "p_sat must be positive, got {}",
                self.p_sat
            )));
        }
        if self.n_channels == 0 {
            return Err(Error::InvalidParams("n_channels must be at least 1".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn linear_gain(&self) -> f64 {
        db_to_linear(self.g_ss_db)
    }

    /// `D = 1 + sum(x) / P_sat`. Assumes `x` is a valid power vector.
    #[inline]
    pub fn saturation_denominator(&self, x: &[f64]) -> f64 {
        let d = 1.0 + x.iter().sum::<f64>() / self.p_sat;
        debug_assert!(d >= 1.0, "negative total input power");
        d
    }

    /// Unchecked gain for the hot path.
    #[inline]
    pub fn gain_unchecked(&self, x: &[f64]) -> f64 {
        self.linear_gain() / self.saturation_denominator(x)
    }

    /// Unchecked `out[k] = x[k] * G`; lengths must match.
    #[inline]
    pub fn activate_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        let g = self.gain_unchecked(x);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi * g;
        }
    }

    /// Unchecked Jacobian block written into `out` (row-major `n x n`).
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        debug_assert_eq!(out.len(), n * n);
        let g_lin = self.linear_gain();
        let d = self.saturation_denominator(x);
        let diag = g_lin / d;
        let cross = g_lin / (self.p_sat * d * d);
        for i in 0..n {
            let row = &mut out[i * n..(i + 1) * n];
            let c = cross * x[i];
            for (j, v) in row.iter_mut().enumerate() {
                *v = -c;
                if i == j {
                    *v += diag;
                }
            }
        }
    }

    fn check(&self, inputs: &PowerVector) -> Result<()> {
        if inputs.len() != self.n_channels {
            return Err(Error::mismatch("SOA input channels", self.n_channels, inputs.len()));
        }
        Ok(())
    }
}

#[inline]
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Nonnegative, finite per-channel optical powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PowerVector(Vec<f64>);

impl PowerVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidPower(format!(
                "channel {i} has power {v}; powers must be finite and >= 0"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for PowerVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<PowerVector> for Vec<f64> {
    fn from(p: PowerVector) -> Self {
        p.0
    }
}

/// Operating point and `(k, i)` pair for evaluating `dP_out_k / dP_in_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosstalkPoint {
    pub operating_input: PowerVector,
    /// Output channel.
    pub k: usize,
    /// Perturbed input channel.
    pub i: usize,
}

pub fn linear_gain(params: &SoaParams) -> f64 {
    params.linear_gain()
}

/// Saturated single-pass gain shared by all channels.
pub fn saturated_gain(params: &SoaParams, inputs: &PowerVector) -> Result<f64> {
    params.check(inputs)?;
    Ok(params.gain_unchecked(inputs.as_slice()))
}

/// Per-channel output powers of the device.
pub fn activate(params: &SoaParams, inputs: &PowerVector) -> Result<PowerVector> {
    params.check(inputs)?;
    let mut out = vec![0.0; inputs.len()];
    params.activate_into(inputs.as_slice(), &mut out);
    Ok(PowerVector(out))
}

/// Full `n x n` Jacobian, `J[(i, j)] = dP_out_i / dP_in_j`.
pub fn jacobian(params: &SoaParams, inputs: &PowerVector) -> Result<Matrix> {
    params.check(inputs)?;
    let n = inputs.len();
    let mut data = vec![0.0; n * n];
    params.jacobian_into(inputs.as_slice(), &mut data);
    Matrix::from_vec(n, n, data)
}

/// Crosstalk level of input channel `i` on output channel `k`: `dP_out_k / dP_in_i`.
///
/// For `i == k` this is the self-derivative.
pub fn crosstalk_level(params: &SoaParams, point: &CrosstalkPoint) -> Result<f64> {
    params.check(&point.operating_input)?;
    let n = params.n_channels;
    for idx in [point.k, point.i] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    let x = point.operating_input.as_slice();
    let g_lin = params.linear_gain();
    let d = params.saturation_denominator(x);
    let mut v = -g_lin * x[point.k] / (params.p_sat * d * d);
    if point.i == point.k {
        v += g_lin / d;
    }
    Ok(v)
}
