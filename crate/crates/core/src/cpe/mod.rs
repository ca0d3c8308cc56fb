//! Carrier-phase estimators.
//!
//! [`fg_eks`] is the iterative pilot-aided estimator: an extended Kalman
//! smoother over the multidimensional phase random walk, alternated with
//! per-symbol posterior updates that feed soft symbols back into the next
//! smoothing pass. Running it with the full covariance performs joint-channel
//! estimation; [`pc_cpe`] runs it channel by channel. [`bps`] and
//! [`viterbi_viterbi`] are blind per-channel baselines.

mod baselines;
mod dense;
mod fg_eks;

pub use baselines::{
    best_window, bps, bps_half_window_grid, bps_tune_half_window, bps_window_errors,
    coherent_decisions, viterbi_viterbi, BpsOutput, BpsParams,
};
pub use fg_eks::{fg_eks, pc_cpe, pc_cpe_with_variance, symbol_posterior};

use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CpeError {
    #[error("channel {channel} has no pilot at the first time index")]
    MissingInitialPilot { channel: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("noise variance of channel {channel} must be positive and finite, got {value}")]
    InvalidNoiseVariance { channel: usize, value: f64 },
    #[error("at least one iteration is required")]
    NoIterations,
    #[error("covariance must be symmetric with finite entries")]
    InvalidCovariance,
    #[error("{stage} matrix at time {time} is not positive definite")]
    Singular { stage: &'static str, time: usize },
    #[error("zero received power in the estimation window around time {time}")]
    ZeroSignal { time: usize },
    #[error("invalid estimator parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpeOptions {
    /// Number of smoothing / soft-symbol passes; the last one decides.
    pub iterations: usize,
    /// Also produce exact bit LLRs from the final symbol posteriors.
    pub soft_output: bool,
}

impl Default for CpeOptions {
    fn default() -> Self {
        Self {
            iterations: 2,
            soft_output: false,
        }
    }
}

impl CpeOptions {
    pub fn iterations(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn with_soft_output(mut self, soft: bool) -> Self {
        self.soft_output = soft;
        self
    }
}

/// Forward and smoothed Gaussian phase estimates of the last pass.
///
/// Stored time-major: the mean at time `k` is `D` contiguous values and the
/// covariance at time `k` is a row-major `D x D` block.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrack {
    channels: usize,
    len: usize,
    forward_mean: Vec<f64>,
    forward_cov: Vec<f64>,
    smoothed_mean: Vec<f64>,
    smoothed_cov: Vec<f64>,
}

impl PhaseTrack {
    pub(crate) fn zeros(channels: usize, len: usize) -> Self {
        let d = channels;
        Self {
            channels,
            len,
            forward_mean: vec![0.0; len * d],
            forward_cov: vec![0.0; len * d * d],
            smoothed_mean: vec![0.0; len * d],
            smoothed_cov: vec![0.0; len * d * d],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward_mean(&self, time: usize) -> &[f64] {
        let d = self.channels;
        &self.forward_mean[time * d..(time + 1) * d]
    }

    pub fn forward_cov(&self, time: usize) -> &[f64] {
        let dd = self.channels * self.channels;
        &self.forward_cov[time * dd..(time + 1) * dd]
    }

    pub fn smoothed_mean(&self, time: usize) -> &[f64] {
        let d = self.channels;
        &self.smoothed_mean[time * d..(time + 1) * d]
    }

    pub fn smoothed_cov(&self, time: usize) -> &[f64] {
        let dd = self.channels * self.channels;
        &self.smoothed_cov[time * dd..(time + 1) * dd]
    }

    /// Smoothed phase of one channel at one time.
    pub fn phase(&self, channel: usize, time: usize) -> f64 {
        self.smoothed_mean[time * self.channels + channel]
    }

    /// Smoothed marginal variance of one channel at one time.
    pub fn variance(&self, channel: usize, time: usize) -> f64 {
        let d = self.channels;
        self.smoothed_cov[time * d * d + channel * d + channel]
    }

    /// Smoothed phases as a `D x N` grid.
    pub fn smoothed_phases(&self) -> Grid<f64> {
        Grid::from_fn(self.channels, self.len, |i, k| self.phase(i, k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpeResult {
    /// Decided constellation index at every data position; `None` at pilots.
    pub decisions: Grid<Option<u32>>,
    /// Bit LLRs (positive favours 0), `bits_per_symbol` per position, laid
    /// out channel-major. Zero at pilot positions.
    pub llrs: Option<Vec<f64>>,
    pub bits_per_symbol: usize,
    pub track: PhaseTrack,
    pub iterations_run: usize,
}

impl CpeResult {
    pub fn llrs_at(&self, channel: usize, time: usize) -> Option<&[f64]> {
        let m = self.bits_per_symbol;
        let n = self.decisions.cols();
        self.llrs.as_ref().map(|l| {
            let base = (channel * n + time) * m;
            &l[base..base + m]
        })
    }
}
