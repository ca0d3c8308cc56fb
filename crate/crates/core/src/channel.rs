//! Correlated random-walk phase noise and the additive Gaussian channel.
//!
//! Channels are ordered `(x,1), (y,1), (x,2), ..., (y,D/2)`: channels `2j`
//! and `2j+1` (zero-based) are the two polarizations of core `j`. The total
//! phase on channel `i` is the sum of a laser phase common to every channel,
//! a drift shared by the two polarizations of a core, and a drift private to
//! the channel. Each component is an independent Gaussian random walk started
//! uniformly on `[0, 2pi)`. Phases are kept unwrapped.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel count must be even and at least 2, got {0}")]
    OddChannelCount(usize),
    #[error("phase-noise variance {name} must be finite and non-negative, got {value}")]
    InvalidVariance { name: &'static str, value: f64 },
    #[error("block length must be at least 1")]
    EmptyBlock,
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error("noise variance for channel {channel} must be finite and non-negative, got {value}")]
    InvalidNoiseVariance { channel: usize, value: f64 },
}

/// Random-walk increment variances (rad^2 per symbol) and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseModel {
    channels: usize,
    var_nu: f64,
    var_c: f64,
    var_p: f64,
}

impl PhaseModel {
    pub fn new(channels: usize, var_nu: f64, var_c: f64, var_p: f64) -> Result<Self, ChannelError> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(ChannelError::OddChannelCount(channels));
        }
        for (name, value) in [("var_nu", var_nu), ("var_c", var_c), ("var_p", var_p)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ChannelError::InvalidVariance { name, value });
            }
        }
        Ok(Self {
            channels,
            var_nu,
            var_c,
            var_p,
        })
    }

    /// Laser variance `2 pi dnu Ts`, with drift variances given as ratios
    /// `var_nu / var_c` and `var_nu / var_p`. An infinite ratio disables the
    /// corresponding drift.
    pub fn from_linewidth(
        channels: usize,
        dnu_ts: f64,
        ratio_c: f64,
        ratio_p: f64,
    ) -> Result<Self, ChannelError> {
        let var_nu = TAU * dnu_ts;
        Self::new(channels, var_nu, var_nu / ratio_c, var_nu / ratio_p)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cores(&self) -> usize {
        self.channels / 2
    }

    pub fn var_nu(&self) -> f64 {
        self.var_nu
    }

    pub fn var_c(&self) -> f64 {
        self.var_c
    }

    pub fn var_p(&self) -> f64 {
        self.var_p
    }

    /// Total increment variance seen by any single channel.
    pub fn per_channel_variance(&self) -> f64 {
        self.var_nu + self.var_c + self.var_p
    }
}

/// Increment covariance of the multidimensional random walk: `var_nu`
/// everywhere, plus `var_c` within each core, plus `var_p` on the diagonal.
pub fn build_covariance(pm: &PhaseModel) -> DMatrix<f64> {
    let d = pm.channels;
    DMatrix::from_fn(d, d, |i, j| {
        let mut q = pm.var_nu;
        if i / 2 == j / 2 {
            q += pm.var_c;
        }
        if i == j {
            q += pm.var_p;
        }
        q
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(q: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(q.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Samples a `D x N` phase realization component by component.
pub fn sample_phase_noise<R: Rng + ?Sized>(
    pm: &PhaseModel,
    n: usize,
    rng: &mut R,
) -> Result<Grid<f64>, ChannelError> {
    if n == 0 {
        return Err(ChannelError::EmptyBlock);
    }
    let d = pm.channels;
    let walk = |rng: &mut R, var: f64| -> Vec<f64> {
        let sd = var.sqrt();
        let mut v = Vec::with_capacity(n);
        let mut x = rng.random::<f64>() * TAU;
        v.push(x);
        for _ in 1..n {
            let z: f64 = rng.sample(StandardNormal);
            x += sd * z;
            v.push(x);
        }
        v
    };

    let laser = walk(rng, pm.var_nu);
    let cores: Vec<Vec<f64>> = (0..pm.cores()).map(|_| walk(rng, pm.var_c)).collect();
    let pols: Vec<Vec<f64>> = (0..d).map(|_| walk(rng, pm.var_p)).collect();

    Ok(Grid::from_fn(d, n, |i, k| {
        laser[k] + cores[i / 2][k] + pols[i][k]
    }))
}

/// Samples a `D x N` realization directly from Gaussian increments with
/// covariance `q` (which only needs to be positive semidefinite).
pub fn sample_phase_noise_joint<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Grid<f64>, ChannelError> {
    if n == 0 {
        return Err(ChannelError::EmptyBlock);
    }
    let d = q.nrows();
    if q.ncols() != d {
        return Err(ChannelError::Shape {
            what: format!("covariance is {}x{}", d, q.ncols()),
        });
    }
    // Symmetric square root factor via the eigendecomposition; tolerates
    // rank-deficient covariances where Cholesky would fail.
    let eig = SymmetricEigen::new(q.clone());
    let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let factor = &eig.eigenvectors * sqrt_l;

    let mut out = Grid::filled(d, n, 0.0);
    let mut state: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * TAU).collect();
    let mut z = vec![0.0; d];
    for k in 0..n {
        if k > 0 {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for (i, s) in state.iter_mut().enumerate() {
                *s += (0..d).map(|j| factor[(i, j)] * z[j]).sum::<f64>();
            }
        }
        for (i, s) in state.iter().enumerate() {
            *out.get_mut(i, k) = *s;
        }
    }
    Ok(out)
}

/// `r = s * exp(j theta) + n`, with `n` circular Gaussian of variance
/// `noise_var[i]` per real dimension on channel `i`.
pub fn apply_channel<R: Rng + ?Sized>(
    symbols: &Grid<Complex64>,
    phases: &Grid<f64>,
    noise_var: &[f64],
    rng: &mut R,
) -> Result<Grid<Complex64>, ChannelError> {
    if symbols.shape() != phases.shape() {
        return Err(ChannelError::Shape {
            what: format!(
                "symbols {:?} vs phases {:?}",
                symbols.shape(),
                phases.shape()
            ),
        });
    }
    if noise_var.len() != symbols.rows() {
        return Err(ChannelError::Shape {
            what: format!(
                "{} noise variances for {} channels",
                noise_var.len(),
                symbols.rows()
            ),
        });
    }
    for (channel, &value) in noise_var.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(ChannelError::InvalidNoiseVariance { channel, value });
        }
    }
    let (d, n) = symbols.shape();
    let mut out = Vec::with_capacity(d * n);
    for (i, &var) in noise_var.iter().enumerate() {
        let sd = var.sqrt();
        for (s, &th) in symbols.row(i).iter().zip(phases.row(i)) {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            out.push(s * Complex64::from_polar(1.0, th) + Complex64::new(re, im) * sd);
        }
    }
    Ok(Grid::from_vec(d, n, out))
}

/// One simulated block: what was sent, the phases it saw, and what arrived.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Constellation point index of every transmitted symbol.
    pub labels: Grid<usize>,
    pub symbols: Grid<Complex64>,
    pub phases: Grid<f64>,
    pub received: Grid<Complex64>,
    pub noise_var: Vec<f64>,
}

impl Frame {
    pub fn channels(&self) -> usize {
        self.symbols.rows()
    }

    pub fn len(&self) -> usize {
        self.symbols.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.cols() == 0
    }
}
