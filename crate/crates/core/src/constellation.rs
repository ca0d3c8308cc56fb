//! Normalized Gray-mapped square QAM.
//!
//! Points are stored by label: `points[l]` is the point whose bit label is
//! `l`, read most-significant bit first. The upper half of the label bits
//! selects the in-phase level and the lower half the quadrature level, each
//! through a binary-reflected Gray code over the amplitude levels in
//! increasing order.

use libm::erfc;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstellationError {
    #[error("unsupported QAM order {0}: expected one of 4, 16, 64, 256, 1024")]
    UnsupportedOrder(usize),
    #[error("average symbol energy must be positive and finite, got {0}")]
    InvalidEnergy(f64),
    #[error("bit sequence of length {len} is not a multiple of {bits_per_symbol}")]
    RaggedBits { len: usize, bits_per_symbol: usize },
    #[error("noise variance must be positive, got {0}")]
    InvalidNoiseVariance(f64),
}

pub const SUPPORTED_ORDERS: [usize; 5] = [4, 16, 64, 256, 1024];

#[inline]
fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

#[inline]
fn gray_inverse(mut g: usize) -> usize {
    let mut i = g;
    while g > 1 {
        g >>= 1;
        i ^= g;
    }
    i
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    order: usize,
    bits_per_symbol: usize,
    side: usize,
    es: f64,
    /// Distance from the origin to the innermost level on either axis.
    step: f64,
    points: Vec<Complex64>,
    /// Per-axis amplitude level index -> Gray label of that level.
    axis_labels: Vec<usize>,
}

impl Constellation {
    /// Builds a square M-QAM constellation with average energy `es`.
    pub fn qam(order: usize, es: f64) -> Result<Self, ConstellationError> {
        if !SUPPORTED_ORDERS.contains(&order) {
            return Err(ConstellationError::UnsupportedOrder(order));
        }
        if !(es > 0.0 && es.is_finite()) {
            return Err(ConstellationError::InvalidEnergy(es));
        }
        let bits_per_symbol = order.trailing_zeros() as usize;
        let half = bits_per_symbol / 2;
        let side = 1usize << half;
        // Unnormalized levels are odd integers, mean energy 2(M-1)/3.
        let step = (es / (2.0 * (order as f64 - 1.0) / 3.0)).sqrt();
        let level = |idx: usize| step * (2.0 * idx as f64 - (side as f64 - 1.0));

        let points = (0..order)
            .map(|label| {
                let i_level = gray_inverse(label >> half);
                let q_level = gray_inverse(label & (side - 1));
                Complex64::new(level(i_level), level(q_level))
            })
            .collect();
        let axis_labels = (0..side).map(gray).collect();

        Ok(Self {
            order,
            bits_per_symbol,
            side,
            es,
            step,
            points,
            axis_labels,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn es(&self) -> f64 {
        self.es
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    /// Bit label of a point; equal to its index by construction.
    pub fn label(&self, index: usize) -> u32 {
        index as u32
    }

    /// Label bits of a point, most-significant first.
    pub fn label_bits(&self, index: usize) -> impl Iterator<Item = bool> + '_ {
        let m = self.bits_per_symbol;
        (0..m).map(move |b| (index >> (m - 1 - b)) & 1 == 1)
    }

    /// Smallest distance between two distinct points.
    pub fn min_distance(&self) -> f64 {
        2.0 * self.step
    }

    /// Maps groups of `bits_per_symbol` bits (MSB first) to points.
    pub fn map_bits(&self, bits: &[bool]) -> Result<Vec<Complex64>, ConstellationError> {
        let m = self.bits_per_symbol;
        if !bits.len().is_multiple_of(m) {
            return Err(ConstellationError::RaggedBits {
                len: bits.len(),
                bits_per_symbol: m,
            });
        }
        Ok(bits
            .chunks_exact(m)
            .map(|group| {
                let label = group.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
                self.points[label]
            })
            .collect())
    }

    /// Appends the label bits of `index` to `out`.
    pub fn push_bits(&self, index: usize, out: &mut Vec<bool>) {
        out.extend(self.label_bits(index));
    }

    /// Minimum-distance decision. Ties go to the lowest point index.
    pub fn demap_hard(&self, y: Complex64) -> (usize, Complex64) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (idx, p) in self.points.iter().enumerate() {
            let d = (y - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = idx;
            }
        }
        (best, self.points[best])
    }

    /// Per-axis slicer. Agrees with [`demap_hard`](Self::demap_hard) except
    /// exactly on decision boundaries.
    #[inline]
    pub fn slice(&self, y: Complex64) -> usize {
        let half = self.bits_per_symbol / 2;
        let i = self.axis_label(y.re);
        let q = self.axis_label(y.im);
        (i << half) | q
    }

    #[inline]
    fn axis_label(&self, v: f64) -> usize {
        let max = (self.side - 1) as f64;
        let idx = ((v / self.step + max) * 0.5).round().clamp(0.0, max);
        self.axis_labels[idx as usize]
    }

    /// Exact bit LLRs for `y` observed in complex AWGN of variance
    /// `noise_var_per_dim` per real dimension. Positive values favour bit 0.
    pub fn bit_llrs_exact(
        &self,
        y: Complex64,
        noise_var_per_dim: f64,
    ) -> Result<Vec<f64>, ConstellationError> {
        if !(noise_var_per_dim > 0.0) {
            return Err(ConstellationError::InvalidNoiseVariance(noise_var_per_dim));
        }
        let scale = 1.0 / (2.0 * noise_var_per_dim);
        let metrics: Vec<f64> = self
            .points
            .iter()
            .map(|p| -(y - p).norm_sqr() * scale)
            .collect();
        let mut out = vec![0.0; self.bits_per_symbol];
        bit_llrs_from_log_metrics(&metrics, self.bits_per_symbol, &mut out);
        Ok(out)
    }

    /// Exact bit-error probability of Gray-mapped square QAM over AWGN at
    /// the given linear Eb/N0 (pilot-free, hard decisions).
    pub fn theory_ber_awgn(&self, ebn0: f64) -> f64 {
        theory_ber_square_qam(self.order, ebn0)
    }
}

/// Exact bitwise LLRs from per-point log metrics indexed by label.
///
/// `out[b] = ln sum_{x: bit b = 0} e^{metric(x)} - ln sum_{x: bit b = 1} e^{metric(x)}`.
/// Exponentials are taken once relative to the global maximum; a bit whose
/// weaker side underflows is redone relative to that side's own maximum.
pub fn bit_llrs_from_log_metrics(metrics: &[f64], bits_per_symbol: usize, out: &mut [f64]) {
    let m = bits_per_symbol;
    let top = metrics.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = [[0.0f64; 2]; 16];
    for (label, &mv) in metrics.iter().enumerate() {
        let w = (mv - top).exp();
        for (b, s) in sum.iter_mut().enumerate().take(m) {
            s[(label >> (m - 1 - b)) & 1] += w;
        }
    }
    for b in 0..m {
        if sum[b][0] > f64::MIN_POSITIVE && sum[b][1] > f64::MIN_POSITIVE {
            out[b] = sum[b][0].ln() - sum[b][1].ln();
            continue;
        }
        let mut peak = [f64::NEG_INFINITY; 2];
        for (label, &mv) in metrics.iter().enumerate() {
            let v = (label >> (m - 1 - b)) & 1;
            peak[v] = peak[v].max(mv);
        }
        let mut side = [0.0f64; 2];
        for (label, &mv) in metrics.iter().enumerate() {
            let v = (label >> (m - 1 - b)) & 1;
            side[v] += (mv - peak[v]).exp();
        }
        out[b] = (peak[0] + side[0].ln()) - (peak[1] + side[1].ln());
    }
}

/// Closed-form Gray square-QAM BER (per-axis PAM bit-position expansion).
pub fn theory_ber_square_qam(order: usize, ebn0: f64) -> f64 {
    let m = order.trailing_zeros() as usize;
    let half = m / 2;
    let side = 1usize << half;
    let arg = (3.0 * m as f64 * ebn0 / (2.0 * (order as f64 - 1.0))).sqrt();
    let mut total = 0.0;
    for k in 1..=half {
        let weight = 1usize << (k - 1);
        let upper = ((1.0 - 2f64.powi(-(k as i32))) * side as f64) as usize;
        let mut pk = 0.0;
        for i in 0..upper {
            let t = i * weight;
            let sign = if (t / side).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            let coef = weight as f64 - ((t as f64 / side as f64) + 0.5).floor();
            pk += sign * coef * erfc((2 * i + 1) as f64 * arg);
        }
        total += pk / side as f64;
    }
    total / half as f64
}
