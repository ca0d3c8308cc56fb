//! SNR bookkeeping, error counting, achievable rates and threshold search.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no symbols to evaluate")]
    Empty,
    #[error(
        "bracket [{lo_db}, {hi_db}] dB does not straddle target {target:e}: BER {ber_lo:e} at low end, {ber_hi:e} at high end"
    )]
    Bracket {
        lo_db: f64,
        hi_db: f64,
        ber_lo: f64,
        ber_hi: f64,
        target: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("codebook thresholds must increase strictly with overhead")]
    UnorderedCodebook,
}

/// Per-real-dimension noise variance giving `ebn0_db` once the pilot
/// overhead is charged: `Eb/N0 = Es (1 + OH) / (2 sigma^2 log2 M)`.
pub fn ebn0_to_noise_var(ebn0_db: f64, es: f64, oh_pilot: f64, order: usize) -> f64 {
    let m = (order as f64).log2();
    es * (1.0 + oh_pilot) / (2.0 * m * 10f64.powf(ebn0_db / 10.0))
}

/// Inverse of [`ebn0_to_noise_var`].
pub fn noise_var_to_ebn0_db(noise_var: f64, es: f64, oh_pilot: f64, order: usize) -> f64 {
    let m = (order as f64).log2();
    10.0 * (es * (1.0 + oh_pilot) / (2.0 * noise_var * m)).log10()
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Running bit-error count. Mergeable: `a.merge(b)` equals accumulating
/// both streams into one counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BerAccumulator {
    pub bits: u64,
    pub errors: u64,
    pub target_errors: u64,
}

impl Default for BerAccumulator {
    fn default() -> Self {
        Self::new(10_000)
    }
}

impl BerAccumulator {
    pub fn new(target_errors: u64) -> Self {
        Self {
            bits: 0,
            errors: 0,
            target_errors,
        }
    }

    /// Adds the Hamming distance of two equal-length bit streams. Returns
    /// whether the error target has been reached.
    pub fn accumulate(&mut self, tx: &[bool], rx: &[bool]) -> Result<bool, MetricsError> {
        if tx.len() != rx.len() {
            return Err(MetricsError::LengthMismatch {
                left: tx.len(),
                right: rx.len(),
            });
        }
        self.bits += tx.len() as u64;
        self.errors += tx.iter().zip(rx).filter(|(a, b)| a != b).count() as u64;
        Ok(self.done())
    }

    /// Adds bit errors between symbol labels of `bits_per_symbol` bits.
    pub fn accumulate_labels(
        &mut self,
        tx: &[usize],
        rx: &[usize],
        bits_per_symbol: usize,
    ) -> Result<bool, MetricsError> {
        if tx.len() != rx.len() {
            return Err(MetricsError::LengthMismatch {
                left: tx.len(),
                right: rx.len(),
            });
        }
        self.bits += (tx.len() * bits_per_symbol) as u64;
        self.errors += tx
            .iter()
            .zip(rx)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum::<u64>();
        Ok(self.done())
    }

    pub fn add_counts(&mut self, bits: u64, errors: u64) {
        self.bits += bits;
        self.errors += errors;
    }

    pub fn merge(mut self, other: &Self) -> Self {
        self.bits += other.bits;
        self.errors += other.errors;
        self
    }

    pub fn done(&self) -> bool {
        self.errors >= self.target_errors
    }

    pub fn ber(&self) -> Option<f64> {
        (self.bits > 0).then(|| self.errors as f64 / self.bits as f64)
    }
}

/// Generalized mutual information estimate and the pilot-discounted rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirEstimate {
    /// Bits per data symbol, after clipping at zero.
    pub gmi: f64,
    /// `gmi / (1 + oh_pilot)`: bits per transmitted symbol.
    pub air: f64,
    /// The raw estimate was negative and was clipped.
    pub clipped: bool,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Bitwise GMI from exact LLRs (positive favours 0) of data symbols:
/// `m - mean_k sum_b log2(1 + exp(-(1 - 2 b) llr))`, discounted by the
/// pilot rate loss.
pub fn gmi_air(
    llrs: &[f64],
    tx_bits: &[bool],
    bits_per_symbol: usize,
    oh_pilot: f64,
) -> Result<AirEstimate, MetricsError> {
    if llrs.len() != tx_bits.len() {
        return Err(MetricsError::LengthMismatch {
            left: llrs.len(),
            right: tx_bits.len(),
        });
    }
    if bits_per_symbol == 0 || !llrs.len().is_multiple_of(bits_per_symbol) {
        return Err(MetricsError::InvalidArgument(format!(
            "{} LLRs do not split into symbols of {bits_per_symbol} bits",
            llrs.len()
        )));
    }
    if llrs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let penalty_nats: f64 = llrs
        .iter()
        .zip(tx_bits)
        .map(|(&l, &b)| bit_penalty_nats(l, b))
        .sum();
    let symbols = (llrs.len() / bits_per_symbol) as u64;
    Ok(AirEstimate::from_penalty(
        penalty_nats,
        symbols,
        bits_per_symbol,
        oh_pilot,
    ))
}

/// `ln(1 + e^{-(1 - 2 b) llr})`: the decoding penalty of one bit, in nats.
#[inline]
pub fn bit_penalty_nats(llr: f64, bit: bool) -> f64 {
    softplus(if bit { llr } else { -llr })
}

impl AirEstimate {
    /// Estimate from a penalty accumulated with [`bit_penalty_nats`] over
    /// `symbols` data symbols.
    pub fn from_penalty(
        penalty_nats: f64,
        symbols: u64,
        bits_per_symbol: usize,
        oh_pilot: f64,
    ) -> Self {
        let raw = bits_per_symbol as f64 - penalty_nats / std::f64::consts::LN_2 / symbols as f64;
        let gmi = raw.max(0.0);
        AirEstimate {
            gmi,
            air: gmi / (1.0 + oh_pilot),
            clipped: raw < 0.0,
        }
    }
}

/// Outcome of a required-SNR search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequiredSnr {
    pub ebn0_db: f64,
    /// Final bracket, `lo` on the failing side.
    pub lo_db: f64,
    pub hi_db: f64,
    /// Every `(Eb/N0 dB, BER)` evaluated, in order.
    pub evaluations: Vec<(f64, f64)>,
}

/// Bisects for the Eb/N0 at which `ber_at` crosses `target`, stopping once
/// the bracket is narrower than `tol_db`. The returned value interpolates
/// log-BER linearly inside the final bracket.
pub fn required_ebn0<E>(
    mut ber_at: impl FnMut(f64) -> Result<f64, E>,
    target: f64,
    bracket: (f64, f64),
    tol_db: f64,
) -> Result<RequiredSnr, E>
where
    E: From<MetricsError>,
{
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) || !(tol_db > 0.0) || !(target > 0.0 && target < 1.0) {
        return Err(MetricsError::InvalidArgument(format!(
            "bracket ({lo}, {hi}), tolerance {tol_db}, target {target}"
        ))
        .into());
    }
    let mut evaluations = Vec::new();
    let mut ber_lo = ber_at(lo)?;
    evaluations.push((lo, ber_lo));
    let mut ber_hi = ber_at(hi)?;
    evaluations.push((hi, ber_hi));
    if !(ber_lo > target && ber_hi <= target) {
        return Err(MetricsError::Bracket {
            lo_db: lo,
            hi_db: hi,
            ber_lo,
            ber_hi,
            target,
        }
        .into());
    }
    while hi - lo > tol_db {
        let mid = 0.5 * (lo + hi);
        let b = ber_at(mid)?;
        evaluations.push((mid, b));
        if b > target {
            lo = mid;
            ber_lo = b;
        } else {
            hi = mid;
            ber_hi = b;
        }
    }
    let ebn0_db = if ber_hi > 0.0 {
        let (a, b, t) = (ber_lo.ln(), ber_hi.ln(), target.ln());
        lo + (hi - lo) * (a - t) / (a - b)
    } else {
        0.5 * (lo + hi)
    };
    Ok(RequiredSnr {
        ebn0_db,
        lo_db: lo,
        hi_db: hi,
        evaluations,
    })
}

/// Pre-FEC BER thresholds of hard-decision codes with their overheads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FecCodebook {
    entries: Vec<FecCode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FecCode {
    pub threshold: f64,
    pub oh_fec: f64,
}

/// Pre-FEC BER thresholds of the staircase codes used as reference lines.
pub const STAIRCASE_THRESHOLDS: [f64; 6] = [5.16e-3, 7.04e-3, 9.29e-3, 1.44e-2, 1.71e-2, 2.24e-2];

/// The 20 %-overhead staircase code threshold used for required-SNR searches.
pub const DEFAULT_TARGET_BER: f64 = 1.44e-2;

impl Default for FecCodebook {
    /// Only the pairing `1.44e-2 <-> 20 %` is built in.
    fn default() -> Self {
        Self {
            entries: vec![FecCode {
                threshold: DEFAULT_TARGET_BER,
                oh_fec: 0.20,
            }],
        }
    }
}

impl FecCodebook {
    pub fn new(mut entries: Vec<FecCode>) -> Result<Self, MetricsError> {
        if entries.is_empty() {
            return Err(MetricsError::Empty);
        }
        entries.sort_by(|a, b| a.oh_fec.total_cmp(&b.oh_fec));
        for w in entries.windows(2) {
            if !(w[1].threshold > w[0].threshold) || !(w[1].oh_fec > w[0].oh_fec) {
                return Err(MetricsError::UnorderedCodebook);
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[FecCode] {
        &self.entries
    }

    /// Lowest-overhead code that can correct `ber`.
    pub fn cheapest_for(&self, ber: f64) -> Option<FecCode> {
        self.entries.iter().copied().find(|c| ber <= c.threshold)
    }
}

/// Largest FEC-overhead reduction available to the better receiver at the
/// Eb/N0 values where the worse receiver crosses a codebook threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhReduction {
    pub ebn0_db: f64,
    pub reference: FecCode,
    pub improved: FecCode,
    /// Percentage points.
    pub reduction_pp: f64,
    /// Relative information-rate increase, `(1 + OH_ref) / (1 + OH_new) - 1`.
    pub rate_increase: f64,
}

/// `reference` and `improved` are BER curves sampled on a common ascending
/// Eb/N0 grid (dB). Crossings are located by log-linear interpolation.
pub fn max_fec_oh_reduction(
    codebook: &FecCodebook,
    ebn0_db: &[f64],
    reference: &[f64],
    improved: &[f64],
) -> Result<Option<OhReduction>, MetricsError> {
    if ebn0_db.len() != reference.len() || ebn0_db.len() != improved.len() {
        return Err(MetricsError::LengthMismatch {
            left: ebn0_db.len(),
            right: reference.len().min(improved.len()),
        });
    }
    let mut best: Option<OhReduction> = None;
    for code in codebook.entries() {
        let Some(x) = crossing(ebn0_db, reference, code.threshold) else {
            continue;
        };
        let Some(ber) = interpolate_log(ebn0_db, improved, x) else {
            continue;
        };
        let Some(better) = codebook.cheapest_for(ber) else {
            continue;
        };
        let reduction_pp = 100.0 * (code.oh_fec - better.oh_fec);
        if best.is_none_or(|b| reduction_pp > b.reduction_pp) {
            best = Some(OhReduction {
                ebn0_db: x,
                reference: *code,
                improved: better,
                reduction_pp,
                rate_increase: (1.0 + code.oh_fec) / (1.0 + better.oh_fec) - 1.0,
            });
        }
    }
    Ok(best)
}

/// First Eb/N0 at which a decreasing curve falls to `level`.
pub fn crossing(x: &[f64], y: &[f64], level: f64) -> Option<f64> {
    for i in 1..x.len() {
        if y[i - 1] > level && y[i] <= level {
            if y[i] <= 0.0 {
                return Some(x[i]);
            }
            let (a, b, t) = (y[i - 1].ln(), y[i].ln(), level.ln());
            return Some(x[i - 1] + (x[i] - x[i - 1]) * (a - t) / (a - b));
        }
    }
    None
}

fn interpolate_log(x: &[f64], y: &[f64], at: f64) -> Option<f64> {
    for i in 1..x.len() {
        if at >= x[i - 1] && at <= x[i] {
            let w = (at - x[i - 1]) / (x[i] - x[i - 1]);
            if y[i - 1] <= 0.0 || y[i] <= 0.0 {
                return Some(y[i - 1] * (1.0 - w) + y[i] * w);
            }
            return Some((y[i - 1].ln() * (1.0 - w) + y[i].ln() * w).exp());
        }
    }
    None
}
