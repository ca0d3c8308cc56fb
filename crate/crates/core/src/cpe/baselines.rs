//! Blind per-channel baselines and the known-phase reference receiver.

use num_complex::Complex64;
use std::f64::consts::FRAC_PI_2;

use super::CpeError;
use crate::constellation::Constellation;

/// Half-widths searched when tuning the BPS filter: 4, 6, ..., 128.
pub fn bps_half_window_grid() -> impl Iterator<Item = usize> + Clone {
    (2..=64).map(|h| 2 * h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpsParams {
    pub test_phases: usize,
    /// The distance filter spans `2 * half_window + 1` symbols.
    pub half_window: usize,
}

impl Default for BpsParams {
    fn default() -> Self {
        Self {
            test_phases: 128,
            half_window: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpsOutput {
    /// Unwrapped phase estimate per symbol.
    pub phases: Vec<f64>,
    /// Decided constellation index per symbol.
    pub decisions: Vec<usize>,
}

/// Squared decision distances for every test phase, as running prefix sums.
struct BpsMetric {
    test_phases: usize,
    len: usize,
    /// `prefix[b * (len + 1) + k]` = sum of distances of symbols `0..k`.
    prefix: Vec<f64>,
}

impl BpsMetric {
    fn new(r: &[Complex64], c: &Constellation, test_phases: usize) -> Self {
        let n = r.len();
        let mut prefix = Vec::with_capacity(test_phases * (n + 1));
        for b in 0..test_phases {
            let rot = Complex64::from_polar(1.0, -(b as f64) * FRAC_PI_2 / test_phases as f64);
            let mut acc = 0.0;
            prefix.push(0.0);
            for &y in r {
                let z = y * rot;
                acc += (z - c.point(c.slice(z))).norm_sqr();
                prefix.push(acc);
            }
        }
        Self {
            test_phases,
            len: n,
            prefix,
        }
    }

    /// Minimizing test phase per symbol, unwrapped across the pi/2 ambiguity.
    fn phases(&self, half_window: usize, genie_initial_phase: f64) -> Vec<f64> {
        let n = self.len;
        let stride = n + 1;
        let step = FRAC_PI_2 / self.test_phases as f64;
        let mut out = Vec::with_capacity(n);
        let mut prev = genie_initial_phase;
        for k in 0..n {
            let lo = k.saturating_sub(half_window);
            let hi = (k + half_window + 1).min(n);
            let mut best = 0;
            let mut best_v = f64::INFINITY;
            for b in 0..self.test_phases {
                let row = &self.prefix[b * stride..];
                let v = row[hi] - row[lo];
                if v < best_v {
                    best_v = v;
                    best = b;
                }
            }
            let raw = best as f64 * step;
            let phase = raw + FRAC_PI_2 * ((prev - raw) / FRAC_PI_2).round();
            out.push(phase);
            prev = phase;
        }
        out
    }
}

fn check_bps(r: &[Complex64], test_phases: usize, half_window: usize) -> Result<(), CpeError> {
    if test_phases < 2 {
        return Err(CpeError::InvalidParameter(format!(
            "BPS needs at least 2 test phases, got {test_phases}"
        )));
    }
    if r.is_empty() {
        return Err(CpeError::Shape("empty block".into()));
    }
    if 2 * half_window + 1 > r.len() {
        return Err(CpeError::InvalidParameter(format!(
            "BPS window of {} symbols exceeds block of {}",
            2 * half_window + 1,
            r.len()
        )));
    }
    Ok(())
}

/// Blind phase search on one channel. The phase at the first symbol is
/// resolved against `genie_initial_phase`; later symbols by continuity.
pub fn bps(
    r: &[Complex64],
    c: &Constellation,
    params: BpsParams,
    genie_initial_phase: f64,
) -> Result<BpsOutput, CpeError> {
    check_bps(r, params.test_phases, params.half_window)?;
    let metric = BpsMetric::new(r, c, params.test_phases);
    let phases = metric.phases(params.half_window, genie_initial_phase);
    let decisions = derotate_and_decide(r, &phases, c);
    Ok(BpsOutput { phases, decisions })
}

/// Bit errors of every fitting half-width in `candidates` on a frame with
/// known transmitted labels. Candidates wider than the block are skipped.
pub fn bps_window_errors(
    r: &[Complex64],
    tx_labels: &[usize],
    c: &Constellation,
    test_phases: usize,
    candidates: impl IntoIterator<Item = usize>,
    genie_initial_phase: f64,
) -> Result<Vec<(usize, u64)>, CpeError> {
    if tx_labels.len() != r.len() {
        return Err(CpeError::Shape(format!(
            "{} labels for {} symbols",
            tx_labels.len(),
            r.len()
        )));
    }
    check_bps(r, test_phases, 0)?;
    let metric = BpsMetric::new(r, c, test_phases);
    Ok(candidates
        .into_iter()
        .filter(|&hw| 2 * hw < r.len())
        .map(|hw| {
            let phases = metric.phases(hw, genie_initial_phase);
            let errors = derotate_and_decide(r, &phases, c)
                .iter()
                .zip(tx_labels)
                .map(|(a, b)| (a ^ b).count_ones() as u64)
                .sum();
            (hw, errors)
        })
        .collect())
}

/// Picks the half-width from `candidates` with the fewest bit errors on a
/// frame with known transmitted labels. Ties go to the earlier candidate.
pub fn bps_tune_half_window(
    r: &[Complex64],
    tx_labels: &[usize],
    c: &Constellation,
    test_phases: usize,
    candidates: impl IntoIterator<Item = usize>,
    genie_initial_phase: f64,
) -> Result<usize, CpeError> {
    let scores = bps_window_errors(
        r,
        tx_labels,
        c,
        test_phases,
        candidates,
        genie_initial_phase,
    )?;
    best_window(&scores)
}

/// Lowest-error half-width, earliest on ties.
pub fn best_window(scores: &[(usize, u64)]) -> Result<usize, CpeError> {
    let mut best: Option<(u64, usize)> = None;
    for &(hw, errors) in scores {
        if best.is_none_or(|(e, _)| errors < e) {
            best = Some((errors, hw));
        }
    }
    best.map(|(_, hw)| hw)
        .ok_or_else(|| CpeError::InvalidParameter("no BPS window candidate fits the block".into()))
}

/// Fourth-power (Viterbi-Viterbi) phase estimate over a centred window of
/// `window` symbols, unwrapped across pi/2 against `genie_initial_phase`.
pub fn viterbi_viterbi(
    r: &[Complex64],
    window: usize,
    genie_initial_phase: f64,
) -> Result<Vec<f64>, CpeError> {
    let n = r.len();
    if window == 0 || window > n {
        return Err(CpeError::InvalidParameter(format!(
            "window {window} must lie in 1..={n}"
        )));
    }
    let mut prefix = Vec::with_capacity(n + 1);
    let mut acc = Complex64::new(0.0, 0.0);
    prefix.push(acc);
    for &y in r {
        acc += y.powi(4);
        prefix.push(acc);
    }
    let before = window / 2;
    let mut out = Vec::with_capacity(n);
    let mut prev = genie_initial_phase;
    for k in 0..n {
        let lo = k.saturating_sub(before).min(n - window);
        let sum = prefix[lo + window] - prefix[lo];
        if sum.norm() == 0.0 {
            return Err(CpeError::ZeroSignal { time: k });
        }
        // Square-QAM fourth powers average to a negative real number.
        let raw = (-sum).arg() / 4.0;
        let phase = raw + FRAC_PI_2 * ((prev - raw) / FRAC_PI_2).round();
        out.push(phase);
        prev = phase;
    }
    Ok(out)
}

/// Decisions after removing a known (or estimated) phase trajectory.
pub fn coherent_decisions(r: &[Complex64], phases: &[f64], c: &Constellation) -> Vec<usize> {
    derotate_and_decide(r, phases, c)
}

fn derotate_and_decide(r: &[Complex64], phases: &[f64], c: &Constellation) -> Vec<usize> {
    r.iter()
        .zip(phases)
        .map(|(&y, &p)| c.slice(y * Complex64::from_polar(1.0, -p)))
        .collect()
}
