//! Monte-Carlo evaluation of one receiver on one channel configuration.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use std::collections::HashMap;

use super::spec::{BpsSpec, Strategy};
use super::RunError;
use crate::channel::{apply_channel, build_covariance, sample_phase_noise, Frame, PhaseModel};
use crate::constellation::{theory_ber_square_qam, Constellation};
use crate::cpe::{
    best_window, bps, bps_half_window_grid, bps_window_errors, coherent_decisions, fg_eks, pc_cpe,
    viterbi_viterbi, BpsParams, CpeOptions, CpeResult,
};
use crate::grid::Grid;
use crate::metrics::{
    bit_penalty_nats, db_to_linear, ebn0_to_noise_var, required_ebn0, AirEstimate, RequiredSnr,
};
use crate::pilots::PilotSchedule;
use crate::rng::{Role, StreamKey};

/// Frame indices at or above this value are reserved for tuning frames.
const TUNING_FRAME: u64 = 1 << 63;

/// When to stop drawing frames at one Eb/N0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub error_target: u64,
    pub min_frames: u64,
    pub max_bits: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            error_target: 10_000,
            min_frames: 1,
            max_bits: 2_000_000_000,
        }
    }
}

/// Counts from one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameOutcome {
    pub bits: u64,
    pub errors: u64,
    pub symbols: u64,
    pub penalty_nats: f64,
}

/// Accumulated result at one Eb/N0.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ebn0_db: f64,
    pub noise_var: f64,
    pub frames: u64,
    pub bits: u64,
    pub errors: u64,
    pub ber: f64,
    pub air: Option<AirEstimate>,
    pub underpowered: bool,
    pub bps_half_window: Option<usize>,
}

/// One receiver on one channel configuration.
///
/// Frames are generated from streams keyed by `(seed, stream_id, frame)`
/// only, so scenarios sharing a `stream_id` see identical data, phase and
/// (unit-variance) noise realizations regardless of strategy, pilot
/// overhead or Eb/N0.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub constellation: Constellation,
    pub phase_model: PhaseModel,
    pub covariance: DMatrix<f64>,
    pub block_len: usize,
    pub strategy: Strategy,
    pub oh_target: f64,
    pub schedule: PilotSchedule,
    pub iterations: usize,
    pub bps: BpsSpec,
    pub viterbi_window: usize,
    pub seed: u64,
    pub stream_id: u64,
    pub stop: StopRule,
    pub compute_air: bool,
}

impl Scenario {
    pub fn new(
        order: usize,
        phase_model: PhaseModel,
        block_len: usize,
        strategy: Strategy,
        oh_target: f64,
    ) -> Result<Self, RunError> {
        let constellation = Constellation::qam(order, 1.0)?;
        let d = phase_model.channels();
        let es = constellation.es();
        let schedule = match strategy {
            Strategy::Joint => PilotSchedule::wrapped_diagonal(d, block_len, oh_target, es)?,
            Strategy::PerChannel | Strategy::Coherent => {
                PilotSchedule::uniform_per_channel(d, block_len, oh_target, es)?
            }
            Strategy::Bps | Strategy::Viterbi => PilotSchedule::none(d, block_len),
        };
        Ok(Self {
            constellation,
            covariance: build_covariance(&phase_model),
            phase_model,
            block_len,
            strategy,
            oh_target: if strategy.uses_pilots() {
                oh_target
            } else {
                0.0
            },
            schedule,
            iterations: 2,
            bps: BpsSpec::default(),
            viterbi_window: 64,
            seed: 1,
            stream_id: 0,
            stop: StopRule::default(),
            compute_air: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.phase_model.channels()
    }

    /// Pilots per data symbol actually transmitted.
    pub fn oh_achieved(&self) -> f64 {
        if self.schedule.pilot_count() == 0 {
            0.0
        } else {
            self.schedule.overhead().unwrap_or(f64::INFINITY)
        }
    }

    pub fn noise_var(&self, ebn0_db: f64) -> f64 {
        ebn0_to_noise_var(
            ebn0_db,
            self.constellation.es(),
            self.oh_achieved(),
            self.constellation.order(),
        )
    }

    fn key(&self, frame: u64, role: Role) -> StreamKey {
        StreamKey::new(self.seed, self.stream_id, frame, role)
    }

    /// Draws frame `frame`: uniform labels on every position (pilot
    /// positions then carry the pilot symbol), a phase realization and
    /// noise of variance `noise_var` per real dimension.
    pub fn frame(&self, noise_var: f64, frame: u64) -> Result<Frame, RunError> {
        let (d, n) = (self.channels(), self.block_len);
        let m = self.constellation.order();
        let mut data = self.key(frame, Role::Data).rng();
        let labels = Grid::from_vec(d, n, (0..d * n).map(|_| data.random_range(0..m)).collect());
        let symbols = Grid::from_fn(d, n, |i, k| {
            if self.schedule.is_pilot(i, k) {
                self.schedule.value(i, k)
            } else {
                self.constellation.point(*labels.get(i, k))
            }
        });
        let phases = sample_phase_noise(
            &self.phase_model,
            n,
            &mut self.key(frame, Role::Phase).rng(),
        )?;
        let noise = vec![noise_var; d];
        let received = apply_channel(
            &symbols,
            &phases,
            &noise,
            &mut self.key(frame, Role::Noise).rng(),
        )?;
        Ok(Frame {
            labels,
            symbols,
            phases,
            received,
            noise_var: noise,
        })
    }

    /// Runs the receiver on a frame and counts errors at data positions.
    pub fn detect(
        &self,
        frame: &Frame,
        bps_half_window: Option<usize>,
    ) -> Result<FrameOutcome, RunError> {
        let opts = CpeOptions::iterations(self.iterations).with_soft_output(self.compute_air);
        match self.strategy {
            Strategy::Joint => {
                let res = fg_eks(
                    &frame.received,
                    &self.schedule,
                    &self.constellation,
                    &self.covariance,
                    &frame.noise_var,
                    &opts,
                )?;
                Ok(self.score_cpe(frame, &res))
            }
            Strategy::PerChannel => {
                let res = pc_cpe(
                    &frame.received,
                    &self.schedule,
                    &self.constellation,
                    &self.phase_model,
                    &frame.noise_var,
                    &opts,
                )?;
                Ok(self.score_cpe(frame, &res))
            }
            Strategy::Bps | Strategy::Viterbi | Strategy::Coherent => {
                let mut phases = Vec::with_capacity(self.channels());
                for i in 0..self.channels() {
                    let r = frame.received.row(i);
                    let genie = *frame.phases.get(i, 0);
                    phases.push(match self.strategy {
                        Strategy::Bps => {
                            let params = BpsParams {
                                test_phases: self.bps.test_phases,
                                half_window: bps_half_window
                                    .or(self.bps.half_window)
                                    .unwrap_or(BpsParams::default().half_window),
                            };
                            bps(r, &self.constellation, params, genie)?.phases
                        }
                        Strategy::Viterbi => viterbi_viterbi(r, self.viterbi_window, genie)?,
                        _ => frame.phases.row(i).to_vec(),
                    });
                }
                self.score_phases(frame, &phases)
            }
        }
    }

    fn score_cpe(&self, frame: &Frame, res: &CpeResult) -> FrameOutcome {
        let m = self.constellation.bits_per_symbol();
        let mut out = FrameOutcome::default();
        for i in 0..self.channels() {
            for k in 0..self.block_len {
                let Some(dec) = *res.decisions.get(i, k) else {
                    continue;
                };
                let tx = *frame.labels.get(i, k);
                out.symbols += 1;
                out.errors += (dec as usize ^ tx).count_ones() as u64;
                if let Some(llrs) = res.llrs_at(i, k) {
                    out.penalty_nats += bit_penalties(llrs, tx, m);
                }
            }
        }
        out.bits = out.symbols * m as u64;
        out
    }

    fn score_phases(&self, frame: &Frame, phases: &[Vec<f64>]) -> Result<FrameOutcome, RunError> {
        let c = &self.constellation;
        let m = c.bits_per_symbol();
        let mut out = FrameOutcome::default();
        for (i, ph) in phases.iter().enumerate() {
            let r = frame.received.row(i);
            let decisions = coherent_decisions(r, ph, c);
            for k in 0..self.block_len {
                if self.schedule.is_pilot(i, k) {
                    continue;
                }
                let tx = *frame.labels.get(i, k);
                out.symbols += 1;
                out.errors += (decisions[k] ^ tx).count_ones() as u64;
                if self.compute_air {
                    let y = r[k] * Complex64::from_polar(1.0, -ph[k]);
                    let llrs = c.bit_llrs_exact(y, frame.noise_var[i])?;
                    out.penalty_nats += bit_penalties(&llrs, tx, m);
                }
            }
        }
        out.bits = out.symbols * m as u64;
        Ok(out)
    }

    /// Half-width minimizing the pooled bit errors over all channels of a
    /// dedicated tuning frame at this noise level.
    pub fn tune_bps(&self, noise_var: f64) -> Result<usize, RunError> {
        let frame = self.frame(noise_var, TUNING_FRAME)?;
        let mut pooled: Vec<(usize, u64)> = Vec::new();
        for i in 0..self.channels() {
            let scores = bps_window_errors(
                frame.received.row(i),
                frame.labels.row(i),
                &self.constellation,
                self.bps.test_phases,
                bps_half_window_grid(),
                *frame.phases.get(i, 0),
            )?;
            if pooled.is_empty() {
                pooled = scores;
            } else {
                for (p, s) in pooled.iter_mut().zip(&scores) {
                    p.1 += s.1;
                }
            }
        }
        Ok(best_window(&pooled)?)
    }

    /// Accumulates frames at one Eb/N0 until the stop rule is met.
    pub fn evaluate(&self, ebn0_db: f64) -> Result<Evaluation, RunError> {
        let noise_var = self.noise_var(ebn0_db);
        let bps_half_window = match (self.strategy, self.bps.half_window) {
            (Strategy::Bps, None) => Some(self.tune_bps(noise_var)?),
            (Strategy::Bps, Some(hw)) => Some(hw),
            _ => None,
        };
        let mut total = FrameOutcome::default();
        let mut frames = 0u64;
        loop {
            let frame = self.frame(noise_var, frames)?;
            let o = self.detect(&frame, bps_half_window)?;
            frames += 1;
            total.bits += o.bits;
            total.errors += o.errors;
            total.symbols += o.symbols;
            total.penalty_nats += o.penalty_nats;
            let enough = total.errors >= self.stop.error_target && frames >= self.stop.min_frames;
            if enough || total.bits >= self.stop.max_bits || o.bits == 0 {
                break;
            }
        }
        if total.bits == 0 {
            return Err(RunError::Numerical("frame carries no data symbols".into()));
        }
        let m = self.constellation.bits_per_symbol();
        Ok(Evaluation {
            ebn0_db,
            noise_var,
            frames,
            bits: total.bits,
            errors: total.errors,
            ber: total.errors as f64 / total.bits as f64,
            air: self.compute_air.then(|| {
                AirEstimate::from_penalty(total.penalty_nats, total.symbols, m, self.oh_achieved())
            }),
            underpowered: total.errors < self.stop.error_target,
            bps_half_window,
        })
    }

    /// Eb/N0 (dB) at which a coherent receiver with this pilot overhead
    /// reaches `target` over AWGN.
    pub fn awgn_required_ebn0(&self, target: f64) -> f64 {
        let order = self.constellation.order();
        let penalty = 1.0 + self.oh_achieved();
        let (mut lo, mut hi) = (-10.0, 60.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if theory_ber_square_qam(order, db_to_linear(mid) / penalty) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Searches for the Eb/N0 reaching `target`. Without an explicit
    /// bracket, the search starts just below the AWGN requirement and
    /// widens upwards until the BER falls below the target.
    pub fn required(
        &self,
        target: f64,
        tol_db: f64,
        bracket: Option<(f64, f64)>,
    ) -> Result<RequiredOutcome, RunError> {
        let mut cache: HashMap<u64, Evaluation> = HashMap::new();
        let mut eval = |db: f64| -> Result<Evaluation, RunError> {
            if let Some(e) = cache.get(&db.to_bits()) {
                return Ok(e.clone());
            }
            let e = self.evaluate(db)?;
            cache.insert(db.to_bits(), e.clone());
            Ok(e)
        };

        let (lo, hi) = match bracket {
            Some(b) => b,
            None => {
                let mut lo = self.awgn_required_ebn0(target) - 0.5;
                while eval(lo)?.ber <= target {
                    lo -= 2.0;
                    if lo < -20.0 {
                        return Err(RunError::NoCrossing {
                            detail: format!("BER stays below {target} down to {lo} dB"),
                        });
                    }
                }
                let start = lo;
                let mut step = 1.0;
                let mut hi = lo + step;
                while eval(hi)?.ber > target {
                    lo = hi;
                    step *= 2.0;
                    hi = lo + step;
                    if hi - start > 40.0 {
                        return Err(RunError::NoCrossing {
                            detail: format!("BER stays above {target} up to {lo} dB"),
                        });
                    }
                }
                (lo, hi)
            }
        };
        let snr: RequiredSnr =
            required_ebn0(|db| eval(db).map(|e| e.ber), target, (lo, hi), tol_db)?;
        let at_hi = eval(snr.hi_db)?;
        Ok(RequiredOutcome { snr, at_hi })
    }
}

/// Required-SNR search result with the evaluation on the passing side of
/// the final bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct RequiredOutcome {
    pub snr: RequiredSnr,
    pub at_hi: Evaluation,
}

fn bit_penalties(llrs: &[f64], label: usize, m: usize) -> f64 {
    llrs.iter()
        .enumerate()
        .map(|(b, &l)| bit_penalty_nats(l, (label >> (m - 1 - b)) & 1 == 1))
        .sum()
}
