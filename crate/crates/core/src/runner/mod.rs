//! Parameter sweeps: configuration, Monte-Carlo execution and result files.

mod output;
mod recipes;
mod scenario;
mod spec;

pub use output::{read_csv, write_csv, write_outputs, OutputFormat, SweepResults};
pub use recipes::{figure_recipe, RECIPES};
pub use scenario::{Evaluation, FrameOutcome, RequiredOutcome, Scenario, StopRule};
pub use spec::{
    BpsSpec, ConfigError, DriftSpec, LinewidthSpec, NoisePoint, SnrSpec, Strategy, SweepSpec,
    Variances,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

use crate::channel::ChannelError;
use crate::constellation::ConstellationError;
use crate::cpe::CpeError;
use crate::metrics::{max_fec_oh_reduction, FecCodebook, MetricsError, OhReduction};
use crate::pilots::PilotError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Constellation(#[from] ConstellationError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error(transparent)]
    Cpe(#[from] CpeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no BER crossing: {detail}")]
    NoCrossing { detail: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Output(String),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Pilot(_) | RunError::Constellation(_) => 2,
            _ => 3,
        }
    }
}

/// One result row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub modulation: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub cores: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub strategy: Strategy,
    pub iterations: usize,
    pub oh_pilot_target: f64,
    pub oh_pilot_achieved: f64,
    pub dnu_hz: Option<f64>,
    pub symbol_rate_baud: Option<f64>,
    pub dnu_ts: Option<f64>,
    pub var_nu: f64,
    pub var_c: f64,
    pub var_p: f64,
    pub ebn0_db: Option<f64>,
    pub bits: u64,
    pub bit_errors: u64,
    pub ber: Option<f64>,
    pub air_bits_per_sym_per_pol: Option<f64>,
    pub required_ebn0_db: Option<f64>,
    pub target_ber: Option<f64>,
    pub seed: u64,
    pub wall_time_s: f64,
    pub underpowered: bool,
}

/// Per-trial details that do not fit the flat record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialDiagnostics {
    pub frames: u64,
    pub ratio_p: Option<f64>,
    pub bps_half_window: Option<usize>,
    /// `(Eb/N0 dB, BER)` pairs visited by a required-SNR search.
    pub evaluations: Vec<(f64, f64)>,
    pub air_clipped: bool,
    /// Set when the trial could not be completed; the record then carries
    /// no BER.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub record: TrialRecord,
    pub diagnostics: TrialDiagnostics,
}

/// FEC-overhead comparison of joint against per-channel estimation for one
/// configuration of a grid sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FecComparison {
    #[serde(rename = "M")]
    pub m: usize,
    pub cores: usize,
    pub oh_pilot: f64,
    pub dnu_ts: Option<f64>,
    pub ratio_p: Option<f64>,
    pub reduction: Option<OhReduction>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub workers: usize,
    /// Record wall-clock time per trial; disable for byte-reproducible output.
    pub record_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            record_timing: true,
        }
    }
}

/// A scenario with the sweep coordinates it was built from.
struct Unit {
    scenario: Scenario,
    point: NoisePoint,
    cores: usize,
}

fn modulation_name(order: usize) -> String {
    if order == 4 {
        "QPSK".into()
    } else {
        format!("{order}QAM")
    }
}

/// Expands a sweep into scenarios. Scenarios of the same modulation, core
/// count and noise point share random streams.
fn build_units(spec: &SweepSpec) -> Result<Vec<Unit>, RunError> {
    let points = spec.noise_points();
    let mut units = Vec::new();
    let mut problems = Vec::new();
    let mut stream_id = 0u64;
    for &order in &spec.modulations {
        for &cores in &spec.cores {
            let d = 2 * cores;
            for point in &points {
                let pm = spec.phase_model(d, point);
                for &strategy in &spec.strategies {
                    let ohs: Vec<f64> = if strategy.uses_pilots() {
                        spec.oh_pilot.clone()
                    } else {
                        vec![0.0]
                    };
                    for oh in ohs {
                        match Scenario::new(order, pm, spec.block_len, strategy, oh) {
                            Ok(mut s) => {
                                s.iterations = spec.iterations;
                                s.bps = spec.bps.clone();
                                s.viterbi_window = spec.viterbi_window;
                                s.seed = spec.seed;
                                s.stream_id = stream_id;
                                s.stop = StopRule {
                                    error_target: spec.error_target,
                                    min_frames: spec.min_frames,
                                    max_bits: spec.max_bits,
                                };
                                s.compute_air = spec.compute_air;
                                units.push(Unit {
                                    scenario: s,
                                    point: *point,
                                    cores,
                                });
                            }
                            Err(e) => problems.push(format!(
                                "{strategy} at M={order}, cores={cores}, oh={oh}: {e}"
                            )),
                        }
                    }
                }
                stream_id += 1;
            }
        }
    }
    if problems.is_empty() {
        Ok(units)
    } else {
        Err(ConfigError { problems }.into())
    }
}

impl Unit {
    fn base_record(&self, spec: &SweepSpec) -> TrialRecord {
        let s = &self.scenario;
        let pm = &s.phase_model;
        let scale = if spec.linewidth.per_channel {
            pm.channels() as f64
        } else {
            1.0
        };
        let absolute = spec.absolute_variances.is_some();
        TrialRecord {
            modulation: modulation_name(s.constellation.order()),
            m: s.constellation.order(),
            cores: self.cores,
            d: pm.channels(),
            n: s.block_len,
            strategy: s.strategy,
            iterations: s.iterations,
            oh_pilot_target: s.oh_target,
            oh_pilot_achieved: s.oh_achieved(),
            dnu_hz: (!absolute).then_some(self.point.dnu_hz * scale),
            symbol_rate_baud: (!absolute).then_some(spec.linewidth.symbol_rate_baud),
            dnu_ts: (!absolute).then_some(self.point.dnu_ts * scale),
            var_nu: pm.var_nu(),
            var_c: pm.var_c(),
            var_p: pm.var_p(),
            ebn0_db: None,
            bits: 0,
            bit_errors: 0,
            ber: None,
            air_bits_per_sym_per_pol: None,
            required_ebn0_db: None,
            target_ber: None,
            seed: spec.seed,
            wall_time_s: 0.0,
            underpowered: false,
        }
    }

    fn fill(record: &mut TrialRecord, diag: &mut TrialDiagnostics, e: &Evaluation) {
        record.bits = e.bits;
        record.bit_errors = e.errors;
        record.ber = Some(e.ber);
        record.air_bits_per_sym_per_pol = e.air.map(|a| a.air);
        record.underpowered = e.underpowered;
        diag.frames = e.frames;
        diag.bps_half_window = e.bps_half_window;
        diag.air_clipped = e.air.is_some_and(|a| a.clipped);
    }

    fn run(&self, spec: &SweepSpec, ebn0_db: Option<f64>, opts: &RunOptions) -> Trial {
        let start = Instant::now();
        let mut record = self.base_record(spec);
        let mut diag = TrialDiagnostics {
            ratio_p: (spec.absolute_variances.is_none()).then_some(self.point.ratio_p),
            ..Default::default()
        };
        match (&spec.snr, ebn0_db) {
            (
                SnrSpec::Required {
                    target_ber,
                    tol_db,
                    bracket,
                },
                _,
            ) => {
                record.target_ber = Some(*target_ber);
                let bracket = bracket.map(|[lo, hi]| (lo, hi));
                match self.scenario.required(*target_ber, *tol_db, bracket) {
                    Ok(out) => {
                        record.ebn0_db = Some(out.at_hi.ebn0_db);
                        record.required_ebn0_db = Some(out.snr.ebn0_db);
                        Self::fill(&mut record, &mut diag, &out.at_hi);
                        diag.evaluations = out.snr.evaluations;
                    }
                    Err(e) => diag.failure = Some(e.to_string()),
                }
            }
            (SnrSpec::Grid { .. }, Some(db)) => {
                record.ebn0_db = Some(db);
                match self.scenario.evaluate(db) {
                    Ok(e) => Self::fill(&mut record, &mut diag, &e),
                    Err(e) => diag.failure = Some(e.to_string()),
                }
            }
            (SnrSpec::Grid { .. }, None) => unreachable!("grid trials carry an Eb/N0"),
        }
        if opts.record_timing {
            record.wall_time_s = start.elapsed().as_secs_f64();
        }
        log::info!(
            "{} M={} cores={} oh={} ebn0={:?} ber={:?} errors={} ({:.1} s)",
            record.strategy,
            record.m,
            record.cores,
            record.oh_pilot_target,
            record.ebn0_db,
            record.ber,
            record.bit_errors,
            start.elapsed().as_secs_f64()
        );
        Trial {
            record,
            diagnostics: diag,
        }
    }
}

/// Runs every trial of a sweep. Trials are independent and seeded from
/// their coordinates, so the output does not depend on `workers`.
pub fn run_sweep(spec: &SweepSpec, opts: &RunOptions) -> Result<SweepResults, RunError> {
    spec.validate()?;
    let units = build_units(spec)?;
    let jobs: Vec<(usize, Option<f64>)> = units
        .iter()
        .enumerate()
        .flat_map(
            |(u, unit)| match spec.grid_for(unit.scenario.constellation.order()) {
                Some(grid) => grid.iter().map(|&db| (u, Some(db))).collect::<Vec<_>>(),
                None => vec![(u, None)],
            },
        )
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| RunError::Numerical(format!("thread pool: {e}")))?;
    let trials: Vec<Trial> = pool.install(|| {
        jobs.par_iter()
            .map(|&(u, db)| units[u].run(spec, db, opts))
            .collect()
    });
    let fec = match &spec.codebook {
        Some(codes) => Some(fec_comparisons(&FecCodebook::new(codes.clone())?, &trials)?),
        None => None,
    };
    Ok(SweepResults {
        spec: spec.clone(),
        trials,
        fec,
    })
}

/// Pairs joint and per-channel BER curves with identical coordinates and
/// finds the largest FEC-overhead reduction between them.
pub fn fec_comparisons(
    codebook: &FecCodebook,
    trials: &[Trial],
) -> Result<Vec<FecComparison>, RunError> {
    let key = |r: &TrialRecord| {
        (
            r.m,
            r.cores,
            r.oh_pilot_target.to_bits(),
            r.dnu_ts.map(f64::to_bits),
            (r.var_nu.to_bits(), r.var_c.to_bits(), r.var_p.to_bits()),
        )
    };
    let curve = |strategy: Strategy, k| -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = trials
            .iter()
            .map(|t| &t.record)
            .filter(|r| r.strategy == strategy && key(r) == k)
            .filter_map(|r| Some((r.ebn0_db?, r.ber?)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    };
    let mut out: Vec<FecComparison> = Vec::new();
    let mut seen = Vec::new();
    for (t, r) in trials.iter().map(|t| (t, &t.record)) {
        if r.strategy != Strategy::Joint || seen.contains(&key(r)) {
            continue;
        }
        seen.push(key(r));
        let jc = curve(Strategy::Joint, key(r));
        let pc = curve(Strategy::PerChannel, key(r));
        if pc.is_empty() {
            continue;
        }
        let grid: Vec<f64> = jc.iter().map(|p| p.0).collect();
        if pc.iter().map(|p| p.0).collect::<Vec<_>>() != grid {
            return Err(RunError::Output(
                "joint and per-channel curves use different Eb/N0 grids".into(),
            ));
        }
        let reference: Vec<f64> = pc.iter().map(|p| p.1).collect();
        let improved: Vec<f64> = jc.iter().map(|p| p.1).collect();
        out.push(FecComparison {
            m: r.m,
            cores: r.cores,
            oh_pilot: r.oh_pilot_target,
            dnu_ts: r.dnu_ts,
            ratio_p: t.diagnostics.ratio_p,
            reduction: max_fec_oh_reduction(codebook, &grid, &reference, &improved)?,
        });
    }
    Ok(out)
}
