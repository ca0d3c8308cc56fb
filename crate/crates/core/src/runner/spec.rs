//! Sweep configuration.
//!
//! A sweep is the cartesian product of modulation orders, core counts,
//! linewidth points, correlation points, pilot overheads and strategies,
//! evaluated either on an Eb/N0 grid or by searching for the Eb/N0 that
//! reaches a target BER. Configs are TOML (or JSON, same field names):
//!
//! ```toml
//! name = "example"
//! modulations = [16]
//! cores = [10]
//! block_len = 10000
//! oh_pilot = [0.01]
//! strategies = ["joint", "per-channel"]
//! iterations = 2
//! seed = 1
//! error_target = 1000
//!
//! [linewidth]
//! dnu_hz = [200e3]
//! symbol_rate_baud = 20e9
//!
//! [drift]
//! ratio_c = 1e3
//! ratio_p = [1e6]
//!
//! [snr]
//! mode = "required"
//! target_ber = 1.44e-2
//! tol_db = 0.05
//! ```

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::channel::PhaseModel;
use crate::constellation::SUPPORTED_ORDERS;
use crate::metrics::{FecCode, FecCodebook, DEFAULT_TARGET_BER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Joint-channel FG-EKS with wrapped-diagonal pilots.
    Joint,
    /// Per-channel FG-EKS with uniform pilots.
    PerChannel,
    /// Blind phase search, pilot-free, genie-resolved initial phase.
    Bps,
    /// Fourth-power estimator, pilot-free, genie-resolved initial phase.
    Viterbi,
    /// Decisions with the true phase removed (no phase-noise penalty).
    Coherent,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Joint => "joint",
            Strategy::PerChannel => "per-channel",
            Strategy::Bps => "bps",
            Strategy::Viterbi => "viterbi",
            Strategy::Coherent => "coherent",
        }
    }

    /// Whether the strategy transmits pilots.
    pub fn uses_pilots(&self) -> bool {
        matches!(
            self,
            Strategy::Joint | Strategy::PerChannel | Strategy::Coherent
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Strategy::Joint),
            "per-channel" => Ok(Strategy::PerChannel),
            "bps" => Ok(Strategy::Bps),
            "viterbi" => Ok(Strategy::Viterbi),
            "coherent" => Ok(Strategy::Coherent),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SnrSpec {
    /// Evaluate BER on fixed Eb/N0 points. `per_modulation` overrides the
    /// shared grid for specific orders (keys are the order, e.g. `"1024"`).
    Grid {
        #[serde(default)]
        ebn0_db: Vec<f64>,
        #[serde(default)]
        per_modulation: BTreeMap<String, Vec<f64>>,
    },
    /// Search for the Eb/N0 at which BER falls to `target_ber`.
    Required {
        #[serde(default = "default_target")]
        target_ber: f64,
        #[serde(default = "default_tol")]
        tol_db: f64,
        /// Initial bracket; derived from AWGN theory when absent.
        #[serde(default)]
        bracket: Option<[f64; 2]>,
    },
}

fn default_target() -> f64 {
    DEFAULT_TARGET_BER
}

fn default_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinewidthSpec {
    /// Combined transmitter + LO laser linewidths, Hz.
    pub dnu_hz: Vec<f64>,
    pub symbol_rate_baud: f64,
    /// Interpret `dnu_hz` as linewidth per spatial channel, `dnu / D`.
    #[serde(default)]
    pub per_channel: bool,
}

impl Default for LinewidthSpec {
    fn default() -> Self {
        Self {
            dnu_hz: vec![200e3],
            symbol_rate_baud: 20e9,
            per_channel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    /// `var_nu / var_c`; `inf` (or `"inf"`) disables the core drift.
    #[serde(default = "default_ratio_c", with = "ratio")]
    pub ratio_c: f64,
    /// `var_nu / var_p` values to sweep; `inf` disables the polarization drift.
    #[serde(default = "default_ratio_p", with = "ratio_list")]
    pub ratio_p: Vec<f64>,
    /// Split `2 pi dnu Ts` between the laser and polarization components
    /// (`var_nu + var_p` fixed) instead of adding the drifts on top.
    #[serde(default)]
    pub fixed_total: bool,
}

fn default_ratio_c() -> f64 {
    1e3
}

/// Ratios serialize infinity as the string `"inf"` so that JSON can carry it.
mod ratio {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    impl Repr {
        pub(super) fn from_f64(v: f64) -> Self {
            if v == f64::INFINITY {
                Repr::Text("inf".into())
            } else {
                Repr::Num(v)
            }
        }

        pub(super) fn into_f64<E: serde::de::Error>(self) -> Result<f64, E> {
            match self {
                Repr::Num(x) => Ok(x),
                Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Repr::Text(t) => Err(E::custom(format!(
                    "expected a number or \"inf\", got `{t}`"
                ))),
            }
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        Repr::from_f64(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Repr::deserialize(d)?.into_f64()
    }
}

mod ratio_list {
    use super::ratio::Repr;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| Repr::from_f64(x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(Repr::into_f64)
            .collect()
    }
}

fn default_ratio_p() -> Vec<f64> {
    vec![1e6]
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            ratio_c: default_ratio_c(),
            ratio_p: default_ratio_p(),
            fixed_total: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variances {
    pub var_nu: f64,
    pub var_c: f64,
    pub var_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpsSpec {
    #[serde(default = "default_test_phases")]
    pub test_phases: usize,
    /// Fixed half-width; tuned per Eb/N0 on a separate frame when absent.
    #[serde(default)]
    pub half_window: Option<usize>,
}

fn default_test_phases() -> usize {
    128
}

impl Default for BpsSpec {
    fn default() -> Self {
        Self {
            test_phases: default_test_phases(),
            half_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub name: String,
    pub modulations: Vec<usize>,
    pub cores: Vec<usize>,
    #[serde(default = "default_block_len")]
    pub block_len: usize,
    #[serde(default = "default_oh")]
    pub oh_pilot: Vec<f64>,
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub snr: SnrSpec,
    #[serde(default)]
    pub linewidth: LinewidthSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    /// Use these increment variances instead of deriving them.
    #[serde(default)]
    pub absolute_variances: Option<Variances>,
    #[serde(default)]
    pub bps: BpsSpec,
    #[serde(default = "default_vv_window")]
    pub viterbi_window: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_error_target")]
    pub error_target: u64,
    #[serde(default = "default_min_frames")]
    pub min_frames: u64,
    /// Stop accumulating at this many bits even below the error target.
    #[serde(default = "default_max_bits")]
    pub max_bits: u64,
    /// Also estimate the pilot-discounted GMI.
    #[serde(default)]
    pub compute_air: bool,
    /// FEC codes for the overhead-reduction analysis of grid sweeps.
    #[serde(default)]
    pub codebook: Option<Vec<FecCode>>,
}

fn default_block_len() -> usize {
    10_000
}
fn default_oh() -> Vec<f64> {
    vec![0.01]
}
fn default_iterations() -> usize {
    2
}
fn default_vv_window() -> usize {
    64
}
fn default_seed() -> u64 {
    1
}
fn default_error_target() -> u64 {
    10_000
}
fn default_min_frames() -> u64 {
    1
}
fn default_max_bits() -> u64 {
    2_000_000_000
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid sweep configuration:")?;
        for p in &self.problems {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn single(msg: impl Into<String>) -> Self {
        Self {
            problems: vec![msg.into()],
        }
    }
}

/// One point on the phase-noise axes of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub dnu_hz: f64,
    pub dnu_ts: f64,
    pub ratio_p: f64,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let spec: Self = toml::from_str(text).map_err(|e| ConfigError::single(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::single(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_toml(text)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep spec serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        if self.modulations.is_empty() {
            p.push("modulations must not be empty".to_string());
        }
        for &m in &self.modulations {
            if !SUPPORTED_ORDERS.contains(&m) {
                p.push(format!(
                    "modulation order {m} is not one of {SUPPORTED_ORDERS:?}"
                ));
            }
        }
        if self.cores.is_empty() {
            p.push("cores must not be empty".into());
        }
        if self.cores.contains(&0) {
            p.push("core counts must be at least 1".into());
        }
        if self.block_len < 2 {
            p.push(format!(
                "block_len must be at least 2, got {}",
                self.block_len
            ));
        }
        if self.strategies.is_empty() {
            p.push("strategies must not be empty".into());
        }
        let needs_pilots = self.strategies.iter().any(Strategy::uses_pilots);
        if needs_pilots && self.oh_pilot.is_empty() {
            p.push("oh_pilot must not be empty".into());
        }
        for &oh in &self.oh_pilot {
            if !(oh > 0.0 && oh <= 1.0) {
                p.push(format!("pilot overhead {oh} outside (0, 1]"));
            }
        }
        if self.iterations == 0 {
            p.push("iterations must be at least 1".into());
        }
        match &self.snr {
            SnrSpec::Grid {
                ebn0_db,
                per_modulation,
            } => {
                for &m in &self.modulations {
                    let grid = per_modulation.get(&m.to_string()).unwrap_or(ebn0_db);
                    if grid.is_empty() {
                        p.push(format!("no Eb/N0 grid for modulation {m}"));
                    }
                    if grid.iter().any(|x| !x.is_finite()) {
                        p.push(format!("non-finite Eb/N0 in grid for modulation {m}"));
                    }
                }
                for key in per_modulation.keys() {
                    if key
                        .parse::<usize>()
                        .map_or(true, |m| !self.modulations.contains(&m))
                    {
                        p.push(format!(
                            "per_modulation key `{key}` is not a listed modulation"
                        ));
                    }
                }
            }
            SnrSpec::Required {
                target_ber,
                tol_db,
                bracket,
            } => {
                if !(*target_ber > 0.0 && *target_ber < 0.5) {
                    p.push(format!("target_ber {target_ber} outside (0, 0.5)"));
                }
                if !(*tol_db > 0.0) {
                    p.push(format!("tol_db must be positive, got {tol_db}"));
                }
                if let Some([lo, hi]) = bracket {
                    if !(lo < hi) {
                        p.push(format!("bracket [{lo}, {hi}] is empty"));
                    }
                }
            }
        }
        if self.absolute_variances.is_none() {
            let lw = &self.linewidth;
            if lw.dnu_hz.is_empty() {
                p.push("linewidth.dnu_hz must not be empty".into());
            }
            if lw.dnu_hz.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                p.push("linewidths must be finite and non-negative".into());
            }
            if !(lw.symbol_rate_baud > 0.0 && lw.symbol_rate_baud.is_finite()) {
                p.push(format!(
                    "symbol_rate_baud must be positive, got {}",
                    lw.symbol_rate_baud
                ));
            }
            if self.drift.ratio_p.is_empty() {
                p.push("drift.ratio_p must not be empty".into());
            }
            if !(self.drift.ratio_c > 0.0) || self.drift.ratio_p.iter().any(|&r| !(r > 0.0)) {
                p.push("drift ratios must be positive (inf disables a drift)".into());
            }
        } else if let Some(v) = self.absolute_variances {
            if PhaseModel::new(2, v.var_nu, v.var_c, v.var_p).is_err() {
                p.push("absolute variances must be finite and non-negative".into());
            }
        }
        if self.bps.test_phases < 2 {
            p.push("bps.test_phases must be at least 2".into());
        }
        if self.viterbi_window == 0 || self.viterbi_window > self.block_len {
            p.push(format!("viterbi_window must lie in 1..={}", self.block_len));
        }
        if self.error_target == 0 {
            p.push("error_target must be at least 1".into());
        }
        if self.min_frames == 0 {
            p.push("min_frames must be at least 1".into());
        }
        if let Some(codes) = &self.codebook {
            if let Err(e) = FecCodebook::new(codes.clone()) {
                p.push(format!("codebook: {e}"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: p })
        }
    }

    /// Eb/N0 grid for a modulation order in grid mode.
    pub fn grid_for(&self, order: usize) -> Option<&[f64]> {
        match &self.snr {
            SnrSpec::Grid {
                ebn0_db,
                per_modulation,
            } => Some(per_modulation.get(&order.to_string()).unwrap_or(ebn0_db)),
            SnrSpec::Required { .. } => None,
        }
    }

    /// Phase-noise points (linewidth x correlation) of the sweep.
    pub fn noise_points(&self) -> Vec<NoisePoint> {
        if self.absolute_variances.is_some() {
            return vec![NoisePoint {
                dnu_hz: f64::NAN,
                dnu_ts: f64::NAN,
                ratio_p: f64::NAN,
            }];
        }
        let mut out = Vec::new();
        for &dnu in &self.linewidth.dnu_hz {
            for &ratio_p in &self.drift.ratio_p {
                out.push(NoisePoint {
                    dnu_hz: dnu,
                    dnu_ts: dnu / self.linewidth.symbol_rate_baud,
                    ratio_p,
                });
            }
        }
        out
    }

    /// Phase model of `channels` channels at one noise point. With
    /// `linewidth.per_channel`, the point's linewidth is scaled by `channels`.
    pub fn phase_model(&self, channels: usize, point: &NoisePoint) -> PhaseModel {
        if let Some(v) = self.absolute_variances {
            return PhaseModel::new(channels, v.var_nu, v.var_c, v.var_p)
                .expect("validated variances");
        }
        let scale = if self.linewidth.per_channel {
            channels as f64
        } else {
            1.0
        };
        let total = std::f64::consts::TAU * point.dnu_ts * scale;
        let (var_nu, var_p) = if self.drift.fixed_total {
            let r = point.ratio_p;
            if r.is_infinite() {
                (total, 0.0)
            } else {
                (total * r / (1.0 + r), total / (1.0 + r))
            }
        } else {
            (total, total / point.ratio_p)
        };
        let var_c = var_nu / self.drift.ratio_c;
        PhaseModel::new(channels, var_nu, var_c, var_p).expect("validated variances")
    }
}
