//! Named, pre-filled sweeps.

use std::collections::BTreeMap;

use super::spec::{BpsSpec, DriftSpec, LinewidthSpec, SnrSpec, Strategy, SweepSpec};
use super::ConfigError;
use crate::constellation::theory_ber_square_qam;
use crate::metrics::{db_to_linear, FecCodebook, DEFAULT_TARGET_BER};

pub const RECIPES: [&str; 7] = ["fig3", "fig4", "fig5c", "fig6", "fig7", "fig8", "table1"];

const ALL_ORDERS: [usize; 4] = [16, 64, 256, 1024];

/// AWGN Eb/N0 (dB) at which uncoded Gray QAM reaches `ber`.
fn awgn_ebn0_db(order: usize, ber: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 60.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if theory_ber_square_qam(order, db_to_linear(mid)) > ber {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Half-dB grid from `below` dB under to `above` dB over the AWGN
/// requirement at the default threshold, rounded to 0.5 dB.
fn grid_around_threshold(order: usize, below: f64, above: f64) -> Vec<f64> {
    let centre = (awgn_ebn0_db(order, DEFAULT_TARGET_BER) * 2.0).round() / 2.0;
    let steps = ((below + above) / 0.5).round() as usize;
    (0..=steps)
        .map(|i| centre - below + 0.5 * i as f64)
        .collect()
}

fn per_modulation(orders: &[usize], below: f64, above: f64) -> SnrSpec {
    SnrSpec::Grid {
        ebn0_db: Vec::new(),
        per_modulation: orders
            .iter()
            .map(|&m| (m.to_string(), grid_around_threshold(m, below, above)))
            .collect::<BTreeMap<_, _>>(),
    }
}

fn required() -> SnrSpec {
    SnrSpec::Required {
        target_ber: DEFAULT_TARGET_BER,
        tol_db: 0.05,
        bracket: None,
    }
}

fn base(name: &str) -> SweepSpec {
    SweepSpec {
        name: name.to_string(),
        modulations: ALL_ORDERS.to_vec(),
        cores: vec![10],
        block_len: 10_000,
        oh_pilot: vec![0.01],
        strategies: vec![Strategy::Joint, Strategy::PerChannel],
        iterations: 2,
        snr: required(),
        linewidth: LinewidthSpec::default(),
        drift: DriftSpec::default(),
        absolute_variances: None,
        bps: BpsSpec::default(),
        viterbi_window: 64,
        seed: 1,
        error_target: 10_000,
        min_frames: 1,
        max_bits: 2_000_000_000,
        compute_air: false,
        codebook: None,
    }
}

/// The sweep behind a named figure or table. 200 kHz at 20 GBd, ratios
/// `10^3` / `10^6`, 1 % pilots and 2 iterations unless stated otherwise.
pub fn figure_recipe(name: &str) -> Result<SweepSpec, ConfigError> {
    let mut s = base(name);
    match name {
        "fig3" => {
            s.modulations = vec![256];
            s.cores = vec![1];
            s.strategies = vec![Strategy::PerChannel, Strategy::Bps];
            s.iterations = 20;
            s.snr = per_modulation(&[256], 1.0, 3.0);
        }
        "fig4" => {
            s.cores = vec![1, 3, 10];
            s.oh_pilot = vec![
                0.002, 0.004, 0.006, 0.01, 0.015, 0.02, 0.03, 0.05, 0.08, 0.12, 0.2,
            ];
        }
        "fig5c" => {
            s.modulations = vec![16];
            s.cores = vec![3, 10];
            s.drift = DriftSpec {
                ratio_c: f64::INFINITY,
                ratio_p: (-2..=5).map(|e| 10f64.powi(e)).collect(),
                fixed_total: true,
            };
        }
        "fig6" => {
            s.snr = per_modulation(&ALL_ORDERS, 1.0, 6.0);
        }
        "fig7" => {
            s.modulations = vec![16, 1024];
            s.compute_air = true;
            s.snr = per_modulation(&[16, 1024], 6.0, 10.0);
        }
        "fig8" => {
            s.modulations = vec![16];
            s.cores = vec![1, 3, 10];
            s.linewidth = LinewidthSpec {
                dnu_hz: vec![25e3, 50e3, 100e3, 200e3, 400e3, 800e3],
                symbol_rate_baud: 20e9,
                per_channel: true,
            };
        }
        "table1" => {
            s.cores = vec![1, 3, 10];
            s.snr = per_modulation(&ALL_ORDERS, 1.0, 6.0);
            s.codebook = Some(FecCodebook::default().entries().to_vec());
        }
        other => {
            return Err(ConfigError {
                problems: vec![format!(
                    "unknown recipe `{other}`; expected one of {}",
                    RECIPES.join(", ")
                )],
            })
        }
    }
    s.validate()?;
    Ok(s)
}
