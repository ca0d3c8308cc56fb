//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=1,7,8` restricts the run to the listed criteria.

use std::f64::consts::TAU;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};

use sdm_cpe::channel::{apply_channel, build_covariance, min_eigenvalue, sample_phase_noise_joint};
use sdm_cpe::cpe::{fg_eks, pc_cpe_with_variance, CpeOptions};
use sdm_cpe::metrics::DEFAULT_TARGET_BER;
use sdm_cpe::rng::{Role, StreamKey};
use sdm_cpe::runner::{
    figure_recipe, run_sweep, write_csv, RunOptions, Scenario, StopRule, Strategy, SweepSpec,
};
use sdm_cpe::{Constellation, Grid, PhaseModel, PilotSchedule};

const VAR_NU_200K: f64 = TAU * 200e3 / 20e9;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Verdict;

const CRITERIA: [(u32, &str, Check); 10] = [
    (1, "awgn-sanity", awgn_sanity),
    (2, "fig3-fg-eks-beats-bps", fig3_vs_bps),
    (3, "fig4-gaps-at-1pct", fig4_gaps),
    (4, "min-over-oh-reduction", min_over_oh),
    (5, "fig8-linewidth-scaling", fig8_scaling),
    (6, "fig5c-correlation-endpoints", fig5c_endpoints),
    (7, "single-channel-equivalence", single_channel_equivalence),
    (8, "grid-posterior-oracle", grid_oracle),
    (9, "structural-invariants", structural_invariants),
    (10, "air-gain-1024qam", air_gain),
];

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {id:>2} {name}: {} ({:.1} s)",
            v.detail,
            t.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

/// 200 kHz at 20 GBd with drift ratios 10^3 and 10^6.
fn standard_model(cores: usize) -> PhaseModel {
    PhaseModel::new(2 * cores, VAR_NU_200K, VAR_NU_200K / 1e3, VAR_NU_200K / 1e6).unwrap()
}

fn scenario(
    order: usize,
    pm: PhaseModel,
    strategy: Strategy,
    oh: f64,
    error_target: u64,
) -> Scenario {
    let mut s = Scenario::new(order, pm, 10_000, strategy, oh).unwrap();
    s.stop = StopRule {
        error_target,
        ..StopRule::default()
    };
    s
}

fn required_db(s: &Scenario) -> f64 {
    s.required(DEFAULT_TARGET_BER, 0.05, None)
        .unwrap()
        .snr
        .ebn0_db
}

/// Required Eb/N0 of per-channel minus joint processing.
fn required_gap(order: usize, pm: PhaseModel, oh: f64, error_target: u64) -> (f64, f64) {
    let jc = required_db(&scenario(order, pm, Strategy::Joint, oh, error_target));
    let pc = required_db(&scenario(order, pm, Strategy::PerChannel, oh, error_target));
    (jc, pc)
}

fn within(x: f64, centre: f64, tol: f64) -> bool {
    (x - centre).abs() <= tol
}

fn wrap(x: f64) -> f64 {
    x - TAU * (x / TAU).round()
}

fn awgn_sanity() -> Verdict {
    let pm = PhaseModel::new(2, 0.0, 0.0, 0.0).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for order in [16, 256] {
        let mut s = scenario(order, pm, Strategy::PerChannel, 2.0 / 9998.0, 10_000);
        // One pilot per end leaves the first pass nearly blind.
        s.iterations = 5;
        for target in [1e-2, 3e-3, 1e-3] {
            let db = s.awgn_required_ebn0(target);
            let e = s.evaluate(db).unwrap();
            let sigma = (target * (1.0 - target) / e.bits as f64).sqrt();
            let z = (e.ber - target) / sigma;
            pass &= z.abs() <= 3.0;
            parts.push(format!("{order}QAM@{target:.0e} z={z:+.2}"));
        }
    }
    Verdict::new(pass, parts.join(", "))
}

fn fig3_vs_bps() -> Verdict {
    let mut spec = figure_recipe("fig3").unwrap();
    spec.error_target = 1000;
    let res = run_sweep(
        &spec,
        &RunOptions {
            workers: 1,
            record_timing: false,
        },
    )
    .unwrap();
    let ber = |strategy: Strategy| -> Vec<(f64, f64)> {
        res.records()
            .filter(|r| r.strategy == strategy)
            .map(|r| (r.ebn0_db.unwrap(), r.ber.unwrap()))
            .collect()
    };
    let (fg, bps) = (ber(Strategy::PerChannel), ber(Strategy::Bps));
    let mut pass = fg.len() == bps.len() && !fg.is_empty();
    let mut parts = Vec::new();
    for ((db, a), (db2, b)) in fg.iter().zip(&bps) {
        pass &= db == db2 && a <= b;
        parts.push(format!("{db:.1}dB {a:.2e}/{b:.2e}"));
    }
    Verdict::new(pass, format!("FG-EKS/BPS BER: {}", parts.join(", ")))
}

fn fig4_gaps() -> Verdict {
    let expected = [
        (16, 0.15, 0.10),
        (64, 0.41, 0.15),
        (256, 1.12, 0.25),
        (1024, 3.38, 0.50),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (order, centre, tol) in expected {
        let (jc, pc) = required_gap(order, standard_model(10), 0.01, 1000);
        let gap = pc - jc;
        pass &= within(gap, centre, tol);
        parts.push(format!("{order}QAM {gap:.2} dB ({centre}±{tol})"));
    }
    Verdict::new(pass, parts.join(", "))
}

/// Minimum of a sampled curve, refined by a parabola through the lowest
/// point and its neighbours when it is interior.
fn curve_minimum(x: &[f64], y: &[f64]) -> f64 {
    let i = (0..y.len()).min_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
    if i == 0 || i + 1 == y.len() {
        return y[i];
    }
    let (x0, x1, x2) = (x[i - 1], x[i], x[i + 1]);
    let (y0, y1, y2) = (y[i - 1], y[i], y[i + 1]);
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let a = (d12 - d01) / (x2 - x0);
    if a <= 0.0 {
        return y[i];
    }
    let b = d01 - a * (x0 + x1);
    let xm = -b / (2.0 * a);
    let c = y1 - a * x1 * x1 - b * x1;
    (a * xm * xm + b * xm + c).min(y[i])
}

fn min_over_oh() -> Verdict {
    // The wrapped-diagonal layout tops out near 1/D = 5 % for 10 cores.
    let joint_oh = [0.005, 0.01, 0.02, 0.03, 0.05];
    let per_channel_oh = [0.03, 0.05, 0.08, 0.12, 0.2];
    let pm = standard_model(10);
    let curve = |strategy, ohs: &[f64]| -> (f64, Vec<f64>) {
        let req: Vec<f64> = ohs
            .iter()
            .map(|&oh| required_db(&scenario(1024, pm, strategy, oh, 1000)))
            .collect();
        let log_oh: Vec<f64> = ohs.iter().map(|o| o.ln()).collect();
        (curve_minimum(&log_oh, &req), req)
    };
    let (jc_min, jc) = curve(Strategy::Joint, &joint_oh);
    let (pc_min, pc) = curve(Strategy::PerChannel, &per_channel_oh);
    let reduction = pc_min - jc_min;
    let fmt = |ohs: &[f64], v: &[f64]| {
        ohs.iter()
            .zip(v)
            .map(|(o, x)| format!("{}%:{x:.2}", o * 100.0))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Verdict::new(
        within(reduction, 0.98, 0.30),
        format!(
            "reduction {reduction:.2} dB (0.98±0.30); JC min {jc_min:.2} [{}], PC min {pc_min:.2} [{}]",
            fmt(&joint_oh, &jc),
            fmt(&per_channel_oh, &pc)
        ),
    )
}

fn fig8_scaling() -> Verdict {
    let per_channel_hz = [50e3, 100e3, 200e3, 400e3];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for g in per_channel_hz {
        let mut req = Vec::new();
        for cores in [1, 3, 10] {
            let d = 2 * cores;
            let var_nu = TAU * g * d as f64 / 20e9;
            let pm = PhaseModel::new(d, var_nu, var_nu / 1e3, var_nu / 1e6).unwrap();
            req.push(required_db(&scenario(
                16,
                pm,
                Strategy::Joint,
                0.01,
                10_000,
            )));
        }
        let spread = req.iter().cloned().fold(f64::MIN, f64::max)
            - req.iter().cloned().fold(f64::MAX, f64::min);
        worst = worst.max(spread);
        parts.push(format!(
            "{:.0}k: {}",
            g / 1e3,
            req.iter()
                .map(|x| format!("{x:.2}"))
                .collect::<Vec<_>>()
                .join("/")
        ));
    }
    Verdict::new(
        worst <= 0.2,
        format!(
            "max spread {worst:.2} dB (≤0.2) over D=2/6/20; {}",
            parts.join(", ")
        ),
    )
}

fn fig5c_endpoints() -> Verdict {
    let ratios: Vec<f64> = (-2..=5).map(|e| 10f64.powi(e)).collect();
    let mut gains = Vec::new();
    for &r in &ratios {
        let var_nu = VAR_NU_200K * r / (1.0 + r);
        let var_p = VAR_NU_200K / (1.0 + r);
        let pm = PhaseModel::new(20, var_nu, 0.0, var_p).unwrap();
        let (jc, pc) = required_gap(16, pm, 0.01, 1000);
        gains.push(pc - jc);
    }
    let low = gains[0];
    let sag = gains
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::MIN, f64::max);
    let tail = (gains[7] - gains[6]).abs();
    let pass = low.abs() <= 0.1 && sag <= 0.1 && tail <= 0.1;
    Verdict::new(
        pass,
        format!(
            "gain at 1e-2 {low:.3} dB, largest decrease {sag:.3} dB, 1e4→1e5 change {tail:.3} dB; gains {}",
            gains.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>().join("/")
        ),
    )
}

fn single_channel_equivalence() -> Verdict {
    let orders = [4, 16, 64, 256];
    let n = 2000;
    let mut mismatches = 0;
    for frame in 0..100u64 {
        let mut rng = StreamKey::new(77, 0, frame, Role::Data).rng();
        let c = Constellation::qam(orders[frame as usize % 4], 1.0).unwrap();
        let q = 10f64.powf(rng.random_range(-6.0..-3.0));
        let noise = [10f64.powf(rng.random_range(-3.0..-1.0))];
        let spacing = rng.random_range(10..200);
        let schedule = PilotSchedule::uniform_with_spacing(1, n, spacing, c.es()).unwrap();
        let q1 = DMatrix::from_element(1, 1, q);
        let phases = sample_phase_noise_joint(&q1, n, &mut rng).unwrap();
        let symbols = Grid::from_fn(1, n, |i, k| {
            if schedule.is_pilot(i, k) {
                schedule.value(i, k)
            } else {
                c.point(rng.random_range(0..c.order()))
            }
        });
        let received = apply_channel(&symbols, &phases, &noise, &mut rng).unwrap();
        let opts = CpeOptions::iterations(1 + frame as usize % 3).with_soft_output(frame % 2 == 0);
        let joint = fg_eks(&received, &schedule, &c, &q1, &noise, &opts).unwrap();
        let single = pc_cpe_with_variance(&received, &schedule, &c, q, &noise, &opts).unwrap();
        if joint != single {
            mismatches += 1;
        }
    }
    Verdict::new(mismatches == 0, format!("{mismatches}/100 frames differ"))
}

const BINS: usize = 4096;

/// Forward-backward smoother over a uniform phase grid; returns the
/// circular posterior mean at every time.
struct GridSmoother {
    rot: Vec<Complex64>,
    kernel: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl GridSmoother {
    fn new(q: f64) -> Self {
        let step = TAU / BINS as f64;
        let rot = (0..BINS)
            .map(|j| Complex64::from_polar(1.0, j as f64 * step))
            .collect();
        let mut kernel: Vec<Complex64> = (0..BINS)
            .map(|j| {
                let d = if j <= BINS / 2 {
                    j as f64
                } else {
                    j as f64 - BINS as f64
                } * step;
                let w: f64 = (-3..=3)
                    .map(|w| (-(d + TAU * w as f64).powi(2) / (2.0 * q)).exp())
                    .sum();
                Complex64::new(w, 0.0)
            })
            .collect();
        let total: f64 = kernel.iter().map(|k| k.re).sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(BINS);
        let ifft = planner.plan_fft_inverse(BINS);
        fft.process(&mut kernel);
        Self {
            rot,
            kernel,
            fft,
            ifft,
        }
    }

    /// Circular convolution with the increment kernel.
    fn diffuse(&self, v: &mut [f64]) {
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        buf.iter_mut().zip(&self.kernel).for_each(|(b, k)| *b *= k);
        self.ifft.process(&mut buf);
        for (x, b) in v.iter_mut().zip(&buf) {
            *x = (b.re / BINS as f64).max(0.0);
        }
    }

    fn likelihood(&self, r: Complex64, candidates: &[Complex64], s2: f64) -> Vec<f64> {
        let mut logl: Vec<f64> = self
            .rot
            .iter()
            .map(|e| {
                let terms: Vec<f64> = candidates
                    .iter()
                    .map(|&x| -(r - x * e).norm_sqr() / (2.0 * s2))
                    .collect();
                let top = terms.iter().cloned().fold(f64::MIN, f64::max);
                top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
            })
            .collect();
        let top = logl.iter().cloned().fold(f64::MIN, f64::max);
        logl.iter_mut().for_each(|l| *l = (*l - top).exp());
        logl
    }

    fn means(&self, r: &[Complex64], candidates: &[Vec<Complex64>], s2: f64) -> Vec<f64> {
        let n = r.len();
        let like: Vec<Vec<f64>> = (0..n)
            .map(|k| self.likelihood(r[k], &candidates[k], s2))
            .collect();
        let normalize = |v: &mut Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
        };
        let mut alpha = vec![like[0].clone()];
        normalize(&mut alpha[0]);
        for k in 1..n {
            let mut a = alpha[k - 1].clone();
            self.diffuse(&mut a);
            a.iter_mut().zip(&like[k]).for_each(|(x, l)| *x *= l);
            normalize(&mut a);
            alpha.push(a);
        }
        let mut beta = vec![vec![1.0; BINS]; n];
        for k in (0..n - 1).rev() {
            let mut b: Vec<f64> = beta[k + 1]
                .iter()
                .zip(&like[k + 1])
                .map(|(b, l)| b * l)
                .collect();
            self.diffuse(&mut b);
            normalize(&mut b);
            beta[k] = b;
        }
        (0..n)
            .map(|k| {
                let z: Complex64 = (0..BINS)
                    .map(|j| self.rot[j] * (alpha[k][j] * beta[k][j]))
                    .sum();
                z.arg()
            })
            .collect()
    }
}

fn grid_oracle() -> Verdict {
    let c = Constellation::qam(4, 1.0).unwrap();
    let (n, q, s2) = (256, 6e-4, 0.05);
    let schedule = PilotSchedule::uniform_with_spacing(1, n, 4, c.es()).unwrap();
    let q1 = DMatrix::from_element(1, 1, q);
    let oracle = GridSmoother::new(q);
    let (mut eks_se, mut grid_se) = (0.0, 0.0);
    for frame in 0..200u64 {
        let mut rng = StreamKey::new(88, 0, frame, Role::Data).rng();
        let phases = sample_phase_noise_joint(&q1, n, &mut rng).unwrap();
        let symbols = Grid::from_fn(1, n, |i, k| {
            if schedule.is_pilot(i, k) {
                schedule.value(i, k)
            } else {
                c.point(rng.random_range(0..4))
            }
        });
        let received = apply_channel(&symbols, &phases, &[s2], &mut rng).unwrap();
        let res = fg_eks(&received, &schedule, &c, &q1, &[s2], &CpeOptions::default()).unwrap();
        let candidates: Vec<Vec<Complex64>> = (0..n)
            .map(|k| {
                if schedule.is_pilot(0, k) {
                    vec![schedule.value(0, k)]
                } else {
                    c.points().to_vec()
                }
            })
            .collect();
        let means = oracle.means(received.row(0), &candidates, s2);
        for k in 0..n {
            let truth = *phases.get(0, k);
            eks_se += wrap(res.track.phase(0, k) - truth).powi(2);
            grid_se += wrap(means[k] - truth).powi(2);
        }
    }
    let count = 200.0 * n as f64;
    let (eks, grid) = (eks_se / count, grid_se / count);
    Verdict::new(
        eks <= 1.5 * grid,
        format!(
            "MSE FG-EKS {eks:.3e} rad², grid {grid:.3e} rad², ratio {:.3} (≤1.5)",
            eks / grid
        ),
    )
}

fn structural_invariants() -> Verdict {
    let mut failures = Vec::new();

    // Increment covariances are PSD.
    for cores in [1, 2, 5, 10, 16] {
        for ratio_p in [1e-2, 1.0, 1e6, f64::INFINITY] {
            let var_p = if ratio_p.is_finite() {
                1e-4 / ratio_p
            } else {
                0.0
            };
            let pm = PhaseModel::new(2 * cores, 1e-4, 1e-7, var_p).unwrap();
            let q = build_covariance(&pm);
            if min_eigenvalue(&q) < -1e-12 * q.trace() {
                failures.push(format!("Q not PSD for {cores} cores, ratio {ratio_p}"));
            }
        }
    }

    // Smoother contraction and channel-permutation equivariance.
    let pm = PhaseModel::new(6, 5e-5, 5e-8, 5e-11).unwrap();
    let q = build_covariance(&pm);
    let c = Constellation::qam(16, 1.0).unwrap();
    let n = 1000;
    let schedule = PilotSchedule::wrapped_diagonal(6, n, 0.01, c.es()).unwrap();
    let noise = vec![0.01, 0.012, 0.008, 0.01, 0.015, 0.01];
    let mut rng = StreamKey::new(5, 0, 0, Role::Data).rng();
    let phases = sample_phase_noise_joint(&q, n, &mut rng).unwrap();
    let symbols = Grid::from_fn(6, n, |i, k| {
        if schedule.is_pilot(i, k) {
            schedule.value(i, k)
        } else {
            c.point(rng.random_range(0..16))
        }
    });
    let received = apply_channel(&symbols, &phases, &noise, &mut rng).unwrap();
    let res = fg_eks(&received, &schedule, &c, &q, &noise, &CpeOptions::default()).unwrap();
    let contracted = (0..n).all(|k| {
        let (f, s) = (res.track.forward_cov(k), res.track.smoothed_cov(k));
        (0..6).all(|i| s[i * 7] <= f[i * 7])
    });
    if !contracted {
        failures.push("smoothed variance exceeds forward variance".into());
    }
    let perm = [3, 5, 0, 4, 1, 2];
    let qp = DMatrix::from_fn(6, 6, |a, b| q[(perm[a], perm[b])]);
    let np: Vec<f64> = perm.iter().map(|&p| noise[p]).collect();
    let permuted = fg_eks(
        &received.permute_rows(&perm),
        &schedule.permute_channels(&perm),
        &c,
        &qp,
        &np,
        &CpeOptions::default(),
    )
    .unwrap();
    let equivariant = perm.iter().enumerate().all(|(j, &p)| {
        permuted.decisions.row(j) == res.decisions.row(p)
            && (0..n).all(|k| (permuted.track.phase(j, k) - res.track.phase(p, k)).abs() < 1e-9)
    });
    if !equivariant {
        failures.push("permuted channels give different estimates".into());
    }

    // Sweeps are independent of the worker count.
    let spec = SweepSpec::from_toml(
        r#"
modulations = [16, 64]
cores = [2]
block_len = 2000
oh_pilot = [0.01, 0.03]
strategies = ["joint", "per-channel", "bps"]
error_target = 100
[snr]
mode = "grid"
ebn0_db = [10.0, 12.0]
"#,
    )
    .unwrap();
    let csv = |workers| {
        let res = run_sweep(
            &spec,
            &RunOptions {
                workers,
                record_timing: false,
            },
        )
        .unwrap();
        write_csv(res.records()).unwrap()
    };
    if csv(1) != csv(4) {
        failures.push("worker count changes the results".into());
    }

    // Every channel carries pilots at both ends of the block.
    for d in [1, 2, 6, 20] {
        for n in [2, 3, 97, 1000, 10_000] {
            for oh in [0.002, 0.01, 0.2] {
                let schedules = [
                    PilotSchedule::wrapped_diagonal(d, n, oh, 1.0),
                    PilotSchedule::uniform_per_channel(d, n, oh, 1.0),
                ];
                for s in schedules.into_iter().flatten() {
                    if !(0..d).all(|i| s.is_pilot(i, 0) && s.is_pilot(i, n - 1)) {
                        failures.push(format!("missing endpoint pilot for D={d} N={n} oh={oh}"));
                    }
                }
            }
        }
    }

    let pass = failures.is_empty();
    let detail = if pass {
        "PSD, contraction, permutation, worker count and endpoint checks hold".to_string()
    } else {
        failures.join("; ")
    };
    Verdict::new(pass, detail)
}

fn air_gain() -> Verdict {
    let spec = figure_recipe("fig7").unwrap();
    let grid: Vec<f64> = spec
        .grid_for(1024)
        .unwrap()
        .iter()
        .step_by(4)
        .cloned()
        .collect();
    let pm = standard_model(10);
    let air = |strategy| -> Vec<f64> {
        let mut s = scenario(1024, pm, strategy, 0.01, 1);
        s.compute_air = true;
        grid.iter()
            .map(|&db| s.evaluate(db).unwrap().air.unwrap().air)
            .collect()
    };
    let (jc, pc) = (air(Strategy::Joint), air(Strategy::PerChannel));
    let gains: Vec<(f64, f64)> = grid
        .iter()
        .zip(jc.iter().zip(&pc))
        .map(|(&db, (j, p))| (db, j - p))
        .collect();
    let (at, best) = gains
        .iter()
        .cloned()
        .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    Verdict::new(
        within(best, 0.59, 0.15),
        format!(
            "max AIR gain {best:.3} b/sym/pol at {at} dB (0.59±0.15); gains {}",
            gains
                .iter()
                .map(|(db, g)| format!("{db}:{g:.2}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}
