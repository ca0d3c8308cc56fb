use nalgebra::DMatrix;
use num_complex::Complex64;

use super::dense::{backward_substitute, cholesky_in_place, forward_substitute, symmetrize};
use super::{CpeError, CpeOptions, CpeResult, PhaseTrack};
use crate::channel::PhaseModel;
use crate::constellation::{bit_llrs_from_log_metrics, Constellation};
use crate::grid::Grid;
use crate::pilots::PilotSchedule;

/// Lower bound on `|xi|` before taking its logarithm.
const XI_FLOOR: f64 = 1e-300;
/// Candidates whose log-metric upper bound falls this far (nats) below the
/// best candidate's log-metric carry a relative weight under `e^-50` and
/// are skipped.
const PRUNE_NATS: f64 = 50.0;

/// Iterative joint-channel phase estimation and symbol detection.
///
/// `q` is the `D x D` phase-increment covariance and `noise_var[i]` the
/// per-real-dimension noise variance of channel `i`. Every channel needs a
/// pilot at time 0.
pub fn fg_eks(
    received: &Grid<Complex64>,
    schedule: &PilotSchedule,
    constellation: &Constellation,
    q: &DMatrix<f64>,
    noise_var: &[f64],
    opts: &CpeOptions,
) -> Result<CpeResult, CpeError> {
    let (d, n) = received.shape();
    validate(received, schedule, q, noise_var, opts)?;
    let qv: Vec<f64> = (0..d * d).map(|idx| q[(idx / d, idx % d)]).collect();

    let mut est = Estimator::new(received, schedule, constellation, qv, noise_var);
    let mut decisions = Grid::filled(d, n, None);
    let mut llrs = opts
        .soft_output
        .then(|| vec![0.0; d * n * constellation.bits_per_symbol()]);

    for iter in 0..opts.iterations {
        est.forward()?;
        est.smooth()?;
        let last = iter + 1 == opts.iterations;
        est.update_symbols(last, &mut decisions, llrs.as_deref_mut());
    }

    Ok(CpeResult {
        decisions,
        llrs,
        bits_per_symbol: constellation.bits_per_symbol(),
        track: est.track,
        iterations_run: opts.iterations,
    })
}

/// Per-channel estimation with the total per-channel increment variance of
/// `pm`.
pub fn pc_cpe(
    received: &Grid<Complex64>,
    schedule: &PilotSchedule,
    constellation: &Constellation,
    pm: &PhaseModel,
    noise_var: &[f64],
    opts: &CpeOptions,
) -> Result<CpeResult, CpeError> {
    pc_cpe_with_variance(
        received,
        schedule,
        constellation,
        pm.per_channel_variance(),
        noise_var,
        opts,
    )
}

/// Runs [`fg_eks`] independently on every channel with a scalar increment
/// variance `q`.
pub fn pc_cpe_with_variance(
    received: &Grid<Complex64>,
    schedule: &PilotSchedule,
    constellation: &Constellation,
    q: f64,
    noise_var: &[f64],
    opts: &CpeOptions,
) -> Result<CpeResult, CpeError> {
    let (d, n) = received.shape();
    if schedule.mask().shape() != (d, n) || noise_var.len() != d {
        return Err(CpeError::Shape(format!(
            "received {:?}, schedule {:?}, {} noise variances",
            received.shape(),
            schedule.mask().shape(),
            noise_var.len()
        )));
    }
    let q1 = DMatrix::from_element(1, 1, q);
    let m = constellation.bits_per_symbol();

    let mut decisions = Vec::with_capacity(d);
    let mut llrs = opts.soft_output.then(|| Vec::with_capacity(d * n * m));
    let mut track = PhaseTrack::zeros(d, n);
    for i in 0..d {
        let r = Grid::from_vec(1, n, received.row(i).to_vec());
        let res = fg_eks(
            &r,
            &schedule.channel(i),
            constellation,
            &q1,
            &noise_var[i..=i],
            opts,
        )
        .map_err(|e| match e {
            CpeError::MissingInitialPilot { .. } => CpeError::MissingInitialPilot { channel: i },
            CpeError::InvalidNoiseVariance { value, .. } => {
                CpeError::InvalidNoiseVariance { channel: i, value }
            }
            other => other,
        })?;
        decisions.push(res.decisions.into_vec());
        if let (Some(all), Some(l)) = (llrs.as_mut(), res.llrs) {
            all.extend(l);
        }
        for k in 0..n {
            let dd = d * d;
            track.forward_mean[k * d + i] = res.track.forward_mean[k];
            track.smoothed_mean[k * d + i] = res.track.smoothed_mean[k];
            track.forward_cov[k * dd + i * d + i] = res.track.forward_cov[k];
            track.smoothed_cov[k * dd + i * d + i] = res.track.smoothed_cov[k];
        }
    }

    Ok(CpeResult {
        decisions: Grid::stack_rows(decisions),
        llrs,
        bits_per_symbol: m,
        track,
        iterations_run: opts.iterations,
    })
}

fn validate(
    received: &Grid<Complex64>,
    schedule: &PilotSchedule,
    q: &DMatrix<f64>,
    noise_var: &[f64],
    opts: &CpeOptions,
) -> Result<(), CpeError> {
    let (d, n) = received.shape();
    if d == 0 || n == 0 {
        return Err(CpeError::Shape("empty received block".into()));
    }
    if schedule.mask().shape() != (d, n) {
        return Err(CpeError::Shape(format!(
            "received {:?} vs schedule {:?}",
            received.shape(),
            schedule.mask().shape()
        )));
    }
    if q.shape() != (d, d) {
        return Err(CpeError::Shape(format!(
            "covariance {:?} for {d} channels",
            q.shape()
        )));
    }
    if noise_var.len() != d {
        return Err(CpeError::Shape(format!(
            "{} noise variances for {d} channels",
            noise_var.len()
        )));
    }
    if opts.iterations == 0 {
        return Err(CpeError::NoIterations);
    }
    for i in 0..d {
        for j in 0..d {
            let (a, b) = (q[(i, j)], q[(j, i)]);
            if !a.is_finite() || (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1e-300) {
                return Err(CpeError::InvalidCovariance);
            }
        }
    }
    for (channel, &value) in noise_var.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(CpeError::InvalidNoiseVariance { channel, value });
        }
    }
    for channel in 0..d {
        if !schedule.is_pilot(channel, 0) {
            return Err(CpeError::MissingInitialPilot { channel });
        }
    }
    Ok(())
}

/// Posterior probabilities `P(x)` over the constellation for one symbol,
/// given the smoothed phase mean and variance of its channel, the soft
/// symbol fed into the smoother (`soft_mean`, `soft_var`) and the channel
/// noise variance.
pub fn symbol_posterior(
    constellation: &Constellation,
    received: Complex64,
    phase_mean: f64,
    phase_var: f64,
    soft_mean: Complex64,
    soft_var: f64,
    noise_var: f64,
) -> Vec<f64> {
    let mut metrics = vec![0.0; constellation.order()];
    let table = PointTable::new(constellation);
    let (a, b) = xi_coefficients(
        received, phase_mean, phase_var, soft_mean, soft_var, noise_var,
    );
    table.log_metrics(a, b, 0.5 / noise_var, &mut metrics);
    let peak = metrics.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = metrics.iter().map(|f| (f - peak).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `xi(x) = a + b x*`.
#[inline]
fn xi_coefficients(
    r: Complex64,
    phase_mean: f64,
    phase_var: f64,
    soft_mean: Complex64,
    soft_var: f64,
    noise_var: f64,
) -> (Complex64, Complex64) {
    let a = Complex64::from_polar(1.0 / phase_var, phase_mean) - r * soft_mean.conj() / soft_var;
    (a, r / noise_var)
}

struct PointTable {
    /// Real and imaginary parts of the conjugated points, split for
    /// vectorized metric evaluation.
    conj_re: Vec<f64>,
    conj_im: Vec<f64>,
    points: Vec<Complex64>,
    energy: Vec<f64>,
}

impl PointTable {
    fn new(c: &Constellation) -> Self {
        Self {
            conj_re: c.points().iter().map(|p| p.re).collect(),
            conj_im: c.points().iter().map(|p| -p.im).collect(),
            points: c.points().to_vec(),
            energy: c.points().iter().map(|p| p.norm_sqr()).collect(),
        }
    }

    /// `|xi(x)| = |a + b conj(x)|` for every point.
    fn xi_magnitudes(&self, a: Complex64, b: Complex64, out: &mut [f64]) {
        for ((o, &cr), &ci) in out.iter_mut().zip(&self.conj_re).zip(&self.conj_im) {
            let re = a.re + b.re * cr - b.im * ci;
            let im = a.im + b.re * ci + b.im * cr;
            *o = (re * re + im * im).sqrt().max(XI_FLOOR);
        }
    }

    /// Exact log-metric `|xi| - |x|^2 / (2 s2) - ln|xi| / 2` for every point.
    fn log_metrics(&self, a: Complex64, b: Complex64, half_inv_s2: f64, out: &mut [f64]) {
        self.xi_magnitudes(a, b, out);
        for (o, e) in out.iter_mut().zip(&self.energy) {
            *o = *o - e * half_inv_s2 - 0.5 * o.ln();
        }
    }
}

struct Estimator<'a> {
    d: usize,
    n: usize,
    received: &'a Grid<Complex64>,
    schedule: &'a PilotSchedule,
    constellation: &'a Constellation,
    table: PointTable,
    q: Vec<f64>,
    noise_var: &'a [f64],
    /// Soft-symbol means and variances, channel-major.
    soft_mean: Vec<Complex64>,
    soft_var: Vec<f64>,
    track: PhaseTrack,
    scratch: Scratch,
}

#[derive(Default)]
struct Scratch {
    pred: Vec<f64>,
    b: Vec<f64>,
    g: Vec<f64>,
    x: Vec<f64>,
    e: Vec<f64>,
    t: Vec<f64>,
    active: Vec<(usize, f64)>,
    h: Vec<f64>,
    diff: Vec<f64>,
    u: Vec<f64>,
    hm: Vec<f64>,
    f: Vec<f64>,
    keep: Vec<usize>,
}

impl<'a> Estimator<'a> {
    fn new(
        received: &'a Grid<Complex64>,
        schedule: &'a PilotSchedule,
        constellation: &'a Constellation,
        q: Vec<f64>,
        noise_var: &'a [f64],
    ) -> Self {
        let (d, n) = received.shape();
        let es = constellation.es();
        let mut soft_mean = Vec::with_capacity(d * n);
        let mut soft_var = Vec::with_capacity(d * n);
        for (i, &s2) in noise_var.iter().enumerate() {
            for k in 0..n {
                if schedule.is_pilot(i, k) {
                    soft_mean.push(schedule.value(i, k));
                    soft_var.push(s2);
                } else {
                    soft_mean.push(Complex64::new(0.0, 0.0));
                    soft_var.push(s2 + 0.5 * es);
                }
            }
        }
        let m = constellation.order();
        let scratch = Scratch {
            pred: vec![0.0; d * d],
            b: vec![0.0; d * d],
            g: vec![0.0; d * d],
            x: vec![0.0; d * d],
            e: vec![0.0; d * d],
            t: vec![0.0; d * d],
            h: vec![0.0; d],
            diff: vec![0.0; d],
            u: vec![0.0; m],
            hm: vec![0.0; m],
            f: vec![0.0; m],
            ..Scratch::default()
        };
        Self {
            d,
            n,
            received,
            schedule,
            constellation,
            table: PointTable::new(constellation),
            q,
            noise_var,
            soft_mean,
            soft_var,
            track: PhaseTrack::zeros(d, n),
            scratch,
        }
    }

    /// Extended Kalman filter over time with the current soft symbols.
    fn forward(&mut self) -> Result<(), CpeError> {
        let (d, n) = (self.d, self.n);
        let dd = d * d;
        let es = self.constellation.es();
        let Self {
            received,
            q,
            soft_mean,
            soft_var,
            track,
            scratch,
            ..
        } = self;

        let mf = &mut track.forward_cov;
        let tf = &mut track.forward_mean;
        mf[..dd].fill(0.0);
        for i in 0..d {
            let idx = i * n;
            tf[i] = (received.get(i, 0) * soft_mean[idx].conj()).arg();
            mf[i * d + i] = soft_var[idx] / es;
        }

        for k in 1..n {
            let (prev, cur) = mf.split_at_mut(k * dd);
            let prev = &prev[(k - 1) * dd..];
            let cur = &mut cur[..dd];
            let pred = &mut scratch.pred;
            for ((p, a), b) in pred.iter_mut().zip(prev).zip(q.iter()) {
                *p = a + b;
            }

            scratch.active.clear();
            for i in 0..d {
                let idx = i * n + k;
                let s = soft_mean[idx];
                let v = s.norm_sqr() / soft_var[idx];
                if v > 0.0 {
                    scratch.active.push((i, v.sqrt()));
                    let prev_phase = tf[(k - 1) * d + i];
                    let rot =
                        received.get(i, k) * s.conj() * Complex64::from_polar(1.0, -prev_phase);
                    scratch.h[i] = rot.im / soft_var[idx];
                } else {
                    scratch.h[i] = 0.0;
                }
            }

            let s_len = scratch.active.len();
            cur.copy_from_slice(pred);
            if s_len > 0 {
                // (I + P V)^-1 P = P - P W (I + W P W)^-1 W P, W = V^(1/2).
                let b = &mut scratch.b[..s_len * s_len];
                for (a, &(ia, wa)) in scratch.active.iter().enumerate() {
                    for (c, &(ic, wc)) in scratch.active.iter().enumerate() {
                        b[a * s_len + c] =
                            wa * pred[ia * d + ic] * wc + if a == c { 1.0 } else { 0.0 };
                    }
                }
                if !cholesky_in_place(b, s_len) {
                    return Err(CpeError::Singular {
                        stage: "forward update",
                        time: k,
                    });
                }
                let g = &mut scratch.g[..s_len * d];
                for (a, &(ia, wa)) in scratch.active.iter().enumerate() {
                    for j in 0..d {
                        g[a * d + j] = wa * pred[ia * d + j];
                    }
                }
                forward_substitute(b, s_len, g, d);
                for i in 0..d {
                    for j in i..d {
                        let mut acc = 0.0;
                        for a in 0..s_len {
                            acc += g[a * d + i] * g[a * d + j];
                        }
                        let v = pred[i * d + j] - acc;
                        cur[i * d + j] = v;
                        cur[j * d + i] = v;
                    }
                }
            }

            let (tprev, tcur) = tf.split_at_mut(k * d);
            let tprev = &tprev[(k - 1) * d..];
            for i in 0..d {
                let mut acc = tprev[i];
                for &(j, _) in &scratch.active {
                    acc += cur[i * d + j] * scratch.h[j];
                }
                tcur[i] = acc;
            }
        }
        Ok(())
    }

    /// Rauch-Tung-Striebel backward recursion.
    fn smooth(&mut self) -> Result<(), CpeError> {
        let (d, n) = (self.d, self.n);
        let dd = d * d;
        let Self {
            q, track, scratch, ..
        } = self;
        let PhaseTrack {
            forward_mean,
            forward_cov,
            smoothed_mean,
            smoothed_cov,
            ..
        } = track;

        smoothed_mean[(n - 1) * d..].copy_from_slice(&forward_mean[(n - 1) * d..]);
        smoothed_cov[(n - 1) * dd..].copy_from_slice(&forward_cov[(n - 1) * dd..]);

        for k in (0..n - 1).rev() {
            let mf = &forward_cov[k * dd..(k + 1) * dd];
            let pred = &mut scratch.pred;
            for ((p, a), b) in pred.iter_mut().zip(mf).zip(q.iter()) {
                *p = a + b;
            }
            // Gain A = Mf P^-1; with both symmetric, A^T = P^-1 Mf.
            let chol = &mut scratch.b[..dd];
            chol.copy_from_slice(pred);
            if !cholesky_in_place(chol, d) {
                return Err(CpeError::Singular {
                    stage: "smoother prediction",
                    time: k,
                });
            }
            let x = &mut scratch.x;
            x.copy_from_slice(mf);
            forward_substitute(chol, d, x, d);
            backward_substitute(chol, d, x, d);
            // x = A^T, so A[i][j] = x[j][i].

            let (sm_lo, sm_hi) = smoothed_mean.split_at_mut((k + 1) * d);
            let next_mean = &sm_hi[..d];
            let fmean = &forward_mean[k * d..(k + 1) * d];
            for j in 0..d {
                scratch.diff[j] = next_mean[j] - fmean[j];
            }
            for i in 0..d {
                let mut acc = fmean[i];
                for j in 0..d {
                    acc += x[j * d + i] * scratch.diff[j];
                }
                sm_lo[k * d + i] = acc;
            }

            let (sc_lo, sc_hi) = smoothed_cov.split_at_mut((k + 1) * dd);
            let next_cov = &sc_hi[..dd];
            let e = &mut scratch.e;
            for ((ev, a), b) in e.iter_mut().zip(next_cov).zip(pred.iter()) {
                *ev = a - b;
            }
            // t = A e
            let t = &mut scratch.t;
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for p in 0..d {
                        acc += x[p * d + i] * e[p * d + j];
                    }
                    t[i * d + j] = acc;
                }
            }
            // out = Mf + t A^T
            let out = &mut sc_lo[k * dd..];
            for i in 0..d {
                for j in i..d {
                    let mut acc = 0.0;
                    for p in 0..d {
                        acc += t[i * d + p] * x[p * d + j];
                    }
                    let v = mf[i * d + j] + acc;
                    out[i * d + j] = v;
                    out[j * d + i] = v;
                }
            }
            symmetrize(&mut out[..dd], d);
        }
        Ok(())
    }

    /// Symbol posteriors at data positions: decide on the last pass,
    /// otherwise refresh the soft symbols.
    fn update_symbols(
        &mut self,
        last: bool,
        decisions: &mut Grid<Option<u32>>,
        mut llrs: Option<&mut [f64]>,
    ) {
        let (d, n) = (self.d, self.n);
        let m_bits = self.constellation.bits_per_symbol();
        let points = self.constellation.order();
        for i in 0..d {
            let s2 = self.noise_var[i];
            let half_inv_s2 = 0.5 / s2;
            for k in 0..n {
                if self.schedule.is_pilot(i, k) {
                    continue;
                }
                let idx = i * n + k;
                let (a, b) = xi_coefficients(
                    *self.received.get(i, k),
                    self.track.phase(i, k),
                    self.track.variance(i, k),
                    self.soft_mean[idx],
                    self.soft_var[idx],
                    s2,
                );
                let sc = &mut self.scratch;

                if last {
                    if let Some(l) = llrs.as_deref_mut() {
                        let f = &mut sc.f[..points];
                        self.table.log_metrics(a, b, half_inv_s2, f);
                        let best = argmax(f);
                        *decisions.get_mut(i, k) = Some(best as u32);
                        let base = idx * m_bits;
                        bit_llrs_from_log_metrics(f, m_bits, &mut l[base..base + m_bits]);
                        continue;
                    }
                }

                // Cheap pass: |xi| and the part of the metric without the log.
                let u = &mut sc.u[..points];
                let hm = &mut sc.hm[..points];
                self.table.xi_magnitudes(a, b, u);
                for ((h, &ux), e) in hm.iter_mut().zip(u.iter()).zip(&self.table.energy) {
                    *h = ux - e * half_inv_s2;
                }
                let mut best_h = f64::NEG_INFINITY;
                let mut best_u = 1.0;
                let mut min_u = f64::INFINITY;
                for (&h, &ux) in hm.iter().zip(u.iter()) {
                    if h > best_h {
                        best_h = h;
                        best_u = ux;
                    }
                    min_u = min_u.min(ux);
                }
                // f(x) <= h(x) - ln(min_u)/2 and max f >= best_h - ln(best_u)/2.
                let cut = best_h - 0.5 * best_u.ln() + 0.5 * min_u.ln() - PRUNE_NATS;
                sc.keep.clear();
                let mut fmax = f64::NEG_INFINITY;
                let mut arg = 0;
                for x in 0..points {
                    if sc.hm[x] >= cut {
                        let f = sc.hm[x] - 0.5 * sc.u[x].ln();
                        sc.f[x] = f;
                        sc.keep.push(x);
                        if f > fmax {
                            fmax = f;
                            arg = x;
                        }
                    }
                }

                if last {
                    *decisions.get_mut(i, k) = Some(arg as u32);
                    continue;
                }

                let mut total = 0.0;
                let mut mean = Complex64::new(0.0, 0.0);
                for &x in &sc.keep {
                    let w = (sc.f[x] - fmax).exp();
                    sc.f[x] = w;
                    total += w;
                    mean += self.table.points[x] * w;
                }
                mean /= total;
                let mut spread = 0.0;
                for &x in &sc.keep {
                    spread += (self.table.points[x] - mean).norm_sqr() * sc.f[x];
                }
                self.soft_mean[idx] = mean;
                self.soft_var[idx] = s2 + 0.5 * spread / total;
            }
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_channel, build_covariance, min_eigenvalue, sample_phase_noise};
    use crate::rng::{Role, StreamKey};
    use rand::Rng;

    fn wrap(x: f64) -> f64 {
        (x + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
    }

    struct Case {
        c: Constellation,
        labels: Grid<usize>,
        phases: Grid<f64>,
        received: Grid<Complex64>,
        schedule: PilotSchedule,
        q: DMatrix<f64>,
        noise: Vec<f64>,
    }

    fn case(order: usize, pm: &PhaseModel, n: usize, oh: f64, noise_var: f64, seed: u64) -> Case {
        let d = pm.channels();
        let c = Constellation::qam(order, 1.0).unwrap();
        let schedule = PilotSchedule::wrapped_diagonal(d, n, oh, 1.0).unwrap();
        let mut data = StreamKey::new(seed, 0, 0, Role::Data).rng();
        let labels = Grid::from_fn(d, n, |_, _| data.random_range(0..order));
        let symbols = Grid::from_fn(d, n, |i, k| {
            if schedule.is_pilot(i, k) {
                schedule.value(i, k)
            } else {
                c.point(*labels.get(i, k))
            }
        });
        let phases =
            sample_phase_noise(pm, n, &mut StreamKey::new(seed, 0, 0, Role::Phase).rng()).unwrap();
        let noise = vec![noise_var; d];
        let received = apply_channel(
            &symbols,
            &phases,
            &noise,
            &mut StreamKey::new(seed, 0, 0, Role::Noise).rng(),
        )
        .unwrap();
        Case {
            c,
            labels,
            phases,
            received,
            schedule,
            q: build_covariance(pm),
            noise,
        }
    }

    impl Case {
        fn run(&self, opts: &CpeOptions) -> CpeResult {
            fg_eks(
                &self.received,
                &self.schedule,
                &self.c,
                &self.q,
                &self.noise,
                opts,
            )
            .unwrap()
        }

        fn symbol_errors(&self, res: &CpeResult) -> usize {
            let (d, n) = self.labels.shape();
            (0..d)
                .flat_map(|i| (0..n).map(move |k| (i, k)))
                .filter(|&(i, k)| {
                    res.decisions
                        .get(i, k)
                        .is_some_and(|x| x as usize != *self.labels.get(i, k))
                })
                .count()
        }
    }

    #[test]
    fn clean_channel_is_decoded_exactly() {
        let pm = PhaseModel::new(4, 1e-6, 1e-9, 1e-12).unwrap();
        let cs = case(64, &pm, 2000, 0.02, 1e-6, 1);
        let res = cs.run(&CpeOptions::default());
        assert_eq!(cs.symbol_errors(&res), 0);
        for i in 0..4 {
            for k in 0..2000 {
                assert_eq!(
                    res.decisions.get(i, k).is_none(),
                    cs.schedule.is_pilot(i, k)
                );
                let err = wrap(res.track.phase(i, k) - cs.phases.get(i, k));
                assert!(err.abs() < 0.01, "channel {i} time {k} error {err}");
            }
        }
    }

    #[test]
    fn smoothing_contracts_covariance() {
        let pm = PhaseModel::from_linewidth(6, 1e-4, 1e2, 1e3).unwrap();
        let cs = case(16, &pm, 600, 0.02, 0.02, 2);
        let res = cs.run(&CpeOptions::iterations(2));
        let d = 6;
        for k in 0..600 {
            let f = DMatrix::from_row_slice(d, d, res.track.forward_cov(k));
            let s = DMatrix::from_row_slice(d, d, res.track.smoothed_cov(k));
            assert!(min_eigenvalue(&s) > 0.0, "time {k}");
            let diff = &f - &s;
            let tol = 1e-9 * f.amax();
            assert!(min_eigenvalue(&diff) > -tol, "time {k}");
            for i in 0..d {
                assert!(s[(i, i)] <= f[(i, i)] * (1.0 + 1e-12));
            }
        }
        // The last smoothed estimate equals the forward one.
        assert_eq!(res.track.smoothed_mean(599), res.track.forward_mean(599));
    }

    #[test]
    fn channel_permutation_is_equivariant() {
        let pm = PhaseModel::from_linewidth(6, 5e-5, 1e3, 1e6).unwrap();
        let cs = case(16, &pm, 800, 0.01, 0.01, 3);
        let perm = [4, 2, 5, 0, 3, 1];
        let res = cs.run(&CpeOptions::default());

        let q = DMatrix::from_fn(6, 6, |a, b| cs.q[(perm[a], perm[b])]);
        let noise: Vec<f64> = perm.iter().map(|&p| cs.noise[p]).collect();
        let permuted = fg_eks(
            &cs.received.permute_rows(&perm),
            &cs.schedule.permute_channels(&perm),
            &cs.c,
            &q,
            &noise,
            &CpeOptions::default(),
        )
        .unwrap();
        for (j, &p) in perm.iter().enumerate() {
            assert_eq!(permuted.decisions.row(j), res.decisions.row(p));
            for k in 0..800 {
                let diff = permuted.track.phase(j, k) - res.track.phase(p, k);
                assert!(diff.abs() < 1e-9, "channel {p} time {k}: {diff}");
            }
        }
    }

    #[test]
    fn single_channel_matches_per_channel_run() {
        let c = Constellation::qam(16, 1.0).unwrap();
        let mut rng = StreamKey::new(4, 0, 0, Role::Noise).rng();
        let n = 500;
        let schedule = PilotSchedule::uniform_per_channel(1, n, 0.02, 1.0).unwrap();
        let received = Grid::from_fn(1, n, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let q = 3e-4;
        let opts = CpeOptions::iterations(3).with_soft_output(true);
        let a = fg_eks(
            &received,
            &schedule,
            &c,
            &DMatrix::from_element(1, 1, q),
            &[0.05],
            &opts,
        )
        .unwrap();
        let b = pc_cpe_with_variance(&received, &schedule, &c, q, &[0.05], &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn more_iterations_do_not_hurt_at_moderate_snr() {
        let pm = PhaseModel::from_linewidth(4, 1e-5, 1e3, 1e6).unwrap();
        let cs = case(64, &pm, 4000, 0.01, 0.004, 5);
        let one = cs.symbol_errors(&cs.run(&CpeOptions::iterations(1)));
        let two = cs.symbol_errors(&cs.run(&CpeOptions::iterations(2)));
        assert!(two <= one, "{two} > {one}");
    }

    #[test]
    fn soft_output_is_consistent() {
        let pm = PhaseModel::from_linewidth(2, 1e-5, 1e3, 1e6).unwrap();
        let cs = case(16, &pm, 1000, 0.02, 0.01, 6);
        let hard = cs.run(&CpeOptions::default());
        let soft = cs.run(&CpeOptions::default().with_soft_output(true));
        assert_eq!(hard.decisions, soft.decisions);
        assert_eq!(hard.track, soft.track);
        let llrs = soft.llrs.as_ref().unwrap();
        assert_eq!(llrs.len(), 2 * 1000 * 4);
        assert!(llrs.iter().all(|l| l.is_finite()));
        for i in 0..2 {
            for k in 0..1000 {
                let l = soft.llrs_at(i, k).unwrap();
                if cs.schedule.is_pilot(i, k) {
                    assert!(l.iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn posterior_is_normalized_and_peaks_at_nearest_point() {
        let c = Constellation::qam(64, 1.0).unwrap();
        let x = c.point(37);
        let r = x * Complex64::from_polar(1.0, 0.4) + Complex64::new(0.003, -0.002);
        let p = symbol_posterior(&c, r, 0.4, 1e-6, Complex64::new(0.0, 0.0), 1.5, 1e-3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 37);
        assert!(p[37] > 0.99);

        // With no phase information every rotation of a ring is equally likely.
        let p = symbol_posterior(&c, r, 0.0, 1e12, Complex64::new(0.0, 0.0), 1.5, 1e-3);
        let ring: Vec<usize> = (0..64)
            .filter(|&y| (c.point(y).norm_sqr() - x.norm_sqr()).abs() < 1e-12)
            .collect();
        assert!(ring.len() >= 4);
        for &y in &ring {
            assert!((p[y] - p[37]).abs() < 1e-6 * p[37], "{} vs {}", p[y], p[37]);
        }
    }

    #[test]
    fn invalid_inputs_are_reported() {
        let pm = PhaseModel::from_linewidth(2, 1e-5, 1e3, 1e6).unwrap();
        let cs = case(16, &pm, 100, 0.05, 0.01, 7);
        let opts = CpeOptions::default();
        let run = |sched: &PilotSchedule, q: &DMatrix<f64>, noise: &[f64], opts: &CpeOptions| {
            fg_eks(&cs.received, sched, &cs.c, q, noise, opts)
        };

        let mut mask = cs.schedule.mask().clone();
        *mask.get_mut(1, 0) = false;
        let holed =
            PilotSchedule::from_mask(cs.schedule.layout(), cs.schedule.spacing(), mask, 1.0);
        assert_eq!(
            run(&holed, &cs.q, &cs.noise, &opts).unwrap_err(),
            CpeError::MissingInitialPilot { channel: 1 }
        );
        assert_eq!(
            pc_cpe(&cs.received, &holed, &cs.c, &pm, &cs.noise, &opts).unwrap_err(),
            CpeError::MissingInitialPilot { channel: 1 }
        );
        let mut skew = cs.q.clone();
        skew[(0, 1)] += 1e-3;
        assert_eq!(
            run(&cs.schedule, &skew, &cs.noise, &opts).unwrap_err(),
            CpeError::InvalidCovariance
        );
        assert!(matches!(
            run(&cs.schedule, &cs.q, &[0.01, 0.0], &opts),
            Err(CpeError::InvalidNoiseVariance { channel: 1, .. })
        ));
        assert_eq!(
            run(&cs.schedule, &cs.q, &cs.noise, &CpeOptions::iterations(0)).unwrap_err(),
            CpeError::NoIterations
        );
        assert!(matches!(
            run(&cs.schedule, &DMatrix::zeros(3, 3), &cs.noise, &opts),
            Err(CpeError::Shape(_))
        ));
    }
}
