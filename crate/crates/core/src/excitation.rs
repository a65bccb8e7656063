//! Windowed excitation and hydrostatic-validity checks on sampled
//! trajectories.
//!
//! Every check works on a uniform time grid and integrates with the
//! trapezoidal rule. Windows of length `T` start every `T / 10`; a verdict
//! over a trajectory is the worst case over its windows.

use std::io::Write;

use nalgebra as na;
use thiserror::Error;

use crate::manifold::Vec3;
use crate::mass_estimator::MassModel;
use crate::scalar::{from_usize, lit, to_f64, Real};

pub use crate::mass_estimator::lambda_min_sym2;

/// Fewest grid points accepted in one window.
pub const MIN_WINDOW_POINTS: usize = 100;
/// Default bound on the non-gravitational acceleration ratio.
pub const DEFAULT_EPS_MAX: f64 = 0.1;
/// Default bound on the translational jerk, m/s^3.
pub const DEFAULT_JERK_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ExcitationError {
    #[error("window of {window} s holds {points} grid points, need at least {MIN_WINDOW_POINTS}")]
    TooFewSamples { window: f64, points: usize },
    #[error("window length must be positive and no longer than the trajectory")]
    InvalidWindow,
    #[error("sample grid is not uniform or not increasing")]
    NonUniformGrid,
    #[error("invalid gradient bounds: {0}")]
    InvalidBounds(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Model-gradient bounds: `a_lo <= |grad m|_K <= a_hi`,
/// `b_lo <= |grad M|_K <= b_hi`, `|<grad m, grad M>_K| <= c_hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitationBounds<T: Real> {
    pub a_lo: T,
    pub a_hi: T,
    pub b_lo: T,
    pub b_hi: T,
    pub c_hi: T,
}

impl<T: Real> ExcitationBounds<T> {
    pub fn new(a_lo: T, a_hi: T, b_lo: T, b_hi: T, c_hi: T) -> Result<Self, ExcitationError> {
        let ok = a_lo > T::zero() && a_lo <= a_hi && b_lo > T::zero() && b_lo <= b_hi && c_hi > T::zero();
        if !ok {
            return Err(ExcitationError::InvalidBounds(format!(
                "need 0 < a_lo <= a_hi, 0 < b_lo <= b_hi, c_hi > 0; got a = [{}, {}], b = [{}, {}], c = {}",
                to_f64(a_lo),
                to_f64(a_hi),
                to_f64(b_lo),
                to_f64(b_hi),
                to_f64(c_hi)
            )));
        }
        Ok(Self { a_lo, a_hi, b_lo, b_hi, c_hi })
    }

    /// Samples the gradients over the parameter box `[lo, hi]` and the time
    /// interval `[t0, t1]`, `n` points per axis.
    pub fn from_model_box(
        model: &MassModel<T>,
        gains: &[T],
        lo: &[T],
        hi: &[T],
        t0: T,
        t1: T,
        n: usize,
    ) -> Result<Self, ExcitationError> {
        let k = model.dim();
        if lo.len() != k || hi.len() != k || gains.len() != k || n < 2 {
            return Err(ExcitationError::InvalidBounds("box dimension mismatch".into()));
        }
        let mut a = (T::max_value().unwrap_or(lit(f64::MAX)), T::zero());
        let mut b = a;
        let mut c = T::zero();
        let total = n.pow(k as u32 + 1);
        let frac = |i: usize| from_usize::<T>(i) / from_usize::<T>(n - 1);
        for idx in 0..total {
            let mut rest = idx;
            let t = t0 + (t1 - t0) * frac(rest % n);
            rest /= n;
            let theta: Vec<T> = (0..k)
                .map(|i| {
                    let f = frac(rest % n);
                    rest /= n;
                    lo[i] + (hi[i] - lo[i]) * f
                })
                .collect();
            let gm = model.grad_mass(&theta, t);
            let gr = model.grad_mass_rate(&theta, t);
            let ip = |x: &[T], y: &[T]| {
                x.iter().zip(y).zip(gains).fold(T::zero(), |s, ((p, q), g)| s + *p * *g * *q)
            };
            let na_ = ip(&gm, &gm).sqrt();
            let nb = ip(&gr, &gr).sqrt();
            a = (a.0.min(na_), a.1.max(na_));
            b = (b.0.min(nb), b.1.max(nb));
            c = c.max(ip(&gm, &gr).abs());
        }
        Self::new(a.0, a.1, b.0, b.1, c.max(lit(1e-300)))
    }
}

/// Load kinematics at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSample<T: Real> {
    pub t: T,
    pub x: Vec3<T>,
    pub v: Vec3<T>,
    pub a: Vec3<T>,
    pub jerk: Vec3<T>,
    pub omega: Vec3<T>,
    pub omega_dot: Vec3<T>,
}

impl<T: Real> KinematicSample<T> {
    pub fn translational(t: T, x: Vec3<T>, v: Vec3<T>, a: Vec3<T>, jerk: Vec3<T>) -> Self {
        Self { t, x, v, a, jerk, omega: Vec3::zeros(), omega_dot: Vec3::zeros() }
    }

    pub fn w(&self, gravity: T) -> Vec3<T> {
        self.a + Vec3::z() * gravity
    }

    /// `|v|^2 / 2 + g z`.
    pub fn energy(&self, gravity: T) -> T {
        self.v.norm_squared() * lit(0.5) + gravity * self.x.z
    }
}

/// Error-system matrix at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymSample<T: Real> {
    pub t: T,
    pub s: na::Matrix2<T>,
}

fn trapz<T: Real>(t: &[T], f: &[T]) -> T {
    let half: T = lit(0.5);
    t.windows(2)
        .zip(f.windows(2))
        .fold(T::zero(), |acc, (tt, ff)| acc + (tt[1] - tt[0]) * (ff[0] + ff[1]) * half)
}

/// Window index ranges `[start, end]` (inclusive) of length `window`,
/// sliding by `window / 10`.
pub fn window_ranges<T: Real>(times: &[T], window: T) -> Result<Vec<(usize, usize)>, ExcitationError> {
    if times.len() < 2 {
        return Err(ExcitationError::TooFewSamples { window: to_f64(window), points: times.len() });
    }
    let dt = times[1] - times[0];
    if !(dt > T::zero()) {
        return Err(ExcitationError::NonUniformGrid);
    }
    let tol = dt * lit(1e-6) + lit(1e-12);
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > tol * lit(10.0) {
            return Err(ExcitationError::NonUniformGrid);
        }
    }
    let span = times[times.len() - 1] - times[0];
    if !(window > T::zero()) || window > span + tol {
        return Err(ExcitationError::InvalidWindow);
    }
    let steps = to_f64(window / dt).round() as usize;
    if steps + 1 < MIN_WINDOW_POINTS {
        return Err(ExcitationError::TooFewSamples { window: to_f64(window), points: steps + 1 });
    }
    let stride = (steps / 10).max(1);
    let mut out = Vec::new();
    let mut s = 0;
    while s + steps < times.len() {
        out.push((s, s + steps));
        s += stride;
    }
    Ok(out)
}

/// Integrals of the error-system matrix over one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymIntegrals<T: Real> {
    pub t_start: T,
    pub t_end: T,
    pub int_lmin: T,
    pub int_lmin_pos: T,
    pub int_s11: T,
    pub int_s22: T,
    pub int_det: T,
}

fn sym_integrals<T: Real>(samples: &[SymSample<T>]) -> SymIntegrals<T> {
    let t: Vec<T> = samples.iter().map(|s| s.t).collect();
    let col = |f: &dyn Fn(&na::Matrix2<T>) -> T| -> T {
        let v: Vec<T> = samples.iter().map(|s| f(&s.s)).collect();
        trapz(&t, &v)
    };
    SymIntegrals {
        t_start: t[0],
        t_end: t[t.len() - 1],
        int_lmin: col(&|s| lambda_min_sym2(s)),
        int_lmin_pos: col(&|s| lambda_min_sym2(s).max(T::zero())),
        int_s11: col(&|s| s[(0, 0)]),
        int_s22: col(&|s| s[(1, 1)]),
        int_det: col(&|s| s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeVerdict<T: Real> {
    pub integrals: SymIntegrals<T>,
    /// `int lambda_min >= mu`.
    pub excitation: bool,
    /// `int lambda_min^+ <= cap`.
    pub spike: bool,
}

impl<T: Real> PeVerdict<T> {
    pub fn pass(&self) -> bool {
        self.excitation && self.spike
    }
}

fn check_points<T: Real>(t: &[T]) -> Result<(), ExcitationError> {
    if t.len() < MIN_WINDOW_POINTS {
        let span = if t.len() > 1 { to_f64(t[t.len() - 1] - t[0]) } else { 0.0 };
        return Err(ExcitationError::TooFewSamples { window: span, points: t.len() });
    }
    Ok(())
}

/// Both window hypotheses over the span of `samples`.
pub fn pe_window_check<T: Real>(samples: &[SymSample<T>], mu: T, cap: T) -> Result<PeVerdict<T>, ExcitationError> {
    check_points(&samples.iter().map(|s| s.t).collect::<Vec<_>>())?;
    let integrals = sym_integrals(samples);
    Ok(PeVerdict {
        integrals,
        excitation: integrals.int_lmin >= mu,
        spike: integrals.int_lmin_pos <= cap,
    })
}

/// Strict positivity of the windowed `S11`, `S22` and `det S` integrals.
pub fn necessary_elementwise_check<T: Real>(samples: &[SymSample<T>]) -> Result<(SymIntegrals<T>, [bool; 3]), ExcitationError> {
    check_points(&samples.iter().map(|s| s.t).collect::<Vec<_>>())?;
    let i = sym_integrals(samples);
    Ok((i, [i.int_s11 > T::zero(), i.int_s22 > T::zero(), i.int_det > T::zero()]))
}

/// Worst-case margins of the windowed diagonal conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagVerdict<T: Real> {
    /// min over windows of `int (a_lo^2 |w|^2 - c |w.v|)`.
    pub worst_mass: T,
    /// min over windows of `int (b_lo^2 |v|^2 - c |w.v|)`.
    pub worst_rate: T,
    pub window_start: T,
}

impl<T: Real> DiagVerdict<T> {
    pub fn pass(&self) -> bool {
        self.worst_mass > T::zero() && self.worst_rate > T::zero()
    }
}

fn diag_margins<T: Real>(k: &[KinematicSample<T>], b: &ExcitationBounds<T>, g: T) -> (T, T) {
    let t: Vec<T> = k.iter().map(|s| s.t).collect();
    let f1: Vec<T> = k
        .iter()
        .map(|s| {
            let w = s.w(g);
            b.a_lo * b.a_lo * w.norm_squared() - b.c_hi * w.dot(&s.v).abs()
        })
        .collect();
    let f2: Vec<T> = k
        .iter()
        .map(|s| b.b_lo * b.b_lo * s.v.norm_squared() - b.c_hi * s.w(g).dot(&s.v).abs())
        .collect();
    (trapz(&t, &f1), trapz(&t, &f2))
}

pub fn diag_sufficient_check<T: Real>(
    kin: &[KinematicSample<T>],
    bounds: &ExcitationBounds<T>,
    window: T,
    gravity: T,
) -> Result<DiagVerdict<T>, ExcitationError> {
    let times: Vec<T> = kin.iter().map(|s| s.t).collect();
    let mut out: Option<DiagVerdict<T>> = None;
    for (s, e) in window_ranges(&times, window)? {
        let (m1, m2) = diag_margins(&kin[s..=e], bounds, gravity);
        let worse = match &out {
            None => true,
            Some(v) => m1.min(m2) < v.worst_mass.min(v.worst_rate),
        };
        let cur = out.get_or_insert(DiagVerdict { worst_mass: m1, worst_rate: m2, window_start: times[s] });
        if worse {
            cur.window_start = times[s];
        }
        cur.worst_mass = cur.worst_mass.min(m1);
        cur.worst_rate = cur.worst_rate.min(m2);
    }
    Ok(out.expect("window_ranges returns at least one window"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftVerdict<T: Real> {
    /// min over windows of `threshold - |H(t + T) - H(t)|`.
    pub worst_margin: T,
    pub window_start: T,
    pub drift: T,
    pub threshold: T,
}

impl<T: Real> DriftVerdict<T> {
    pub fn pass(&self) -> bool {
        self.worst_margin > T::zero()
    }
}

fn drift_window<T: Real>(k: &[KinematicSample<T>], b: &ExcitationBounds<T>, g: T) -> (T, T) {
    let t: Vec<T> = k.iter().map(|s| s.t).collect();
    let ww: Vec<T> = k.iter().map(|s| s.w(g).norm_squared()).collect();
    let vv: Vec<T> = k.iter().map(|s| s.v.norm_squared()).collect();
    let drift = (k[k.len() - 1].energy(g) - k[0].energy(g)).abs();
    let thr = (b.a_lo * b.a_lo * trapz(&t, &ww)).min(b.b_lo * b.b_lo * trapz(&t, &vv)) / b.c_hi;
    (drift, thr)
}

pub fn energy_drift_check<T: Real>(
    kin: &[KinematicSample<T>],
    bounds: &ExcitationBounds<T>,
    window: T,
    gravity: T,
) -> Result<DriftVerdict<T>, ExcitationError> {
    let times: Vec<T> = kin.iter().map(|s| s.t).collect();
    let mut out: Option<DriftVerdict<T>> = None;
    for (s, e) in window_ranges(&times, window)? {
        let (drift, threshold) = drift_window(&kin[s..=e], bounds, gravity);
        let margin = threshold - drift;
        if out.as_ref().is_none_or(|v| margin < v.worst_margin) {
            out = Some(DriftVerdict { worst_margin: margin, window_start: times[s], drift, threshold });
        }
    }
    Ok(out.expect("window_ranges returns at least one window"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPeVerdict<T: Real> {
    /// Smallest windowed `int |a + g e3|^2`.
    pub min_integral: T,
    pub window_start: T,
    pub pass: bool,
}

pub fn constant_mass_pe<T: Real>(
    kin: &[KinematicSample<T>],
    mu: T,
    window: T,
    gravity: T,
) -> Result<ConstantPeVerdict<T>, ExcitationError> {
    let times: Vec<T> = kin.iter().map(|s| s.t).collect();
    let f: Vec<T> = kin.iter().map(|s| s.w(gravity).norm_squared()).collect();
    let mut best: Option<(T, T)> = None;
    for (s, e) in window_ranges(&times, window)? {
        let v = trapz(&times[s..=e], &f[s..=e]);
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, times[s]));
        }
    }
    let (min_integral, window_start) = best.expect("window_ranges returns at least one window");
    Ok(ConstantPeVerdict { min_integral, window_start, pass: min_integral >= mu })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydrostaticThresholds<T: Real> {
    pub eps_max: T,
    pub jerk_max: T,
    pub tank_radius: T,
    pub gravity: T,
}

impl<T: Real> HydrostaticThresholds<T> {
    pub fn with_radius(tank_radius: T, gravity: T) -> Self {
        Self { eps_max: lit(DEFAULT_EPS_MAX), jerk_max: lit(DEFAULT_JERK_MAX), tank_radius, gravity }
    }
}

/// Ratio of non-gravitational to gravitational acceleration at the tank wall.
pub fn hydrostatic_ratio<T: Real>(s: &KinematicSample<T>, th: &HydrostaticThresholds<T>) -> T {
    (s.a.norm() + s.omega_dot.norm() * th.tank_radius + s.omega.norm_squared() * th.tank_radius) / th.gravity
}

#[derive(Debug, Clone, PartialEq)]
pub struct HydrostaticReport<T: Real> {
    pub eps_peak: T,
    pub eps_peak_t: T,
    pub jerk_peak: T,
    pub jerk_peak_t: T,
    /// Start times of windows where either threshold is exceeded.
    pub flagged_windows: Vec<T>,
}

impl<T: Real> HydrostaticReport<T> {
    pub fn pass(&self) -> bool {
        self.flagged_windows.is_empty()
    }
}

/// Peaks of the hydrostatic ratio and jerk. With `window = None` the whole
/// trajectory counts as one window.
pub fn hydrostatic_validity<T: Real>(
    kin: &[KinematicSample<T>],
    th: &HydrostaticThresholds<T>,
    window: Option<T>,
) -> Result<HydrostaticReport<T>, ExcitationError> {
    if kin.is_empty() {
        return Err(ExcitationError::TooFewSamples { window: 0.0, points: 0 });
    }
    let eps: Vec<T> = kin.iter().map(|s| hydrostatic_ratio(s, th)).collect();
    let jerk: Vec<T> = kin.iter().map(|s| s.jerk.norm()).collect();
    let argmax = |v: &[T]| {
        v.iter()
            .enumerate()
            .fold((0, v[0]), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
    };
    let (ei, ep) = argmax(&eps);
    let (ji, jp) = argmax(&jerk);
    let times: Vec<T> = kin.iter().map(|s| s.t).collect();
    let ranges = match window {
        Some(w) => window_ranges(&times, w)?,
        None => vec![(0, kin.len() - 1)],
    };
    let flagged_windows = ranges
        .into_iter()
        .filter(|(s, e)| {
            let em = eps[*s..=*e].iter().fold(T::zero(), |a, b| a.max(*b));
            let jm = jerk[*s..=*e].iter().fold(T::zero(), |a, b| a.max(*b));
            em > th.eps_max || jm > th.jerk_max
        })
        .map(|(s, _)| times[s])
        .collect();
    Ok(HydrostaticReport { eps_peak: ep, eps_peak_t: times[ei], jerk_peak: jp, jerk_peak_t: times[ji], flagged_windows })
}

/// Settings for [`window_reports`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig<T: Real> {
    pub window: T,
    pub mu: T,
    pub spike_cap: T,
    pub bounds: Option<ExcitationBounds<T>>,
    pub hydro: HydrostaticThresholds<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::NotApplicable => "na",
        }
    }
}

/// All window diagnostics for one window start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowReport<T: Real> {
    pub t_start: T,
    pub t_end: T,
    pub int_lmin: T,
    pub int_lmin_pos: T,
    pub int_s11: T,
    pub int_s22: T,
    pub int_det: T,
    pub h_drift: T,
    pub eps_max: T,
    pub jerk_max: T,
    pub pe: Verdict,
    pub spike: Verdict,
    pub necessary: Verdict,
    pub diag: Verdict,
    pub drift: Verdict,
    pub hydrostatic: Verdict,
}

/// Evaluates every window of a recorded run. `sym` and `kin` must share
/// the same time grid.
pub fn window_reports<T: Real>(
    sym: &[SymSample<T>],
    kin: &[KinematicSample<T>],
    cfg: &WindowConfig<T>,
) -> Result<Vec<WindowReport<T>>, ExcitationError> {
    if sym.len() != kin.len() {
        return Err(ExcitationError::NonUniformGrid);
    }
    let times: Vec<T> = kin.iter().map(|s| s.t).collect();
    let g = cfg.hydro.gravity;
    let mut out = Vec::new();
    for (s, e) in window_ranges(&times, cfg.window)? {
        let si = sym_integrals(&sym[s..=e]);
        let k = &kin[s..=e];
        let drift = (k[k.len() - 1].energy(g) - k[0].energy(g)).abs();
        let eps_max = k.iter().map(|x| hydrostatic_ratio(x, &cfg.hydro)).fold(T::zero(), |a, b| a.max(b));
        let jerk_max = k.iter().map(|x| x.jerk.norm()).fold(T::zero(), |a, b| a.max(b));
        let (diag, drift_v) = match &cfg.bounds {
            Some(b) => {
                let (m1, m2) = diag_margins(k, b, g);
                let (d, thr) = drift_window(k, b, g);
                (Verdict::from_bool(m1 > T::zero() && m2 > T::zero()), Verdict::from_bool(d < thr))
            }
            None => (Verdict::NotApplicable, Verdict::NotApplicable),
        };
        out.push(WindowReport {
            t_start: si.t_start,
            t_end: si.t_end,
            int_lmin: si.int_lmin,
            int_lmin_pos: si.int_lmin_pos,
            int_s11: si.int_s11,
            int_s22: si.int_s22,
            int_det: si.int_det,
            h_drift: drift,
            eps_max,
            jerk_max,
            pe: Verdict::from_bool(si.int_lmin >= cfg.mu),
            spike: Verdict::from_bool(si.int_lmin_pos <= cfg.spike_cap),
            necessary: Verdict::from_bool(
                si.int_s11 > T::zero() && si.int_s22 > T::zero() && si.int_det > T::zero(),
            ),
            diag,
            drift: drift_v,
            hydrostatic: Verdict::from_bool(eps_max <= cfg.hydro.eps_max && jerk_max <= cfg.hydro.jerk_max),
        });
    }
    Ok(out)
}

pub const WINDOW_REPORT_HEADER: [&str; 16] = [
    "t_start", "int_lmin", "int_lmin_pos", "S11_int", "S22_int", "det_int", "H_drift", "eps_max",
    "jerk_max", "pe", "spike", "necessary", "diag", "drift", "hydrostatic", "t_end",
];

pub fn write_window_reports<T: Real, W: Write>(reports: &[WindowReport<T>], out: W) -> Result<(), ExcitationError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WINDOW_REPORT_HEADER)?;
    for r in reports {
        let num = |x: T| format!("{:.10e}", to_f64(x));
        w.write_record([
            num(r.t_start),
            num(r.int_lmin),
            num(r.int_lmin_pos),
            num(r.int_s11),
            num(r.int_s22),
            num(r.int_det),
            num(r.h_drift),
            num(r.eps_max),
            num(r.jerk_max),
            r.pe.as_str().into(),
            r.spike.as_str().into(),
            r.necessary.as_str().into(),
            r.diag.as_str().into(),
            r.drift.as_str().into(),
            r.hydrostatic.as_str().into(),
            num(r.t_end),
        ])?;
    }
    w.flush()?;
    Ok(())
}
