//! Load reference trajectories: clamped cubic splines, splines in tension,
//! rest-to-rest minimum-jerk quintics, and an additive sinusoidal dither.
//!
//! A segment on `[t0, t0 + d]` is `x(s) = sum_i c_i phi_i(s)` in the local
//! time `s = t - t0`, with one coefficient vector per basis function. The
//! tension basis is `{1, s, (cosh ks - 1)/k^2, (sinh ks - ks)/k^3}`, which
//! tends to `{1, s, s^2/2, s^3/6}` as `k -> 0`. For long stiff segments it
//! switches to decaying exponentials anchored at either end.

use std::io::Write;

use nalgebra as na;
use thiserror::Error;

use crate::excitation::{constant_mass_pe, ExcitationError, KinematicSample};
use crate::manifold::Vec3;
use crate::mass_estimator::MassModel;
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Shortest accepted knot spacing, s.
pub const MIN_KNOT_SPACING: f64 = 1e-6;
/// Above this value of `k d` the exponential basis replaces the hyperbolic
/// one. The hyperbolic end-data map has condition number of order
/// `cosh(k d)`, the exponential one of order `k d`.
pub const EXP_BASIS_THRESHOLD: f64 = 2.0;
/// Below this value of `k s` the hyperbolic basis is summed as a series.
const SERIES_THRESHOLD: f64 = 0.5;
const SERIES_TERMS: i32 = 10;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("knot spacing {0} s below the minimum")]
    DegenerateKnots(f64),
    #[error("need at least two knots")]
    TooFewKnots,
    #[error("tension must be non-negative and finite, got {0}")]
    InvalidTension(f64),
    #[error("dither {what} {value} exceeds cap {cap}")]
    CapExceeded { what: &'static str, value: f64, cap: f64 },
    #[error("boundary data for a minimum-jerk segment must be at rest")]
    NotAtRest,
    #[error("load mass must be positive on the window")]
    NonPositiveMass,
    #[error(transparent)]
    Excitation(#[from] ExcitationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Knot times and positions with optional end velocities. Missing end
/// velocities give natural ends (zero acceleration).
#[derive(Debug, Clone, PartialEq)]
pub struct Waypoints<T: Real> {
    pub times: Vec<T>,
    pub points: Vec<Vec3<T>>,
    pub start_velocity: Option<Vec3<T>>,
    pub end_velocity: Option<Vec3<T>>,
}

impl<T: Real> Waypoints<T> {
    /// Waypoints that start and end at rest.
    pub fn rest_to_rest(times: Vec<T>, points: Vec<Vec3<T>>) -> Self {
        Self { times, points, start_velocity: Some(Vec3::zeros()), end_velocity: Some(Vec3::zeros()) }
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.times.len() < 2 || self.times.len() != self.points.len() {
            return Err(TrajectoryError::TooFewKnots);
        }
        for w in self.times.windows(2) {
            let d = w[1] - w[0];
            if !(d >= lit(MIN_KNOT_SPACING)) {
                return Err(TrajectoryError::DegenerateKnots(to_f64(d)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Basis<T: Real> {
    /// `phi_i = s^i`.
    Power,
    /// Hyperbolic tension basis with `k = sqrt(tau)`.
    Hyperbolic(T),
    /// `{1, s, exp(-k (d - s))/k^2, exp(-k s)/k^2}` on a segment of length `d`.
    Exponential(T),
}

/// `s^p / p!` differentiated `d` times.
fn monomial_scaled<T: Real>(s: T, p: i32, d: i32) -> T {
    if p < d {
        return T::zero();
    }
    let n = p - d;
    let mut fact = T::one();
    for i in 2..=n {
        fact *= lit::<T>(i as f64);
    }
    s.powi(n) / fact
}

fn power_basis<T: Real>(s: T, i: usize, d: i32) -> T {
    let i = i as i32;
    if i < d {
        return T::zero();
    }
    let mut c = T::one();
    for m in (i - d + 1)..=i {
        c *= lit::<T>(m as f64);
    }
    c * s.powi(i - d)
}

fn hyperbolic_basis<T: Real>(s: T, k: T, i: usize, d: i32) -> T {
    match i {
        0 => {
            if d == 0 {
                T::one()
            } else {
                T::zero()
            }
        }
        1 => power_basis(s, 1, d),
        _ => {
            let x = k * s;
            // phi_2 = sum k^(2n-2) s^(2n) / (2n)!, phi_3 the odd counterpart
            let shift = if i == 2 { 0 } else { 1 };
            if x.abs() < lit(SERIES_THRESHOLD) {
                (1..=SERIES_TERMS).fold(T::zero(), |acc, n| {
                    acc + k.powi(2 * n - 2) * monomial_scaled(s, 2 * n + shift, d)
                })
            } else {
                let (ch, sh) = (x.cosh(), x.sinh());
                // derivatives cycle through the closed forms
                match (i, d) {
                    (2, 0) => (ch - T::one()) / (k * k),
                    (2, 1) => sh / k,
                    (2, 2) => ch,
                    (2, 3) => k * sh,
                    (2, _) => k * k * ch,
                    (_, 0) => (sh - x) / (k * k * k),
                    (_, 1) => (ch - T::one()) / (k * k),
                    (_, 2) => sh / k,
                    (_, 3) => ch,
                    _ => k * sh,
                }
            }
        }
    }
}

fn exponential_basis<T: Real>(s: T, k: T, len: T, i: usize, d: i32) -> T {
    match i {
        0 | 1 => hyperbolic_basis(s, k, i, d),
        2 => k.powi(d - 2) * (-(k * (len - s))).exp(),
        _ => (-k).powi(d) / (k * k) * (-(k * s)).exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T: Real> {
    pub t0: T,
    pub duration: T,
    pub basis: Basis<T>,
    /// One coefficient vector per basis function.
    pub coeffs: Vec<Vec3<T>>,
}

impl<T: Real> Segment<T> {
    fn phi(&self, s: T, i: usize, d: i32) -> T {
        match self.basis {
            Basis::Power => power_basis(s, i, d),
            Basis::Hyperbolic(k) => hyperbolic_basis(s, k, i, d),
            Basis::Exponential(k) => exponential_basis(s, k, self.duration, i, d),
        }
    }

    /// `d`-th derivative at global time `t`.
    pub fn derivative(&self, t: T, d: i32) -> Vec3<T> {
        let s = t - self.t0;
        self.coeffs
            .iter()
            .enumerate()
            .fold(Vec3::zeros(), |acc, (i, c)| acc + c * self.phi(s, i, d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanKind<T: Real> {
    Cubic,
    Tension(T),
    Quintic,
}

/// Sinusoidal excitation added to every axis: axis `i` gets
/// `a_i * sum_f sin(w_f t + phase_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dither<T: Real> {
    pub amplitudes: Vec3<T>,
    pub frequencies: Vec<T>,
    pub phases: Vec3<T>,
}

impl<T: Real> Dither<T> {
    /// Phases spread by a third of a turn across axes.
    pub fn default_phases() -> Vec3<T> {
        let third = T::two_pi() / lit(3.0);
        Vec3::new(T::zero(), third, third * lit(2.0))
    }

    pub fn derivative(&self, t: T, d: i32) -> Vec3<T> {
        let quarter = T::frac_pi_2();
        let mut out = Vec3::zeros();
        for w in &self.frequencies {
            for axis in 0..3 {
                let arg = *w * t + self.phases[axis] + quarter * lit::<T>(d as f64);
                out[axis] += self.amplitudes[axis] * w.powi(d) * arg.sin();
            }
        }
        out
    }

    /// Upper bound on the dither acceleration norm.
    pub fn accel_bound(&self) -> T {
        self.amplitudes.norm() * self.frequencies.iter().fold(T::zero(), |a, w| a + *w * *w)
    }
}

/// Position, velocity, acceleration and jerk at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanSample<T: Real> {
    pub t: T,
    pub x: Vec3<T>,
    pub v: Vec3<T>,
    pub a: Vec3<T>,
    pub jerk: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPlan<T: Real> {
    pub kind: PlanKind<T>,
    pub segments: Vec<Segment<T>>,
    pub dithers: Vec<Dither<T>>,
}

impl<T: Real> TrajectoryPlan<T> {
    pub fn start_time(&self) -> T {
        self.segments[0].t0
    }

    pub fn end_time(&self) -> T {
        let last = &self.segments[self.segments.len() - 1];
        last.t0 + last.duration
    }

    fn segment_at(&self, t: T) -> &Segment<T> {
        let idx = self.segments.partition_point(|s| s.t0 <= t);
        &self.segments[idx.saturating_sub(1)]
    }

    /// `d`-th derivative at `t`. Outside the knot span the plan holds its
    /// end position at rest, plus any dither.
    pub fn derivative(&self, t: T, d: i32) -> Vec3<T> {
        let base = if t < self.start_time() {
            if d == 0 {
                self.segments[0].derivative(self.start_time(), 0)
            } else {
                Vec3::zeros()
            }
        } else if t > self.end_time() {
            if d == 0 {
                self.segments[self.segments.len() - 1].derivative(self.end_time(), 0)
            } else {
                Vec3::zeros()
            }
        } else {
            self.segment_at(t).derivative(t, d)
        };
        self.dithers.iter().fold(base, |acc, dz| acc + dz.derivative(t, d))
    }

    pub fn sample(&self, t: T) -> PlanSample<T> {
        PlanSample {
            t,
            x: self.derivative(t, 0),
            v: self.derivative(t, 1),
            a: self.derivative(t, 2),
            jerk: self.derivative(t, 3),
        }
    }

    /// Samples on `n` evenly spaced points covering the knot span.
    pub fn kinematics(&self, n: usize) -> Vec<KinematicSample<T>> {
        let (t0, t1) = (self.start_time(), self.end_time());
        (0..n)
            .map(|i| {
                let t = t0 + (t1 - t0) * from_usize::<T>(i) / from_usize::<T>(n - 1);
                let s = self.sample(t);
                KinematicSample::translational(t, s.x, s.v, s.a, s.jerk)
            })
            .collect()
    }

    /// CSV with columns `t, x, y, z, vx, vy, vz, ax, ay, az, jx, jy, jz`.
    pub fn write_csv<W: Write>(&self, out: W, dt: T) -> Result<(), TrajectoryError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az", "jx", "jy", "jz"])?;
        let (t0, t1) = (self.start_time(), self.end_time());
        let n = (to_f64((t1 - t0) / dt).round() as usize).max(1);
        for i in 0..=n {
            let t = t0 + (t1 - t0) * from_usize::<T>(i) / from_usize::<T>(n);
            let s = self.sample(t);
            let mut rec = vec![format!("{:.6}", to_f64(t))];
            for v in [s.x, s.v, s.a, s.jerk] {
                rec.extend(v.iter().map(|x| format!("{:.10e}", to_f64(*x))));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn basis_for<T: Real>(k: T, d: T) -> Basis<T> {
    if k * d > lit(EXP_BASIS_THRESHOLD) {
        Basis::Exponential(k)
    } else {
        Basis::Hyperbolic(k)
    }
}

/// Template segment used to fit coefficients from end data.
struct Fitter<T: Real> {
    proto: Segment<T>,
    /// Maps `(x0, v0, x1, v1)` to the four coefficients.
    inverse: na::Matrix4<T>,
}

impl<T: Real> Fitter<T> {
    fn new(t0: T, duration: T, basis: Basis<T>) -> Self {
        let proto = Segment { t0, duration, basis, coeffs: vec![Vec3::zeros(); 4] };
        let mut m = na::Matrix4::zeros();
        for i in 0..4 {
            m[(0, i)] = proto.phi(T::zero(), i, 0);
            m[(1, i)] = proto.phi(T::zero(), i, 1);
            m[(2, i)] = proto.phi(duration, i, 0);
            m[(3, i)] = proto.phi(duration, i, 1);
        }
        let inverse = m.try_inverse().expect("end-data map of a positive-length segment is invertible");
        Self { proto, inverse }
    }

    fn fit(&self, x0: Vec3<T>, v0: Vec3<T>, x1: Vec3<T>, v1: Vec3<T>) -> Segment<T> {
        let data = [x0, v0, x1, v1];
        let coeffs = (0..4)
            .map(|i| (0..4).fold(Vec3::zeros(), |acc, j| acc + data[j] * self.inverse[(i, j)]))
            .collect();
        Segment { coeffs, ..self.proto.clone() }
    }

    /// Weights of `(x0, v0, x1, v1)` in the second derivative at local time `s`.
    fn accel_weights(&self, s: T) -> [T; 4] {
        let mut out = [T::zero(); 4];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..4).fold(T::zero(), |acc, i| acc + self.proto.phi(s, i, 2) * self.inverse[(i, j)]);
        }
        out
    }
}

/// Fits segments through the knots, choosing interior velocities (and any
/// free end velocity) so that accelerations are continuous.
fn fit_spline<T: Real>(wp: &Waypoints<T>, basis: impl Fn(T) -> Basis<T>) -> Result<Vec<Segment<T>>, TrajectoryError> {
    wp.validate()?;
    let n = wp.times.len();
    let fitters: Vec<Fitter<T>> = wp
        .times
        .windows(2)
        .map(|w| Fitter::new(w[0], w[1] - w[0], basis(w[1] - w[0])))
        .collect();
    // unknown velocity indices
    let mut unknown = vec![None; n];
    let mut count = 0;
    for (j, u) in unknown.iter_mut().enumerate() {
        let fixed = (j == 0 && wp.start_velocity.is_some()) || (j == n - 1 && wp.end_velocity.is_some());
        if !fixed {
            *u = Some(count);
            count += 1;
        }
    }
    let mut vel: Vec<Vec3<T>> = vec![Vec3::zeros(); n];
    if let Some(v) = wp.start_velocity {
        vel[0] = v;
    }
    if let Some(v) = wp.end_velocity {
        vel[n - 1] = v;
    }
    if count > 0 {
        let mut a = na::DMatrix::<T>::zeros(count, count);
        let mut b = na::DMatrix::<T>::zeros(count, 3);
        let mut row = 0;
        // each unknown contributes one equation at its knot
        for j in 0..n {
            if unknown[j].is_none() {
                continue;
            }
            // equation: accel_left(j) - accel_right(j) = 0, with natural ends
            let mut terms: Vec<(usize, T, bool)> = Vec::new(); // (knot, weight, is_velocity)
            if j > 0 {
                let w = fitters[j - 1].accel_weights(wp.times[j] - wp.times[j - 1]);
                terms.extend([(j - 1, w[0], false), (j - 1, w[1], true), (j, w[2], false), (j, w[3], true)]);
            }
            if j + 1 < n {
                let w = fitters[j].accel_weights(T::zero());
                terms.extend([(j, -w[0], false), (j, -w[1], true), (j + 1, -w[2], false), (j + 1, -w[3], true)]);
            }
            for (knot, wgt, is_vel) in terms {
                if is_vel {
                    if let Some(col) = unknown[knot] {
                        a[(row, col)] += wgt;
                    } else {
                        for ax in 0..3 {
                            b[(row, ax)] -= wgt * vel[knot][ax];
                        }
                    }
                } else {
                    for ax in 0..3 {
                        b[(row, ax)] -= wgt * wp.points[knot][ax];
                    }
                }
            }
            row += 1;
        }
        let sol = a.lu().solve(&b).ok_or(TrajectoryError::DegenerateKnots(0.0))?;
        for j in 0..n {
            if let Some(col) = unknown[j] {
                vel[j] = Vec3::new(sol[(col, 0)], sol[(col, 1)], sol[(col, 2)]);
            }
        }
    }
    Ok(fitters
        .iter()
        .enumerate()
        .map(|(i, f)| f.fit(wp.points[i], vel[i], wp.points[i + 1], vel[i + 1]))
        .collect())
}

/// Cubic spline with continuous acceleration through the knots.
pub fn cubic_spline<T: Real>(wp: &Waypoints<T>) -> Result<TrajectoryPlan<T>, TrajectoryError> {
    let segments = fit_spline(wp, |_| Basis::Power)?;
    Ok(TrajectoryPlan { kind: PlanKind::Cubic, segments, dithers: Vec::new() })
}

/// Spline in tension: each segment solves `x'''' = tau x''`.
pub fn tension_spline<T: Real>(wp: &Waypoints<T>, tau: T) -> Result<TrajectoryPlan<T>, TrajectoryError> {
    if !(tau >= T::zero()) || !tau.is_finite() {
        return Err(TrajectoryError::InvalidTension(to_f64(tau)));
    }
    let k = tau.sqrt();
    let segments = fit_spline(wp, |d| basis_for(k, d))?;
    Ok(TrajectoryPlan { kind: PlanKind::Tension(tau), segments, dithers: Vec::new() })
}

/// Chain of rest-to-rest minimum-jerk quintics through the knots.
pub fn min_jerk_quintic<T: Real>(wp: &Waypoints<T>) -> Result<TrajectoryPlan<T>, TrajectoryError> {
    wp.validate()?;
    let at_rest = |v: &Option<Vec3<T>>| v.is_none_or(|v| v.norm() == T::zero());
    if !at_rest(&wp.start_velocity) || !at_rest(&wp.end_velocity) {
        return Err(TrajectoryError::NotAtRest);
    }
    let segments = wp
        .times
        .windows(2)
        .zip(wp.points.windows(2))
        .map(|(t, x)| {
            let d = t[1] - t[0];
            let dx = x[1] - x[0];
            let z = Vec3::zeros();
            Segment {
                t0: t[0],
                duration: d,
                basis: Basis::Power,
                coeffs: vec![
                    x[0],
                    z,
                    z,
                    dx * (lit::<T>(10.0) / d.powi(3)),
                    dx * (lit::<T>(-15.0) / d.powi(4)),
                    dx * (lit::<T>(6.0) / d.powi(5)),
                ],
            }
        })
        .collect();
    Ok(TrajectoryPlan { kind: PlanKind::Quintic, segments, dithers: Vec::new() })
}

/// Tension matched to a mass schedule over a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensionFit<T: Real> {
    pub tau: T,
    /// Window mean of `alpha = m'/m`.
    pub mean_alpha: T,
    /// `sup |alpha'| * T`, the scale of the first-order approximation error.
    pub approx_error: T,
}

pub fn tension_from_mass_rate<T: Real>(
    model: &MassModel<T>,
    theta: &[T],
    t0: T,
    t1: T,
) -> Result<TensionFit<T>, TrajectoryError> {
    let n = 400usize;
    let span = t1 - t0;
    let mut sum = T::zero();
    let mut sup = T::zero();
    for i in 0..=n {
        let t = t0 + span * from_usize::<T>(i) / from_usize::<T>(n);
        let m = model.mass(theta, t);
        if !(m > T::zero()) {
            return Err(TrajectoryError::NonPositiveMass);
        }
        let mr = model.mass_rate(theta, t);
        let alpha = mr / m;
        let alpha_dot = (model.mass_accel(theta, t) * m - mr * mr) / (m * m);
        let w: T = if i == 0 || i == n { lit(0.5) } else { T::one() };
        sum += alpha * w;
        sup = sup.max(alpha_dot.abs());
    }
    let mean_alpha = sum / from_usize::<T>(n);
    Ok(TensionFit { tau: mean_alpha * mean_alpha, mean_alpha, approx_error: sup * span })
}

/// Limits checked by [`add_dither`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitherCaps<T: Real> {
    /// Largest admissible dither frequency, rad/s.
    pub max_frequency: T,
    /// Largest admissible acceleration norm of the dithered plan, m/s^2.
    pub max_accel: T,
    /// Window length for the excitation integral, s.
    pub pe_window: T,
    pub gravity: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitherReport<T: Real> {
    /// Smallest windowed `int |a + g e3|^2` before and after the dither.
    pub pe_before: T,
    pub pe_after: T,
    pub peak_accel: T,
}

fn peak_accel<T: Real>(plan: &TrajectoryPlan<T>, n: usize) -> T {
    plan.kinematics(n).iter().fold(T::zero(), |m, s| m.max(s.a.norm()))
}

fn pe_grid<T: Real>(plan: &TrajectoryPlan<T>, window: T) -> usize {
    let span = plan.end_time() - plan.start_time();
    let per_window = 200.0;
    ((to_f64(span / window) * per_window).ceil() as usize).max(201)
}

/// Adds a dither and reports the constant-mass excitation integral before
/// and after.
pub fn add_dither<T: Real>(
    plan: &TrajectoryPlan<T>,
    dither: Dither<T>,
    caps: &DitherCaps<T>,
) -> Result<(TrajectoryPlan<T>, DitherReport<T>), TrajectoryError> {
    if let Some(w) = dither.frequencies.iter().copied().find(|w| w.abs() > caps.max_frequency) {
        return Err(TrajectoryError::CapExceeded {
            what: "frequency",
            value: to_f64(w),
            cap: to_f64(caps.max_frequency),
        });
    }
    let n = pe_grid(plan, caps.pe_window);
    let fastest = dither.frequencies.iter().fold(T::zero(), |m, w| m.max(w.abs()));
    let span = plan.end_time() - plan.start_time();
    // resolve the fastest oscillation with at least 20 points per period
    let n_acc = n.max((to_f64(span * fastest / T::two_pi()) * 20.0).ceil() as usize);
    let mut out = plan.clone();
    out.dithers.push(dither);
    let peak = peak_accel(&out, n_acc);
    if peak > caps.max_accel {
        return Err(TrajectoryError::CapExceeded {
            what: "acceleration",
            value: to_f64(peak),
            cap: to_f64(caps.max_accel),
        });
    }
    let before = constant_mass_pe(&plan.kinematics(n), T::zero(), caps.pe_window, caps.gravity)?;
    let after = constant_mass_pe(&out.kinematics(n), T::zero(), caps.pe_window, caps.gravity)?;
    Ok((out, DitherReport { pe_before: before.min_integral, pe_after: after.min_integral, peak_accel: peak }))
}
