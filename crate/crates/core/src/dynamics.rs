//! Reduced multi-quadrotor/load equations with time-varying load mass and
//! inertia.
//!
//! Two right-hand sides are provided: [`full_derivatives`] for the coupled
//! model driven by the inertial thrust vectors `u_j`, and
//! [`closed_loop_derivatives`] for the simplified system obtained after the
//! feedback decomposition `u_j = mu_j + nu_j + (compensation)`. [`step`]
//! advances either one with a Lie-group Runge-Kutta scheme.

use nalgebra as na;
use thiserror::Error;

use crate::manifold::{
    dexp_inv_left, dexp_inv_right, exp_rotation, hat, integrate_attitude, integrate_sphere, Mat3,
    Rotation, UnitVector, Vec3,
};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Condition number above which the coupled acceleration system is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Largest accepted integration step, s.
pub const MAX_DT: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("coupled acceleration system is ill-conditioned (cond = {0:e})")]
    SingularMassMatrix(f64),
    #[error("load inertia is not invertible")]
    SingularInertia,
    #[error("input {0} violates the parallel/perpendicular split")]
    NonOrthogonalInput(usize),
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("step size {0} outside (0, {MAX_DT}]")]
    InvalidStep(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("controller failed: {0}")]
    Controller(String),
}

/// True load mass as a function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum MassProfile<T: Real> {
    Constant { mass: T },
    /// `m0 * exp(-lambda t)`
    Viscous { m0: T, lambda: T },
    /// `(sqrt(m0) - sqrt(lambda) t)^2`, held at zero after depletion.
    Orifice { m0: T, lambda: T },
}

impl<T: Real> MassProfile<T> {
    /// Returns `(m, dm/dt)`.
    pub fn eval(&self, t: T) -> (T, T) {
        match *self {
            MassProfile::Constant { mass } => (mass, T::zero()),
            MassProfile::Viscous { m0, lambda } => {
                let m = m0 * (-lambda * t).exp();
                (m, -lambda * m)
            }
            MassProfile::Orifice { m0, lambda } => {
                let r = m0.sqrt() - lambda.sqrt() * t;
                if r <= T::zero() {
                    (T::zero(), T::zero())
                } else {
                    (r * r, -lit::<T>(2.0) * lambda.sqrt() * r)
                }
            }
        }
    }
}

/// True load inertia about the load center of mass.
#[derive(Debug, Clone, PartialEq)]
pub enum InertiaProfile<T: Real> {
    Fixed(Mat3<T>),
    /// `reference * m / reference_mass`
    ScaledWithMass { reference: Mat3<T>, reference_mass: T },
    /// Box cavity `dims` centered at the body origin, uniform tank mass over
    /// the cavity and fluid settled at the bottom (upright hydrostatics).
    UprightBox { dims: Vec3<T>, tank_mass: T, density: T },
}

impl<T: Real> InertiaProfile<T> {
    /// Returns `(J, dJ/dt)` for the given mass and mass rate.
    pub fn eval(&self, m: T, mdot: T) -> (Mat3<T>, Mat3<T>) {
        match self {
            InertiaProfile::Fixed(j) => (*j, Mat3::zeros()),
            InertiaProfile::ScaledWithMass { reference, reference_mass } => {
                (reference * (m / *reference_mass), reference * (mdot / *reference_mass))
            }
            InertiaProfile::UprightBox { dims, tank_mass, density } => {
                upright_box_inertia(dims, *tank_mass, *density, m, mdot)
            }
        }
    }
}

fn upright_box_inertia<T: Real>(
    dims: &Vec3<T>,
    tank_mass: T,
    density: T,
    m: T,
    mdot: T,
) -> (Mat3<T>, Mat3<T>) {
    let (a, b, c) = (dims.x, dims.y, dims.z);
    let twelve: T = lit(12.0);
    let half: T = lit(0.5);
    let capacity = density * a * b * c;
    let mut fluid = m - tank_mass;
    let mut rate = mdot;
    if fluid <= T::zero() {
        fluid = T::zero();
        rate = T::zero();
    } else if fluid >= capacity {
        fluid = capacity;
        rate = T::zero();
    }
    let kappa = T::one() / (density * a * b);
    let hf = kappa * fluid;
    let zf = -c * half + hf * half;
    let total = tank_mass + fluid;
    // fluid block about its own centroid plus the two-body parallel-axis term
    // m_T f zf^2 / M
    let shift = tank_mass * fluid * zf * zf / total;
    let ixx = tank_mass * (b * b + c * c) / twelve + fluid * (b * b + hf * hf) / twelve + shift;
    let iyy = tank_mass * (a * a + c * c) / twelve + fluid * (a * a + hf * hf) / twelve + shift;
    let izz = (tank_mass + fluid) * (a * a + b * b) / twelve;
    let dshift =
        tank_mass * (zf * zf * tank_mass + fluid * zf * kappa * total) / (total * total);
    let three: T = lit(3.0);
    let dxx = (b * b + three * kappa * kappa * fluid * fluid) / twelve + dshift;
    let dyy = (a * a + three * kappa * kappa * fluid * fluid) / twelve + dshift;
    let dzz = (a * a + b * b) / twelve;
    (
        Mat3::from_diagonal(&Vec3::new(ixx, iyy, izz)),
        Mat3::from_diagonal(&Vec3::new(dxx, dyy, dzz)) * rate,
    )
}

/// True load mass and inertia schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSchedule<T: Real> {
    pub mass: MassProfile<T>,
    pub inertia: InertiaProfile<T>,
}

impl<T: Real> LoadSchedule<T> {
    pub fn mass(&self, t: T) -> (T, T) {
        self.mass.eval(t)
    }

    pub fn inertia(&self, t: T) -> (Mat3<T>, Mat3<T>) {
        let (m, mdot) = self.mass.eval(t);
        self.inertia.eval(m, mdot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams<T: Real> {
    pub quad_mass: T,
    pub quad_inertia: Mat3<T>,
    pub cable_length: T,
    /// Cable attachment offsets in the load body frame; one per quadrotor.
    pub attachments: Vec<Vec3<T>>,
    pub gravity: T,
    pub load: LoadSchedule<T>,
}

impl<T: Real> SystemParams<T> {
    pub fn n(&self) -> usize {
        self.attachments.len()
    }

    /// Attachment points on a square of side `side` in the load's `z = 0` plane.
    pub fn square_layout(side: T) -> Vec<Vec3<T>> {
        let h = side * lit(0.5);
        vec![
            Vec3::new(h, h, T::zero()),
            Vec3::new(-h, h, T::zero()),
            Vec3::new(-h, -h, T::zero()),
            Vec3::new(h, -h, T::zero()),
        ]
    }

    pub fn validate(&self, horizon: T) -> Result<(), DynamicsError> {
        let mut bad = Vec::new();
        if self.attachments.is_empty() {
            bad.push("at least one quadrotor is required".to_string());
        }
        if !(self.quad_mass > T::zero()) {
            bad.push("quadrotor mass must be positive".into());
        }
        if !(self.cable_length > T::zero()) {
            bad.push("cable length must be positive".into());
        }
        if !is_spd(&self.quad_inertia) {
            bad.push("quadrotor inertia must be symmetric positive-definite".into());
        }
        let samples = 50usize;
        for i in 0..=samples {
            let t = horizon * from_usize::<T>(i) / from_usize::<T>(samples);
            let (m, _) = self.load.mass(t);
            if !(m > T::zero()) {
                bad.push(format!("load mass not positive at t = {}", to_f64(t)));
                break;
            }
            if !is_spd(&self.load.inertia(t).0) {
                bad.push(format!("load inertia not SPD at t = {}", to_f64(t)));
                break;
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DynamicsError::InvalidParams(bad.join("; ")))
        }
    }
}

pub(crate) fn is_spd<T: Real>(m: &Mat3<T>) -> bool {
    let asym = (m - m.transpose()).norm();
    asym <= lit::<T>(1e-9) * (T::one() + m.norm()) && na::Cholesky::new(*m).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CableState<T: Real> {
    /// Unit vector from the quadrotor to its attachment point.
    pub q: UnitVector<T>,
    pub omega: Vec3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState<T: Real> {
    pub attitude: Rotation<T>,
    pub omega: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState<T: Real> {
    pub t: T,
    pub x_l: Vec3<T>,
    pub v_l: Vec3<T>,
    pub r_l: Rotation<T>,
    pub omega_l: Vec3<T>,
    pub cables: Vec<CableState<T>>,
    pub quads: Vec<QuadState<T>>,
}

impl<T: Real> SystemState<T> {
    /// Load at rest at `x`, vertical cables, level quadrotors.
    pub fn hover(n: usize, x: Vec3<T>) -> Self {
        Self {
            t: T::zero(),
            x_l: x,
            v_l: Vec3::zeros(),
            r_l: Rotation::identity(),
            omega_l: Vec3::zeros(),
            cables: vec![CableState { q: UnitVector::neg_e3(), omega: Vec3::zeros() }; n],
            quads: vec![QuadState { attitude: Rotation::identity(), omega: Vec3::zeros() }; n],
        }
    }

    /// `x_Qj = x_L + R_L r_j - L q_j`.
    pub fn quad_position(&self, j: usize, params: &SystemParams<T>) -> Vec3<T> {
        self.x_l + self.r_l.rotate(&params.attachments[j])
            - self.cables[j].q.as_vec() * params.cable_length
    }

    pub fn is_finite(&self) -> bool {
        let fin = |v: &Vec3<T>| v.iter().all(|x| x.is_finite());
        fin(&self.x_l)
            && fin(&self.v_l)
            && fin(&self.omega_l)
            && self.cables.iter().all(|c| fin(&c.omega) && fin(c.q.as_vec()))
            && self.quads.iter().all(|q| fin(&q.omega))
    }
}

/// Time derivative of a [`SystemState`]. Attitude rates are implied by the
/// body rates stored in the state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative<T: Real> {
    pub x_dot: Vec3<T>,
    pub v_dot: Vec3<T>,
    pub omega_l_dot: Vec3<T>,
    pub q_dot: Vec<Vec3<T>>,
    pub cable_omega_dot: Vec<Vec3<T>>,
    pub quad_omega_dot: Vec<Vec3<T>>,
}

/// Thrust vector `u_j` (inertial frame) and body moment `M_j` of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput<T: Real> {
    pub u: Vec3<T>,
    pub moment: Vec3<T>,
}

/// Split inputs of the simplified closed loop: `mu` parallel and `nu`
/// perpendicular to the cable direction, plus the vehicle moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CableInput<T: Real> {
    pub mu: Vec3<T>,
    pub nu: Vec3<T>,
    pub moment: Vec3<T>,
}

impl<T: Real> CableInput<T> {
    pub fn zero() -> Self {
        Self { mu: Vec3::zeros(), nu: Vec3::zeros(), moment: Vec3::zeros() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantInput<T: Real> {
    Full(Vec<ControlInput<T>>),
    ClosedLoop(Vec<CableInput<T>>),
}

/// External wind force on the load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Wind<T: Real> {
    None,
    /// `amplitude * [sin 0.4t, cos 0.6t, sin 0.8t]` N.
    Sinusoidal { amplitude: T },
}

impl<T: Real> Wind<T> {
    pub fn force(&self, t: T) -> Vec3<T> {
        match *self {
            Wind::None => Vec3::zeros(),
            Wind::Sinusoidal { amplitude } => wind_force(t, amplitude),
        }
    }
}

/// Smooth gust `0.3 [sin(0.4t), cos(0.6t), sin(0.8t)]` scaled by `amplitude / 0.3`.
pub fn wind_force<T: Real>(t: T, amplitude: T) -> Vec3<T> {
    Vec3::new(
        (lit::<T>(0.4) * t).sin(),
        (lit::<T>(0.6) * t).cos(),
        (lit::<T>(0.8) * t).sin(),
    ) * amplitude
}

/// Amplitudes of the deterministic sinusoidal sensor perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel<T: Real> {
    pub position: T,
    pub velocity: T,
    pub acceleration: T,
    pub attitude: T,
    pub angular_rate: T,
}

impl<T: Real> NoiseModel<T> {
    pub fn none() -> Self {
        let z = T::zero();
        Self { position: z, velocity: z, acceleration: z, attitude: z, angular_rate: z }
    }
}

// Frequencies (rad/s) and phases (rad) of the perturbation channels, one row
// per channel: position, velocity, acceleration, attitude, angular rate.
const NOISE_FREQ: [[f64; 3]; 5] = [
    [1.3, 1.7, 2.3],
    [2.9, 3.1, 3.7],
    [4.1, 4.3, 4.7],
    [1.1, 1.9, 2.7],
    [3.3, 3.9, 4.9],
];
const NOISE_PHASE: [[f64; 3]; 5] = [
    [0.1, 1.2, 2.1],
    [0.7, 2.5, 4.0],
    [1.9, 3.3, 5.1],
    [0.4, 2.2, 3.6],
    [1.5, 2.8, 0.9],
];

fn noise_channel<T: Real>(channel: usize, amplitude: T, t: T) -> Vec3<T> {
    let f = NOISE_FREQ[channel];
    let p = NOISE_PHASE[channel];
    Vec3::new(
        (lit::<T>(f[0]) * t + lit(p[0])).sin(),
        (lit::<T>(f[1]) * t + lit(p[1])).sin(),
        (lit::<T>(f[2]) * t + lit(p[2])).sin(),
    ) * amplitude
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance<T: Real> {
    pub wind: Wind<T>,
    pub noise: NoiseModel<T>,
}

impl<T: Real> Disturbance<T> {
    pub fn none() -> Self {
        Self { wind: Wind::None, noise: NoiseModel::none() }
    }
}

/// Load quantities available to the estimator and controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement<T: Real> {
    pub t: T,
    pub x_l: Vec3<T>,
    pub v_l: Vec3<T>,
    pub v_dot: Vec3<T>,
    pub r_l: Rotation<T>,
    pub omega_l: Vec3<T>,
}

/// Adds the configured perturbations to the true load state. `v_dot` is the
/// true acceleration from the most recent derivative evaluation.
pub fn measure<T: Real>(state: &SystemState<T>, dist: &Disturbance<T>, v_dot: &Vec3<T>) -> Measurement<T> {
    let t = state.t;
    let n = &dist.noise;
    let tilt = noise_channel(3, n.attitude, t);
    Measurement {
        t,
        x_l: state.x_l + noise_channel(0, n.position, t),
        v_l: state.v_l + noise_channel(1, n.velocity, t),
        v_dot: v_dot + noise_channel(2, n.acceleration, t),
        r_l: Rotation::orthonormalized(state.r_l.matrix() * exp_rotation(&tilt).matrix()),
        omega_l: state.omega_l + noise_channel(4, n.angular_rate, t),
    }
}

fn check_count<T>(inputs: &[T], n: usize) -> Result<(), DynamicsError> {
    if inputs.len() != n {
        return Err(DynamicsError::InputCount { expected: n, got: inputs.len() });
    }
    Ok(())
}

fn quad_omega_dot<T: Real>(
    state: &SystemState<T>,
    moments: impl Iterator<Item = Vec3<T>>,
    params: &SystemParams<T>,
) -> Result<Vec<Vec3<T>>, DynamicsError> {
    let jq = params.quad_inertia;
    let chol = na::Cholesky::new(jq)
        .ok_or_else(|| DynamicsError::InvalidParams("quadrotor inertia not SPD".into()))?;
    Ok(state
        .quads
        .iter()
        .zip(moments)
        .map(|(quad, m)| chol.solve(&((jq * quad.omega).cross(&quad.omega) + m)))
        .collect())
}

/// Right-hand side of the full reduced model.
///
/// The load and cable accelerations appear on both sides of the translational,
/// rotational and cable equations; they are resolved together from one
/// `(6 + 3N)`-dimensional linear system.
pub fn full_derivatives<T: Real>(
    state: &SystemState<T>,
    inputs: &[ControlInput<T>],
    params: &SystemParams<T>,
    dist: &Disturbance<T>,
) -> Result<StateDerivative<T>, DynamicsError> {
    let n = params.n();
    check_count(inputs, n)?;
    let t = state.t;
    let (m_l, mdot_l) = params.load.mass(t);
    let (j_l, jdot_l) = params.load.inertia(t);
    let mq = params.quad_mass;
    let len = params.cable_length;
    let g = params.gravity;
    let e3 = Vec3::z();
    let rl = *state.r_l.matrix();
    let rlt = rl.transpose();
    let om = state.omega_l;
    let om_hat2 = hat(&om) * hat(&om);

    let nt = from_usize::<T>(n);
    let m_eff = nt * mq + m_l;
    let mut j_eff = j_l;
    for r in &params.attachments {
        j_eff -= hat(r) * hat(r) * mq;
    }

    let dim = 6 + 3 * n;
    let mut a = na::DMatrix::<T>::zeros(dim, dim);
    let mut b = na::DVector::<T>::zeros(dim);

    // translational balance
    let mut rhs_v = -e3 * (m_eff * g) - state.v_l * mdot_l + dist.wind.force(t);
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Mat3::identity() * m_eff));
    // rotational balance
    let mut rhs_w = -(hat(&om) * (j_eff * om)) - jdot_l * om;
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_eff);

    for (j, ((&r, cable), input)) in params.attachments.iter().zip(&state.cables).zip(inputs).enumerate() {
        let rh = hat(&r);
        let q = *cable.q.as_vec();
        let qh = hat(&q);
        let w = cable.omega;
        let w2 = w.norm_squared();
        let u = input.u;
        let col = 6 + 3 * j;

        // m_eff vdot - mq R rhat Omegadot + mq L qhat wdot = ...
        let mut blk = a.fixed_view_mut::<3, 3>(0, 3).into_owned();
        blk -= rl * rh * mq;
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&blk);
        a.fixed_view_mut::<3, 3>(0, col).copy_from(&(qh * (mq * len)));
        rhs_v += u - rl * om_hat2 * r * mq - q * (mq * len * w2);

        // J_eff Omegadot + mq rhat R^T vdot + mq L rhat R^T qhat wdot = ...
        let rr = rh * rlt;
        let mut blk = a.fixed_view_mut::<3, 3>(3, 0).into_owned();
        blk += rr * mq;
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&blk);
        a.fixed_view_mut::<3, 3>(3, col).copy_from(&(rr * qh * (mq * len)));
        rhs_w += rr * (-e3 * (mq * g) - q * (mq * len * w2) + u);

        // wdot - (1/L) qhat vdot + (1/L) qhat R rhat Omegadot = (1/L) qhat (R Omega^2 r + g e3 - u/mq)
        let inv_l = T::one() / len;
        a.fixed_view_mut::<3, 3>(col, col).copy_from(&Mat3::identity());
        a.fixed_view_mut::<3, 3>(col, 0).copy_from(&(-qh * inv_l));
        a.fixed_view_mut::<3, 3>(col, 3).copy_from(&(qh * rl * rh * inv_l));
        let rhs_c = qh * (rl * om_hat2 * r + e3 * g - u / mq) * inv_l;
        b.fixed_rows_mut::<3>(col).copy_from(&rhs_c);
    }
    b.fixed_rows_mut::<3>(0).copy_from(&rhs_v);
    b.fixed_rows_mut::<3>(3).copy_from(&rhs_w);

    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > T::zero() { to_f64(smax / smin) } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(DynamicsError::SingularMassMatrix(cond));
    }
    let z = a.lu().solve(&b).ok_or(DynamicsError::SingularMassMatrix(f64::INFINITY))?;

    let v_dot = Vec3::new(z[0], z[1], z[2]);
    let omega_l_dot = Vec3::new(z[3], z[4], z[5]);
    let cable_omega_dot: Vec<_> =
        (0..n).map(|j| Vec3::new(z[6 + 3 * j], z[7 + 3 * j], z[8 + 3 * j])).collect();
    let q_dot = state.cables.iter().map(|c| c.omega.cross(c.q.as_vec())).collect();
    let quad_omega_dot = quad_omega_dot(state, inputs.iter().map(|i| i.moment), params)?;
    Ok(StateDerivative {
        x_dot: state.v_l,
        v_dot,
        omega_l_dot,
        q_dot,
        cable_omega_dot,
        quad_omega_dot,
    })
}

fn split_is_orthogonal<T: Real>(q: &Vec3<T>, inp: &CableInput<T>) -> bool {
    let tol: T = lit(1e-9);
    let floor: T = lit(1e-12);
    let nu_ok = q.dot(&inp.nu).abs() <= tol * inp.nu.norm() + floor;
    let mu_perp = inp.mu - q * q.dot(&inp.mu);
    let mu_ok = mu_perp.norm() <= tol * inp.mu.norm() + floor;
    nu_ok && mu_ok
}

/// Right-hand side of the simplified closed loop.
///
/// The cable equation carries the `1/(m_Q L)` factor that follows from
/// substituting the feedback law into the cable dynamics, so that this model
/// agrees exactly with [`full_derivatives`] driven by the same feedback.
pub fn closed_loop_derivatives<T: Real>(
    state: &SystemState<T>,
    inputs: &[CableInput<T>],
    params: &SystemParams<T>,
    dist: &Disturbance<T>,
) -> Result<StateDerivative<T>, DynamicsError> {
    let n = params.n();
    check_count(inputs, n)?;
    for (j, (c, inp)) in state.cables.iter().zip(inputs).enumerate() {
        if !split_is_orthogonal(c.q.as_vec(), inp) {
            return Err(DynamicsError::NonOrthogonalInput(j));
        }
    }
    let t = state.t;
    let (m_l, mdot_l) = params.load.mass(t);
    let (j_l, jdot_l) = params.load.inertia(t);
    let rlt = state.r_l.matrix().transpose();
    let om = state.omega_l;

    let mut force = dist.wind.force(t) - state.v_l * mdot_l;
    let mut torque = -(hat(&om) * (j_l * om)) - jdot_l * om;
    for (r, inp) in params.attachments.iter().zip(inputs) {
        force += inp.mu;
        torque += hat(r) * (rlt * inp.mu);
    }
    let v_dot = force / m_l - Vec3::z() * params.gravity;
    let chol = na::Cholesky::new(j_l).ok_or(DynamicsError::SingularInertia)?;
    let omega_l_dot = chol.solve(&torque);

    let k = T::one() / (params.quad_mass * params.cable_length);
    let cable_omega_dot = state
        .cables
        .iter()
        .zip(inputs)
        .map(|(c, inp)| -c.q.as_vec().cross(&inp.nu) * k)
        .collect();
    let q_dot = state.cables.iter().map(|c| c.omega.cross(c.q.as_vec())).collect();
    let quad_omega_dot = quad_omega_dot(state, inputs.iter().map(|i| i.moment), params)?;
    Ok(StateDerivative {
        x_dot: state.v_l,
        v_dot,
        omega_l_dot,
        q_dot,
        cable_omega_dot,
        quad_omega_dot,
    })
}

pub fn derivatives<T: Real>(
    state: &SystemState<T>,
    input: &PlantInput<T>,
    params: &SystemParams<T>,
    dist: &Disturbance<T>,
) -> Result<StateDerivative<T>, DynamicsError> {
    match input {
        PlantInput::Full(u) => full_derivatives(state, u, params, dist),
        PlantInput::ClosedLoop(c) => closed_loop_derivatives(state, c, params, dist),
    }
}

/// Lie-algebra increments that place a Runge-Kutta stage on the manifold.
struct LieIncrement<T: Real> {
    load: Vec3<T>,
    cables: Vec<Vec3<T>>,
    quads: Vec<Vec3<T>>,
}

impl<T: Real> LieIncrement<T> {
    fn zero(n: usize) -> Self {
        Self { load: Vec3::zeros(), cables: vec![Vec3::zeros(); n], quads: vec![Vec3::zeros(); n] }
    }
}

/// Algebra rates of one stage: `dexp^{-1}` applied to the stage body rates.
struct StageRates<T: Real> {
    deriv: StateDerivative<T>,
    load: Vec3<T>,
    cables: Vec<Vec3<T>>,
    quads: Vec<Vec3<T>>,
}

fn stage_state<T: Real>(
    base: &SystemState<T>,
    incr: &LieIncrement<T>,
    vec_incr: &[(T, &StateDerivative<T>)],
    dt_frac: T,
) -> SystemState<T> {
    let mut s = base.clone();
    s.t = base.t + dt_frac;
    for (h, d) in vec_incr {
        s.x_l += d.x_dot * *h;
        s.v_l += d.v_dot * *h;
        s.omega_l += d.omega_l_dot * *h;
        for j in 0..s.cables.len() {
            s.cables[j].omega += d.cable_omega_dot[j] * *h;
            s.quads[j].omega += d.quad_omega_dot[j] * *h;
        }
    }
    s.r_l = integrate_attitude(&base.r_l, &incr.load, T::one());
    for j in 0..s.cables.len() {
        s.cables[j].q = integrate_sphere(&base.cables[j].q, &incr.cables[j], T::one());
        s.quads[j].attitude = integrate_attitude(&base.quads[j].attitude, &incr.quads[j], T::one());
    }
    s
}

fn stage_rates<T: Real, F>(
    s: &SystemState<T>,
    incr: &LieIncrement<T>,
    controller: &mut F,
    params: &SystemParams<T>,
    dist: &Disturbance<T>,
) -> Result<StageRates<T>, DynamicsError>
where
    F: FnMut(&SystemState<T>) -> Result<PlantInput<T>, DynamicsError>,
{
    let input = controller(s)?;
    let deriv = derivatives(s, &input, params, dist)?;
    Ok(StageRates {
        load: dexp_inv_right(&incr.load, &s.omega_l),
        cables: s
            .cables
            .iter()
            .zip(&incr.cables)
            .map(|(c, th)| dexp_inv_left(th, &c.omega))
            .collect(),
        quads: s
            .quads
            .iter()
            .zip(&incr.quads)
            .map(|(q, th)| dexp_inv_right(th, &q.omega))
            .collect(),
        deriv,
    })
}

fn scaled_increment<T: Real>(terms: &[(T, &StageRates<T>)], n: usize) -> LieIncrement<T> {
    let mut inc = LieIncrement::zero(n);
    for (h, k) in terms {
        inc.load += k.load * *h;
        for j in 0..n {
            inc.cables[j] += k.cables[j] * *h;
            inc.quads[j] += k.quads[j] * *h;
        }
    }
    inc
}

/// Advances the state by `dt` with a four-stage Runge-Kutta-Munthe-Kaas
/// scheme: classical RK4 on the vector parts, exponential retraction on the
/// attitudes and cable directions.
///
/// `controller` is called at every stage with the stage state; return a
/// held input to model a zero-order hold.
pub fn step<T: Real, F>(
    state: &SystemState<T>,
    mut controller: F,
    params: &SystemParams<T>,
    dist: &Disturbance<T>,
    dt: T,
) -> Result<SystemState<T>, DynamicsError>
where
    F: FnMut(&SystemState<T>) -> Result<PlantInput<T>, DynamicsError>,
{
    if !(dt > T::zero() && dt <= lit(MAX_DT)) {
        return Err(DynamicsError::InvalidStep(to_f64(dt)));
    }
    let n = params.n();
    let half = dt * lit(0.5);
    let zero = LieIncrement::zero(n);

    let k1 = stage_rates(state, &zero, &mut controller, params, dist)?;
    let i2 = scaled_increment(&[(half, &k1)], n);
    let s2 = stage_state(state, &i2, &[(half, &k1.deriv)], half);
    let k2 = stage_rates(&s2, &i2, &mut controller, params, dist)?;
    let i3 = scaled_increment(&[(half, &k2)], n);
    let s3 = stage_state(state, &i3, &[(half, &k2.deriv)], half);
    let k3 = stage_rates(&s3, &i3, &mut controller, params, dist)?;
    let i4 = scaled_increment(&[(dt, &k3)], n);
    let s4 = stage_state(state, &i4, &[(dt, &k3.deriv)], dt);
    let k4 = stage_rates(&s4, &i4, &mut controller, params, dist)?;

    let sixth = dt / lit(6.0);
    let third = dt / lit(3.0);
    let fin = scaled_increment(&[(sixth, &k1), (third, &k2), (third, &k3), (sixth, &k4)], n);
    let mut next = stage_state(
        state,
        &fin,
        &[(sixth, &k1.deriv), (third, &k2.deriv), (third, &k3.deriv), (sixth, &k4.deriv)],
        dt,
    );
    // the exact flow keeps omega_j orthogonal to q_j
    for c in &mut next.cables {
        let q = *c.q.as_vec();
        c.omega -= q * q.dot(&c.omega);
    }
    Ok(next)
}
