//! Feedback for the load, the cables and the vehicle attitudes.
//!
//! A desired load wrench is allocated over the cables with a minimum-norm
//! pseudoinverse. Each cable force is split into the part `mu_j` parallel to
//! the current cable direction, which drives the load, and a perpendicular
//! `nu_j` that steers the cable toward the allocated direction. The thrust
//! vector `u_j` adds the compensation terms that cancel the load/cable
//! coupling, and a geometric PD loop turns it into thrust and moment.

use nalgebra as na;
use thiserror::Error;

use crate::dynamics::{CableInput, CableState, ControlInput, Measurement, QuadState, SystemParams};
use crate::manifold::{attitude_error, hat, Mat3, Rotation, UnitVector, Vec3};
use crate::scalar::{lit, Real};

/// Default force magnitude below which a cable or thrust direction is undefined, N.
pub const DEFAULT_EPS_FORCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("allocation map has rank {0} < 6")]
    RankDeficientAllocation(usize),
    #[error("cable tension vector too small to define a direction")]
    DegenerateTension,
    #[error("thrust vector too small to define a direction")]
    DegenerateThrust,
}

/// Feedback gains. Load translational gains are per unit mass, attitude
/// gains per unit inertia.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains<T: Real> {
    pub kx: T,
    pub kv: T,
    pub kr: T,
    pub komega: T,
    pub kq: T,
    pub kw: T,
    pub kr_quad: T,
    pub komega_quad: T,
}

impl<T: Real> Default for Gains<T> {
    fn default() -> Self {
        Self {
            kx: lit(2.0),
            kv: lit(3.0),
            kr: lit(4.0),
            komega: lit(4.0),
            kq: lit(16.0),
            kw: lit(8.0),
            kr_quad: lit(40.0),
            komega_quad: lit(12.0),
        }
    }
}

impl<T: Real> Gains<T> {
    pub fn all_positive(&self) -> bool {
        [self.kx, self.kv, self.kr, self.komega, self.kq, self.kw, self.kr_quad, self.komega_quad]
            .iter()
            .all(|g| *g > T::zero())
    }
}

/// Desired load motion at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadReference<T: Real> {
    pub x: Vec3<T>,
    pub v: Vec3<T>,
    pub a: Vec3<T>,
    pub attitude: Rotation<T>,
    pub omega: Vec3<T>,
}

impl<T: Real> LoadReference<T> {
    pub fn hold(x: Vec3<T>) -> Self {
        Self {
            x,
            v: Vec3::zeros(),
            a: Vec3::zeros(),
            attitude: Rotation::identity(),
            omega: Vec3::zeros(),
        }
    }
}

/// Estimated load parameters used by the feedforward terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadEstimate<T: Real> {
    pub mass: T,
    pub mass_rate: T,
    pub inertia: Mat3<T>,
    pub inertia_rate: Mat3<T>,
}

/// Force (inertial frame) and moment (load body frame) on the load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench<T: Real> {
    pub force: Vec3<T>,
    pub moment: Vec3<T>,
}

/// Inverts the closed-loop load equations for a PD-stabilized reference.
pub fn desired_wrench<T: Real>(
    meas: &Measurement<T>,
    reference: &LoadReference<T>,
    est: &LoadEstimate<T>,
    gravity: T,
    gains: &Gains<T>,
) -> Wrench<T> {
    let ex = meas.x_l - reference.x;
    let ev = meas.v_l - reference.v;
    let force = (reference.a + Vec3::z() * gravity - ex * gains.kx - ev * gains.kv) * est.mass
        + meas.v_l * est.mass_rate;
    let er = attitude_error(&meas.r_l, &reference.attitude);
    let eo = meas.omega_l - meas.r_l.matrix().transpose() * reference.attitude.rotate(&reference.omega);
    let om = meas.omega_l;
    let moment = hat(&om) * (est.inertia * om)
        + est.inertia_rate * om
        + est.inertia * (-er * gains.kr - eo * gains.komega);
    Wrench { force, moment }
}

/// The 6 x 3N map from cable forces to `[sum F_j; sum hat(r_j) R^T F_j]`.
pub fn allocation_matrix<T: Real>(r_l: &Rotation<T>, attachments: &[Vec3<T>]) -> na::DMatrix<T> {
    let n = attachments.len();
    let mut p = na::DMatrix::zeros(6, 3 * n);
    let rt = r_l.matrix().transpose();
    for (j, r) in attachments.iter().enumerate() {
        p.fixed_view_mut::<3, 3>(0, 3 * j).copy_from(&Mat3::identity());
        p.fixed_view_mut::<3, 3>(3, 3 * j).copy_from(&(hat(r) * rt));
    }
    p
}

/// Minimum-norm cable forces reproducing the wrench.
pub fn allocate_cable_forces<T: Real>(
    wrench: &Wrench<T>,
    r_l: &Rotation<T>,
    attachments: &[Vec3<T>],
) -> Result<Vec<Vec3<T>>, ControlError> {
    let p = allocation_matrix(r_l, attachments);
    let svd = p.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * lit(1e-9);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < 6 {
        return Err(ControlError::RankDeficientAllocation(rank));
    }
    let mut w = na::DVector::zeros(6);
    w.fixed_rows_mut::<3>(0).copy_from(&wrench.force);
    w.fixed_rows_mut::<3>(3).copy_from(&wrench.moment);
    let f = svd.solve(&w, tol).map_err(|_| ControlError::RankDeficientAllocation(rank))?;
    Ok((0..attachments.len())
        .map(|j| Vec3::new(f[3 * j], f[3 * j + 1], f[3 * j + 2]))
        .collect())
}

/// Projects the allocated force on the current cable direction and returns
/// it with the cable direction that would carry the force exactly.
pub fn cable_setpoint_and_mu<T: Real>(
    force: &Vec3<T>,
    q: &UnitVector<T>,
    eps: T,
) -> Result<(Vec3<T>, UnitVector<T>), ControlError> {
    let n = force.norm();
    if !(n > eps) {
        return Err(ControlError::DegenerateTension);
    }
    let qv = q.as_vec();
    let mu = qv * qv.dot(force);
    let q_des = UnitVector::new(-force / n).map_err(|_| ControlError::DegenerateTension)?;
    Ok((mu, q_des))
}

/// Perpendicular input steering `q` to `q_des`: with it the cable obeys
/// `omega' = kq (q x q_des) - kw omega_perp`.
pub fn cable_feedback_nu<T: Real>(
    q: &UnitVector<T>,
    omega: &Vec3<T>,
    q_des: &UnitVector<T>,
    quad_mass: T,
    cable_length: T,
    gains: &Gains<T>,
) -> Vec3<T> {
    let qv = q.as_vec();
    let omega_perp = omega - qv * qv.dot(omega);
    let accel = qv.cross(q_des.as_vec()) * gains.kq - omega_perp * gains.kw;
    let nu = qv.cross(&accel) * (quad_mass * cable_length);
    nu - qv * qv.dot(&nu)
}

/// Thrust vector of vehicle `j` from the split inputs and the measured load
/// motion. `omega_l_dot` is the current estimate of the load angular
/// acceleration.
#[allow(clippy::too_many_arguments)]
pub fn assemble_u<T: Real>(
    mu: &Vec3<T>,
    nu: &Vec3<T>,
    v_dot: &Vec3<T>,
    r_l: &Rotation<T>,
    omega_l: &Vec3<T>,
    omega_l_dot: &Vec3<T>,
    cable: &CableState<T>,
    attachment: &Vec3<T>,
    params: &SystemParams<T>,
) -> Vec3<T> {
    let mq = params.quad_mass;
    let oh = hat(omega_l);
    let accel_attach = v_dot + r_l.rotate(&((oh * oh + hat(omega_l_dot)) * attachment));
    mu + nu
        + (accel_attach + Vec3::z() * params.gravity) * mq
        + cable.q.as_vec() * (mq * params.cable_length * cable.omega.norm_squared())
}

/// Attitude whose third axis is `b3`, heading from world `e1` (or `e2` when
/// `b3` is nearly parallel to `e1`).
pub fn desired_quad_attitude<T: Real>(b3: &UnitVector<T>) -> Rotation<T> {
    let b3 = *b3.as_vec();
    let mut b1 = Vec3::x() - b3 * b3.x;
    if b1.norm() < lit(1e-6) {
        b1 = Vec3::y() - b3 * b3.y;
    }
    let b1 = b1.normalize();
    let b2 = b3.cross(&b1);
    Rotation::orthonormalized(Mat3::from_columns(&[b1, b2, b3]))
}

/// Geometric PD on `SO(3)`: returns collective thrust and body moment.
/// Gains are per unit inertia.
pub fn quad_attitude_control<T: Real>(
    u: &Vec3<T>,
    quad: &QuadState<T>,
    quad_inertia: &Mat3<T>,
    gains: &Gains<T>,
    eps: T,
) -> Result<(T, Vec3<T>), ControlError> {
    let n = u.norm();
    if !(n > eps) {
        return Err(ControlError::DegenerateThrust);
    }
    let b3 = UnitVector::new(u / n).map_err(|_| ControlError::DegenerateThrust)?;
    let rd = desired_quad_attitude(&b3);
    let er = attitude_error(&quad.attitude, &rd);
    let om = quad.omega;
    let thrust = u.dot(&quad.attitude.e3());
    let moment = quad_inertia * (-er * gains.kr_quad - om * gains.komega_quad)
        + om.cross(&(quad_inertia * om));
    Ok((thrust, moment))
}

/// Everything the controller produced at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput<T: Real> {
    pub wrench: Wrench<T>,
    pub cable_forces: Vec<Vec3<T>>,
    pub cable: Vec<CableInput<T>>,
    pub full: Vec<ControlInput<T>>,
    pub thrust: Vec<T>,
}

impl<T: Real> ControlOutput<T> {
    pub fn thrust_sum(&self) -> Vec3<T> {
        self.cable.iter().fold(Vec3::zeros(), |acc, c| acc + c.mu)
    }
}

/// Controller state owned by one simulation: held cable setpoints and the
/// lagged load angular acceleration.
#[derive(Debug, Clone)]
pub struct Controller<T: Real> {
    pub gains: Gains<T>,
    pub eps_force: T,
    pub max_thrust: Option<T>,
    held_setpoints: Vec<UnitVector<T>>,
    omega_l_dot: Vec3<T>,
}

impl<T: Real> Controller<T> {
    pub fn new(gains: Gains<T>, n: usize) -> Self {
        Self {
            gains,
            eps_force: lit(DEFAULT_EPS_FORCE),
            max_thrust: None,
            held_setpoints: vec![UnitVector::neg_e3(); n],
            omega_l_dot: Vec3::zeros(),
        }
    }

    /// Load angular acceleration used by the next [`Controller::compute`].
    pub fn set_omega_l_dot(&mut self, omega_l_dot: Vec3<T>) {
        self.omega_l_dot = omega_l_dot;
    }

    pub fn omega_l_dot(&self) -> Vec3<T> {
        self.omega_l_dot
    }

    pub fn held_setpoints(&self) -> &[UnitVector<T>] {
        &self.held_setpoints
    }

    pub fn compute(
        &mut self,
        meas: &Measurement<T>,
        cables: &[CableState<T>],
        quads: &[QuadState<T>],
        reference: &LoadReference<T>,
        est: &LoadEstimate<T>,
        params: &SystemParams<T>,
    ) -> Result<ControlOutput<T>, ControlError> {
        let wrench = desired_wrench(meas, reference, est, params.gravity, &self.gains);
        let cable_forces = allocate_cable_forces(&wrench, &meas.r_l, &params.attachments)?;
        let mut cable = Vec::with_capacity(cables.len());
        let mut full = Vec::with_capacity(cables.len());
        let mut thrust = Vec::with_capacity(cables.len());
        for (j, c) in cables.iter().enumerate() {
            let mu = match cable_setpoint_and_mu(&cable_forces[j], &c.q, self.eps_force) {
                Ok((mu, q_des)) => {
                    self.held_setpoints[j] = q_des;
                    mu
                }
                Err(ControlError::DegenerateTension) => Vec3::zeros(),
                Err(e) => return Err(e),
            };
            let nu = cable_feedback_nu(
                &c.q,
                &c.omega,
                &self.held_setpoints[j],
                params.quad_mass,
                params.cable_length,
                &self.gains,
            );
            let u = assemble_u(
                &mu,
                &nu,
                &meas.v_dot,
                &meas.r_l,
                &meas.omega_l,
                &self.omega_l_dot,
                c,
                &params.attachments[j],
                params,
            );
            let (mut f, moment) =
                quad_attitude_control(&u, &quads[j], &params.quad_inertia, &self.gains, self.eps_force)?;
            if let Some(max) = self.max_thrust {
                f = f.min(max);
            }
            cable.push(CableInput { mu, nu, moment });
            full.push(ControlInput { u, moment });
            thrust.push(f);
        }
        Ok(ControlOutput { wrench, cable_forces, cable, full, thrust })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{InertiaProfile, LoadSchedule, MassProfile};
    use crate::manifold::{exp_rotation, integrate_attitude, integrate_sphere};

    fn meas_at_rest() -> Measurement<f64> {
        Measurement {
            t: 0.0,
            x_l: Vec3::zeros(),
            v_l: Vec3::zeros(),
            v_dot: Vec3::zeros(),
            r_l: Rotation::identity(),
            omega_l: Vec3::zeros(),
        }
    }

    fn est() -> LoadEstimate<f64> {
        LoadEstimate {
            mass: 2.0,
            mass_rate: 0.0,
            inertia: Mat3::from_diagonal(&Vec3::new(0.1, 0.2, 0.3)),
            inertia_rate: Mat3::from_diagonal(&Vec3::new(0.01, 0.0, -0.02)),
        }
    }

    fn params() -> SystemParams<f64> {
        SystemParams {
            quad_mass: 0.5,
            quad_inertia: Mat3::from_diagonal(&Vec3::new(0.01, 0.01, 0.02)),
            cable_length: 1.2,
            attachments: SystemParams::square_layout(0.8),
            gravity: 9.81,
            load: LoadSchedule {
                mass: MassProfile::Constant { mass: 2.0 },
                inertia: InertiaProfile::Fixed(Mat3::identity()),
            },
        }
    }

    #[test]
    fn equilibrium_feedforward() {
        let mut m = meas_at_rest();
        m.omega_l = Vec3::new(0.2, -0.1, 0.4);
        let mut r = LoadReference::hold(Vec3::zeros());
        r.omega = m.omega_l;
        let e = est();
        let w = desired_wrench(&m, &r, &e, 9.81, &Gains::default());
        assert!((w.force - Vec3::z() * (2.0 * 9.81)).norm() < 1e-12);
        let ff = hat(&m.omega_l) * e.inertia * m.omega_l + e.inertia_rate * m.omega_l;
        assert!((w.moment - ff).norm() < 1e-12);
    }

    #[test]
    fn position_error_is_linear() {
        let mut m = meas_at_rest();
        m.x_l = Vec3::new(0.3, 0.0, 0.0);
        let g = Gains::default();
        let w = desired_wrench(&m, &LoadReference::hold(Vec3::zeros()), &est(), 9.81, &g);
        let extra = w.force - Vec3::z() * (2.0 * 9.81);
        assert!((extra - Vec3::new(-2.0 * 2.0 * 0.3, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(attitude_error(&m.r_l, &m.r_l), Vec3::zeros());
    }

    #[test]
    fn symmetric_allocation() {
        let layout = SystemParams::square_layout(0.8);
        let w = Wrench { force: Vec3::z() * 40.0, moment: Vec3::zeros() };
        let f = allocate_cable_forces(&w, &Rotation::identity(), &layout).unwrap();
        for fj in &f {
            assert!((fj - Vec3::z() * 10.0).norm() < 1e-12);
        }
        let zero = Wrench { force: Vec3::zeros(), moment: Vec3::zeros() };
        let f = allocate_cable_forces(&zero, &Rotation::identity(), &layout).unwrap();
        assert!(f.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn collinear_layout_is_rank_deficient() {
        let layout = vec![Vec3::new(0.5, 0.0, 0.0), Vec3::new(-0.5, 0.0, 0.0)];
        let w = Wrench { force: Vec3::zeros(), moment: Vec3::x() };
        assert!(matches!(
            allocate_cable_forces(&w, &Rotation::identity(), &layout),
            Err(ControlError::RankDeficientAllocation(5))
        ));
    }

    #[test]
    fn allocation_reconstructs_wrench() {
        let layout = SystemParams::square_layout(0.8);
        let r = exp_rotation(&Vec3::new(0.1, -0.3, 0.7));
        let w = Wrench { force: Vec3::new(1.0, -2.0, 30.0), moment: Vec3::new(0.4, 0.1, -0.3) };
        let f = allocate_cable_forces(&w, &r, &layout).unwrap();
        let p = allocation_matrix(&r, &layout);
        let flat = na::DVector::from_iterator(12, f.iter().flat_map(|v| v.iter().copied()));
        let back = p * flat;
        let target = na::DVector::from_vec(vec![1.0, -2.0, 30.0, 0.4, 0.1, -0.3]);
        assert!((back - &target).norm() <= 1e-9 * target.norm());
    }

    #[test]
    fn cable_projection_cases() {
        let q = UnitVector::new(Vec3::new(0.1, 0.0, -1.0)).unwrap();
        let f = -q.as_vec() * 7.0;
        let (mu, qd) = cable_setpoint_and_mu(&f, &q, 1e-6).unwrap();
        assert!((mu - f).norm() < 1e-12);
        assert!((qd.as_vec() - q.as_vec()).norm() < 1e-12);
        let perp = q.as_vec().cross(&Vec3::y());
        let (mu, _) = cable_setpoint_and_mu(&perp, &q, 1e-6).unwrap();
        assert!(mu.norm() < 1e-15);
        assert_eq!(
            cable_setpoint_and_mu(&Vec3::zeros(), &q, 1e-6),
            Err(ControlError::DegenerateTension)
        );
    }

    #[test]
    fn nu_vanishes_at_setpoint_and_is_perpendicular() {
        let g = Gains::default();
        let q = UnitVector::<f64>::new(Vec3::new(0.2, -0.1, -0.9)).unwrap();
        assert_eq!(cable_feedback_nu(&q, &Vec3::zeros(), &q, 0.5, 1.0, &g), Vec3::zeros());
        let qd = UnitVector::new(Vec3::new(-0.3, 0.2, -1.0)).unwrap();
        let nu = cable_feedback_nu(&q, &Vec3::new(0.3, 0.5, -0.2), &qd, 0.5, 1.0, &g);
        assert!(q.as_vec().dot(&nu).abs() < 1e-12);
    }

    #[test]
    fn cable_loop_linearization_is_stable() {
        // tangent-plane linearization: eta'' + kw eta' + kq eta = 0
        let g = Gains::<f64>::default();
        let a = na::Matrix2::new(0.0, 1.0, -g.kq, -g.kw);
        let eig = a.complex_eigenvalues();
        assert!(eig.iter().all(|l| l.re < 0.0));
        // and the nonlinear cable dynamics converge from a small deviation
        let qd = UnitVector::new(Vec3::new(0.1, 0.05, -1.0)).unwrap();
        let mut q = UnitVector::neg_e3();
        let mut w = Vec3::zeros();
        let (mq, len) = (0.5, 1.3);
        let dt = 1e-3;
        for _ in 0..3000 {
            let nu = cable_feedback_nu(&q, &w, &qd, mq, len, &g);
            let wdot = -q.as_vec().cross(&nu) / (mq * len);
            q = integrate_sphere(&q, &w, dt);
            w += wdot * dt;
            w -= q.as_vec() * q.as_vec().dot(&w);
        }
        assert!((q.as_vec() - qd.as_vec()).norm() < 1e-3);
    }

    #[test]
    fn static_hover_thrust() {
        let p = params();
        let m = meas_at_rest();
        let cable = CableState { q: UnitVector::neg_e3(), omega: Vec3::zeros() };
        let u = assemble_u(
            &Vec3::zeros(),
            &Vec3::zeros(),
            &m.v_dot,
            &m.r_l,
            &m.omega_l,
            &Vec3::zeros(),
            &cable,
            &p.attachments[0],
            &p,
        );
        assert!((u - Vec3::z() * (0.5 * 9.81)).norm() < 1e-12);
        let spin = CableState { q: UnitVector::neg_e3(), omega: Vec3::new(0.3, 0.0, 0.0) };
        let spin2 = CableState { omega: spin.omega * 2.0, ..spin };
        let base = |c: &CableState<f64>| {
            assemble_u(&Vec3::zeros(), &Vec3::zeros(), &m.v_dot, &m.r_l, &m.omega_l, &Vec3::zeros(), c, &p.attachments[0], &p)
                - Vec3::z() * (0.5 * 9.81)
        };
        assert!((base(&spin2) - base(&spin) * 4.0).norm() < 1e-12);
    }

    #[test]
    fn aligned_vehicle_needs_no_moment() {
        let g = Gains::default();
        let quad = QuadState { attitude: Rotation::identity(), omega: Vec3::zeros() };
        let u = Vec3::z() * 6.0;
        let (f, m): (f64, _) = quad_attitude_control(&u, &quad, &Mat3::identity(), &g, 1e-6).unwrap();
        assert!((f - 6.0).abs() < 1e-12);
        assert!(m.norm() < 1e-12);
        let tilted = QuadState { attitude: exp_rotation(&Vec3::new(0.4, 0.0, 0.0)), omega: Vec3::zeros() };
        let (f, _) = quad_attitude_control(&u, &tilted, &Mat3::identity(), &g, 1e-6).unwrap();
        assert!(f <= 6.0);
        assert!(matches!(
            quad_attitude_control(&Vec3::zeros(), &quad, &Mat3::identity(), &g, 1e-6),
            Err(ControlError::DegenerateThrust)
        ));
    }

    #[test]
    fn attitude_loop_reduces_tilt_monotonically() {
        let g = Gains::default();
        let jq = Mat3::from_diagonal(&Vec3::new(0.01, 0.012, 0.02));
        let u = Vec3::z() * 5.0;
        let mut quad = QuadState {
            attitude: exp_rotation(&Vec3::new(30f64.to_radians(), 0.0, 0.0)),
            omega: Vec3::zeros(),
        };
        let angle = |q: &QuadState<f64>| q.attitude.e3().dot(&Vec3::z()).clamp(-1.0, 1.0).acos();
        let mut last = angle(&quad);
        let dt = 1e-4;
        for _ in 0..10_000 {
            let (_, m) = quad_attitude_control(&u, &quad, &jq, &g, 1e-6).unwrap();
            let wdot = jq.try_inverse().unwrap() * ((jq * quad.omega).cross(&quad.omega) + m);
            quad.attitude = integrate_attitude(&quad.attitude, &quad.omega, dt);
            quad.omega += wdot * dt;
            let a = angle(&quad);
            assert!(a <= last + 1e-12, "tilt grew from {last} to {a}");
            last = a;
        }
        assert!(last < 30f64.to_radians() * 0.01);
    }
}
