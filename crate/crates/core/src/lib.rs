//! Cooperative transport of a fluid-carrying load by a team of quadrotors.
//!
//! The crate propagates the reduced multi-quadrotor/load equations on
//! `SO(3) x R^3 x (S^2)^N x SO(3)^N`, runs a gradient mass observer, checks
//! persistent-excitation and hydrostatic-validity conditions on trajectories,
//! and precomputes a hydrostatic inertia look-up table from tank geometry.
//!
//! Most math modules are generic over the scalar type ([`Real`]); the aliases
//! at the crate root pin them to `f64`, which is what the file formats,
//! the look-up table and the simulation harness use.

// `!(x > y)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dynamics;
pub mod excitation;
pub mod harness;
pub mod inertia_lut;
pub mod manifold;
pub mod mass_estimator;
pub mod scalar;
pub mod trajectory;

pub use scalar::Real;

/// Standard gravitational acceleration used by the default scenarios, m/s^2.
pub const GRAVITY: f64 = 9.81;

pub type Vec3 = manifold::Vec3<f64>;
pub type Mat3 = manifold::Mat3<f64>;
pub type Rotation = manifold::Rotation<f64>;
pub type UnitVector = manifold::UnitVector<f64>;

pub type SystemParams = dynamics::SystemParams<f64>;
pub type SystemState = dynamics::SystemState<f64>;
pub type StateDerivative = dynamics::StateDerivative<f64>;
pub type ControlInput = dynamics::ControlInput<f64>;
pub type CableInput = dynamics::CableInput<f64>;
pub type Disturbance = dynamics::Disturbance<f64>;
pub type LoadSchedule = dynamics::LoadSchedule<f64>;
pub type Measurement = dynamics::Measurement<f64>;


pub type Gains = control::Gains<f64>;
pub type LoadReference = control::LoadReference<f64>;
pub type Controller = control::Controller<f64>;

pub type ParamEstimate = mass_estimator::ParamEstimate<f64>;
pub type RegressorSample = mass_estimator::RegressorSample<f64>;
pub type ErrorDynamics = mass_estimator::ErrorDynamics<f64>;

pub type KinematicSample = excitation::KinematicSample<f64>;
pub type ExcitationBounds = excitation::ExcitationBounds<f64>;
pub type WindowReport = excitation::WindowReport<f64>;

pub type Waypoints = trajectory::Waypoints<f64>;
pub type TrajectoryPlan = trajectory::TrajectoryPlan<f64>;
