//! Scenario files, the closed simulation loop and run outputs.
//!
//! A scenario is a JSON document; every field has a default, so `{}` is a
//! valid constant-mass hover. One step of [`run`] evaluates the reference,
//! takes a measurement, queries the inertia (true schedule at the estimated
//! mass, or the look-up table), computes the control, records a trace row,
//! updates the estimator and advances the plant with the input held.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, Controller, Gains, LoadEstimate, LoadReference};
use crate::dynamics::{
    self, derivatives, measure, DynamicsError, InertiaProfile, LoadSchedule, MassProfile, NoiseModel, PlantInput,
    SystemParams, SystemState, Wind,
};
use crate::excitation::{
    constant_mass_pe, hydrostatic_validity, window_ranges, ExcitationError, HydrostaticReport, HydrostaticThresholds,
    KinematicSample,
};
use crate::inertia_lut::{InertiaLut, InertiaTracker, LutError, TankGeometry, TankShape};
use crate::manifold::exp_rotation;
use crate::mass_estimator::{regress_step, EstimatorError, MassModel, ParamEstimate, RegressorSample};
use crate::trajectory::{cubic_spline, min_jerk_quintic, tension_spline, Dither, TrajectoryError, TrajectoryPlan, Waypoints};
use crate::{Mat3, Rotation, UnitVector, Vec3};

/// Bumped whenever the trace columns change.
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("step {step}: {source}")]
    Dynamics { step: usize, source: DynamicsError },
    #[error("step {step}: {source}")]
    Control { step: usize, source: ControlError },
    #[error("step {step}: {source}")]
    Estimator { step: usize, source: EstimatorError },
    #[error("step {step}: {source}")]
    Inertia { step: usize, source: LutError },
    #[error("run produced no samples")]
    EmptyRun,
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Excitation(#[from] ExcitationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// 3 for failures inside the numerics, 2 for everything the user can fix
    /// in the inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Dynamics { .. }
            | HarnessError::Control { .. }
            | HarnessError::Estimator { .. }
            | HarnessError::Inertia { .. }
            | HarnessError::EmptyRun => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub quad_mass: f64,
    /// Diagonal of the quadrotor inertia, kg m^2.
    pub quad_inertia: [f64; 3],
    pub cable_length: f64,
    pub gravity: f64,
    /// Side of the square attachment layout used when `attachments` is absent.
    pub layout_side: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attachments: Option<Vec<[f64; 3]>>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            quad_mass: 0.5,
            quad_inertia: [0.01, 0.01, 0.02],
            cable_length: 1.0,
            gravity: crate::GRAVITY,
            layout_side: 0.8,
            attachments: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MassMode {
    Constant { mass: f64 },
    Viscous { m0: f64, lambda: f64 },
    Orifice { m0: f64, lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadInertiaMode {
    Fixed { diagonal: [f64; 3] },
    /// `diag(diagonal) * m / reference_mass`.
    Scaled { diagonal: [f64; 3], reference_mass: f64 },
    /// Upright hydrostatics of the scenario's box tank.
    Tank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadConfig {
    pub mass: MassMode,
    pub inertia: LoadInertiaMode,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            mass: MassMode::Constant { mass: 2.0 },
            inertia: LoadInertiaMode::Scaled { diagonal: [0.08, 0.08, 0.12], reference_mass: 2.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorModel {
    Constant,
    Viscous,
    Orifice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub model: EstimatorModel,
    /// One gain per parameter; model defaults when empty.
    pub gains: Vec<f64>,
    /// Initial parameters. When absent: `[factor * m(0)]`, followed by
    /// `initial_rate` for the two-parameter models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    pub initial_mass_factor: f64,
    pub initial_rate: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { model: EstimatorModel::Constant, gains: Vec::new(), theta0: None, initial_mass_factor: 1.5, initial_rate: 0.05 }
    }
}

impl EstimatorConfig {
    pub fn mass_model(&self) -> MassModel<f64> {
        match self.model {
            EstimatorModel::Constant => MassModel::Constant,
            EstimatorModel::Viscous => MassModel::ViscousLeak,
            EstimatorModel::Orifice => MassModel::OrificeLeak,
        }
    }

    pub fn effective_gains(&self) -> Vec<f64> {
        if !self.gains.is_empty() {
            return self.gains.clone();
        }
        match self.model {
            EstimatorModel::Constant => vec![0.01],
            EstimatorModel::Viscous => vec![0.05, 2e-3],
            EstimatorModel::Orifice => vec![0.05, 2e-3],
        }
    }

    pub fn effective_theta0(&self, m0: f64) -> Vec<f64> {
        if let Some(t) = &self.theta0 {
            return t.clone();
        }
        let m = self.initial_mass_factor * m0;
        match self.model {
            EstimatorModel::Constant => vec![m],
            EstimatorModel::Viscous | EstimatorModel::Orifice => vec![m, self.initial_rate],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InertiaMode {
    /// The true inertia schedule evaluated at the estimated mass.
    TrueSchedule,
    /// Table lookup; relative paths resolve against the scenario file.
    Lut { file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub attitude: f64,
    pub angular_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Amplitude of the sinusoidal wind force on the load, N.
    pub wind_amplitude: f64,
    pub noise: NoiseConfig,
}

impl DisturbanceConfig {
    pub fn disturbance(&self) -> dynamics::Disturbance<f64> {
        let n = &self.noise;
        dynamics::Disturbance {
            wind: if self.wind_amplitude == 0.0 {
                Wind::None
            } else {
                Wind::Sinusoidal { amplitude: self.wind_amplitude }
            },
            noise: NoiseModel {
                position: n.position,
                velocity: n.velocity,
                acceleration: n.acceleration,
                attitude: n.attitude,
                angular_rate: n.angular_rate,
            },
        }
    }
}

/// Waypoint file used by scenarios and by the `plan` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointsFile {
    pub times: Vec<f64>,
    pub points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_velocity: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_velocity: Option<[f64; 3]>,
}

impl WaypointsFile {
    pub fn waypoints(&self) -> Waypoints<f64> {
        Waypoints {
            times: self.times.clone(),
            points: self.points.iter().map(|p| Vec3::from(*p)).collect(),
            start_velocity: self.start_velocity.map(Vec3::from),
            end_velocity: self.end_velocity.map(Vec3::from),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineKind {
    Hold,
    Cubic,
    Tension,
    Quintic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitherConfig {
    pub amplitude: [f64; 3],
    pub frequencies: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phases: Option<[f64; 3]>,
}

impl Default for DitherConfig {
    fn default() -> Self {
        Self { amplitude: [0.0; 3], frequencies: Vec::new(), phases: None }
    }
}

impl DitherConfig {
    pub fn dither(&self) -> Dither<f64> {
        Dither {
            amplitudes: Vec3::from(self.amplitude),
            frequencies: self.frequencies.clone(),
            phases: self.phases.map(Vec3::from).unwrap_or_else(Dither::default_phases),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub kind: SplineKind,
    /// Set point for `hold`.
    pub hold: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<WaypointsFile>,
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dither: Option<DitherConfig>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { kind: SplineKind::Hold, hold: [0.0; 3], waypoints: None, tau: 4.0, dither: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub position: [f64; 3],
    /// Half-width of the uniform perturbation of position (m), load
    /// attitude and cable directions (rad).
    pub perturbation: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { position: [0.0; 3], perturbation: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainsConfig {
    pub kx: f64,
    pub kv: f64,
    pub kr: f64,
    pub komega: f64,
    pub kq: f64,
    pub kw: f64,
    pub kr_quad: f64,
    pub komega_quad: f64,
}

impl Default for GainsConfig {
    fn default() -> Self {
        let g = Gains::<f64>::default();
        Self {
            kx: g.kx,
            kv: g.kv,
            kr: g.kr,
            komega: g.komega,
            kq: g.kq,
            kw: g.kw,
            kr_quad: g.kr_quad,
            komega_quad: g.komega_quad,
        }
    }
}

impl GainsConfig {
    pub fn gains(&self) -> Gains<f64> {
        Gains {
            kx: self.kx,
            kv: self.kv,
            kr: self.kr,
            komega: self.komega,
            kq: self.kq,
            kw: self.kw,
            kr_quad: self.kr_quad,
            komega_quad: self.komega_quad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantMode {
    /// Full reduced model driven by the quadrotor thrust vectors.
    #[default]
    Full,
    /// Simplified closed loop driven by the cable inputs.
    ClosedLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub trace: String,
    pub summary: String,
    pub plots: bool,
    /// Window length for the excitation and hydrostatic checks, s.
    pub pe_window: f64,
    pub pe_mu: f64,
    pub hydro_eps_max: f64,
    pub hydro_jerk_max: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trace: "trace.csv".into(),
            summary: "summary.json".into(),
            plots: true,
            pe_window: 2.0,
            pe_mu: 5.0,
            hydro_eps_max: crate::excitation::DEFAULT_EPS_MAX,
            hydro_jerk_max: crate::excitation::DEFAULT_JERK_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub system: SystemConfig,
    pub load: LoadConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tank: Option<TankGeometry>,
    pub estimator: EstimatorConfig,
    pub inertia: InertiaMode,
    pub disturbance: DisturbanceConfig,
    pub trajectory: TrajectoryConfig,
    pub initial: InitialConfig,
    pub gains: GainsConfig,
    pub plant: PlantMode,
    pub output: OutputConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "hover".into(),
            horizon: 15.0,
            dt: 1e-3,
            seed: 0,
            system: SystemConfig::default(),
            load: LoadConfig::default(),
            tank: None,
            estimator: EstimatorConfig::default(),
            inertia: InertiaMode::TrueSchedule,
            disturbance: DisturbanceConfig::default(),
            trajectory: TrajectoryConfig::default(),
            initial: InitialConfig::default(),
            gains: GainsConfig::default(),
            plant: PlantMode::Full,
            output: OutputConfig::default(),
        }
    }
}

/// Reads, fills defaults, resolves relative table paths and validates.
pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut sc = parse_scenario(&text, &path.display().to_string())?;
    if let InertiaMode::Lut { file } = &mut sc.inertia {
        if file.is_relative() {
            if let Some(dir) = path.parent() {
                *file = dir.join(&*file);
            }
        }
    }
    sc.validate()?;
    Ok(sc)
}

pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

impl Scenario {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn mass_profile(&self) -> MassProfile<f64> {
        match self.load.mass {
            MassMode::Constant { mass } => MassProfile::Constant { mass },
            MassMode::Viscous { m0, lambda } => MassProfile::Viscous { m0, lambda },
            MassMode::Orifice { m0, lambda } => MassProfile::Orifice { m0, lambda },
        }
    }

    fn inertia_profile(&self) -> Result<InertiaProfile<f64>, String> {
        Ok(match self.load.inertia {
            LoadInertiaMode::Fixed { diagonal } => InertiaProfile::Fixed(Mat3::from_diagonal(&Vec3::from(diagonal))),
            LoadInertiaMode::Scaled { diagonal, reference_mass } => InertiaProfile::ScaledWithMass {
                reference: Mat3::from_diagonal(&Vec3::from(diagonal)),
                reference_mass,
            },
            LoadInertiaMode::Tank => match &self.tank {
                Some(TankGeometry { shape: TankShape::Box { a, b, c }, empty_mass, density, .. }) => {
                    InertiaProfile::UprightBox { dims: Vec3::new(*a, *b, *c), tank_mass: *empty_mass, density: *density }
                }
                Some(_) => return Err("load inertia \"tank\" needs a box tank".into()),
                None => return Err("load inertia \"tank\" needs a tank".into()),
            },
        })
    }

    pub fn system_params(&self) -> Result<SystemParams<f64>, HarnessError> {
        let s = &self.system;
        let attachments = match &s.attachments {
            Some(a) => a.iter().map(|r| Vec3::from(*r)).collect(),
            None => SystemParams::square_layout(s.layout_side),
        };
        Ok(SystemParams {
            quad_mass: s.quad_mass,
            quad_inertia: Mat3::from_diagonal(&Vec3::from(s.quad_inertia)),
            cable_length: s.cable_length,
            attachments,
            gravity: s.gravity,
            load: LoadSchedule {
                mass: self.mass_profile(),
                inertia: self.inertia_profile().map_err(|e| HarnessError::Validation(vec![e]))?,
            },
        })
    }

    pub fn plan(&self) -> Result<Option<TrajectoryPlan<f64>>, HarnessError> {
        let tr = &self.trajectory;
        let wp = match (tr.kind, &tr.waypoints) {
            (SplineKind::Hold, _) => return Ok(None),
            (_, Some(w)) => w.waypoints(),
            (_, None) => return Err(HarnessError::Validation(vec!["trajectory needs waypoints".into()])),
        };
        Ok(Some(match tr.kind {
            SplineKind::Cubic => cubic_spline(&wp)?,
            SplineKind::Tension => tension_spline(&wp, tr.tau)?,
            SplineKind::Quintic => min_jerk_quintic(&wp)?,
            SplineKind::Hold => unreachable!(),
        }))
    }

    /// Collects every violation rather than stopping at the first.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut bad = Vec::new();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.horizon) {
            bad.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(pos(self.dt) && self.dt <= dynamics::MAX_DT) {
            bad.push(format!("dt must lie in (0, {}], got {}", dynamics::MAX_DT, self.dt));
        } else if pos(self.horizon) && self.steps() == 0 {
            bad.push("horizon is shorter than one step".into());
        }
        if let Some(t) = &self.tank {
            if let Err(e) = t.validate() {
                bad.push(e.to_string());
            }
        }
        match self.system_params() {
            Ok(p) => {
                if pos(self.horizon) {
                    if let Err(e) = p.validate(self.horizon) {
                        bad.push(e.to_string());
                    }
                }
            }
            Err(HarnessError::Validation(v)) => bad.extend(v),
            Err(e) => bad.push(e.to_string()),
        }
        if !pos(self.system.gravity) {
            bad.push("gravity must be positive".into());
        }
        let model = self.estimator.mass_model();
        let m0 = self.mass_profile().eval(0.0).0;
        let theta = self.estimator.effective_theta0(m0);
        if let Err(e) = ParamEstimate::new(&model, theta, self.estimator.effective_gains(), 0.0) {
            bad.push(format!("estimator: {e}"));
        }
        if !pos(self.estimator.initial_mass_factor) {
            bad.push("estimator.initial_mass_factor must be positive".into());
        }
        if !self.gains.gains().all_positive() {
            bad.push("all controller gains must be positive".into());
        }
        if let InertiaMode::Lut { file } = &self.inertia {
            if !file.exists() {
                bad.push(format!("look-up table {} does not exist", file.display()));
            }
        }
        if self.trajectory.kind != SplineKind::Hold {
            match &self.trajectory.waypoints {
                None => bad.push("trajectory needs waypoints unless kind is \"hold\"".into()),
                Some(w) => {
                    if w.times.len() != w.points.len() {
                        bad.push("waypoint times and points differ in length".into());
                    } else if let Err(e) = w.waypoints().validate() {
                        bad.push(format!("waypoints: {e}"));
                    }
                }
            }
        }
        if !(self.trajectory.tau >= 0.0) {
            bad.push("trajectory.tau must be non-negative".into());
        }
        if !pos(self.output.pe_window) {
            bad.push("output.pe_window must be positive".into());
        }
        if !(self.initial.perturbation >= 0.0) {
            bad.push("initial.perturbation must be non-negative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Validation(bad))
        }
    }

    /// Hover at the initial position with seeded uniform perturbations.
    pub fn initial_state(&self, params: &SystemParams<f64>) -> SystemState<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let p = self.initial.perturbation;
        let mut draw = || {
            if p == 0.0 {
                Vec3::zeros()
            } else {
                Vec3::new(rng.gen_range(-p..=p), rng.gen_range(-p..=p), rng.gen_range(-p..=p))
            }
        };
        let mut s = SystemState::hover(params.n(), Vec3::from(self.initial.position));
        s.x_l += draw();
        s.r_l = exp_rotation(&draw());
        for c in &mut s.cables {
            let tilt = draw();
            c.q = UnitVector::new(exp_rotation(&Vec3::new(tilt.x, tilt.y, 0.0)).rotate(c.q.as_vec())).expect("unit");
        }
        s
    }
}

/// Reference source: hold point or spline, plus an optional dither.
#[derive(Debug, Clone)]
pub struct Reference {
    pub plan: Option<TrajectoryPlan<f64>>,
    pub hold: Vec3,
    pub dither: Option<Dither<f64>>,
}

impl Reference {
    pub fn from_scenario(sc: &Scenario) -> Result<Self, HarnessError> {
        Ok(Self {
            plan: sc.plan()?,
            hold: Vec3::from(sc.trajectory.hold),
            dither: sc.trajectory.dither.as_ref().map(DitherConfig::dither),
        })
    }

    pub fn derivative(&self, t: f64, d: i32) -> Vec3 {
        let base = match &self.plan {
            Some(p) => p.derivative(t, d),
            None if d == 0 => self.hold,
            None => Vec3::zeros(),
        };
        match &self.dither {
            Some(dz) => base + dz.derivative(t, d),
            None => base,
        }
    }

    pub fn at(&self, t: f64) -> LoadReference<f64> {
        LoadReference {
            x: self.derivative(t, 0),
            v: self.derivative(t, 1),
            a: self.derivative(t, 2),
            attitude: Rotation::identity(),
            omega: Vec3::zeros(),
        }
    }
}

/// Trace column names for `n` cables.
pub fn trace_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "x", "y", "z", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for j in 1..=n {
        for c in ["q_x", "q_y", "q_z", "w_x", "w_y", "w_z"] {
            h.push(format!("cable{j}_{c}"));
        }
    }
    h.push("m_true".into());
    h.push("m_hat".into());
    for pre in ["J_true", "J_hat"] {
        for c in ["xx", "xy", "xz", "yy", "yz", "zz"] {
            h.push(format!("{pre}_{c}"));
        }
    }
    for j in 1..=n {
        h.push(format!("u{j}_norm"));
    }
    h.push("pe".into());
    h
}

fn upper(m: &Mat3) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn write<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn read<R: std::io::Read>(input: R) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::Validation(vec![format!("trace row {}: {e}", rows.len() + 1)]))?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeWindow {
    pub t_start: f64,
    pub integral: f64,
    pub pass: bool,
}

/// Per-step series of one run plus the window verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub t: Vec<f64>,
    pub position: Vec<Vec3>,
    pub position_ref: Vec<Vec3>,
    pub position_error: Vec<f64>,
    pub mass_true: Vec<f64>,
    pub mass_hat: Vec<f64>,
    pub mass_error: Vec<f64>,
    pub inertia_true_diag: Vec<Vec3>,
    pub inertia_hat_diag: Vec<Vec3>,
    pub inertia_error: Vec<f64>,
    pub pe_integrand: Vec<f64>,
    pub pe_windows: Vec<PeWindow>,
    pub pe_mu: f64,
    pub pe_window: f64,
    /// `None` when the run is shorter than one check window.
    pub hydrostatic: Option<HydrostaticReport<f64>>,
    /// Peak fill-fraction clamp flag raised by table queries.
    pub lut_clamped: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub trace: Trace,
    pub final_state: SystemState<f64>,
}

fn inertia_radius(tank: Option<&TankGeometry>) -> f64 {
    tank.map_or(0.0, |t| {
        let (lo, hi) = t.bounding_box();
        0.5 * (hi - lo).norm()
    })
}

/// Runs a validated scenario.
pub fn run(sc: &Scenario) -> Result<RunResult, HarnessError> {
    let params = sc.system_params()?;
    let g = params.gravity;
    let reference = Reference::from_scenario(sc)?;
    let dist = sc.disturbance.disturbance();
    let model = sc.estimator.mass_model();
    let m0 = params.load.mass(0.0).0;
    let mut est = ParamEstimate::new(&model, sc.estimator.effective_theta0(m0), sc.estimator.effective_gains(), 0.0)
        .map_err(|source| HarnessError::Estimator { step: 0, source })?;
    let lut = match &sc.inertia {
        InertiaMode::TrueSchedule => None,
        InertiaMode::Lut { file } => Some(InertiaLut::load(file)?),
    };
    let mut tracker = InertiaTracker::new();
    let mut ctrl = Controller::new(sc.gains.gains(), params.n());
    let mut state = sc.initial_state(&params);
    let n = params.n();
    let steps = sc.steps();

    let mut m = RunMetrics {
        t: Vec::with_capacity(steps + 1),
        position: Vec::new(),
        position_ref: Vec::new(),
        position_error: Vec::new(),
        mass_true: Vec::new(),
        mass_hat: Vec::new(),
        mass_error: Vec::new(),
        inertia_true_diag: Vec::new(),
        inertia_hat_diag: Vec::new(),
        inertia_error: Vec::new(),
        pe_integrand: Vec::new(),
        pe_windows: Vec::new(),
        pe_mu: sc.output.pe_mu,
        pe_window: sc.output.pe_window,
        hydrostatic: None,
        lut_clamped: false,
    };
    let mut trace = Trace { header: trace_header(n), rows: Vec::with_capacity(steps + 1) };
    let mut kin = Vec::with_capacity(steps + 1);
    let mut v_dot = Vec3::zeros();
    let mut omega_dot = Vec3::zeros();
    let mut prev_accel: Option<Vec3> = None;

    for k in 0..=steps {
        let t = state.t;
        let r = reference.at(t);
        let meas_ctrl = measure(&state, &dist, &v_dot);
        let m_hat = est.mass(&model);
        let mdot_hat = est.mass_rate(&model);
        let (j_hat, jdot_hat) = match &lut {
            None => params.load.inertia.eval(m_hat, mdot_hat),
            Some(l) => {
                let q = tracker
                    .query(l, t, m_hat, &meas_ctrl.r_l)
                    .map_err(|source| HarnessError::Inertia { step: k, source })?;
                m.lut_clamped |= q.fill.clamped;
                (q.inertia, q.inertia_rate)
            }
        };
        ctrl.set_omega_l_dot(omega_dot);
        let estimate = LoadEstimate { mass: m_hat, mass_rate: mdot_hat, inertia: j_hat, inertia_rate: jdot_hat };
        let out = ctrl
            .compute(&meas_ctrl, &state.cables, &state.quads, &r, &estimate, &params)
            .map_err(|source| HarnessError::Control { step: k, source })?;
        let input = match sc.plant {
            PlantMode::Full => PlantInput::Full(out.full.clone()),
            PlantMode::ClosedLoop => PlantInput::ClosedLoop(out.cable.clone()),
        };
        let deriv = derivatives(&state, &input, &params, &dist).map_err(|source| HarnessError::Dynamics { step: k, source })?;
        let meas = measure(&state, &dist, &deriv.v_dot);
        let w = meas.v_dot + Vec3::z() * g;
        let (m_true, _) = params.load.mass(t);
        let (j_true, _) = params.load.inertia(t);

        let mut row = Vec::with_capacity(trace.header.len());
        row.push(t);
        row.extend(state.x_l.iter());
        row.extend(state.v_l.iter());
        row.extend(state.r_l.to_quaternion());
        row.extend(state.omega_l.iter());
        for c in &state.cables {
            row.extend(c.q.as_vec().iter());
            row.extend(c.omega.iter());
        }
        row.push(m_true);
        row.push(m_hat);
        row.extend(upper(&j_true));
        row.extend(upper(&j_hat));
        row.extend(out.full.iter().map(|u| u.u.norm()));
        row.push(w.norm_squared());
        trace.rows.push(row);

        m.t.push(t);
        m.position.push(state.x_l);
        m.position_ref.push(r.x);
        m.position_error.push((state.x_l - r.x).norm());
        m.mass_true.push(m_true);
        m.mass_hat.push(m_hat);
        m.mass_error.push((m_hat - m_true).abs());
        m.inertia_true_diag.push(j_true.diagonal());
        m.inertia_hat_diag.push(j_hat.diagonal());
        m.inertia_error.push((j_hat - j_true).norm());
        m.pe_integrand.push(w.norm_squared());
        let jerk = prev_accel.map_or(Vec3::zeros(), |a| (deriv.v_dot - a) / sc.dt);
        prev_accel = Some(deriv.v_dot);
        kin.push(KinematicSample {
            t,
            x: state.x_l,
            v: state.v_l,
            a: deriv.v_dot,
            jerk,
            omega: state.omega_l,
            omega_dot: deriv.omega_l_dot,
        });

        if k == steps {
            break;
        }
        let sum_mu = out.cable.iter().fold(Vec3::zeros(), |a, c| a + c.mu);
        let sample = RegressorSample::new(meas.v_dot, meas.v_l, sum_mu, g, t);
        est = regress_step(&est, &model, &sample, sc.dt).map_err(|source| HarnessError::Estimator { step: k, source })?;
        state = dynamics::step(&state, |_| Ok(input.clone()), &params, &dist, sc.dt)
            .map_err(|source| HarnessError::Dynamics { step: k, source })?;
        if !state.is_finite() {
            return Err(HarnessError::Dynamics { step: k, source: DynamicsError::InvalidParams("state diverged".into()) });
        }
        v_dot = meas.v_dot;
        omega_dot = deriv.omega_l_dot;
    }

    if let Ok(ranges) = window_ranges(&m.t, sc.output.pe_window) {
        m.pe_windows = ranges
            .into_iter()
            .map(|(s, e)| {
                let integral = m.t[s..=e]
                    .windows(2)
                    .zip(m.pe_integrand[s..=e].windows(2))
                    .map(|(tt, ff)| 0.5 * (tt[1] - tt[0]) * (ff[0] + ff[1]))
                    .sum::<f64>();
                PeWindow { t_start: m.t[s], integral, pass: integral >= sc.output.pe_mu }
            })
            .collect();
        let th = HydrostaticThresholds {
            eps_max: sc.output.hydro_eps_max,
            jerk_max: sc.output.hydro_jerk_max,
            tank_radius: inertia_radius(sc.tank.as_ref()),
            gravity: g,
        };
        m.hydrostatic = Some(hydrostatic_validity(&kin, &th, Some(sc.output.pe_window))?);
    }
    Ok(RunResult { metrics: m, trace, final_state: state })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalSummary {
    pub t: f64,
    pub position_error: f64,
    pub mass_true: f64,
    pub mass_hat: f64,
    pub mass_error: f64,
    pub relative_mass_error: f64,
    pub inertia_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeSummary {
    pub window: f64,
    pub mu: f64,
    pub windows: usize,
    pub failed_windows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst: Option<PeWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HydrostaticSummary {
    pub pass: bool,
    pub eps_peak: f64,
    pub eps_peak_t: f64,
    pub jerk_peak: f64,
    pub jerk_peak_t: f64,
    pub flagged_windows: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub trace_version: u32,
    pub steps: usize,
    pub terminal: TerminalSummary,
    pub max_position_error: f64,
    pub max_relative_mass_error_second_half: f64,
    pub pe: PeSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hydrostatic: Option<HydrostaticSummary>,
    pub lut_fill_clamped: bool,
}

pub fn summarize(m: &RunMetrics) -> Result<Summary, HarnessError> {
    let last = m.t.len().checked_sub(1).ok_or(HarnessError::EmptyRun)?;
    let rel = |i: usize| m.mass_error[i] / m.mass_true[i];
    let t_half = 0.5 * m.t[last];
    let second_half = (0..=last).filter(|&i| m.t[i] >= t_half).map(rel).fold(0.0, f64::max);
    let worst = m.pe_windows.iter().copied().min_by(|a, b| a.integral.total_cmp(&b.integral));
    Ok(Summary {
        trace_version: TRACE_VERSION,
        steps: last,
        terminal: TerminalSummary {
            t: m.t[last],
            position_error: m.position_error[last],
            mass_true: m.mass_true[last],
            mass_hat: m.mass_hat[last],
            mass_error: m.mass_error[last],
            relative_mass_error: rel(last),
            inertia_error: m.inertia_error[last],
        },
        max_position_error: m.position_error.iter().copied().fold(0.0, f64::max),
        max_relative_mass_error_second_half: second_half,
        pe: PeSummary {
            window: m.pe_window,
            mu: m.pe_mu,
            windows: m.pe_windows.len(),
            failed_windows: m.pe_windows.iter().filter(|w| !w.pass).count(),
            worst,
        },
        hydrostatic: m.hydrostatic.as_ref().map(|h| HydrostaticSummary {
            pass: h.pass(),
            eps_peak: h.eps_peak,
            eps_peak_t: h.eps_peak_t,
            jerk_peak: h.jerk_peak,
            jerk_peak_t: h.jerk_peak_t,
            flagged_windows: h.flagged_windows.clone(),
        }),
        lut_fill_clamped: m.lut_clamped,
    })
}

/// Bounds of the plotted data; the axes span exactly this box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 360.0;
const PLOT_MARGIN: f64 = 48.0;
const PLOT_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn plot_range(t: &[f64], series: &[(&str, Vec<f64>)]) -> PlotRange {
    let fold = |it: &mut dyn Iterator<Item = f64>| it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x_min, x_max) = fold(&mut t.iter().copied());
    let (y_min, y_max) = fold(&mut series.iter().flat_map(|(_, v)| v.iter().copied()));
    PlotRange { x_min, x_max, y_min, y_max }
}

/// Line plot as a standalone SVG document.
pub fn svg_plot(title: &str, t: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let r = plot_range(t, series);
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (sx, sy) = (span(r.x_min, r.x_max), span(r.y_min, r.y_max));
    let px = |x: f64| PLOT_MARGIN + (x - r.x_min) / sx * (PLOT_W - 2.0 * PLOT_MARGIN);
    let py = |y: f64| PLOT_H - PLOT_MARGIN - (y - r.y_min) / sy * (PLOT_H - 2.0 * PLOT_MARGIN);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n"
    );
    s += &format!("<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n", PLOT_W / 2.0);
    s += &format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        PLOT_W - 2.0 * PLOT_MARGIN,
        PLOT_H - 2.0 * PLOT_MARGIN,
        m = PLOT_MARGIN
    );
    let label = |x: f64, y: f64, anchor: &str, v: f64, cls: &str| {
        format!("<text class=\"{cls}\" x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\" font-size=\"10\">{v:.6e}</text>\n")
    };
    s += &label(PLOT_MARGIN, PLOT_H - PLOT_MARGIN + 14.0, "start", r.x_min, "x-min");
    s += &label(PLOT_W - PLOT_MARGIN, PLOT_H - PLOT_MARGIN + 14.0, "end", r.x_max, "x-max");
    s += &label(PLOT_MARGIN - 4.0, PLOT_H - PLOT_MARGIN, "end", r.y_min, "y-min");
    s += &label(PLOT_MARGIN - 4.0, PLOT_MARGIN + 4.0, "end", r.y_max, "y-max");
    // thin the polyline to at most ~2000 vertices
    let stride = (t.len() / 2000).max(1);
    for (i, (name, v)) in series.iter().enumerate() {
        let color = PLOT_COLORS[i % PLOT_COLORS.len()];
        let mut pts = String::new();
        for k in (0..t.len()).step_by(stride).chain(std::iter::once(t.len().saturating_sub(1))) {
            if k < v.len() {
                pts += &format!("{:.2},{:.2} ", px(t[k]), py(v[k]));
            }
        }
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>\n", pts.trim_end());
        s += &format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            PLOT_W - PLOT_MARGIN + 4.0,
            PLOT_MARGIN + 14.0 * (i as f64 + 1.0)
        );
    }
    s += "</svg>\n";
    s
}

/// Position, mass and inertia-diagonal plots.
pub fn plots(m: &RunMetrics) -> Vec<(&'static str, String)> {
    let axis = |v: &[Vec3], i: usize| v.iter().map(|p| p[i]).collect::<Vec<_>>();
    vec![
        (
            "position.svg",
            svg_plot(
                "Load position (m)",
                &m.t,
                &[("x", axis(&m.position, 0)), ("y", axis(&m.position, 1)), ("z", axis(&m.position, 2))],
            ),
        ),
        ("mass.svg", svg_plot("Load mass (kg)", &m.t, &[("true", m.mass_true.clone()), ("estimate", m.mass_hat.clone())])),
        (
            "inertia.svg",
            svg_plot(
                "Inertia diagonal (kg m^2)",
                &m.t,
                &[
                    ("Jxx", axis(&m.inertia_true_diag, 0)),
                    ("Jyy", axis(&m.inertia_true_diag, 1)),
                    ("Jzz", axis(&m.inertia_true_diag, 2)),
                    ("Jxx est", axis(&m.inertia_hat_diag, 0)),
                    ("Jyy est", axis(&m.inertia_hat_diag, 1)),
                    ("Jzz est", axis(&m.inertia_hat_diag, 2)),
                ],
            ),
        ),
    ]
}

/// Runs a scenario and writes the echoed config, trace, summary and plots
/// into `dir`.
pub fn simulate_to_dir(sc: &Scenario, dir: &Path) -> Result<Summary, HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("scenario.json"), sc.to_json())?;
    let res = run(sc)?;
    let f = std::fs::File::create(dir.join(&sc.output.trace))?;
    res.trace.write(std::io::BufWriter::new(f))?;
    let summary = summarize(&res.metrics)?;
    std::fs::write(dir.join(&sc.output.summary), serde_json::to_string_pretty(&summary)?)?;
    if sc.output.plots {
        for (name, svg) in plots(&res.metrics) {
            std::fs::write(dir.join(name), svg)?;
        }
    }
    Ok(summary)
}

/// Rebuilds load kinematics from a trace: acceleration and jerk by central
/// differences of the velocity columns.
pub fn trace_kinematics(trace: &Trace) -> Result<Vec<KinematicSample<f64>>, HarnessError> {
    let col = |n: &str| trace.column(n).ok_or_else(|| HarnessError::Validation(vec![format!("trace has no column {n:?}")]));
    let t = col("t")?;
    if t.len() < 3 {
        return Err(HarnessError::Validation(vec!["trace needs at least 3 rows".into()]));
    }
    let xs = [col("x")?, col("y")?, col("z")?];
    let vs = [col("vx")?, col("vy")?, col("vz")?];
    let ws = [col("wx")?, col("wy")?, col("wz")?];
    let v3 = |c: &[Vec<f64>; 3], i: usize| Vec3::new(c[0][i], c[1][i], c[2][i]);
    let diff = |f: &dyn Fn(usize) -> Vec3, i: usize| -> Vec3 {
        let n = t.len();
        let (a, b) = if i == 0 { (0, 1) } else if i == n - 1 { (n - 2, n - 1) } else { (i - 1, i + 1) };
        (f(b) - f(a)) / (t[b] - t[a])
    };
    let acc: Vec<Vec3> = (0..t.len()).map(|i| diff(&|k| v3(&vs, k), i)).collect();
    let omd: Vec<Vec3> = (0..t.len()).map(|i| diff(&|k| v3(&ws, k), i)).collect();
    Ok((0..t.len())
        .map(|i| KinematicSample {
            t: t[i],
            x: v3(&xs, i),
            v: v3(&vs, i),
            a: acc[i],
            jerk: diff(&|k| acc[k], i),
            omega: v3(&ws, i),
            omega_dot: omd[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeCheck {
    pub window: f64,
    pub mu: f64,
    pub min_integral: f64,
    pub window_start: f64,
    pub pass: bool,
    pub windows: Vec<PeWindow>,
}

/// Constant-mass excitation check on a recorded trace.
pub fn check_pe(trace: &Trace, window: f64, mu: f64, gravity: f64) -> Result<PeCheck, HarnessError> {
    let kin = trace_kinematics(trace)?;
    let v = constant_mass_pe(&kin, mu, window, gravity)?;
    let times: Vec<f64> = kin.iter().map(|k| k.t).collect();
    let f: Vec<f64> = kin.iter().map(|k| k.w(gravity).norm_squared()).collect();
    let windows = window_ranges(&times, window)?
        .into_iter()
        .map(|(s, e)| {
            let integral: f64 = times[s..=e]
                .windows(2)
                .zip(f[s..=e].windows(2))
                .map(|(tt, ff)| 0.5 * (tt[1] - tt[0]) * (ff[0] + ff[1]))
                .sum();
            PeWindow { t_start: times[s], integral, pass: integral >= mu }
        })
        .collect();
    Ok(PeCheck { window, mu, min_integral: v.min_integral, window_start: v.window_start, pass: v.pass, windows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(horizon: f64) -> Scenario {
        Scenario { horizon, initial: InitialConfig { perturbation: 0.0, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let sc = parse_scenario("{}", "inline").unwrap();
        assert_eq!(sc, Scenario::default());
        assert_eq!(sc.horizon, 15.0);
        assert_eq!(sc.steps(), 15000);
        sc.validate().unwrap();
        assert_eq!(sc.system_params().unwrap().n(), 4);
    }

    #[test]
    fn negative_horizon_is_rejected_with_all_violations() {
        let sc = parse_scenario(r#"{"horizon": -1, "dt": 0.5, "gains": {"kx": -2}}"#, "inline").unwrap();
        match sc.validate() {
            Err(HarnessError::Validation(v)) => {
                assert!(v.iter().any(|s| s.contains("horizon")));
                assert!(v.iter().any(|s| s.contains("dt")));
                assert!(v.iter().any(|s| s.contains("gains")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        match parse_scenario("{\n  \"horizon\": 2,\n  \"bogus\": 1\n}", "f.json") {
            Err(HarnessError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut sc = Scenario::default();
        sc.load.mass = MassMode::Viscous { m0: 2.5, lambda: 0.1 };
        sc.estimator.model = EstimatorModel::Viscous;
        sc.trajectory.dither = Some(DitherConfig { amplitude: [0.01, 0.0, 0.02], frequencies: vec![1.0, 2.0], phases: None });
        sc.tank = Some(TankGeometry {
            shape: TankShape::Box { a: 0.3, b: 0.3, c: 0.1 },
            empty_mass: 0.5,
            density: 1000.0,
            reference: None,
        });
        let back = parse_scenario(&sc.to_json(), "echo").unwrap();
        assert_eq!(back, sc);
        assert_eq!(back.to_json(), sc.to_json());
    }

    #[test]
    fn header_matches_rows() {
        let res = run(&short(0.05)).unwrap();
        assert_eq!(res.trace.header.len(), 14 + 6 * 4 + 2 + 12 + 4 + 1);
        assert_eq!(res.trace.rows.len(), 51);
        assert!(res.trace.rows.iter().all(|r| r.len() == res.trace.header.len()));
        assert_eq!(res.metrics.t.len(), 51);
    }

    #[test]
    fn summary_matches_last_row() {
        let res = run(&short(0.2)).unwrap();
        let s = summarize(&res.metrics).unwrap();
        let last = res.trace.rows.last().unwrap();
        let mt = res.trace.header.iter().position(|h| h == "m_true").unwrap();
        assert_eq!(s.terminal.mass_error, (last[mt + 1] - last[mt]).abs());
        assert_eq!(s.terminal.t, last[0]);
    }

    #[test]
    fn empty_metrics_rejected() {
        let m = run(&short(0.01)).unwrap().metrics;
        let empty = RunMetrics { t: vec![], ..m };
        assert!(matches!(summarize(&empty), Err(HarnessError::EmptyRun)));
    }

    #[test]
    fn plot_axes_span_data() {
        let t = vec![0.0, 1.0, 2.0];
        let s = vec![("a", vec![1.0, -2.0, 0.5]), ("b", vec![3.0, 0.0, 0.0])];
        let r = plot_range(&t, &s);
        assert_eq!((r.x_min, r.x_max, r.y_min, r.y_max), (0.0, 2.0, -2.0, 3.0));
        let svg = svg_plot("p", &t, &s);
        assert!(svg.contains(&format!("{:.6e}", -2.0)) && svg.contains(&format!("{:.6e}", 3.0)));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn seeded_initial_state_is_deterministic() {
        let sc = Scenario { seed: 7, ..Default::default() };
        let p = sc.system_params().unwrap();
        let a = sc.initial_state(&p);
        let b = sc.initial_state(&p);
        assert_eq!(a.x_l, b.x_l);
        assert!(a.x_l.norm() > 0.0 && a.x_l.norm() < 0.02 * 3f64.sqrt());
        let c = Scenario { seed: 8, ..sc }.initial_state(&p);
        assert_ne!(a.x_l, c.x_l);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Validation(vec![]).exit_code(), 2);
        assert_eq!(HarnessError::Dynamics { step: 3, source: DynamicsError::SingularInertia }.exit_code(), 3);
    }
}
