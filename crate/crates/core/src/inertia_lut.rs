//! Hydrostatic inertia of a partially filled tank and the look-up table
//! that serves it online.
//!
//! The fluid is the part of the cavity below a plane orthogonal to gravity:
//! `{x : u.x <= h}` with `u = R_L^T e3` the body-frame up direction, and `h`
//! chosen so the region holds `sigma V_T` of fluid. Integrals are voxel sums
//! over a cell-centred grid stored as z-columns; a cell cut by the plane
//! counts with a linear ramp in the signed distance of its centre, which
//! keeps the volume continuous in `h`.
//!
//! Everything here is `f64`: the table file stores little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::{Mat3, Rotation, UnitVector, Vec3};

pub const LUT_MAGIC: &[u8; 4] = b"ALUT";
pub const LUT_VERSION: u32 = 1;
/// Bytes before the first node record.
pub const LUT_HEADER_LEN: usize = 4 + 4 * 4 + 3 * 8 + 32;
/// Bytes per node record: six entries of `J_L` and three of `O_cm`.
pub const LUT_RECORD_LEN: usize = 9 * 8;
/// Allowed gap between `|Vol - sigma V_T|` and zero, relative to `V_T`.
pub const VOLUME_TOL: f64 = 1e-4;
pub const MAX_PLANE_ITERATIONS: usize = 60;
/// Masses this far below `m_T` (relative) are rejected rather than clamped.
pub const EMPTY_MASS_TOL: f64 = 1e-3;
/// Clamping `sigma` by more than this raises the warning flag.
pub const CLAMP_WARN: f64 = 0.01;

// Hashed ahead of the geometry so tables built under a different fill
// convention never share a hash.
const HASH_DOMAIN: &[u8] = b"ALUT/v1/fluid-below-plane-normal-to-body-up\0";

#[derive(Debug, Error)]
pub enum LutError {
    #[error("mass {mass} kg is below the empty-tank mass {empty} kg")]
    MassBelowEmpty { mass: f64, empty: f64 },
    #[error("invalid tank: {0}")]
    InvalidTank(String),
    #[error("resolution must be at least {} voxels per axis, got {0}", Resolution::MIN)]
    InvalidResolution(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("not a look-up table file (bad magic)")]
    BadMagic,
    #[error("unsupported table version {0}")]
    UnsupportedVersion(u32),
    #[error("table file truncated: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Cavity shape in the tank frame. Primitives are centred on the origin;
/// the cylinder axis is `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TankShape {
    Box { a: f64, b: f64, c: f64 },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
    /// Occupancy mask of a voxelized mesh. `mask` holds one `'0'`/`'1'` per
    /// cell with `x` fastest, then `y`, then `z`; `origin` is the minimum
    /// corner of the grid. The grid is used as-is, whatever the resolution.
    Voxels { dims: [usize; 3], cell: f64, origin: [f64; 3], mask: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankGeometry {
    pub shape: TankShape,
    /// Empty-tank mass `m_T`, kg.
    pub empty_mass: f64,
    /// Fluid density, kg/m^3.
    pub density: f64,
    /// Reference point `O`; the bounding-box centre when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<[f64; 3]>,
}

impl TankGeometry {
    pub fn from_json_file(path: &Path) -> Result<Self, LutError> {
        let text = std::fs::read_to_string(path)?;
        let tank: Self = serde_json::from_str(&text)?;
        tank.validate()?;
        Ok(tank)
    }

    pub fn validate(&self) -> Result<(), LutError> {
        let mut bad = Vec::new();
        if !(self.empty_mass > 0.0 && self.empty_mass.is_finite()) {
            bad.push(format!("empty_mass must be positive, got {}", self.empty_mass));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            bad.push(format!("density must be positive, got {}", self.density));
        }
        let pos = |x: f64| x > 0.0 && x.is_finite();
        match &self.shape {
            TankShape::Box { a, b, c } if !(pos(*a) && pos(*b) && pos(*c)) => {
                bad.push(format!("box sides must be positive, got {a} x {b} x {c}"))
            }
            TankShape::Cylinder { radius, height } if !(pos(*radius) && pos(*height)) => {
                bad.push(format!("cylinder needs positive radius and height, got {radius}, {height}"))
            }
            TankShape::Sphere { radius } if !pos(*radius) => bad.push(format!("sphere radius must be positive, got {radius}")),
            TankShape::Voxels { dims, cell, mask, .. } => {
                if !pos(*cell) {
                    bad.push(format!("voxel cell must be positive, got {cell}"));
                }
                let n = dims[0] * dims[1] * dims[2];
                if mask.len() != n {
                    bad.push(format!("voxel mask has {} cells, dims imply {n}", mask.len()));
                }
                if mask.bytes().any(|c| c != b'0' && c != b'1') {
                    bad.push("voxel mask may only contain '0' and '1'".into());
                } else if !mask.contains('1') {
                    bad.push("voxel mask is empty".into());
                }
            }
            _ => {}
        }
        if let Some(o) = self.reference {
            if o.iter().any(|x| !x.is_finite()) {
                bad.push("reference point must be finite".into());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(LutError::InvalidTank(bad.join("; ")))
        }
    }

    /// Axis-aligned bounds of the cavity in the tank frame.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        match &self.shape {
            TankShape::Box { a, b, c } => {
                let h = Vec3::new(*a, *b, *c) * 0.5;
                (-h, h)
            }
            TankShape::Cylinder { radius, height } => {
                let h = Vec3::new(*radius, *radius, 0.5 * height);
                (-h, h)
            }
            TankShape::Sphere { radius } => {
                let h = Vec3::repeat(*radius);
                (-h, h)
            }
            TankShape::Voxels { dims, cell, origin, .. } => {
                let lo = Vec3::from(*origin);
                let ext = Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * *cell;
                (lo, lo + ext)
            }
        }
    }

    pub fn reference_point(&self) -> Vec3 {
        match self.reference {
            Some(o) => Vec3::from(o),
            None => {
                let (lo, hi) = self.bounding_box();
                (lo + hi) * 0.5
            }
        }
    }

    /// Membership of a tank-frame point in a primitive cavity. Voxel tanks
    /// answer from their mask.
    pub fn contains(&self, p: &Vec3) -> bool {
        match &self.shape {
            TankShape::Box { a, b, c } => p.x.abs() <= 0.5 * a && p.y.abs() <= 0.5 * b && p.z.abs() <= 0.5 * c,
            TankShape::Cylinder { radius, height } => {
                p.x * p.x + p.y * p.y <= radius * radius && p.z.abs() <= 0.5 * height
            }
            TankShape::Sphere { radius } => p.norm_squared() <= radius * radius,
            TankShape::Voxels { dims, cell, origin, mask } => {
                let idx = |d: usize| ((p[d] - origin[d]) / cell).floor();
                let (i, j, k) = (idx(0), idx(1), idx(2));
                if i < 0.0 || j < 0.0 || k < 0.0 {
                    return false;
                }
                let (i, j, k) = (i as usize, j as usize, k as usize);
                if i >= dims[0] || j >= dims[1] || k >= dims[2] {
                    return false;
                }
                mask.as_bytes()[i + dims[0] * (j + dims[1] * k)] == b'1'
            }
        }
    }

    /// Closed-form cavity volume of a primitive.
    pub fn analytic_volume(&self) -> Option<f64> {
        match &self.shape {
            TankShape::Box { a, b, c } => Some(a * b * c),
            TankShape::Cylinder { radius, height } => Some(std::f64::consts::PI * radius * radius * height),
            TankShape::Sphere { radius } => Some(4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)),
            TankShape::Voxels { .. } => None,
        }
    }

    /// SHA-256 over the fill convention, shape, masses and reference point.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(HASH_DOMAIN);
        let mut put = |x: f64| h.update(x.to_le_bytes());
        match &self.shape {
            TankShape::Box { a, b, c } => {
                put(0.0);
                put(*a);
                put(*b);
                put(*c);
            }
            TankShape::Cylinder { radius, height } => {
                put(1.0);
                put(*radius);
                put(*height);
            }
            TankShape::Sphere { radius } => {
                put(2.0);
                put(*radius);
            }
            TankShape::Voxels { dims, cell, origin, .. } => {
                put(3.0);
                for d in dims {
                    put(*d as f64);
                }
                put(*cell);
                for o in origin {
                    put(*o);
                }
            }
        }
        put(self.empty_mass);
        put(self.density);
        let o = self.reference_point();
        put(o.x);
        put(o.y);
        put(o.z);
        if let TankShape::Voxels { mask, .. } = &self.shape {
            h.update(mask.as_bytes());
        }
        h.finalize().into()
    }
}

/// Voxels along the longest bounding-box axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution(usize);

impl Resolution {
    pub const MIN: usize = 4;
    pub const R64: Self = Self(64);
    pub const R128: Self = Self(128);
    pub const R256: Self = Self(256);

    pub fn new(n: usize) -> Result<Self, LutError> {
        if n < Self::MIN {
            return Err(LutError::InvalidResolution(n));
        }
        Ok(Self(n))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Self::R128
    }
}

/// `m_T`, `rho` and the quadrature cavity volume `V_T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TankMass {
    pub empty_mass: f64,
    pub density: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillLevel {
    pub sigma: f64,
    /// Set when the raw fill fraction was outside `[0, 1]` by more than 1%.
    pub clamped: bool,
}

impl TankMass {
    pub fn fluid_capacity(&self) -> f64 {
        self.density * self.volume
    }

    pub fn fill_level(&self, m_hat: f64) -> Result<FillLevel, LutError> {
        if m_hat < self.empty_mass * (1.0 - EMPTY_MASS_TOL) || !m_hat.is_finite() {
            return Err(LutError::MassBelowEmpty { mass: m_hat, empty: self.empty_mass });
        }
        let raw = (m_hat - self.empty_mass) / self.fluid_capacity();
        let sigma = raw.clamp(0.0, 1.0);
        Ok(FillLevel { sigma, clamped: (raw - sigma).abs() > CLAMP_WARN })
    }

    /// Total mass implied by a fill fraction.
    pub fn mass_at(&self, sigma: f64) -> f64 {
        self.empty_mass + sigma * self.fluid_capacity()
    }
}

/// Volume, first and second moments of a region about `O`:
/// `V`, `int x dV`, `int x x^T dV` (cell self-moments included).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub volume: f64,
    pub first: Vec3,
    pub second: Mat3,
}

impl Moments {
    /// `int (|x|^2 I - x x^T) dV`.
    pub fn inertia_per_density(&self) -> Mat3 {
        Mat3::identity() * self.second.trace() - self.second
    }

    pub fn centroid(&self) -> Option<Vec3> {
        (self.volume > 0.0).then(|| self.first / self.volume)
    }
}

#[derive(Debug, Clone, Copy)]
struct Column {
    x: f64,
    y: f64,
    runs: (u32, u32),
}

/// The cavity as runs of occupied cells along `z`, in coordinates relative
/// to `O`.
#[derive(Debug, Clone)]
pub struct Cavity {
    tank: TankGeometry,
    cell: f64,
    /// `z` of the centre of cell `k = 0`, relative to `O`.
    z0: f64,
    columns: Vec<Column>,
    runs: Vec<(u32, u32)>,
    full: Moments,
}

impl Cavity {
    pub fn new(tank: &TankGeometry, resolution: Resolution) -> Result<Self, LutError> {
        tank.validate()?;
        let o = tank.reference_point();
        let (cell, dims, first_centre) = match &tank.shape {
            TankShape::Voxels { dims, cell, origin, .. } => (*cell, *dims, Vec3::from(*origin) + Vec3::repeat(0.5 * cell)),
            _ => {
                let (lo, hi) = tank.bounding_box();
                let ext = hi - lo;
                let cell = ext.max() / resolution.get() as f64;
                let n = ext.map(|e| ((e / cell) - 1e-9).ceil().max(1.0) as usize);
                let centre = (lo + hi) * 0.5;
                let corner = centre - Vec3::new(n.x as f64, n.y as f64, n.z as f64) * (0.5 * cell);
                (cell, [n.x, n.y, n.z], corner + Vec3::repeat(0.5 * cell))
            }
        };
        let mut columns = Vec::new();
        let mut runs = Vec::new();
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let start = runs.len() as u32;
                let mut open: Option<usize> = None;
                for k in 0..=dims[2] {
                    let inside = k < dims[2]
                        && match &tank.shape {
                            TankShape::Voxels { mask, .. } => mask.as_bytes()[i + dims[0] * (j + dims[1] * k)] == b'1',
                            _ => {
                                let p = first_centre + Vec3::new(i as f64, j as f64, k as f64) * cell;
                                tank.contains(&p)
                            }
                        };
                    match (inside, open) {
                        (true, None) => open = Some(k),
                        (false, Some(k0)) => {
                            runs.push((k0 as u32, k as u32));
                            open = None;
                        }
                        _ => {}
                    }
                }
                let end = runs.len() as u32;
                if end > start {
                    columns.push(Column {
                        x: first_centre.x + i as f64 * cell - o.x,
                        y: first_centre.y + j as f64 * cell - o.y,
                        runs: (start, end),
                    });
                }
            }
        }
        if columns.is_empty() {
            return Err(LutError::InvalidTank("cavity contains no voxel centres; raise the resolution".into()));
        }
        let mut cavity = Self {
            tank: tank.clone(),
            cell,
            z0: first_centre.z - o.z,
            columns,
            runs,
            full: Moments { volume: 0.0, first: Vec3::zeros(), second: Mat3::zeros() },
        };
        cavity.full = cavity.moments_with(|_, _| WeightLine::FULL);
        Ok(cavity)
    }

    pub fn tank(&self) -> &TankGeometry {
        &self.tank
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    /// Quadrature cavity volume `V_T`.
    pub fn volume(&self) -> f64 {
        self.full.volume
    }

    pub fn mass(&self) -> TankMass {
        TankMass { empty_mass: self.tank.empty_mass, density: self.tank.density, volume: self.full.volume }
    }

    pub fn full_moments(&self) -> &Moments {
        &self.full
    }

    /// `J_{T,O}`: the tank mass spread uniformly over the cavity.
    pub fn tank_inertia(&self) -> Mat3 {
        self.full.inertia_per_density() * (self.tank.empty_mass / self.full.volume)
    }

    /// Range of `u.x` over the cavity, widened by half a cell footprint so
    /// the ends give exactly empty and exactly full.
    pub fn support(&self, up: &Vec3) -> (f64, f64) {
        let half = 0.5 * self.footprint(up);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.columns {
            let p0 = up.x * c.x + up.y * c.y + up.z * self.z0;
            for &(a, b) in &self.runs[c.runs.0 as usize..c.runs.1 as usize] {
                let pa = p0 + up.z * self.cell * a as f64;
                let pb = p0 + up.z * self.cell * (b - 1) as f64;
                lo = lo.min(pa.min(pb));
                hi = hi.max(pa.max(pb));
            }
        }
        (lo - half, hi + half)
    }

    fn footprint(&self, up: &Vec3) -> f64 {
        self.cell * (up.x.abs() + up.y.abs() + up.z.abs())
    }

    fn ramp(&self, up: &Vec3, h: f64) -> impl Fn(f64, f64) -> WeightLine {
        let inv_w = 1.0 / self.footprint(up);
        let slope = self.cell * up.z * inv_w;
        let (ux, uy, uz, z0) = (up.x, up.y, up.z, self.z0);
        move |x, y| {
            let p0 = ux * x + uy * y + uz * z0;
            WeightLine { a: 0.5 + (h - p0) * inv_w, b: slope }
        }
    }

    /// Fluid volume below the plane `u.x = h` and its derivative in `h`.
    pub fn volume_below(&self, up: &Vec3, h: f64) -> (f64, f64) {
        let line = self.ramp(up, h);
        let inv_w = 1.0 / self.footprint(up);
        let mut v = 0.0;
        let mut ramp_cells = 0.0;
        for c in &self.columns {
            let w = line(c.x, c.y);
            for &(a, b) in &self.runs[c.runs.0 as usize..c.runs.1 as usize] {
                for seg in w.segments(a as i64, b as i64) {
                    let s = seg.sums();
                    v += s[0];
                    if seg.ramp {
                        ramp_cells += (seg.hi - seg.lo) as f64;
                    }
                }
            }
        }
        let cv = self.cell.powi(3);
        (v * cv, ramp_cells * cv * inv_w)
    }

    /// Moments of the fluid below the plane `u.x = h`.
    pub fn moments_below(&self, up: &Vec3, h: f64) -> Moments {
        let line = self.ramp(up, h);
        self.moments_with(line)
    }

    fn moments_with(&self, weight: impl Fn(f64, f64) -> WeightLine) -> Moments {
        let (s, z0) = (self.cell, self.z0);
        let mut m0 = 0.0;
        let mut f = [0.0; 3];
        let mut q = [0.0; 6];
        for c in &self.columns {
            let w = weight(c.x, c.y);
            let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
            for &(a, b) in &self.runs[c.runs.0 as usize..c.runs.1 as usize] {
                for seg in w.segments(a as i64, b as i64) {
                    let t = seg.sums();
                    w0 += t[0];
                    w1 += t[1];
                    w2 += t[2];
                }
            }
            if w0 == 0.0 {
                continue;
            }
            let zs = z0 * w0 + s * w1;
            let zz = z0 * z0 * w0 + 2.0 * z0 * s * w1 + s * s * w2;
            m0 += w0;
            f[0] += c.x * w0;
            f[1] += c.y * w0;
            f[2] += zs;
            q[0] += c.x * c.x * w0;
            q[1] += c.x * c.y * w0;
            q[2] += c.x * zs;
            q[3] += c.y * c.y * w0;
            q[4] += c.y * zs;
            q[5] += zz;
        }
        let cv = s.powi(3);
        let own = s * s / 12.0 * m0;
        let second = Mat3::new(
            q[0] + own,
            q[1],
            q[2],
            q[1],
            q[3] + own,
            q[4],
            q[2],
            q[4],
            q[5] + own,
        ) * cv;
        Moments { volume: m0 * cv, first: Vec3::new(f[0], f[1], f[2]) * cv, second }
    }
}

/// Cell weight `clamp(a - b k, 0, 1)` along a column.
#[derive(Debug, Clone, Copy)]
struct WeightLine {
    a: f64,
    b: f64,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    lo: i64,
    hi: i64,
    /// weight = c0 + c1 k over the segment.
    c0: f64,
    c1: f64,
    ramp: bool,
}

impl WeightLine {
    const FULL: Self = Self { a: 1.0, b: 0.0 };

    fn segments(&self, lo: i64, hi: i64) -> impl Iterator<Item = Segment> {
        let cut = |x: f64| -> i64 {
            if x.is_nan() {
                return lo;
            }
            (x.clamp(lo as f64 - 1.0, hi as f64).floor() as i64 + 1).clamp(lo, hi)
        };
        let (mut c1, mut c2) = if self.b == 0.0 {
            (hi, hi)
        } else {
            (cut((self.a - 1.0) / self.b), cut(self.a / self.b))
        };
        if c1 > c2 {
            std::mem::swap(&mut c1, &mut c2);
        }
        let line = *self;
        [(lo, c1), (c1, c2), (c2, hi)].into_iter().filter(|(l, h)| h > l).filter_map(move |(l, h)| {
            let mid = 0.5 * (l + h - 1) as f64;
            let g = line.a - line.b * mid;
            if g >= 1.0 {
                Some(Segment { lo: l, hi: h, c0: 1.0, c1: 0.0, ramp: false })
            } else if g <= 0.0 {
                None
            } else {
                Some(Segment { lo: l, hi: h, c0: line.a, c1: -line.b, ramp: true })
            }
        })
    }
}

impl Segment {
    /// `sum w k^p` for `p = 0, 1, 2`.
    fn sums(&self) -> [f64; 3] {
        let p = power_sums(self.lo, self.hi);
        [
            self.c0 * p[0] + self.c1 * p[1],
            self.c0 * p[1] + self.c1 * p[2],
            self.c0 * p[2] + self.c1 * p[3],
        ]
    }
}

/// `sum_{k=lo}^{hi-1} k^p` for `p = 0..=3`.
fn power_sums(lo: i64, hi: i64) -> [f64; 4] {
    let f = |n: i64| -> [f64; 4] {
        let n = n as f64;
        let s1 = n * (n - 1.0) / 2.0;
        [n, s1, (n - 1.0) * n * (2.0 * n - 1.0) / 6.0, s1 * s1]
    };
    let (a, b) = (f(lo), f(hi));
    [b[0] - a[0], b[1] - a[1], b[2] - a[2], b[3] - a[3]]
}

/// Fill state for one `(sigma, g_dir)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidConfig {
    pub sigma: f64,
    /// Body-frame gravity direction `g_L`.
    pub g_dir: UnitVector,
    /// Plane offset `h*` along the up direction `-g_L`, m.
    pub h_star: f64,
    /// Quadrature volume below the plane, m^3.
    pub volume: f64,
    /// `|Vol - sigma V_T|`, m^3.
    pub residual: f64,
    pub iterations: usize,
}

/// Finds `h*` with `Vol({-g_L . x <= h*}) = sigma V_T`. Newton steps on the
/// piecewise-linear volume curve, kept inside a bisection bracket; a step
/// that leaves the bracket is replaced by the midpoint.
pub fn solve_plane_offset(cavity: &Cavity, sigma: f64, g_dir: &UnitVector) -> FluidConfig {
    let sigma = sigma.clamp(0.0, 1.0);
    let up = -g_dir.as_vec();
    let vt = cavity.volume();
    let target = sigma * vt;
    let (mut lo, mut hi) = cavity.support(&up);
    let done = |h: f64, volume: f64, iterations: usize| FluidConfig {
        sigma,
        g_dir: *g_dir,
        h_star: h,
        volume,
        residual: (volume - target).abs(),
        iterations,
    };
    if sigma == 0.0 {
        return done(lo, 0.0, 0);
    }
    if sigma == 1.0 {
        return done(hi, vt, 0);
    }
    let tol = 1e-10 * vt;
    let mut h = lo + sigma * (hi - lo);
    let mut best = (h, f64::NAN);
    for it in 1..=MAX_PLANE_ITERATIONS {
        let (v, dv) = cavity.volume_below(&up, h);
        best = (h, v);
        let r = v - target;
        if r.abs() <= tol {
            return done(h, v, it);
        }
        if r < 0.0 {
            lo = h;
        } else {
            hi = h;
        }
        let newton = if dv > 0.0 { h - r / dv } else { f64::NAN };
        h = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    done(best.0, best.1, MAX_PLANE_ITERATIONS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidMoments {
    pub volume: f64,
    /// Fluid centroid relative to `O`; `None` when empty.
    pub centroid: Option<Vec3>,
    /// `J_{F,O} = rho int (|x|^2 I - x x^T) dV`.
    pub inertia_about_o: Mat3,
    pub first: Vec3,
}

pub fn fluid_moments(cavity: &Cavity, config: &FluidConfig) -> FluidMoments {
    let m = if config.sigma >= 1.0 {
        *cavity.full_moments()
    } else if config.sigma <= 0.0 {
        Moments { volume: 0.0, first: Vec3::zeros(), second: Mat3::zeros() }
    } else {
        cavity.moments_below(&-config.g_dir.as_vec(), config.h_star)
    };
    FluidMoments {
        volume: m.volume,
        centroid: m.centroid(),
        inertia_about_o: m.inertia_per_density() * cavity.tank().density,
        first: m.first,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadInertia {
    /// `J_L` about the combined centre of mass, kg m^2.
    pub inertia: Mat3,
    /// Combined centre of mass relative to `O`, m.
    pub o_cm: Vec3,
}

/// Tank plus fluid inertia about the combined centre of mass.
pub fn load_inertia(cavity: &Cavity, config: &FluidConfig, m_hat: f64) -> LoadInertia {
    let fluid = fluid_moments(cavity, config);
    let tank = cavity.full_moments();
    let m_t = cavity.tank().empty_mass;
    let mut o_cm = tank.first * (m_t / (m_hat * tank.volume));
    if fluid.volume > 0.0 {
        o_cm += fluid.first * ((m_hat - m_t) / (m_hat * fluid.volume));
    }
    let j = cavity.tank_inertia() + fluid.inertia_about_o - point_mass(&o_cm, m_hat);
    LoadInertia { inertia: symmetrize(&j), o_cm }
}

/// Direct evaluation at one fill fraction and gravity direction, with the
/// mass implied by `sigma`.
pub fn inertia_at(cavity: &Cavity, sigma: f64, g_dir: &UnitVector) -> (LoadInertia, FluidConfig) {
    let cfg = solve_plane_offset(cavity, sigma, g_dir);
    let m_hat = cavity.mass().mass_at(cfg.sigma);
    (load_inertia(cavity, &cfg, m_hat), cfg)
}

/// `m (|o|^2 I - o o^T)`.
fn point_mass(o: &Vec3, m: f64) -> Mat3 {
    (Mat3::identity() * o.norm_squared() - o * o.transpose()) * m
}

fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Node counts along `sigma`, polar angle and azimuth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LutGrid {
    pub n_sigma: usize,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl Default for LutGrid {
    fn default() -> Self {
        Self { n_sigma: 21, n_theta: 13, n_phi: 24 }
    }
}

impl LutGrid {
    pub fn new(n_sigma: usize, n_theta: usize, n_phi: usize) -> Result<Self, LutError> {
        let g = Self { n_sigma, n_theta, n_phi };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), LutError> {
        let too_big = |n: usize| n > u32::MAX as usize;
        if self.n_sigma < 2 || self.n_theta < 2 || self.n_phi < 2 {
            return Err(LutError::InvalidGrid(format!("every axis needs at least 2 nodes, got {self}")));
        }
        if too_big(self.n_sigma) || too_big(self.n_theta) || too_big(self.n_phi) {
            return Err(LutError::InvalidGrid(format!("{self} does not fit the file format")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_sigma * self.n_theta * self.n_phi
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i_sigma: usize, i_theta: usize, i_phi: usize) -> usize {
        (i_sigma * self.n_theta + i_theta) * self.n_phi + i_phi
    }

    pub fn sigma(&self, i: usize) -> f64 {
        i as f64 / (self.n_sigma - 1) as f64
    }

    pub fn theta(&self, i: usize) -> f64 {
        std::f64::consts::PI * i as f64 / (self.n_theta - 1) as f64
    }

    pub fn phi(&self, i: usize) -> f64 {
        std::f64::consts::TAU * i as f64 / self.n_phi as f64
    }

    /// Gravity direction at a sphere node. The poles are exact so that the
    /// duplicated pole nodes agree.
    pub fn direction(&self, i_theta: usize, i_phi: usize) -> UnitVector {
        let v = if i_theta == 0 {
            Vec3::z()
        } else if i_theta == self.n_theta - 1 {
            -Vec3::z()
        } else {
            let (st, ct) = self.theta(i_theta).sin_cos();
            let (sp, cp) = self.phi(i_phi).sin_cos();
            Vec3::new(st * cp, st * sp, ct)
        };
        UnitVector::new(v).expect("unit by construction")
    }
}

impl std::fmt::Display for LutGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.n_sigma, self.n_theta, self.n_phi)
    }
}

impl FromStr for LutGrid {
    type Err = LutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<_> = s.split('x').map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(a), Ok(b), Ok(c)] => Self::new(*a, *b, *c),
            _ => Err(LutError::InvalidGrid(format!("expected NSIGMAxNTHETAxNPHI, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutNode {
    /// Upper triangle of `J_L`: xx, xy, xz, yy, yz, zz.
    pub j: [f64; 6],
    pub o_cm: [f64; 3],
}

impl LutNode {
    pub fn from_inertia(li: &LoadInertia) -> Self {
        let m = &li.inertia;
        Self {
            j: [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]],
            o_cm: [li.o_cm.x, li.o_cm.y, li.o_cm.z],
        }
    }

    pub fn inertia(&self) -> Mat3 {
        let j = &self.j;
        Mat3::new(j[0], j[1], j[2], j[1], j[3], j[4], j[2], j[4], j[5])
    }

    pub fn o_cm(&self) -> Vec3 {
        Vec3::from(self.o_cm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InertiaLut {
    pub grid: LutGrid,
    pub mass: TankMass,
    pub tank_hash: [u8; 32],
    pub nodes: Vec<LutNode>,
    /// Volume residual per node, relative to `V_T`. Only present on a
    /// freshly built table; the file does not carry it.
    pub residuals: Vec<f64>,
}

/// Evaluates `load_inertia` at every node. Work is split over sphere
/// directions; the output order does not depend on scheduling.
pub fn build_lut(cavity: &Cavity, grid: LutGrid) -> Result<InertiaLut, LutError> {
    grid.validate()?;
    let vt = cavity.volume();
    let dirs: Vec<(usize, usize)> =
        (0..grid.n_theta).flat_map(|it| (0..grid.n_phi).map(move |ip| (it, ip))).collect();
    let columns: Vec<Vec<(LutNode, f64)>> = dirs
        .par_iter()
        .map(|&(it, ip)| {
            let g = grid.direction(it, ip);
            (0..grid.n_sigma)
                .map(|is| {
                    let (li, cfg) = inertia_at(cavity, grid.sigma(is), &g);
                    (LutNode::from_inertia(&li), cfg.residual / vt)
                })
                .collect()
        })
        .collect();
    let mut nodes = vec![LutNode { j: [0.0; 6], o_cm: [0.0; 3] }; grid.len()];
    let mut residuals = vec![0.0; grid.len()];
    for (&(it, ip), col) in dirs.iter().zip(&columns) {
        for (is, (node, r)) in col.iter().enumerate() {
            let k = grid.index(is, it, ip);
            nodes[k] = *node;
            residuals[k] = *r;
        }
    }
    Ok(InertiaLut { grid, mass: cavity.mass(), tank_hash: cavity.tank().hash(), nodes, residuals })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutQuery {
    pub inertia: Mat3,
    pub o_cm: Vec3,
    pub fill: FillLevel,
}

impl InertiaLut {
    pub fn node(&self, i_sigma: usize, i_theta: usize, i_phi: usize) -> &LutNode {
        &self.nodes[self.grid.index(i_sigma, i_theta, i_phi)]
    }

    /// Trilinear interpolation in `(sigma, theta, phi)` at body-frame gravity
    /// `g_L`, azimuth wrapping around.
    ///
    /// Along `sigma` the nodes are blended as moments about the reference
    /// point (`J_O` and `m O_cm`, with each node's implied mass), which vary
    /// almost linearly with the fill fraction; the centre-of-mass shift is
    /// quadratic in the fluid mass and is reapplied at the query mass before
    /// the angular blend.
    pub fn interpolate(&self, sigma: f64, g_dir: &UnitVector) -> (Mat3, Vec3) {
        let g = self.grid;
        let sigma = sigma.clamp(0.0, 1.0);
        let v = g_dir.as_vec();
        let theta = v.z.clamp(-1.0, 1.0).acos();
        let phi = v.y.atan2(v.x).rem_euclid(std::f64::consts::TAU);
        let axis = |x: f64, n: usize| -> (usize, f64) {
            let i = (x.floor().max(0.0) as usize).min(n - 2);
            (i, (x - i as f64).clamp(0.0, 1.0))
        };
        let (is, ts) = axis(sigma * (g.n_sigma - 1) as f64, g.n_sigma);
        let (it, tt) = axis(theta / std::f64::consts::PI * (g.n_theta - 1) as f64, g.n_theta);
        let fp = phi / std::f64::consts::TAU * g.n_phi as f64;
        let ip0 = (fp.floor() as usize).min(g.n_phi - 1);
        let tp = (fp - ip0 as f64).clamp(0.0, 1.0);
        let ip1 = (ip0 + 1) % g.n_phi;
        let m = self.mass.mass_at(sigma);
        let along_sigma = |it: usize, ip: usize| -> (Mat3, Vec3) {
            let mut j_o = Mat3::zeros();
            let mut first = Vec3::zeros();
            for (ds, ws) in [(0, 1.0 - ts), (1, ts)] {
                let m_node = self.mass.mass_at(g.sigma(is + ds));
                let n = self.node(is + ds, it, ip);
                let o = n.o_cm();
                j_o += (n.inertia() + point_mass(&o, m_node)) * ws;
                first += o * (m_node * ws);
            }
            let o_cm = first / m;
            (j_o - point_mass(&o_cm, m), o_cm)
        };
        let mut j = Mat3::zeros();
        let mut o_cm = Vec3::zeros();
        for (dt, wt) in [(0, 1.0 - tt), (1, tt)] {
            for (ip, wp) in [(ip0, 1.0 - tp), (ip1, tp)] {
                let w = wt * wp;
                if w == 0.0 {
                    continue;
                }
                let (jc, oc) = along_sigma(it + dt, ip);
                j += jc * w;
                o_cm += oc * w;
            }
        }
        (symmetrize(&j), o_cm)
    }

    /// `J_L` and `O_cm` for an estimated mass and load attitude.
    pub fn query(&self, m_hat: f64, r_l: &Rotation) -> Result<LutQuery, LutError> {
        let fill = self.mass.fill_level(m_hat)?;
        let g = UnitVector::new(-r_l.transpose().rotate(&Vec3::z())).expect("rotated unit vector");
        let (inertia, o_cm) = self.interpolate(fill.sigma, &g);
        Ok(LutQuery { inertia, o_cm, fill })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), LutError> {
        self.grid.validate()?;
        let mut buf = Vec::with_capacity(LUT_HEADER_LEN + self.nodes.len() * LUT_RECORD_LEN);
        buf.extend_from_slice(LUT_MAGIC);
        for v in [LUT_VERSION, self.grid.n_sigma as u32, self.grid.n_theta as u32, self.grid.n_phi as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.mass.empty_mass, self.mass.density, self.mass.volume] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.tank_hash);
        for n in &self.nodes {
            for v in n.j.iter().chain(&n.o_cm) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, LutError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < LUT_HEADER_LEN {
            if buf.len() >= 4 && &buf[..4] != LUT_MAGIC {
                return Err(LutError::BadMagic);
            }
            return Err(LutError::Truncated { expected: LUT_HEADER_LEN, got: buf.len() });
        }
        if &buf[..4] != LUT_MAGIC {
            return Err(LutError::BadMagic);
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != LUT_VERSION {
            return Err(LutError::UnsupportedVersion(version));
        }
        let grid = LutGrid::new(u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize)?;
        let mass = TankMass { empty_mass: f64_at(20), density: f64_at(28), volume: f64_at(36) };
        let mut tank_hash = [0u8; 32];
        tank_hash.copy_from_slice(&buf[44..76]);
        let expected = LUT_HEADER_LEN + grid.len() * LUT_RECORD_LEN;
        if buf.len() != expected {
            return Err(LutError::Truncated { expected, got: buf.len() });
        }
        let nodes = (0..grid.len())
            .map(|k| {
                let base = LUT_HEADER_LEN + k * LUT_RECORD_LEN;
                let v = |i: usize| f64_at(base + 8 * i);
                LutNode { j: [v(0), v(1), v(2), v(3), v(4), v(5)], o_cm: [v(6), v(7), v(8)] }
            })
            .collect();
        Ok(Self { grid, mass, tank_hash, nodes, residuals: Vec::new() })
    }

    pub fn save(&self, path: &Path) -> Result<(), LutError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LutError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Successive table queries with `Jdot_L` by backward differencing.
#[derive(Debug, Clone, Default)]
pub struct InertiaTracker {
    prev: Option<(f64, Mat3)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedInertia {
    pub inertia: Mat3,
    pub inertia_rate: Mat3,
    pub o_cm: Vec3,
    pub fill: FillLevel,
}

impl InertiaTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rate is zero on the first call and whenever time did not advance.
    pub fn update(&mut self, t: f64, j: Mat3) -> Mat3 {
        let rate = match self.prev {
            Some((t0, j0)) if t > t0 => (j - j0) / (t - t0),
            _ => Mat3::zeros(),
        };
        self.prev = Some((t, j));
        rate
    }

    pub fn query(&mut self, lut: &InertiaLut, t: f64, m_hat: f64, r_l: &Rotation) -> Result<TrackedInertia, LutError> {
        let q = lut.query(m_hat, r_l)?;
        let rate = self.update(t, q.inertia);
        Ok(TrackedInertia { inertia: q.inertia, inertia_rate: rate, o_cm: q.o_cm, fill: q.fill })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_box(m_t: f64, rho: f64) -> TankGeometry {
        TankGeometry { shape: TankShape::Box { a: 1.0, b: 1.0, c: 1.0 }, empty_mass: m_t, density: rho, reference: None }
    }

    fn rel_frob(a: &Mat3, b: &Mat3) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn down() -> UnitVector {
        UnitVector::neg_e3()
    }

    #[test]
    fn fill_level_examples() {
        let tm = TankMass { empty_mass: 2.0, density: 1000.0, volume: 0.01 };
        assert_eq!(tm.fill_level(7.0).unwrap().sigma, 0.5);
        assert_eq!(tm.fill_level(2.0).unwrap().sigma, 0.0);
        assert_eq!(tm.fill_level(12.0).unwrap().sigma, 1.0);
        assert!(!tm.fill_level(12.0).unwrap().clamped);
        assert!(tm.fill_level(12.5).unwrap().clamped);
        assert!(matches!(tm.fill_level(1.99), Err(LutError::MassBelowEmpty { .. })));
        let f = tm.fill_level(1.999).unwrap();
        assert_eq!(f.sigma, 0.0);
    }

    #[test]
    fn power_sums_match_direct() {
        for (lo, hi) in [(0, 1), (3, 17), (-5, 4), (10, 10)] {
            let mut d = [0.0; 4];
            for k in lo..hi {
                let k = k as f64;
                d[0] += 1.0;
                d[1] += k;
                d[2] += k * k;
                d[3] += k * k * k;
            }
            let p = power_sums(lo, hi);
            for i in 0..4 {
                assert!((p[i] - d[i]).abs() < 1e-9, "{lo}..{hi} p{i}");
            }
        }
    }

    #[test]
    fn ramp_segments_match_pointwise_weights() {
        for (a, b) in [(3.7, 0.31), (-2.0, -0.4), (0.5, 0.0), (40.0, 0.9), (5.5, 1.0)] {
            let line = WeightLine { a, b };
            let mut direct = [0.0; 3];
            for k in 2..30 {
                let w = (a - b * k as f64).clamp(0.0, 1.0);
                direct[0] += w;
                direct[1] += w * k as f64;
                direct[2] += w * (k * k) as f64;
            }
            let mut got = [0.0; 3];
            for s in line.segments(2, 30) {
                let t = s.sums();
                for i in 0..3 {
                    got[i] += t[i];
                }
            }
            for i in 0..3 {
                assert!((got[i] - direct[i]).abs() < 1e-9, "a={a} b={b} i={i}: {} vs {}", got[i], direct[i]);
            }
        }
    }

    #[test]
    fn primitive_volumes_at_default_resolution() {
        let shapes = [
            TankShape::Box { a: 0.4, b: 0.25, c: 0.3 },
            TankShape::Cylinder { radius: 0.15, height: 0.5 },
            TankShape::Sphere { radius: 0.2 },
        ];
        for shape in shapes {
            let tank = TankGeometry { shape, empty_mass: 1.0, density: 1000.0, reference: None };
            let cav = Cavity::new(&tank, Resolution::default()).unwrap();
            let exact = tank.analytic_volume().unwrap();
            assert!((cav.volume() - exact).abs() / exact < 2e-3, "{:?}: {} vs {exact}", tank.shape, cav.volume());
        }
    }

    #[test]
    fn plane_examples_on_unit_box() {
        let cav = Cavity::new(&unit_box(1.0, 1000.0), Resolution::new(32).unwrap()).unwrap();
        let (lo, hi) = cav.support(&Vec3::z());
        let c0 = solve_plane_offset(&cav, 0.0, &down());
        assert_eq!(c0.h_star, lo);
        assert_eq!(c0.volume, 0.0);
        let c1 = solve_plane_offset(&cav, 1.0, &down());
        assert_eq!(c1.h_star, hi);
        let half = solve_plane_offset(&cav, 0.5, &down());
        assert!(half.h_star.abs() < 1e-6, "{}", half.h_star);
        assert!(half.residual <= VOLUME_TOL * cav.volume());
        assert!(half.iterations <= MAX_PLANE_ITERATIONS);
        assert_eq!(cav.volume_below(&Vec3::z(), lo).0, 0.0);
        assert_eq!(cav.volume_below(&Vec3::z(), hi).0, cav.volume());
    }

    #[test]
    fn full_unit_box_inertia() {
        let rho = 1000.0;
        let cav = Cavity::new(&unit_box(1.0, rho), Resolution::R128).unwrap();
        let cfg = solve_plane_offset(&cav, 1.0, &down());
        let f = fluid_moments(&cav, &cfg);
        let m = rho;
        let exact = Mat3::identity() * (m / 6.0);
        assert!(rel_frob(&f.inertia_about_o, &exact) < 5e-3);
        assert!(f.centroid.unwrap().norm() < 1e-12);
    }

    #[test]
    fn half_box_centroid_and_inertia() {
        let rho = 1000.0;
        let cav = Cavity::new(&unit_box(1e-3 * rho, rho), Resolution::R128).unwrap();
        let cfg = solve_plane_offset(&cav, 0.5, &down());
        let f = fluid_moments(&cav, &cfg);
        let c = f.centroid.unwrap();
        assert!((c.z + 0.25).abs() < 1e-3 && c.x.abs() < 1e-9 && c.y.abs() < 1e-9, "{c}");
        let m_hat = cav.mass().mass_at(0.5);
        let li = load_inertia(&cav, &cfg, m_hat);
        let mf = 0.5 * rho;
        let exact = Mat3::from_diagonal(&Vec3::new(mf * 1.25 / 12.0, mf * 1.25 / 12.0, mf * 2.0 / 12.0));
        assert!(rel_frob(&li.inertia, &exact) < 1e-2, "{}", li.inertia);
    }

    #[test]
    fn full_sphere_inertia() {
        let r = 0.3;
        let rho = 800.0;
        let tank = TankGeometry { shape: TankShape::Sphere { radius: r }, empty_mass: 1.0, density: rho, reference: None };
        let cav = Cavity::new(&tank, Resolution::R128).unwrap();
        let cfg = solve_plane_offset(&cav, 1.0, &down());
        let f = fluid_moments(&cav, &cfg);
        let m = rho * tank.analytic_volume().unwrap();
        let exact = Mat3::identity() * (0.4 * m * r * r);
        assert!(rel_frob(&f.inertia_about_o, &exact) < 5e-3);
    }

    #[test]
    fn load_inertia_branches() {
        let tank = TankGeometry {
            shape: TankShape::Box { a: 0.4, b: 0.3, c: 0.2 },
            empty_mass: 2.0,
            density: 1000.0,
            reference: Some([0.05, -0.02, 0.01]),
        };
        let cav = Cavity::new(&tank, Resolution::new(48).unwrap()).unwrap();
        // empty: pure tank about its own centroid
        let (li, _) = inertia_at(&cav, 0.0, &down());
        let full = cav.full_moments();
        let c = full.centroid().unwrap();
        assert!((li.o_cm - c).norm() < 1e-12);
        let shifted = cav.tank_inertia() - (Mat3::identity() * c.norm_squared() - c * c.transpose()) * 2.0;
        assert!(rel_frob(&li.inertia, &shifted) < 1e-12);
        let about_c = Moments {
            volume: full.volume,
            first: Vec3::zeros(),
            second: full.second - c * c.transpose() * full.volume,
        };
        assert!(rel_frob(&li.inertia, &(about_c.inertia_per_density() * (2.0 / full.volume))) < 1e-10);

        // full, centred reference: no parallel-axis correction
        let centred = TankGeometry { reference: None, ..tank };
        let cav = Cavity::new(&centred, Resolution::new(48).unwrap()).unwrap();
        let (li, _) = inertia_at(&cav, 1.0, &down());
        assert!(li.o_cm.norm() < 1e-12);
        let m = cav.mass().mass_at(1.0);
        let direct = cav.full_moments().inertia_per_density() * (m / cav.volume());
        assert!(rel_frob(&li.inertia, &direct) < 1e-12);
    }

    fn spd_triangle(j: &Mat3) -> bool {
        if (j - j.transpose()).norm() > 1e-12 * j.norm() {
            return false;
        }
        let e = j.symmetric_eigenvalues();
        let tol = 1e-9 * e.max();
        e.min() > 0.0 && (0..3).all(|i| e[i] <= e[(i + 1) % 3] + e[(i + 2) % 3] + tol)
    }

    #[test]
    fn small_lut_invariants_and_round_trip() {
        let tank = TankGeometry {
            shape: TankShape::Box { a: 0.4, b: 0.3, c: 0.2 },
            empty_mass: 1.5,
            density: 1000.0,
            reference: None,
        };
        let cav = Cavity::new(&tank, Resolution::new(24).unwrap()).unwrap();
        let grid = LutGrid::new(5, 5, 8).unwrap();
        let lut = build_lut(&cav, grid).unwrap();
        assert!(lut.residuals.iter().all(|r| *r <= VOLUME_TOL));
        for n in &lut.nodes {
            assert!(spd_triangle(&n.inertia()));
        }
        let top = lut.node(4, 0, 0).inertia();
        for it in 0..5 {
            for ip in 0..8 {
                assert!((lut.node(4, it, ip).inertia() - top).norm() <= 1e-12 * top.norm());
            }
        }
        // node reproduction through the attitude query
        for &(is, it, ip) in &[(1, 1, 3), (3, 2, 7), (2, 4, 5), (0, 0, 0)] {
            let g = grid.direction(it, ip);
            let m = lut.mass.mass_at(grid.sigma(is));
            let (j, o) = lut.interpolate(lut.mass.fill_level(m).unwrap().sigma, &g);
            let n = lut.node(is, it, ip);
            assert!((j - n.inertia()).norm() < 1e-12, "{is} {it} {ip}");
            assert!((o - n.o_cm()).norm() < 1e-12);
        }
        let mut bytes = Vec::new();
        lut.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), LUT_HEADER_LEN + grid.len() * LUT_RECORD_LEN);
        assert_eq!(&bytes[..4], b"ALUT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1.5);
        assert_eq!(&bytes[44..76], &tank.hash());
        assert_eq!(f64::from_le_bytes(bytes[76..84].try_into().unwrap()), lut.nodes[0].j[0]);
        let back = InertiaLut::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.nodes, lut.nodes);
        assert_eq!(back.grid, lut.grid);
        assert_eq!(back.mass, lut.mass);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
        assert!(matches!(InertiaLut::read_from(&mut &bytes[..100]), Err(LutError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(InertiaLut::read_from(&mut bad.as_slice()), Err(LutError::BadMagic)));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(InertiaLut::read_from(&mut v2.as_slice()), Err(LutError::UnsupportedVersion(2))));
    }

    #[test]
    fn sigma_interpolation_is_linear() {
        let grid = LutGrid::new(3, 2, 2).unwrap();
        let nodes = (0..grid.len())
            .map(|k| {
                let is = k / (grid.n_theta * grid.n_phi);
                let s = grid.sigma(is);
                LutNode { j: [1.0 + s, 0.1 * s, 0.0, 2.0 + 3.0 * s, 0.0, 3.0], o_cm: [0.0; 3] }
            })
            .collect();
        let lut = InertiaLut {
            grid,
            mass: TankMass { empty_mass: 1.0, density: 1.0, volume: 1.0 },
            tank_hash: [0; 32],
            nodes,
            residuals: Vec::new(),
        };
        let (j, o) = lut.interpolate(0.25, &down());
        let (a, _) = lut.interpolate(0.0, &down());
        let (b, _) = lut.interpolate(0.5, &down());
        assert!((j - (a + b) * 0.5).norm() < 1e-15);
        assert_eq!(o, Vec3::zeros());
    }

    #[test]
    fn first_moment_interpolates_linearly() {
        // m(sigma) = 1 + sigma; nodes carry m O_cm = (sigma, 0, -2 sigma)
        let grid = LutGrid::new(3, 2, 2).unwrap();
        let mass = TankMass { empty_mass: 1.0, density: 1.0, volume: 1.0 };
        let nodes = (0..grid.len())
            .map(|k| {
                let s = grid.sigma(k / (grid.n_theta * grid.n_phi));
                let o = Vec3::new(s, 0.0, -2.0 * s) / mass.mass_at(s);
                let j = Mat3::identity() - point_mass(&o, mass.mass_at(s));
                LutNode::from_inertia(&LoadInertia { inertia: j, o_cm: o })
            })
            .collect();
        let lut = InertiaLut { grid, mass, tank_hash: [0; 32], nodes, residuals: Vec::new() };
        let (j, o) = lut.interpolate(0.25, &down());
        let expect = Vec3::new(0.25, 0.0, -0.5) / 1.25;
        assert!((o - expect).norm() < 1e-15);
        assert!((j - (Mat3::identity() - point_mass(&expect, 1.25))).norm() < 1e-14);
    }

    #[test]
    fn sphere_table_is_orientation_invariant() {
        let tank = TankGeometry { shape: TankShape::Sphere { radius: 0.2 }, empty_mass: 1.0, density: 1000.0, reference: None };
        let cav = Cavity::new(&tank, Resolution::new(48).unwrap()).unwrap();
        let grid = LutGrid::new(3, 13, 24).unwrap();
        let lut = build_lut(&cav, grid).unwrap();
        let eig = |j: Mat3| {
            let mut e: Vec<f64> = j.symmetric_eigenvalues().iter().copied().collect();
            e.sort_by(f64::total_cmp);
            e
        };
        for is in 0..3 {
            let e0 = eig(lut.node(is, 0, 0).inertia());
            for it in 0..13 {
                for ip in 0..24 {
                    let e = eig(lut.node(is, it, ip).inertia());
                    for k in 0..3 {
                        assert!((e[k] - e0[k]).abs() <= 5e-3 * e0[k], "sigma {is} node {it},{ip}");
                    }
                }
            }
        }
        // the body-frame tensor turns with g_L; its spectrum does not, and a
        // yaw leaves g_L unchanged
        let m = lut.mass.mass_at(0.5);
        let a = lut.query(m, &Rotation::identity()).unwrap().inertia;
        let yaw = lut.query(m, &Rotation::from_axis_angle(&Vec3::z(), 1.1)).unwrap().inertia;
        assert!(rel_frob(&yaw, &a) < 1e-12);
        let ea = eig(a);
        for (axis, angle) in [(Vec3::new(1.0, 2.0, 0.5), 0.7), (Vec3::x(), 2.0), (Vec3::new(-0.3, 0.2, 1.0), 2.9)] {
            let b = lut.query(m, &Rotation::from_axis_angle(&axis, angle)).unwrap().inertia;
            let eb = eig(b);
            for k in 0..3 {
                assert!((eb[k] - ea[k]).abs() <= 0.01 * ea[k], "{eb:?} vs {ea:?}");
            }
        }
    }

    #[test]
    fn cube_equivariance_under_axis_permutation() {
        let cav = Cavity::new(&unit_box(2.0, 1000.0), Resolution::new(32).unwrap()).unwrap();
        for v in [Vec3::new(0.3, -0.5, -0.8), Vec3::new(0.9, 0.1, -0.2)] {
            let g1 = UnitVector::new(v).unwrap();
            let g2 = UnitVector::new(Vec3::new(v.y, v.z, v.x)).unwrap();
            let (a, _) = inertia_at(&cav, 0.35, &g1);
            let (b, _) = inertia_at(&cav, 0.35, &g2);
            let (da, db) = (a.inertia.diagonal(), b.inertia.diagonal());
            // x -> z, y -> x, z -> y
            let perm = Vec3::new(da.y, da.z, da.x);
            assert!((perm - db).norm() <= 1e-9 * da.norm(), "{da} {db}");
        }
    }

    #[test]
    fn resolution_self_convergence() {
        let tank = TankGeometry {
            shape: TankShape::Cylinder { radius: 0.15, height: 0.4 },
            empty_mass: 1.0,
            density: 1000.0,
            reference: None,
        };
        let grid = LutGrid::new(3, 3, 4).unwrap();
        let a = build_lut(&Cavity::new(&tank, Resolution::R64).unwrap(), grid).unwrap();
        let b = build_lut(&Cavity::new(&tank, Resolution::R128).unwrap(), grid).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert!(rel_frob(&x.inertia(), &y.inertia()) < 0.02);
        }
    }

    #[test]
    fn tracker_differences_queries() {
        let mut tr = InertiaTracker::new();
        assert_eq!(tr.update(0.0, Mat3::identity()), Mat3::zeros());
        let r = tr.update(0.1, Mat3::identity() * 1.5);
        assert!((r - Mat3::identity() * 5.0).norm() < 1e-12);
    }

    #[test]
    fn voxel_tank_matches_box() {
        let n = 8;
        let tank = TankGeometry {
            shape: TankShape::Voxels { dims: [n, n, n], cell: 1.0 / n as f64, origin: [-0.5; 3], mask: "1".repeat(n * n * n) },
            empty_mass: 1.0,
            density: 1000.0,
            reference: None,
        };
        let vox = Cavity::new(&tank, Resolution::default()).unwrap();
        let bx = Cavity::new(&unit_box(1.0, 1000.0), Resolution::new(n).unwrap()).unwrap();
        assert!((vox.volume() - 1.0).abs() < 1e-12);
        let g = UnitVector::new(Vec3::new(0.2, 0.4, -0.9)).unwrap();
        let (a, _) = inertia_at(&vox, 0.4, &g);
        let (b, _) = inertia_at(&bx, 0.4, &g);
        assert!(rel_frob(&a.inertia, &b.inertia) < 1e-12);
        assert!(tank.contains(&Vec3::new(0.49, -0.49, 0.0)));
        assert!(!tank.contains(&Vec3::new(0.51, 0.0, 0.0)));
    }

    #[test]
    fn tank_json_and_validation() {
        let js = r#"{"shape": {"type": "cylinder", "radius": 0.1, "height": 0.3}, "empty_mass": 0.8, "density": 1000}"#;
        let t: TankGeometry = serde_json::from_str(js).unwrap();
        t.validate().unwrap();
        assert_eq!(t.reference_point(), Vec3::zeros());
        let bad = TankGeometry { empty_mass: -1.0, density: 0.0, ..t.clone() };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("empty_mass") && err.contains("density"));
        assert_ne!(t.hash(), TankGeometry { density: 999.0, ..t }.hash());
        assert!("21x13x24".parse::<LutGrid>().unwrap() == LutGrid::default());
        assert!("1x13x24".parse::<LutGrid>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn volume_monotone_in_offset(
            a in 0.1f64..1.0, b in 0.1f64..1.0, c in 0.1f64..1.0,
            cyl in any::<bool>(),
            ux in -1.0f64..1.0, uy in -1.0f64..1.0, uz in -1.0f64..1.0,
            f1 in 0.0f64..1.0, f2 in 0.0f64..1.0,
        ) {
            let shape = if cyl { TankShape::Cylinder { radius: 0.5 * a, height: c } } else { TankShape::Box { a, b, c } };
            let tank = TankGeometry { shape, empty_mass: 1.0, density: 1.0, reference: None };
            let cav = Cavity::new(&tank, Resolution::new(12).unwrap()).unwrap();
            let u = Vec3::new(ux, uy, uz);
            prop_assume!(u.norm() > 0.1);
            let u = u.normalize();
            let (lo, hi) = cav.support(&u);
            let (h1, h2) = (lo + f1.min(f2) * (hi - lo), lo + f1.max(f2) * (hi - lo));
            let v1 = cav.volume_below(&u, h1).0;
            let v2 = cav.volume_below(&u, h2).0;
            prop_assert!(v1 <= v2 + 1e-15);
            prop_assert!(v1 >= 0.0 && v2 <= cav.volume() * (1.0 + 1e-12));
        }

        #[test]
        fn plane_solve_meets_volume_tolerance(
            sigma in 0.0f64..1.0,
            ux in -1.0f64..1.0, uy in -1.0f64..1.0, uz in -1.0f64..1.0,
        ) {
            let tank = TankGeometry { shape: TankShape::Cylinder { radius: 0.2, height: 0.5 }, empty_mass: 1.0, density: 1000.0, reference: None };
            let cav = Cavity::new(&tank, Resolution::new(16).unwrap()).unwrap();
            let g = Vec3::new(ux, uy, uz);
            prop_assume!(g.norm() > 0.1);
            let cfg = solve_plane_offset(&cav, sigma, &UnitVector::new(g).unwrap());
            prop_assert!(cfg.residual <= VOLUME_TOL * cav.volume());
            prop_assert!(cfg.iterations <= MAX_PLANE_ITERATIONS);
            let (li, _) = inertia_at(&cav, sigma, &UnitVector::new(g).unwrap());
            prop_assert!(spd_triangle(&li.inertia));
        }
    }
}
