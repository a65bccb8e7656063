use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use fluidlift::harness::{self, HarnessError, Trace, WaypointsFile};
use fluidlift::inertia_lut::{build_lut, Cavity, InertiaLut, LutError, LutGrid, Resolution, TankGeometry, VOLUME_TOL};
use fluidlift::trajectory::{self, Dither, DitherCaps, TrajectoryError};
use fluidlift::{Mat3, Rotation, GRAVITY};

#[derive(Parser)]
#[command(name = "fluidlift", version, about = "Cooperative transport of a fluid-carrying load")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenarios; several run in parallel, one subdirectory each.
    Simulate {
        #[arg(long, required = true, num_args = 1..)]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Windowed excitation check on a trace CSV.
    CheckPe {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long = "T", default_value_t = 2.0)]
        window: f64,
        #[arg(long, default_value_t = 5.0)]
        mu: f64,
        #[arg(long, default_value_t = GRAVITY)]
        gravity: f64,
    },
    /// Precompute the inertia look-up table of a tank.
    BuildLut {
        #[arg(long)]
        tank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        res: usize,
        #[arg(long, default_value = "21x13x24")]
        grid: String,
    },
    /// Interpolate a table for an estimated mass and load attitude.
    Query {
        #[arg(long)]
        lut: PathBuf,
        #[arg(long)]
        mass: f64,
        /// Quaternion `w,x,y,z` or nine row-major rotation entries.
        #[arg(long, allow_hyphen_values = true)]
        attitude: String,
    },
    /// Plan a trajectory through waypoints and print it as CSV.
    Plan {
        #[arg(long)]
        waypoints: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Tension)]
        kind: Kind,
        #[arg(long, default_value_t = 4.0)]
        tau: f64,
        /// Amplitude and frequency `a,w` of a dither on every axis.
        #[arg(long)]
        dither: Option<String>,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cubic,
    Tension,
    Quintic,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(e) => e.exit_code() as u8,
            _ => 2,
        }
    }
}

fn parse_floats(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|e| CliError::Usage(format!("bad number {p:?}: {e}"))))
        .collect()
}

fn parse_attitude(s: &str) -> Result<Rotation, CliError> {
    let v = parse_floats(s)?;
    let r = match v.len() {
        4 => Rotation::from_quaternion([v[0], v[1], v[2], v[3]]),
        9 => Rotation::from_matrix(Mat3::from_row_slice(&v)),
        n => return Err(CliError::Usage(format!("attitude needs 4 or 9 numbers, got {n}"))),
    };
    r.map_err(|e| CliError::Usage(format!("attitude: {e}")))
}

fn simulate(scenarios: &[PathBuf], out: &std::path::Path) -> Result<(), CliError> {
    let loaded = scenarios.iter().map(|p| harness::load_scenario(p)).collect::<Result<Vec<_>, _>>()?;
    let dirs: Vec<PathBuf> = if loaded.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        loaded
            .iter()
            .zip(scenarios)
            .map(|(sc, p)| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| sc.name.clone());
                out.join(stem)
            })
            .collect()
    };
    let results: Vec<_> = loaded.par_iter().zip(&dirs).map(|(sc, dir)| harness::simulate_to_dir(sc, dir)).collect();
    for ((sc, dir), res) in loaded.iter().zip(&dirs).zip(results) {
        let s = res?;
        println!(
            "{}: t = {:.3} s, |x - x_d| = {:.3e} m, |m_hat - m| / m = {:.3e}, worst PE window = {} -> {}",
            sc.name,
            s.terminal.t,
            s.terminal.position_error,
            s.terminal.relative_mass_error,
            s.pe.worst.map_or("n/a".to_string(), |w| format!("{:.4} at t = {:.2}", w.integral, w.t_start)),
            dir.display()
        );
    }
    Ok(())
}

fn check_pe(trace: &std::path::Path, window: f64, mu: f64, gravity: f64) -> Result<(), CliError> {
    let trace = Trace::read(std::fs::File::open(trace)?)?;
    let r = harness::check_pe(&trace, window, mu, gravity)?;
    println!("t_start,integral,verdict");
    for w in &r.windows {
        println!("{},{},{}", w.t_start, w.integral, if w.pass { "PASS" } else { "FAIL" });
    }
    println!(
        "min window integral {:.6} at t = {:.3} s (mu = {}): {}",
        r.min_integral,
        r.window_start,
        mu,
        if r.pass { "PASS" } else { "FAIL" }
    );
    Ok(())
}

fn build(tank: &std::path::Path, out: &std::path::Path, res: usize, grid: &str) -> Result<(), CliError> {
    let tank = TankGeometry::from_json_file(tank)?;
    let grid: LutGrid = grid.parse()?;
    let cavity = Cavity::new(&tank, Resolution::new(res)?)?;
    let lut = build_lut(&cavity, grid)?;
    lut.save(out)?;
    let worst = lut.residuals.iter().copied().fold(0.0, f64::max);
    println!(
        "wrote {} ({} nodes, V_T = {:.6e} m^3, worst volume residual {:.2e} V_T, tolerance {:.0e})",
        out.display(),
        grid.len(),
        lut.mass.volume,
        worst,
        VOLUME_TOL
    );
    Ok(())
}

fn query(lut: &std::path::Path, mass: f64, attitude: &str) -> Result<(), CliError> {
    let lut = InertiaLut::load(lut)?;
    let r = parse_attitude(attitude)?;
    let q = lut.query(mass, &r)?;
    if q.fill.clamped {
        eprintln!("warning: fill fraction clamped by more than 1%");
    }
    println!("sigma {:.9e}", q.fill.sigma);
    for i in 0..3 {
        println!("J {:.9e} {:.9e} {:.9e}", q.inertia[(i, 0)], q.inertia[(i, 1)], q.inertia[(i, 2)]);
    }
    println!("O_cm {:.9e} {:.9e} {:.9e}", q.o_cm.x, q.o_cm.y, q.o_cm.z);
    Ok(())
}

fn plan(
    waypoints: &std::path::Path,
    kind: Kind,
    tau: f64,
    dither: Option<&str>,
    dt: f64,
    out: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let wf: WaypointsFile = serde_json::from_str(&std::fs::read_to_string(waypoints)?)?;
    let wp = wf.waypoints();
    let mut p = match kind {
        Kind::Cubic => trajectory::cubic_spline(&wp)?,
        Kind::Tension => trajectory::tension_spline(&wp, tau)?,
        Kind::Quintic => trajectory::min_jerk_quintic(&wp)?,
    };
    if let Some(d) = dither {
        let v = parse_floats(d)?;
        let [a, w] = v[..] else {
            return Err(CliError::Usage(format!("--dither expects a,w, got {d:?}")));
        };
        let caps = DitherCaps { max_frequency: 20.0, max_accel: 0.5 * GRAVITY, pe_window: 2.0, gravity: GRAVITY };
        let dz = Dither { amplitudes: fluidlift::Vec3::repeat(a), frequencies: vec![w], phases: Dither::default_phases() };
        let (dithered, report) = trajectory::add_dither(&p, dz, &caps)?;
        eprintln!(
            "dither: min window excitation {:.4} -> {:.4}, peak acceleration {:.4} m/s^2",
            report.pe_before, report.pe_after, report.peak_accel
        );
        p = dithered;
    }
    match out {
        Some(path) => p.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?), dt)?,
        None => p.write_csv(std::io::stdout().lock(), dt)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate { scenario, out } => simulate(scenario, out),
        Command::CheckPe { trace, window, mu, gravity } => check_pe(trace, *window, *mu, *gravity),
        Command::BuildLut { tank, out, res, grid } => build(tank, out, *res, grid),
        Command::Query { lut, mass, attitude } => query(lut, *mass, attitude),
        Command::Plan { waypoints, kind, tau, dither, dt, out } => {
            plan(waypoints, *kind, *tau, dither.as_deref(), *dt, out.as_deref())
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
