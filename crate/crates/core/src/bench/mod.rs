//! Benchmark cases, the run driver and comparison metrics.

mod config;
mod output;

pub use config::{parse_config, parse_config_str, ConfigError, RunSpec, CONFIG_KEYS};
pub use output::{
    read_metrics_csv, read_solid_nodes_csv, write_fluid_vtk, write_metrics_csv, write_outputs, write_plot_script,
    write_solid_nodes_csv, write_solid_vtk, FieldSnapshot, MetricsRow,
};

use std::sync::Arc;

use nalgebra::Vector2;
use thiserror::Error;

use crate::mesh::{build_background_grid, build_disc_mesh, build_leaflet_mesh, side, Point, Rect, SolidMesh};
use crate::schemes::{
    BoundaryFn, Failure, FluidProblem, Scheme, SchemeConfig, SchemeError, Simulation, StepReport, VelocityBc,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    CavityDisc,
    Leaflet,
}

/// Geometry, parameters and resolution of one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCase {
    pub name: String,
    pub kind: CaseKind,
    pub re: f64,
    pub c1_tilde: f64,
    pub rho_r: f64,
    pub mu_r: f64,
    pub dt: f64,
    pub t_end: f64,
    pub nx: usize,
    pub ny: usize,
    /// domain `[0, length] × [0, height]`
    pub length: f64,
    pub height: f64,
    pub solid_triangles: usize,
    pub disc_center: Point,
    pub disc_radius: f64,
    pub lid_speed: f64,
    pub leaflet_height: f64,
    pub leaflet_width: f64,
    /// inflow period
    pub period: f64,
}

const CAVITY_SETS: [(f64, f64, f64, f64); 7] = [
    (100.0, 0.1, 1.0, 1.0),
    (100.0, 1.0, 1.0, 1.0),
    (100.0, 1.0, 2.0, 1.0),
    (100.0, 1.0, 0.5, 1.0),
    (100.0, 1.0, 1.0, 1.5),
    (100.0, 1.0, 1.0, 2.0),
    (500.0, 0.5, 2.0, 2.0),
];

const LEAFLET_SETS: [(f64, f64, f64, f64); 3] = [
    (100.0, 1000.0, 1.0, 1.0),
    (100.0, 1000.0, 1.2, 1.0),
    (300.0, 10000.0, 2.0, 2.0),
];

impl BenchmarkCase {
    fn cavity(set: usize) -> Self {
        let (re, c1_tilde, rho_r, mu_r) = CAVITY_SETS[set - 1];
        BenchmarkCase {
            name: format!("cavity-{set}"),
            kind: CaseKind::CavityDisc,
            re,
            c1_tilde,
            rho_r,
            mu_r,
            dt: if set == 1 { 1e-3 } else { 5e-3 },
            t_end: 10.0,
            nx: 40,
            ny: 40,
            length: 1.0,
            height: 1.0,
            solid_triangles: 1373,
            disc_center: Point::new(0.6, 0.5),
            disc_radius: 0.2,
            lid_speed: 1.0,
            leaflet_height: 0.0,
            leaflet_width: 0.0,
            period: 0.0,
        }
    }

    fn leaflet(set: usize) -> Self {
        let (re, c1_tilde, rho_r, mu_r) = LEAFLET_SETS[set - 1];
        BenchmarkCase {
            name: format!("leaflet-{set}"),
            kind: CaseKind::Leaflet,
            re,
            c1_tilde,
            rho_r,
            mu_r,
            dt: 5e-3,
            t_end: 10.0,
            nx: 189,
            ny: 47,
            length: 4.0,
            height: 1.0,
            solid_triangles: 152,
            disc_center: Point::zeros(),
            disc_radius: 0.0,
            lid_speed: 0.0,
            leaflet_height: 0.8,
            leaflet_width: 0.0212,
            period: 10.0,
        }
    }

    pub fn domain(&self) -> Rect {
        Rect::new(0.0, self.length, 0.0, self.height)
    }

    pub fn build_solid(&self) -> Result<SolidMesh, crate::mesh::MeshError> {
        match self.kind {
            CaseKind::CavityDisc => build_disc_mesh(self.disc_center, self.disc_radius, self.solid_triangles),
            CaseKind::Leaflet => build_leaflet_mesh(
                0.5 * self.length - 0.5 * self.leaflet_width,
                self.leaflet_width,
                self.leaflet_height,
                self.solid_triangles,
            ),
        }
    }

    pub fn boundary_data(&self) -> BoundaryFn {
        match self.kind {
            CaseKind::CavityDisc => {
                let (top, speed) = (self.height, self.lid_speed);
                Arc::new(move |x: &Point, _t| {
                    if x.y >= top - 1e-12 {
                        Vector2::new(speed, 0.0)
                    } else {
                        Vector2::zeros()
                    }
                })
            }
            CaseKind::Leaflet => {
                let (len, period) = (self.length, self.period);
                Arc::new(move |x: &Point, t| {
                    if x.x <= 1e-12 || x.x >= len - 1e-12 {
                        inflow_profile(x.y, t, period)
                    } else {
                        Vector2::zeros()
                    }
                })
            }
        }
    }

    /// Cavity: no-slip walls and a moving lid, corners on the lid. Leaflet: inflow
    /// and outflow profiles, no-slip bottom, symmetry line (`u_y = 0`) on top.
    pub fn build_problem(&self) -> Result<FluidProblem, SchemeError> {
        let bg = build_background_grid(self.nx, self.ny, self.domain())
            .map_err(|e| SchemeError::InvalidArgument(e.to_string()))?;
        let all = side::BOTTOM | side::RIGHT | side::TOP | side::LEFT;
        let bc = match self.kind {
            CaseKind::CavityDisc => VelocityBc::from_sides(&bg, all, 0, self.boundary_data()),
            CaseKind::Leaflet => VelocityBc::from_sides(
                &bg,
                side::BOTTOM | side::LEFT | side::RIGHT,
                side::TOP,
                self.boundary_data(),
            ),
        };
        FluidProblem::new(bg, self.re, bc)
    }

    pub fn scheme_config(&self, scheme: Scheme) -> SchemeConfig {
        SchemeConfig::new(self.re, self.rho_r, self.mu_r, self.c1_tilde, self.dt, self.t_end, scheme)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("re", self.re),
            ("rho_r", self.rho_r),
            ("mu_r", self.mu_r),
            ("dt", self.dt),
            ("length", self.length),
            ("height", self.height),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{k} must be positive, got {v}"));
            }
        }
        if !(self.c1_tilde >= 0.0) {
            return Err(format!("c1_tilde must be non-negative, got {}", self.c1_tilde));
        }
        if !(self.t_end >= 0.0) {
            return Err(format!("t_end must be non-negative, got {}", self.t_end));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err("nx and ny must be at least 1".into());
        }
        match self.kind {
            CaseKind::CavityDisc => {
                if !(self.disc_radius > 0.0) {
                    return Err(format!("disc_radius must be positive, got {}", self.disc_radius));
                }
            }
            CaseKind::Leaflet => {
                if !(self.leaflet_height > 0.0 && self.leaflet_width > 0.0 && self.period > 0.0) {
                    return Err("leaflet_height, leaflet_width and period must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Names accepted by [`preset`].
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for k in 1..=7 {
        names.push(format!("cavity-{k}"));
        names.push(format!("cavity-{k}-coarse"));
    }
    for k in 1..=3 {
        names.push(format!("leaflet-{k}"));
        names.push(format!("leaflet-{k}-coarse"));
        names.push(format!("leaflet-{k}-ci"));
    }
    names
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown preset '{name}'; valid presets: {}", valid.join(", "))]
pub struct UnknownPreset {
    pub name: String,
    pub valid: Vec<String>,
}

/// Full-size presets plus desk-scale twins:
/// `-coarse` halves the resolution on each axis and shortens the horizon,
/// `-ci` (leaflet only) is the 63×16 grid run to `t/T = 0.2`.
pub fn preset(name: &str) -> Result<BenchmarkCase, UnknownPreset> {
    let unknown = || UnknownPreset {
        name: name.to_string(),
        valid: preset_names(),
    };
    let (base, variant) = match name.split_once('-') {
        Some((b, rest)) => match rest.split_once('-') {
            Some((num, v)) => (b, (num, Some(v))),
            None => (b, (rest, None)),
        },
        None => return Err(unknown()),
    };
    let set: usize = variant.0.parse().map_err(|_| unknown())?;
    let mut case = match base {
        "cavity" if (1..=7).contains(&set) => BenchmarkCase::cavity(set),
        "leaflet" if (1..=3).contains(&set) => BenchmarkCase::leaflet(set),
        _ => return Err(unknown()),
    };
    match (case.kind, variant.1) {
        (_, None) => {}
        (CaseKind::CavityDisc, Some("coarse")) => {
            case.nx = 20;
            case.ny = 20;
            case.solid_triangles = 343;
            case.t_end = 2.0;
        }
        (CaseKind::Leaflet, Some("coarse")) => {
            case.nx = 95;
            case.ny = 24;
            case.t_end = 5.0;
        }
        (CaseKind::Leaflet, Some("ci")) => {
            case.nx = 63;
            case.ny = 16;
            case.t_end = 2.0;
        }
        _ => return Err(unknown()),
    }
    case.name = name.to_string();
    Ok(case)
}

/// `ū_x = 1.5 y (2 - y) sin(2πt/T)`, `ū_y = 0`.
pub fn inflow_profile(y: f64, t: f64, period: f64) -> Vector2<f64> {
    Vector2::new(1.5 * y * (2.0 - y) * (2.0 * std::f64::consts::PI * t / period).sin(), 0.0)
}

/// Solid-node data recorded at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub coords: Vec<Point>,
    pub velocities: Vec<Vector2<f64>>,
    /// Euclidean norm of the stacked solid-node velocities
    pub velocity_norm: f64,
    /// `‖Bu‖` after the pressure step
    pub divergence: f64,
    /// `‖Bu‖ / ‖u_{n+2/3}‖_M`, the quantity the pressure solve is converged on
    pub divergence_relative: f64,
    pub fp_iterations: usize,
}

impl Snapshot {
    pub fn displacements<'a>(&'a self, reference: &'a [Point]) -> impl Iterator<Item = Point> + 'a {
        self.coords.iter().zip(reference).map(|(x, r)| x - r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Divergence,
    FixedPointFailure,
    SolverFailure,
}

/// A run that stopped before `t_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEvent {
    pub kind: EventKind,
    pub step: usize,
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub case: String,
    pub scheme: Scheme,
    pub dt: f64,
    pub reference: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub snapshots: Vec<Snapshot>,
    /// set when the run stopped early
    pub event: Option<RunEvent>,
}

impl TimeSeries {
    pub fn completed(&self) -> bool {
        self.event.is_none()
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// Snapshot nearest to `t`, if one lies within `tol`.
    pub fn at(&self, t: f64, tol: f64) -> Option<&Snapshot> {
        self.snapshots
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .filter(|s| (s.t - t).abs() <= tol)
    }

    fn snapshot_or_err(&self, t: f64) -> Result<&Snapshot, MetricError> {
        self.at(t, 0.5 * self.dt + 1e-12).ok_or(MetricError::MissingSnapshot {
            case: self.case.clone(),
            t,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("series '{case}' has no snapshot near t = {t}")]
    MissingSnapshot { case: String, t: f64 },
    #[error("series have different solid node counts ({0} vs {1})")]
    NodeCountMismatch(usize, usize),
}

fn paired<'a>(a: &'a TimeSeries, b: &'a TimeSeries, t: f64) -> Result<(&'a Snapshot, &'a Snapshot), MetricError> {
    let (sa, sb) = (a.snapshot_or_err(t)?, b.snapshot_or_err(t)?);
    if sa.velocities.len() != sb.velocities.len() {
        return Err(MetricError::NodeCountMismatch(sa.velocities.len(), sb.velocities.len()));
    }
    Ok((sa, sb))
}

/// `‖u_a - u_b‖ / ‖u_a‖` over solid-node velocities.
pub fn metric_relative_diff(a: &TimeSeries, b: &TimeSeries, t: f64) -> Result<f64, MetricError> {
    let (sa, sb) = paired(a, b, t)?;
    let diff: f64 = sa.velocities.iter().zip(&sb.velocities).map(|(x, y)| (x - y).norm_squared()).sum();
    Ok(diff.sqrt() / sa.velocity_norm)
}

/// `‖u_a - u_b‖` over solid-node velocities.
pub fn metric_velocity_diff(a: &TimeSeries, b: &TimeSeries, t: f64) -> Result<f64, MetricError> {
    let (sa, sb) = paired(a, b, t)?;
    let diff: f64 = sa.velocities.iter().zip(&sb.velocities).map(|(x, y)| (x - y).norm_squared()).sum();
    Ok(diff.sqrt())
}

/// `‖d_a - d_b‖` over solid-node displacements.
pub fn metric_displacement_diff(a: &TimeSeries, b: &TimeSeries, t: f64) -> Result<f64, MetricError> {
    let (sa, sb) = paired(a, b, t)?;
    let diff: f64 = sa
        .displacements(&a.reference)
        .zip(sb.displacements(&b.reference))
        .map(|(x, y)| (x - y).norm_squared())
        .sum();
    Ok(diff.sqrt())
}

fn snapshot(sim: &Simulation, report: Option<&StepReport>) -> Result<Snapshot, SchemeError> {
    let velocities = sim.solid_node_velocities().map_err(|e| SchemeError::Step {
        step: sim.state.step,
        substep: "snapshot",
        failure: e.into(),
    })?;
    let velocity_norm = velocities.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    Ok(Snapshot {
        step: sim.state.step,
        t: sim.state.t,
        coords: sim.state.solid.cur_coords.clone(),
        velocities,
        velocity_norm,
        divergence: report.map_or(0.0, |r| r.divergence),
        divergence_relative: report.map_or(0.0, |r| r.divergence_relative),
        fp_iterations: report.map_or(0, |r| r.fp_iterations),
    })
}

fn classify(err: &SchemeError) -> (EventKind, usize) {
    match err {
        SchemeError::Step { step, failure, .. } => {
            let kind = match failure {
                Failure::FixedPoint { .. } => EventKind::FixedPointFailure,
                f if f.is_divergence() => EventKind::Divergence,
                _ => EventKind::SolverFailure,
            };
            (kind, *step)
        }
        SchemeError::InvalidArgument(_) => (EventKind::SolverFailure, 0),
    }
}

/// Drives the time loop to `cfg.t_end`, recording a snapshot at step 0, every
/// `snapshot_every` steps and at the last step reached. `observer` sees the
/// simulation after each recorded snapshot.
pub fn run_case_with(
    case: &BenchmarkCase,
    cfg: &SchemeConfig,
    snapshot_every: usize,
    mut observer: impl FnMut(&Simulation, &Snapshot),
) -> Result<TimeSeries, SchemeError> {
    let problem = case.build_problem()?;
    let solid = case
        .build_solid()
        .map_err(|e| SchemeError::InvalidArgument(e.to_string()))?;
    let mut sim = Simulation::new(problem, solid, cfg.clone())?;
    let every = snapshot_every.max(1);
    let mut series = TimeSeries {
        case: case.name.clone(),
        scheme: cfg.scheme,
        dt: cfg.dt,
        reference: sim.state.solid.ref_coords.clone(),
        triangles: sim.state.solid.triangles.clone(),
        snapshots: Vec::new(),
        event: None,
    };
    let first = snapshot(&sim, None)?;
    observer(&sim, &first);
    series.snapshots.push(first);
    let steps = cfg.num_steps();
    let mut last = None;
    for k in 1..=steps {
        match sim.advance() {
            Ok(report) => {
                if k % every == 0 || k == steps {
                    let s = snapshot(&sim, Some(&report))?;
                    observer(&sim, &s);
                    series.snapshots.push(s);
                }
                last = Some(report);
            }
            Err(err) => {
                let (kind, step) = classify(&err);
                series.event = Some(RunEvent {
                    kind,
                    step,
                    t: step as f64 * cfg.dt,
                    message: err.to_string(),
                });
                if series.snapshots.last().map(|s| s.step) != Some(sim.state.step) {
                    if let Ok(s) = snapshot(&sim, last.as_ref()) {
                        observer(&sim, &s);
                        series.snapshots.push(s);
                    }
                }
                break;
            }
        }
    }
    Ok(series)
}

/// [`run_case_with`] using the case's own time step and horizon.
pub fn run_case(case: &BenchmarkCase, scheme: Scheme, snapshot_every: usize) -> Result<TimeSeries, SchemeError> {
    run_case_with(case, &case.scheme_config(scheme), snapshot_every, |_, _| {})
}
