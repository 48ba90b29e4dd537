//! Three-step operator splitting (convection, diffusion, pressure) followed by
//! the solid update, with three ways of coupling the solid inside the diffusion step.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector2;
use thiserror::Error;

use crate::constitutive::{update_deformation, update_s, SolidState};
use crate::coupling::{
    assemble_fdm_lhs, assemble_fdm_rhs, assemble_fsi_force, assemble_fsi_force_lagged, solid_body_force,
    solid_mass_apply, CouplingError, CouplingParams,
};
use crate::fem::{
    apply_dirichlet, assemble_convection_ls, assemble_diffusion, assemble_divergence, assemble_mass,
    assemble_neumann, expand_to_vector, Patterns, SparseSystem,
};
use crate::linalg::{
    bicgstab, mass_norm, norm2, pcg, CsrMatrix, DegenerateStokes, JacobiPreconditioner, LinalgError, SolverReport,
};
use crate::mesh::{build_transfer_map, node_records, BackgroundMesh, MeshError, Point, SolidMesh, TransferMap, TriangleQuadrature};

/// Velocity magnitude beyond which a run is declared divergent.
pub const BLOWUP_VELOCITY: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    ExplicitIfem,
    ImplicitIfem,
    OneFieldFdm,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::ExplicitIfem, Scheme::ImplicitIfem, Scheme::OneFieldFdm];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ExplicitIfem => "explicit-ifem",
            Scheme::ImplicitIfem => "implicit-ifem",
            Scheme::OneFieldFdm => "one-field-fdm",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scheme '{s}' (expected explicit-ifem, implicit-ifem or one-field-fdm)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub re: f64,
    pub rho_r: f64,
    pub mu_r: f64,
    pub c1_tilde: f64,
    pub fr: f64,
    pub g_dir: Vector2<f64>,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub fp_tol: f64,
    pub fp_max_iters: usize,
    pub convection_tol: f64,
    pub diffusion_tol: f64,
    pub pressure_tol: f64,
    pub max_linear_iters: usize,
    pub quadrature: TriangleQuadrature,
}

impl SchemeConfig {
    pub fn new(re: f64, rho_r: f64, mu_r: f64, c1_tilde: f64, dt: f64, t_end: f64, scheme: Scheme) -> Self {
        SchemeConfig {
            re,
            rho_r,
            mu_r,
            c1_tilde,
            fr: 0.0,
            g_dir: Vector2::new(0.0, -1.0),
            dt,
            t_end,
            scheme,
            fp_tol: 1e-6,
            fp_max_iters: 200,
            convection_tol: 1e-10,
            diffusion_tol: 1e-10,
            pressure_tol: 1e-10,
            max_linear_iters: 5000,
            quadrature: TriangleQuadrature::ThreePoint,
        }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        let bad = |m: String| Err(SchemeError::InvalidArgument(m));
        if !(self.re > 0.0) {
            return bad(format!("Re must be positive, got {}", self.re));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end >= 0.0) {
            return bad(format!("t_end must be non-negative, got {}", self.t_end));
        }
        if !(self.rho_r > 0.0) || !(self.mu_r > 0.0) || !(self.c1_tilde >= 0.0) {
            return bad("rho_r and mu_r must be positive and c1_tilde non-negative".into());
        }
        if !(self.fr >= 0.0) {
            return bad(format!("Fr must be non-negative, got {}", self.fr));
        }
        for (name, v) in [
            ("fp_tol", self.fp_tol),
            ("convection_tol", self.convection_tol),
            ("diffusion_tol", self.diffusion_tol),
            ("pressure_tol", self.pressure_tol),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.fp_max_iters == 0 || self.max_linear_iters == 0 {
            return bad("iteration caps must be at least 1".into());
        }
        Ok(())
    }

    pub fn coupling_params(&self) -> CouplingParams {
        CouplingParams {
            re: self.re,
            rho_r: self.rho_r,
            mu_r: self.mu_r,
            c1_tilde: self.c1_tilde,
        }
    }

    /// Number of steps needed to reach `t_end`.
    pub fn num_steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Physical inputs to [`nondimensionalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub rho_f: f64,
    pub rho_s: f64,
    pub mu_f: f64,
    pub mu_s: f64,
    pub c1: f64,
    pub length: f64,
    pub velocity: f64,
    pub gravity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dimensionless {
    pub re: f64,
    pub rho_r: f64,
    pub mu_r: f64,
    pub c1_tilde: f64,
    pub fr: f64,
}

pub fn nondimensionalize(p: &PhysicalParams) -> Result<Dimensionless, SchemeError> {
    for (name, v) in [
        ("rho_f", p.rho_f),
        ("rho_s", p.rho_s),
        ("mu_f", p.mu_f),
        ("mu_s", p.mu_s),
        ("length", p.length),
        ("velocity", p.velocity),
    ] {
        if !(v > 0.0) {
            return Err(SchemeError::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
    }
    if !(p.gravity >= 0.0) || !(p.c1 >= 0.0) {
        return Err(SchemeError::InvalidArgument("gravity and c1 must be non-negative".into()));
    }
    let u2 = p.velocity * p.velocity;
    Ok(Dimensionless {
        re: p.rho_f * p.velocity * p.length / p.mu_f,
        rho_r: p.rho_s / p.rho_f,
        mu_r: p.mu_s / p.mu_f,
        c1_tilde: p.c1 / (p.rho_f * u2),
        fr: p.gravity * p.length / u2,
    })
}

/// What went wrong inside a sub-step.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Failure {
    #[error("linear solver failed: {0}")]
    Solver(#[from] LinalgError),
    #[error("fixed-point iteration did not converge in {iterations} iterations (last error {error:.3e})")]
    FixedPoint { iterations: usize, error: f64 },
    #[error("non-finite velocity")]
    NonFinite,
    #[error("velocity blew up (max |u| = {0:.3e})")]
    Blowup(f64),
    #[error("solid node {node} left the domain at ({x:.6}, {y:.6})")]
    SolidEscape { node: usize, x: f64, y: f64 },
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

impl Failure {
    /// Blow-ups, non-finite values and escaping or inverting solids.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Failure::NonFinite | Failure::Blowup(_) | Failure::SolidEscape { .. } | Failure::Mesh(_)
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step {step}, {substep}: {failure}")]
    Step {
        step: usize,
        substep: &'static str,
        failure: Failure,
    },
}

pub type BoundaryFn = Arc<dyn Fn(&Point, f64) -> Vector2<f64> + Send + Sync>;

/// Time-dependent Dirichlet data on a fixed set of velocity dofs.
#[derive(Clone)]
pub struct VelocityBc {
    /// sorted constrained dofs (`2*node + c`)
    pub dofs: Vec<usize>,
    pub value: BoundaryFn,
}

impl fmt::Debug for VelocityBc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VelocityBc").field("dofs", &self.dofs.len()).finish()
    }
}

impl VelocityBc {
    /// Both components constrained on sides in `full_mask`, only `u_y` on sides in `normal_y_mask`.
    pub fn from_sides(bg: &BackgroundMesh, full_mask: u8, normal_y_mask: u8, value: BoundaryFn) -> Self {
        let mut dofs = Vec::new();
        for n in bg.boundary_nodes(full_mask | normal_y_mask) {
            let tag = bg.boundary_tags[n];
            if tag & full_mask != 0 {
                dofs.extend([2 * n, 2 * n + 1]);
            } else {
                dofs.push(2 * n + 1);
            }
        }
        dofs.sort_unstable();
        dofs.dedup();
        VelocityBc { dofs, value }
    }

    pub fn values(&self, bg: &BackgroundMesh, t: f64) -> Vec<f64> {
        self.dofs
            .iter()
            .map(|&d| (self.value)(&bg.velocity_nodes[d / 2], t)[d % 2])
            .collect()
    }

    pub fn impose(&self, bg: &BackgroundMesh, u: &mut [f64], t: f64) {
        for (&d, v) in self.dofs.iter().zip(self.values(bg, t)) {
            u[d] = v;
        }
    }

    pub fn mask(&self, num_dofs: usize) -> Vec<bool> {
        let mut m = vec![false; num_dofs];
        for &d in &self.dofs {
            m[d] = true;
        }
        m
    }
}

pub type NeumannFn = Arc<dyn Fn(&Point, f64) -> Vector2<f64> + Send + Sync>;

/// Background operators and boundary data, fixed for a run.
pub struct FluidProblem {
    pub bg: BackgroundMesh,
    pub patterns: Patterns,
    /// scalar nodal mass
    pub mass: CsrMatrix,
    pub mass_vec: CsrMatrix,
    /// `1/(2Re) ∫ Du:Dv`
    pub viscous: CsrMatrix,
    pub div: CsrMatrix,
    pub bc: VelocityBc,
    pub neumann: Option<(u8, NeumannFn)>,
    stokes: DegenerateStokes,
}

impl FluidProblem {
    pub fn new(bg: BackgroundMesh, re: f64, bc: VelocityBc) -> Result<Self, SchemeError> {
        if !(re > 0.0) {
            return Err(SchemeError::InvalidArgument(format!("Re must be positive, got {re}")));
        }
        let patterns = Patterns::new(&bg);
        let mass = assemble_mass(&bg, &patterns);
        let mass_vec = expand_to_vector(&mass, &patterns);
        let viscous = assemble_diffusion(&bg, &patterns, 1.0 / (2.0 * re));
        let div = assemble_divergence(&bg, &patterns);
        let mask = bc.mask(2 * bg.num_velocity_nodes());
        let stokes = DegenerateStokes::new(&mass, &div, &mask, 0).map_err(|e| SchemeError::Step {
            step: 0,
            substep: "setup",
            failure: Failure::Solver(e),
        })?;
        Ok(FluidProblem {
            bg,
            patterns,
            mass,
            mass_vec,
            viscous,
            div,
            bc,
            neumann: None,
            stokes,
        })
    }

    pub fn num_dofs(&self) -> usize {
        2 * self.bg.num_velocity_nodes()
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub fp_iterations: usize,
    pub fp_error: f64,
    /// `‖B u_{n+1}‖`
    pub divergence: f64,
    /// `‖B u_{n+1}‖ / ‖u_{n+2/3}‖_M`
    pub divergence_relative: f64,
    pub convection: SolverReport,
    pub diffusion: SolverReport,
    pub pressure: SolverReport,
}

#[derive(Debug, Clone)]
pub struct SimulationState {
    pub u: Vec<f64>,
    /// velocity at the previous step (used by the explicit scheme)
    pub u_prev: Vec<f64>,
    pub p: Vec<f64>,
    pub solid: SolidMesh,
    pub solid_state: SolidState,
    pub map: TransferMap,
    pub t: f64,
    pub step: usize,
}

/// Diffusion base operator `M/Δt + K` with Dirichlet rows eliminated.
struct BaseOperator {
    full: CsrMatrix,
    eliminated: CsrMatrix,
    precond: JacobiPreconditioner,
}

pub struct Simulation {
    pub problem: FluidProblem,
    pub cfg: SchemeConfig,
    pub state: SimulationState,
    base: BaseOperator,
}

impl Simulation {
    /// Zero initial velocity and a stress-free solid.
    pub fn new(problem: FluidProblem, solid: SolidMesh, cfg: SchemeConfig) -> Result<Self, SchemeError> {
        cfg.validate()?;
        let n = problem.num_dofs();
        let map = build_transfer_map(&problem.bg, &solid, cfg.quadrature).map_err(|e| SchemeError::Step {
            step: 0,
            substep: "setup",
            failure: e.into(),
        })?;
        let solid_state = SolidState::new(map.len(), map.stamp);
        let base = build_base(&problem, cfg.dt).map_err(|e| SchemeError::Step {
            step: 0,
            substep: "setup",
            failure: e,
        })?;
        let state = SimulationState {
            u: vec![0.0; n],
            u_prev: vec![0.0; n],
            p: vec![0.0; problem.bg.num_pressure_nodes()],
            solid,
            solid_state,
            map,
            t: 0.0,
            step: 0,
        };
        Ok(Simulation {
            problem,
            cfg,
            state,
            base,
        })
    }

    /// Changes the time step, rebuilding the cached diffusion operator.
    pub fn set_dt(&mut self, dt: f64) -> Result<(), SchemeError> {
        let mut cfg = self.cfg.clone();
        cfg.dt = dt;
        cfg.validate()?;
        self.base = build_base(&self.problem, dt).map_err(|e| SchemeError::Step {
            step: self.state.step,
            substep: "setup",
            failure: e,
        })?;
        self.cfg = cfg;
        Ok(())
    }

    fn t_next(&self) -> f64 {
        self.state.t + self.cfg.dt
    }

    /// Least-squares convection step with the advecting field frozen at `u_n`.
    pub fn convection_step(&self) -> Result<(Vec<f64>, SolverReport), Failure> {
        let bg = &self.problem.bg;
        let u_n = &self.state.u;
        let (mat, rhs) = assemble_convection_ls(bg, &self.problem.patterns, u_n, u_n, self.cfg.dt);
        let bc_vals = self.problem.bc.values(bg, self.t_next());
        let nn = bg.num_velocity_nodes();
        let mut out = vec![0.0; 2 * nn];
        let mut report = SolverReport {
            converged: true,
            ..Default::default()
        };
        for (c, rhs_c) in rhs.into_iter().enumerate() {
            let (dofs, vals): (Vec<usize>, Vec<f64>) = self
                .problem
                .bc
                .dofs
                .iter()
                .zip(&bc_vals)
                .filter(|(d, _)| *d % 2 == c)
                .map(|(d, v)| (d / 2, *v))
                .unzip();
            let mut sys = SparseSystem {
                matrix: mat.clone(),
                rhs: rhs_c,
                symmetric: true,
            };
            apply_dirichlet(&mut sys, &dofs, &vals).expect("boundary dofs lie on the mesh");
            let mut x: Vec<f64> = (0..nn).map(|i| u_n[2 * i + c]).collect();
            for (&d, &v) in dofs.iter().zip(&vals) {
                x[d] = v;
            }
            let pre = JacobiPreconditioner::new(&sys.matrix)?;
            let rep = pcg(&sys.matrix, &sys.rhs, &mut x, &pre, self.cfg.convection_tol, self.cfg.max_linear_iters)?;
            report.iterations += rep.iterations;
            report.final_residual = report.final_residual.max(rep.final_residual);
            report.wall_time += rep.wall_time;
            for i in 0..nn {
                out[2 * i + c] = x[i];
            }
        }
        check_finite(&out)?;
        Ok((out, report))
    }

    /// `M u_third/Δt` plus gravity and Neumann loads.
    fn fluid_rhs(&self, u_third: &[f64]) -> Vec<f64> {
        let dt = self.cfg.dt;
        let mut rhs = self.problem.mass_vec.mul_vec(u_third);
        rhs.iter_mut().for_each(|v| *v /= dt);
        if self.cfg.fr != 0.0 {
            let g = self.cfg.g_dir.normalize() * self.cfg.fr;
            let n = self.problem.num_dofs();
            let ones: Vec<f64> = (0..n).map(|i| g[i % 2]).collect();
            let body = self.problem.mass_vec.mul_vec(&ones);
            let solid = solid_body_force(&self.state.map, &(g * (self.cfg.rho_r - 1.0)), n);
            for i in 0..n {
                rhs[i] += body[i] + solid[i];
            }
        }
        if let Some((mask, h)) = &self.problem.neumann {
            let t = self.t_next();
            let load = assemble_neumann(&self.problem.bg, *mask, |x| h(x, t));
            for (r, l) in rhs.iter_mut().zip(load) {
                *r += l;
            }
        }
        rhs
    }

    /// Solves the base system with Dirichlet data at `t_{n+1}`; `x` is the warm start.
    fn solve_base(&self, mut rhs: Vec<f64>, x: &mut [f64]) -> Result<SolverReport, Failure> {
        let vals = self.problem.bc.values(&self.problem.bg, self.t_next());
        let mut g = vec![0.0; rhs.len()];
        for (&d, &v) in self.problem.bc.dofs.iter().zip(&vals) {
            g[d] = v;
        }
        let ag = self.base.full.mul_vec(&g);
        for (r, a) in rhs.iter_mut().zip(ag) {
            *r -= a;
        }
        for (&d, &v) in self.problem.bc.dofs.iter().zip(&vals) {
            rhs[d] = v;
            x[d] = v;
        }
        let rep = pcg(
            &self.base.eliminated,
            &rhs,
            x,
            &self.base.precond,
            self.cfg.diffusion_tol,
            self.cfg.max_linear_iters,
        )?;
        check_finite(x)?;
        Ok(rep)
    }

    /// Explicit forcing: the FSI force from `u_{n+1/3}` with the temporal term lagged to `u_n, u_{n-1}`.
    pub fn diffusion_step_explicit(&self, u_third: &[f64]) -> Result<(Vec<f64>, SolverReport), Failure> {
        let s = &self.state;
        let force = assemble_fsi_force_lagged(
            &s.map,
            &s.solid_state,
            u_third,
            &s.u,
            &s.u_prev,
            &self.cfg.coupling_params(),
            self.cfg.dt,
        )?;
        let mut rhs = self.fluid_rhs(u_third);
        for (r, f) in rhs.iter_mut().zip(force) {
            *r -= f;
        }
        let mut x = u_third.to_vec();
        let rep = self.solve_base(rhs, &mut x)?;
        Ok((x, rep))
    }

    /// Implicit forcing by plain fixed-point iteration on the FSI force.
    ///
    /// Returns the velocity, the number of linear solves, the last relative
    /// update measured at the solid nodes, and the accumulated solver report.
    pub fn diffusion_step_implicit(&self, u_third: &[f64]) -> Result<(Vec<f64>, usize, f64, SolverReport), Failure> {
        let s = &self.state;
        let params = self.cfg.coupling_params();
        let base_rhs = self.fluid_rhs(u_third);
        let nodes = node_records(&self.problem.bg, &s.solid)?;
        let sample = |u: &[f64]| -> Vec<f64> {
            nodes
                .iter()
                .flat_map(|r| {
                    let (v, _) = r.interp(u);
                    [v.x, v.y]
                })
                .collect()
        };
        let mut u_k = u_third.to_vec();
        let mut total = SolverReport::default();
        let mut error = f64::INFINITY;
        for k in 1..=self.cfg.fp_max_iters {
            let force = assemble_fsi_force(&s.map, &s.solid_state, &u_k, &s.u, &params, self.cfg.dt)?;
            let rhs: Vec<f64> = base_rhs.iter().zip(&force).map(|(b, f)| b - f).collect();
            let mut x = u_k.clone();
            let rep = self.solve_base(rhs, &mut x)?;
            total.iterations += rep.iterations;
            total.wall_time += rep.wall_time;
            total.final_residual = rep.final_residual;
            let (a, b) = (sample(&x), sample(&u_k));
            let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
            let (dn, bn) = (norm2(&diff), norm2(&b));
            error = if dn == 0.0 {
                0.0
            } else if bn > 0.0 {
                dn / bn
            } else {
                f64::INFINITY
            };
            if check_blowup(&x).is_err() {
                return Err(Failure::FixedPoint { iterations: k, error });
            }
            u_k = x;
            if error < self.cfg.fp_tol {
                total.converged = true;
                return Ok((u_k, k, error, total));
            }
        }
        Err(Failure::FixedPoint {
            iterations: self.cfg.fp_max_iters,
            error,
        })
    }

    /// The one-field FDM: one linear solve with the solid terms linearized into the matrix.
    pub fn diffusion_step_fdm(&self, u_third: &[f64]) -> Result<(Vec<f64>, SolverReport), Failure> {
        let s = &self.state;
        let params = self.cfg.coupling_params();
        let dt = self.cfg.dt;
        let n = self.problem.num_dofs();
        let mut matrix = assemble_fdm_lhs(&s.map, &s.solid_state, &params, dt, &self.problem.patterns)?;
        matrix.axpy(1.0, &self.base.full);
        let mut rhs = self.fluid_rhs(u_third);
        let solid_rhs = assemble_fdm_rhs(&s.map, &s.solid_state, &params, dt, n)?;
        let inertia = solid_mass_apply(&s.map, &s.u, (params.rho_r - 1.0) / dt);
        for i in 0..n {
            rhs[i] += solid_rhs[i] + inertia[i];
        }
        let mut sys = SparseSystem {
            matrix,
            rhs,
            symmetric: false,
        };
        let vals = self.problem.bc.values(&self.problem.bg, self.t_next());
        apply_dirichlet(&mut sys, &self.problem.bc.dofs, &vals).expect("boundary dofs lie on the mesh");
        let mut x = u_third.to_vec();
        for (&d, &v) in self.problem.bc.dofs.iter().zip(&vals) {
            x[d] = v;
        }
        let pre = JacobiPreconditioner::new(&sys.matrix)?;
        let symmetric = sys.matrix.max_asymmetry() <= 1e-12 * sys.matrix.max_abs().max(1.0);
        let rep = if symmetric {
            pcg(&sys.matrix, &sys.rhs, &mut x, &pre, self.cfg.diffusion_tol, self.cfg.max_linear_iters)?
        } else {
            bicgstab(&sys.matrix, &sys.rhs, &mut x, &pre, self.cfg.diffusion_tol, self.cfg.max_linear_iters)?
        };
        check_finite(&x)?;
        Ok((x, rep))
    }

    /// Projection onto discretely divergence-free fields; `p` is warm-started from the previous step.
    pub fn pressure_step(&self, u_two: &[f64]) -> Result<(Vec<f64>, Vec<f64>, SolverReport), Failure> {
        let scale = mass_norm(&self.problem.mass, u_two);
        let mut p = self.state.p.clone();
        let (u, rep) = self.problem.stokes.solve(
            u_two,
            self.cfg.dt,
            self.cfg.pressure_tol,
            scale,
            &mut p,
            self.cfg.max_linear_iters,
        )?;
        check_finite(&u)?;
        Ok((u, p, rep))
    }

    /// Moves the solid nodes with `u_{n+1}` evaluated at `x_n`, advances the
    /// solid history with `∇u_{n+1}` at the old quadrature points, and rebuilds the map.
    pub fn update_solid(&mut self, u_new: &[f64]) -> Result<(), Failure> {
        let bg = &self.problem.bg;
        let dt = self.cfg.dt;
        let s = &mut self.state;
        let nodes = node_records(bg, &s.solid)?;
        let mut coords = s.solid.cur_coords.clone();
        for (x, r) in coords.iter_mut().zip(&nodes) {
            let (v, _) = r.interp(u_new);
            *x += v * dt;
        }
        for &a in &s.solid.anchored_nodes {
            coords[a] = s.solid.cur_coords[a];
        }
        for (node, x) in coords.iter().enumerate() {
            if !bg.domain.contains(x) || !x.iter().all(|v| v.is_finite()) {
                return Err(Failure::SolidEscape { node, x: x.x, y: x.y });
            }
        }
        let mut state = s.solid_state.clone();
        for (q, r) in s.map.records.iter().enumerate() {
            let (_, g) = r.interp(u_new);
            state.s[q] = update_s(&state.s[q], &g, dt);
            let (f, j) = update_deformation(&state.f[q], &(g * state.f[q]), dt);
            state.f[q] = f;
            state.j[q] = j;
        }
        let mut solid = s.solid.clone();
        solid.cur_coords = coords;
        let map = build_transfer_map(bg, &solid, self.cfg.quadrature)?;
        for (q, r) in map.records.iter().enumerate() {
            state.grad_u_n[q] = r.interp(u_new).1;
        }
        state.stamp = map.stamp;
        s.solid = solid;
        s.solid_state = state;
        s.map = map;
        Ok(())
    }

    /// One full time step.
    pub fn advance(&mut self) -> Result<StepReport, SchemeError> {
        let step = self.state.step + 1;
        let tag = |substep: &'static str| move |failure: Failure| SchemeError::Step { step, substep, failure };
        let mut report = StepReport::default();
        let (u_third, rep) = self.convection_step().map_err(tag("convection"))?;
        report.convection = rep;
        let u_two = match self.cfg.scheme {
            Scheme::ExplicitIfem => {
                let (u, rep) = self.diffusion_step_explicit(&u_third).map_err(tag("diffusion"))?;
                report.diffusion = rep;
                u
            }
            Scheme::ImplicitIfem => {
                let (u, iters, err, rep) = self.diffusion_step_implicit(&u_third).map_err(tag("diffusion"))?;
                report.fp_iterations = iters;
                report.fp_error = err;
                report.diffusion = rep;
                u
            }
            Scheme::OneFieldFdm => {
                let (u, rep) = self.diffusion_step_fdm(&u_third).map_err(tag("diffusion"))?;
                report.diffusion = rep;
                u
            }
        };
        check_blowup(&u_two).map_err(tag("diffusion"))?;
        let (u_new, p_new, rep) = self.pressure_step(&u_two).map_err(tag("pressure"))?;
        report.pressure = rep;
        report.divergence = norm2(&self.problem.div.mul_vec(&u_new));
        let scale = mass_norm(&self.problem.mass, &u_two);
        report.divergence_relative = if scale > 0.0 { report.divergence / scale } else { 0.0 };
        self.update_solid(&u_new).map_err(tag("solid update"))?;
        let s = &mut self.state;
        s.u_prev = std::mem::replace(&mut s.u, u_new);
        s.p = p_new;
        s.step = step;
        s.t = step as f64 * self.cfg.dt;
        Ok(report)
    }

    /// Velocities interpolated at the current solid nodes.
    pub fn solid_node_velocities(&self) -> Result<Vec<Vector2<f64>>, MeshError> {
        Ok(node_records(&self.problem.bg, &self.state.solid)?
            .iter()
            .map(|r| r.interp(&self.state.u).0)
            .collect())
    }
}

fn build_base(problem: &FluidProblem, dt: f64) -> Result<BaseOperator, Failure> {
    let mut full = problem.mass_vec.clone();
    full.scale(1.0 / dt);
    full.axpy(1.0, &problem.viscous);
    let mut sys = SparseSystem {
        matrix: full.clone(),
        rhs: vec![0.0; full.nrows()],
        symmetric: true,
    };
    let zeros = vec![0.0; problem.bc.dofs.len()];
    apply_dirichlet(&mut sys, &problem.bc.dofs, &zeros).expect("boundary dofs lie on the mesh");
    let precond = JacobiPreconditioner::new(&sys.matrix)?;
    Ok(BaseOperator {
        full,
        eliminated: sys.matrix,
        precond,
    })
}

fn check_finite(u: &[f64]) -> Result<(), Failure> {
    if u.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Failure::NonFinite)
    }
}

fn check_blowup(u: &[f64]) -> Result<(), Failure> {
    check_finite(u)?;
    let m = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > BLOWUP_VELOCITY {
        Err(Failure::Blowup(m))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::Tensor;
    use crate::mesh::{build_background_grid, build_disc_mesh, side, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ALL_SIDES: u8 = side::BOTTOM | side::RIGHT | side::TOP | side::LEFT;

    fn lid(speed: f64) -> BoundaryFn {
        Arc::new(move |x: &Point, _t| {
            if x.y >= 1.0 - 1e-12 {
                Vector2::new(speed, 0.0)
            } else {
                Vector2::zeros()
            }
        })
    }

    fn cavity(n: usize, cfg: &SchemeConfig, speed: f64) -> Simulation {
        let bg = build_background_grid(n, n, Rect::unit()).unwrap();
        let bc = VelocityBc::from_sides(&bg, ALL_SIDES, 0, lid(speed));
        let problem = FluidProblem::new(bg, cfg.re, bc).unwrap();
        let disc = build_disc_mesh(Point::new(0.6, 0.5), 0.2, 200).unwrap();
        Simulation::new(problem, disc, cfg.clone()).unwrap()
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm2(&d) / norm2(a).max(1e-300)
    }

    #[test]
    fn nondimensional_groups() {
        let p = PhysicalParams {
            rho_f: 1.0,
            rho_s: 2.0,
            mu_f: 0.01,
            mu_s: 0.01,
            c1: 0.5,
            length: 1.0,
            velocity: 1.0,
            gravity: 0.0,
        };
        let d = nondimensionalize(&p).unwrap();
        assert!((d.re - 100.0).abs() < 1e-12);
        assert_eq!(d.fr, 0.0);
        assert_eq!(d.rho_r, 2.0);
        assert_eq!(d.mu_r, 1.0);
        assert_eq!(d.c1_tilde, 0.5);
        let g = nondimensionalize(&PhysicalParams {
            gravity: 9.81,
            velocity: 2.0,
            ..p
        })
        .unwrap();
        assert!((g.fr - 9.81 / 4.0).abs() < 1e-15);
        assert!(nondimensionalize(&PhysicalParams { mu_f: 0.0, ..p }).is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("ifem".parse::<Scheme>().is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 0.1, 0.0, 1.0, Scheme::OneFieldFdm);
        assert!(matches!(cfg.validate(), Err(SchemeError::InvalidArgument(m)) if m.contains("dt")));
        let cfg = SchemeConfig::new(0.0, 1.0, 1.0, 0.1, 0.1, 1.0, Scheme::OneFieldFdm);
        assert!(cfg.validate().is_err());
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 0.1, 1e-3, 10.0, Scheme::OneFieldFdm);
        assert_eq!(cfg.num_steps(), 10_000);
    }

    #[test]
    fn zero_state_stays_zero() {
        for scheme in Scheme::ALL {
            let cfg = SchemeConfig::new(100.0, 2.0, 1.5, 1.0, 0.01, 1.0, scheme);
            let mut sim = cavity(6, &cfg, 0.0);
            for _ in 0..3 {
                sim.advance().unwrap();
            }
            assert!(sim.state.u.iter().all(|&v| v == 0.0), "{scheme}");
            assert_eq!(sim.state.solid.cur_coords, sim.state.solid.ref_coords);
        }
    }

    #[test]
    fn schemes_agree_without_solid() {
        let cfgs: Vec<SchemeConfig> = Scheme::ALL
            .iter()
            .map(|&s| SchemeConfig::new(100.0, 1.0, 1.0, 0.0, 0.01, 1.0, s))
            .collect();
        let mut sims: Vec<Simulation> = cfgs.iter().map(|c| cavity(10, c, 1.0)).collect();
        for _ in 0..10 {
            let reports: Vec<StepReport> = sims.iter_mut().map(|s| s.advance().unwrap()).collect();
            assert!(reports[1].fp_iterations <= 2);
            for k in 1..3 {
                let d = rel_diff(&sims[0].state.u, &sims[k].state.u);
                assert!(d < 1e-9, "scheme {k}: {d}");
            }
        }
    }

    #[test]
    fn divergence_controlled_every_step() {
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 1.0, 0.01, 1.0, Scheme::OneFieldFdm);
        let mut sim = cavity(8, &cfg, 1.0);
        for _ in 0..5 {
            let r = sim.advance().unwrap();
            assert!(r.divergence_relative <= 1.01 * cfg.pressure_tol, "{}", r.divergence_relative);
        }
    }

    /// Smooth, discretely divergence-free field vanishing on the boundary.
    fn swirl(sim: &Simulation) -> Vec<f64> {
        let bg = &sim.problem.bg;
        let mut u = vec![0.0; sim.problem.num_dofs()];
        for (i, x) in bg.velocity_nodes.iter().enumerate() {
            let s = (x.x * (1.0 - x.x) * x.y * (1.0 - x.y)).powi(1);
            u[2 * i] = s * (x.y - 0.5);
            u[2 * i + 1] = -s * (x.x - 0.5);
        }
        sim.problem.bc.impose(bg, &mut u, 0.0);
        sim.pressure_step(&u).unwrap().0
    }

    #[test]
    fn fluid_energy_dissipates() {
        let cfg = SchemeConfig::new(10.0, 1.0, 1.0, 0.0, 0.02, 1.0, Scheme::OneFieldFdm);
        let mut sim = cavity(8, &cfg, 0.0);
        sim.state.u = swirl(&sim);
        let mut prev = mass_norm(&sim.problem.mass, &sim.state.u);
        for _ in 0..10 {
            let (u3, _) = sim.convection_step().unwrap();
            let e3 = mass_norm(&sim.problem.mass, &u3);
            let (u2, _) = sim.diffusion_step_fdm(&u3).unwrap();
            let (u1, _, _) = sim.pressure_step(&u2).unwrap();
            let e1 = mass_norm(&sim.problem.mass, &u1);
            assert!(e1 <= e3 * (1.0 + 1e-12));
            sim.advance().unwrap();
            let e = mass_norm(&sim.problem.mass, &sim.state.u);
            assert!(e <= prev * (1.0 + 1e-12));
            prev = e;
        }
    }

    #[test]
    fn pressure_step_properties() {
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 0.0, 0.01, 1.0, Scheme::OneFieldFdm);
        let sim = cavity(6, &cfg, 0.0);
        let u = swirl(&sim);
        let (v, p, _) = sim.pressure_step(&u).unwrap();
        assert!(rel_diff(&u, &v) < 1e-8);
        assert!(norm2(&p) < 1e-6);

        // a gradient field is removed almost entirely
        let bg = &sim.problem.bg;
        let mut g = vec![0.0; sim.problem.num_dofs()];
        for (i, x) in bg.velocity_nodes.iter().enumerate() {
            g[2 * i] = 2.0 * (x.x - 0.5);
            g[2 * i + 1] = 2.0 * (x.y - 0.5);
        }
        sim.problem.bc.impose(bg, &mut g, 0.0);
        let (w, _, _) = sim.pressure_step(&g).unwrap();
        let mn = |u: &[f64]| mass_norm(&sim.problem.mass, u);
        assert!(mn(&w) <= mn(&g));
        assert!(mn(&w) < 0.2 * mn(&g), "{} vs {}", mn(&w), mn(&g));
    }

    #[test]
    fn convection_trivial_cases() {
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 0.0, 0.01, 1.0, Scheme::OneFieldFdm);
        let bg = build_background_grid(6, 6, Rect::unit()).unwrap();
        let c = Vector2::new(0.3, -0.2);
        let bc = VelocityBc::from_sides(&bg, ALL_SIDES, 0, Arc::new(move |_: &Point, _| c));
        let problem = FluidProblem::new(bg, cfg.re, bc).unwrap();
        let disc = build_disc_mesh(Point::new(0.5, 0.5), 0.2, 50).unwrap();
        let mut sim = Simulation::new(problem, disc, cfg).unwrap();
        let n = sim.problem.num_dofs();
        sim.state.u = (0..n).map(|i| c[i % 2]).collect();
        let (u, _) = sim.convection_step().unwrap();
        assert!(u.iter().enumerate().all(|(i, v)| (v - c[i % 2]).abs() < 1e-9));
    }

    #[test]
    fn convection_follows_characteristics() {
        // u_n = (0.3 + 0.2 y, 0.1 + 0.2 x) is linear, so the characteristic foot is exact in Q2
        let field = |x: &Point| Vector2::new(0.3 + 0.2 * x.y, 0.1 + 0.2 * x.x);
        let err = |dt: f64| {
            let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 0.0, dt, 1.0, Scheme::OneFieldFdm);
            let bg = build_background_grid(8, 8, Rect::unit()).unwrap();
            let exact = move |x: &Point| field(&(x - field(x) * dt));
            let bc = VelocityBc::from_sides(&bg, ALL_SIDES, 0, Arc::new(move |x: &Point, _| exact(x)));
            let problem = FluidProblem::new(bg, cfg.re, bc).unwrap();
            let disc = build_disc_mesh(Point::new(0.5, 0.5), 0.1, 8).unwrap();
            let mut sim = Simulation::new(problem, disc, cfg).unwrap();
            let bg = &sim.problem.bg;
            let mut u = vec![0.0; 2 * bg.num_velocity_nodes()];
            for (i, x) in bg.velocity_nodes.iter().enumerate() {
                let v = field(x);
                u[2 * i] = v.x;
                u[2 * i + 1] = v.y;
            }
            sim.state.u = u;
            let (u3, _) = sim.convection_step().unwrap();
            let bg = &sim.problem.bg;
            let mut e = 0.0f64;
            for (i, x) in bg.velocity_nodes.iter().enumerate() {
                let v = exact(x);
                e = e.max((u3[2 * i] - v.x).abs()).max((u3[2 * i + 1] - v.y).abs());
            }
            e
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e1 / e2 >= 3.5, "{e1} {e2}");
    }

    #[test]
    fn solid_update_rigid_motions() {
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 1.0, 0.01, 1.0, Scheme::OneFieldFdm);
        let mut sim = cavity(6, &cfg, 0.0);
        let n = sim.problem.num_dofs();
        let before = sim.state.clone();
        sim.update_solid(&vec![0.0; n]).unwrap();
        assert_eq!(sim.state.solid.cur_coords, before.solid.cur_coords);
        assert_eq!(sim.state.solid_state.s, before.solid_state.s);

        let c = Vector2::new(0.5, -0.25);
        let u: Vec<f64> = (0..n).map(|i| c[i % 2]).collect();
        sim.update_solid(&u).unwrap();
        for (a, b) in sim.state.solid.cur_coords.iter().zip(&before.solid.cur_coords) {
            assert!((a - b - c * 0.01).norm() < 1e-14);
        }
        assert!(sim.state.solid_state.s.iter().all(|s| s.abs().max() < 1e-12));
    }

    #[test]
    fn solid_rotation_preserves_area() {
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 1.0, 1e-3, 1.0, Scheme::OneFieldFdm);
        let mut sim = cavity(8, &cfg, 0.0);
        let bg = &sim.problem.bg;
        let mut u = vec![0.0; 2 * bg.num_velocity_nodes()];
        for (i, x) in bg.velocity_nodes.iter().enumerate() {
            u[2 * i] = -(x.y - 0.5);
            u[2 * i + 1] = x.x - 0.5;
        }
        let a0 = sim.state.solid.area();
        for _ in 0..100 {
            sim.update_solid(&u).unwrap();
        }
        let drift = (sim.state.solid.area() - a0).abs() / a0;
        assert!(drift < 5e-3, "{drift}");
        // s = F Fᵀ - I stays near zero for a rotation
        let smax = sim.state.solid_state.s.iter().map(|s| s.abs().max()).fold(0.0, f64::max);
        assert!(smax < 2e-3, "{smax}");
    }

    #[test]
    fn solid_escape_detected() {
        let cfg = SchemeConfig::new(100.0, 1.0, 1.0, 1.0, 1.0, 1.0, Scheme::OneFieldFdm);
        let mut sim = cavity(4, &cfg, 0.0);
        let n = sim.problem.num_dofs();
        let u: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        assert!(matches!(sim.update_solid(&u), Err(Failure::SolidEscape { .. })));
    }

    fn excited(cfg: &SchemeConfig, seed: u64) -> Simulation {
        let mut sim = cavity(8, cfg, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sim.state.u = swirl(&sim).iter().map(|v| v * 8.0).collect();
        let u = sim.state.u.clone();
        for q in 0..sim.state.solid_state.len() {
            let a = Tensor::from_fn(|_, _| rng.gen_range(-0.2..0.2));
            sim.state.solid_state.s[q] = (a + a.transpose()) * 0.5;
            sim.state.solid_state.grad_u_n[q] = sim.state.map.records[q].interp(&u).1;
        }
        sim
    }

    #[test]
    fn implicit_fixed_point_satisfies_residual() {
        let mut cfg = SchemeConfig::new(100.0, 1.5, 1.2, 1.0, 0.01, 1.0, Scheme::ImplicitIfem);
        cfg.fp_tol = 1e-10;
        let sim = excited(&cfg, 1);
        let (u3, _) = sim.convection_step().unwrap();
        let (u, iters, err, _) = sim.diffusion_step_implicit(&u3).unwrap();
        assert!(err < 1e-10 && iters > 1);
        // substitute back: (M/Δt + K) u + F(u) = M u3/Δt on free dofs
        let s = &sim.state;
        let f = assemble_fsi_force(&s.map, &s.solid_state, &u, &s.u, &cfg.coupling_params(), cfg.dt).unwrap();
        let au = sim.base.full.mul_vec(&u);
        let rhs = sim.fluid_rhs(&u3);
        let mask = sim.problem.bc.mask(u.len());
        let res: Vec<f64> = (0..u.len()).filter(|&i| !mask[i]).map(|i| au[i] + f[i] - rhs[i]).collect();
        let scale: Vec<f64> = (0..u.len()).filter(|&i| !mask[i]).map(|i| rhs[i]).collect();
        assert!(norm2(&res) / norm2(&scale) < 1e-7, "{}", norm2(&res) / norm2(&scale));
    }

    #[test]
    fn implicit_cap_reports_non_convergence() {
        let mut cfg = SchemeConfig::new(100.0, 1.5, 1.2, 1.0, 0.01, 1.0, Scheme::ImplicitIfem);
        cfg.fp_max_iters = 1;
        cfg.fp_tol = 1e-14;
        let sim = excited(&cfg, 2);
        let (u3, _) = sim.convection_step().unwrap();
        assert!(matches!(
            sim.diffusion_step_implicit(&u3),
            Err(Failure::FixedPoint { iterations: 1, .. })
        ));
    }

    #[test]
    fn fdm_approaches_implicit_with_dt() {
        let diff = |dt: f64| {
            let mut cfg = SchemeConfig::new(100.0, 1.0, 1.0, 1.0, dt, 1.0, Scheme::ImplicitIfem);
            cfg.fp_tol = 1e-12;
            cfg.diffusion_tol = 1e-13;
            let sim = excited(&cfg, 3);
            let u3 = sim.state.u.clone();
            let (ui, _, _, _) = sim.diffusion_step_implicit(&u3).unwrap();
            let (uf, _) = sim.diffusion_step_fdm(&u3).unwrap();
            let d: Vec<f64> = ui.iter().zip(&uf).map(|(a, b)| a - b).collect();
            norm2(&d)
        };
        let (a, b) = (diff(0.004), diff(0.002));
        assert!(a / b >= 3.0, "{a} {b} {}", a / b);
    }

    #[test]
    fn step_errors_are_tagged() {
        let mut cfg = SchemeConfig::new(100.0, 1.5, 1.2, 1.0, 0.01, 1.0, Scheme::ImplicitIfem);
        cfg.fp_max_iters = 1;
        cfg.fp_tol = 1e-14;
        let mut sim = excited(&cfg, 4);
        match sim.advance() {
            Err(SchemeError::Step { step, substep, failure }) => {
                assert_eq!((step, substep), (1, "diffusion"));
                assert!(matches!(failure, Failure::FixedPoint { .. }));
            }
            other => panic!("expected a step error, got {other:?}"),
        }
    }
}
