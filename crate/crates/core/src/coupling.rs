//! Solid-domain integrals assembled onto background velocity dofs.
//!
//! Every integral runs over the solid quadrature points of a [`TransferMap`];
//! test functions are background Q2 basis functions evaluated at those points.

use std::collections::BTreeMap;

use nalgebra::{SMatrix, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::constitutive::{linearized_terms, update_s, update_s_linearized, SolidState, Tensor};
use crate::fem::Patterns;
use crate::linalg::CsrMatrix;
use crate::mesh::{PointRecord, TransferMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("transfer map is stale: built for geometry {map:#x}, solid state is at {state:#x}")]
    StaleMap { map: u64, state: u64 },
    #[error("transfer map has {map} points but solid state has {state}")]
    SizeMismatch { map: usize, state: usize },
}

/// Dimensionless coefficients entering the solid integrals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingParams {
    pub re: f64,
    pub rho_r: f64,
    pub mu_r: f64,
    pub c1_tilde: f64,
}

/// Which coupling strategy produced a [`SolidContribution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContributionKind {
    ExplicitForce,
    ImplicitForce,
    OneFieldFdm,
}

/// Solid additions to the diffusion-step system.
///
/// For the FDM the mass and viscosity parts of `lhs_delta` are symmetric but
/// the `D¹`, `D²`, `D³` parts are not.
#[derive(Debug, Clone)]
pub struct SolidContribution {
    pub lhs_delta: Option<CsrMatrix>,
    pub rhs_delta: Vec<f64>,
    pub kind: ContributionKind,
    pub dt: f64,
}

fn check(map: &TransferMap, state: &SolidState) -> Result<(), CouplingError> {
    if map.stamp != state.stamp {
        return Err(CouplingError::StaleMap {
            map: map.stamp,
            state: state.stamp,
        });
    }
    if map.len() != state.len() {
        return Err(CouplingError::SizeMismatch {
            map: map.len(),
            state: state.len(),
        });
    }
    Ok(())
}

/// Per-point dof contributions, merged serially in point order for determinism.
fn scatter_vector(n: usize, parts: Vec<([usize; 9], [[f64; 2]; 9])>) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (nodes, vals) in parts {
        for k in 0..9 {
            out[2 * nodes[k]] += vals[k][0];
            out[2 * nodes[k] + 1] += vals[k][1];
        }
    }
    out
}

/// Local load of `φ·f + T:∇φ` on the nine host-element nodes.
fn local_load(r: &PointRecord, f: &Vector2<f64>, t: &Tensor) -> [[f64; 2]; 9] {
    let mut out = [[0.0; 2]; 9];
    for k in 0..9 {
        let [gx, gy] = r.grad[k];
        out[k][0] = r.phi[k] * f.x + t[(0, 0)] * gx + t[(0, 1)] * gy;
        out[k][1] = r.phi[k] * f.y + t[(1, 0)] * gx + t[(1, 1)] * gy;
    }
    out
}

fn force_impl(
    map: &TransferMap,
    state: &SolidState,
    u_eval: &[f64],
    temporal: (&[f64], &[f64]),
    params: &CouplingParams,
    dt: f64,
) -> Result<Vec<f64>, CouplingError> {
    check(map, state)?;
    let parts: Vec<_> = map
        .records
        .par_iter()
        .enumerate()
        .map(|(q, r)| {
            let (_, g) = r.interp(u_eval);
            let (ua, _) = r.interp(temporal.0);
            let (ub, _) = r.interp(temporal.1);
            let f = (ua - ub) * ((params.rho_r - 1.0) / dt * r.weight);
            // (μʳ-1)/(2Re) Du:Dv = (μʳ-1)/Re Du:∇v since Du is symmetric
            let t = ((g + g.transpose()) * ((params.mu_r - 1.0) / params.re)
                + update_s(&state.s[q], &g, dt) * params.c1_tilde)
                * r.weight;
            (r.nodes, local_load(r, &f, &t))
        })
        .collect();
    Ok(scatter_vector(u_eval.len(), parts))
}

/// The FSI force with every term evaluated at `u_eval`, temporal term `(u_eval - u_n)/Δt`.
pub fn assemble_fsi_force(
    map: &TransferMap,
    state: &SolidState,
    u_eval: &[f64],
    u_n: &[f64],
    params: &CouplingParams,
    dt: f64,
) -> Result<Vec<f64>, CouplingError> {
    force_impl(map, state, u_eval, (u_eval, u_n), params, dt)
}

/// Explicit variant: viscous and elastic terms at `u_eval`, temporal term
/// lagged to the two previous steps, `(u_n - u_prev)/Δt`.
pub fn assemble_fsi_force_lagged(
    map: &TransferMap,
    state: &SolidState,
    u_eval: &[f64],
    u_n: &[f64],
    u_prev: &[f64],
    params: &CouplingParams,
    dt: f64,
) -> Result<Vec<f64>, CouplingError> {
    force_impl(map, state, u_eval, (u_n, u_prev), params, dt)
}

/// `∫_{Ωˢ} coeff · u · v`, the solid mass operator applied to `u`.
pub fn solid_mass_apply(map: &TransferMap, u: &[f64], coeff: f64) -> Vec<f64> {
    let parts: Vec<_> = map
        .records
        .par_iter()
        .map(|r| {
            let (v, _) = r.interp(u);
            (r.nodes, local_load(r, &(v * (coeff * r.weight)), &Tensor::zeros()))
        })
        .collect();
    scatter_vector(u.len(), parts)
}

/// `∫_{Ωˢ} f · v` for a constant body force `f`.
pub fn solid_body_force(map: &TransferMap, f: &Vector2<f64>, num_dofs: usize) -> Vec<f64> {
    let parts: Vec<_> = map
        .records
        .iter()
        .map(|r| (r.nodes, local_load(r, &(f * r.weight), &Tensor::zeros())))
        .collect();
    scatter_vector(num_dofs, parts)
}

/// `∇(φ_k e_c)`: row `c` holds the scalar gradient.
fn basis_grad(grad: &[f64; 2], c: usize) -> Tensor {
    let mut g = Tensor::zeros();
    g[(c, 0)] = grad[0];
    g[(c, 1)] = grad[1];
    g
}

type Local = SMatrix<f64, 18, 18>;

fn fdm_local(r: &PointRecord, s_n: &Tensor, grad_u_n: &Tensor, params: &CouplingParams, dt: f64) -> Local {
    let mass = (params.rho_r - 1.0) / dt;
    let sym = (params.mu_r - 1.0) / (2.0 * params.re) + dt * params.c1_tilde / 2.0;
    let c1 = params.c1_tilde;
    let trial: Vec<(Tensor, Tensor, Tensor)> = (0..18)
        .map(|i| {
            let g = basis_grad(&r.grad[i / 2], i % 2);
            let t = linearized_terms(s_n, grad_u_n, &g);
            let nonsym = t.d1 * (dt * c1) + (t.d2 + t.d3) * (dt * dt * c1);
            (g, g + g.transpose(), nonsym)
        })
        .collect();
    let mut a = Local::zeros();
    for (row, (gv, dv, _)) in trial.iter().enumerate() {
        for (col, (_, du, nonsym)) in trial.iter().enumerate() {
            let mut v = sym * du.component_mul(dv).sum() + nonsym.component_mul(gv).sum();
            if row % 2 == col % 2 {
                v += mass * r.phi[row / 2] * r.phi[col / 2];
            }
            a[(row, col)] = v * r.weight;
        }
    }
    a
}

/// Solid part of the one-field FDM diffusion operator: the `(ρʳ-1)/Δt` mass,
/// `(μʳ-1)/(2Re)` viscous, `Δt c̃₁/2 D:D`, `Δt c̃₁ D¹` and `Δt² c̃₁ (D²+D³)` terms.
pub fn assemble_fdm_lhs(
    map: &TransferMap,
    state: &SolidState,
    params: &CouplingParams,
    dt: f64,
    patterns: &Patterns,
) -> Result<CsrMatrix, CouplingError> {
    check(map, state)?;
    let locals: Vec<Local> = map
        .records
        .par_iter()
        .enumerate()
        .map(|(q, r)| fdm_local(r, &state.s[q], &state.grad_u_n[q], params, dt))
        .collect();
    // many points share a background element; sum per element before scattering
    let mut per_element: BTreeMap<usize, (usize, Local)> = BTreeMap::new();
    for (q, (r, loc)) in map.records.iter().zip(&locals).enumerate() {
        per_element.entry(r.element).or_insert((q, Local::zeros())).1 += loc;
    }
    let mut a = CsrMatrix::zeros(patterns.vector.clone());
    for (q, loc) in per_element.values() {
        let nodes = &map.records[*q].nodes;
        for i in 0..18 {
            let gi = 2 * nodes[i / 2] + i % 2;
            for j in 0..18 {
                a.add(gi, 2 * nodes[j / 2] + j % 2, loc[(i, j)]);
            }
        }
    }
    Ok(a)
}

/// Solid part of the FDM right-hand side:
/// `-c̃₁ s_n:∇v + Δt² c̃₁ (∇u_n ∇ᵀu_n):∇v + Δt² c̃₁ (∇u_n s_n ∇ᵀu_n):∇v`.
///
/// The `(ρʳ-1)/Δt M_s u_n` term needs nodal velocities and is added by the caller
/// through [`solid_mass_apply`].
pub fn assemble_fdm_rhs(
    map: &TransferMap,
    state: &SolidState,
    params: &CouplingParams,
    dt: f64,
    num_dofs: usize,
) -> Result<Vec<f64>, CouplingError> {
    check(map, state)?;
    let c1 = params.c1_tilde;
    let parts: Vec<_> = map
        .records
        .par_iter()
        .enumerate()
        .map(|(q, r)| {
            let (s, gn) = (&state.s[q], &state.grad_u_n[q]);
            let t = (s * -c1 + (gn * gn.transpose() + gn * s * gn.transpose()) * (dt * dt * c1)) * r.weight;
            (r.nodes, local_load(r, &Vector2::zeros(), &t))
        })
        .collect();
    Ok(scatter_vector(num_dofs, parts))
}

/// FSI force at `u` with the s-update linearized about `state.grad_u_n`.
pub fn assemble_fsi_force_linearized(
    map: &TransferMap,
    state: &SolidState,
    u: &[f64],
    u_n: &[f64],
    params: &CouplingParams,
    dt: f64,
) -> Result<Vec<f64>, CouplingError> {
    check(map, state)?;
    let parts: Vec<_> = map
        .records
        .par_iter()
        .enumerate()
        .map(|(q, r)| {
            let (v, g) = r.interp(u);
            let (vn, _) = r.interp(u_n);
            let f = (v - vn) * ((params.rho_r - 1.0) / dt * r.weight);
            let s_lin = update_s_linearized(&state.s[q], &state.grad_u_n[q], &g, dt);
            let t = ((g + g.transpose()) * ((params.mu_r - 1.0) / params.re) + s_lin * params.c1_tilde) * r.weight;
            (r.nodes, local_load(r, &f, &t))
        })
        .collect();
    Ok(scatter_vector(u.len(), parts))
}

/// `‖(A u - b - (ρʳ-1)/Δt M_s u_n) - F_lin(u)‖∞`, which vanishes identically:
/// the FDM system is the linearized implicit force rearranged.
pub fn consistency_check_fdm_vs_force(
    map: &TransferMap,
    state: &SolidState,
    u: &[f64],
    u_n: &[f64],
    params: &CouplingParams,
    dt: f64,
    patterns: &Patterns,
) -> Result<f64, CouplingError> {
    let a = assemble_fdm_lhs(map, state, params, dt, patterns)?;
    let b = assemble_fdm_rhs(map, state, params, dt, u.len())?;
    let m = solid_mass_apply(map, u_n, (params.rho_r - 1.0) / dt);
    let f = assemble_fsi_force_linearized(map, state, u, u_n, params, dt)?;
    let au = a.mul_vec(u);
    Ok((0..u.len())
        .map(|i| (au[i] - b[i] - m[i] - f[i]).abs())
        .fold(0.0, f64::max))
}
