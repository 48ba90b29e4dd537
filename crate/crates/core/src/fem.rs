//! Background (fluid) operators on the Taylor-Hood grid.
//!
//! Velocity dofs are interleaved per node (`2*node + c`); pressure dofs are
//! numbered by pressure node and kept in a separate vector.

use std::sync::Arc;

use nalgebra::{SMatrix, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{CsrMatrix, CsrPattern};
use crate::mesh::{q1_shape, q2_shape, BackgroundMesh, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Tensor-product Gauss rule on `[-1, 1]²`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// 3×3 Gauss-Legendre, exact for bi-degree 5.
    pub fn gauss3x3() -> Self {
        let a = (0.6f64).sqrt();
        let pts1 = [-a, 0.0, a];
        let w1 = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mut points = Vec::with_capacity(9);
        let mut weights = Vec::with_capacity(9);
        for j in 0..3 {
            for i in 0..3 {
                points.push([pts1[i], pts1[j]]);
                weights.push(w1[i] * w1[j]);
            }
        }
        QuadratureRule { points, weights }
    }

    /// 3-point Gauss-Legendre on `[-1, 1]`, for boundary integrals.
    pub fn gauss3_line() -> ([f64; 3], [f64; 3]) {
        let a = (0.6f64).sqrt();
        ([-a, 0.0, a], [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
    }
}

/// Shared sparsity patterns for the background grid.
#[derive(Debug, Clone)]
pub struct Patterns {
    /// node × node (scalar velocity component)
    pub scalar: Arc<CsrPattern>,
    /// interleaved velocity dofs
    pub vector: Arc<CsrPattern>,
    /// pressure node × velocity dof
    pub divergence: Arc<CsrPattern>,
}

impl Patterns {
    pub fn new(bg: &BackgroundMesh) -> Self {
        let nn = bg.num_velocity_nodes();
        let mut srows = vec![Vec::new(); nn];
        for conn in &bg.velocity_elements {
            for &i in conn {
                srows[i].extend_from_slice(conn);
            }
        }
        let scalar = CsrPattern::from_rows(nn, srows);
        let mut vrows = Vec::with_capacity(2 * nn);
        for i in 0..nn {
            let r = scalar.row_ptr[i]..scalar.row_ptr[i + 1];
            let cols: Vec<usize> = scalar.col_idx[r]
                .iter()
                .flat_map(|&j| [2 * j, 2 * j + 1])
                .collect();
            vrows.push(cols.clone());
            vrows.push(cols);
        }
        let vector = CsrPattern::from_rows(2 * nn, vrows);
        let mut drows = vec![Vec::new(); bg.num_pressure_nodes()];
        for (e, pc) in bg.pressure_elements.iter().enumerate() {
            for &q in pc {
                drows[q].extend(bg.velocity_elements[e].iter().flat_map(|&j| [2 * j, 2 * j + 1]));
            }
        }
        let divergence = CsrPattern::from_rows(2 * nn, drows);
        Patterns {
            scalar: Arc::new(scalar),
            vector: Arc::new(vector),
            divergence: Arc::new(divergence),
        }
    }
}

/// Element data on the reference rectangle; every element of a uniform grid shares it.
struct ElementKernels {
    mass: SMatrix<f64, 9, 9>,
    /// 18×18 `∫ D u : D v` with local dof `2k + c`
    sym_grad: SMatrix<f64, 18, 18>,
    /// 4×18 `-∫ q ∇·u`
    div: SMatrix<f64, 4, 18>,
}

fn element_kernels(hx: f64, hy: f64) -> ElementKernels {
    let rule = QuadratureRule::gauss3x3();
    let det = 0.25 * hx * hy;
    let (sx, sy) = (2.0 / hx, 2.0 / hy);
    let mut mass = SMatrix::<f64, 9, 9>::zeros();
    let mut sym_grad = SMatrix::<f64, 18, 18>::zeros();
    let mut div = SMatrix::<f64, 4, 18>::zeros();
    for (pt, w) in rule.points.iter().zip(&rule.weights) {
        let (phi, gref) = q2_shape(pt[0], pt[1]);
        let (psi, _) = q1_shape(pt[0], pt[1]);
        let g: Vec<[f64; 2]> = gref.iter().map(|r| [r[0] * sx, r[1] * sy]).collect();
        let jw = w * det;
        for a in 0..9 {
            for b in 0..9 {
                mass[(a, b)] += jw * phi[a] * phi[b];
            }
        }
        // D(φ e_c) has entries (D)_{ij} = δ_ic ∂_j φ + δ_jc ∂_i φ
        for a in 0..9 {
            for c in 0..2 {
                let da = sym_grad_basis(&g[a], c);
                for b in 0..9 {
                    for d in 0..2 {
                        let db = sym_grad_basis(&g[b], d);
                        sym_grad[(2 * a + c, 2 * b + d)] += jw * da.component_mul(&db).sum();
                    }
                }
            }
        }
        for q in 0..4 {
            for b in 0..9 {
                for c in 0..2 {
                    div[(q, 2 * b + c)] -= jw * psi[q] * g[b][c];
                }
            }
        }
    }
    ElementKernels { mass, sym_grad, div }
}

/// `D(φ e_c) = ∇(φ e_c) + ∇(φ e_c)ᵀ` for a scalar basis gradient.
pub fn sym_grad_basis(grad: &[f64; 2], c: usize) -> nalgebra::Matrix2<f64> {
    let mut g = nalgebra::Matrix2::zeros();
    g[(c, 0)] = grad[0];
    g[(c, 1)] = grad[1];
    g + g.transpose()
}

/// Scalar mass matrix `∫ φ_i φ_j` over nodes (applied per velocity component).
pub fn assemble_mass(bg: &BackgroundMesh, patterns: &Patterns) -> CsrMatrix {
    let k = element_kernels(bg.hx, bg.hy);
    let mut m = CsrMatrix::zeros(patterns.scalar.clone());
    for conn in &bg.velocity_elements {
        for a in 0..9 {
            for b in 0..9 {
                m.add(conn[a], conn[b], k.mass[(a, b)]);
            }
        }
    }
    m
}

/// Scalar operator expanded to both velocity components.
pub fn expand_to_vector(scalar: &CsrMatrix, patterns: &Patterns) -> CsrMatrix {
    let mut v = CsrMatrix::zeros(patterns.vector.clone());
    for i in 0..scalar.nrows() {
        for (j, val) in scalar.row(i) {
            v.add(2 * i, 2 * j, val);
            v.add(2 * i + 1, 2 * j + 1, val);
        }
    }
    v
}

/// `coeff ∫ D u : D v` on interleaved velocity dofs.
pub fn assemble_diffusion(bg: &BackgroundMesh, patterns: &Patterns, coeff: f64) -> CsrMatrix {
    let k = element_kernels(bg.hx, bg.hy);
    let mut m = CsrMatrix::zeros(patterns.vector.clone());
    for conn in &bg.velocity_elements {
        for a in 0..18 {
            for b in 0..18 {
                m.add(2 * conn[a / 2] + a % 2, 2 * conn[b / 2] + b % 2, coeff * k.sym_grad[(a, b)]);
            }
        }
    }
    m
}

/// `B_{q,j} = -∫ ψ_q ∇·φ_j`, pressure rows by velocity columns.
pub fn assemble_divergence(bg: &BackgroundMesh, patterns: &Patterns) -> CsrMatrix {
    let k = element_kernels(bg.hx, bg.hy);
    let mut m = CsrMatrix::zeros(patterns.divergence.clone());
    for (e, pc) in bg.pressure_elements.iter().enumerate() {
        let conn = &bg.velocity_elements[e];
        for q in 0..4 {
            for b in 0..18 {
                m.add(pc[q], 2 * conn[b / 2] + b % 2, k.div[(q, b)]);
            }
        }
    }
    m
}

/// Boundary traction load `∫_{Γ_N} h · v` over the sides selected by `mask`.
pub fn assemble_neumann(bg: &BackgroundMesh, mask: u8, h: impl Fn(&Point) -> Vector2<f64>) -> Vec<f64> {
    use crate::mesh::side;
    let (pts, wts) = QuadratureRule::gauss3_line();
    let mut out = vec![0.0; 2 * bg.num_velocity_nodes()];
    let l = |t: f64| [0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)];
    for e in 0..bg.num_elements() {
        let (ex, ey) = (e % bg.nx, e / bg.nx);
        let conn = &bg.velocity_elements[e];
        // (side flag, fixed local index along the normal axis, edge runs along x?)
        let edges = [
            (side::BOTTOM, ey == 0, 0usize, true),
            (side::TOP, ey == bg.ny - 1, 2, true),
            (side::LEFT, ex == 0, 0, false),
            (side::RIGHT, ex == bg.nx - 1, 2, false),
        ];
        for (flag, on_boundary, fixed, along_x) in edges {
            if mask & flag == 0 || !on_boundary {
                continue;
            }
            let len = if along_x { bg.hx } else { bg.hy };
            for (t, w) in pts.iter().zip(&wts) {
                let shape = l(*t);
                let local = if along_x {
                    [*t, [-1.0, 0.0, 1.0][fixed]]
                } else {
                    [[-1.0, 0.0, 1.0][fixed], *t]
                };
                let load = h(&bg.map_local(e, local)) * (w * 0.5 * len);
                for (k, s) in shape.iter().enumerate() {
                    let a = if along_x { k + 3 * fixed } else { fixed + 3 * k };
                    out[2 * conn[a]] += s * load.x;
                    out[2 * conn[a] + 1] += s * load.y;
                }
            }
        }
    }
    out
}

/// Least-squares convection system with frozen advecting field `a`:
/// `∫ (u + Δt a·∇u)(v + Δt a·∇v) = ∫ f (v + Δt a·∇v)`, one scalar matrix shared by
/// both velocity components and one right-hand side per component.
pub fn assemble_convection_ls(
    bg: &BackgroundMesh,
    patterns: &Patterns,
    a: &[f64],
    f: &[f64],
    dt: f64,
) -> (CsrMatrix, [Vec<f64>; 2]) {
    let rule = QuadratureRule::gauss3x3();
    let det = 0.25 * bg.hx * bg.hy;
    let (sx, sy) = (2.0 / bg.hx, 2.0 / bg.hy);
    let shapes: Vec<([f64; 9], [[f64; 2]; 9], f64)> = rule
        .points
        .iter()
        .zip(&rule.weights)
        .map(|(pt, w)| {
            let (phi, gref) = q2_shape(pt[0], pt[1]);
            let mut g = [[0.0; 2]; 9];
            for k in 0..9 {
                g[k] = [gref[k][0] * sx, gref[k][1] * sy];
            }
            (phi, g, w * det)
        })
        .collect();
    let locals: Vec<(SMatrix<f64, 9, 9>, [[f64; 2]; 9])> = bg
        .velocity_elements
        .par_iter()
        .map(|conn| {
            let mut m = SMatrix::<f64, 9, 9>::zeros();
            let mut rhs = [[0.0; 2]; 9];
            for (phi, g, jw) in &shapes {
                let (mut ax, mut ay, mut fx, mut fy) = (0.0, 0.0, 0.0, 0.0);
                for k in 0..9 {
                    let n = conn[k];
                    ax += phi[k] * a[2 * n];
                    ay += phi[k] * a[2 * n + 1];
                    fx += phi[k] * f[2 * n];
                    fy += phi[k] * f[2 * n + 1];
                }
                let mut l = [0.0; 9];
                for k in 0..9 {
                    l[k] = phi[k] + dt * (ax * g[k][0] + ay * g[k][1]);
                }
                for i in 0..9 {
                    for j in 0..9 {
                        m[(i, j)] += jw * l[i] * l[j];
                    }
                    rhs[i][0] += jw * fx * l[i];
                    rhs[i][1] += jw * fy * l[i];
                }
            }
            (m, rhs)
        })
        .collect();
    let nn = bg.num_velocity_nodes();
    let mut mat = CsrMatrix::zeros(patterns.scalar.clone());
    let mut rx = vec![0.0; nn];
    let mut ry = vec![0.0; nn];
    for (conn, (m, rhs)) in bg.velocity_elements.iter().zip(&locals) {
        for i in 0..9 {
            for j in 0..9 {
                mat.add(conn[i], conn[j], m[(i, j)]);
            }
            rx[conn[i]] += rhs[i][0];
            ry[conn[i]] += rhs[i][1];
        }
    }
    (mat, [rx, ry])
}

/// Sparse operator with right-hand side.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub symmetric: bool,
}

/// Constrains `dofs` to `values` by symmetric elimination: constrained rows and
/// columns become identity, coupled columns move to the right-hand side.
pub fn apply_dirichlet(system: &mut SparseSystem, dofs: &[usize], values: &[f64]) -> Result<(), FemError> {
    let n = system.matrix.nrows();
    if dofs.len() != values.len() {
        return Err(FemError::InvalidArgument("dof and value counts differ".into()));
    }
    if let Some(&bad) = dofs.iter().find(|&&d| d >= n) {
        return Err(FemError::InvalidArgument(format!("dof {bad} outside system of size {n}")));
    }
    let mut constrained = vec![false; n];
    let mut value = vec![0.0; n];
    for (&d, &v) in dofs.iter().zip(values) {
        constrained[d] = true;
        value[d] = v;
    }
    let pattern = system.matrix.pattern().clone();
    let vals = system.matrix.values_mut();
    for i in 0..n {
        if constrained[i] {
            continue;
        }
        for k in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
            let j = pattern.col_idx[k];
            if constrained[j] {
                system.rhs[i] -= vals[k] * value[j];
                vals[k] = 0.0;
            }
        }
    }
    for &d in dofs {
        system.matrix.set_row(d, |j| if j == d { 1.0 } else { 0.0 });
        system.rhs[d] = value[d];
    }
    Ok(())
}

/// Node-level Dirichlet data applied to both velocity components.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirichletData {
    pub nodes: Vec<usize>,
    pub values: Vec<Vector2<f64>>,
}

impl DirichletData {
    pub fn dofs_and_values(&self) -> (Vec<usize>, Vec<f64>) {
        let mut dofs = Vec::with_capacity(2 * self.nodes.len());
        let mut vals = Vec::with_capacity(2 * self.nodes.len());
        for (&n, v) in self.nodes.iter().zip(&self.values) {
            dofs.extend([2 * n, 2 * n + 1]);
            vals.extend([v.x, v.y]);
        }
        (dofs, vals)
    }

    /// Writes the prescribed values into an interleaved velocity vector.
    pub fn impose(&self, u: &mut [f64]) {
        for (&n, v) in self.nodes.iter().zip(&self.values) {
            u[2 * n] = v.x;
            u[2 * n + 1] = v.y;
        }
    }
}

/// Node-level Dirichlet constraint on an interleaved velocity system.
pub fn apply_dirichlet_nodes(system: &mut SparseSystem, bc: &DirichletData, num_nodes: usize) -> Result<(), FemError> {
    if let Some(&bad) = bc.nodes.iter().find(|&&n| n >= num_nodes) {
        return Err(FemError::InvalidArgument(format!("node {bad} outside mesh of {num_nodes} nodes")));
    }
    let (dofs, vals) = bc.dofs_and_values();
    apply_dirichlet(system, &dofs, &vals)
}
