//! Pointwise solid kernels.
//!
//! Tensors are 2×2 with the gradient convention `(∇u)_ij = ∂u_i/∂x_j`, so the
//! deformation tensor obeys `F_{n+1} = (I + Δt ∇_n u) F_n`.

use nalgebra::Matrix2;
use thiserror::Error;

pub type Tensor = Matrix2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstitutiveError {
    #[error("inverted element: det F = {0:.3e}")]
    InvertedElement(f64),
    #[error("invalid material parameter: {0}")]
    InvalidParameter(String),
}

/// Dimensionless solid parameters plus the extras used by the compressible kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub c1_tilde: f64,
    pub mu_r: f64,
    pub rho_r: f64,
    pub nu: f64,
    pub kappa: f64,
    pub lame_mu: f64,
    pub lame_lambda: f64,
}

impl MaterialParams {
    pub fn incompressible(c1_tilde: f64, rho_r: f64, mu_r: f64) -> Self {
        MaterialParams {
            c1_tilde,
            mu_r,
            rho_r,
            nu: 0.0,
            kappa: 0.0,
            lame_mu: 0.0,
            lame_lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConstitutiveError> {
        let bad = |m: &str| Err(ConstitutiveError::InvalidParameter(m.into()));
        if !(self.c1_tilde >= 0.0) {
            return bad("c1_tilde must be non-negative");
        }
        if !(self.rho_r > 0.0) {
            return bad("rho_r must be positive");
        }
        if !(self.mu_r > 0.0) {
            return bad("mu_r must be positive");
        }
        if !(0.0..0.5).contains(&self.nu) {
            return bad("Poisson's ratio must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// Per-quadrature-point solid history.
#[derive(Debug, Clone, PartialEq)]
pub struct SolidState {
    /// `F Fᵀ - I` at time n
    pub s: Vec<Tensor>,
    /// Eulerian velocity gradient of `u_n` at the current point positions
    pub grad_u_n: Vec<Tensor>,
    pub f: Vec<Tensor>,
    pub j: Vec<f64>,
    /// geometry stamp of the configuration these values belong to
    pub stamp: u64,
}

impl SolidState {
    /// Stress-free initial state.
    pub fn new(num_points: usize, stamp: u64) -> Self {
        SolidState {
            s: vec![Tensor::zeros(); num_points],
            grad_u_n: vec![Tensor::zeros(); num_points],
            f: vec![Tensor::identity(); num_points],
            j: vec![1.0; num_points],
            stamp,
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Advances `s = F Fᵀ - I` through `x_t = x_n + Δt u_t`.
pub fn update_s(s_n: &Tensor, grad_u: &Tensor, dt: f64) -> Tensor {
    let g = grad_u;
    let gt = g.transpose();
    (g + gt + g * gt * dt) * dt + s_n + g * s_n * gt * (dt * dt) + g * s_n * dt + s_n * gt * dt
}

/// Linear-in-`∇u` pieces of the linearized s-update around `∇u_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedTerms {
    /// `∇u s_n + s_n ∇ᵀu`
    pub d1: Tensor,
    /// `∇u ∇ᵀu_n + ∇u_n ∇ᵀu`
    pub d2: Tensor,
    /// `∇u s_n ∇ᵀu_n + ∇u_n s_n ∇ᵀu`
    pub d3: Tensor,
    /// `∇u_n ∇ᵀu_n`
    pub rhs_quadratic: Tensor,
    /// `∇u_n s_n ∇ᵀu_n`
    pub rhs_cubic: Tensor,
}

pub fn linearized_terms(s_n: &Tensor, grad_u_n: &Tensor, grad_u: &Tensor) -> LinearizedTerms {
    let (g, gn) = (grad_u, grad_u_n);
    LinearizedTerms {
        d1: g * s_n + s_n * g.transpose(),
        d2: g * gn.transpose() + gn * g.transpose(),
        d3: g * s_n * gn.transpose() + gn * s_n * g.transpose(),
        rhs_quadratic: gn * gn.transpose(),
        rhs_cubic: gn * s_n * gn.transpose(),
    }
}

/// [`update_s`] with both quadratic products replaced by their linearizations about `∇u_n`.
pub fn update_s_linearized(s_n: &Tensor, grad_u_n: &Tensor, grad_u: &Tensor, dt: f64) -> Tensor {
    let t = linearized_terms(s_n, grad_u_n, grad_u);
    let gg = t.d2 - t.rhs_quadratic;
    let gsg = t.d3 - t.rhs_cubic;
    (grad_u + grad_u.transpose()) * dt + gg * (dt * dt) + s_n + gsg * (dt * dt) + t.d1 * dt
}

/// Elastic part of the incompressible neo-Hookean deviatoric stress, `c̃₁ s`.
pub fn neo_hookean_force_tensor(s: &Tensor, c1_tilde: f64) -> Tensor {
    s * c1_tilde
}

/// `σ = c₁ J⁻¹ (F Fᵀ - I) + μˢ D u - J^{-1/(1-2ν)} I`, evaluated as written.
///
/// Note that `F = I, u = 0` gives `σ = -I`, not zero.
pub fn stress_compressible_neo_hookean(
    f: &Tensor,
    grad_u: &Tensor,
    c1: f64,
    mu_s: f64,
    nu: f64,
) -> Result<Tensor, ConstitutiveError> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(ConstitutiveError::InvertedElement(j));
    }
    let id = Tensor::identity();
    let ff_t = f * f.transpose();
    Ok((ff_t - id) * (c1 / j) + (grad_u + grad_u.transpose()) * mu_s - id * j.powf(-1.0 / (1.0 - 2.0 * nu)))
}

/// Lagrangian Green strain `½ (Fᵀ F - I)`.
pub fn green_strain(f: &Tensor) -> Tensor {
    (f.transpose() * f - Tensor::identity()) * 0.5
}

/// Saint Venant-Kirchhoff second Piola-Kirchhoff stress.
pub fn svk_stress(e: &Tensor, lame_mu: f64, lame_lambda: f64) -> Tensor {
    e * (2.0 * lame_mu) + Tensor::identity() * (lame_lambda * e.trace())
}

/// Linearized SVK virtual-work density `S(Ẽ):δẼ - ½ S(∇ᵀd̃ ∇d̃):δẼ` with
/// reference-frame gradients of the displacement `d`, the linearization point
/// `d̃` and the test function `v`.
pub fn svk_linearized_virtual_work(
    grad_d: &Tensor,
    grad_d_ref: &Tensor,
    grad_v: &Tensor,
    lame_mu: f64,
    lame_lambda: f64,
) -> f64 {
    let (b, a, v) = (grad_d, grad_d_ref, grad_v);
    let e_tilde = (b + b.transpose() + a.transpose() * b + b.transpose() * a) * 0.5;
    let de_tilde = (v + v.transpose() + a.transpose() * v + v.transpose() * a) * 0.5;
    let s = svk_stress(&e_tilde, lame_mu, lame_lambda) - svk_stress(&(a.transpose() * a), lame_mu, lame_lambda) * 0.5;
    s.component_mul(&de_tilde).sum()
}

/// `F_{n+1} = F_n + Δt ∇_X u_{n+1}`, returning `(F_{n+1}, det F_{n+1})`.
pub fn update_deformation(f_n: &Tensor, grad_x_u: &Tensor, dt: f64) -> (Tensor, f64) {
    let f = f_n + grad_x_u * dt;
    (f, f.determinant())
}
