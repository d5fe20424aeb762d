//! Path-following for confidence bands, profile contours and the
//! confidence-level "bubble", by integrating differentiated KKT conditions.

mod band;
mod bubble;
mod contour;

pub use band::{band_field, band_field_gev_eliminated, trace_band, BandField, BandPoint, BandTrace};
pub use bubble::{bubble_field, bubble_init, trace_bubble, BubbleOptions, BubbleStatus, BubbleTrace};
pub use contour::{contour_field, trace_contour, Branch, BranchTrace, ContourOptions, ContourPoint, ContourTrace, DirectionFamily, UnitCircle};

use serde::{Deserialize, Serialize};

use crate::models::LikelihoodModel;
use crate::numerics::{solve_square, Matrix, Vector};
use crate::odesolve::OdeOptions;

/// θ together with the multiplier ν of ∇η = ν∇ℓ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub theta: Vector,
    pub nu: f64,
}

impl AugmentedState {
    pub fn to_vector(&self) -> Vector {
        let p = self.theta.len();
        let mut y = Vector::zeros(p + 1);
        y.rows_mut(0, p).copy_from(&self.theta);
        y[p] = self.nu;
        y
    }

    pub fn from_vector(y: &Vector) -> Self {
        let p = y.len() - 1;
        Self { theta: y.rows(0, p).into_owned(), nu: y[p] }
    }
}

/// Integration settings shared by the tracers.
#[derive(Debug, Clone, Copy)]
pub struct TracerOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Project accepted states back onto the likelihood level.
    pub project: bool,
    pub max_steps: usize,
}

impl Default for TracerOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, project: true, max_steps: 100_000 }
    }
}

impl TracerOptions {
    pub(crate) fn ode(&self) -> OdeOptions {
        OdeOptions { rtol: self.rtol, atol: self.atol, max_steps: self.max_steps, project: self.project, ..OdeOptions::default() }
    }
}

/// Newton corrections along ∇ℓ restoring ℓ(θ) = `level`.
pub fn project_to_level<M: LikelihoodModel + ?Sized>(model: &M, theta: &Vector, level: f64) -> Vector {
    let mut th = theta.clone();
    for _ in 0..20 {
        let (l, g) = model.loglik_grad(&th);
        let gg = g.norm_squared();
        if !l.is_finite() || gg == 0.0 {
            return theta.clone();
        }
        let c = level - l;
        if c.abs() <= 1e-15 * (1.0 + level.abs()) {
            break;
        }
        let next = &th + &g * (c / gg);
        if !model.in_domain(&next) {
            break;
        }
        th = next;
    }
    th
}

/// Least-squares multiplier (∇ℓᵀ∇η)/(∇ℓᵀ∇ℓ).
pub(crate) fn least_squares_nu(grad_l: &Vector, grad_eta: &Vector) -> f64 {
    grad_l.dot(grad_eta) / grad_l.norm_squared()
}

/// Solve the bordered system
/// `[−∇²η + ν∇²ℓ, ∇ℓ; ∇ℓᵀ, 0] [θ̇; ν̇] = [rhs_top; rhs_last]`.
pub(crate) fn saddle_solve(
    hess_eta: &Matrix,
    hess_l: &Matrix,
    grad_l: &Vector,
    nu: f64,
    rhs_top: &Vector,
    rhs_last: f64,
) -> crate::error::Result<Vector> {
    let p = grad_l.len();
    let mut m = Matrix::zeros(p + 1, p + 1);
    m.view_mut((0, 0), (p, p)).copy_from(&(hess_l * nu - hess_eta));
    m.view_mut((0, p), (p, 1)).copy_from(grad_l);
    m.view_mut((p, 0), (1, p)).copy_from(&grad_l.transpose());
    let mut rhs = Vector::zeros(p + 1);
    rhs.rows_mut(0, p).copy_from(rhs_top);
    rhs[p] = rhs_last;
    solve_square(&m, &rhs)
}
