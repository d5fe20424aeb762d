//! Maximum-likelihood fitting and the constrained bound solver.

mod bound;
mod quasi_newton;

pub use bound::{kkt_polish, profile_bound, BoundOptions, KktPolish, ProfileBound, Side};
pub(crate) use quasi_newton::{minimize_bfgs, BfgsOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LikelihoodModel;
use crate::numerics::{cholesky, Matrix, Vector};

/// Result of maximum-likelihood fitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleFit {
    pub theta_hat: Vector,
    pub loglik_max: f64,
    /// ∇²ℓ(θ̂), negative definite.
    pub hessian_at_max: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

impl MleFit {
    /// Negative Hessian H₀ at the maximum.
    pub fn neg_hessian(&self) -> Matrix {
        -&self.hessian_at_max
    }

    /// Wald covariance H₀⁻¹.
    pub fn covariance(&self) -> Result<Matrix> {
        let chol = cholesky(&self.neg_hessian())
            .ok_or_else(|| Error::Curvature("negative Hessian at the MLE is not positive definite".into()))?;
        Ok(chol.inverse())
    }
}

/// Outcome of an unconstrained maximisation.
#[derive(Debug, Clone)]
pub(crate) struct Maximum {
    pub x: Vector,
    pub value: f64,
    pub hess: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence when ‖g‖ ≤ gtol·(1 + |f|), or when the Newton decrement
    /// is below `gtol_tight`·(1 + |f|) (rounding floor on badly scaled
    /// parameters).
    pub gtol: f64,
    /// Keep iterating towards this tighter tolerance while progress is made.
    pub gtol_tight: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iter: 500, gtol: 1e-6, gtol_tight: 1e-10 }
    }
}

/// Newton ascent with backtracking line search. When the Hessian is not
/// negative definite the direction comes from a BFGS approximation of the
/// inverse negative Hessian built from the iterates so far.
pub(crate) fn newton_maximize<F>(f: F, x0: &Vector, opts: NewtonOptions) -> Maximum
where
    F: Fn(&Vector) -> (f64, Vector, Matrix),
{
    let p = x0.len();
    let mut x = x0.clone();
    let (mut v, mut g, mut h) = f(&x);
    let mut inv_approx: Option<Matrix> = None;
    let mut iterations = 0;
    while iterations < opts.max_iter && v.is_finite() {
        let gnorm = g.norm();
        if gnorm <= opts.gtol_tight * (1.0 + v.abs()) {
            break;
        }
        iterations += 1;
        let neg_h = -&h;
        let mut dir = match cholesky(&neg_h) {
            Some(ch) => ch.solve(&g),
            None => match &inv_approx {
                Some(b) => b * &g,
                None => &g / gnorm.max(1.0),
            },
        };
        if !(dir.dot(&g) > 0.0) || dir.iter().any(|d| !d.is_finite()) {
            dir = &g / gnorm.max(1.0);
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            let (tv, tg, th) = f(&trial);
            if tv.is_finite() && tv >= v + 1e-4 * step * slope {
                accepted = Some((trial, tv, tg, th));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, vn, gn, hn)) = accepted else { break };
        let s = &xn - &x;
        let y = &g - &gn;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let b = inv_approx.get_or_insert_with(|| Matrix::identity(p, p) * (sy / y.norm_squared()));
            bfgs_inverse_update(b, &s, &y);
        }
        let stalled = (vn - v).abs() <= 1e-15 * (1.0 + v.abs()) && s.norm() <= 1e-15 * (1.0 + x.norm());
        x = xn;
        v = vn;
        g = gn;
        h = hn;
        if stalled {
            break;
        }
    }
    let converged = v.is_finite() && (g.norm() <= opts.gtol * (1.0 + v.abs()) || newton_decrement(&g, &h) <= opts.gtol_tight * (1.0 + v.abs()));
    Maximum { x, value: v, hess: h, iterations, converged }
}

/// gᵀ(−H)⁻¹g, the predicted increase of a full Newton step (times two);
/// infinite when −H is not positive definite.
fn newton_decrement(g: &Vector, h: &Matrix) -> f64 {
    match cholesky(&(-h)) {
        Some(ch) => g.dot(&ch.solve(g)),
        None => f64::INFINITY,
    }
}

/// BFGS update of an inverse-Hessian approximation `b` with step `s` and
/// gradient change `y` (sᵀy > 0).
pub(crate) fn bfgs_inverse_update(b: &mut Matrix, s: &Vector, y: &Vector) {
    let rho = 1.0 / s.dot(y);
    let by = &*b * y;
    let y_by = y.dot(&by);
    // B ← B − ρ(s yᵀB + B y sᵀ) + (ρ² yᵀBy + ρ) s sᵀ
    *b -= (s * by.transpose() + &by * s.transpose()) * rho;
    *b += (s * s.transpose()) * (rho * rho * y_by + rho);
}

const SHAPE_FLOOR: f64 = -1.0 + 1e-6;
const BARRIER_WEIGHT: f64 = 1e-3;
const BARRIER_ITERS: usize = 25;

/// Maximum-likelihood fit by Newton's method.
///
/// Models with GEV shape coordinates are first fitted with a logarithmic
/// barrier keeping ξ above −1; the barrier is then dropped and the search
/// continues on the plain log-likelihood.
pub fn fit_mle<M: LikelihoodModel + ?Sized>(model: &M, init: Option<&Vector>) -> Result<MleFit> {
    let x0 = match init {
        Some(x) => {
            if x.len() != model.dim() {
                return Err(Error::Dimension(format!("initial point has length {}, expected {}", x.len(), model.dim())));
            }
            if !model.in_domain(x) {
                return Err(Error::OutsideDomain("initial point".into()));
            }
            x.clone()
        }
        None => {
            let x = model.initial_guess();
            if !model.in_domain(&x) {
                return Err(Error::OutsideDomain("default starting point".into()));
            }
            x
        }
    };
    let shapes = model.shape_coordinates();
    let mut start = x0;
    let mut used = 0;
    if !shapes.is_empty() {
        let barrier = |th: &Vector| {
            let (mut v, mut g, mut h) = model.loglik_hess(th);
            for &k in &shapes {
                let gap = th[k] - SHAPE_FLOOR;
                if gap <= 0.0 {
                    return (f64::NEG_INFINITY, g, h);
                }
                v += BARRIER_WEIGHT * gap.ln();
                g[k] += BARRIER_WEIGHT / gap;
                h[(k, k)] -= BARRIER_WEIGHT / (gap * gap);
            }
            (v, g, h)
        };
        let opts = NewtonOptions { max_iter: BARRIER_ITERS, gtol: 1e-4, gtol_tight: 1e-6 };
        let early = newton_maximize(barrier, &start, opts);
        used = early.iterations;
        if model.in_domain(&early.x) {
            start = early.x;
        }
    }
    let m = newton_maximize(|th: &Vector| model.loglik_hess(th), &start, NewtonOptions::default());
    let iterations = used + m.iterations;
    if !m.converged {
        return Err(Error::Convergence {
            what: "maximum-likelihood fit".into(),
            iterations,
            last_value: Some(m.value),
            last_theta: Some(m.x.iter().copied().collect()),
        });
    }
    if cholesky(&(-&m.hess)).is_none() {
        return Err(Error::Curvature("Hessian at the maximum is not negative definite".into()));
    }
    Ok(MleFit { theta_hat: m.x, loglik_max: m.value, hessian_at_max: m.hess, iterations, converged: true })
}
