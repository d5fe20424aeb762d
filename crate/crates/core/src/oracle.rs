//! Reference implementations: the nested profile-likelihood method (maximise
//! over each slice η(θ) = ψ, then root-find in ψ) and the closed-form
//! interval of Gaussian linear regression.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LikelihoodModel, LinearGaussianSpec, VarianceMode, build_linear_gaussian};
use crate::numerics::{brent_root, cholesky, deviance_threshold, solve_spd, Matrix, Vector};
use crate::optimizer::{newton_maximize, MleFit, NewtonOptions, Side};
use crate::target::{solve_pivot, TargetFunction};

/// Maximum of ℓ over one slice η(θ, t) = ψ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceMaximum {
    pub psi: f64,
    pub loglik: f64,
    pub theta: Vector,
    pub converged: bool,
}

/// Place `theta` on the slice by moving the pivot coordinate.
fn onto_slice<T: TargetFunction + ?Sized>(target: &T, theta: &Vector, value: f64, t: f64) -> Option<Vector> {
    let mut th = theta.clone();
    for _ in 0..50 {
        let e = target.eval(&th, t);
        if (e.value - value).abs() <= 1e-13 * (1.0 + value.abs()) {
            return Some(th);
        }
        th = solve_pivot(target, &th, value, t)?;
        if th.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    let e = target.eval(&th, t);
    ((e.value - value).abs() <= 1e-10 * (1.0 + value.abs())).then_some(th)
}

/// Maximise ℓ over the slice η(θ, t) = `value`, starting from `init`.
///
/// The slice is parameterised by the coordinates other than the target's
/// pivot k; θₖ is recovered from the constraint. With J = ∂θ/∂λ (identity
/// rows plus the row −∇η/ηₖ), the reduced derivatives are Jᵀ∇ℓ and
/// JᵀHℓJ − (ℓₖ/ηₖ)JᵀHηJ.
pub fn naive_profile_value<M, T>(model: &M, target: &T, t: f64, value: f64, init: &Vector) -> Result<SliceMaximum>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    let p = model.dim();
    let k = target
        .pivot(t)
        .ok_or_else(|| Error::UnsupportedModel(format!("{} cannot be solved for a free coordinate", target.name())))?;
    let start = onto_slice(target, init, value, t).ok_or_else(|| Error::Elimination("starting point cannot be moved onto the slice".into()))?;
    if !model.in_domain(&start) {
        return Err(Error::OutsideDomain(format!("slice start for value {value}")));
    }
    let free: Vec<usize> = (0..p).filter(|&j| j != k).collect();
    let restrict = |th: &Vector| Vector::from_iterator(free.len(), free.iter().map(|&j| th[j]));
    // Last full parameter, so that the pivot solve starts near the slice.
    let anchor = RefCell::new(start.clone());

    let slice_fn = |lambda: &Vector| -> (f64, Vector, Matrix) {
        let q = free.len();
        let fail = (f64::NEG_INFINITY, Vector::zeros(q), Matrix::zeros(q, q));
        let mut th = anchor.borrow().clone();
        for (i, &j) in free.iter().enumerate() {
            th[j] = lambda[i];
        }
        let Some(th) = onto_slice(target, &th, value, t) else { return fail };
        let (l, gl, hl) = model.loglik_hess(&th);
        if !l.is_finite() {
            return fail;
        }
        let e = target.eval(&th, t);
        let eta_k = e.grad[k];
        let mut jac = Matrix::zeros(p, q);
        for (i, &j) in free.iter().enumerate() {
            jac[(j, i)] = 1.0;
            jac[(k, i)] = -e.grad[j] / eta_k;
        }
        let g = jac.transpose() * &gl;
        let h = jac.transpose() * (&hl - &e.hess * (gl[k] / eta_k)) * &jac;
        *anchor.borrow_mut() = th;
        (l, g, h)
    };

    let x0 = restrict(&start);
    let best = newton_maximize(slice_fn, &x0, NewtonOptions::default());
    let mut theta = anchor.borrow().clone();
    for (i, &j) in free.iter().enumerate() {
        theta[j] = best.x[i];
    }
    let theta = onto_slice(target, &theta, value, t).unwrap_or(theta);
    Ok(SliceMaximum { psi: value, loglik: model.loglik(&theta), theta, converged: best.converged })
}

/// ℓprof evaluated over a grid of target values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileCurve {
    pub psi: Vector,
    pub loglik: Vector,
    pub converged: Vec<bool>,
}

/// Profile log-likelihood at each value in `psi`, warm-starting every slice
/// from its neighbour on the way out from η(θ̂).
pub fn profile_curve<M, T>(model: &M, fit: &MleFit, target: &T, t: f64, psi: &[f64]) -> Result<ProfileCurve>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    let psi_hat = target.value(&fit.theta_hat, t);
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| psi[a].total_cmp(&psi[b]));
    let (below, above): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| psi[i] < psi_hat);
    let mut loglik = Vector::from_element(psi.len(), f64::NEG_INFINITY);
    let mut converged = vec![false; psi.len()];
    for run in [above, below.into_iter().rev().collect()] {
        let mut warm = fit.theta_hat.clone();
        for i in run {
            match naive_profile_value(model, target, t, psi[i], &warm) {
                Ok(s) => {
                    loglik[i] = s.loglik;
                    converged[i] = s.converged;
                    if s.loglik.is_finite() {
                        warm = s.theta;
                    }
                }
                Err(Error::OutsideDomain(_)) | Err(Error::Elimination(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(ProfileCurve { psi: Vector::from_column_slice(psi), loglik, converged })
}

/// Bound from the nested method, with the root-equation residual
/// ℓprof(ψ) − (ℓmax − δ).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaiveBound {
    pub side: Side,
    pub value: f64,
    pub theta: Vector,
    pub residual: f64,
    pub converged: bool,
}

/// Solve ℓprof(ψ) = ℓmax − δ on one side of ψ̂ by Brent's method.
///
/// The bracket starts at the quadratic-approximation distance √(2δ·h₀ᵀH₀⁻¹h₀)
/// and doubles up to ten times.
pub fn naive_bound<M, T>(model: &M, fit: &MleFit, target: &T, t: f64, delta: f64, side: Side) -> Result<NaiveBound>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("level δ must be positive, got {delta}")));
    }
    let e0 = target.eval(&fit.theta_hat, t);
    let psi_hat = e0.value;
    let neg_h = fit.neg_hessian();
    if cholesky(&neg_h).is_none() {
        return Err(Error::Curvature("negative Hessian at the MLE is not positive definite".into()));
    }
    let var = e0.grad.dot(&solve_spd(&neg_h, &e0.grad)?);
    let scale = (2.0 * delta * var).sqrt().max(1e-8 * (1.0 + psi_hat.abs()));
    let level = fit.loglik_max - delta;
    let sgn = side.sign();

    let warm = RefCell::new(fit.theta_hat.clone());
    let last = RefCell::new(None::<SliceMaximum>);
    let eval = |psi: f64| -> f64 {
        let start = warm.borrow().clone();
        let slice = naive_profile_value(model, target, t, psi, &start)
            .or_else(|_| naive_profile_value(model, target, t, psi, &fit.theta_hat));
        match slice {
            Ok(s) if s.loglik.is_finite() => {
                let r = s.loglik - level;
                *warm.borrow_mut() = s.theta.clone();
                *last.borrow_mut() = Some(s);
                r
            }
            _ => f64::NEG_INFINITY,
        }
    };

    let mut inner = psi_hat;
    let mut outer = None;
    let mut step = scale;
    for _ in 0..=10 {
        let trial = psi_hat + sgn * step;
        if eval(trial) < 0.0 {
            outer = Some(trial);
            break;
        }
        inner = trial;
        step *= 2.0;
    }
    let outer = outer.ok_or_else(|| {
        Error::Unbounded(format!("profile of {} stays above the level within {:.3e} of the estimate", target.name(), step / 2.0))
    })?;
    // Restart the warm chain from the inside end of the bracket.
    *warm.borrow_mut() = fit.theta_hat.clone();
    eval(inner);
    let root = brent_root(&eval, inner, outer, 1e-14 * (1.0 + psi_hat.abs()), 200)?;
    let residual = eval(root);
    let s = last.borrow().clone().ok_or_else(|| Error::Convergence {
        what: "profile slice at the bound".into(),
        iterations: 0,
        last_value: None,
        last_theta: None,
    })?;
    Ok(NaiveBound {
        side,
        value: root,
        theta: s.theta,
        residual,
        converged: s.converged && residual.abs() <= 1e-8,
    })
}

/// Textbook confidence interval for the regression mean x_newᵀθ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinregInterval {
    pub lower: f64,
    pub upper: f64,
    pub estimate: f64,
    pub s_mu: f64,
}

/// x_newᵀθ̂ ± s_µ·√(2δ), δ = q_{χ²(1)}(1 − α)/2, with
/// s_µ² = σ²·x_newᵀ(XᵀX)⁻¹x_new and σ² replaced by RSS/n when profiled out.
pub fn linreg_interval(spec: &LinearGaussianSpec, x_new: &Vector, alpha: f64) -> Result<LinregInterval> {
    let model = build_linear_gaussian(spec)?;
    if x_new.len() != model.dim() {
        return Err(Error::Dimension(format!("x_new has {} entries, the design {} columns", x_new.len(), model.dim())));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("α must lie in (0, 1], got {alpha}")));
    }
    let delta = deviance_threshold(1.0 - alpha, 1)?;
    let theta_hat = model.least_squares();
    let sigma2 = match spec.variance_mode {
        VarianceMode::Known(s2) => s2,
        VarianceMode::ProfiledOut => (spec.responses.clone() - &spec.design * &theta_hat).norm_squared() / spec.responses.len() as f64,
    };
    let xtx = spec.design.transpose() * &spec.design;
    let s_mu = (sigma2 * x_new.dot(&solve_spd(&xtx, x_new)?)).sqrt();
    let estimate = x_new.dot(&theta_hat);
    let half = s_mu * (2.0 * delta).sqrt();
    Ok(LinregInterval { lower: estimate - half, upper: estimate + half, estimate, s_mu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QuadraticModel;
    use crate::optimizer::fit_mle;
    use crate::target::{Coordinate, LinearTarget};

    fn three_point(mode: VarianceMode) -> LinearGaussianSpec {
        LinearGaussianSpec {
            design: Matrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]),
            responses: Vector::from_vec(vec![0.0, 1.0, 2.0]),
            variance_mode: mode,
        }
    }

    #[test]
    fn three_point_interval() {
        let r = linreg_interval(&three_point(VarianceMode::Known(1.0)), &Vector::from_vec(vec![1.0, 3.0]), 0.05).unwrap();
        assert!((r.s_mu - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let half = (7.0f64 / 3.0).sqrt() * 1.959963984540054;
        assert!((r.lower - (3.0 - half)).abs() < 1e-9 && (r.upper - (3.0 + half)).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn unit_leverage() {
        let spec = LinearGaussianSpec {
            design: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            responses: Vector::from_vec(vec![0.3, -0.2]),
            variance_mode: VarianceMode::Known(2.25),
        };
        let r = linreg_interval(&spec, &Vector::from_vec(vec![0.0, 1.0]), 0.1).unwrap();
        assert!((r.s_mu - 1.5).abs() < 1e-14);
    }

    #[test]
    fn collapses_as_alpha_tends_to_one() {
        let r = linreg_interval(&three_point(VarianceMode::Known(1.0)), &Vector::from_vec(vec![1.0, 3.0]), 1.0).unwrap();
        assert_eq!(r.lower, r.upper);
        assert!((r.estimate - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mean_with_profiled_variance() {
        // Sample with mean 0 and ML variance 1.
        let n = 100;
        let y = Vector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let spec = LinearGaussianSpec { design: Matrix::from_element(n, 1, 1.0), responses: y, variance_mode: VarianceMode::ProfiledOut };
        let model = build_linear_gaussian(&spec).unwrap();
        let fit = fit_mle(&model, None).unwrap();
        let delta = deviance_threshold(0.95, 1).unwrap();
        let mu = Coordinate::new(0, "mu");
        let expected = ((2.0 * delta / n as f64).exp() - 1.0).sqrt();
        for side in [Side::Lower, Side::Upper] {
            let b = naive_bound(&model, &fit, &mu, 0.0, delta, side).unwrap();
            assert!((b.value - side.sign() * expected).abs() < 1e-9, "{b:?}");
            assert!(b.residual.abs() <= 1e-8 && b.converged);
        }
    }

    #[test]
    fn profile_at_estimate_is_maximum() {
        let h = Matrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let m = QuadraticModel::new(Vector::from_vec(vec![1.0, -1.0, 0.5]), h, -4.0).unwrap();
        let fit = fit_mle(&m, None).unwrap();
        let target = LinearTarget::fixed(Vector::from_vec(vec![0.3, 1.0, -0.7]), "eta");
        let psi_hat = target.value(&fit.theta_hat, 0.0);
        let s = naive_profile_value(&m, &target, 0.0, psi_hat, &Vector::zeros(3)).unwrap();
        assert!((s.loglik - fit.loglik_max).abs() < 1e-10);
    }

    #[test]
    fn schur_complement_curvature() {
        let h = Matrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
        let m = QuadraticModel::new(Vector::zeros(2), h.clone(), 0.0).unwrap();
        let c11 = h.try_inverse().unwrap()[(0, 0)];
        let target = Coordinate::new(0, "theta1");
        for psi in [-1.0, 0.3, 2.0] {
            let s = naive_profile_value(&m, &target, 0.0, psi, &Vector::zeros(2)).unwrap();
            assert!((s.loglik + psi * psi / (2.0 * c11)).abs() < 1e-10);
        }
    }

    #[test]
    fn unsupported_without_pivot() {
        let m = QuadraticModel::isotropic(Vector::zeros(2));
        let zero = LinearTarget::fixed(Vector::zeros(2), "zero");
        assert!(matches!(naive_profile_value(&m, &zero, 0.0, 1.0, &Vector::zeros(2)), Err(Error::UnsupportedModel(_))));
    }
}
