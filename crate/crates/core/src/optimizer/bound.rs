use serde::{Deserialize, Serialize};

use super::{minimize_bfgs, BfgsOptions, MleFit};
use crate::error::{Error, Result};
use crate::models::LikelihoodModel;
use crate::numerics::{cholesky, solve_square, Matrix, Vector};
use crate::target::TargetFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    /// +1 for the upper bound, −1 for the lower.
    pub fn sign(self) -> f64 {
        match self {
            Side::Lower => -1.0,
            Side::Upper => 1.0,
        }
    }
}

/// Settings of the augmented-Lagrangian bound solver.
#[derive(Debug, Clone)]
pub struct BoundOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Constraint tolerance relative to 1 + |ℓmax|.
    pub tol_constraint: f64,
    /// Stationarity tolerance relative to 1 + ‖∇η‖.
    pub tol_kkt: f64,
    /// Refine a converged solution by Newton's method on the KKT system.
    pub polish: bool,
    /// Warm start: a point near the bound and its multiplier.
    pub start: Option<(Vector, f64)>,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self { max_outer: 200, max_inner: 500, tol_constraint: 1e-8, tol_kkt: 1e-6, polish: true, start: None }
    }
}

/// One confidence end-point with the multiplier ν of ∇η = ν∇ℓ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileBound {
    pub side: Side,
    pub value: f64,
    pub theta: Vector,
    pub nu: f64,
    pub kkt_residual: f64,
    pub constraint_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

const UNBOUNDED_LIMIT: f64 = 1e12;
/// The inner search is confined to ℓ ≥ ℓmax − (1 + REGION_FACTOR)·δ; for
/// fast-growing targets the penalised objective is unbounded below outside it.
const REGION_FACTOR: f64 = 9.0;

/// Maximise (upper) or minimise (lower) η(θ, t) subject to ℓ(θ) = ℓmax − δ.
///
/// Augmented Lagrangian on the single equality constraint with a BFGS inner
/// solver. The start point is the first-order approximation of the bound at
/// level δ/4, obtained from the quadratic approximation of ℓ at θ̂.
pub fn profile_bound<M, T>(
    model: &M,
    target: &T,
    t: f64,
    fit: &MleFit,
    delta: f64,
    side: Side,
    opts: &BoundOptions,
) -> Result<ProfileBound>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("delta must be positive, got {delta}")));
    }
    if !fit.converged {
        return Err(Error::Domain("the maximum-likelihood fit did not converge".into()));
    }
    let sgn = side.sign();
    let level = fit.loglik_max - delta;
    let tol_c = opts.tol_constraint * (1.0 + fit.loglik_max.abs());
    let h0 = target.eval(&fit.theta_hat, t).grad;

    let (x0, lambda0) = match &opts.start {
        Some((x, nu)) => {
            if !model.in_domain(x) {
                return Err(Error::OutsideDomain("warm start of the bound solver".into()));
            }
            (x.clone(), (-sgn * nu).abs().max(1e-8))
        }
        None => first_order_start(model, fit, &h0, delta, sgn)?,
    };
    let inner_gtol = 0.5 * opts.tol_kkt * (1.0 + h0.norm());

    let mut x = x0;
    let mut lambda = lambda0;
    let mut rho = 10.0 * lambda0;
    let mut prev_c = f64::INFINITY;
    let mut iterations = 0;
    let mut last_kkt = f64::INFINITY;
    while iterations < opts.max_outer {
        iterations += 1;
        let merit = |th: &Vector| {
            let (l, gl) = model.loglik_grad(th);
            if !l.is_finite() {
                return (f64::INFINITY, gl);
            }
            let e = target.eval(th, t);
            let c = l - level;
            if c < -REGION_FACTOR * delta {
                return (f64::INFINITY, gl);
            }
            let v = -sgn * e.value - lambda * c + 0.5 * rho * c * c;
            let g = -sgn * e.grad + gl * (rho * c - lambda);
            (v, g)
        };
        let inner = minimize_bfgs(merit, &x, BfgsOptions { max_iter: opts.max_inner, gtol: inner_gtol });
        x = inner.x;
        let eval = target.eval(&x, t);
        if eval.value.abs() > UNBOUNDED_LIMIT || x.amax() > UNBOUNDED_LIMIT || !inner.value.is_finite() {
            return Err(Error::Unbounded(format!("{} has no finite {:?} bound on the likelihood region", target.name(), side)));
        }
        let (l, gl) = model.loglik_grad(&x);
        let c = l - level;
        lambda -= rho * c;
        let nu = -sgn * lambda;
        last_kkt = (&eval.grad - &gl * nu).norm();
        let tol_k = opts.tol_kkt * (1.0 + eval.grad.norm());
        if c.abs() <= tol_c && last_kkt <= tol_k && inner.converged {
            let mut bound = ProfileBound {
                side,
                value: eval.value,
                theta: x,
                nu,
                kkt_residual: last_kkt,
                constraint_residual: c.abs(),
                converged: true,
                iterations,
            };
            if opts.polish {
                polish_bound(model, target, t, level, &mut bound);
            }
            return Ok(bound);
        }
        if c.abs() > 0.25 * prev_c.abs() {
            rho *= 10.0;
        }
        prev_c = c;
    }
    Err(Error::Convergence {
        what: format!("{:?} bound of {} (KKT residual {last_kkt:.2e}, constraint residual {prev_c:.2e})", side, target.name()),
        iterations,
        last_value: Some(target.value(&x, t)),
        last_theta: Some(x.iter().copied().collect()),
    })
}

/// Bound start point θ̂ + sgn·√(2δ₁/q)·H₀⁻¹h₀ with δ₁ = δ/4 and the matching
/// multiplier magnitude √(q/2δ).
fn first_order_start<M: LikelihoodModel + ?Sized>(
    model: &M,
    fit: &MleFit,
    h0: &Vector,
    delta: f64,
    sgn: f64,
) -> Result<(Vector, f64)> {
    let chol = cholesky(&fit.neg_hessian())
        .ok_or_else(|| Error::Curvature("negative Hessian at the MLE is not positive definite".into()))?;
    let dir = chol.solve(h0);
    let q = h0.dot(&dir);
    if !(q > 0.0) {
        return Err(Error::Domain("the target has a vanishing gradient at the MLE".into()));
    }
    let mut step = sgn * (2.0 * delta / 4.0 / q).sqrt();
    let mut x = &fit.theta_hat + &dir * step;
    for _ in 0..50 {
        if model.in_domain(&x) {
            break;
        }
        step *= 0.5;
        x = &fit.theta_hat + &dir * step;
    }
    Ok((x, (q / (2.0 * delta)).sqrt()))
}

fn polish_bound<M, T>(model: &M, target: &T, t: f64, level: f64, bound: &mut ProfileBound)
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    let Ok(p) = kkt_polish(model, target, t, &bound.theta, bound.nu, level, 20) else { return };
    let same_branch = p.nu * bound.nu > 0.0;
    if same_branch && p.kkt_residual <= bound.kkt_residual && p.constraint_residual <= bound.constraint_residual.max(1e-300) * 10.0 {
        bound.value = target.value(&p.theta, t);
        bound.theta = p.theta;
        bound.nu = p.nu;
        bound.kkt_residual = p.kkt_residual;
        bound.constraint_residual = p.constraint_residual;
    }
}

/// Result of Newton's method on the KKT system.
#[derive(Debug, Clone)]
pub struct KktPolish {
    pub theta: Vector,
    pub nu: f64,
    pub kkt_residual: f64,
    pub constraint_residual: f64,
    pub iterations: usize,
}

/// Newton iterations on `∇η − ν∇ℓ = 0, ℓ − level = 0` from `(theta, nu)`.
/// Each step is damped until the residual norm decreases; iteration stops
/// when no further decrease is possible.
pub fn kkt_polish<M, T>(model: &M, target: &T, t: f64, theta: &Vector, nu: f64, level: f64, max_iter: usize) -> Result<KktPolish>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    let p = theta.len();
    let residual = |th: &Vector, nu: f64| -> Option<(Vector, Matrix)> {
        let (l, gl, hl) = model.loglik_hess(th);
        if !l.is_finite() {
            return None;
        }
        let e = target.eval(th, t);
        let mut r = Vector::zeros(p + 1);
        r.rows_mut(0, p).copy_from(&(&e.grad - &gl * nu));
        r[p] = l - level;
        let mut j = Matrix::zeros(p + 1, p + 1);
        j.view_mut((0, 0), (p, p)).copy_from(&(&e.hess - &hl * nu));
        j.view_mut((0, p), (p, 1)).copy_from(&(-&gl));
        j.view_mut((p, 0), (1, p)).copy_from(&gl.transpose());
        Some((r, j))
    };
    let mut th = theta.clone();
    let mut nu = nu;
    let (mut r, mut j) = residual(&th, nu).ok_or_else(|| Error::OutsideDomain("KKT polish start".into()))?;
    let mut iterations = 0;
    while iterations < max_iter {
        let rn = r.norm();
        if rn == 0.0 {
            break;
        }
        let Ok(step) = solve_square(&j, &(-&r)) else { break };
        let mut alpha = 1.0;
        let mut improved = None;
        for _ in 0..30 {
            let tn = &th + step.rows(0, p) * alpha;
            let nn = nu + alpha * step[p];
            if let Some((rr, jj)) = residual(&tn, nn) {
                if rr.norm() < rn {
                    improved = Some((tn, nn, rr, jj));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((tn, nn, rr, jj)) = improved else { break };
        iterations += 1;
        th = tn;
        nu = nn;
        r = rr;
        j = jj;
    }
    Ok(KktPolish {
        kkt_residual: r.rows(0, p).norm(),
        constraint_residual: r[p].abs(),
        theta: th,
        nu,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QuadraticModel;
    use crate::optimizer::fit_mle;
    use crate::target::{Coordinate, LinearTarget};

    #[test]
    fn quadratic_linear_closed_form() {
        let h = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = QuadraticModel::new(Vector::from_vec(vec![1.0, -1.0]), h.clone(), -3.0).unwrap();
        let fit = fit_mle(&m, None).unwrap();
        let a = Vector::from_vec(vec![0.3, -0.7]);
        let target = LinearTarget::fixed(a.clone(), "lin");
        let delta = 1.920729;
        let hinv_a = h.clone().try_inverse().unwrap() * &a;
        let half_width = (2.0 * delta * a.dot(&hinv_a)).sqrt();
        let centre = a.dot(&fit.theta_hat);
        for side in [Side::Lower, Side::Upper] {
            let b = profile_bound(&m, &target, 0.0, &fit, delta, side, &BoundOptions::default()).unwrap();
            assert!((b.value - (centre + side.sign() * half_width)).abs() < 1e-8, "{side:?} {}", b.value);
            assert!(b.nu * side.sign() < 0.0);
        }
    }

    #[test]
    fn bounds_widen_with_delta() {
        let m = QuadraticModel::isotropic(Vector::from_vec(vec![0.0, 0.0, 0.0]));
        let fit = fit_mle(&m, None).unwrap();
        let target = Coordinate::new(1, "theta2");
        let mut prev = 0.0;
        for delta in [0.5, 1.0, 2.0, 4.0] {
            let b = profile_bound(&m, &target, 0.0, &fit, delta, Side::Upper, &BoundOptions::default()).unwrap();
            assert!(b.value > prev);
            prev = b.value;
        }
    }

    #[test]
    fn rejects_nonpositive_delta() {
        let m = QuadraticModel::isotropic(Vector::from_vec(vec![0.0, 0.0]));
        let fit = fit_mle(&m, None).unwrap();
        let r = profile_bound(&m, &Coordinate::new(0, "a"), 0.0, &fit, 0.0, Side::Upper, &BoundOptions::default());
        assert!(r.is_err());
    }
}
