use serde::{Deserialize, Serialize};

use super::{least_squares_nu, project_to_level, saddle_solve, AugmentedState, TracerOptions};
use crate::error::{Error, Result};
use crate::models::LikelihoodModel;
use crate::numerics::{cholesky, Vector};
use crate::odesolve::{integrate, OdePath, VectorField};
use crate::optimizer::{kkt_polish, MleFit, ProfileBound, Side};
use crate::target::TargetFunction;

/// First-order approximation of the bound at a small level δ₁ from the
/// quadratic approximation of ℓ at θ̂: with q = h₀ᵀH₀⁻¹h₀ and
/// ν̃ = √q/√(2δ₁), θ̃ = θ̂ ± ν̃⁻¹H₀⁻¹h₀ (+ for the upper bound).
/// The returned multiplier follows ∇η = ν∇ℓ, so it is −ν̃ for the upper
/// bound and +ν̃ for the lower.
pub fn bubble_init(fit: &MleFit, h0: &Vector, delta1: f64, side: Side) -> Result<AugmentedState> {
    if !(delta1 > 0.0) {
        return Err(Error::Domain(format!("initial level must be positive, got {delta1}")));
    }
    let chol = cholesky(&fit.neg_hessian())
        .ok_or_else(|| Error::Curvature("negative Hessian at the MLE is not positive definite".into()))?;
    let dir = chol.solve(h0);
    let q = h0.dot(&dir);
    if !(q > 0.0) {
        return Err(Error::Domain("the target has a vanishing gradient at the MLE".into()));
    }
    let nu_tilde = q.sqrt() / (2.0 * delta1).sqrt();
    let sgn = side.sign();
    Ok(AugmentedState { theta: &fit.theta_hat + dir * (sgn / nu_tilde), nu: -sgn * nu_tilde })
}

/// Derivative of the bound-attaining state with respect to the level δ:
/// `[−∇²η + ν∇²ℓ, ∇ℓ; ∇ℓᵀ, 0] [θ̇; ν̇] = [0; −1]`.
pub fn bubble_field<M, T>(model: &M, target: &T, t: f64, state: &AugmentedState) -> Result<(Vector, f64)>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    let (l, gl, hl) = model.loglik_hess(&state.theta);
    if !l.is_finite() {
        return Err(Error::OutsideDomain("bubble state".into()));
    }
    let e = target.eval(&state.theta, t);
    let p = state.theta.len();
    let sol = saddle_solve(&e.hess, &hl, &gl, state.nu, &Vector::zeros(p), -1.0)?;
    Ok((sol.rows(0, p).into_owned(), sol[p]))
}

struct BubbleOde<'a, M: ?Sized, T: ?Sized> {
    model: &'a M,
    target: &'a T,
    t: f64,
    loglik_max: f64,
}

impl<M, T> VectorField for BubbleOde<'_, M, T>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    fn dim(&self) -> usize {
        self.model.dim() + 1
    }

    fn eval(&self, _delta: f64, y: &Vector) -> std::result::Result<Vector, String> {
        let st = AugmentedState::from_vector(y);
        let (dth, dnu) = bubble_field(self.model, self.target, self.t, &st).map_err(|e| e.to_string())?;
        Ok(AugmentedState { theta: dth, nu: dnu }.to_vector())
    }

    fn project(&self, delta: f64, y: &Vector) -> Vector {
        let st = AugmentedState::from_vector(y);
        let theta = project_to_level(self.model, &st.theta, self.loglik_max - delta);
        let nu_ls = least_squares_nu(&self.model.grad(&theta), &self.target.eval(&theta, self.t).grad);
        let nu = if nu_ls.is_finite() { 0.5 * st.nu + 0.5 * nu_ls } else { st.nu };
        AugmentedState { theta, nu }.to_vector()
    }

    fn residual(&self, delta: f64, y: &Vector) -> f64 {
        let p = self.model.dim();
        (self.model.loglik(&y.rows(0, p).into_owned()) - (self.loglik_max - delta)).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BubbleStatus {
    Reached,
    /// The path stopped before the target level; the region may not be
    /// connected along the path, or the saddle system became singular.
    LevelNotReached,
}

#[derive(Debug, Clone, Copy)]
pub struct BubbleOptions {
    /// Starting level; defaults to δ/100.
    pub delta1: Option<f64>,
    pub tracer: TracerOptions,
    /// Newton-correct the initial state and the endpoint on the KKT system.
    pub polish: bool,
}

impl Default for BubbleOptions {
    fn default() -> Self {
        Self { delta1: None, tracer: TracerOptions::default(), polish: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BubbleTrace {
    pub side: Side,
    pub delta1: f64,
    pub delta_target: f64,
    pub initial: AugmentedState,
    pub path: OdePath,
    pub status: BubbleStatus,
    pub bound: Option<ProfileBound>,
}

impl BubbleTrace {
    /// (δ, ν) along the accepted steps.
    pub fn nu_series(&self) -> Vec<(f64, f64)> {
        self.path.times.iter().zip(&self.path.states).map(|(&d, y)| (d, y[y.len() - 1])).collect()
    }
}

/// Follow one bound of η from level δ₁ out to `delta_target`.
pub fn trace_bubble<M, T>(
    model: &M,
    target: &T,
    t: f64,
    fit: &MleFit,
    delta_target: f64,
    side: Side,
    opts: &BubbleOptions,
) -> Result<BubbleTrace>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    if !(delta_target > 0.0) {
        return Err(Error::Domain(format!("target level must be positive, got {delta_target}")));
    }
    let delta1 = opts.delta1.unwrap_or(delta_target / 100.0);
    if !(delta1 > 0.0 && delta1 < delta_target) {
        return Err(Error::Domain("initial level must lie in (0, target level)".into()));
    }
    let h0 = target.eval(&fit.theta_hat, t).grad;
    let mut init = bubble_init(fit, &h0, delta1, side)?;
    if !model.in_domain(&init.theta) {
        return Err(Error::OutsideDomain("bubble initial point".into()));
    }
    if opts.polish {
        init = polish_state(model, target, t, &init, fit.loglik_max - delta1);
    }
    let ode = BubbleOde { model, target, t, loglik_max: fit.loglik_max };
    let path = integrate(&ode, delta1, delta_target, &init.to_vector(), &opts.tracer.ode())?;
    if !path.completed() {
        return Ok(BubbleTrace { side, delta1, delta_target, initial: init, path, status: BubbleStatus::LevelNotReached, bound: None });
    }
    let level = fit.loglik_max - delta_target;
    let mut end = AugmentedState::from_vector(path.final_state());
    if opts.polish {
        end = polish_state(model, target, t, &end, level);
    }
    let (l, gl) = model.loglik_grad(&end.theta);
    let e = target.eval(&end.theta, t);
    let kkt = (&e.grad - &gl * end.nu).norm();
    let cres = (l - level).abs();
    let converged = cres <= 1e-8 * (1.0 + fit.loglik_max.abs()) && kkt <= 1e-6 * (1.0 + e.grad.norm());
    let bound = ProfileBound {
        side,
        value: e.value,
        theta: end.theta,
        nu: end.nu,
        kkt_residual: kkt,
        constraint_residual: cres,
        converged,
        iterations: path.times.len() - 1,
    };
    Ok(BubbleTrace { side, delta1, delta_target, initial: init, path, status: BubbleStatus::Reached, bound: Some(bound) })
}

fn polish_state<M, T>(model: &M, target: &T, t: f64, state: &AugmentedState, level: f64) -> AugmentedState
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    match kkt_polish(model, target, t, &state.theta, state.nu, level, 30) {
        Ok(p) if p.nu * state.nu > 0.0 && model.in_domain(&p.theta) => AugmentedState { theta: p.theta, nu: p.nu },
        _ => state.clone(),
    }
}
