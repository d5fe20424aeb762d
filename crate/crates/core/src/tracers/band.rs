use serde::{Deserialize, Serialize};

use super::{least_squares_nu, project_to_level, saddle_solve, AugmentedState, TracerOptions};
use crate::error::{Error, Result};
use crate::models::{IidGev, LikelihoodModel};
use crate::numerics::{solve_square, Matrix, Vector};
use crate::odesolve::{integrate, OdePath, OdeStatus, VectorField};
use crate::optimizer::{profile_bound, BoundOptions, MleFit, ProfileBound, Side};
use crate::target::{ReturnLevel, TargetFunction};

/// Derivative of the bound-attaining state with respect to the target's
/// extra variable `s`: the solution of
/// `[−∇²η + ν∇²ℓ, ∇ℓ; ∇ℓᵀ, 0] [θ̇; ν̇] = [∂²η/∂s∂θ; 0]`.
pub fn band_field<M, T>(model: &M, target: &T, state: &AugmentedState, s: f64) -> Result<(Vector, f64)>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    let (l, gl, hl) = model.loglik_hess(&state.theta);
    if !l.is_finite() {
        return Err(Error::OutsideDomain("band state".into()));
    }
    if gl.norm() == 0.0 {
        return Err(Error::Domain("vanishing score: the state is at the maximum".into()));
    }
    let e = target.eval(&state.theta, s);
    let sol = saddle_solve(&e.hess, &hl, &gl, state.nu, &e.cross, 0.0)?;
    let p = state.theta.len();
    Ok((sol.rows(0, p).into_owned(), sol[p]))
}

/// θ̇ for the iid GEV return level with the multiplier eliminated:
/// the rows `(∇∂ₖη − ∇rₖ)ᵀθ̇ = −∂²η/∂s∂θₖ` for k ∈ {σ, ξ}, where
/// `rₖ = ∂ₖℓ/∂µℓ`, and the tangency row `∇ℓᵀθ̇ = 0`.
pub fn band_field_gev_eliminated(model: &IidGev, s: f64, theta: &Vector) -> Result<Vector> {
    let (l, g, h) = model.loglik_hess(theta);
    if !l.is_finite() {
        return Err(Error::OutsideDomain("band state".into()));
    }
    let g0 = g[0];
    if g0 == 0.0 || !g0.is_finite() {
        return Err(Error::Elimination("the location score vanishes".into()));
    }
    let e = ReturnLevel::iid().eval(theta, s);
    let mut m = Matrix::zeros(3, 3);
    let mut rhs = Vector::zeros(3);
    for (row, k) in [1usize, 2].into_iter().enumerate() {
        for j in 0..3 {
            let grad_r = (h[(k, j)] * g0 - g[k] * h[(0, j)]) / (g0 * g0);
            m[(row, j)] = e.hess[(k, j)] - grad_r;
        }
        rhs[row] = -e.cross[k];
    }
    for j in 0..3 {
        m[(2, j)] = g[j];
    }
    solve_square(&m, &rhs)
}

/// [`band_field`] as an ODE on `y = [θ; ν]`, with projection onto the
/// likelihood level and a least-squares refresh of ν.
pub struct BandField<'a, M: ?Sized, T: ?Sized> {
    pub model: &'a M,
    pub target: &'a T,
    pub level: f64,
}

impl<M, T> BandField<'_, M, T>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    fn project_state(&self, s: f64, y: &Vector) -> Vector {
        let p = self.model.dim();
        let st = AugmentedState::from_vector(y);
        let theta = project_to_level(self.model, &st.theta, self.level);
        let gl = self.model.grad(&theta);
        let ge = self.target.eval(&theta, s).grad;
        let nu_ls = least_squares_nu(&gl, &ge);
        let nu = if nu_ls.is_finite() { 0.5 * st.nu + 0.5 * nu_ls } else { st.nu };
        let mut out = Vector::zeros(p + 1);
        out.rows_mut(0, p).copy_from(&theta);
        out[p] = nu;
        out
    }
}

impl<M, T> VectorField for BandField<'_, M, T>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    fn dim(&self) -> usize {
        self.model.dim() + 1
    }

    fn eval(&self, s: f64, y: &Vector) -> std::result::Result<Vector, String> {
        let st = AugmentedState::from_vector(y);
        let (dtheta, dnu) = band_field(self.model, self.target, &st, s).map_err(|e| e.to_string())?;
        Ok(AugmentedState { theta: dtheta, nu: dnu }.to_vector())
    }

    fn project(&self, s: f64, y: &Vector) -> Vector {
        self.project_state(s, y)
    }

    fn residual(&self, _s: f64, y: &Vector) -> f64 {
        let p = self.model.dim();
        (self.model.loglik(&y.rows(0, p).into_owned()) - self.level).abs()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandPoint {
    pub s: f64,
    pub value: f64,
    pub theta: Vector,
    pub nu: f64,
    pub constraint_residual: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandTrace {
    pub side: Side,
    /// One entry per grid point reached, in grid order.
    pub points: Vec<BandPoint>,
    pub initial: ProfileBound,
    pub path: OdePath,
    pub status: OdeStatus,
}

impl BandTrace {
    pub fn completed(&self) -> bool {
        self.status == OdeStatus::Completed
    }
}

/// Trace one side of a confidence band over an increasing grid of `s`.
///
/// The bound at the first grid point comes from [`profile_bound`]; the band
/// ODE then carries it across the grid, and the dense solution is projected
/// back onto the likelihood level at each grid point.
pub fn trace_band<M, T>(
    model: &M,
    target: &T,
    fit: &MleFit,
    delta: f64,
    side: Side,
    s_grid: &[f64],
    opts: &TracerOptions,
) -> Result<BandTrace>
where
    M: LikelihoodModel + ?Sized,
    T: TargetFunction + ?Sized,
{
    if s_grid.is_empty() {
        return Err(Error::Domain("empty grid".into()));
    }
    if s_grid.windows(2).any(|w| !(w[1] > w[0])) || s_grid.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("grid must be finite and strictly increasing".into()));
    }
    let level = fit.loglik_max - delta;
    let s0 = s_grid[0];
    let initial = profile_bound(model, target, s0, fit, delta, side, &BoundOptions::default())?;
    let field = BandField { model, target, level };
    let y0 = AugmentedState { theta: initial.theta.clone(), nu: initial.nu }.to_vector();
    let path = if s_grid.len() > 1 {
        integrate(&field, s0, *s_grid.last().unwrap(), &y0, &opts.ode())?
    } else {
        OdePath { times: vec![s0], states: vec![y0.clone()], derivs: vec![Vector::zeros(y0.len())], diagnostics: vec![], status: OdeStatus::Completed }
    };
    let mut points = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let Some(y) = path.sample(s) else { break };
        let y = if opts.project { field.project_state(s, &y) } else { y };
        let st = AugmentedState::from_vector(&y);
        let (l, gl) = model.loglik_grad(&st.theta);
        let e = target.eval(&st.theta, s);
        points.push(BandPoint {
            s,
            value: e.value,
            kkt_residual: (&e.grad - &gl * st.nu).norm(),
            constraint_residual: (l - level).abs(),
            theta: st.theta,
            nu: st.nu,
        });
    }
    let status = path.status.clone();
    Ok(BandTrace { side, points, initial, path, status })
}
