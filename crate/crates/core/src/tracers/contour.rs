use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::{project_to_level, TracerOptions};
use crate::error::{Error, Result};
use crate::models::LikelihoodModel;
use crate::numerics::{deviance_threshold, householder_lstsq, Matrix, Vector};
use crate::odesolve::{integrate, OdePath, OdeStatus, VectorField};
use crate::optimizer::{kkt_polish, profile_bound, BoundOptions, MleFit, Side};
use crate::target::{Coordinate, LinearTarget};

/// Unit directions a(t) in the plane of the two interest coordinates.
pub trait DirectionFamily: Send + Sync {
    fn a(&self, t: f64) -> [f64; 2];
    fn a_dot(&self, t: f64) -> [f64; 2];
}

/// a(t) = (cos t, sin t).
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitCircle;

impl DirectionFamily for UnitCircle {
    fn a(&self, t: f64) -> [f64; 2] {
        [t.cos(), t.sin()]
    }

    fn a_dot(&self, t: f64) -> [f64; 2] {
        [-t.sin(), t.cos()]
    }
}

/// Sign of the multiplier ν = ±(zᵀz)^{−1/2}. The minus branch follows the
/// point maximising a(t)ᵀψ, the plus branch the point minimising it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }

    /// Angle of the outward normal to the contour at parameter `t`.
    pub fn normal_angle(self, t: f64) -> f64 {
        let raw = match self {
            Branch::Minus => t,
            Branch::Plus => t + PI,
        };
        raw.rem_euclid(TAU)
    }
}

/// θ̇ along a profile contour, from the least-squares solution of
/// `[−νPH; zᵀ] θ̇ = [E ȧ; 0]` where z = ∇ℓ, H = −∇²ℓ, P = I − zzᵀ/zᵀz,
/// ν = ±(zᵀz)^{−1/2} and E embeds the plane into the interest coordinates.
/// Returns θ̇ and the residual norm of the stacked system.
pub fn contour_field<M, D>(model: &M, family: &D, pair: (usize, usize), branch: Branch, theta: &Vector, t: f64) -> Result<(Vector, f64)>
where
    M: LikelihoodModel + ?Sized,
    D: DirectionFamily + ?Sized,
{
    let p = theta.len();
    let (l, z, hl) = model.loglik_hess(theta);
    if !l.is_finite() {
        return Err(Error::OutsideDomain("contour state".into()));
    }
    let u = z.norm_squared();
    if u == 0.0 {
        return Err(Error::Domain("vanishing score: the state is at the maximum".into()));
    }
    let nu = branch.sign() / u.sqrt();
    let proj = Matrix::identity(p, p) - (&z * z.transpose()) / u;
    // −ν P H with H = −∇²ℓ.
    let b = (proj * hl) * nu;
    let mut stacked = Matrix::zeros(p + 1, p);
    stacked.view_mut((0, 0), (p, p)).copy_from(&b);
    stacked.view_mut((p, 0), (1, p)).copy_from(&z.transpose());
    let ad = family.a_dot(t);
    let mut rhs = Vector::zeros(p + 1);
    rhs[pair.0] = ad[0];
    rhs[pair.1] = ad[1];
    householder_lstsq(&stacked, &rhs)
}

/// Residual ‖E a(t) − ν∇ℓ‖ of the first-order condition.
fn first_order_residual<M: LikelihoodModel + ?Sized, D: DirectionFamily + ?Sized>(
    model: &M,
    family: &D,
    pair: (usize, usize),
    branch: Branch,
    theta: &Vector,
    t: f64,
) -> f64 {
    let z = model.grad(theta);
    let nu = branch.sign() / z.norm();
    let a = family.a(t);
    let mut r = -z * nu;
    r[pair.0] += a[0];
    r[pair.1] += a[1];
    r.norm()
}

struct ContourOde<'a, M: ?Sized, D: ?Sized> {
    model: &'a M,
    family: &'a D,
    pair: (usize, usize),
    branch: Branch,
    level: f64,
}

impl<M, D> VectorField for ContourOde<'_, M, D>
where
    M: LikelihoodModel + ?Sized,
    D: DirectionFamily + ?Sized,
{
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn eval(&self, t: f64, y: &Vector) -> std::result::Result<Vector, String> {
        contour_field(self.model, self.family, self.pair, self.branch, y, t).map(|r| r.0).map_err(|e| e.to_string())
    }

    fn project(&self, _t: f64, y: &Vector) -> Vector {
        project_to_level(self.model, y, self.level)
    }

    fn residual(&self, _t: f64, y: &Vector) -> f64 {
        (self.model.loglik(y) - self.level).abs()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourPoint {
    pub t: f64,
    pub normal_angle: f64,
    pub psi: [f64; 2],
    pub theta: Vector,
    pub branch: Branch,
    pub level_residual: f64,
    pub first_order_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchTrace {
    pub branch: Branch,
    pub points: Vec<ContourPoint>,
    pub path: OdePath,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourTrace {
    pub pair: (usize, usize),
    pub delta: f64,
    /// Merged closed curve ordered by outward normal angle.
    pub points: Vec<ContourPoint>,
    pub branches: Vec<BranchTrace>,
    /// Largest ψ discrepancy between the branches at equal normal angle.
    pub overlap_gap: f64,
    /// Set when a branch halted or the branches disagree beyond the merge
    /// tolerance.
    pub warning: bool,
}

/// Settings of [`trace_contour`].
#[derive(Debug, Clone, Copy)]
pub struct ContourOptions {
    pub tracer: TracerOptions,
    /// Points reported per branch, uniform in t over [0, 2π).
    pub points_per_branch: usize,
    pub merge_tol: f64,
}

impl Default for ContourOptions {
    fn default() -> Self {
        Self { tracer: TracerOptions::default(), points_per_branch: 360, merge_tol: 1e-5 }
    }
}

fn trace_branch<M: LikelihoodModel + ?Sized>(
    model: &M,
    fit: &MleFit,
    pair: (usize, usize),
    branch: Branch,
    delta: f64,
    opts: &ContourOptions,
) -> Result<BranchTrace> {
    let level = fit.loglik_max - delta;
    let side = match branch {
        Branch::Minus => Side::Upper,
        Branch::Plus => Side::Lower,
    };
    let start = profile_bound(model, &Coordinate::new(pair.0, "psi1"), 0.0, fit, delta, side, &BoundOptions::default())?;
    let family = UnitCircle;
    let ode = ContourOde { model, family: &family, pair, branch, level };
    let path = integrate(&ode, 0.0, TAU, &start.theta, &opts.tracer.ode())?;
    let n = opts.points_per_branch.max(4);
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let t = TAU * k as f64 / n as f64;
        let Some(y) = path.sample(t) else { break };
        let theta = if opts.tracer.project { polish_point(model, &family, pair, branch, level, &y, t) } else { y };
        points.push(make_point(model, &family, pair, branch, level, &theta, t));
    }
    Ok(BranchTrace { branch, points, path })
}

/// Newton correction of a path state onto the contour point for direction
/// a(t): level and first-order condition together.
fn polish_point<M: LikelihoodModel + ?Sized>(
    model: &M,
    family: &UnitCircle,
    pair: (usize, usize),
    branch: Branch,
    level: f64,
    theta: &Vector,
    t: f64,
) -> Vector {
    let theta = project_to_level(model, theta, level);
    let a = family.a(t);
    let mut dir = Vector::zeros(theta.len());
    dir[pair.0] = a[0];
    dir[pair.1] = a[1];
    let nu = branch.sign() / model.grad(&theta).norm();
    match kkt_polish(model, &LinearTarget::fixed(dir, "a"), 0.0, &theta, nu, level, 10) {
        Ok(p) if p.nu * nu > 0.0 && model.in_domain(&p.theta) => p.theta,
        _ => theta,
    }
}

fn make_point<M: LikelihoodModel + ?Sized>(
    model: &M,
    family: &UnitCircle,
    pair: (usize, usize),
    branch: Branch,
    level: f64,
    theta: &Vector,
    t: f64,
) -> ContourPoint {
    ContourPoint {
        t,
        normal_angle: branch.normal_angle(t),
        psi: [theta[pair.0], theta[pair.1]],
        level_residual: (model.loglik(theta) - level).abs(),
        first_order_residual: first_order_residual(model, family, pair, branch, theta, t),
        theta: theta.clone(),
        branch,
    }
}

/// Trace the profile contour of the interest pair at confidence `level`
/// (2 degrees of freedom), integrating both sign branches over t ∈ [0, 2π].
pub fn trace_contour<M: LikelihoodModel + ?Sized>(
    model: &M,
    fit: &MleFit,
    pair: (usize, usize),
    level: f64,
    opts: &ContourOptions,
) -> Result<ContourTrace> {
    let p = model.dim();
    if p < 2 || pair.0 == pair.1 || pair.0 >= p || pair.1 >= p {
        return Err(Error::Domain("contour needs two distinct coordinates of a model with p ≥ 2".into()));
    }
    let delta = deviance_threshold(level, 2)?;
    let (minus, plus) = rayon::join(
        || trace_branch(model, fit, pair, Branch::Minus, delta, opts),
        || trace_branch(model, fit, pair, Branch::Plus, delta, opts),
    );
    let branches = vec![minus?, plus?];
    let level_value = fit.loglik_max - delta;

    // Compare each branch against the other at equal normal angle.
    let mut overlap_gap: f64 = 0.0;
    for (i, j) in [(0usize, 1usize), (1, 0)] {
        let other = &branches[j];
        for pt in &branches[i].points {
            let t_other = match other.branch {
                Branch::Minus => pt.normal_angle,
                Branch::Plus => (pt.normal_angle - PI).rem_euclid(TAU),
            };
            if let Some(y) = other.path.sample(t_other) {
                let y = polish_point(model, &UnitCircle, pair, other.branch, level_value, &y, t_other);
                let gap = ((y[pair.0] - pt.psi[0]).powi(2) + (y[pair.1] - pt.psi[1]).powi(2)).sqrt();
                overlap_gap = overlap_gap.max(gap);
            }
        }
    }

    let n = opts.points_per_branch.max(4);
    let mut bins: Vec<Option<ContourPoint>> = vec![None; n];
    for b in &branches {
        for pt in &b.points {
            let k = ((pt.normal_angle / TAU * n as f64).round() as usize) % n;
            let better = match &bins[k] {
                None => true,
                Some(q) => pt.first_order_residual < q.first_order_residual,
            };
            if better {
                bins[k] = Some(pt.clone());
            }
        }
    }
    let points: Vec<ContourPoint> = bins.into_iter().flatten().collect();
    let warning = overlap_gap > opts.merge_tol || branches.iter().any(|b| b.path.status != OdeStatus::Completed);
    Ok(ContourTrace { pair, delta, points, branches, overlap_gap, warning })
}
