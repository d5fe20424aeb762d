//! Scalar targets η(θ, t) with the derivatives the bound solvers and tracers
//! need.

use crate::gev::eta0_derivs;
use crate::models::{GevRegression, ScaleLink};
use crate::numerics::{Matrix, Vector};
use crate::error::Result;

/// η and its derivatives at one (θ, t).
#[derive(Debug, Clone)]
pub struct TargetEval {
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
    /// ∂²η/∂t∂θ.
    pub cross: Vector,
    /// ∂η/∂t.
    pub dt: f64,
}

pub trait TargetFunction: Send + Sync {
    fn eval(&self, theta: &Vector, t: f64) -> TargetEval;

    fn value(&self, theta: &Vector, t: f64) -> f64 {
        self.eval(theta, t).value
    }

    /// A coordinate in which η is affine with a constant, non-zero
    /// coefficient, so that the slice η = v can be solved for it exactly.
    fn pivot(&self, t: f64) -> Option<usize>;

    fn name(&self) -> String;
}

impl<T: TargetFunction + ?Sized> TargetFunction for &T {
    fn eval(&self, theta: &Vector, t: f64) -> TargetEval {
        (**self).eval(theta, t)
    }
    fn value(&self, theta: &Vector, t: f64) -> f64 {
        (**self).value(theta, t)
    }
    fn pivot(&self, t: f64) -> Option<usize> {
        (**self).pivot(t)
    }
    fn name(&self) -> String {
        (**self).name()
    }
}

impl<T: TargetFunction + ?Sized> TargetFunction for Box<T> {
    fn eval(&self, theta: &Vector, t: f64) -> TargetEval {
        (**self).eval(theta, t)
    }
    fn value(&self, theta: &Vector, t: f64) -> f64 {
        (**self).value(theta, t)
    }
    fn pivot(&self, t: f64) -> Option<usize> {
        (**self).pivot(t)
    }
    fn name(&self) -> String {
        (**self).name()
    }
}

/// Move the pivot coordinate of `theta` so that η(θ, t) = `value`.
pub fn solve_pivot<T: TargetFunction + ?Sized>(target: &T, theta: &Vector, value: f64, t: f64) -> Option<Vector> {
    let k = target.pivot(t)?;
    let e = target.eval(theta, t);
    let slope = e.grad[k];
    if slope == 0.0 || !slope.is_finite() {
        return None;
    }
    let mut out = theta.clone();
    out[k] += (value - e.value) / slope;
    Some(out)
}

/// η = θₖ.
#[derive(Debug, Clone)]
pub struct Coordinate {
    pub index: usize,
    pub label: String,
}

impl Coordinate {
    pub fn new(index: usize, label: impl Into<String>) -> Self {
        Self { index, label: label.into() }
    }
}

impl TargetFunction for Coordinate {
    fn eval(&self, theta: &Vector, _t: f64) -> TargetEval {
        let p = theta.len();
        let mut grad = Vector::zeros(p);
        grad[self.index] = 1.0;
        TargetEval { value: theta[self.index], grad, hess: Matrix::zeros(p, p), cross: Vector::zeros(p), dt: 0.0 }
    }

    fn pivot(&self, _t: f64) -> Option<usize> {
        Some(self.index)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// η = aᵀθ + t·bᵀθ.
#[derive(Debug, Clone)]
pub struct LinearTarget {
    pub a: Vector,
    pub b: Vector,
    pub label: String,
}

impl LinearTarget {
    pub fn fixed(a: Vector, label: impl Into<String>) -> Self {
        let p = a.len();
        Self { a, b: Vector::zeros(p), label: label.into() }
    }

    pub fn moving(a: Vector, b: Vector, label: impl Into<String>) -> Self {
        Self { a, b, label: label.into() }
    }
}

impl TargetFunction for LinearTarget {
    fn eval(&self, theta: &Vector, t: f64) -> TargetEval {
        let p = theta.len();
        let coef = &self.a + &self.b * t;
        TargetEval {
            value: coef.dot(theta),
            grad: coef,
            hess: Matrix::zeros(p, p),
            cross: self.b.clone(),
            dt: self.b.dot(theta),
        }
    }

    fn pivot(&self, t: f64) -> Option<usize> {
        let coef = &self.a + &self.b * t;
        let k = coef.iamax();
        (coef[k] != 0.0).then_some(k)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// GEV return level η = µ + σ·(e^{ξs} − 1)/ξ with `t = s = ln T`, where
/// µ = aᵀθ, σ = link(bᵀθ) and ξ = cᵀθ.
#[derive(Debug, Clone)]
pub struct ReturnLevel {
    loc: Vector,
    scale: Vector,
    shape: Vector,
    link: ScaleLink,
    label: String,
}

impl ReturnLevel {
    /// µ = `loc`ᵀθ, σ = link(`scale`ᵀθ), ξ = `shape`ᵀθ.
    pub fn new(loc: Vector, scale: Vector, shape: Vector, link: ScaleLink) -> Self {
        Self { loc, scale, shape, link, label: "return_level".into() }
    }

    /// For θ = (µ, σ, ξ).
    pub fn iid() -> Self {
        let e = |k: usize| {
            let mut v = Vector::zeros(3);
            v[k] = 1.0;
            v
        };
        Self { loc: e(0), scale: e(1), shape: e(2), link: ScaleLink::Identity, label: "return_level".into() }
    }

    /// For a GEV regression at one covariate configuration (original units).
    pub fn regression(model: &GevRegression, row_mu: &[f64], row_sigma: &[f64], row_xi: &[f64]) -> Result<Self> {
        let (loc, scale, shape) = model.predictor_vectors(row_mu, row_sigma, row_xi)?;
        Ok(Self { loc, scale, shape, link: model.scale_link(), label: "return_level".into() })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn location_vector(&self) -> &Vector {
        &self.loc
    }
}

impl TargetFunction for ReturnLevel {
    fn eval(&self, theta: &Vector, s: f64) -> TargetEval {
        let mu = self.loc.dot(theta);
        let (sigma, ds, d2s) = self.link.apply(self.scale.dot(theta));
        let xi = self.shape.dot(theta);
        let (e0, e0_x, e0_xx, e0_s, e0_sx) = eta0_derivs(s, xi);
        let b = &self.scale;
        let c = &self.shape;
        let grad = &self.loc + b * (e0 * ds) + c * (sigma * e0_x);
        let bc = b * c.transpose();
        let hess = (b * b.transpose()) * (e0 * d2s) + (&bc + bc.transpose()) * (ds * e0_x) + (c * c.transpose()) * (sigma * e0_xx);
        let cross = b * (ds * e0_s) + c * (sigma * e0_sx);
        TargetEval { value: mu + sigma * e0, grad, hess, cross, dt: sigma * e0_s }
    }

    fn pivot(&self, _t: f64) -> Option<usize> {
        let k = self.loc.iamax();
        let free = self.loc[k] != 0.0 && self.scale[k] == 0.0 && self.shape[k] == 0.0;
        free.then_some(k)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}
