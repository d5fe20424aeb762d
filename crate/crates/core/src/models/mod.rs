//! Likelihood models behind a single contract: value, gradient, Hessian and a
//! domain predicate for a fixed dataset.

mod gev_models;
mod linear;
mod simple;

pub use gev_models::{build_gev_regression, build_iid_gev, GevRegression, GevRegressionSpec, IidGev, ScaleLink};
pub use linear::{build_linear_gaussian, LinearGaussian, LinearGaussianSpec, VarianceMode};
pub use simple::{Pinned, QuadraticModel};

use crate::numerics::{Matrix, Vector};

/// Log-likelihood of a parametric model for a fixed dataset.
///
/// Outside the domain `loglik` returns `-inf`; the derivative methods then
/// return zero-filled values that callers must not use.
pub trait LikelihoodModel: Send + Sync {
    fn dim(&self) -> usize;

    fn names(&self) -> Vec<String>;

    fn loglik(&self, theta: &Vector) -> f64;

    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector);

    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix);

    fn grad(&self, theta: &Vector) -> Vector {
        self.loglik_grad(theta).1
    }

    fn hess(&self, theta: &Vector) -> Matrix {
        self.loglik_hess(theta).2
    }

    fn in_domain(&self, theta: &Vector) -> bool {
        theta.len() == self.dim() && self.loglik(theta).is_finite()
    }

    /// A starting point inside the domain for maximum-likelihood fitting.
    fn initial_guess(&self) -> Vector;

    /// Coordinates that carry a GEV shape, kept away from ξ = −1 during the
    /// early iterations of the MLE search.
    fn shape_coordinates(&self) -> Vec<usize> {
        Vec::new()
    }
}

impl<M: LikelihoodModel + ?Sized> LikelihoodModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn names(&self) -> Vec<String> {
        (**self).names()
    }
    fn loglik(&self, theta: &Vector) -> f64 {
        (**self).loglik(theta)
    }
    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector) {
        (**self).loglik_grad(theta)
    }
    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix) {
        (**self).loglik_hess(theta)
    }
    fn in_domain(&self, theta: &Vector) -> bool {
        (**self).in_domain(theta)
    }
    fn initial_guess(&self) -> Vector {
        (**self).initial_guess()
    }
    fn shape_coordinates(&self) -> Vec<usize> {
        (**self).shape_coordinates()
    }
}

impl<M: LikelihoodModel + ?Sized> LikelihoodModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn names(&self) -> Vec<String> {
        (**self).names()
    }
    fn loglik(&self, theta: &Vector) -> f64 {
        (**self).loglik(theta)
    }
    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector) {
        (**self).loglik_grad(theta)
    }
    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix) {
        (**self).loglik_hess(theta)
    }
    fn in_domain(&self, theta: &Vector) -> bool {
        (**self).in_domain(theta)
    }
    fn initial_guess(&self) -> Vector {
        (**self).initial_guess()
    }
    fn shape_coordinates(&self) -> Vec<usize> {
        (**self).shape_coordinates()
    }
}

/// Central finite-difference gradient and Hessian of `loglik`, for
/// verification only.
pub fn finite_difference_derivatives<M: LikelihoodModel + ?Sized>(
    model: &M,
    theta: &Vector,
    step: f64,
) -> (Vector, Matrix) {
    let p = theta.len();
    let mut g = Vector::zeros(p);
    let mut h = Matrix::zeros(p, p);
    for i in 0..p {
        let hi = step * (1.0 + theta[i].abs());
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += hi;
        tm[i] -= hi;
        g[i] = (model.loglik(&tp) - model.loglik(&tm)) / (2.0 * hi);
        // Hessian column from central differences of the analytic gradient.
        let gp = model.grad(&tp);
        let gm = model.grad(&tm);
        for j in 0..p {
            h[(j, i)] = (gp[j] - gm[j]) / (2.0 * hi);
        }
    }
    (g, h)
}
