use super::LikelihoodModel;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Exactly quadratic log-likelihood `ℓ(θ) = offset − ½(θ−c)ᵀH(θ−c)`.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    center: Vector,
    neg_hessian: Matrix,
    offset: f64,
}

impl QuadraticModel {
    pub fn new(center: Vector, neg_hessian: Matrix, offset: f64) -> Result<Self> {
        let p = center.len();
        if neg_hessian.shape() != (p, p) {
            return Err(Error::Dimension(format!("Hessian must be {p}×{p}")));
        }
        if crate::numerics::cholesky(&neg_hessian).is_none() {
            return Err(Error::Curvature("quadratic model needs a positive definite H".into()));
        }
        Ok(Self { center, neg_hessian, offset })
    }

    /// `ℓ = −½‖θ − c‖²`.
    pub fn isotropic(center: Vector) -> Self {
        let p = center.len();
        Self { center, neg_hessian: Matrix::identity(p, p), offset: 0.0 }
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }

    pub fn neg_hessian(&self) -> &Matrix {
        &self.neg_hessian
    }
}

impl LikelihoodModel for QuadraticModel {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|j| format!("theta{}", j + 1)).collect()
    }

    fn loglik(&self, theta: &Vector) -> f64 {
        self.loglik_grad(theta).0
    }

    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector) {
        if theta.len() != self.dim() || theta.iter().any(|v| !v.is_finite()) {
            return (f64::NEG_INFINITY, Vector::zeros(self.dim()));
        }
        let d = theta - &self.center;
        let hd = &self.neg_hessian * &d;
        (self.offset - 0.5 * d.dot(&hd), -hd)
    }

    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix) {
        let (v, g) = self.loglik_grad(theta);
        (v, g, -&self.neg_hessian)
    }

    fn initial_guess(&self) -> Vector {
        self.center.clone()
    }
}

/// A model with some coordinates held at fixed values; the remaining
/// coordinates form the parameter vector.
#[derive(Debug, Clone)]
pub struct Pinned<M> {
    inner: M,
    fixed: Vec<(usize, f64)>,
    free: Vec<usize>,
}

impl<M: LikelihoodModel> Pinned<M> {
    pub fn new(inner: M, fixed: Vec<(usize, f64)>) -> Result<Self> {
        let p = inner.dim();
        if fixed.iter().any(|&(k, _)| k >= p) {
            return Err(Error::Dimension("pinned index out of range".into()));
        }
        let free: Vec<usize> = (0..p).filter(|k| !fixed.iter().any(|&(j, _)| j == *k)).collect();
        if free.is_empty() {
            return Err(Error::Dimension("at least one coordinate must stay free".into()));
        }
        Ok(Self { inner, fixed, free })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    /// Full parameter vector from the free coordinates.
    pub fn expand(&self, theta: &Vector) -> Vector {
        let mut full = Vector::zeros(self.inner.dim());
        for &(k, v) in &self.fixed {
            full[k] = v;
        }
        for (i, &k) in self.free.iter().enumerate() {
            full[k] = theta[i];
        }
        full
    }

    pub fn restrict(&self, full: &Vector) -> Vector {
        Vector::from_iterator(self.free.len(), self.free.iter().map(|&k| full[k]))
    }
}

impl<M: LikelihoodModel> LikelihoodModel for Pinned<M> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn names(&self) -> Vec<String> {
        let names = self.inner.names();
        self.free.iter().map(|&k| names[k].clone()).collect()
    }

    fn loglik(&self, theta: &Vector) -> f64 {
        if theta.len() != self.dim() {
            return f64::NEG_INFINITY;
        }
        self.inner.loglik(&self.expand(theta))
    }

    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector) {
        if theta.len() != self.dim() {
            return (f64::NEG_INFINITY, Vector::zeros(self.dim()));
        }
        let (v, g) = self.inner.loglik_grad(&self.expand(theta));
        (v, self.restrict(&g))
    }

    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix) {
        let q = self.dim();
        if theta.len() != q {
            return (f64::NEG_INFINITY, Vector::zeros(q), Matrix::zeros(q, q));
        }
        let (v, g, h) = self.inner.loglik_hess(&self.expand(theta));
        let hr = Matrix::from_fn(q, q, |i, j| h[(self.free[i], self.free[j])]);
        (v, self.restrict(&g), hr)
    }

    fn initial_guess(&self) -> Vector {
        self.restrict(&self.inner.initial_guess())
    }

    fn shape_coordinates(&self) -> Vec<usize> {
        let shapes = self.inner.shape_coordinates();
        self.free.iter().enumerate().filter(|(_, k)| shapes.contains(k)).map(|(i, _)| i).collect()
    }
}
