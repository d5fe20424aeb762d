use super::LikelihoodModel;
use crate::error::{Error, Result};
use crate::numerics::{check_full_column_rank, solve_least_squares, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceMode {
    Known(f64),
    /// σ² replaced by the mean squared residual (denominator n).
    ProfiledOut,
}

#[derive(Debug, Clone)]
pub struct LinearGaussianSpec {
    pub design: Matrix,
    pub responses: Vector,
    pub variance_mode: VarianceMode,
}

/// Gaussian linear regression `y = Xθ + ε`.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    x: Matrix,
    y: Vector,
    mode: VarianceMode,
    xtx: Matrix,
}

pub fn build_linear_gaussian(spec: &LinearGaussianSpec) -> Result<LinearGaussian> {
    let (n, q) = spec.design.shape();
    if spec.responses.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows but {} responses", spec.responses.len())));
    }
    if n < q || n == 0 {
        return Err(Error::InsufficientData { needed: q.max(1), got: n });
    }
    if let VarianceMode::Known(s2) = spec.variance_mode {
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::Domain(format!("known variance must be positive, got {s2}")));
        }
    }
    check_full_column_rank(&spec.design)?;
    Ok(LinearGaussian {
        xtx: spec.design.transpose() * &spec.design,
        x: spec.design.clone(),
        y: spec.responses.clone(),
        mode: spec.variance_mode,
    })
}

impl LinearGaussian {
    pub fn design(&self) -> &Matrix {
        &self.x
    }

    pub fn responses(&self) -> &Vector {
        &self.y
    }

    pub fn variance_mode(&self) -> VarianceMode {
        self.mode
    }

    pub fn least_squares(&self) -> Vector {
        solve_least_squares(&self.x, &self.y).expect("design rank was checked at construction")
    }

    fn residuals(&self, theta: &Vector) -> Vector {
        &self.y - &self.x * theta
    }
}

impl LikelihoodModel for LinearGaussian {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|j| format!("beta{j}")).collect()
    }

    fn loglik(&self, theta: &Vector) -> f64 {
        self.loglik_grad(theta).0
    }

    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector) {
        let p = self.dim();
        if theta.len() != p || theta.iter().any(|v| !v.is_finite()) {
            return (f64::NEG_INFINITY, Vector::zeros(p));
        }
        let n = self.y.len() as f64;
        let r = self.residuals(theta);
        let rss = r.norm_squared();
        let xtr = self.x.transpose() * &r;
        match self.mode {
            VarianceMode::Known(s2) => {
                let v = -rss / (2.0 * s2) - 0.5 * n * (2.0 * std::f64::consts::PI * s2).ln();
                (v, xtr / s2)
            }
            VarianceMode::ProfiledOut => {
                if !(rss > 0.0) {
                    return (f64::NEG_INFINITY, Vector::zeros(p));
                }
                let v = -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0);
                (v, xtr * (n / rss))
            }
        }
    }

    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix) {
        let (v, g) = self.loglik_grad(theta);
        let p = self.dim();
        if !v.is_finite() {
            return (v, g, Matrix::zeros(p, p));
        }
        let h = match self.mode {
            VarianceMode::Known(s2) => -&self.xtx / s2,
            VarianceMode::ProfiledOut => {
                let n = self.y.len() as f64;
                let rss = self.residuals(theta).norm_squared();
                // g = n Xᵀr / RSS, so Xᵀr = g RSS / n.
                let xtr = &g * (rss / n);
                -&self.xtx * (n / rss) + (&xtr * xtr.transpose()) * (2.0 * n / (rss * rss))
            }
        };
        (v, g, h)
    }

    fn initial_guess(&self) -> Vector {
        self.least_squares()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::finite_difference_derivatives;

    fn line3(mode: VarianceMode) -> LinearGaussian {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        build_linear_gaussian(&LinearGaussianSpec {
            design: x,
            responses: Vector::from_vec(vec![0.0, 1.0, 2.0]),
            variance_mode: mode,
        })
        .unwrap()
    }

    #[test]
    fn orthonormal_design_hessian() {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let m = build_linear_gaussian(&LinearGaussianSpec {
            design: x.clone(),
            responses: Vector::from_vec(vec![0.3, -1.0, 2.0]),
            variance_mode: VarianceMode::Known(1.0),
        })
        .unwrap();
        let h = m.hess(&Vector::from_vec(vec![0.1, 0.2]));
        assert_eq!(h, -(x.transpose() * &x));
    }

    #[test]
    fn three_point_line() {
        let m = line3(VarianceMode::Known(1.0));
        let th = m.least_squares();
        assert!((th[0]).abs() < 1e-12 && (th[1] - 1.0).abs() < 1e-12);
        let lmax = m.loglik(&th);
        for d in [[0.01, 0.0], [0.0, -0.01], [0.1, 0.1]] {
            assert!(m.loglik(&(&th + Vector::from_row_slice(&d))) < lmax);
        }
    }

    #[test]
    fn profiled_derivatives_match_finite_differences() {
        let x = Matrix::from_row_slice(5, 2, &[1.0, 0.1, 1.0, 0.7, 1.0, 1.3, 1.0, 2.2, 1.0, 2.9]);
        let m = build_linear_gaussian(&LinearGaussianSpec {
            design: x,
            responses: Vector::from_vec(vec![0.2, 1.1, 1.0, 2.5, 2.7]),
            variance_mode: VarianceMode::ProfiledOut,
        })
        .unwrap();
        for th in [[0.1, 0.9], [-0.3, 1.4], [0.5, 0.5]] {
            let th = Vector::from_row_slice(&th);
            let (gf, hf) = finite_difference_derivatives(&m, &th, 1e-6);
            let (_, g, h) = m.loglik_hess(&th);
            assert!((&g - &gf).norm() <= 1e-7 * (1.0 + g.norm()));
            assert!((&h - &hf).norm() <= 1e-6 * (1.0 + h.norm()));
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let r = build_linear_gaussian(&LinearGaussianSpec {
            design: x,
            responses: Vector::zeros(3),
            variance_mode: VarianceMode::ProfiledOut,
        });
        assert!(matches!(r, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn nonpositive_known_variance_rejected() {
        let x = Matrix::from_element(3, 1, 1.0);
        let r = build_linear_gaussian(&LinearGaussianSpec {
            design: x,
            responses: Vector::zeros(3),
            variance_mode: VarianceMode::Known(0.0),
        });
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
