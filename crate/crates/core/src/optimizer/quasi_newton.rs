use super::bfgs_inverse_update;
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when ‖∇f‖ ≤ gtol.
    pub gtol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsResult {
    pub x: Vector,
    pub value: f64,
    pub converged: bool,
}

/// BFGS minimisation with Armijo backtracking. The inverse-Hessian
/// approximation starts from the identity, so the iteration is sensitive to
/// how the parameters are scaled. `f` returns `+inf` outside its domain.
pub(crate) fn minimize_bfgs<F>(f: F, x0: &Vector, opts: BfgsOptions) -> BfgsResult
where
    F: Fn(&Vector) -> (f64, Vector),
{
    let p = x0.len();
    let mut x = x0.clone();
    let (mut v, mut g) = f(&x);
    let mut b = Matrix::identity(p, p);
    let mut iterations = 0;
    let mut stalls = 0;
    while iterations < opts.max_iter && v.is_finite() {
        if g.norm() <= opts.gtol {
            break;
        }
        iterations += 1;
        let mut dir = -(&b * &g);
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) {
            b = Matrix::identity(p, p);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let trial = &x + &dir * step;
            let (tv, tg) = f(&trial);
            if tv.is_finite() && tv <= v + 1e-4 * step * slope {
                accepted = Some((trial, tv, tg));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, vn, gn)) = accepted else {
            // Restart once from steepest descent before giving up.
            if stalls == 0 {
                stalls += 1;
                b = Matrix::identity(p, p);
                continue;
            }
            break;
        };
        stalls = 0;
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            bfgs_inverse_update(&mut b, &s, &y);
        }
        x = xn;
        v = vn;
        g = gn;
    }
    let converged = v.is_finite() && g.norm() <= opts.gtol;
    BfgsResult { x, value: v, converged }
}
