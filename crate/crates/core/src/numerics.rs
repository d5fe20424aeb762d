//! Special functions and small dense linear-algebra kernels.
//!
//! Storage is `nalgebra`'s dynamically sized matrices; the factorisations are
//! written out here so that singularity and rank decisions follow fixed,
//! documented thresholds.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative pivot threshold below which a square system is declared singular.
pub const SINGULAR_PIVOT_REL: f64 = 1e-13;

/// Relative threshold on the diagonal of R for rank decisions in least squares.
pub const RANK_TOL_REL: f64 = 1e-12;

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of the standard normal CDF.
///
/// A rational approximation (relative error about 1e-9) followed by one
/// Halley step against the erfc-based CDF.
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile needs p in (0, 1), got {p}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work in the lower half and reflect, so that Φ⁻¹(1−p) = −Φ⁻¹(p) holds exactly.
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };

    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Quantile of the chi-square distribution with `d` ∈ {1, 2} degrees of freedom.
pub fn chisq_quantile(p: f64, d: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "chi-square quantile needs p in [0, 1), got {p}"
        )));
    }
    match d {
        1 => {
            if p == 0.0 {
                return Ok(0.0);
            }
            let z = norm_quantile(0.5 * (1.0 + p))?;
            Ok(z * z)
        }
        2 => Ok(-2.0 * (-p).ln_1p()),
        _ => Err(Error::Domain(format!(
            "chi-square quantile only implemented for 1 or 2 degrees of freedom, got {d}"
        ))),
    }
}

/// Deviance threshold δ = q_{χ²(d)}(level) / 2.
pub fn deviance_threshold(level: f64, d: u32) -> Result<f64> {
    Ok(0.5 * chisq_quantile(level, d)?)
}

/// Solve `a x = b` by LU factorisation with partial pivoting.
pub fn solve_square(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!(
            "solve_square needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "right-hand side has length {}, expected {n}",
            b.len()
        )));
    }
    let scale = a.amax();
    if n == 0 {
        return Ok(Vector::zeros(0));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Singular { pivot: 0.0 });
    }
    let threshold = SINGULAR_PIVOT_REL * scale;
    let mut lu = a.clone();
    let mut x = b.clone();
    for k in 0..n {
        let (piv_row, piv_abs) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        if piv_abs < threshold {
            return Err(Error::Singular { pivot: piv_abs });
        }
        if piv_row != k {
            lu.swap_rows(k, piv_row);
            x.swap_rows(k, piv_row);
        }
        let pivot = lu[(k, k)];
        for i in (k + 1)..n {
            let factor = lu[(i, k)] / pivot;
            if factor != 0.0 {
                for j in (k + 1)..n {
                    lu[(i, j)] -= factor * lu[(k, j)];
                }
                x[i] -= factor * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let mut acc = x[k];
        for j in (k + 1)..n {
            acc -= lu[(k, j)] * x[j];
        }
        x[k] = acc / lu[(k, k)];
    }
    Ok(x)
}

/// Least-squares solution of an overdetermined system by Householder QR.
pub fn solve_least_squares(a: &Matrix, b: &Vector) -> Result<Vector> {
    Ok(householder_lstsq(a, b)?.0)
}

/// Least-squares solution together with the residual norm ‖Ax − b‖.
pub fn householder_lstsq(a: &Matrix, b: &Vector) -> Result<(Vector, f64)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Dimension(format!(
            "least squares needs rows >= cols, got {m}x{n}"
        )));
    }
    if b.len() != m {
        return Err(Error::Dimension(format!(
            "right-hand side has length {}, expected {m}",
            b.len()
        )));
    }
    let mut r = a.clone();
    let mut qtb = b.clone();
    let col_scale = (0..n)
        .map(|j| r.column(j).norm())
        .fold(0.0_f64, f64::max);
    if n > 0 && !(col_scale > 0.0) {
        return Err(Error::RankDeficient { column: 0 });
    }
    for k in 0..n {
        let norm_x = r.view((k, k), (m - k, 1)).norm();
        if norm_x <= RANK_TOL_REL * col_scale {
            return Err(Error::RankDeficient { column: k });
        }
        let alpha = if r[(k, k)] > 0.0 { -norm_x } else { norm_x };
        let mut v = r.view((k, k), (m - k, 1)).clone_owned();
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for j in k..n {
                let dot: f64 = (0..(m - k)).map(|i| v[i] * r[(k + i, j)]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in 0..(m - k) {
                    r[(k + i, j)] -= f * v[i];
                }
            }
            let dot: f64 = (0..(m - k)).map(|i| v[i] * qtb[k + i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in 0..(m - k) {
                qtb[k + i] -= f * v[i];
            }
        }
        if r[(k, k)].abs() <= RANK_TOL_REL * col_scale {
            return Err(Error::RankDeficient { column: k });
        }
    }
    let mut x = Vector::zeros(n);
    for k in (0..n).rev() {
        let mut acc = qtb[k];
        for j in (k + 1)..n {
            acc -= r[(k, j)] * x[j];
        }
        x[k] = acc / r[(k, k)];
    }
    let resid = if m > n {
        qtb.rows(n, m - n).norm()
    } else {
        0.0
    };
    Ok((x, resid))
}

/// Check that a design matrix has full column rank.
pub fn check_full_column_rank(a: &Matrix) -> Result<()> {
    let b = Vector::zeros(a.nrows());
    householder_lstsq(a, &b).map(|_| ())
}

/// Cholesky factor of a symmetric positive-definite matrix, if it exists.
pub fn cholesky(a: &Matrix) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !a.iter().all(|v| v.is_finite()) {
        return None;
    }
    nalgebra::Cholesky::new(a.clone())
}

/// Solve `a x = b` for symmetric positive-definite `a`.
pub fn solve_spd(a: &Matrix, b: &Vector) -> Result<Vector> {
    let chol = cholesky(a).ok_or_else(|| Error::Curvature("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Brent's method for a root of `f` in `[a, b]` where `f(a)` and `f(b)` have
/// opposite signs. Non-finite function values are treated as having the sign
/// of the side they occur on, with the step falling back to bisection.
pub fn brent_root<F>(mut f: F, mut a: f64, mut b: f64, xtol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Domain("root is not bracketed".into()));
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        let interpolate = e.abs() >= tol && fa.abs() > fb.abs() && fa.is_finite() && fc.is_finite();
        if interpolate {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) && p.is_finite() {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
    }
    Err(Error::Convergence {
        what: "Brent root search".into(),
        iterations: max_iter,
        last_value: Some(fb),
        last_theta: Some(vec![b]),
    })
}

/// Symmetrise in place by averaging with the transpose.
pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
