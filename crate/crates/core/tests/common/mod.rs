#![allow(dead_code)]

use std::path::PathBuf;

use prolik::numerics::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn venice_path() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/venice.csv"))
}

/// (year, annual maximum in metres).
pub fn venice() -> (Vec<f64>, Vec<f64>) {
    let d = prolik::cli::load_csv(&venice_path(), &["year", "r1"]).unwrap();
    (d.column("year").unwrap().to_vec(), d.column("r1").unwrap().to_vec())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// GEV draws by inversion: µ + σ((−ln U)^{−ξ} − 1)/ξ.
pub fn simulate_gev(n: usize, mu: f64, sigma: f64, xi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            let e = -u.ln();
            if xi == 0.0 {
                mu - sigma * e.ln()
            } else {
                mu + sigma * (e.powf(-xi) - 1.0) / xi
            }
        })
        .collect()
}

/// Central difference with one Richardson extrapolation step.
pub fn richardson<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

/// Gradient of a scalar function by Richardson-extrapolated differences.
pub fn fd_gradient<F: Fn(&Vector) -> f64>(f: F, x: &Vector, rel_step: f64) -> Vector {
    Vector::from_fn(x.len(), |i, _| {
        let h = rel_step * (1.0 + x[i].abs());
        richardson(
            |v| {
                let mut y = x.clone();
                y[i] = v;
                f(&y)
            },
            x[i],
            h,
        )
    })
}

/// Jacobian of a vector function, column j = ∂f/∂xⱼ.
pub fn fd_jacobian<F: Fn(&Vector) -> Vector>(f: F, x: &Vector, rel_step: f64) -> Matrix {
    let m = f(x).len();
    let mut jac = Matrix::zeros(m, x.len());
    for j in 0..x.len() {
        let h = rel_step * (1.0 + x[j].abs());
        for i in 0..m {
            jac[(i, j)] = richardson(
                |v| {
                    let mut y = x.clone();
                    y[j] = v;
                    f(&y)[i]
                },
                x[j],
                h,
            );
        }
    }
    jac
}

/// max |a − b| relative to max(1, max |b|).
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
