//! Adaptive Dormand–Prince 4(5) integration with projection hooks and dense
//! output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Right-hand side of `ẏ = f(t, y)`.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Evaluate the field; an `Err` carries the reason the field is
    /// undefined at `(t, y)`.
    fn eval(&self, t: f64, y: &Vector) -> std::result::Result<Vector, String>;

    /// Map an accepted state back onto the manifold the solution should
    /// stay on.
    fn project(&self, _t: f64, y: &Vector) -> Vector {
        y.clone()
    }

    /// Constraint residual recorded for each accepted step.
    fn residual(&self, _t: f64, _y: &Vector) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Apply [`VectorField::project`] after each accepted step.
    pub project: bool,
    pub initial_step: Option<f64>,
    pub max_step: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_steps: 100_000, project: true, initial_step: None, max_step: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum OdeStatus {
    Completed,
    /// The field could not be evaluated; carries the last reason reported.
    FieldFailure(String),
    /// Step size fell below 1e-14·|t1 − t0| (stiffness or blow-up).
    StepUnderflow,
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub residual: f64,
    /// Rejected attempts before this step was accepted.
    pub rejected: usize,
}

/// Accepted steps of an integration. `diagnostics[k]` describes the step
/// ending at `times[k + 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdePath {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub derivs: Vec<Vector>,
    pub diagnostics: Vec<StepDiagnostic>,
    pub status: OdeStatus,
}

impl OdePath {
    pub fn completed(&self) -> bool {
        self.status == OdeStatus::Completed
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("a path holds at least its initial state")
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("a path holds at least its initial state")
    }

    /// State at `t` by cubic Hermite interpolation on the accepted steps;
    /// `None` outside the integrated range.
    pub fn sample(&self, t: f64) -> Option<Vector> {
        let n = self.times.len();
        let (lo, hi) = (self.times[0].min(self.times[n - 1]), self.times[0].max(self.times[n - 1]));
        if !(t >= lo && t <= hi) {
            return None;
        }
        if n == 1 {
            return Some(self.states[0].clone());
        }
        let forward = self.times[n - 1] > self.times[0];
        // Index k with t in [times[k], times[k+1]] (in integration order).
        let k = if forward {
            self.times.partition_point(|&s| s <= t).saturating_sub(1)
        } else {
            self.times.partition_point(|&s| s >= t).saturating_sub(1)
        }
        .min(n - 2);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (y0, y1) = (&self.states[k], &self.states[k + 1]);
        let (f0, f1) = (&self.derivs[k], &self.derivs[k + 1]);
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        Some(y0 * h00 + f0 * (h * h10) + y1 * h01 + f1 * (h * h11))
    }

    pub fn max_residual(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.residual).fold(0.0, f64::max)
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

fn error_norm(err: &Vector, y0: &Vector, y1: &Vector, rtol: f64, atol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = (0..err.len())
        .map(|i| {
            let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
            (err[i] / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn initial_step<F: VectorField + ?Sized>(field: &F, t0: f64, y0: &Vector, f0: &Vector, dir: f64, opts: &OdeOptions) -> f64 {
    let sc = y0.map(|v| opts.atol + opts.rtol * v.abs());
    let rms = |v: &Vector| (v.component_div(&sc).norm_squared() / v.len().max(1) as f64).sqrt();
    let d0 = rms(y0);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = y0 + f0 * (dir * h0);
    let d2 = match field.eval(t0 + dir * h0, &y1) {
        Ok(f1) => rms(&(f1 - f0)) / h0,
        Err(_) => return h0,
    };
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1)
}

/// Integrate from `t0` to `t1` (either direction).
pub fn integrate<F: VectorField + ?Sized>(field: &F, t0: f64, t1: f64, y0: &Vector, opts: &OdeOptions) -> Result<OdePath> {
    if t0 == t1 || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::Domain("integration needs a non-empty finite time interval".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial state is not finite".into()));
    }
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::Domain("tolerances must be positive".into()));
    }
    if y0.len() != field.dim() {
        return Err(Error::Dimension(format!("initial state has length {}, field has {}", y0.len(), field.dim())));
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let h_min = 1e-14 * span;
    let h_max = opts.max_step.unwrap_or(span).min(span);

    let mut t = t0;
    let mut y = y0.clone();
    let mut path = OdePath {
        times: vec![t0],
        states: vec![y0.clone()],
        derivs: Vec::new(),
        diagnostics: Vec::new(),
        status: OdeStatus::Completed,
    };
    let mut f = match field.eval(t, &y) {
        Ok(f) => f,
        Err(msg) => {
            path.derivs.push(Vector::zeros(y0.len()));
            path.status = OdeStatus::FieldFailure(msg);
            return Ok(path);
        }
    };
    path.derivs.push(f.clone());
    let mut h = opts.initial_step.unwrap_or_else(|| initial_step(field, t0, &y, &f, dir, opts)).min(h_max);
    let mut err_prev: f64 = 1e-4;
    let mut rejected = 0usize;
    let mut last_failure: Option<String> = None;
    let mut steps = 0usize;
    let mut k: Vec<Vector> = vec![Vector::zeros(y.len()); 7];

    while (t1 - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            path.status = OdeStatus::MaxSteps;
            return Ok(path);
        }
        if h < h_min {
            path.status = match last_failure.take() {
                Some(msg) => OdeStatus::FieldFailure(msg),
                None => OdeStatus::StepUnderflow,
            };
            return Ok(path);
        }
        let last = (t + dir * h - t1) * dir >= 0.0 || (t1 - t).abs() - h < 1e-12 * span;
        let hs = if last { (t1 - t).abs() } else { h };
        let h_signed = dir * hs;

        // Stages; a stage failure counts as a rejection.
        k[0] = f.clone();
        let mut failure = None;
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    ys += kj * (h_signed * A[s][j]);
                }
            }
            match field.eval(t + C[s] * h_signed, &ys) {
                Ok(v) if v.iter().all(|x| x.is_finite()) => k[s] = v,
                Ok(_) => {
                    failure = Some("non-finite field value".to_string());
                    break;
                }
                Err(msg) => {
                    failure = Some(msg);
                    break;
                }
            }
        }
        if let Some(msg) = failure {
            last_failure = Some(msg);
            rejected += 1;
            h = hs * 0.25;
            continue;
        }
        let mut y_new = y.clone();
        let mut err = Vector::zeros(y.len());
        for s in 0..7 {
            if B5[s] != 0.0 {
                y_new += &k[s] * (h_signed * B5[s]);
            }
            let e = B5[s] - B4[s];
            if e != 0.0 {
                err += &k[s] * (h_signed * e);
            }
        }
        let en = error_norm(&err, &y, &y_new, opts.rtol, opts.atol);
        if !en.is_finite() || en > 1.0 {
            let fac = if en.is_finite() { (SAFETY * en.powf(-ALPHA)).clamp(MIN_FACTOR, 1.0) } else { MIN_FACTOR };
            h = hs * fac;
            rejected += 1;
            last_failure = None;
            continue;
        }
        let t_new = if last { t1 } else { t + h_signed };
        let (y_acc, f_acc) = if opts.project {
            let yp = field.project(t_new, &y_new);
            match field.eval(t_new, &yp) {
                Ok(fp) => (yp, fp),
                Err(msg) => {
                    last_failure = Some(msg);
                    rejected += 1;
                    h = hs * 0.25;
                    continue;
                }
            }
        } else {
            (y_new, k[6].clone())
        };
        if y_acc.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            h = hs * 0.25;
            continue;
        }
        steps += 1;
        t = t_new;
        y = y_acc;
        f = f_acc;
        path.times.push(t);
        path.states.push(y.clone());
        path.derivs.push(f.clone());
        path.diagnostics.push(StepDiagnostic { residual: field.residual(t, &y), rejected });
        rejected = 0;
        last_failure = None;
        let en_c = en.max(1e-10);
        let mut fac = SAFETY * en_c.powf(-ALPHA) * err_prev.powf(BETA);
        fac = fac.clamp(MIN_FACTOR, MAX_FACTOR);
        err_prev = en_c;
        h = (hs * fac).min(h_max);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(f64);
    impl VectorField for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _t: f64, y: &Vector) -> std::result::Result<Vector, String> {
            Ok(y * self.0)
        }
    }

    struct Zero;
    impl VectorField for Zero {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _t: f64, y: &Vector) -> std::result::Result<Vector, String> {
            Ok(Vector::zeros(y.len()))
        }
    }

    struct Square;
    impl VectorField for Square {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _t: f64, y: &Vector) -> std::result::Result<Vector, String> {
            Ok(y.map(|v| v * v))
        }
    }

    /// Rotation with projection onto the unit circle.
    struct Circle;
    impl VectorField for Circle {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _t: f64, y: &Vector) -> std::result::Result<Vector, String> {
            Ok(Vector::from_vec(vec![-y[1], y[0]]))
        }
        fn project(&self, _t: f64, y: &Vector) -> Vector {
            y / y.norm()
        }
        fn residual(&self, _t: f64, y: &Vector) -> f64 {
            (y.norm() - 1.0).abs()
        }
    }

    fn opts(rtol: f64, atol: f64) -> OdeOptions {
        OdeOptions { rtol, atol, ..OdeOptions::default() }
    }

    #[test]
    fn constant_field() {
        let p = integrate(&Zero, 0.0, 1.0, &Vector::from_vec(vec![1.0, 2.0]), &OdeOptions::default()).unwrap();
        assert!(p.completed());
        assert_eq!(p.final_state(), &Vector::from_vec(vec![1.0, 2.0]));
    }

    #[test]
    fn exponential_decay() {
        let p = integrate(&Linear(-1.0), 0.0, 1.0, &Vector::from_vec(vec![1.0]), &opts(1e-8, 1e-10)).unwrap();
        assert!(p.completed());
        assert!((p.final_state()[0] - 0.36787944).abs() < 1e-7);
        assert_eq!(p.final_time(), 1.0);
    }

    #[test]
    fn blow_up_is_reported() {
        let p = integrate(&Square, 0.0, 2.0, &Vector::from_vec(vec![1.0]), &OdeOptions::default()).unwrap();
        assert!(!p.completed());
        assert!((p.final_time() - 1.0).abs() < 1e-2, "halted at {}", p.final_time());
    }

    #[test]
    fn error_shrinks_with_tolerance() {
        let exact = (-2.0f64).exp();
        let err = |tol: f64| {
            let p = integrate(&Linear(-1.0), 0.0, 2.0, &Vector::from_vec(vec![1.0]), &opts(tol, tol)).unwrap();
            (p.final_state()[0] - exact).abs()
        };
        let coarse = err(1e-6);
        let fine = err(1e-6 / 2f64.powi(5));
        assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn backward_and_reversible() {
        let y0 = Vector::from_vec(vec![0.7]);
        let o = opts(1e-9, 1e-12);
        let fwd = integrate(&Linear(0.8), 0.0, 1.5, &y0, &o).unwrap();
        let back = integrate(&Linear(0.8), 1.5, 0.0, fwd.final_state(), &o).unwrap();
        assert!(back.completed());
        assert!((back.final_state()[0] - y0[0]).abs() <= 10.0 * (1e-9 * 0.7 + 1e-12));
    }

    #[test]
    fn projection_keeps_residual_small() {
        let y0 = Vector::from_vec(vec![1.0, 0.0]);
        let p = integrate(&Circle, 0.0, 20.0, &y0, &OdeOptions::default()).unwrap();
        assert!(p.max_residual() < 1e-14);
        let twice = Circle.project(0.0, &Circle.project(0.0, &Vector::from_vec(vec![3.0, 4.0])));
        assert!((twice - Circle.project(0.0, &Vector::from_vec(vec![3.0, 4.0]))).norm() < 1e-12);
    }

    #[test]
    fn dense_output() {
        let p = integrate(&Linear(-1.0), 0.0, 3.0, &Vector::from_vec(vec![1.0]), &OdeOptions::default()).unwrap();
        for t in [0.0, 0.37, 1.2, 2.99, 3.0] {
            assert!((p.sample(t).unwrap()[0] - (-t).exp()).abs() < 1e-6);
        }
        assert!(p.sample(3.1).is_none());
        let b = integrate(&Linear(-1.0), 3.0, 0.0, &Vector::from_vec(vec![(-3.0f64).exp()]), &OdeOptions::default()).unwrap();
        assert!((b.sample(1.0).unwrap()[0] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn invalid_arguments() {
        let y0 = Vector::from_vec(vec![1.0]);
        assert!(integrate(&Linear(1.0), 1.0, 1.0, &y0, &OdeOptions::default()).is_err());
        assert!(integrate(&Linear(1.0), 0.0, 1.0, &Vector::from_vec(vec![f64::NAN]), &OdeOptions::default()).is_err());
        assert!(integrate(&Linear(1.0), 0.0, 1.0, &y0, &opts(0.0, 1e-9)).is_err());
    }
}
