mod common;

use prolik::models::{build_iid_gev, IidGev, LikelihoodModel, QuadraticModel};
use prolik::numerics::{deviance_threshold, Matrix, Vector};
use prolik::odesolve::{integrate, OdeOptions, VectorField};
use prolik::optimizer::{fit_mle, profile_bound, BoundOptions, MleFit, Side};
use prolik::oracle::naive_bound;
use prolik::target::{Coordinate, LinearTarget, ReturnLevel, TargetFunction};
use prolik::tracers::{bubble_field, trace_bubble, AugmentedState, BubbleOptions, BubbleStatus};

/// The bubble field run backwards: τ ↦ δ = `from` − τ.
struct Reversed<'a, T> {
    model: &'a IidGev,
    target: &'a T,
    t: f64,
    from: f64,
}

impl<T: TargetFunction> VectorField for Reversed<'_, T> {
    fn dim(&self) -> usize {
        4
    }

    fn eval(&self, _tau: f64, y: &Vector) -> Result<Vector, String> {
        let (dth, dnu) = bubble_field(self.model, self.target, self.t, &AugmentedState::from_vector(y)).map_err(|e| e.to_string())?;
        Ok(-AugmentedState { theta: dth, nu: dnu }.to_vector())
    }
}

fn venice_fit() -> (IidGev, MleFit, f64) {
    let (_, y) = common::venice();
    let model = build_iid_gev(&y).unwrap();
    let fit = fit_mle(&model, None).unwrap();
    (model, fit, deviance_threshold(0.95, 1).unwrap())
}

#[test]
fn reverse_integration_returns_to_the_start() {
    let (model, fit, delta) = venice_fit();
    let xi = Coordinate::new(2, "xi");
    let rl = ReturnLevel::iid();
    let cases: [(&dyn TargetFunction, f64); 2] = [(&xi, 0.0), (&rl, 100f64.ln())];
    for (target, t) in cases {
        for side in [Side::Lower, Side::Upper] {
            let tr = trace_bubble(&model, target, t, &fit, delta, side, &BubbleOptions::default()).unwrap();
            assert_eq!(tr.status, BubbleStatus::Reached);
            let back = Reversed { model: &model, target: &target, t, from: delta };
            let opts = OdeOptions { project: false, ..OdeOptions::default() };
            let span = back.from - tr.delta1;
            let path = integrate(&back, 0.0, span, tr.path.final_state(), &opts).unwrap();
            assert!(path.completed());
            let end = AugmentedState::from_vector(path.final_state());
            let gap = (&end.theta - &tr.initial.theta).norm();
            assert!(gap < 1e-4, "{} {side:?}: returned {gap:e} away", target.name());
        }
    }
}

#[test]
fn level_is_consumed_at_unit_rate() {
    let (model, fit, delta) = venice_fit();
    let rl = ReturnLevel::iid();
    let t = 100f64.ln();
    for side in [Side::Lower, Side::Upper] {
        let tr = trace_bubble(&model, &rl, t, &fit, delta, side, &BubbleOptions::default()).unwrap();
        for y in &tr.path.states {
            let st = AugmentedState::from_vector(y);
            let (dth, _) = bubble_field(&model, &rl, t, &st).unwrap();
            let rate = model.grad(&st.theta).dot(&dth);
            assert!((rate + 1.0).abs() < 1e-6, "∇ℓᵀθ̇ = {rate}");
        }
    }
}

#[test]
fn endpoints_agree_across_methods() {
    let (model, fit, delta) = venice_fit();
    let xi = Coordinate::new(2, "xi");
    let rl = ReturnLevel::iid();
    let cases: [(&dyn TargetFunction, f64); 2] = [(&xi, 0.0), (&rl, 100f64.ln())];
    for (target, t) in cases {
        for side in [Side::Lower, Side::Upper] {
            let bubble = trace_bubble(&model, target, t, &fit, delta, side, &BubbleOptions::default()).unwrap().bound.unwrap();
            let optim = profile_bound(&model, target, t, &fit, delta, side, &BoundOptions::default()).unwrap();
            let naive = naive_bound(&model, &fit, target, t, delta, side).unwrap();
            assert!(bubble.converged && optim.converged && naive.converged);
            assert!((bubble.value - optim.value).abs() < 1e-3);
            assert!((naive.value - optim.value).abs() < 1e-3);
        }
    }
}

#[test]
fn correlated_quadratic_path_is_exact_and_multiplier_monotone() {
    let h = Matrix::from_row_slice(3, 3, &[2.0, 0.6, -0.4, 0.6, 1.5, 0.3, -0.4, 0.3, 1.0]);
    let center = Vector::from_vec(vec![0.5, -1.0, 2.0]);
    let model = QuadraticModel::new(center.clone(), h.clone(), 0.0).unwrap();
    let fit = fit_mle(&model, None).unwrap();
    let a = Vector::from_vec(vec![1.0, -2.0, 0.5]);
    let target = LinearTarget::fixed(a.clone(), "a");
    let dir = h.clone().try_inverse().unwrap() * &a;
    let q = a.dot(&dir);
    for side in [Side::Lower, Side::Upper] {
        let tr = trace_bubble(&model, &target, 0.0, &fit, 2.0, side, &BubbleOptions::default()).unwrap();
        for (&d, y) in tr.path.times.iter().zip(&tr.path.states) {
            let exact = &center + &dir * (side.sign() * (2.0 * d / q).sqrt());
            assert!((y.rows(0, 3) - exact).norm() < 1e-6, "δ = {d}");
        }
        let nus: Vec<f64> = tr.nu_series().into_iter().map(|(_, nu)| nu).collect();
        let increasing = nus.windows(2).all(|w| w[1] >= w[0]);
        let decreasing = nus.windows(2).all(|w| w[1] <= w[0]);
        assert!(increasing || decreasing);
    }
}
