mod common;

use prolik::gev::{gev_cdf, gev_logpdf, loglik_terms, rl_derivs, GevParams, SERIES_SWITCH};
use prolik::mcmc::{mcmc_interval, mcmc_profile_curve, rw_metropolis, McmcOptions};
use prolik::models::{build_linear_gaussian, LikelihoodModel, LinearGaussianSpec, QuadraticModel, VarianceMode};
use prolik::numerics::{deviance_threshold, Matrix, Vector};
use prolik::optimizer::{fit_mle, profile_bound, BoundOptions, Side};
use prolik::oracle::{linreg_interval, naive_bound, naive_profile_value, profile_curve};
use prolik::target::{LinearTarget, TargetFunction};
use prolik::tracers::project_to_level;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = GevParams> {
    (-3.0f64..3.0, 0.1f64..10.0, -0.45f64..1.0).prop_map(|(m, s, x)| GevParams::new(m, s, x))
}

/// Random positive-definite matrix A Aᵀ + I/2.
fn spd(p: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, p * p).prop_map(move |v| {
        let a = Matrix::from_vec(p, p, v);
        &a * a.transpose() + Matrix::identity(p, p) * 0.5
    })
}

fn quadratic_problem() -> impl Strategy<Value = (QuadraticModel, LinearTarget)> {
    (2usize..5).prop_flat_map(|p| {
        (spd(p), prop::collection::vec(-2.0f64..2.0, p), prop::collection::vec(-1.0f64..1.0, p)).prop_filter_map(
            "target needs a nonzero direction",
            move |(h, c, a)| {
                let a = Vector::from_vec(a);
                (a.norm() > 0.1).then(|| (QuadraticModel::new(Vector::from_vec(c), h, -3.0).unwrap(), LinearTarget::fixed(a, "eta")))
            },
        )
    })
}

/// η(θ̂) ± √(2δ·aᵀH⁻¹a).
fn closed_form(m: &QuadraticModel, t: &LinearTarget, delta: f64) -> (f64, f64) {
    let est = t.a.dot(m.center());
    let half = (2.0 * delta * t.a.dot(&(m.neg_hessian().clone().try_inverse().unwrap() * &t.a))).sqrt();
    (est - half, est + half)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn support_matches_cdf_extremes(p in params(), y in -20.0f64..20.0) {
        let l = gev_logpdf(y, &p);
        let f = gev_cdf(y, &p);
        let z = 1.0 + p.xi * (y - p.mu) / p.sigma;
        prop_assume!(z.abs() > 1e-9);
        prop_assert_eq!(l == f64::NEG_INFINITY, z < 0.0);
        if z < 0.0 {
            prop_assert!(f == 0.0 || f == 1.0);
        }
    }

    #[test]
    fn continuous_across_series_switch(mu in -2.0f64..2.0, sigma in 0.2f64..3.0, w in 0.5f64..3.0, side in prop::bool::ANY) {
        // ξ·w on either side of the switch.
        let eps = 1e-12;
        let sign = if side { 1.0 } else { -1.0 };
        let below = GevParams::new(mu, sigma, sign * (SERIES_SWITCH - eps) / w);
        let above = GevParams::new(mu, sigma, sign * (SERIES_SWITCH + eps) / w);
        let y = mu + w * sigma;
        let (a, b) = (loglik_terms(y, &below), loglik_terms(y, &above));
        prop_assert!((a.value - b.value).abs() < 1e-7);
        for k in 0..3 {
            prop_assert!((a.grad[k] - b.grad[k]).abs() < 1e-7 * (1.0 + a.grad[k].abs()));
            for j in 0..3 {
                prop_assert!((a.hess[k][j] - b.hess[k][j]).abs() < 1e-7 * (1.0 + a.hess[k][j].abs()));
            }
        }
        let s = w;
        let (ra, rb) = (rl_derivs(s, &below), rl_derivs(s, &above));
        prop_assert!((ra.eta - rb.eta).abs() < 1e-7 * (1.0 + ra.eta.abs()));
        for k in 0..3 {
            prop_assert!((ra.grad[k] - rb.grad[k]).abs() < 1e-7 * (1.0 + ra.grad[k].abs()));
            prop_assert!((ra.cross[k] - rb.cross[k]).abs() < 1e-7 * (1.0 + ra.cross[k].abs()));
        }
    }

    #[test]
    fn return_level_increases_with_period(p in params(), s in 0.0f64..10.0) {
        prop_assert!(rl_derivs(s, &p).ds >= 0.0);
    }

    #[test]
    fn cdf_decreases_in_location(p in params(), y in -10.0f64..10.0, d in 0.01f64..2.0) {
        let shifted = GevParams::new(p.mu + d, p.sigma, p.xi);
        prop_assert!(gev_cdf(y, &shifted) <= gev_cdf(y, &p));
    }

    #[test]
    fn quadratic_bounds_match_closed_form((m, t) in quadratic_problem(), level in 0.5f64..0.99) {
        let delta = deviance_threshold(level, 1).unwrap();
        let fit = fit_mle(&m, None).unwrap();
        let (lo, hi) = closed_form(&m, &t, delta);
        let opts = BoundOptions::default();
        let l = profile_bound(&m, &t, 0.0, &fit, delta, Side::Lower, &opts).unwrap();
        let u = profile_bound(&m, &t, 0.0, &fit, delta, Side::Upper, &opts).unwrap();
        prop_assert!((l.value - lo).abs() < 1e-8 * (1.0 + lo.abs()), "{} vs {}", l.value, lo);
        prop_assert!((u.value - hi).abs() < 1e-8 * (1.0 + hi.abs()), "{} vs {}", u.value, hi);
        // Stationarity ∇η = ν∇ℓ with ν < 0 at the upper bound, ν > 0 at the lower.
        for b in [&l, &u] {
            prop_assert!(b.kkt_residual <= 1e-6 * (1.0 + t.a.norm()));
            prop_assert!(b.nu * b.side.sign() < 0.0);
        }
    }

    #[test]
    fn sandwich_with_the_nested_method((m, t) in quadratic_problem()) {
        let delta = deviance_threshold(0.95, 1).unwrap();
        let fit = fit_mle(&m, None).unwrap();
        for side in [Side::Lower, Side::Upper] {
            let al = profile_bound(&m, &t, 0.0, &fit, delta, side, &BoundOptions::default()).unwrap();
            let nb = naive_bound(&m, &fit, &t, 0.0, delta, side).unwrap();
            prop_assert!((al.value - nb.value).abs() < 1e-4);
            prop_assert!(nb.residual.abs() <= 1e-8);
            // The optimiser's bound point is feasible for the profile.
            let slice = naive_profile_value(&m, &t, 0.0, al.value, &fit.theta_hat).unwrap();
            prop_assert!(slice.loglik >= fit.loglik_max - delta - 1e-8);
        }
    }

    #[test]
    fn bounds_widen_with_delta((m, t) in quadratic_problem(), d1 in 0.1f64..2.0, extra in 0.05f64..2.0) {
        let fit = fit_mle(&m, None).unwrap();
        let opts = BoundOptions::default();
        let small = [Side::Lower, Side::Upper].map(|s| profile_bound(&m, &t, 0.0, &fit, d1, s, &opts).unwrap().value);
        let large = [Side::Lower, Side::Upper].map(|s| profile_bound(&m, &t, 0.0, &fit, d1 + extra, s, &opts).unwrap().value);
        prop_assert!(large[0] <= small[0] + 1e-10 && large[1] >= small[1] - 1e-10);
    }

    #[test]
    fn projection_is_idempotent((m, _t) in quadratic_problem(), shift in prop::collection::vec(-1.0f64..1.0, 4)) {
        let fit = fit_mle(&m, None).unwrap();
        let p = m.dim();
        let theta = &fit.theta_hat + Vector::from_iterator(p, shift.into_iter().take(p)) * 2.0;
        prop_assume!((theta.clone() - &fit.theta_hat).norm() > 0.1);
        let level = fit.loglik_max - 1.0;
        let once = project_to_level(&m, &theta, level);
        let twice = project_to_level(&m, &once, level);
        prop_assert!((&twice - &once).norm() <= 1e-12 * (1.0 + once.norm()));
    }

    #[test]
    fn linear_regression_methods_agree(
        slope in -2.0f64..2.0,
        noise in prop::collection::vec(-1.0f64..1.0, 8),
        x_new in -3.0f64..5.0,
        profiled in prop::bool::ANY,
    ) {
        let n = noise.len();
        let design = Matrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 0.5 });
        let responses = Vector::from_fn(n, |i, _| 0.3 + slope * i as f64 * 0.5 + noise[i]);
        let mode = if profiled { VarianceMode::ProfiledOut } else { VarianceMode::Known(0.4) };
        let spec = LinearGaussianSpec { design, responses, variance_mode: mode };
        let model = build_linear_gaussian(&spec).unwrap();
        let fit = fit_mle(&model, None).unwrap();
        let a = Vector::from_vec(vec![1.0, x_new]);
        let reference = linreg_interval(&spec, &a, 0.05).unwrap();
        let target = LinearTarget::fixed(a, "mean");
        let delta = deviance_threshold(0.95, 1).unwrap();
        let lo = profile_bound(&model, &target, 0.0, &fit, delta, Side::Lower, &BoundOptions::default()).unwrap();
        let hi = profile_bound(&model, &target, 0.0, &fit, delta, Side::Upper, &BoundOptions::default()).unwrap();
        if profiled {
            // The profiled-variance likelihood is not quadratic; its interval
            // contains the plug-in one.
            prop_assert!(lo.value <= reference.lower + 1e-9 && hi.value >= reference.upper - 1e-9);
        } else {
            prop_assert!((lo.value - reference.lower).abs() < 1e-6 && (hi.value - reference.upper).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sampled_interval_within_profile_interval((m, t) in quadratic_problem(), seed in 0u64..1000) {
        let delta = deviance_threshold(0.95, 1).unwrap();
        let fit = fit_mle(&m, None).unwrap();
        let mut opts = McmcOptions::new(2000, seed);
        opts.proposal_cov = fit.covariance().ok();
        let trace = rw_metropolis(&m, &fit.theta_hat, &opts).unwrap();
        let eta = |th: &Vector| t.value(th, 0.0);
        let iv = mcmc_interval(&trace, eta, delta).unwrap();
        // The threshold is taken from the best iterate, slightly below ℓmax.
        let (lo, hi) = closed_form(&m, &t, delta + fit.loglik_max - iv.loglik_max);
        prop_assert!(iv.lower >= lo - 1e-9 && iv.upper <= hi + 1e-9);
        let wider = mcmc_interval(&trace, eta, 2.0 * delta).unwrap();
        prop_assert!(wider.lower <= iv.lower && wider.upper >= iv.upper);
        // Binned maxima never exceed the profile over their bin.
        let bins = mcmc_profile_curve(&trace, eta, 10).unwrap();
        let est = t.value(&fit.theta_hat, 0.0);
        let (lo, _) = closed_form(&m, &t, delta);
        let var = (est - lo).powi(2) / (2.0 * delta);
        for b in bins {
            if let Some(l) = b.max_loglik {
                let nearest = est.clamp(b.eta_lo, b.eta_hi);
                let profile = fit.loglik_max - (nearest - est).powi(2) / (2.0 * var);
                prop_assert!(l <= profile + 1e-9);
            }
        }
    }
}

#[test]
fn binned_curve_below_nested_profile_on_gev() {
    let (_, y) = common::venice();
    let model = prolik::models::build_iid_gev(&y).unwrap();
    let fit = fit_mle(&model, None).unwrap();
    let mut opts = McmcOptions::new(5000, 3);
    opts.proposal_cov = fit.covariance().ok();
    let trace = rw_metropolis(&model, &fit.theta_hat, &opts).unwrap();
    let xi = prolik::target::Coordinate::new(2, "xi");
    let bins = mcmc_profile_curve(&trace, |th| th[2], 12).unwrap();
    for b in bins.iter().filter(|b| b.max_loglik.is_some()) {
        // The profile is unimodal, so its maximum over a bin sits at the end
        // nearest the estimate.
        let nearest = fit.theta_hat[2].clamp(b.eta_lo, b.eta_hi);
        let curve = profile_curve(&model, &fit, &xi, 0.0, &[nearest]).unwrap();
        assert!(b.max_loglik.unwrap() <= curve.loglik[0] + 1e-9);
    }
}

#[test]
fn sampled_interval_approaches_profile_interval() {
    let (_, y) = common::venice();
    let model = prolik::models::build_iid_gev(&y).unwrap();
    let fit = fit_mle(&model, None).unwrap();
    let delta = deviance_threshold(0.95, 1).unwrap();
    let xi = prolik::target::Coordinate::new(2, "xi");
    let bound = |d: f64, side| profile_bound(&model, &xi, 0.0, &fit, d, side, &BoundOptions::default()).unwrap().value;
    let (lo, hi) = (bound(delta, Side::Lower), bound(delta, Side::Upper));
    let gap = |k: usize| {
        let mut opts = McmcOptions::new(k, 5);
        opts.proposal_cov = fit.covariance().ok();
        let trace = rw_metropolis(&model, &fit.theta_hat, &opts).unwrap();
        let iv = mcmc_interval(&trace, |th| th[2], delta).unwrap();
        let effective = delta + fit.loglik_max - iv.loglik_max;
        assert!(iv.lower >= bound(effective, Side::Lower) - 1e-9 && iv.upper <= bound(effective, Side::Upper) + 1e-9);
        (iv.lower - lo) + (hi - iv.upper)
    };
    let (coarse, fine) = (gap(1_000), gap(10_000));
    assert!(fine < coarse, "gap {fine} at 10⁴ iterates vs {coarse} at 10³");
}

#[test]
fn two_degree_interval_contains_one_degree_interval() {
    let spec = LinearGaussianSpec {
        design: Matrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]),
        responses: Vector::from_vec(vec![0.1, 0.9, 2.2, 2.8]),
        variance_mode: VarianceMode::Known(1.0),
    };
    let model = build_linear_gaussian(&spec).unwrap();
    let fit = fit_mle(&model, None).unwrap();
    let slope = prolik::target::Coordinate::new(1, "slope");
    let d1 = deviance_threshold(0.95, 1).unwrap();
    let d2 = deviance_threshold(0.95, 2).unwrap();
    for side in [Side::Lower, Side::Upper] {
        let one = naive_bound(&model, &fit, &slope, 0.0, d1, side).unwrap().value;
        let two = naive_bound(&model, &fit, &slope, 0.0, d2, side).unwrap().value;
        assert!(side.sign() * (two - one) > 1e-3);
    }
}

#[test]
fn profiled_variance_maximiser_is_least_squares() {
    let spec = |mode| LinearGaussianSpec {
        design: Matrix::from_row_slice(5, 2, &[1.0, -1.0, 1.0, 0.0, 1.0, 1.5, 1.0, 2.0, 1.0, 4.0]),
        responses: Vector::from_vec(vec![-0.7, 0.4, 1.1, 2.5, 3.9]),
        variance_mode: mode,
    };
    let known = fit_mle(&build_linear_gaussian(&spec(VarianceMode::Known(2.0))).unwrap(), None).unwrap();
    let profiled = fit_mle(&build_linear_gaussian(&spec(VarianceMode::ProfiledOut)).unwrap(), None).unwrap();
    assert!((&known.theta_hat - &profiled.theta_hat).norm() < 1e-9);
}

#[test]
fn shipped_data_fits_are_concave() {
    let (year, y) = common::venice();
    let iid = prolik::models::build_iid_gev(&y).unwrap();
    let fit = fit_mle(&iid, None).unwrap();
    assert!(prolik::numerics::cholesky(&fit.neg_hessian()).is_some());
    let n = y.len();
    let x = Matrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { year[i] / 100.0 });
    let ones = Matrix::from_element(n, 1, 1.0);
    let spec = prolik::models::GevRegressionSpec::new(x, ones.clone(), ones, Vector::from_vec(y));
    let reg = prolik::models::build_gev_regression(&spec).unwrap();
    let fit = fit_mle(&reg, None).unwrap();
    assert!(prolik::numerics::cholesky(&fit.neg_hessian()).is_some());
}
