//! Generalised extreme-value distribution: density, distribution function,
//! return levels and the derivatives needed by likelihoods and ODE fields.
//!
//! Both the log-density and the return level contain expressions of the form
//! `log1p(u)/u` and `expm1(v)/v` whose derivatives cancel catastrophically
//! when the product of the shape with the standardised argument is small.
//! These are evaluated through truncated power series below [`SERIES_SWITCH`],
//! so the Gumbel limit ξ = 0 is an ordinary point.

use serde::{Deserialize, Serialize};

/// Threshold on |ξ·w| (log-density) and |ξ·s| (return level) below which the
/// series forms are used.
pub const SERIES_SWITCH: f64 = 0.05;

/// Number of series terms; the truncation error at the switch is below 1e-30.
const SERIES_TERMS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Self {
        Self { mu, sigma, xi }
    }

    pub fn is_valid(&self) -> bool {
        self.mu.is_finite() && self.sigma.is_finite() && self.xi.is_finite() && self.sigma > 0.0 && self.xi >= -1.0
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.mu, self.sigma, self.xi]
    }
}

/// `g(u) = log1p(u)/u` and its first two derivatives.
fn log1p_ratio(u: f64) -> (f64, f64, f64) {
    if u.abs() < SERIES_SWITCH {
        // g(u) = Σ (-1)^k u^k / (k+1)
        let (mut g, mut g1, mut g2) = (0.0, 0.0, 0.0);
        let mut upow = 1.0; // u^k
        for k in 0..SERIES_TERMS {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let kf = k as f64;
            g += sign * upow / (kf + 1.0);
            if k + 1 < SERIES_TERMS {
                // coefficient of u^k in g' comes from term k+1
                let k1 = kf + 1.0;
                g1 -= sign * k1 * upow / (k1 + 1.0);
            }
            if k + 2 < SERIES_TERMS {
                let k2 = kf + 2.0;
                g2 += sign * k2 * (k2 - 1.0) * upow / (k2 + 1.0);
            }
            upow *= u;
        }
        (g, g1, g2)
    } else {
        let l = u.ln_1p();
        let z = 1.0 + u;
        let g = l / u;
        let g1 = (u / z - l) / (u * u);
        let g2 = 2.0 * l / (u * u * u) - 2.0 / (u * u * z) - 1.0 / (u * z * z);
        (g, g1, g2)
    }
}

/// `h(v) = expm1(v)/v` and its first two derivatives.
fn expm1_ratio(v: f64) -> (f64, f64, f64) {
    if v.abs() < SERIES_SWITCH {
        // h(v) = Σ v^k / (k+1)!
        let (mut h, mut h1, mut h2) = (0.0, 0.0, 0.0);
        let mut vpow = 1.0;
        let mut fact = 1.0; // (k+1)!
        for k in 0..SERIES_TERMS {
            let kf = k as f64;
            fact *= kf + 1.0;
            h += vpow / fact;
            // h' coefficient of v^k: (k+1) / (k+2)!
            h1 += (kf + 1.0) * vpow / (fact * (kf + 2.0));
            // h'' coefficient of v^k: (k+2)(k+1) / (k+3)!
            h2 += (kf + 2.0) * (kf + 1.0) * vpow / (fact * (kf + 2.0) * (kf + 3.0));
            vpow *= v;
        }
        (h, h1, h2)
    } else {
        let ev = v.exp();
        let e1 = v.exp_m1();
        let h = e1 / v;
        let h1 = (ev * v - e1) / (v * v);
        let h2 = (ev * v * v - 2.0 * ev * v + 2.0 * e1) / (v * v * v);
        (h, h1, h2)
    }
}

/// Lower end-point of the support when ξ > 0, upper when ξ < 0.
pub fn upper_endpoint(theta: &GevParams) -> f64 {
    if theta.xi < 0.0 {
        theta.mu - theta.sigma / theta.xi
    } else {
        f64::INFINITY
    }
}

/// Log-density; `-inf` outside the support.
pub fn gev_logpdf(y: f64, theta: &GevParams) -> f64 {
    loglik_terms(y, theta).value
}

pub fn gev_cdf(y: f64, theta: &GevParams) -> f64 {
    let w = (y - theta.mu) / theta.sigma;
    let u = theta.xi * w;
    if 1.0 + u <= 0.0 {
        return if theta.xi > 0.0 { 0.0 } else { 1.0 };
    }
    let (g, _, _) = log1p_ratio(u);
    let a = w * g;
    (-(-a).exp()).exp()
}

/// Quantile function, used for simulation.
pub fn gev_quantile(p: f64, theta: &GevParams) -> f64 {
    let l = (-p.ln()).ln();
    // ((-ln p)^(-ξ) - 1)/ξ = -l · h(-ξ l)
    let (h, _, _) = expm1_ratio(-theta.xi * l);
    theta.mu - theta.sigma * l * h
}

/// Return level for log return period `s = ln T`.
pub fn return_level(s: f64, theta: &GevParams) -> f64 {
    let (h, _, _) = expm1_ratio(theta.xi * s);
    theta.mu + theta.sigma * s * h
}

/// Per-observation log-likelihood with gradient and Hessian in (µ, σ, ξ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoglikTerms {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
    /// False when the observation lies outside the support; derivatives are
    /// then zero and meaningless.
    pub in_support: bool,
}

pub fn loglik_terms(y: f64, theta: &GevParams) -> LoglikTerms {
    let GevParams { mu, sigma, xi } = *theta;
    let w = (y - mu) / sigma;
    let u = xi * w;
    let z = 1.0 + u;
    if !(z > 0.0) || !(sigma > 0.0) {
        return LoglikTerms {
            value: f64::NEG_INFINITY,
            grad: [0.0; 3],
            hess: [[0.0; 3]; 3],
            in_support: false,
        };
    }
    let l = u.ln_1p();
    let (g, g1, g2) = log1p_ratio(u);

    // A = log(z)/ξ, written as w·g(ξw) so that ξ = 0 is regular.
    let a = w * g;
    let a_w = 1.0 / z;
    let a_ww = -xi / (z * z);
    let a_wx = -w / (z * z);
    let a_x = w * w * g1;
    let a_xx = w * w * w * g2;

    let l_w = xi / z;
    let l_x = w / z;
    let l_ww = -xi * xi / (z * z);
    let l_wx = 1.0 / (z * z);
    let l_xx = -w * w / (z * z);

    let e = (-a).exp();
    let one_m_e = -(-a).exp_m1();

    // Φ(w, ξ) = -L - A - exp(-A)
    let phi = -l - a - e;
    let phi_w = -l_w - one_m_e * a_w;
    let phi_x = -l_x - one_m_e * a_x;
    let phi_ww = -l_ww - one_m_e * a_ww - e * a_w * a_w;
    let phi_wx = -l_wx - one_m_e * a_wx - e * a_w * a_x;
    let phi_xx = -l_xx - one_m_e * a_xx - e * a_x * a_x;

    let w_mu = -1.0 / sigma;
    let w_s = -w / sigma;
    let w_mu_s = 1.0 / (sigma * sigma);
    let w_ss = 2.0 * w / (sigma * sigma);

    let value = -sigma.ln() + phi;
    let grad = [phi_w * w_mu, -1.0 / sigma + phi_w * w_s, phi_x];
    let h_mm = phi_ww * w_mu * w_mu;
    let h_ms = phi_ww * w_mu * w_s + phi_w * w_mu_s;
    let h_ss = 1.0 / (sigma * sigma) + phi_ww * w_s * w_s + phi_w * w_ss;
    let h_mx = phi_wx * w_mu;
    let h_sx = phi_wx * w_s;
    let h_xx = phi_xx;
    LoglikTerms {
        value,
        grad,
        hess: [[h_mm, h_ms, h_mx], [h_ms, h_ss, h_sx], [h_mx, h_sx, h_xx]],
        in_support: true,
    }
}

/// Return level with derivatives in θ = (µ, σ, ξ) and in `s = ln T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlDerivs {
    pub eta: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
    /// ∂²η/∂s∂θ.
    pub cross: [f64; 3],
    /// ∂η/∂s = σ T^ξ.
    pub ds: f64,
}

pub fn rl_derivs(s: f64, theta: &GevParams) -> RlDerivs {
    let GevParams { mu, sigma, xi } = *theta;
    let v = xi * s;
    let (h, h1, h2) = expm1_ratio(v);
    let eta0 = s * h;
    let eta0_x = s * s * h1;
    let eta0_xx = s * s * s * h2;
    let tpow = v.exp();
    RlDerivs {
        eta: mu + sigma * eta0,
        grad: [1.0, eta0, sigma * eta0_x],
        hess: [[0.0, 0.0, 0.0], [0.0, 0.0, eta0_x], [0.0, eta0_x, sigma * eta0_xx]],
        cross: [0.0, tpow, sigma * s * tpow],
        ds: sigma * tpow,
    }
}

/// Derivatives of the reduced return level η₀(s; ξ) = (e^{ξs} − 1)/ξ:
/// `(η₀, ∂ξ η₀, ∂²ξξ η₀, ∂s η₀, ∂²sξ η₀)`.
pub fn eta0_derivs(s: f64, xi: f64) -> (f64, f64, f64, f64, f64) {
    let v = xi * s;
    let (h, h1, h2) = expm1_ratio(v);
    let tpow = v.exp();
    (s * h, s * s * h1, s * s * s * h2, tpow, s * tpow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_logpdf(y: f64, t: &GevParams) -> f64 {
        // Direct textbook formula, valid away from ξ = 0.
        let z = 1.0 + t.xi * (y - t.mu) / t.sigma;
        -t.sigma.ln() - (1.0 + 1.0 / t.xi) * z.ln() - z.powf(-1.0 / t.xi)
    }

    #[test]
    fn logpdf_examples() {
        assert!((gev_logpdf(0.0, &GevParams::new(0.0, 1.0, 0.0)) + 1.0).abs() < 1e-15);
        assert_eq!(gev_logpdf(-10.0, &GevParams::new(0.0, 1.0, 0.5)), f64::NEG_INFINITY);
        let expected = -3.0 * 1.5f64.ln() - 1.5f64.powi(-2);
        let got = gev_logpdf(1.0, &GevParams::new(0.0, 1.0, 0.5));
        assert!((got - expected).abs() < 1e-14);
        assert!((got + 1.660839).abs() < 1e-6);
    }

    #[test]
    fn cdf_examples() {
        assert!((gev_cdf(0.0, &GevParams::new(0.0, 1.0, 0.0)) - (-1f64).exp()).abs() < 1e-15);
        assert!((gev_cdf(1.0, &GevParams::new(0.0, 1.0, 0.5)) - 0.641180).abs() < 1e-6);
        assert_eq!(gev_cdf(10.0, &GevParams::new(0.0, 1.0, -0.5)), 1.0);
        assert_eq!(gev_cdf(-10.0, &GevParams::new(0.0, 1.0, 0.5)), 0.0);
    }

    #[test]
    fn return_level_examples() {
        let any = GevParams::new(3.0, 2.0, 0.3);
        assert_eq!(return_level(0.0, &any), 3.0);
        assert!((return_level(1.0, &GevParams::new(0.0, 1.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((return_level(4f64.ln(), &GevParams::new(0.0, 1.0, 0.5)) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn endpoint_examples() {
        assert_eq!(upper_endpoint(&GevParams::new(0.0, 1.0, -0.5)), 2.0);
        assert_eq!(upper_endpoint(&GevParams::new(0.0, 1.0, 0.0)), f64::INFINITY);
        assert_eq!(upper_endpoint(&GevParams::new(3.0, 2.0, -1.0)), 5.0);
    }

    #[test]
    fn series_matches_direct_formula_away_from_zero() {
        for &xi in &[-0.4, -0.1, 0.1, 0.3, 0.8] {
            let t = GevParams::new(0.5, 2.0, xi);
            for &y in &[-0.5, 0.4, 0.5, 0.6, 1.0, 3.0] {
                let direct = naive_logpdf(y, &t);
                if direct.is_finite() {
                    assert!((gev_logpdf(y, &t) - direct).abs() < 1e-12, "xi={xi} y={y}");
                }
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &xi in &[-0.3, 0.0, 1e-6, 0.2] {
            let t = GevParams::new(1.0, 0.5, xi);
            for &p in &[0.01, 0.3, 0.5, 0.9, 0.999] {
                assert!((gev_cdf(gev_quantile(p, &t), &t) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ratio_functions_continuous_at_switch() {
        for &x in &[SERIES_SWITCH, -SERIES_SWITCH] {
            let lo = log1p_ratio(x * (1.0 - 1e-9));
            let hi = log1p_ratio(x * (1.0 + 1e-9));
            assert!((lo.0 - hi.0).abs() < 1e-10);
            assert!((lo.1 - hi.1).abs() < 1e-10);
            assert!((lo.2 - hi.2).abs() < 1e-9);
            let lo = expm1_ratio(x * (1.0 - 1e-9));
            let hi = expm1_ratio(x * (1.0 + 1e-9));
            assert!((lo.0 - hi.0).abs() < 1e-10);
            assert!((lo.1 - hi.1).abs() < 1e-10);
            assert!((lo.2 - hi.2).abs() < 1e-9);
        }
    }

    #[test]
    fn rl_gumbel_cross_terms() {
        let d = rl_derivs(2.0, &GevParams::new(0.0, 1.3, 0.0));
        assert_eq!(d.cross[0], 0.0);
        assert!((d.cross[1] - 1.0).abs() < 1e-15);
        assert_eq!(d.grad[0], 1.0);
        let d = rl_derivs(100f64.ln(), &GevParams::new(0.0, 1.0, 0.1));
        assert_eq!(d.grad[0], 1.0);
    }
}
