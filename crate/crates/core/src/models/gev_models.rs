use serde::{Deserialize, Serialize};

use super::LikelihoodModel;
use crate::error::{Error, Result};
use crate::gev::{loglik_terms, GevParams};
use crate::numerics::{check_full_column_rank, solve_least_squares, Matrix, Vector};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Moment-based starting values `(µ, σ)` for a GEV sample.
fn moment_start(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = (6.0 * var).sqrt() / std::f64::consts::PI;
    let sigma = if sigma > 0.0 { sigma } else { 1e-3 * (1.0 + mean.abs()) };
    (mean - EULER_GAMMA * sigma, sigma)
}

/// Independent GEV observations, θ = (µ, σ, ξ).
#[derive(Debug, Clone)]
pub struct IidGev {
    sample: Vec<f64>,
}

pub fn build_iid_gev(sample: &[f64]) -> Result<IidGev> {
    if sample.len() < 5 {
        return Err(Error::InsufficientData { needed: 5, got: sample.len() });
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("sample contains non-finite values".into()));
    }
    Ok(IidGev { sample: sample.to_vec() })
}

impl IidGev {
    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    fn params(theta: &Vector) -> GevParams {
        GevParams::new(theta[0], theta[1], theta[2])
    }

    fn admissible(theta: &Vector) -> bool {
        theta.len() == 3 && theta.iter().all(|v| v.is_finite()) && theta[1] > 0.0 && theta[2] > -1.0
    }
}

impl LikelihoodModel for IidGev {
    fn dim(&self) -> usize {
        3
    }

    fn names(&self) -> Vec<String> {
        vec!["mu".into(), "sigma".into(), "xi".into()]
    }

    fn loglik(&self, theta: &Vector) -> f64 {
        if !Self::admissible(theta) {
            return f64::NEG_INFINITY;
        }
        let par = Self::params(theta);
        let mut total = 0.0;
        for &y in &self.sample {
            let t = loglik_terms(y, &par);
            if !t.in_support {
                return f64::NEG_INFINITY;
            }
            total += t.value;
        }
        total
    }

    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector) {
        let (v, g, _) = self.loglik_hess(theta);
        (v, g)
    }

    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix) {
        let mut g = Vector::zeros(3);
        let mut h = Matrix::zeros(3, 3);
        if !Self::admissible(theta) {
            return (f64::NEG_INFINITY, g, h);
        }
        let par = Self::params(theta);
        let mut total = 0.0;
        for &y in &self.sample {
            let t = loglik_terms(y, &par);
            if !t.in_support {
                return (f64::NEG_INFINITY, Vector::zeros(3), Matrix::zeros(3, 3));
            }
            total += t.value;
            for i in 0..3 {
                g[i] += t.grad[i];
                for j in 0..3 {
                    h[(i, j)] += t.hess[i][j];
                }
            }
        }
        (total, g, h)
    }

    fn initial_guess(&self) -> Vector {
        let (mu, sigma) = moment_start(&self.sample);
        Vector::from_vec(vec![mu, sigma, 0.0])
    }

    fn shape_coordinates(&self) -> Vec<usize> {
        vec![2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScaleLink {
    #[default]
    Log,
    Identity,
}

impl ScaleLink {
    /// σ with its first and second derivatives w.r.t. the linear predictor.
    pub fn apply(self, eta: f64) -> (f64, f64, f64) {
        match self {
            ScaleLink::Log => {
                let s = eta.exp();
                (s, s, s)
            }
            ScaleLink::Identity => (eta, 1.0, 0.0),
        }
    }
}

/// Design of a GEV regression with linear predictors for (µ, σ or log σ, ξ).
#[derive(Debug, Clone)]
pub struct GevRegressionSpec {
    pub design_mu: Matrix,
    pub design_sigma: Matrix,
    pub design_xi: Matrix,
    pub responses: Vector,
    pub scale_link: ScaleLink,
    /// Centre and scale the non-intercept design columns internally.
    pub standardize: bool,
    pub names_mu: Vec<String>,
    pub names_sigma: Vec<String>,
    pub names_xi: Vec<String>,
}

impl GevRegressionSpec {
    /// Spec with generic column names and default options.
    pub fn new(design_mu: Matrix, design_sigma: Matrix, design_xi: Matrix, responses: Vector) -> Self {
        let names = |m: &Matrix| (0..m.ncols()).map(|j| format!("x{j}")).collect::<Vec<_>>();
        Self {
            names_mu: names(&design_mu),
            names_sigma: names(&design_sigma),
            names_xi: names(&design_xi),
            design_mu,
            design_sigma,
            design_xi,
            responses,
            scale_link: ScaleLink::default(),
            standardize: true,
        }
    }
}

/// Column transformation applied to one design block.
#[derive(Debug, Clone)]
struct BlockTransform {
    center: Vec<f64>,
    scale: Vec<f64>,
    intercept: Option<usize>,
}

impl BlockTransform {
    fn identity(ncols: usize) -> Self {
        Self { center: vec![0.0; ncols], scale: vec![1.0; ncols], intercept: None }
    }

    fn fit(x: &Matrix) -> Self {
        let n = x.nrows() as f64;
        let intercept = (0..x.ncols()).find(|&j| x.column(j).iter().all(|&v| v == 1.0));
        let mut center = vec![0.0; x.ncols()];
        let mut scale = vec![1.0; x.ncols()];
        for j in 0..x.ncols() {
            if Some(j) == intercept {
                continue;
            }
            let col = x.column(j);
            if intercept.is_some() {
                let m = col.sum() / n;
                let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    center[j] = m;
                    scale[j] = sd;
                }
            } else {
                let rms = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
                if rms > 0.0 {
                    scale[j] = rms;
                }
            }
        }
        Self { center, scale, intercept }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for j in 0..x.ncols() {
            if Some(j) == self.intercept {
                continue;
            }
            for i in 0..x.nrows() {
                out[(i, j)] = (x[(i, j)] - self.center[j]) / self.scale[j];
            }
        }
        out
    }

    fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| if Some(j) == self.intercept { v } else { (v - self.center[j]) / self.scale[j] })
            .collect()
    }

    /// Block of the map from internal to original coefficients.
    fn coef_map(&self) -> Matrix {
        let k = self.scale.len();
        let mut m = Matrix::zeros(k, k);
        for j in 0..k {
            if Some(j) == self.intercept {
                m[(j, j)] = 1.0;
                continue;
            }
            m[(j, j)] = 1.0 / self.scale[j];
            if let Some(i0) = self.intercept {
                m[(i0, j)] = -self.center[j] / self.scale[j];
            }
        }
        m
    }
}

/// GEV regression model. The parameter vector is `[θµ; θσ; θξ]` in the
/// internal (possibly standardised) coordinates; [`GevRegression::to_original`]
/// maps it back to coefficients of the user's design columns.
#[derive(Debug, Clone)]
pub struct GevRegression {
    x_mu: Matrix,
    x_sigma: Matrix,
    x_xi: Matrix,
    y: Vector,
    link: ScaleLink,
    transforms: [BlockTransform; 3],
    names: Vec<String>,
    coef_map: Matrix,
}

pub fn build_gev_regression(spec: &GevRegressionSpec) -> Result<GevRegression> {
    let n = spec.responses.len();
    for (label, m) in [("mu", &spec.design_mu), ("sigma", &spec.design_sigma), ("xi", &spec.design_xi)] {
        if m.nrows() != n {
            return Err(Error::Dimension(format!(
                "{label} design has {} rows, expected {n}",
                m.nrows()
            )));
        }
        if m.ncols() > 0 {
            check_full_column_rank(m)?;
        }
    }
    if spec.design_mu.ncols() == 0 || spec.design_sigma.ncols() == 0 || spec.design_xi.ncols() == 0 {
        return Err(Error::Dimension("each GEV parameter needs at least one design column".into()));
    }
    let p = spec.design_mu.ncols() + spec.design_sigma.ncols() + spec.design_xi.ncols();
    if n < p.max(5) {
        return Err(Error::InsufficientData { needed: p.max(5), got: n });
    }
    let transforms = if spec.standardize {
        [
            BlockTransform::fit(&spec.design_mu),
            BlockTransform::fit(&spec.design_sigma),
            BlockTransform::fit(&spec.design_xi),
        ]
    } else {
        [
            BlockTransform::identity(spec.design_mu.ncols()),
            BlockTransform::identity(spec.design_sigma.ncols()),
            BlockTransform::identity(spec.design_xi.ncols()),
        ]
    };
    let x_mu = transforms[0].apply(&spec.design_mu);
    let x_sigma = transforms[1].apply(&spec.design_sigma);
    let x_xi = transforms[2].apply(&spec.design_xi);

    let mut coef_map = Matrix::zeros(p, p);
    let mut offset = 0;
    for t in &transforms {
        let b = t.coef_map();
        let k = b.nrows();
        coef_map.view_mut((offset, offset), (k, k)).copy_from(&b);
        offset += k;
    }
    let sigma_prefix = match spec.scale_link {
        ScaleLink::Log => "logsigma",
        ScaleLink::Identity => "sigma",
    };
    let mut names = Vec::with_capacity(p);
    names.extend(spec.names_mu.iter().map(|c| format!("mu.{c}")));
    names.extend(spec.names_sigma.iter().map(|c| format!("{sigma_prefix}.{c}")));
    names.extend(spec.names_xi.iter().map(|c| format!("xi.{c}")));
    if names.len() != p {
        return Err(Error::Dimension("column names do not match the design widths".into()));
    }
    Ok(GevRegression {
        x_mu,
        x_sigma,
        x_xi,
        y: spec.responses.clone(),
        link: spec.scale_link,
        transforms,
        names,
        coef_map,
    })
}

impl GevRegression {
    pub fn block_sizes(&self) -> (usize, usize, usize) {
        (self.x_mu.ncols(), self.x_sigma.ncols(), self.x_xi.ncols())
    }

    pub fn scale_link(&self) -> ScaleLink {
        self.link
    }

    /// Linear map from internal to original coefficients.
    pub fn coef_map(&self) -> &Matrix {
        &self.coef_map
    }

    pub fn to_original(&self, theta: &Vector) -> Vector {
        &self.coef_map * theta
    }

    pub fn from_original(&self, coefs: &Vector) -> Result<Vector> {
        crate::numerics::solve_square(&self.coef_map, coefs)
    }

    /// Embed original-unit covariate rows for the three predictors into
    /// length-p vectors `(a_µ, a_σ, a_ξ)` such that each predictor equals
    /// `aᵀθ` in internal coordinates.
    pub fn predictor_vectors(&self, row_mu: &[f64], row_sigma: &[f64], row_xi: &[f64]) -> Result<(Vector, Vector, Vector)> {
        let (pm, ps, px) = self.block_sizes();
        if row_mu.len() != pm || row_sigma.len() != ps || row_xi.len() != px {
            return Err(Error::Dimension("covariate row widths do not match the design".into()));
        }
        let p = pm + ps + px;
        let mut a = Vector::zeros(p);
        let mut b = Vector::zeros(p);
        let mut c = Vector::zeros(p);
        for (j, v) in self.transforms[0].apply_row(row_mu).into_iter().enumerate() {
            a[j] = v;
        }
        for (j, v) in self.transforms[1].apply_row(row_sigma).into_iter().enumerate() {
            b[pm + j] = v;
        }
        for (j, v) in self.transforms[2].apply_row(row_xi).into_iter().enumerate() {
            c[pm + ps + j] = v;
        }
        Ok((a, b, c))
    }

    /// Per-observation GEV parameters at internal θ.
    pub fn observation_params(&self, theta: &Vector) -> Vec<GevParams> {
        let (pm, ps, px) = self.block_sizes();
        let tm = theta.rows(0, pm);
        let ts = theta.rows(pm, ps);
        let tx = theta.rows(pm + ps, px);
        let mu = &self.x_mu * tm;
        let ls = &self.x_sigma * ts;
        let xi = &self.x_xi * tx;
        (0..self.y.len())
            .map(|i| GevParams::new(mu[i], self.link.apply(ls[i]).0, xi[i]))
            .collect()
    }

    fn evaluate(&self, theta: &Vector, order: u8) -> (f64, Vector, Matrix) {
        let p = self.dim();
        let fail = || (f64::NEG_INFINITY, Vector::zeros(p), Matrix::zeros(p, p));
        if theta.len() != p || theta.iter().any(|v| !v.is_finite()) {
            return fail();
        }
        let (pm, ps, px) = self.block_sizes();
        let tm = theta.rows(0, pm);
        let ts = theta.rows(pm, ps);
        let tx = theta.rows(pm + ps, px);
        let mu = &self.x_mu * tm;
        let lin_s = &self.x_sigma * ts;
        let xi = &self.x_xi * tx;
        let mut total = 0.0;
        let mut g = Vector::zeros(p);
        let mut h = Matrix::zeros(p, p);
        let mut rows: [Vec<f64>; 3] = [vec![0.0; p], vec![0.0; p], vec![0.0; p]];
        for i in 0..self.y.len() {
            let (sigma, ds, d2s) = self.link.apply(lin_s[i]);
            if !(sigma > 0.0) || !(xi[i] > -1.0) {
                return fail();
            }
            let t = loglik_terms(self.y[i], &GevParams::new(mu[i], sigma, xi[i]));
            if !t.in_support {
                return fail();
            }
            total += t.value;
            if order == 0 {
                continue;
            }
            // Derivatives w.r.t. (µ, linear scale predictor, ξ).
            let gl = [t.grad[0], t.grad[1] * ds, t.grad[2]];
            for r in rows.iter_mut() {
                r.iter_mut().for_each(|v| *v = 0.0);
            }
            for (j, v) in rows[0][..pm].iter_mut().enumerate() {
                *v = self.x_mu[(i, j)];
            }
            for (j, v) in rows[1][pm..pm + ps].iter_mut().enumerate() {
                *v = self.x_sigma[(i, j)];
            }
            for (j, v) in rows[2][pm + ps..pm + ps + px].iter_mut().enumerate() {
                *v = self.x_xi[(i, j)];
            }
            for a in 0..3 {
                for (k, &x) in rows[a].iter().enumerate() {
                    if x != 0.0 {
                        g[k] += gl[a] * x;
                    }
                }
            }
            if order < 2 {
                continue;
            }
            let hs = t.hess;
            let hl = [
                [hs[0][0], hs[0][1] * ds, hs[0][2]],
                [hs[1][0] * ds, hs[1][1] * ds * ds + t.grad[1] * d2s, hs[1][2] * ds],
                [hs[2][0], hs[2][1] * ds, hs[2][2]],
            ];
            for a in 0..3 {
                for b in 0..3 {
                    let coef = hl[a][b];
                    if coef == 0.0 {
                        continue;
                    }
                    for (k, &xa) in rows[a].iter().enumerate() {
                        if xa == 0.0 {
                            continue;
                        }
                        for (l, &xb) in rows[b].iter().enumerate() {
                            if xb != 0.0 {
                                h[(k, l)] += coef * xa * xb;
                            }
                        }
                    }
                }
            }
        }
        (total, g, h)
    }
}

impl LikelihoodModel for GevRegression {
    fn dim(&self) -> usize {
        self.x_mu.ncols() + self.x_sigma.ncols() + self.x_xi.ncols()
    }

    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn loglik(&self, theta: &Vector) -> f64 {
        self.evaluate(theta, 0).0
    }

    fn loglik_grad(&self, theta: &Vector) -> (f64, Vector) {
        let (v, g, _) = self.evaluate(theta, 1);
        (v, g)
    }

    fn loglik_hess(&self, theta: &Vector) -> (f64, Vector, Matrix) {
        self.evaluate(theta, 2)
    }

    fn initial_guess(&self) -> Vector {
        let (mu0, sigma0) = moment_start(self.y.as_slice());
        let lin_s0 = match self.link {
            ScaleLink::Log => sigma0.ln(),
            ScaleLink::Identity => sigma0,
        };
        let fit_const = |x: &Matrix, c: f64| -> Vector {
            let target = Vector::from_element(x.nrows(), c);
            solve_least_squares(x, &target).unwrap_or_else(|_| Vector::zeros(x.ncols()))
        };
        let tm = fit_const(&self.x_mu, mu0);
        let ts = fit_const(&self.x_sigma, lin_s0);
        let tx = Vector::zeros(self.x_xi.ncols());
        let mut theta = Vector::zeros(self.dim());
        theta.rows_mut(0, tm.len()).copy_from(&tm);
        theta.rows_mut(tm.len(), ts.len()).copy_from(&ts);
        theta.rows_mut(tm.len() + ts.len(), tx.len()).copy_from(&tx);
        theta
    }

    fn shape_coordinates(&self) -> Vec<usize> {
        let (pm, ps, px) = self.block_sizes();
        match self.transforms[2].intercept {
            Some(j) if px == 1 => vec![pm + ps + j],
            _ => Vec::new(),
        }
    }
}
