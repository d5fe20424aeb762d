//! Flat-prior random-walk Metropolis sampling and interval extraction from
//! sampler iterates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LikelihoodModel;
use crate::numerics::{cholesky, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSource {
    Internal,
    File,
}

/// Sampler iterates θ[k] with their log-likelihoods ℓ(θ[k]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcTrace {
    pub iterates: Vec<Vector>,
    pub logliks: Vec<f64>,
    /// Post-burn-in acceptance rate; `None` for iterates read from a file.
    pub acceptance_rate: Option<f64>,
    pub source: TraceSource,
}

impl McmcTrace {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    /// Largest log-likelihood among the iterates and its index.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.logliks
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, l)| !l.is_nan())
            .fold(None, |acc, (i, l)| match acc {
                Some((_, b)) if b >= l => acc,
                _ => Some((i, l)),
            })
    }
}

#[derive(Debug, Clone)]
pub struct McmcOptions {
    /// Number of retained iterates K.
    pub iterations: usize,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: usize,
    pub seed: u64,
    /// Starting proposal covariance; defaults to a small diagonal.
    pub proposal_cov: Option<Matrix>,
}

impl McmcOptions {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self { iterations, thin: 1, seed, proposal_cov: None }
    }
}

const TARGET_ACCEPT: f64 = 0.234;
const BURN_IN_FRACTION: f64 = 0.2;

/// Gaussian random-walk Metropolis targeting exp(ℓ).
///
/// The first 20% of all draws are burn-in: the proposal covariance follows
/// the empirical covariance of the chain, and a global scale is tuned by
/// Robbins–Monro towards 23.4% acceptance. Both are frozen afterwards.
pub fn rw_metropolis<M: LikelihoodModel + ?Sized>(model: &M, theta0: &Vector, opts: &McmcOptions) -> Result<McmcTrace> {
    let p = model.dim();
    if opts.iterations < 1000 {
        return Err(Error::Domain(format!("at least 1000 iterates are required, got {}", opts.iterations)));
    }
    if opts.thin == 0 {
        return Err(Error::Domain("thinning interval must be at least 1".into()));
    }
    if theta0.len() != p || !model.in_domain(theta0) {
        return Err(Error::OutsideDomain("sampler starting point".into()));
    }
    let kept_draws = opts.iterations * opts.thin;
    let burn_in = ((kept_draws as f64) * BURN_IN_FRACTION / (1.0 - BURN_IN_FRACTION)).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let base_cov = match &opts.proposal_cov {
        Some(c) if c.shape() == (p, p) && cholesky(c).is_some() => c.clone(),
        Some(_) => return Err(Error::Domain("proposal covariance must be positive definite".into())),
        None => Matrix::from_diagonal(&theta0.map(|v| (0.01 * (1.0 + v.abs())).powi(2))),
    };
    let dim_scale = 2.38 * 2.38 / p as f64;
    let mut log_scale = 0.0f64;
    let mut cov = base_cov.clone();
    let mut chol_l = proposal_factor(&cov, dim_scale, log_scale).expect("base covariance is positive definite");

    // Running mean and scatter of the burn-in chain.
    let mut mean = theta0.clone();
    let mut scatter = Matrix::zeros(p, p);
    let mut count = 1.0f64;

    let mut theta = theta0.clone();
    let mut loglik = model.loglik(&theta);
    let mut iterates = Vec::with_capacity(opts.iterations);
    let mut logliks = Vec::with_capacity(opts.iterations);
    let mut accepted_after = 0usize;

    for n in 0..(burn_in + kept_draws) {
        let z = Vector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let proposal = &theta + &chol_l * z;
        let l_new = model.loglik(&proposal);
        let u: f64 = rng.random();
        let accept = l_new.is_finite() && u.ln() < l_new - loglik;
        if accept {
            theta = proposal;
            loglik = l_new;
        }
        if n < burn_in {
            let gain = 1.0 / ((n + 1) as f64).powf(0.6);
            log_scale += gain * ((accept as u8 as f64) - TARGET_ACCEPT);
            count += 1.0;
            let d = &theta - &mean;
            mean += &d / count;
            scatter += &d * (&theta - &mean).transpose();
            if (n + 1) % 20 == 0
                && count > (2 * p + 10) as f64 {
                    let emp = &scatter / (count - 1.0);
                    let ridge = Matrix::from_diagonal(&base_cov.diagonal()) * 1e-6;
                    cov = emp + ridge;
                }
            if let Some(l) = proposal_factor(&cov, dim_scale, log_scale) {
                chol_l = l;
            }
        } else {
            if accept {
                accepted_after += 1;
            }
            if (n - burn_in + 1).is_multiple_of(opts.thin) {
                iterates.push(theta.clone());
                logliks.push(loglik);
            }
        }
    }
    Ok(McmcTrace {
        iterates,
        logliks,
        acceptance_rate: Some(accepted_after as f64 / kept_draws as f64),
        source: TraceSource::Internal,
    })
}

fn proposal_factor(cov: &Matrix, dim_scale: f64, log_scale: f64) -> Option<Matrix> {
    let scaled = cov * (dim_scale * (2.0 * log_scale).exp());
    cholesky(&scaled).map(|c| c.l())
}

/// Interval extracted from iterates: the range of η over the iterates with
/// ℓ(θ[k]) ≥ max ℓ − δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcInterval {
    pub lower: f64,
    pub upper: f64,
    pub n_feasible: usize,
    pub loglik_max: f64,
}

pub fn mcmc_interval<F: Fn(&Vector) -> f64>(trace: &McmcTrace, eta: F, delta: f64) -> Result<McmcInterval> {
    let (_, lmax) = trace.best().ok_or_else(|| Error::EmptyData("iterate trace".into()))?;
    let threshold = lmax - delta;
    let mut lower = f64::INFINITY;
    let mut upper = f64::NEG_INFINITY;
    let mut n_feasible = 0;
    for (th, &l) in trace.iterates.iter().zip(&trace.logliks) {
        if l >= threshold {
            let v = eta(th);
            lower = lower.min(v);
            upper = upper.max(v);
            n_feasible += 1;
        }
    }
    Ok(McmcInterval { lower, upper, n_feasible, loglik_max: lmax })
}

/// One bin of the profile curve estimated from iterates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub eta_lo: f64,
    pub eta_hi: f64,
    pub eta_mid: f64,
    /// Largest ℓ among iterates falling in the bin; `None` for an empty bin.
    pub max_loglik: Option<f64>,
    pub count: usize,
}

/// Equal-width binning of η over its range in the trace, with the largest
/// log-likelihood in each bin.
pub fn mcmc_profile_curve<F: Fn(&Vector) -> f64>(trace: &McmcTrace, eta: F, n_bins: usize) -> Result<Vec<ProfileBin>> {
    if n_bins < 5 {
        return Err(Error::Domain(format!("at least 5 bins are required, got {n_bins}")));
    }
    if trace.is_empty() {
        return Err(Error::EmptyData("iterate trace".into()));
    }
    let values: Vec<f64> = trace.iterates.iter().map(&eta).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateRange(format!("target values span [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<ProfileBin> = (0..n_bins)
        .map(|k| {
            let a = lo + width * k as f64;
            let b = if k + 1 == n_bins { hi } else { lo + width * (k + 1) as f64 };
            ProfileBin { eta_lo: a, eta_hi: b, eta_mid: 0.5 * (a + b), max_loglik: None, count: 0 }
        })
        .collect();
    for (v, &l) in values.iter().zip(&trace.logliks) {
        let k = (((v - lo) / width) as usize).min(n_bins - 1);
        let bin = &mut bins[k];
        bin.count += 1;
        bin.max_loglik = Some(bin.max_loglik.map_or(l, |m| m.max(l)));
    }
    Ok(bins)
}

/// Write iterates as CSV with header `theta_1,…,theta_p,loglik`.
pub fn write_trace_csv(trace: &McmcTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: std::io::Write>(trace: &McmcTrace, w: &mut csv::Writer<W>) -> Result<()> {
    let p = trace.iterates.first().map_or(0, |t| t.len());
    let mut header: Vec<String> = (1..=p).map(|j| format!("theta_{j}")).collect();
    header.push("loglik".into());
    w.write_record(&header)?;
    for (th, l) in trace.iterates.iter().zip(&trace.logliks) {
        let mut rec: Vec<String> = th.iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{l:?}"));
        w.write_record(&rec)?;
    }
    Ok(())
}

/// Read iterates written by [`write_trace_csv`] or by an external sampler.
pub fn read_trace_csv(path: &Path) -> Result<McmcTrace> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 2 || &header[n - 1] != "loglik" || (0..n - 1).any(|j| header[j] != format!("theta_{}", j + 1)) {
        return Err(Error::Schema("iterate file needs columns theta_1,…,theta_p,loglik".into()));
    }
    let mut iterates = Vec::new();
    let mut logliks = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            let cell = rec.get(j).unwrap_or("").trim();
            match cell {
                "-inf" | "-Inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
                _ => cell.parse::<f64>().map_err(|_| Error::Schema(format!("row {}: cannot parse {cell:?}", line + 2))),
            }
        };
        let th = (0..n - 1).map(&parse).collect::<Result<Vec<f64>>>()?;
        iterates.push(Vector::from_vec(th));
        logliks.push(parse(n - 1)?);
    }
    if iterates.is_empty() {
        return Err(Error::EmptyData(path.display().to_string()));
    }
    Ok(McmcTrace { iterates, logliks, acceptance_rate: None, source: TraceSource::File })
}

/// Replace stored log-likelihoods by the model's values.
pub fn recompute_logliks<M: LikelihoodModel + ?Sized>(trace: &mut McmcTrace, model: &M) -> Result<()> {
    if trace.iterates.iter().any(|t| t.len() != model.dim()) {
        return Err(Error::Dimension(format!("iterates do not have the model's {} coordinates", model.dim())));
    }
    trace.logliks = trace.iterates.iter().map(|t| model.loglik(t)).collect();
    Ok(())
}
