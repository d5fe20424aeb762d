//! Profile-likelihood inference by constrained optimisation and ODE
//! path-following.
//!
//! The crate computes confidence intervals for scalar functions of a model
//! parameter, confidence bands for functions depending on an extra variable
//! (GEV return levels against the return period), and two-parameter profile
//! contours. Every bound is characterised as the solution of
//!
//! ```text
//! maximise / minimise  η(θ)   subject to   ℓ(θ) = ℓmax − δ
//! ```
//!
//! and is obtained either by an augmented-Lagrangian solver
//! ([`optimizer::profile_bound`]), by integrating the differentiated KKT
//! conditions along the likelihood contour ([`tracers`]), by extracting
//! extremes from sampler iterates ([`mcmc`]), or by the classical nested
//! optimisation and root search ([`oracle`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod gev;
pub mod mcmc;
pub mod models;
pub mod numerics;
pub mod odesolve;
pub mod optimizer;
pub mod oracle;
pub mod target;
pub mod tracers;

pub use error::{Error, Result};
pub use models::LikelihoodModel;
pub use numerics::{Matrix, Vector};
pub use optimizer::{fit_mle, profile_bound, MleFit, ProfileBound, Side};
pub use target::TargetFunction;
