//! Matrix-free kernel-regularized FIR estimation for linear time-invariant systems.
//!
//! The crate estimates the finite impulse response of a causal SISO system from
//! an input/output record `(u, y)` by empirical-Bayes hyperparameter selection.
//! The criterion being minimized is the profile marginal log-likelihood
//!
//! ```text
//! psi(lambda, beta) = log( y' (lambda I + A)^{-1} y ) + Trace(log(lambda I + A)) / m,
//! ```
//!
//! where `A = Phi K(beta) Phi'` is accessed only through matrix-vector products.
//! Three interchangeable evaluators are provided:
//!
//! * **direct** — economy SVD of `Phi L`; exact, `O(m n^2)` preprocessing,
//!   `O(n)` per lambda afterwards ([`pml::pml_direct_precompute`]);
//! * **indirect** — LSQR with a randomized Nystrom preconditioner plus a
//!   stochastic trace estimate; scalable but recomputed from scratch for every
//!   lambda ([`pml::pml_indirect_eval`]);
//! * **krylov** — one block Lanczos factorization of an augmented Krylov
//!   subspace serves every lambda at `O(r)` marginal cost
//!   ([`pml::pml_krylov_precompute`]), optionally refined by a stochastic
//!   residual trace correction ([`pml::residual_trace_precompute`]).
//!
//! [`optimize::minimize_pml`] exploits the precompute-once contract for budgeted
//! hyperparameter search, [`estimate::posterior_mean`] recovers the FIR estimate,
//! [`datagen`] generates the synthetic benchmark systems, and [`verify`] houses
//! the dense reference implementations and executable theory checks.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod estimate;
pub mod lanczos;
pub mod linops;
pub mod optimize;
pub mod pml;
pub mod verify;

pub mod sample;

pub use error::{Error, Result};
