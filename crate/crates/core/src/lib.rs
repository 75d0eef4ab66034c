//! Hierarchical latent Gaussian generative models trained with predictive
//! coding (PC) and Laplace Monte Carlo (LMC / ALMC) objectives.
//!
//! The library is organized around a small set of modules:
//!
//! - [`numerics`]: dense symmetric linear algebra, Cholesky factorization
//!   with a relative pivot test, Jacobi eigenvalues, multivariate normal
//!   sampling from a precision factor, finite-difference oracles, and
//!   deterministic splittable random streams.
//! - [`model`]: the generative model itself: layer predictions, the full
//!   Gaussian log joint (normalization constants included), analytic
//!   gradients with respect to latents and parameters, per-layer Jacobians.
//! - [`hessian`]: the block-diagonal PSD Hessian approximation and the dense
//!   full Hessian with its identity fallback for non-PSD cases.
//! - [`inference`]: MAP inference over latents by gradient ascent with a
//!   per-sample adaptive step size, plus the feedforward amortizer that
//!   initializes it.
//! - [`objectives`]: the PC, LMC, ALMC, and combined training objectives,
//!   SGD with momentum, and the training loop.
//! - [`data`]: IDX ingestion, uniform dequantization, synthetic benchmark
//!   generation with exact marginals, deterministic batching.
//! - [`evaluate`]: Laplace importance-sampled marginal likelihoods, bits per
//!   dimension, curvature tracking, ancestral sampling, interpolations.
//! - [`checkpoint`]: bit-exact binary serialization of models and amortizers.

pub mod checkpoint;
pub mod data;
pub mod evaluate;
pub mod hessian;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objectives;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A computation produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A matrix expected to be positive semi-definite failed factorization.
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    /// Malformed input file (IDX, tensor container, checkpoint).
    #[error("format error: {0}")]
    Format(String),
    /// Invalid configuration or argument combination.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Evaluation could not produce a finite estimate.
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
