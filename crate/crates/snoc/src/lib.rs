//! Certified stochastic nonlinear control: train distributions of
//! controllers on sampled disturbances, then bound their true closed-loop
//! cost with high probability.
//!
//! The pipeline, end to end:
//!
//! 1. [`dynamics`] — system models (a scalar linear benchmark and planar
//!    point-mass robots), disturbance datasets, and closed-loop rollouts,
//!    all generic over a [`Scalar`](autodiff::Scalar) so the exact same
//!    code path is simulated and differentiated.
//! 2. [`controllers`] — policy architectures: clamped affine feedback and
//!    recurrent equilibrium networks that are contractive by construction
//!    for every parameter value, with an internal disturbance
//!    reconstruction so they see the noise rather than the raw state.
//! 3. [`cost`] — stage costs, the saturating transform that bounds them
//!    (a prerequisite of the certificates), and empirical cost averages
//!    over datasets.
//! 4. [`pacbayes`] — priors, Gibbs posteriors, and high-probability
//!    generalization bounds on the true expected cost, with exact-grid
//!    and Monte-Carlo partition estimates.
//! 5. [`svgd`] — Stein variational particle training of the Gibbs
//!    posterior, driven by gradients recorded through entire rollouts.
//! 6. [`experiment`] — scenario definitions, training/certification/
//!    evaluation commands, and their on-disk artifacts.
//!
//! Every stochastic step derives its randomness from a master seed and a
//! purpose string ([`rng`]), so all artifacts are exactly reproducible.

pub mod autodiff;
pub mod controllers;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod pacbayes;
pub mod rng;
pub mod svgd;

pub use error::{Error, Result};
