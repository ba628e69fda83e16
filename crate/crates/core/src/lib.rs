//! Martingale-based adversarial training of value, control and test networks
//! for Hamilton–Jacobi–Bellman type equations, semilinear parabolic equations
//! and the associated stochastic optimal control problems.
//!
//! The crate is `no_std` with `alloc`. The default `std` feature enables
//! chunk-level parallelism through rayon; results never depend on it, since
//! every reduction runs over fixed-size chunks combined in index order.
//!
//! Module map:
//!
//! * [`autodiff`]: matrix tape with input gradients, input Hessians and
//!   parameter gradients of losses that contain those input derivatives.
//! * [`networks`]: value net with terminal clamp, box-constrained control net,
//!   sine test net.
//! * [`sde`]: time grids, start sets and offline Euler–Maruyama paths.
//! * [`problems`]: benchmark presets and their reference solutions.
//! * [`martingale`]: Hamiltonian samples, trapezoid increments, the projection
//!   statistics `G` / `G̃` and the augmented loss.
//! * [`trainer`]: the HJB and parabolic min–max loops.
//! * [`evaluate`]: error metrics, rate fits and cost rollouts.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod evaluate;
pub mod martingale;
pub mod math;
pub mod networks;
mod par;
pub mod problems;
pub mod rng;
pub mod sde;
pub mod trainer;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
