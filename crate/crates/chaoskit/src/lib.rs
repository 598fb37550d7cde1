//! Simulation and verification laboratory for mean-field interacting particle
//! systems with interacting diffusion coefficients and partially dissipative
//! drifts.
//!
//! The crate is organized around six subsystems:
//!
//! * [`model`] — coefficient families, the piecewise dissipativity profile and
//!   a numerical audit of the structural assumptions on sampled points.
//! * [`constants`] — the explicit contraction quantities (the integral `delta`,
//!   the distance-equivalence factor `c_E`, the rate `lambda_0`, the series
//!   `G(a,t)` and the threshold `kappa_0`) together with the hypothesis gates.
//! * [`sde`] — Euler–Maruyama engines for the N-particle system, the
//!   mean-field limit, the decoupled SDE under a frozen measure flow and the
//!   reflection/synchronous couplings.
//! * [`transport`] — exact empirical Wasserstein distances under the
//!   l1-sum ground cost, with a fast sorted 1D path and a dual lower bound.
//! * [`analysis`] — generalized Gronwall bound, quantitative LLN gap,
//!   fluctuation diagnostics, moment curves, the Duhamel residual test and
//!   rate fitting.
//! * [`harness`] — experiment orchestration, configuration, persistence and
//!   the pieces behind the `chaoskit` command line tool.

pub mod analysis;
pub mod constants;
pub mod error;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod sde;
pub mod transport;

pub use error::{ChaosError, Result};
