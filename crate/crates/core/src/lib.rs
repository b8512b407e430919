//! Fluid models of the `Gt/GI/N+GI` many-server queue with abandonment.
//!
//! The crate implements four fluid formulations of the same queueing system
//! and the transforms connecting them:
//!
//! * [`elapsed`] — the measure-valued reference solver tracking elapsed
//!   service and patience times (with the generalized Stieltjes path for
//!   laws without densities), producing full state trajectories;
//! * [`two_param`] — the two-parameter density view `(b, q̃, q, w, σ, α)`
//!   derived from a trajectory, its clause-by-clause checker, and the
//!   reverse construction from two-parameter data;
//! * [`residual`] — residual-time measures `(ν^ℓ, η^ℓ)` and the coupling
//!   identities bridging elapsed- and residual-time descriptions;
//! * [`zhang`] — the residual-time model driven by a virtual queue (constant
//!   arrival rate), with conversions to and from the elapsed model and
//!   feasibility certificates for the non-equivalent cases.
//!
//! Supporting modules: [`distributions`] (lifetime laws), [`measures`]
//! (grid measures), [`arrival`] (arrival-rate functions).

pub mod arrival;
pub mod distributions;
pub mod elapsed;
pub mod error;
pub mod measures;
pub mod residual;
pub mod two_param;
pub mod zhang;

mod lattice;
mod nnls;

pub use arrival::ArrivalRate;
pub use distributions::{Distribution, LifetimeMeasure, StieltjesView};
pub use error::{FluidError, Result};
pub use measures::{GridMeasure, Interval};
