//! Simulation and joint optimization of a wireless closed-loop control system.
//!
//! The sensor quantizes the plant state and sends it over an uplink queue; the
//! controller predicts the next `N` states, ships a command sequence over the
//! downlink queue, and the actuator applies the entry matching the realized
//! round-trip delay. Packets whose delay exceeds `D_c,max` are dropped.
//!
//! Modules, bottom-up:
//!
//! - [`config`]: scenario parameters, the AGV plant, and the JSON scenario file.
//! - [`channel`]: effective capacity, tandem-queue delay and loss, arrival-rate limit.
//! - [`plant`]: the lossy state update and the expected closed-loop matrix.
//! - [`sensing`]: uniform quantizer, state predictor, estimation-error bound.
//! - [`stability`]: Lyapunov value and the convergence-rate inequality.
//! - [`optimizer`]: Riccati terminal weight, MPC cost, feasibility, differential evolution.
//! - [`simulator`]: Monte-Carlo trials, parameter sweeps, CSV/JSON output.

pub mod channel;
pub mod config;
pub mod error;
pub mod optimizer;
pub mod plant;
pub mod quadrature;
pub mod rng;
pub mod sensing;
pub mod serde_la;
pub mod simulator;
pub mod stability;

pub use config::{DeConfig, PlantModel, Scenario, SystemParams};
pub use error::{Error, Result};
pub use optimizer::{Candidate, SolveReport};

/// Plant state, one entry per state component.
pub type StateVec = nalgebra::DVector<f64>;
/// Row gain for the linear law `u = K·x`.
pub type GainVec = nalgebra::RowDVector<f64>;
/// Dense matrix type for the system and weight matrices.
pub type Matrix = nalgebra::DMatrix<f64>;
