//! Pilot-aided joint-channel carrier-phase estimation for multichannel
//! (space-division multiplexed) links whose phase noise is correlated across
//! channels, together with the Monte Carlo machinery used to evaluate it.

pub mod channel;
pub mod constellation;
pub mod cpe;
pub mod grid;
pub mod metrics;
pub mod pilots;
pub mod rng;
pub mod runner;

pub use channel::{build_covariance, PhaseModel};
pub use constellation::Constellation;
pub use cpe::{fg_eks, pc_cpe, CpeOptions, CpeResult};
pub use grid::Grid;
pub use pilots::PilotSchedule;
