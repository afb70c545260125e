//! Leakage-aware randomized benchmarking: qutrit-embedded channel algebra,
//! Clifford twirls, RB simulation, decay fitting and dataset reanalysis.

pub mod analysis;
pub mod channel;
pub mod cli;
pub mod clifford;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod io;
pub mod noise;
pub mod simulate;
pub mod space;
#[doc(hidden)]
pub mod testutil;
pub mod twirl;

pub use error::{Error, Result};
