//! Multi-user MIMO downlink precoding: WMMSE solvers, the MIMO to MISO
//! transformation with closed-form precoder recovery, a small learned feature
//! predictor, a multipath channel simulator and an experiment harness.

pub mod channel;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod neural;
pub mod rng;
pub mod transform;
pub mod wmmse;

pub use error::{Error, Result};
