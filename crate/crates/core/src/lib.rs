//! Learning, execution and safety supervision of robot-guided rehabilitation
//! exercises, simulated at desk scale.

pub mod body_frame;
pub mod dmp;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod safety;
pub mod sim;
pub mod synth;
pub mod tunnel;

pub use error::{Error, Result};
