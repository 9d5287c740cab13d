//! Finite-size key-rate analysis for sending-or-not-sending twin-field QKD
//! with bounded source intensity errors.

pub mod bounds;
pub mod channel;
pub mod decoy;
pub mod error;
pub mod experiment;
pub mod keyrate;
pub mod montecarlo;
pub mod numeric;
pub mod optimize;
pub mod protocol;

pub use error::{Error, Result};
