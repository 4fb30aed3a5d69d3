//! Restart-based protection for safety-critical controllers.

pub mod anomaly;
pub mod availability;
pub mod controller;
pub mod error;
pub mod plant;
pub mod policy;
pub mod presets;
pub mod reach;
pub mod risk;
pub mod rot;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
