//! Minimal neural-network machinery: parameter sets, layer primitives with
//! manual backprop, and the Adam optimizer.

mod adam;
pub mod ops;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use params::ParamSet;

/// Standard deviation for fan-in scaled initialisation.
pub(crate) fn fan_in_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}
