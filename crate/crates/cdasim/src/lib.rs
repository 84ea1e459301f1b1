//! Simulation library for distributed antenna arrays that keep time without a
//! shared reference: two-way time transfer over the air, average-consensus
//! fusion of the pairwise measurements, staged acquisition from millisecond
//! network offsets down to picoseconds, and open-loop beamforming on top of
//! the resulting clocks.
//!
//! Everything is driven by explicit seeds; a given config and seed reproduce
//! byte-identical outputs.

pub mod beamform;
pub mod channel;
pub mod clocks;
pub mod config;
pub mod consensus;
pub mod error;
pub mod montecarlo;
pub mod pipeline;
pub mod report;
pub mod signal;
pub mod twtt;
pub mod world;

pub use error::SimError;

/// Propagation speed used for all delay/range conversions, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Convenience alias used throughout.
pub type C64 = num_complex::Complex<f64>;
