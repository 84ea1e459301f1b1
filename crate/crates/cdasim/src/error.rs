//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("waveform does not satisfy Nyquist: sample_rate {sample_rate_hz} Hz, bandwidth {bandwidth_hz} Hz")]
    Nyquist {
        sample_rate_hz: f64,
        bandwidth_hz: f64,
    },

    #[error("sync graph is not connected")]
    DisconnectedGraph,

    #[error("node {0} unreachable during coarse alignment")]
    UnreachableNode(usize),

    #[error("pulse from node {tx} not detected at node {rx} (peak SNR {snr_db:.1} dB below threshold)")]
    LostExchange { tx: usize, rx: usize, snr_db: f64 },

    #[error("peak detection failed: {0}")]
    PeakDetection(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error("refinement step {step}: residual offset {residual_s:.3e} s exceeds next capture tolerance {tolerance_s:.3e} s")]
    RefinementDiverged {
        step: usize,
        residual_s: f64,
        tolerance_s: f64,
    },
}
