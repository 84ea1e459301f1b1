//! Free-space propagation between nodes: geometric delay, optional static
//! hardware delay per link, AWGN at a configured receive SNR, and an optional
//! single specular echo.
//!
//! Carrier phase is tracked analytically by the callers (the simulation is
//! complex baseband); this module only handles envelopes and delays.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::signal::{add_awgn, awgn_sigma_for_snr, delay_signal, mean_power, SampledSignal};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    /// SNR at the receiver input, referenced to the mean power of the
    /// transmitted block, dB. Infinite disables noise.
    pub snr_db: f64,
    /// Forward and reverse delays identical within a sync epoch. The sync
    /// math relies on this; it is modeled (and asserted) rather than broken.
    pub reciprocal: bool,
    /// Static hardware/group delay per direction, seconds.
    pub extra_delay: f64,
    /// Single specular echo: (delay after the direct path in seconds,
    /// amplitude relative to the direct path). Off by default.
    pub echo: Option<(f64, f64)>,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            snr_db: 20.0,
            reciprocal: true,
            extra_delay: 0.0,
            echo: None,
        }
    }
}

impl LinkModel {
    pub fn noiseless() -> Self {
        LinkModel {
            snr_db: f64::INFINITY,
            ..LinkModel::default()
        }
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// One-way delay over the link. Symmetric in its position arguments down to
/// the bit, which is what makes two-way exchanges cancel exactly.
pub fn propagation_delay(tx_pos: [f64; 3], rx_pos: [f64; 3], link: &LinkModel) -> f64 {
    distance(tx_pos, rx_pos) / SPEED_OF_LIGHT + link.extra_delay
}

/// Delays the signal by the link's propagation delay (fractional-sample
/// accurate) and adds receiver noise. The output stays on the transmit
/// sample grid with unchanged `start_time`; the delay lives in the sample
/// content, so downstream windowing sees the waveform arrive late.
pub fn propagate(
    signal: &SampledSignal,
    tx_pos: [f64; 3],
    rx_pos: [f64; 3],
    link: &LinkModel,
    rng: &mut impl Rng,
) -> SampledSignal {
    let tau = propagation_delay(tx_pos, rx_pos, link);
    let delay_samples = tau * signal.sample_rate;
    let mut out = if delay_samples == 0.0 && link.echo.is_none() {
        signal.clone()
    } else {
        let mut direct = delay_signal(signal, delay_samples);
        if let Some((echo_delay, echo_amp)) = link.echo {
            let echoed = delay_signal(signal, (tau + echo_delay) * signal.sample_rate);
            for (d, e) in direct.samples.iter_mut().zip(echoed.samples.iter()) {
                *d += e * echo_amp;
            }
        }
        direct
    };
    if link.snr_db.is_finite() {
        let sigma = awgn_sigma_for_snr(link.snr_db, mean_power(&signal.samples));
        add_awgn(&mut out.samples, sigma, rng);
    }
    out
}
