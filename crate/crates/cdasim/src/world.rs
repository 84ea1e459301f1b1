//! Shared simulation state: node positions and clocks, link models, the run
//! RNG, and the one-way transmit/capture primitive every over-the-air
//! measurement is built from.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::channel::{propagation_delay, LinkModel};
use crate::clocks::{ClockNoiseConfig, ClockState};
use crate::error::SimError;
use crate::signal::{
    add_awgn, awgn_sigma_for_snr, matched_filter, mean_power, place_pulse, refine_peak,
    BiasTable, SampledSignal, ToaEstimate,
};
use crate::C64;

#[derive(Debug, Clone)]
pub struct Node {
    pub pos: [f64; 3],
    pub clock: ClockState,
}

/// One physical transmission, global seconds; used to audit that the TDMA
/// scheduler never lets two transmissions overlap on the channel.
#[derive(Debug, Clone, Copy)]
pub struct TxEvent {
    pub node: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub nodes: Vec<Node>,
    pub default_link: LinkModel,
    pub link_overrides: HashMap<(usize, usize), LinkModel>,
    pub rng: ChaCha8Rng,
    /// Correlator peaks below this SNR count as lost exchanges.
    pub detection_threshold_db: f64,
    pub tx_log: Vec<TxEvent>,
}

pub const DEFAULT_DETECTION_THRESHOLD_DB: f64 = 9.0;

/// Samples of guard zone kept between the capture-window edges and any
/// expected pulse position; keeps band-limited placement artifacts away from
/// the correlation peak.
pub const WINDOW_GUARD_SAMPLES: usize = 512;

impl World {
    pub fn new(
        positions: &[[f64; 3]],
        clock_cfg: &ClockNoiseConfig,
        link: LinkModel,
        rng: ChaCha8Rng,
    ) -> Self {
        let mut rng = rng;
        let nodes = positions
            .iter()
            .map(|&pos| Node {
                pos,
                clock: ClockState::init(clock_cfg, &mut rng),
            })
            .collect();
        World {
            nodes,
            default_link: link,
            link_overrides: HashMap::new(),
            rng,
            detection_threshold_db: DEFAULT_DETECTION_THRESHOLD_DB,
            tx_log: Vec::new(),
        }
    }

    /// Ideal-clock world for oracles and calibration-style tests.
    pub fn noiseless(positions: &[[f64; 3]], rng: ChaCha8Rng) -> Self {
        let cfg = ClockNoiseConfig {
            random_walk_sigma: 0.0,
            jitter_sigma: 0.0,
            initial_offset_range: 0.0,
            residual_freq_offset_sigma: 0.0,
        };
        World::new(positions, &cfg, LinkModel::noiseless(), rng)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn link(&self, a: usize, b: usize) -> &LinkModel {
        let key = (a.min(b), a.max(b));
        self.link_overrides.get(&key).unwrap_or(&self.default_link)
    }

    pub fn set_link(&mut self, a: usize, b: usize, link: LinkModel) {
        self.link_overrides.insert((a.min(b), a.max(b)), link);
    }

    /// True pairwise clock offset (jitter-free) at global time t.
    pub fn true_offset(&self, n: usize, t: f64) -> f64 {
        self.nodes[n].clock.offset_from_global(t)
    }

    /// Physical emission instant of a transmission whose first sample is
    /// scheduled at `tx_local` on the transmitter's clock. One jitter draw
    /// per transmission: every receiver of this slot sees the same emission.
    pub fn emit(&mut self, tx: usize, tx_local: f64, pulse_duration: f64) -> f64 {
        let t_emit = self.nodes[tx].clock.global_event_time(tx_local, &mut self.rng);
        self.tx_log.push(TxEvent {
            node: tx,
            start: t_emit,
            end: t_emit + pulse_duration,
        });
        t_emit
    }

    /// Reception of an emission by `rx`: propagation, capture-window
    /// alignment to the receiver's clock, noise, matched filtering, and
    /// peak refinement. The returned ToA is on `rx`'s clock.
    ///
    /// Physical capture instants pick up the receiver clock's jitter; the
    /// recorded timestamps are the scheduled/measured local values, which is
    /// what real hardware timestamps at DAC/ADC edges.
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        &mut self,
        tx: usize,
        rx: usize,
        t_emit: f64,
        pulse: &SampledSignal,
        template: &SampledSignal,
        carrier_hz: f64,
        win_start_local: f64,
        window_samples: usize,
        bias: &BiasTable,
    ) -> Result<ToaEstimate, SimError> {
        debug_assert_ne!(tx, rx);
        let fs = pulse.sample_rate;
        let link = *self.link(tx, rx);
        let tau = propagation_delay(self.nodes[tx].pos, self.nodes[rx].pos, &link);
        let t_arrive = t_emit + tau;
        let w_global = self.nodes[rx]
            .clock
            .global_event_time(win_start_local, &mut self.rng);
        let alpha_rx = self.nodes[rx].clock.alpha;
        let offset_samples = (t_arrive - w_global) * alpha_rx * fs;

        let mut window = vec![C64::new(0.0, 0.0); window_samples];
        let phase = C64::from_polar(1.0, -2.0 * std::f64::consts::PI * carrier_hz * tau);
        place_pulse(&mut window, &pulse.samples, offset_samples, phase);
        if link.snr_db.is_finite() {
            let sigma = awgn_sigma_for_snr(link.snr_db, mean_power(&pulse.samples));
            add_awgn(&mut window, sigma, &mut self.rng);
        }
        let rx_signal = SampledSignal {
            samples: window,
            sample_rate: fs,
            start_time: win_start_local,
        };
        let mf = matched_filter(&rx_signal, template)?;
        let est = refine_peak(&mf, bias).map_err(|_| SimError::LostExchange {
            tx,
            rx,
            snr_db: f64::NEG_INFINITY,
        })?;
        // Detection demands the threshold margin above the expected peak of
        // noise alone, which for L i.i.d. lags sits ~2 ln L over the floor.
        let noise_peak_db = 10.0 * (2.0 * (mf.len() as f64).ln()).log10();
        if est.snr_estimate < self.detection_threshold_db + noise_peak_db {
            return Err(SimError::LostExchange {
                tx,
                rx,
                snr_db: est.snr_estimate,
            });
        }
        Ok(est)
    }

    /// One TDMA transmission received by one node: `tx` emits `pulse` with
    /// its first sample scheduled at local time `tx_local`; `rx` captures
    /// `window_samples` starting at its local `win_start_local` and
    /// matched-filters against `template`.
    #[allow(clippy::too_many_arguments)]
    pub fn one_way(
        &mut self,
        tx: usize,
        rx: usize,
        pulse: &SampledSignal,
        template: &SampledSignal,
        carrier_hz: f64,
        tx_local: f64,
        win_start_local: f64,
        window_samples: usize,
        bias: &BiasTable,
    ) -> Result<ToaEstimate, SimError> {
        let dur = pulse.samples.len() as f64 / pulse.sample_rate;
        let t_emit = self.emit(tx, tx_local, dur);
        self.capture(
            tx,
            rx,
            t_emit,
            pulse,
            template,
            carrier_hz,
            win_start_local,
            window_samples,
            bias,
        )
    }

    /// Checks that no two logged transmissions are closer than `guard_s`
    /// (emission end to next emission start). The TDMA schedule is sound iff
    /// this holds with `guard_s` at least the largest propagation delay.
    pub fn tx_intervals_disjoint(&self, guard_s: f64) -> bool {
        let mut spans: Vec<(f64, f64)> = self.tx_log.iter().map(|e| (e.start, e.end)).collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        spans.windows(2).all(|w| w[1].0 - w[0].1 >= guard_s)
    }

    /// Drops the transmission log; epochs audited separately can reuse it.
    pub fn clear_tx_log(&mut self) {
        self.tx_log.clear();
    }
}
