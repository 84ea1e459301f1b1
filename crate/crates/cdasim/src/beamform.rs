//! Open-loop transmit beamforming on top of the synchronized clocks.
//!
//! The array is evaluated against a far-field receiver that samples on the
//! global clock (a scope in an anechoic range, effectively). Calibration
//! measures each node's static delay and phase against the reference node
//! using simultaneously transmitted orthogonal up/down chirps; steering then
//! combines the calibration terms with TWTT-derived baselines, so after the
//! initial measurement the array points anywhere in the sweep without any
//! feedback from the receiver.
//!
//! Coherent gain is measured with a pulse train: every node fires the beam
//! weights solo, then all together, and the gain is the ratio of the combined
//! correlation peak to the sum of the solo peaks. Solo pulses double as the
//! per-node arrival-time record (chirps for time, CW for amplitude).

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::signal::{
    add_awgn, awgn_sigma_for_snr, interpolate_bandlimited, matched_filter, mean_power, place_pulse,
    refine_peak_bandlimited, synthesize, RefinedPeak, SampledSignal, WaveformKind, WaveformSpec,
};
use crate::world::World;
use crate::{C64, SPEED_OF_LIGHT};

/// Power pattern of one element, modeled as sinc^2 with the main lobe matched
/// to the antenna's quoted -3 dB beamwidths. The fit solves
/// `sinc(a * bw/2)^2 = 1/2` for the scale `a`, so the model and the datasheet
/// agree exactly at the half-power points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElementPattern {
    pub beamwidth_az_deg: f64,
    pub beamwidth_el_deg: f64,
    pub boresight_gain_dbi: f64,
}

impl Default for ElementPattern {
    fn default() -> Self {
        ElementPattern {
            beamwidth_az_deg: 78.0,
            beamwidth_el_deg: 56.0,
            boresight_gain_dbi: 10.0,
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Argument where sinc^2 crosses one half, solved once by bisection.
fn sinc_half_power_arg() -> f64 {
    static ARG: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *ARG.get_or_init(|| {
        let target = 0.5f64.sqrt();
        let (mut lo, mut hi) = (1.0f64, 2.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if sinc(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    })
}

impl ElementPattern {
    pub fn validate(&self) -> Result<(), SimError> {
        for bw in [self.beamwidth_az_deg, self.beamwidth_el_deg] {
            if !(bw > 0.0 && bw < 180.0) {
                return Err(SimError::Config(format!(
                    "element beamwidth must be in (0, 180) degrees, got {bw}"
                )));
            }
        }
        Ok(())
    }

    /// Field amplitude at `theta_deg` off boresight in the azimuth cut (the
    /// plane containing the array axis).
    pub fn amplitude(&self, theta_deg: f64) -> f64 {
        let a = sinc_half_power_arg() / (self.beamwidth_az_deg / 2.0).to_radians();
        sinc(a * theta_deg.to_radians())
    }

    pub fn power(&self, theta_deg: f64) -> f64 {
        let e = self.amplitude(theta_deg);
        e * e
    }
}

/// Node positions (meters), the evaluation receiver, and the element model.
///
/// The array axis is x; broadside is +y and steering angles are measured from
/// broadside toward +x. Node 0 is the reference for all baselines and
/// calibration terms. The default is a six-element sparse linear array with
/// the receiver 16.3 m away at broadside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayGeometry {
    pub nodes: Vec<[f64; 3]>,
    pub receiver: [f64; 3],
    pub element: ElementPattern,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        let xs = [-0.648, -0.368, 0.0, 0.213, 0.551, 0.813];
        ArrayGeometry {
            nodes: xs.iter().map(|&x| [x, 0.0, 0.0]).collect(),
            receiver: [0.0, 16.3, 0.0],
            element: ElementPattern::default(),
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<(), SimError> {
        // A single node is a legal array (its pattern is the element
        // pattern); pairwise operations check for >= 2 themselves.
        if self.nodes.is_empty() {
            return Err(SimError::Config("array has no nodes".into()));
        }
        self.element.validate()?;
        for (n, &p) in self.nodes.iter().enumerate() {
            if dist(p, self.receiver) < 1e-6 {
                return Err(SimError::Config(format!(
                    "receiver coincides with node {n}"
                )));
            }
        }
        Ok(())
    }

    /// Signed along-axis baseline of each node relative to node 0, meters.
    pub fn baselines(&self) -> Vec<f64> {
        self.nodes.iter().map(|p| p[0] - self.nodes[0][0]).collect()
    }

    pub fn range_to_receiver(&self, n: usize) -> f64 {
        dist(self.nodes[n], self.receiver)
    }

    /// Angle of the receiver off a node's boresight (+y), degrees.
    fn receiver_angle_deg(&self, n: usize) -> f64 {
        let dx = self.receiver[0] - self.nodes[n][0];
        let dy = self.receiver[1] - self.nodes[n][1];
        dx.atan2(dy).to_degrees()
    }
}

/// Complex far-field response at `theta_deg` for per-node weights `w`:
/// `sum_n w[n] * E(theta) * exp(+j 2 pi f x_n sin(theta) / c)`.
pub fn array_response(
    geom: &ArrayGeometry,
    weights: &[C64],
    carrier_hz: f64,
    theta_deg: f64,
) -> C64 {
    let s = theta_deg.to_radians().sin();
    let e = geom.element.amplitude(theta_deg);
    let k = 2.0 * PI * carrier_hz / SPEED_OF_LIGHT;
    weights
        .iter()
        .zip(&geom.nodes)
        .map(|(w, p)| w * e * C64::from_polar(1.0, k * p[0] * s))
        .sum()
}

/// Far-field power pattern over an angle grid, normalized to unit peak.
pub fn array_power_pattern(
    geom: &ArrayGeometry,
    weights: &[C64],
    carrier_hz: f64,
    angles_deg: &[f64],
) -> Result<Vec<f64>, SimError> {
    geom.validate()?;
    if weights.len() != geom.nodes.len() {
        return Err(SimError::Config(format!(
            "{} weights for {} nodes",
            weights.len(),
            geom.nodes.len()
        )));
    }
    if angles_deg.is_empty() {
        return Err(SimError::Config("empty angle grid".into()));
    }
    if !(carrier_hz > 0.0) {
        return Err(SimError::Config(format!("carrier {carrier_hz} Hz")));
    }
    let powers: Vec<f64> = angles_deg
        .iter()
        .map(|&th| array_response(geom, weights, carrier_hz, th).norm_sqr())
        .collect();
    let peak = powers.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(SimError::Config(
            "array response is zero over the whole grid".into(),
        ));
    }
    Ok(powers.iter().map(|p| p / peak).collect())
}

/// Per-node static terms measured once against node 0: carrier phase offset,
/// transmit-time offset, range-estimate bias, and the surveyed signed
/// baseline. Node 0 is the reference, so its entries are identically zero
/// (the baseline's sign carries which side of the reference a node sits on,
/// which an unsigned TWTT range cannot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamformCalibration {
    pub phi0: Vec<f64>,
    pub tau_bf_cal: Vec<f64>,
    pub delta_cal: Vec<f64>,
    pub d_0n: Vec<f64>,
}

impl BeamformCalibration {
    /// All-zero calibration terms over the given surveyed baselines.
    pub fn zeroed(d_0n: Vec<f64>) -> Self {
        let n = d_0n.len();
        BeamformCalibration {
            phi0: vec![0.0; n],
            tau_bf_cal: vec![0.0; n],
            delta_cal: vec![0.0; n],
            d_0n,
        }
    }

    pub fn len(&self) -> usize {
        self.phi0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi0.is_empty()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.phi0.len();
        if n < 2 {
            return Err(SimError::Config("calibration needs >= 2 nodes".into()));
        }
        if self.tau_bf_cal.len() != n || self.delta_cal.len() != n || self.d_0n.len() != n {
            return Err(SimError::Config(format!(
                "calibration vectors disagree on node count: {} / {} / {} / {}",
                n,
                self.tau_bf_cal.len(),
                self.delta_cal.len(),
                self.d_0n.len()
            )));
        }
        if self.phi0[0] != 0.0
            || self.tau_bf_cal[0] != 0.0
            || self.delta_cal[0] != 0.0
            || self.d_0n[0] != 0.0
        {
            return Err(SimError::Config(
                "reference node calibration entries must be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Range-estimate bias per node: estimated time of flight minus what the
/// surveyed baseline says it should be. Subtracting the result from later
/// range estimates removes static hardware delay from the steering geometry.
pub fn calibrate_ranges(tof_est_s: &[f64], d_0n_m: &[f64]) -> Result<Vec<f64>, SimError> {
    if tof_est_s.len() != d_0n_m.len() {
        return Err(SimError::Config(format!(
            "{} time-of-flight estimates for {} baselines",
            tof_est_s.len(),
            d_0n_m.len()
        )));
    }
    Ok(tof_est_s
        .iter()
        .zip(d_0n_m)
        .map(|(&tof, &d)| tof - d.abs() / SPEED_OF_LIGHT)
        .collect())
}

/// Transmit-side beam weight for one node: delay the pulse envelope by
/// `delay_s` on the local clock and rotate the carrier by `phase_rad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamWeight {
    pub delay_s: f64,
    pub phase_rad: f64,
}

fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Steering delays and phases for angle `theta_deg` from broadside.
///
/// Each node's envelope delay is its calibrated baseline (estimated range
/// corrected by the range bias, signed by which side of the reference it
/// sits on) projected onto the steering direction, plus the static transmit
/// offset. The carrier phase is the delay scaled to the carrier plus the
/// static phase offset, negated so the applied weight cancels what the air
/// and the hardware will add.
pub fn beamform_delays(
    cal: &BeamformCalibration,
    ranges_m: &[f64],
    carrier_hz: f64,
    theta_deg: f64,
) -> Result<Vec<BeamWeight>, SimError> {
    cal.validate()?;
    if ranges_m.len() != cal.len() {
        return Err(SimError::Config(format!(
            "{} range estimates for {} calibrated nodes",
            ranges_m.len(),
            cal.len()
        )));
    }
    if !(theta_deg.abs() <= 90.0) {
        return Err(SimError::Config(format!(
            "steering angle {theta_deg} degrees outside [-90, 90]"
        )));
    }
    let s = theta_deg.to_radians().sin();
    ranges_m
        .iter()
        .enumerate()
        .map(|(n, &r)| {
            if !(r >= 0.0) {
                return Err(SimError::Config(format!("negative range for node {n}")));
            }
            let side = if cal.d_0n[n] < 0.0 { -1.0 } else { 1.0 };
            let delay = side * (r / SPEED_OF_LIGHT - cal.delta_cal[n]) * s + cal.tau_bf_cal[n];
            Ok(BeamWeight {
                delay_s: delay,
                phase_rad: wrap_pi(-(2.0 * PI * carrier_hz * delay + cal.phi0[n])),
            })
        })
        .collect()
}

/// The evaluation receiver: an ideal scope on the global clock. `snr_db` is
/// the per-pulse SNR of a single node's transmission at the scope input;
/// infinite means noiseless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScopeConfig {
    pub sample_rate: f64,
    pub snr_db: f64,
}

impl Default for ScopeConfig {
    fn default() -> Self {
        ScopeConfig {
            sample_rate: 2e9,
            snr_db: f64::INFINITY,
        }
    }
}

impl ScopeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sample_rate > 0.0) {
            return Err(SimError::Config(format!(
                "scope sample rate {} Sa/s",
                self.sample_rate
            )));
        }
        Ok(())
    }

    fn noiseless(&self) -> ScopeConfig {
        ScopeConfig {
            snr_db: f64::INFINITY,
            ..*self
        }
    }
}

/// Static per-node transmit-chain imperfections: a group delay and a carrier
/// phase offset between the synthesizer and the antenna. These are what the
/// far-field calibration exists to measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSkew {
    pub delay_s: Vec<f64>,
    pub phase_rad: Vec<f64>,
}

impl HardwareSkew {
    pub fn none(n: usize) -> Self {
        HardwareSkew {
            delay_s: vec![0.0; n],
            phase_rad: vec![0.0; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), SimError> {
        if self.delay_s.len() != n || self.phase_rad.len() != n {
            return Err(SimError::Config(format!(
                "hardware skew sized {}/{} for {} nodes",
                self.delay_s.len(),
                self.phase_rad.len(),
                n
            )));
        }
        Ok(())
    }
}

/// One coherent-gain measurement: solo and combined correlation peaks, their
/// ratio as amplitude and power, and per-node arrival times relative to the
/// reference node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub epoch: usize,
    pub theta_deg: f64,
    pub solo_peaks: Vec<f64>,
    pub combined_peak: f64,
    pub g_c: f64,
    pub g_c_power: f64,
    pub delays_s: Vec<f64>,
}

impl GainRecord {
    /// Internal-consistency check; `eps` allows for receiver noise.
    pub fn validate(&self, eps: f64) -> Result<(), SimError> {
        let n = self.solo_peaks.len();
        if self.delays_s.len() != n || n < 2 {
            return Err(SimError::Config(format!(
                "gain record has {} peaks, {} delays",
                n,
                self.delays_s.len()
            )));
        }
        let solo_sum: f64 = self.solo_peaks.iter().sum();
        if !(self.g_c >= 0.0 && self.g_c <= 1.0 + eps) {
            return Err(SimError::Config(format!("gain {} outside [0, 1]", self.g_c)));
        }
        if self.combined_peak > solo_sum * (1.0 + eps) {
            return Err(SimError::Config(format!(
                "combined peak {} exceeds solo sum {}",
                self.combined_peak, solo_sum
            )));
        }
        if (self.g_c_power - self.g_c * self.g_c).abs() > 1e-12 {
            return Err(SimError::Config("power gain is not amplitude^2".into()));
        }
        Ok(())
    }
}

/// Chirp used wherever the beamforming paths need a time measurement.
fn ranging_chirp_spec(pulse_duration: f64, sample_rate: f64, carrier_hz: f64) -> WaveformSpec {
    WaveformSpec {
        kind: WaveformKind::LfmUp,
        pulse_duration,
        bandwidth: 160e6,
        sample_rate,
        carrier_hz,
    }
}

fn cw_pulse_spec(sample_rate: f64, carrier_hz: f64) -> WaveformSpec {
    WaveformSpec {
        kind: WaveformKind::CwPulse,
        pulse_duration: CW_PULSE_S,
        bandwidth: 0.0,
        sample_rate,
        carrier_hz,
    }
}

const CAL_CHIRP_S: f64 = 10e-6;
const EVAL_CHIRP_S: f64 = 2e-6;
const CW_PULSE_S: f64 = 1e-6;
/// Lead/tail margin around every scope capture window.
const WINDOW_MARGIN_S: f64 = 0.5e-6;
/// Extra separation between consecutive pulse-train slots.
const SLOT_GAP_S: f64 = 1e-6;

fn slot_period(pulse_s: f64) -> f64 {
    pulse_s + 2.0 * WINDOW_MARGIN_S + SLOT_GAP_S
}

/// Wall-clock length of one `evaluate_gain` pulse train, for epoch spacing.
pub fn gain_epoch_duration(n_nodes: usize) -> f64 {
    n_nodes as f64 * slot_period(EVAL_CHIRP_S) + (n_nodes + 1) as f64 * slot_period(CW_PULSE_S)
}

/// Wall-clock length of a far-field calibration pass, for stage spacing.
pub fn calibration_duration(n_nodes: usize) -> f64 {
    n_nodes.saturating_sub(1) as f64 * slot_period(CAL_CHIRP_S)
}

/// One pulse in flight toward the scope.
struct Emission<'a> {
    from: [f64; 3],
    t_emit: f64,
    phase: f64,
    amplitude: f64,
    samples: &'a [C64],
}

fn emit_toward_scope<'a>(
    world: &mut World,
    geom: &ArrayGeometry,
    node: usize,
    sched_local: f64,
    weight: BeamWeight,
    skew: &HardwareSkew,
    carrier_hz: f64,
    pulse: &'a SampledSignal,
) -> Emission<'a> {
    let t_emit = world.nodes[node]
        .clock
        .global_event_time(sched_local + weight.delay_s, &mut world.rng)
        + skew.delay_s[node];
    // A clock running ahead of global time by dt advances the carrier by
    // 2 pi f dt, on top of the chain's static phase and the applied weight.
    let dt = world.nodes[node].clock.offset_from_global(t_emit);
    Emission {
        from: world.nodes[node].pos,
        t_emit,
        phase: 2.0 * PI * carrier_hz * dt + skew.phase_rad[node] + weight.phase_rad,
        amplitude: geom.element.amplitude(geom.receiver_angle_deg(node)),
        samples: &pulse.samples,
    }
}

fn scope_capture(
    receiver: [f64; 3],
    scope: &ScopeConfig,
    carrier_hz: f64,
    emissions: &[Emission],
    win_start_global: f64,
    n_samples: usize,
    rng: &mut impl Rng,
) -> SampledSignal {
    let fs = scope.sample_rate;
    let mut window = vec![C64::new(0.0, 0.0); n_samples];
    for em in emissions {
        let tau = dist(em.from, receiver) / SPEED_OF_LIGHT;
        let offset = (em.t_emit + tau - win_start_global) * fs;
        let scale = C64::from_polar(em.amplitude, em.phase - 2.0 * PI * carrier_hz * tau);
        place_pulse(&mut window, em.samples, offset, scale);
    }
    if scope.snr_db.is_finite() {
        let p = mean_power(emissions[0].samples) * emissions[0].amplitude * emissions[0].amplitude;
        add_awgn(&mut window, awgn_sigma_for_snr(scope.snr_db, p), rng);
    }
    SampledSignal {
        samples: window,
        sample_rate: fs,
        start_time: win_start_global,
    }
}

/// Argmax, detection margin, then band-limited refinement. `exclude` is the
/// half-width (samples) around the peak left out of the noise-floor estimate;
/// use the template length so the correlation mainlobe and its skirts do not
/// count as noise.
fn detect_peak(
    mf: &SampledSignal,
    exclude: usize,
    threshold_db: f64,
    what: &str,
) -> Result<RefinedPeak, SimError> {
    let (idx, peak) = mf
        .samples
        .iter()
        .map(|c| c.norm_sqr())
        .enumerate()
        .fold((0, 0.0), |acc, (i, p)| if p > acc.1 { (i, p) } else { acc });
    let mut floor = 0.0;
    let mut count = 0usize;
    for (i, c) in mf.samples.iter().enumerate() {
        if i + exclude < idx || i > idx + exclude {
            floor += c.norm_sqr();
            count += 1;
        }
    }
    if count > 0 && floor > 0.0 {
        let snr_db = 10.0 * (peak / (floor / count as f64)).log10();
        let noise_peak_db = 10.0 * (2.0 * (mf.samples.len() as f64).ln()).log10();
        if snr_db < threshold_db + noise_peak_db {
            return Err(SimError::PeakDetection(format!(
                "{what}: peak SNR {snr_db:.1} dB below detection threshold"
            )));
        }
    }
    let pk = refine_peak_bandlimited(&mf.samples, idx);
    if !pk.position.is_finite() || pk.position < 0.0 || pk.position >= mf.samples.len() as f64 {
        return Err(SimError::PeakDetection(format!(
            "{what}: refined peak left the capture window"
        )));
    }
    Ok(pk)
}

/// Template energy, the correlation peak value at perfect alignment.
fn template_energy(template: &SampledSignal) -> f64 {
    template.samples.iter().map(|c| c.norm_sqr()).sum()
}

/// Measures each node's static delay and carrier phase against node 0.
///
/// Pair by pair, node 0 and node n transmit simultaneously: node 0 an
/// up-chirp, node n a down-chirp. The scope separates them by matched
/// filtering against each template, cancels the residual cross-talk by
/// reconstructing and subtracting the opposite pulse once, and refines both
/// peaks. The measured inter-arrival delay and phase difference are stored
/// negated, so applying them as beam weights makes node n land on top of
/// node 0 at the receiver.
///
/// Returned `delta_cal` is zero; range bias is a separate measurement
/// ([`calibrate_ranges`]) that the caller merges in.
pub fn calibrate_farfield(
    world: &mut World,
    geom: &ArrayGeometry,
    scope: &ScopeConfig,
    skew: &HardwareSkew,
    carrier_hz: f64,
    base_local: f64,
) -> Result<BeamformCalibration, SimError> {
    geom.validate()?;
    scope.validate()?;
    let n = geom.nodes.len();
    if world.nodes.len() != n {
        return Err(SimError::Config(format!(
            "world has {} nodes, geometry {}",
            world.nodes.len(),
            n
        )));
    }
    skew.validate(n)?;
    let up = synthesize(&ranging_chirp_spec(CAL_CHIRP_S, scope.sample_rate, carrier_hz))?;
    let down = synthesize(&WaveformSpec {
        kind: WaveformKind::LfmDown,
        ..ranging_chirp_spec(CAL_CHIRP_S, scope.sample_rate, carrier_hz)
    })?;
    let fs = scope.sample_rate;
    let slot = slot_period(CAL_CHIRP_S);
    let win_len = ((CAL_CHIRP_S + 2.0 * WINDOW_MARGIN_S) * fs).round() as usize;
    let no_weight = BeamWeight {
        delay_s: 0.0,
        phase_rad: 0.0,
    };
    let threshold_db = world.detection_threshold_db;

    let mut phi0 = vec![0.0; n];
    let mut tau_bf_cal = vec![0.0; n];
    for k in 1..n {
        let sched = base_local + (k - 1) as f64 * slot;
        let em0 = emit_toward_scope(world, geom, 0, sched, no_weight, skew, carrier_hz, &up);
        let emk = emit_toward_scope(world, geom, k, sched, no_weight, skew, carrier_hz, &down);
        // Propagation to the scope dominates the window placement; lead the
        // earliest possible arrival by the margin. Arming off the reference
        // node's schedule keeps the window on target when the whole array
        // carries a common clock offset.
        let min_tau = (0..n)
            .map(|i| geom.range_to_receiver(i))
            .fold(f64::INFINITY, f64::min)
            / SPEED_OF_LIGHT;
        let win_start = world.nodes[0].clock.nominal_global_time(sched) + min_tau - WINDOW_MARGIN_S;
        let rx = scope_capture(
            geom.receiver,
            scope,
            carrier_hz,
            &[em0, emk],
            win_start,
            win_len,
            &mut world.rng,
        );

        // First pass: both pulses estimated in the presence of each other.
        let mf_up = matched_filter(&rx, &up)?;
        let mf_dn = matched_filter(&rx, &down)?;
        let pk0 = detect_peak(&mf_up, up.samples.len(), threshold_db, "up-chirp")?;
        let pkk = detect_peak(&mf_dn, down.samples.len(), threshold_db, "down-chirp")?;

        // Second pass: subtract each reconstructed pulse and re-estimate the
        // other. One round drops the up/down cross-talk bias from ~1/sqrt(TB)
        // to its square, far below the noise floor.
        let a0 = pk0.value / template_energy(&up);
        let ak = pkk.value / template_energy(&down);
        let mut rx_for_k = rx.clone();
        place_pulse(&mut rx_for_k.samples, &up.samples, pk0.position, -a0);
        let mut rx_for_0 = rx;
        place_pulse(&mut rx_for_0.samples, &down.samples, pkk.position, -ak);
        let mf_up = matched_filter(&rx_for_0, &up)?;
        let mf_dn = matched_filter(&rx_for_k, &down)?;
        let pk0 = detect_peak(&mf_up, up.samples.len(), threshold_db, "up-chirp")
            .map_err(|e| SimError::PeakDetection(format!("calibration pair (0,{k}): {e}")))?;
        let pkk = detect_peak(&mf_dn, down.samples.len(), threshold_db, "down-chirp")
            .map_err(|e| SimError::PeakDetection(format!("calibration pair (0,{k}): {e}")))?;

        let dtau = (pkk.position - pk0.position) / fs;
        let dphi = pkk.value.arg() - pk0.value.arg();
        tau_bf_cal[k] = -dtau;
        phi0[k] = wrap_pi(dphi - 2.0 * PI * carrier_hz * tau_bf_cal[k]);
    }
    Ok(BeamformCalibration {
        phi0,
        tau_bf_cal,
        delta_cal: vec![0.0; n],
        d_0n: geom.baselines(),
    })
}

/// Fires the full gain-measurement train at one steering angle and reduces
/// it to a [`GainRecord`].
///
/// Train layout, one slot per pulse: a solo ranging chirp per node (arrival
/// times), a solo CW pulse per node (amplitudes), then every node's CW pulse
/// together. Gain is the combined correlation peak over the sum of solo
/// peaks. A solo peak that fails detection is an error; the combined pulse is
/// read at the solo-predicted position when nothing is detectable there,
/// since full cancellation is a valid measurement, not a failure.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_gain(
    world: &mut World,
    geom: &ArrayGeometry,
    scope: &ScopeConfig,
    skew: &HardwareSkew,
    cal: &BeamformCalibration,
    ranges_m: &[f64],
    carrier_hz: f64,
    theta_deg: f64,
    base_local: f64,
    epoch: usize,
) -> Result<GainRecord, SimError> {
    geom.validate()?;
    scope.validate()?;
    let n = geom.nodes.len();
    if world.nodes.len() != n {
        return Err(SimError::Config(format!(
            "world has {} nodes, geometry {}",
            world.nodes.len(),
            n
        )));
    }
    skew.validate(n)?;
    let weights = beamform_delays(cal, ranges_m, carrier_hz, theta_deg)?;
    let fs = scope.sample_rate;
    let chirp = synthesize(&ranging_chirp_spec(EVAL_CHIRP_S, fs, carrier_hz))?;
    let cw = synthesize(&cw_pulse_spec(fs, carrier_hz))?;
    let threshold_db = world.detection_threshold_db;
    let min_tau = (0..n)
        .map(|i| geom.range_to_receiver(i))
        .fold(f64::INFINITY, f64::min)
        / SPEED_OF_LIGHT;

    let capture_solo = |world: &mut World,
                        node: usize,
                        sched: f64,
                        pulse: &SampledSignal,
                        pulse_s: f64|
     -> Result<(RefinedPeak, f64), SimError> {
        let em = emit_toward_scope(
            world, geom, node, sched, weights[node], skew, carrier_hz, pulse,
        );
        // The scope arms off the reference node's schedule, so a common
        // offset of the whole (synced) array moves the window with the
        // pulses instead of leaving them behind.
        let win_start = world.nodes[0].clock.nominal_global_time(sched) + min_tau - WINDOW_MARGIN_S;
        let win_len = ((pulse_s + 2.0 * WINDOW_MARGIN_S) * fs).round() as usize;
        let rx = scope_capture(
            geom.receiver,
            scope,
            carrier_hz,
            &[em],
            win_start,
            win_len,
            &mut world.rng,
        );
        let mf = matched_filter(&rx, pulse)?;
        let pk = detect_peak(&mf, pulse.samples.len(), threshold_db, "solo pulse")
            .map_err(|e| SimError::PeakDetection(format!("node {node}: {e}")))?;
        // Arrival relative to this slot's schedule, comparable across slots.
        Ok((pk, rx.start_time + pk.position / fs - sched))
    };

    // Solo ranging chirps.
    let chirp_slot = slot_period(EVAL_CHIRP_S);
    let mut arrivals = vec![0.0; n];
    for k in 0..n {
        let sched = base_local + k as f64 * chirp_slot;
        let (_, arrival) = capture_solo(world, k, sched, &chirp, EVAL_CHIRP_S)?;
        arrivals[k] = arrival;
    }
    let delays_s: Vec<f64> = arrivals.iter().map(|&a| a - arrivals[0]).collect();

    // Solo CW pulses.
    let cw_slot = slot_period(CW_PULSE_S);
    let cw_base = base_local + n as f64 * chirp_slot;
    let mut solo_peaks = vec![0.0; n];
    let mut cw_positions = vec![0.0; n];
    for k in 0..n {
        let sched = cw_base + k as f64 * cw_slot;
        let (pk, _) = capture_solo(world, k, sched, &cw, CW_PULSE_S)?;
        solo_peaks[k] = pk.value.norm();
        cw_positions[k] = pk.position;
    }

    // Combined CW pulse.
    let sched = cw_base + n as f64 * cw_slot;
    let emissions: Vec<Emission> = (0..n)
        .map(|k| emit_toward_scope(world, geom, k, sched, weights[k], skew, carrier_hz, &cw))
        .collect();
    let win_start = world.nodes[0].clock.nominal_global_time(sched) + min_tau - WINDOW_MARGIN_S;
    let win_len = ((CW_PULSE_S + 2.0 * WINDOW_MARGIN_S) * fs).round() as usize;
    let rx = scope_capture(
        geom.receiver,
        scope,
        carrier_hz,
        &emissions,
        win_start,
        win_len,
        &mut world.rng,
    );
    let mf = matched_filter(&rx, &cw)?;
    let combined_peak = match detect_peak(&mf, cw.samples.len(), threshold_db, "combined pulse") {
        Ok(pk) => pk.value.norm(),
        // Destructive combining is a measurement, not a failure: read the
        // correlator where the solo pulses say the train landed.
        Err(_) => {
            let expected: f64 =
                cw_positions.iter().map(|&p| p / n as f64).sum();
            interpolate_bandlimited(&mf.samples, expected).norm()
        }
    };

    let solo_sum: f64 = solo_peaks.iter().sum();
    if !(solo_sum > 0.0) {
        return Err(SimError::PeakDetection("all solo peaks are zero".into()));
    }
    let g_c = combined_peak / solo_sum;
    Ok(GainRecord {
        epoch,
        theta_deg,
        solo_peaks,
        combined_peak,
        g_c,
        g_c_power: g_c * g_c,
        delays_s,
    })
}

/// Ideal coherent amplitude gain of baselines steered to `theta_deg` and
/// observed at broadside: `|sum_n exp(-j 2 pi f b_n sin(theta) / c)| / N`.
/// This is the no-noise, no-skew reduction of the full measurement and
/// doubles as its oracle.
pub fn phasor_gain(baselines_m: &[f64], carrier_hz: f64, theta_deg: f64) -> f64 {
    let s = theta_deg.to_radians().sin();
    let k = -2.0 * PI * carrier_hz / SPEED_OF_LIGHT;
    let sum: C64 = baselines_m
        .iter()
        .map(|&b| C64::from_polar(1.0, k * b * s))
        .sum();
    sum.norm() / baselines_m.len() as f64
}

/// One angle of a steering sweep: repeated measurements plus the two
/// predicted curves they are judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerPoint {
    pub theta_deg: f64,
    /// Phasor gain using the true baselines.
    pub ideal: f64,
    /// Phasor gain using the baselines the weights actually encode
    /// (estimated ranges after bias correction), so position errors show up
    /// here as well as in the measurement.
    pub ideal_applied: f64,
    pub records: Vec<GainRecord>,
}

/// Sweeps the beam over `angles_deg`, measuring `repeats` gain records per
/// angle against the broadside receiver.
#[allow(clippy::too_many_arguments)]
pub fn steer_sweep(
    world: &mut World,
    geom: &ArrayGeometry,
    scope: &ScopeConfig,
    skew: &HardwareSkew,
    cal: &BeamformCalibration,
    ranges_m: &[f64],
    carrier_hz: f64,
    angles_deg: &[f64],
    repeats: usize,
    base_local: f64,
) -> Result<Vec<SteerPoint>, SimError> {
    if repeats == 0 {
        return Err(SimError::Config("steer sweep needs repeats >= 1".into()));
    }
    if angles_deg.is_empty() {
        return Err(SimError::Config("steer sweep needs angles".into()));
    }
    cal.validate()?;
    let true_baselines = geom.baselines();
    let applied_baselines: Vec<f64> = ranges_m
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let side = if cal.d_0n[k] < 0.0 { -1.0 } else { 1.0 };
            side * (r - cal.delta_cal[k] * SPEED_OF_LIGHT)
        })
        .collect();
    let epoch_len = gain_epoch_duration(geom.nodes.len()) + SLOT_GAP_S;

    let mut out = Vec::with_capacity(angles_deg.len());
    let mut base = base_local;
    let mut epoch = 0;
    for &theta in angles_deg {
        let mut records = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            records.push(evaluate_gain(
                world, geom, scope, skew, cal, ranges_m, carrier_hz, theta, base, epoch,
            )?);
            epoch += 1;
            base += epoch_len;
        }
        out.push(SteerPoint {
            theta_deg: theta,
            ideal: phasor_gain(&true_baselines, carrier_hz, theta),
            ideal_applied: phasor_gain(&applied_baselines, carrier_hz, theta),
            records,
        });
    }
    Ok(out)
}

/// Repeated broadside gain measurements with per-node timing errors drawn
/// fresh each trial: clocks are ideal except for a normal offset of the given
/// sigma, which shifts both the pulse envelope and the carrier phase exactly
/// as a residual synchronization error would.
///
/// Calibration runs once on the pristine array; each trial then perturbs the
/// clocks and measures. Trials draw from independent, seed-addressed RNG
/// streams, so results do not depend on evaluation order.
pub fn broadside_gain_trials(
    geom: &ArrayGeometry,
    scope: &ScopeConfig,
    carrier_hz: f64,
    timing_sigma_s: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<GainRecord>, SimError> {
    geom.validate()?;
    if trials == 0 {
        return Err(SimError::Config("need at least one trial".into()));
    }
    if !(timing_sigma_s >= 0.0) {
        return Err(SimError::Config(format!(
            "timing sigma {timing_sigma_s} s"
        )));
    }
    let n = geom.nodes.len();
    let skew = HardwareSkew::none(n);
    let mut cal_world = World::noiseless(&geom.nodes, ChaCha8Rng::seed_from_u64(seed));
    let cal = calibrate_farfield(
        &mut cal_world,
        geom,
        &scope.noiseless(),
        &skew,
        carrier_hz,
        0.0,
    )?;
    let ranges: Vec<f64> = geom.baselines().iter().map(|b| b.abs()).collect();
    let dist = Normal::new(0.0, timing_sigma_s).map_err(|e| SimError::Config(e.to_string()))?;

    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + trial as u64);
        let mut world = World::noiseless(&geom.nodes, ChaCha8Rng::seed_from_u64(seed));
        for node in world.nodes.iter_mut() {
            node.clock.beta = dist.sample(&mut rng);
        }
        world.rng = ChaCha8Rng::from_rng(&mut rng).map_err(|e| SimError::Config(e.to_string()))?;
        let rec = evaluate_gain(
            &mut world, geom, scope, &skew, &cal, &ranges, carrier_hz, 0.0, 0.0, trial,
        )?;
        out.push(rec);
    }
    Ok(out)
}
