//! Waveforms, matched filtering, and sub-sample time-of-arrival refinement.
//!
//! Everything here is complex baseband. Fractional delays are realized as
//! linear phase ramps in the frequency domain, which is exact for
//! band-limited signals and serves both the channel model and the test
//! oracles.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftPlanner};

use crate::error::SimError;
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformKind {
    TwoToneLfm,
    CwPulse,
    LfmUp,
    LfmDown,
}

/// Parameters of a transmit waveform.
///
/// `bandwidth` is the occupied bandwidth; for `TwoToneLfm` it is the tone
/// separation, and the two chirps each sweep that same span on either side of
/// DC, so the occupied band is contiguous (100% occupancy) and twice the
/// separation wide.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WaveformSpec {
    pub kind: WaveformKind,
    pub pulse_duration: f64,
    pub bandwidth: f64,
    pub sample_rate: f64,
    pub carrier_hz: f64,
}

impl WaveformSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sample_rate > 2.0 * self.bandwidth) {
            return Err(SimError::Nyquist {
                sample_rate_hz: self.sample_rate,
                bandwidth_hz: self.bandwidth,
            });
        }
        if self.pulse_duration * self.sample_rate < 8.0 {
            return Err(SimError::Config(format!(
                "pulse too short: {} s at {} Sa/s is under 8 samples",
                self.pulse_duration, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.pulse_duration * self.sample_rate).round() as usize
    }
}

/// A block of complex baseband samples pinned to a clock.
///
/// `start_time` is in whatever time base the producer used (a node's local
/// clock, or global time for scopes); consumers must keep track.
#[derive(Debug, Clone)]
pub struct SampledSignal {
    pub samples: Vec<C64>,
    pub sample_rate: f64,
    pub start_time: f64,
}

impl SampledSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn time_of_index(&self, i: f64) -> f64 {
        self.start_time + i / self.sample_rate
    }
}

/// Refined time-of-arrival from a matched-filter output.
#[derive(Debug, Clone, Copy)]
pub struct ToaEstimate {
    /// Seconds in the signal's time base, sub-sample.
    pub toa: f64,
    pub peak_magnitude: f64,
    pub peak_index: usize,
    /// Peak power over the estimated noise floor of the correlator output.
    pub snr_estimate: f64,
}

pub fn synthesize(spec: &WaveformSpec) -> Result<SampledSignal, SimError> {
    spec.validate()?;
    let n = spec.n_samples();
    let fs = spec.sample_rate;
    let mid = (n as f64 - 1.0) / 2.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = (i as f64 - mid) / fs;
        let s = match spec.kind {
            WaveformKind::CwPulse => C64::new(1.0, 0.0),
            WaveformKind::LfmUp => chirp(t, spec.bandwidth / spec.pulse_duration),
            WaveformKind::LfmDown => chirp(t, -spec.bandwidth / spec.pulse_duration),
            WaveformKind::TwoToneLfm => {
                // Two identical chirps offset to +-bandwidth/2: adjacent bands,
                // centers one tone separation apart.
                chirp(t, spec.bandwidth / spec.pulse_duration) * (PI * spec.bandwidth * t).cos()
            }
        };
        samples.push(s);
    }
    Ok(SampledSignal {
        samples,
        sample_rate: fs,
        start_time: 0.0,
    })
}

fn chirp(t: f64, rate: f64) -> C64 {
    C64::from_polar(1.0, PI * rate * t * t)
}

/// Cross-correlates `received` against `template` (conjugate), zero-padded
/// linear correlation. Output index k is lag k: a peak at k means the
/// template arrived at `received.start_time + k / sample_rate`.
pub fn matched_filter(
    received: &SampledSignal,
    template: &SampledSignal,
) -> Result<SampledSignal, SimError> {
    if received.sample_rate != template.sample_rate {
        return Err(SimError::Config(format!(
            "matched filter sample-rate mismatch: {} vs {}",
            received.sample_rate, template.sample_rate
        )));
    }
    let n_rx = received.len();
    let m = next_pow2(n_rx + template.len());
    let mut rx = Vec::with_capacity(m);
    rx.extend_from_slice(&received.samples);
    rx.resize(m, C64::new(0.0, 0.0));
    let mut tp = Vec::with_capacity(m);
    tp.extend_from_slice(&template.samples);
    tp.resize(m, C64::new(0.0, 0.0));
    fft_in_place(&mut rx);
    fft_in_place(&mut tp);
    for (r, t) in rx.iter_mut().zip(tp.iter()) {
        *r *= t.conj();
    }
    ifft_in_place(&mut rx);
    rx.truncate(n_rx);
    Ok(SampledSignal {
        samples: rx,
        sample_rate: received.sample_rate,
        start_time: received.start_time,
    })
}

/// Residual bias of the quadratic-vertex estimator, tabulated over the
/// fractional-delay interval [0,1) for one waveform. Corrections are looked
/// up with circular linear interpolation.
#[derive(Debug, Clone)]
pub struct BiasTable {
    residuals: Vec<f64>,
    qls_window: usize,
}

pub const DEFAULT_QLS_WINDOW: usize = 5;
pub const DEFAULT_BIAS_BINS: usize = 64;

/// Training SNR for the bias table. The correction converges quickly with
/// SNR; 40 dB leaves the table noise well under a picosecond at the rates
/// used here.
pub const BIAS_TABLE_SNR_DB: f64 = 40.0;
const BIAS_TABLE_TRIALS_PER_BIN: usize = 32;
const BIAS_TABLE_SEED: u64 = 0xb1a5;

impl BiasTable {
    /// All-zero table: refine_peak degenerates to raw quadratic fitting.
    pub fn identity() -> Self {
        BiasTable {
            residuals: vec![0.0; 2],
            qls_window: DEFAULT_QLS_WINDOW,
        }
    }

    pub fn identity_with_window(qls_window: usize) -> Self {
        BiasTable {
            residuals: vec![0.0; 2],
            qls_window,
        }
    }

    pub fn n_points(&self) -> usize {
        self.residuals.len()
    }

    pub fn qls_window(&self) -> usize {
        self.qls_window
    }

    /// Correction (in samples) to subtract from a raw estimate whose
    /// fractional part is `frac`.
    pub fn correction(&self, frac: f64) -> f64 {
        let n = self.residuals.len();
        let pos = frac.rem_euclid(1.0) * n as f64;
        let i0 = pos.floor() as usize % n;
        let i1 = (i0 + 1) % n;
        let w = pos - pos.floor();
        self.residuals[i0] * (1.0 - w) + self.residuals[i1] * w
    }
}

/// Sweeps known fractional delays and records the mean raw-QLS residual per
/// bin. Deterministic: the training noise comes from a fixed internal seed.
pub fn build_bias_table(spec: &WaveformSpec, n_points: usize) -> Result<BiasTable, SimError> {
    build_bias_table_with_window(spec, n_points, DEFAULT_QLS_WINDOW)
}

pub fn build_bias_table_with_window(
    spec: &WaveformSpec,
    n_points: usize,
    qls_window: usize,
) -> Result<BiasTable, SimError> {
    if n_points < 16 {
        return Err(SimError::Config(format!(
            "bias table needs at least 16 points, got {n_points}"
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(BIAS_TABLE_SEED);
    let template = synthesize(spec)?;
    let raw = BiasTable::identity_with_window(qls_window);
    let base = (template.len() * 2).max(256);
    let window_len = base * 2 + template.len();
    let sigma = awgn_sigma_for_snr(BIAS_TABLE_SNR_DB, mean_power(&template.samples));
    // Sweep true fractional delays, recording (mean raw fractional estimate,
    // mean residual) knots. The table is then resampled onto a uniform grid
    // of the RAW fraction, because that is the only coordinate available
    // when the correction is applied.
    let mut knots = Vec::with_capacity(n_points + 2);
    for bin in 0..n_points {
        let frac = bin as f64 / n_points as f64;
        let mut acc = 0.0;
        for _ in 0..BIAS_TABLE_TRIALS_PER_BIN {
            let mut window = vec![C64::new(0.0, 0.0); window_len];
            place_pulse(
                &mut window,
                &template.samples,
                base as f64 + frac,
                C64::new(1.0, 0.0),
            );
            add_awgn(&mut window, sigma, &mut rng);
            let rx = SampledSignal {
                samples: window,
                sample_rate: spec.sample_rate,
                start_time: 0.0,
            };
            let mf = matched_filter(&rx, &template)?;
            let est = refine_peak(&mf, &raw)?;
            let est_pos = est.toa * spec.sample_rate;
            acc += est_pos - (base as f64 + frac);
        }
        let residual = acc / BIAS_TABLE_TRIALS_PER_BIN as f64;
        knots.push((frac + residual, residual));
    }
    // Periodic extension and resampling at uniform raw fractions.
    let first = knots[0];
    let last = knots[n_points - 1];
    knots.insert(0, (last.0 - 1.0, last.1));
    knots.push((first.0 + 1.0, first.1));
    let mut residuals = vec![0.0; n_points];
    for (j, r) in residuals.iter_mut().enumerate() {
        let u = j as f64 / n_points as f64;
        let i = knots.partition_point(|k| k.0 <= u).max(1) - 1;
        let (x0, r0) = knots[i];
        let (x1, r1) = knots[i + 1];
        let w = if x1 > x0 { (u - x0) / (x1 - x0) } else { 0.0 };
        *r = r0 + (r1 - r0) * w;
    }
    Ok(BiasTable {
        residuals,
        qls_window,
    })
}

/// Quadratic least-squares vertex around the correlation peak, then the
/// bias-table correction indexed by the fractional part of the raw result.
pub fn refine_peak(mf_output: &SampledSignal, bias: &BiasTable) -> Result<ToaEstimate, SimError> {
    let mags: Vec<f64> = mf_output.samples.iter().map(|c| c.norm()).collect();
    let peak_index = argmax(&mags);
    let half = bias.qls_window / 2;
    if peak_index < half.max(1) || peak_index + half.max(1) >= mags.len() {
        return Err(SimError::Config(format!(
            "correlation peak at index {peak_index} of {} touches the window boundary",
            mags.len()
        )));
    }
    let window = &mags[peak_index - half..=peak_index + half];
    let (vertex, height) = qls_vertex(window);
    let vertex = vertex.clamp(-1.0, 1.0);
    let raw = peak_index as f64 + vertex;
    let corrected = raw - bias.correction(raw.rem_euclid(1.0));
    // The peak sample is within one sample of the true arrival, so a sane
    // estimate stays there too; numerical slop at half-sample offsets is
    // clamped rather than propagated.
    let offset = (corrected - peak_index as f64).clamp(-0.999_999, 0.999_999);
    let refined = peak_index as f64 + offset;
    let noise_floor = noise_floor_power(&mags);
    let peak_magnitude = height.max(mags[peak_index]);
    let snr_estimate = 10.0 * (peak_magnitude * peak_magnitude / noise_floor).log10();
    Ok(ToaEstimate {
        toa: mf_output.start_time + refined / mf_output.sample_rate,
        peak_magnitude,
        peak_index,
        snr_estimate,
    })
}

fn argmax(mags: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::MIN;
    for (i, &v) in mags.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Least-squares parabola through an odd-length magnitude window; returns
/// (vertex offset from center, vertex height).
fn qls_vertex(window: &[f64]) -> (f64, f64) {
    let w = window.len();
    debug_assert!(w % 2 == 1 && w >= 3);
    let c = (w / 2) as f64;
    let (mut s0, mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, &m) in window.iter().enumerate() {
        let x = i as f64 - c;
        let x2 = x * x;
        s0 += 1.0;
        s1 += x;
        s2 += x2;
        s3 += x2 * x;
        s4 += x2 * x2;
        m0 += m;
        m1 += m * x;
        m2 += m * x2;
    }
    // Symmetric abscissas: odd sums vanish and the normal equations decouple.
    debug_assert!(s1.abs() < 1e-9 && s3.abs() < 1e-9);
    let a = (s0 * m2 - s2 * m0) / (s0 * s4 - s2 * s2);
    let b = m1 / s2;
    let c0 = (m0 - a * s2) / s0;
    if a >= 0.0 {
        // No curvature to fit against (flat or noise-dominated window).
        return (0.0, window[w / 2]);
    }
    let v = -b / (2.0 * a);
    (v, c0 + b * v + a * v * v)
}

fn noise_floor_power(mags: &[f64]) -> f64 {
    // Median of |y|^2 over the whole output: robust to the (narrow) peak
    // region. For exponentially distributed power the mean is median/ln 2.
    let mut p: Vec<f64> = mags.iter().map(|m| m * m).collect();
    let mid = p.len() / 2;
    p.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    (p[mid] / std::f64::consts::LN_2).max(f64::MIN_POSITIVE)
}

/// Exact band-limited peak interpolation: evaluates the DFT interpolant of
/// the correlator output and Newton-refines the magnitude maximum. Returns
/// the fractional peak position (samples) and the complex value there.
///
/// Unlike [`refine_peak`] this has no systematic bias, at the cost of being
/// tied to the sampled block; it is used where exact amplitudes and phases
/// matter (calibration, coherent-gain measurement).
#[derive(Debug, Clone, Copy)]
pub struct RefinedPeak {
    pub position: f64,
    pub value: C64,
}

pub fn refine_peak_bandlimited(samples: &[C64], guess_index: usize) -> RefinedPeak {
    let m = next_pow2(samples.len());
    let mut spec = Vec::with_capacity(m);
    spec.extend_from_slice(samples);
    spec.resize(m, C64::new(0.0, 0.0));
    fft_in_place(&mut spec);

    let eval = |x: f64| -> (C64, C64, C64) {
        // y(x), y'(x), y''(x) of the trigonometric interpolant.
        let mut y = C64::new(0.0, 0.0);
        let mut dy = C64::new(0.0, 0.0);
        let mut d2y = C64::new(0.0, 0.0);
        for (k, &s) in spec.iter().enumerate() {
            let kf = signed_bin(k, m);
            let w = 2.0 * PI * kf / m as f64;
            let ph = C64::from_polar(1.0, w * x);
            let jw = C64::new(0.0, w);
            y += s * ph;
            dy += s * ph * jw;
            d2y += s * ph * jw * jw;
        }
        let scale = 1.0 / m as f64;
        (y * scale, dy * scale, d2y * scale)
    };

    let mut x = guess_index as f64;
    // Seed with a parabolic step so Newton starts inside the mainlobe.
    {
        let g = |x: f64| eval(x).0.norm_sqr();
        let (l, c, r) = (g(x - 1.0), g(x), g(x + 1.0));
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            x += 0.5 * (l - r) / denom;
        }
    }
    for _ in 0..60 {
        let (y, dy, d2y) = eval(x);
        let g1 = 2.0 * (y.conj() * dy).re;
        let g2 = 2.0 * ((y.conj() * d2y).re + dy.norm_sqr());
        if g2 >= 0.0 {
            break;
        }
        let step = (g1 / g2).clamp(-0.5, 0.5);
        x -= step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    RefinedPeak {
        position: x,
        value: eval(x).0,
    }
}

/// Value of the DFT interpolant at a fractional sample position, without any
/// peak search. Lets a caller read the correlator output at a position known
/// from other measurements, e.g. the combined-pulse amplitude when
/// cancellation leaves nothing for a peak search to lock onto.
pub fn interpolate_bandlimited(samples: &[C64], position: f64) -> C64 {
    let m = next_pow2(samples.len());
    let mut spec = Vec::with_capacity(m);
    spec.extend_from_slice(samples);
    spec.resize(m, C64::new(0.0, 0.0));
    fft_in_place(&mut spec);
    let mut y = C64::new(0.0, 0.0);
    for (k, &s) in spec.iter().enumerate() {
        let kf = signed_bin(k, m);
        y += s * C64::from_polar(1.0, 2.0 * PI * kf * position / m as f64);
    }
    y / m as f64
}

/// Adds the pulse into `window` at a fractional sample offset, scaled.
/// The integer part indexes directly; the fractional part is an exact
/// band-limited shift of the placed content.
///
/// Callers must keep the pulse comfortably interior to the window (the shift
/// is circular on an internal power-of-two buffer; interior placement keeps
/// the wrap-around ringing negligible and far from the peak).
pub fn place_pulse(window: &mut [C64], pulse: &[C64], offset_samples: f64, scale: C64) {
    let k = offset_samples.floor();
    let frac = offset_samples - k;
    let k = k as i64;
    let m = next_pow2(window.len().max(pulse.len() + 2));
    let mut buf = vec![C64::new(0.0, 0.0); m];
    for (i, &p) in pulse.iter().enumerate() {
        let idx = k + i as i64;
        if idx >= 0 && (idx as usize) < window.len() {
            buf[idx as usize] = p * scale;
        }
    }
    if frac != 0.0 {
        fractional_shift_in_place(&mut buf, frac);
    }
    for (w, b) in window.iter_mut().zip(buf.iter()) {
        *w += b;
    }
}

/// Circular band-limited shift by `shift` samples (frequency-domain phase
/// ramp). Exact for content away from the buffer ends.
pub fn fractional_shift_in_place(buf: &mut [C64], shift: f64) {
    let m = buf.len();
    assert!(m.is_power_of_two(), "shift buffer must be power-of-two");
    fft_in_place(buf);
    for (k, s) in buf.iter_mut().enumerate() {
        let kf = signed_bin(k, m);
        *s *= C64::from_polar(1.0, -2.0 * PI * kf * shift / m as f64);
    }
    ifft_in_place(buf);
}

/// Delays a signal by a (possibly fractional) number of samples, growing the
/// buffer to hold the shifted content. Oracle-grade: exact linear phase ramp.
pub fn delay_signal(signal: &SampledSignal, delay_samples: f64) -> SampledSignal {
    assert!(delay_samples >= 0.0, "delay must be nonnegative");
    let k = delay_samples.floor() as usize;
    let frac = delay_samples - delay_samples.floor();
    let margin = 512;
    let len = signal.len() + k + margin;
    let mut out = vec![C64::new(0.0, 0.0); next_pow2(len)];
    for (i, &s) in signal.samples.iter().enumerate() {
        out[k + i] = s;
    }
    if frac != 0.0 {
        fractional_shift_in_place(&mut out, frac);
    }
    out.truncate(len);
    SampledSignal {
        samples: out,
        sample_rate: signal.sample_rate,
        start_time: signal.start_time,
    }
}

pub fn mean_power(samples: &[C64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|c| c.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// Complex AWGN with total variance sigma^2 per sample.
pub fn add_awgn(samples: &mut [C64], sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma / 2f64.sqrt()).unwrap();
    for s in samples.iter_mut() {
        *s += C64::new(n.sample(rng), n.sample(rng));
    }
}

pub fn awgn_sigma_for_snr(snr_db: f64, signal_power: f64) -> f64 {
    if snr_db.is_infinite() {
        return 0.0;
    }
    (signal_power / 10f64.powf(snr_db / 10.0)).sqrt()
}

fn signed_bin(k: usize, m: usize) -> f64 {
    if k <= m / 2 {
        k as f64
    } else {
        k as f64 - m as f64
    }
}

pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_in_place(buf: &mut [C64]) {
    let fft = plan(buf.len(), rustfft::FftDirection::Forward);
    fft.process(buf);
}

pub(crate) fn ifft_in_place(buf: &mut [C64]) {
    let fft = plan(buf.len(), rustfft::FftDirection::Inverse);
    fft.process(buf);
    let scale = 1.0 / buf.len() as f64;
    for s in buf.iter_mut() {
        *s *= scale;
    }
}

fn plan(len: usize, dir: rustfft::FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_tone_spec() -> WaveformSpec {
        WaveformSpec {
            kind: WaveformKind::TwoToneLfm,
            pulse_duration: 1e-6,
            bandwidth: 40e6,
            sample_rate: 200e6,
            carrier_hz: 2.1e9,
        }
    }

    #[test]
    fn cw_pulse_is_rectangular() {
        let spec = WaveformSpec {
            kind: WaveformKind::CwPulse,
            pulse_duration: 1e-6,
            bandwidth: 1e6,
            sample_rate: 200e6,
            carrier_hz: 1.05e9,
        };
        let s = synthesize(&spec).unwrap();
        assert_eq!(s.len(), 200);
        for c in &s.samples {
            assert!((c.norm() - 1.0).abs() < 1e-12, "not unit magnitude: {c}");
        }
    }

    #[test]
    fn nyquist_violation_rejected() {
        let mut spec = two_tone_spec();
        spec.sample_rate = 79e6;
        assert!(matches!(synthesize(&spec), Err(SimError::Nyquist { .. })));
    }

    #[test]
    fn lfm_autocorrelation_peaks_at_zero_lag() {
        let spec = WaveformSpec {
            kind: WaveformKind::LfmUp,
            pulse_duration: 1e-6,
            bandwidth: 40e6,
            sample_rate: 200e6,
            carrier_hz: 2.1e9,
        };
        let s = synthesize(&spec).unwrap();
        let mf = matched_filter(&s, &s).unwrap();
        let peak = mf.samples.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!((mf.samples[0].norm() - peak).abs() < 1e-9, "peak not at zero lag");
        assert!(
            (peak - s.len() as f64).abs() < 1e-6,
            "autocorrelation peak {} != {}",
            peak,
            s.len()
        );
    }

    #[test]
    fn two_tone_spectrum_has_bands_separated_by_tone_spacing() {
        let spec = two_tone_spec();
        let s = synthesize(&spec).unwrap();
        let m = next_pow2(s.len() * 8);
        let mut buf = vec![C64::new(0.0, 0.0); m];
        buf[..s.len()].copy_from_slice(&s.samples);
        fft_in_place(&mut buf);
        let df = spec.sample_rate / m as f64;
        // Power centroid of each half-spectrum.
        let (mut pw_pos, mut fw_pos, mut pw_neg, mut fw_neg) = (0.0, 0.0, 0.0, 0.0);
        for (k, c) in buf.iter().enumerate() {
            let f = signed_bin(k, m) * df;
            let p = c.norm_sqr();
            if f >= 0.0 {
                pw_pos += p;
                fw_pos += p * f;
            } else {
                pw_neg += p;
                fw_neg += p * f;
            }
        }
        let sep = fw_pos / pw_pos - fw_neg / pw_neg;
        assert!(
            (sep - spec.bandwidth).abs() < 0.05 * spec.bandwidth,
            "band separation {:.3} MHz, expected {:.3} MHz",
            sep / 1e6,
            spec.bandwidth / 1e6
        );
    }

    #[test]
    fn matched_filter_integer_delay() {
        let spec = two_tone_spec();
        let s = synthesize(&spec).unwrap();
        let d = delay_signal(&s, 37.0);
        let mf = matched_filter(&d, &s).unwrap();
        let mags: Vec<f64> = mf.samples.iter().map(|c| c.norm()).collect();
        assert_eq!(argmax(&mags), 37);
    }

    #[test]
    fn matched_filter_of_zeros_is_zero() {
        let spec = two_tone_spec();
        let s = synthesize(&spec).unwrap();
        let zeros = SampledSignal {
            samples: vec![C64::new(0.0, 0.0); 512],
            sample_rate: spec.sample_rate,
            start_time: 0.0,
        };
        let mf = matched_filter(&zeros, &s).unwrap();
        assert!(mf.samples.iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn matched_filter_rejects_rate_mismatch() {
        let spec = two_tone_spec();
        let s = synthesize(&spec).unwrap();
        let mut other = s.clone();
        other.sample_rate *= 2.0;
        assert!(matched_filter(&other, &s).is_err());
    }

    #[test]
    fn fractional_delay_oracle_337() {
        let spec = two_tone_spec();
        let s = synthesize(&spec).unwrap();
        let table = build_bias_table(&spec, 64).unwrap();
        let d = delay_signal(&s, 3.37);
        let mf = matched_filter(&d, &s).unwrap();
        let est = refine_peak(&mf, &table).unwrap();
        let pos = est.toa * spec.sample_rate;
        assert!(
            (pos - 3.37).abs() < 0.02,
            "refined position {pos:.4}, want 3.37 +- 0.02"
        );
    }

    #[test]
    fn refine_peak_symmetric_triangle_centered() {
        let tri: Vec<C64> = [0.0, 1.0, 2.0, 3.0, 2.0, 1.0, 0.0]
            .iter()
            .map(|&v| C64::new(v, 0.0))
            .collect();
        let sig = SampledSignal {
            samples: tri,
            sample_rate: 1.0,
            start_time: 0.0,
        };
        let est = refine_peak(&sig, &BiasTable::identity()).unwrap();
        assert_eq!(est.peak_index, 3);
        assert!(est.toa.fract().abs() < 1e-12, "fractional part {}", est.toa.fract());
    }

    #[test]
    fn refine_peak_boundary_is_error() {
        let mut v = vec![C64::new(0.0, 0.0); 32];
        v[0] = C64::new(5.0, 0.0);
        let sig = SampledSignal {
            samples: v,
            sample_rate: 1.0,
            start_time: 0.0,
        };
        assert!(refine_peak(&sig, &BiasTable::identity()).is_err());
    }

    #[test]
    fn bias_table_near_zero_at_aligned_delay() {
        let spec = two_tone_spec();
        let table = build_bias_table(&spec, 64).unwrap();
        assert!(
            table.correction(0.0).abs() < 5e-3,
            "on-sample correction {}",
            table.correction(0.0)
        );
    }

    #[test]
    fn bias_table_odd_symmetric_about_half() {
        let spec = two_tone_spec();
        let table = build_bias_table(&spec, 64).unwrap();
        for i in 1..16 {
            let f = i as f64 / 32.0;
            let a = table.correction(f);
            let b = table.correction(1.0 - f);
            assert!(
                (a + b).abs() < 8e-3,
                "asymmetry at {f}: {a:.5} vs {b:.5}"
            );
        }
    }

    #[test]
    fn bias_table_sweep_beats_raw_qls() {
        let spec = two_tone_spec();
        let table = build_bias_table(&spec, 64).unwrap();
        let template = synthesize(&spec).unwrap();
        let raw = BiasTable::identity();
        let (mut max_raw, mut max_cor) = (0.0f64, 0.0f64);
        for i in 0..101 {
            let frac = i as f64 / 101.0;
            let d = delay_signal(&template, 500.0 + frac);
            let mf = matched_filter(&d, &template).unwrap();
            let er = refine_peak(&mf, &raw).unwrap().toa * spec.sample_rate - (500.0 + frac);
            let ec = refine_peak(&mf, &table).unwrap().toa * spec.sample_rate - (500.0 + frac);
            max_raw = max_raw.max(er.abs());
            max_cor = max_cor.max(ec.abs());
        }
        assert!(
            max_cor * 2.0 <= max_raw,
            "bias table should at least halve the max residual: raw {max_raw:.5}, corrected {max_cor:.5}"
        );
        // 50 ps at 200 MSa/s is 0.01 samples.
        assert!(
            max_cor < 0.01,
            "corrected residual {max_cor:.5} samples exceeds 50 ps"
        );
    }

    #[test]
    fn toa_shift_equivariant() {
        let spec = two_tone_spec();
        let template = synthesize(&spec).unwrap();
        let table = build_bias_table(&spec, 64).unwrap();
        let base = {
            let d = delay_signal(&template, 100.0);
            let mf = matched_filter(&d, &template).unwrap();
            refine_peak(&mf, &table).unwrap().toa * spec.sample_rate
        };
        for delta in [0.25, 1.5, 7.77, 30.2] {
            let d = delay_signal(&template, 100.0 + delta);
            let mf = matched_filter(&d, &template).unwrap();
            let pos = refine_peak(&mf, &table).unwrap().toa * spec.sample_rate;
            assert!(
                (pos - base - delta).abs() < 0.02,
                "shift by {delta}: moved {}",
                pos - base
            );
        }
    }

    #[test]
    fn peak_magnitude_invariant_under_phase_rotation() {
        let spec = two_tone_spec();
        let template = synthesize(&spec).unwrap();
        let d = delay_signal(&template, 50.5);
        let mf0 = matched_filter(&d, &template).unwrap();
        let m0 = refine_peak(&mf0, &BiasTable::identity()).unwrap().peak_magnitude;
        let mut rot = d.clone();
        let ph = C64::from_polar(1.0, 1.234);
        for s in rot.samples.iter_mut() {
            *s *= ph;
        }
        let mf1 = matched_filter(&rot, &template).unwrap();
        let m1 = refine_peak(&mf1, &BiasTable::identity()).unwrap().peak_magnitude;
        assert!((m0 - m1).abs() / m0 < 1e-12, "{m0} vs {m1}");
    }

    #[test]
    fn toa_error_shrinks_with_snr() {
        let spec = two_tone_spec();
        let template = synthesize(&spec).unwrap();
        let table = build_bias_table(&spec, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let power = mean_power(&template.samples);
        let mut stds = Vec::new();
        for snr_db in [0.0, 10.0, 20.0, 30.0] {
            let sigma = awgn_sigma_for_snr(snr_db, power);
            let mut errs = Vec::new();
            for t in 0..200 {
                let frac = (t as f64 * 0.37).fract();
                let mut d = delay_signal(&template, 300.0 + frac);
                add_awgn(&mut d.samples, sigma, &mut rng);
                let mf = matched_filter(&d, &template).unwrap();
                let est = refine_peak(&mf, &table).unwrap();
                errs.push(est.toa * spec.sample_rate - (300.0 + frac));
            }
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                / (errs.len() - 1) as f64;
            stds.push(var.sqrt());
        }
        for w in stds.windows(2) {
            assert!(
                w[1] < w[0],
                "ToA std should fall with SNR: {stds:?}"
            );
        }
    }

    #[test]
    fn bandlimited_refinement_recovers_exact_magnitude_and_position() {
        let spec = WaveformSpec {
            kind: WaveformKind::CwPulse,
            pulse_duration: 1e-6,
            bandwidth: 1e6,
            sample_rate: 200e6,
            carrier_hz: 1.05e9,
        };
        let template = synthesize(&spec).unwrap();
        for frac in [0.0, 0.21, 0.5, 0.83] {
            let d = delay_signal(&template, 600.0 + frac);
            let mf = matched_filter(&d, &template).unwrap();
            let mags: Vec<f64> = mf.samples.iter().map(|c| c.norm()).collect();
            let peak = refine_peak_bandlimited(&mf.samples, argmax(&mags));
            assert!(
                (peak.position - (600.0 + frac)).abs() < 1e-5,
                "frac {frac}: position {}",
                peak.position
            );
            let expect = template.len() as f64;
            assert!(
                (peak.value.norm() - expect).abs() / expect < 1e-7,
                "frac {frac}: magnitude {} vs {expect}",
                peak.value.norm()
            );
        }
    }

    #[test]
    fn awgn_realizes_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = awgn_sigma_for_snr(20.0, 1.0);
        let n = 200_000;
        let mut buf = vec![C64::new(0.0, 0.0); n];
        add_awgn(&mut buf, sigma, &mut rng);
        let p = mean_power(&buf);
        let snr = 10.0 * (1.0 / p).log10();
        assert!((snr - 20.0).abs() < 0.1, "measured noise SNR {snr}");
    }
}
