//! Local clock model: an affine map of global time plus a slow random-walk
//! bias and white per-read jitter. Consensus corrections accumulate in a
//! separate term so they can be inspected and replayed.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Noise and initialization parameters for one node's clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockNoiseConfig {
    /// Diffusion rate of the slow bias, seconds per sqrt(second).
    pub random_walk_sigma: f64,
    /// Std of the white per-read jitter, seconds.
    pub jitter_sigma: f64,
    /// Initial static offsets are drawn uniformly from +-this range, seconds.
    pub initial_offset_range: f64,
    /// Std of the per-run relative frequency error. Zero models active
    /// frequency syntonization (alpha pinned to exactly 1).
    pub residual_freq_offset_sigma: f64,
}

impl Default for ClockNoiseConfig {
    fn default() -> Self {
        ClockNoiseConfig {
            random_walk_sigma: 1e-13,
            jitter_sigma: 10e-12,
            initial_offset_range: 10e-3,
            residual_freq_offset_sigma: 0.0,
        }
    }
}

impl ClockNoiseConfig {
    pub fn validate(&self) -> Result<(), crate::SimError> {
        for (name, v) in [
            ("random_walk_sigma", self.random_walk_sigma),
            ("jitter_sigma", self.jitter_sigma),
            ("initial_offset_range", self.initial_offset_range),
            ("residual_freq_offset_sigma", self.residual_freq_offset_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(crate::SimError::Config(format!(
                    "clock noise {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One node's clock. `read` is the paper-facing operation: what this clock
/// shows at a given global instant.
#[derive(Debug, Clone)]
pub struct ClockState {
    pub alpha: f64,
    pub beta: f64,
    pub delta_dynamic: f64,
    pub noise_sigma: f64,
    pub correction: f64,
    random_walk_sigma: f64,
    walk_time: f64,
}

impl ClockState {
    pub fn ideal() -> Self {
        ClockState {
            alpha: 1.0,
            beta: 0.0,
            delta_dynamic: 0.0,
            noise_sigma: 0.0,
            correction: 0.0,
            random_walk_sigma: 0.0,
            walk_time: 0.0,
        }
    }

    pub fn with_offset(beta: f64) -> Self {
        ClockState {
            beta,
            ..ClockState::ideal()
        }
    }

    /// Draws initial offset (and frequency error, if modeled) from the config.
    pub fn init(cfg: &ClockNoiseConfig, rng: &mut impl Rng) -> Self {
        let beta = if cfg.initial_offset_range > 0.0 {
            Uniform::new_inclusive(-cfg.initial_offset_range, cfg.initial_offset_range)
                .sample(rng)
        } else {
            0.0
        };
        let alpha = if cfg.residual_freq_offset_sigma > 0.0 {
            1.0 + Normal::new(0.0, cfg.residual_freq_offset_sigma)
                .unwrap()
                .sample(rng)
        } else {
            1.0
        };
        ClockState {
            alpha,
            beta,
            delta_dynamic: 0.0,
            noise_sigma: cfg.jitter_sigma,
            correction: 0.0,
            random_walk_sigma: cfg.random_walk_sigma,
            walk_time: 0.0,
        }
    }

    /// Local time shown at global time `t`: alpha*t + beta + delta(t) + nu +
    /// correction, with delta advanced by the random walk since the last
    /// query and nu a fresh jitter draw.
    pub fn read(&mut self, t: f64, rng: &mut impl Rng) -> f64 {
        self.advance_walk(t, rng);
        let nu = self.jitter(rng);
        self.time_of(t) + nu
    }

    /// The jitter-free component of the clock map. Used for ground truth and
    /// for LO phase (oscillator phase-noise spectra are out of scope).
    pub fn time_of(&self, t: f64) -> f64 {
        self.alpha * t + self.beta + self.delta_dynamic + self.correction
    }

    /// Ground-truth offset from global time, jitter-free.
    pub fn offset_from_global(&self, t: f64) -> f64 {
        self.time_of(t) - t
    }

    /// Jitter-free inverse of `time_of`: the nominal global instant at which
    /// this clock shows `local`. Consumes no randomness, so it can place
    /// capture windows without disturbing the event sequence.
    pub fn nominal_global_time(&self, local: f64) -> f64 {
        (local - self.beta - self.delta_dynamic - self.correction) / self.alpha
    }

    /// Global instant at which this clock shows `local`; inverse of `read`,
    /// with its own fresh jitter draw (e.g. the physical emission instant of
    /// a sample scheduled at a local timestamp).
    pub fn global_event_time(&mut self, local: f64, rng: &mut impl Rng) -> f64 {
        let approx = (local - self.beta - self.delta_dynamic - self.correction) / self.alpha;
        self.advance_walk(approx, rng);
        let nu = self.jitter(rng);
        (local - self.beta - self.delta_dynamic - self.correction - nu) / self.alpha
    }

    pub fn apply_correction(&mut self, amount: f64) {
        self.correction += amount;
    }

    /// LO phase the node's synthesizer produces at global time `t`,
    /// reduced to [0, 2pi).
    pub fn lo_phase(&self, t: f64, carrier_hz: f64, phi0: f64) -> f64 {
        debug_assert!(carrier_hz > 0.0);
        let phase = 2.0 * std::f64::consts::PI * carrier_hz * self.time_of(t) + phi0;
        phase.rem_euclid(2.0 * std::f64::consts::PI)
    }

    fn advance_walk(&mut self, t: f64, rng: &mut impl Rng) {
        let dt = t - self.walk_time;
        if dt > 0.0 {
            if self.random_walk_sigma > 0.0 {
                let step = Normal::new(0.0, self.random_walk_sigma * dt.sqrt())
                    .unwrap()
                    .sample(rng);
                self.delta_dynamic += step;
            }
            self.walk_time = t;
        }
    }

    fn jitter(&self, rng: &mut impl Rng) -> f64 {
        if self.noise_sigma > 0.0 {
            Normal::new(0.0, self.noise_sigma).unwrap().sample(rng)
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_clock_reads_global_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = ClockState::ideal();
        assert_eq!(c.read(1.0, &mut rng), 1.0);
    }

    #[test]
    fn static_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = ClockState::with_offset(5e-9);
        assert_eq!(c.read(0.0, &mut rng), 5e-9);
    }

    #[test]
    fn jitter_std_matches_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut c = ClockState::ideal();
        c.noise_sigma = 10e-12;
        let n = 10_000;
        let reads: Vec<f64> = (0..n).map(|_| c.read(1.0, &mut rng) - 1.0).collect();
        let mean = reads.iter().sum::<f64>() / n as f64;
        let var = reads.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
        let std_ps = var.sqrt() * 1e12;
        assert!(
            (9.0..=11.0).contains(&std_ps),
            "sample jitter std {std_ps} ps"
        );
    }

    #[test]
    fn noiseless_read_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = ClockState::with_offset(1e-3);
        c.alpha = 1.0 + 3e-9;
        let r1 = c.read(2.0, &mut rng);
        let r2 = c.read(7.5, &mut rng);
        assert!(((r2 - r1) - c.alpha * 5.5).abs() < 1e-15);
    }

    #[test]
    fn correction_is_additive_and_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = ClockState::with_offset(2e-6);
        let before = c.read(1.0, &mut rng);
        c.apply_correction(3e-9);
        c.apply_correction(-1e-9);
        let after = c.read(1.0, &mut rng);
        assert!((after - before - 2e-9).abs() < 1e-15);
        c.apply_correction(-c.beta - c.correction);
        assert_eq!(c.read(4.0, &mut rng), 4.0);
    }

    #[test]
    fn lo_phase_examples() {
        let c = ClockState::ideal();
        assert_eq!(c.lo_phase(0.0, 1.05e9, 0.0), 0.0);
        let period = ClockState::with_offset(1.0 / 1.05e9);
        let p = period.lo_phase(0.0, 1.05e9, 0.0);
        let tau = 2.0 * std::f64::consts::PI;
        assert!(p.min(tau - p) < 1e-6, "full period should wrap to ~0, got {p}");
        let c36 = ClockState::with_offset(36e-12);
        let expect = tau * 1.05e9 * 36e-12;
        assert!((c36.lo_phase(0.0, 1.05e9, 0.0) - expect).abs() < 1e-12);
        assert!((expect - 0.2375).abs() < 1e-3);
    }

    #[test]
    fn walk_trajectory_is_seed_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let cfg = ClockNoiseConfig {
                random_walk_sigma: 1e-12,
                jitter_sigma: 5e-12,
                initial_offset_range: 1e-3,
                residual_freq_offset_sigma: 1e-9,
            };
            let mut c = ClockState::init(&cfg, &mut rng);
            (0..100).map(|i| c.read(i as f64 * 0.1, &mut rng)).collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn walk_variance_grows_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 1e-12;
        let n_clocks = 400;
        let n_steps = 10_000;
        let dt = 1e-2;
        let mut mid = Vec::with_capacity(n_clocks);
        let mut end = Vec::with_capacity(n_clocks);
        for _ in 0..n_clocks {
            let mut c = ClockState::ideal();
            c.random_walk_sigma = sigma;
            for k in 1..=n_steps {
                c.read(k as f64 * dt, &mut rng);
                if k == n_steps / 2 {
                    mid.push(c.delta_dynamic);
                }
            }
            end.push(c.delta_dynamic);
        }
        let var = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let t_mid = n_steps as f64 / 2.0 * dt;
        let t_end = n_steps as f64 * dt;
        let slope_mid = var(&mid) / t_mid;
        let slope_end = var(&end) / t_end;
        for slope in [slope_mid, slope_end] {
            assert!(
                (slope - sigma * sigma).abs() < 0.2 * sigma * sigma,
                "walk variance slope {slope:.3e}, want {:.3e} +- 20%",
                sigma * sigma
            );
        }
    }

    #[test]
    fn global_event_time_inverts_read() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = ClockState::with_offset(4e-3);
        c.alpha = 1.0 + 2e-8;
        let t = c.global_event_time(10.0, &mut rng);
        assert!((c.time_of(t) - 10.0).abs() < 1e-15);
    }
}
