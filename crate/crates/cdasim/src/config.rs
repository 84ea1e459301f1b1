//! Scenario configuration: one TOML document that pins every knob of every
//! experiment, with the six-node reference deployment as the default. Any
//! field may be omitted (the default fills in); any unknown key is an error,
//! so typos fail loudly instead of silently running the default.
//!
//! Seeds live in the config (or the CLI override); nothing ever seeds from
//! the wall clock.

use serde::{Deserialize, Serialize};

use crate::beamform::{ArrayGeometry, ScopeConfig};
use crate::channel::LinkModel;
use crate::clocks::ClockNoiseConfig;
use crate::consensus::Graph;
use crate::error::SimError;
use crate::montecarlo::TimingErrorStudyConfig;
use crate::pipeline::{ControlNetwork, StageSchedule};

/// Which sync graph connects the nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphTopology {
    Complete,
    Ring,
    Path,
}

impl GraphTopology {
    pub fn build(self, n: usize) -> Graph {
        match self {
            GraphTopology::Complete => Graph::complete(n),
            GraphTopology::Ring => Graph::ring(n),
            GraphTopology::Path => Graph::path(n),
        }
    }
}

/// Everything a run needs. The default reproduces the reference deployment:
/// six nodes on a sparse line, complete sync graph, 2.1 GHz sync waveforms,
/// 1.05 GHz beamforming, 120 fine epochs, the surveyed position errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub out_dir: String,
    pub sync_carrier_hz: f64,
    pub beamform_carrier_hz: f64,
    /// Fine-loop epochs after acquisition; 0 runs acquisition only.
    pub fine_epochs: usize,
    /// Independent gain measurements in the timing-error gain study.
    pub gain_trials: usize,
    /// Per-node timing-error sigma injected in the gain study, seconds.
    pub timing_sigma_s: f64,
    pub steer_angles_deg: Vec<f64>,
    pub steer_repeats: usize,
    /// Surveyed per-node baseline errors (added to the ranges the steering
    /// math uses), millimeters. Must match the node count.
    pub position_error_mm: Vec<f64>,
    pub pattern_angles_deg: Vec<f64>,
    pub graph: GraphTopology,
    pub geometry: ArrayGeometry,
    pub clock_noise: ClockNoiseConfig,
    pub link: LinkModel,
    pub scope: ScopeConfig,
    pub network: ControlNetwork,
    pub schedule: StageSchedule,
    pub montecarlo: TimingErrorStudyConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            out_dir: "out".into(),
            sync_carrier_hz: 2.1e9,
            beamform_carrier_hz: 1.05e9,
            fine_epochs: 120,
            gain_trials: 76,
            timing_sigma_s: 36e-12,
            steer_angles_deg: (0..=45).map(f64::from).collect(),
            steer_repeats: 2,
            position_error_mm: vec![0.0, 3.12, -4.87, 36.04, 2.35, 20.04],
            pattern_angles_deg: (-360..=360).map(|i| i as f64 * 0.25).collect(),
            graph: GraphTopology::Complete,
            geometry: ArrayGeometry::default(),
            clock_noise: ClockNoiseConfig::default(),
            link: LinkModel::default(),
            scope: ScopeConfig::default(),
            network: ControlNetwork::default(),
            schedule: StageSchedule::default(),
            montecarlo: TimingErrorStudyConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| SimError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Canonical text for fingerprinting: everything that affects the
    /// numbers. The output directory is presentation, not science, so the
    /// same experiment written elsewhere keeps the same fingerprint.
    pub fn fingerprint_source(&self) -> String {
        let mut c = self.clone();
        c.out_dir = String::new();
        c.to_toml_string()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.geometry.validate()?;
        self.clock_noise.validate()?;
        self.scope.validate()?;
        self.network.validate()?;
        self.schedule.validate()?;
        self.montecarlo.validate()?;
        let n = self.geometry.nodes.len();
        if self.position_error_mm.len() != n {
            return Err(SimError::Config(format!(
                "{} position errors for {} nodes",
                self.position_error_mm.len(),
                n
            )));
        }
        for &c in &[self.sync_carrier_hz, self.beamform_carrier_hz] {
            if !(c > 0.0) {
                return Err(SimError::Config(format!("carrier {c} Hz")));
            }
        }
        if self.gain_trials == 0 {
            return Err(SimError::Config("gain_trials must be >= 1".into()));
        }
        if self.steer_repeats == 0 {
            return Err(SimError::Config("steer_repeats must be >= 1".into()));
        }
        if !(self.timing_sigma_s >= 0.0) {
            return Err(SimError::Config(format!(
                "timing_sigma_s {} s",
                self.timing_sigma_s
            )));
        }
        for &a in self.steer_angles_deg.iter().chain(&self.pattern_angles_deg) {
            if !(-90.0..=90.0).contains(&a) {
                return Err(SimError::Config(format!(
                    "angle {a} degrees outside [-90, 90]"
                )));
            }
        }
        if self.steer_angles_deg.is_empty() || self.pattern_angles_deg.is_empty() {
            return Err(SimError::Config("angle grids must be nonempty".into()));
        }
        let graph = self.graph.build(n);
        graph.validate()?;
        Ok(())
    }

    /// Ranges fed to the steering math: true baselines plus the surveyed
    /// per-node errors.
    pub fn biased_ranges_m(&self) -> Vec<f64> {
        self.geometry
            .baselines()
            .iter()
            .zip(&self.position_error_mm)
            .map(|(b, e)| (b.abs() + e * 1e-3).max(0.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_the_reference_scenario() {
        let cfg = ScenarioConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.geometry.nodes.len(), 6);
        assert_eq!(cfg.fine_epochs, 120);
        assert_eq!(cfg.montecarlo.trials, 1000);
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = ScenarioConfig::default();
        let text = cfg.to_toml_string();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg = ScenarioConfig::from_toml_str(
            "seed = 9\nfine_epochs = 3\n[clock_noise]\njitter_sigma = 5e-12\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.fine_epochs, 3);
        assert_eq!(cfg.clock_noise.jitter_sigma, 5e-12);
        assert_eq!(cfg.gain_trials, 76);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioConfig::from_toml_str("sede = 1").is_err());
        assert!(ScenarioConfig::from_toml_str("[clock_noise]\njitter = 1e-12").is_err());
        assert!(ScenarioConfig::from_toml_str("[geometry]\nantenna = 3").is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_values() {
        let mut cfg = ScenarioConfig::default();
        cfg.position_error_mm.pop();
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.steer_angles_deg = vec![120.0];
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.montecarlo.trials = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.geometry.nodes.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn topology_builders_match_node_count() {
        for topo in [GraphTopology::Complete, GraphTopology::Ring, GraphTopology::Path] {
            let g = topo.build(6);
            g.validate().unwrap();
            assert_eq!(g.nodes, 6);
        }
    }

    #[test]
    fn fingerprint_source_ignores_output_location() {
        let a = ScenarioConfig::default();
        let mut b = ScenarioConfig::default();
        b.out_dir = "/somewhere/else".into();
        assert_eq!(a.fingerprint_source(), b.fingerprint_source());
        let mut c = ScenarioConfig::default();
        c.seed = 2;
        assert_ne!(a.fingerprint_source(), c.fingerprint_source());
    }

    #[test]
    fn biased_ranges_apply_survey_errors() {
        let cfg = ScenarioConfig::default();
        let r = cfg.biased_ranges_m();
        let b = cfg.geometry.baselines();
        assert_eq!(r[0], 0.0);
        assert!((r[3] - (b[3].abs() + 36.04e-3)).abs() < 1e-12);
    }
}
