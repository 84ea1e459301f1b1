//! Browser bindings: a few self-contained experiments from the core library.
//! Every export returns a JSON string so the page stays plain JS; bad inputs
//! come back as `{"error": "..."}` instead of trapping.

use cdasim::beamform::{array_power_pattern, phasor_gain};
use cdasim::config::ScenarioConfig;
use cdasim::montecarlo::{crossing_sigma, probability_curve, TimingErrorStudyConfig};
use cdasim::{SimError, C64, SPEED_OF_LIGHT};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn render<T: Serialize>(v: Result<T, SimError>) -> String {
    match v {
        Ok(v) => serde_json::to_string(&v)
            .unwrap_or_else(|e| render::<()>(Err(SimError::Config(e.to_string())))),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[derive(Serialize)]
struct Scenario {
    node_x_m: Vec<f64>,
    position_error_mm: Vec<f64>,
    beamform_carrier_hz: f64,
    timing_sigma_s: f64,
}

/// The default six-node scenario, for the page to draw and label.
#[wasm_bindgen]
pub fn scenario_json() -> String {
    let cfg = ScenarioConfig::default();
    render(Ok(Scenario {
        node_x_m: cfg.geometry.nodes.iter().map(|p| p[0]).collect(),
        position_error_mm: cfg.position_error_mm.clone(),
        beamform_carrier_hz: cfg.beamform_carrier_hz,
        timing_sigma_s: cfg.timing_sigma_s,
    }))
}

#[derive(Serialize)]
struct Pattern {
    angles_deg: Vec<f64>,
    power_db: Vec<f64>,
}

/// Power pattern of the default array, phase-steered to `steer_deg`, on a
/// uniform grid over +-90 degrees.
#[wasm_bindgen]
pub fn pattern_json(carrier_hz: f64, steer_deg: f64, n_points: usize) -> String {
    let run = || -> Result<Pattern, SimError> {
        if !(16..=8192).contains(&n_points) {
            return Err(SimError::Config(format!("{n_points} grid points")));
        }
        let cfg = ScenarioConfig::default();
        let angles: Vec<f64> = (0..n_points)
            .map(|i| -90.0 + 180.0 * i as f64 / (n_points - 1) as f64)
            .collect();
        let k = 2.0 * std::f64::consts::PI * carrier_hz / SPEED_OF_LIGHT;
        let s0 = steer_deg.to_radians().sin();
        let weights: Vec<C64> = cfg
            .geometry
            .nodes
            .iter()
            .map(|p| C64::from_polar(1.0, -k * p[0] * s0))
            .collect();
        let power = array_power_pattern(&cfg.geometry, &weights, carrier_hz, &angles)?;
        let power_db = power
            .iter()
            .map(|&p| if p > 0.0 { (10.0 * p.log10()).max(-120.0) } else { -120.0 })
            .collect();
        Ok(Pattern { angles_deg: angles, power_db })
    };
    render(run())
}

#[derive(Serialize)]
struct SteeringCurves {
    angles_deg: Vec<f64>,
    ideal: Vec<f64>,
    with_errors: Vec<f64>,
}

/// Predicted coherent gain vs steering angle for perfectly surveyed node
/// positions and for the shipped survey errors scaled by `error_scale`.
#[wasm_bindgen]
pub fn steering_curves_json(carrier_hz: f64, error_scale: f64) -> String {
    let run = || -> Result<SteeringCurves, SimError> {
        if !(carrier_hz > 0.0) {
            return Err(SimError::Config(format!("carrier {carrier_hz} Hz")));
        }
        if !error_scale.is_finite() || error_scale < 0.0 {
            return Err(SimError::Config(format!("error scale {error_scale}")));
        }
        let cfg = ScenarioConfig::default();
        let true_b = cfg.geometry.baselines();
        let erred: Vec<f64> = true_b
            .iter()
            .zip(&cfg.position_error_mm)
            .map(|(b, e)| (b.abs() + error_scale * e * 1e-3).max(0.0))
            .collect();
        let angles: Vec<f64> = (0..=180).map(|i| i as f64 * 0.25).collect();
        let ideal = angles
            .iter()
            .map(|&a| phasor_gain(&true_b, carrier_hz, a))
            .collect();
        let with_errors = angles
            .iter()
            .map(|&a| phasor_gain(&erred, carrier_hz, a))
            .collect();
        Ok(SteeringCurves { angles_deg: angles, ideal, with_errors })
    };
    render(run())
}

#[derive(Serialize)]
struct ExceedanceCurve {
    n: usize,
    p_exceed: Vec<f64>,
    ci_low: Vec<f64>,
    ci_high: Vec<f64>,
    crossing_sigma_frac: Option<f64>,
}

#[derive(Serialize)]
struct Exceedance {
    sigma_fracs: Vec<f64>,
    threshold: f64,
    curves: Vec<ExceedanceCurve>,
}

/// Monte Carlo P(gain >= threshold) vs timing error for the standard array
/// sizes. `trials` per point; the page trades accuracy against latency.
#[wasm_bindgen]
pub fn exceedance_json(trials: usize) -> String {
    let run = || -> Result<Exceedance, SimError> {
        let cfg = TimingErrorStudyConfig {
            trials,
            ..TimingErrorStudyConfig::default()
        };
        let points = probability_curve(&cfg)?;
        let curves = cfg
            .array_sizes
            .iter()
            .map(|&n| {
                let per_n: Vec<_> = points.iter().filter(|p| p.n == n).copied().collect();
                ExceedanceCurve {
                    n,
                    p_exceed: per_n.iter().map(|p| p.p_exceed).collect(),
                    ci_low: per_n.iter().map(|p| p.ci_low).collect(),
                    ci_high: per_n.iter().map(|p| p.ci_high).collect(),
                    crossing_sigma_frac: crossing_sigma(&per_n, cfg.threshold),
                }
            })
            .collect();
        Ok(Exceedance {
            sigma_fracs: cfg.sigma_fracs.clone(),
            threshold: cfg.threshold,
            curves,
        })
    };
    render(run())
}
