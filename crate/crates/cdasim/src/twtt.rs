//! Two-way time transfer: paired over-the-air ToA exchanges between nodes,
//! and the offset/range estimators computed from the resulting timestamp
//! quads.
//!
//! Sign convention, used everywhere: `estimate_offset` of a pair (n, m)
//! returns clock m minus clock n, positive when m runs ahead. A quad with
//! the roles swapped estimates the negation.

use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::consensus::{BiasMatrix, Graph};
use crate::error::SimError;
use crate::signal::{build_bias_table, synthesize, BiasTable, SampledSignal, WaveformSpec};
use crate::world::{World, WINDOW_GUARD_SAMPLES};
use crate::SPEED_OF_LIGHT;

/// The four exchanged timestamps of one two-way exchange, local seconds.
#[derive(Debug, Clone, Copy)]
pub struct TimestampQuad {
    pub t_tx_n: f64,
    pub t_rx_m: f64,
    pub t_tx_m: f64,
    pub t_rx_n: f64,
    pub epoch: usize,
    pub pair: (usize, usize),
}

/// Offset of clock m relative to clock n, halved difference of the two
/// one-way pseudo-delays.
pub fn estimate_offset(q: &TimestampQuad) -> f64 {
    0.5 * ((q.t_rx_m - q.t_tx_n) - (q.t_rx_n - q.t_tx_m))
}

/// Range between the pair from the summed pseudo-delays.
pub fn estimate_range(q: &TimestampQuad) -> f64 {
    0.5 * SPEED_OF_LIGHT * ((q.t_rx_m - q.t_tx_n) + (q.t_rx_n - q.t_tx_m))
}

#[derive(Debug, Clone, Copy)]
pub struct PairEstimate {
    pub pair: (usize, usize),
    /// Seconds, clock `pair.1` minus clock `pair.0`.
    pub offset: f64,
    /// Meters; may go slightly negative under noise at zero distance.
    pub range: f64,
    pub epoch: usize,
}

/// Precomputed per-waveform state shared by all exchanges of a stage.
#[derive(Debug, Clone)]
pub struct SyncWaveform {
    pub spec: WaveformSpec,
    pub template: SampledSignal,
    pub bias: BiasTable,
}

impl SyncWaveform {
    pub fn new(spec: WaveformSpec) -> Result<Self, SimError> {
        let template = synthesize(&spec)?;
        let bias = build_bias_table(&spec, crate::signal::DEFAULT_BIAS_BINS)?;
        Ok(SyncWaveform {
            spec,
            template,
            bias,
        })
    }

    /// Template and bias table are pure functions of the spec and the table
    /// is expensive to build, so repeated runs share them process-wide.
    pub fn cached(spec: WaveformSpec) -> Result<Arc<SyncWaveform>, SimError> {
        static CACHE: OnceLock<Mutex<Vec<(WaveformSpec, Arc<SyncWaveform>)>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
        let mut held = cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, wf)) = held.iter().find(|(s, _)| *s == spec) {
            return Ok(Arc::clone(wf));
        }
        let wf = Arc::new(SyncWaveform::new(spec)?);
        held.push((spec, Arc::clone(&wf)));
        Ok(wf)
    }
}

/// TDMA schedule geometry for one sync stage. All times are in nominal local
/// seconds: after coarse alignment every node runs the same schedule on its
/// own clock, and `tolerance` is the largest pairwise clock offset the
/// capture windows absorb.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TdmaPlan {
    pub tolerance: f64,
    pub slot_period: f64,
    pub epoch_period: f64,
}

/// Propagation + hardware delay allowance built into every capture window.
const PROP_ALLOWANCE_S: f64 = 2e-6;

impl TdmaPlan {
    /// Builds a plan whose windows tolerate `tolerance` of pairwise offset
    /// for the given waveform, with slot boundaries on whole samples.
    pub fn for_stage(tolerance: f64, spec: &WaveformSpec, epoch_period: f64) -> Self {
        let fs = spec.sample_rate;
        let window_s = Self::window_len(tolerance, spec) as f64 / fs;
        let raw = window_s + spec.pulse_duration + PROP_ALLOWANCE_S;
        let slot_period = (raw * fs).ceil() / fs;
        TdmaPlan {
            tolerance,
            slot_period,
            epoch_period,
        }
    }

    fn window_len(tolerance: f64, spec: &WaveformSpec) -> usize {
        let fs = spec.sample_rate;
        let pulse = spec.n_samples();
        ((2.0 * tolerance + PROP_ALLOWANCE_S) * fs).ceil() as usize
            + pulse
            + 2 * WINDOW_GUARD_SAMPLES
    }

    pub fn window_samples(&self, spec: &WaveformSpec) -> usize {
        Self::window_len(self.tolerance, spec)
    }

    /// Capture windows open this long before the nominal transmit time.
    pub fn window_lead(&self, spec: &WaveformSpec) -> f64 {
        self.tolerance + WINDOW_GUARD_SAMPLES as f64 / spec.sample_rate
    }

    /// Transmit instant of node `i`'s slot, relative to the epoch base.
    pub fn slot_offset(&self, i: usize) -> f64 {
        i as f64 * self.slot_period
    }

    pub fn epoch_duration(&self, n_nodes: usize) -> f64 {
        self.slot_period * n_nodes as f64
    }
}

/// One full two-way exchange between nodes n and m: n transmits in its slot
/// at local `t0_local`, m answers one slot later. Mostly useful for tests
/// and oracles; epochs use `run_epoch`, where each transmission serves every
/// neighbor at once.
pub fn exchange(
    world: &mut World,
    n: usize,
    m: usize,
    wf: &SyncWaveform,
    plan: &TdmaPlan,
    t0_local: f64,
    epoch: usize,
) -> Result<TimestampQuad, SimError> {
    if n == m {
        return Err(SimError::Config("exchange needs distinct nodes".into()));
    }
    let lead = plan.window_lead(&wf.spec);
    let win = plan.window_samples(&wf.spec);
    let t_tx_n = t0_local;
    let fwd = world.one_way(
        n,
        m,
        &wf.template,
        &wf.template,
        wf.spec.carrier_hz,
        t_tx_n,
        t_tx_n - lead,
        win,
        &wf.bias,
    )?;
    let t_tx_m = t0_local + plan.slot_period;
    let rev = world.one_way(
        m,
        n,
        &wf.template,
        &wf.template,
        wf.spec.carrier_hz,
        t_tx_m,
        t_tx_m - lead,
        win,
        &wf.bias,
    )?;
    Ok(TimestampQuad {
        t_tx_n,
        t_rx_m: fwd.toa,
        t_tx_m,
        t_rx_n: rev.toa,
        epoch,
        pair: (n, m),
    })
}

#[derive(Debug)]
pub struct EpochResult {
    pub offsets: BiasMatrix,
    pub estimates: Vec<PairEstimate>,
    pub lost: Vec<(usize, usize)>,
}

/// One TDMA sync epoch over the graph: each node transmits once in its slot
/// (all neighbors capture), then quads are assembled per edge from the 2|E|
/// one-way measurements and reduced to offset/range estimates.
pub fn run_epoch(
    world: &mut World,
    g: &Graph,
    wf: &SyncWaveform,
    plan: &TdmaPlan,
    base_local: f64,
    epoch: usize,
) -> Result<EpochResult, SimError> {
    let n = world.n_nodes();
    if g.nodes != n {
        return Err(SimError::Config(format!(
            "graph has {} nodes, world has {n}",
            g.nodes
        )));
    }
    let lead = plan.window_lead(&wf.spec);
    let win = plan.window_samples(&wf.spec);
    // toa[rx][tx]: measured arrival at rx of tx's slot, rx-local seconds.
    let mut toa = vec![vec![None; n]; n];
    let mut lost = Vec::new();
    for tx in 0..n {
        let t_tx = base_local + plan.slot_offset(tx);
        let t_emit = world.emit(tx, t_tx, wf.spec.pulse_duration);
        for rx in g.neighbors(tx) {
            match world.capture(
                tx,
                rx,
                t_emit,
                &wf.template,
                &wf.template,
                wf.spec.carrier_hz,
                t_tx - lead,
                win,
                &wf.bias,
            ) {
                Ok(est) => toa[rx][tx] = Some(est.toa),
                Err(SimError::LostExchange { .. }) => lost.push((tx, rx)),
                Err(e) => return Err(e),
            }
        }
    }
    let mut offsets = BiasMatrix::new(n);
    let mut estimates = Vec::new();
    for &(a, b) in &g.edges {
        let (fwd, rev) = (toa[b][a], toa[a][b]);
        let (Some(t_rx_m), Some(t_rx_n)) = (fwd, rev) else {
            continue;
        };
        let quad = TimestampQuad {
            t_tx_n: base_local + plan.slot_offset(a),
            t_rx_m,
            t_tx_m: base_local + plan.slot_offset(b),
            t_rx_n,
            epoch,
            pair: (a, b),
        };
        let offset = estimate_offset(&quad);
        offsets.record(b, a, offset);
        estimates.push(PairEstimate {
            pair: (a, b),
            offset,
            range: estimate_range(&quad),
            epoch,
        });
    }
    Ok(EpochResult {
        offsets,
        estimates,
        lost,
    })
}
