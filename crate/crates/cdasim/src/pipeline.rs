//! Startup-to-steady-state synchronization flow: coarse packet alignment
//! over the control network, a refinement ladder that raises the sample rate
//! and tone separation while shrinking the capture windows, then the
//! repeating TWTT + consensus loop that holds the array at picosecond
//! alignment.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::consensus::{build_weights, compute_corrections, BiasMatrix, Graph, WeightMatrix};
use crate::error::SimError;
use crate::signal::{WaveformKind, WaveformSpec};
use crate::twtt::{run_epoch, SyncWaveform, TdmaPlan};
use crate::world::World;

/// Sync pulses are this many samples long at every stage, so pulse duration
/// shrinks as the sample rate rises.
pub const SYNC_PULSE_SAMPLES: usize = 200;

/// Capture tolerance of the steady-state loop, seconds.
pub const FINE_TOLERANCE_S: f64 = 5e-6;

/// Nominal base-to-base spacing of steady-state epochs, seconds.
pub const FINE_EPOCH_PERIOD_S: f64 = 10e-3;

/// Global instant the coarse packet exchange starts at.
pub const COARSE_START_S: f64 = 0.05;

/// Idle margin inserted between refinement stages and appended to epoch
/// periods that would otherwise be back-to-back.
const STAGE_GAP_S: f64 = 10e-3;

/// Margin between the end of the coarse exchange and the first RF epoch;
/// must exceed the worst post-coarse clock offset so every node's local
/// schedule still lies in its future.
const POST_COARSE_GAP_S: f64 = 0.25;

/// One refinement step: waveform and capture-window parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineStep {
    pub sample_rate: f64,
    pub tone_separation: f64,
    pub tdma_window: f64,
}

/// Ordered refinement ladder. Each step must be at least as tight as the
/// previous one: rates and tone separations nondecreasing, windows
/// nonincreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub steps: Vec<RefineStep>,
}

impl Default for StageSchedule {
    /// Five steps from 5 MSa/s, 2 MHz tones and 10 ms windows up to
    /// 200 MSa/s, 40 MHz and 5 us. Only the endpoints and the step count are
    /// prescribed; intermediate values interpolate geometrically.
    fn default() -> Self {
        StageSchedule::geometric(5, (5e6, 200e6), (2e6, 40e6), (10e-3, 5e-6))
    }
}

impl StageSchedule {
    /// `n` steps whose parameters interpolate geometrically between the
    /// given endpoints.
    pub fn geometric(
        n: usize,
        sample_rate: (f64, f64),
        tone_separation: (f64, f64),
        tdma_window: (f64, f64),
    ) -> Self {
        assert!(n >= 2, "a ladder needs at least two steps");
        let g = |lo: f64, hi: f64, k: usize| lo * (hi / lo).powf(k as f64 / (n - 1) as f64);
        let steps = (0..n)
            .map(|k| RefineStep {
                sample_rate: g(sample_rate.0, sample_rate.1, k),
                tone_separation: g(tone_separation.0, tone_separation.1, k),
                tdma_window: g(tdma_window.0, tdma_window.1, k),
            })
            .collect();
        StageSchedule { steps }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.steps.is_empty() {
            return Err(SimError::Config("empty refinement schedule".into()));
        }
        for (k, pair) in self.steps.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if b.sample_rate < a.sample_rate
                || b.tone_separation < a.tone_separation
                || b.tdma_window > a.tdma_window
            {
                return Err(SimError::Config(format!(
                    "refinement schedule must tighten monotonically, step {} does not",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    pub fn waveform_spec(&self, step: usize, carrier_hz: f64) -> WaveformSpec {
        let s = &self.steps[step];
        WaveformSpec {
            kind: WaveformKind::TwoToneLfm,
            pulse_duration: SYNC_PULSE_SAMPLES as f64 / s.sample_rate,
            bandwidth: s.tone_separation,
            sample_rate: s.sample_rate,
            carrier_hz,
        }
    }
}

/// Steady-state waveform: the full-rate end of the ladder.
pub fn fine_waveform_spec(carrier_hz: f64) -> WaveformSpec {
    WaveformSpec {
        kind: WaveformKind::TwoToneLfm,
        pulse_duration: 1e-6,
        bandwidth: 40e6,
        sample_rate: 200e6,
        carrier_hz,
    }
}

/// Control-plane link used for startup packet alignment. Per-direction
/// latency is `base_latency` plus an exponential draw with mean
/// `latency_jitter`; the responder answers after `turnaround`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlNetwork {
    pub base_latency: f64,
    pub latency_jitter: f64,
    pub turnaround: f64,
    pub rounds: usize,
    /// Probability that one whole round is dropped. Reliable transport by
    /// default.
    pub loss_prob: f64,
    /// Nodes that never answer; any of these aborts startup.
    pub unreachable: Vec<usize>,
}

impl Default for ControlNetwork {
    fn default() -> Self {
        ControlNetwork {
            base_latency: 2e-3,
            latency_jitter: 5e-3,
            turnaround: 1e-3,
            rounds: 16,
            loss_prob: 0.0,
            unreachable: Vec::new(),
        }
    }
}

impl ControlNetwork {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("base_latency", self.base_latency),
            ("latency_jitter", self.latency_jitter),
            ("turnaround", self.turnaround),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SimError::Config(format!(
                    "control network {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.rounds == 0 {
            return Err(SimError::Config("control network needs rounds >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(SimError::Config(format!(
                "loss_prob must be in [0, 1), got {}",
                self.loss_prob
            )));
        }
        Ok(())
    }

    fn draw_latency(&self, rng: &mut impl Rng) -> f64 {
        let jitter = if self.latency_jitter > 0.0 {
            Exp::new(1.0 / self.latency_jitter).unwrap().sample(rng)
        } else {
            0.0
        };
        self.base_latency + jitter
    }
}

#[derive(Debug, Clone)]
pub struct CoarseResult {
    /// Correction applied to each clock, seconds.
    pub corrections: Vec<f64>,
    /// Global time when the exchange finished; later stages start after it.
    pub end_global: f64,
}

/// Startup packet alignment: every node averages `rounds` two-way timestamp
/// exchanges with node 0 over the control network, then corrections
/// re-center the measured offsets on the network mean (the fixed point the
/// consensus stages steer to). Residual error is set by the asymmetry of the
/// per-direction latency draws, milliseconds at the default jitter.
pub fn coarse_align(
    world: &mut World,
    net: &ControlNetwork,
    start_global: f64,
) -> Result<CoarseResult, SimError> {
    net.validate()?;
    let n = world.n_nodes();
    let mut cursor = start_global;
    // theta[k] estimates clock 0 minus clock k; theta[0] stays 0.
    let mut theta = vec![0.0; n];
    for node in 1..n {
        if net.unreachable.contains(&node) {
            return Err(SimError::UnreachableNode(node));
        }
        let mut acc = 0.0;
        let mut got = 0usize;
        for _ in 0..net.rounds {
            let d_fwd = net.draw_latency(&mut world.rng);
            let d_rev = net.draw_latency(&mut world.rng);
            let dropped = net.loss_prob > 0.0 && world.rng.gen::<f64>() < net.loss_prob;
            let t1 = world.nodes[node].clock.read(cursor, &mut world.rng);
            let t2 = world.nodes[0].clock.read(cursor + d_fwd, &mut world.rng);
            let t3 = world.nodes[0]
                .clock
                .read(cursor + d_fwd + net.turnaround, &mut world.rng);
            let t4 = world.nodes[node]
                .clock
                .read(cursor + d_fwd + net.turnaround + d_rev, &mut world.rng);
            cursor += d_fwd + net.turnaround + d_rev;
            if dropped {
                continue;
            }
            acc += ((t2 - t1) + (t3 - t4)) / 2.0;
            got += 1;
        }
        if got == 0 {
            return Err(SimError::UnreachableNode(node));
        }
        theta[node] = acc / got as f64;
    }
    let mean = theta.iter().sum::<f64>() / n as f64;
    let corrections: Vec<f64> = theta.iter().map(|t| t - mean).collect();
    for (node, &c) in corrections.iter().enumerate() {
        world.nodes[node].clock.apply_correction(c);
    }
    Ok(CoarseResult {
        corrections,
        end_global: cursor,
    })
}

/// One row of a sync report: one node at one epoch, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncRow {
    pub epoch: usize,
    pub node: usize,
    /// Ground-truth clock offset from the array mean before this epoch's
    /// correction.
    pub true_offset_s: f64,
    /// Estimated minus true node offset: the part of the applied correction
    /// that the measurement got wrong.
    pub est_error_s: f64,
    /// Consensus correction applied this epoch.
    pub correction_s: f64,
    /// Whether this node's post-correction offset fits the next capture
    /// window.
    pub converged: bool,
}

/// Per-epoch, per-node record of a synchronization run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub rows: Vec<SyncRow>,
}

impl SyncReport {
    /// Rows must be grouped by strictly increasing epoch, nodes ascending
    /// within a group.
    pub fn validate(&self) -> Result<(), SimError> {
        for pair in self.rows.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let ordered = b.epoch > a.epoch || (b.epoch == a.epoch && b.node > a.node);
            if !ordered {
                return Err(SimError::Config(format!(
                    "sync report rows out of order at epoch {} node {}",
                    b.epoch, b.node
                )));
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.rows.iter().map(|r| r.node + 1).max().unwrap_or(0)
    }

    /// Mean |est_error| per node across all epochs present.
    pub fn per_node_mean_abs_error(&self) -> Vec<f64> {
        let n = self.n_nodes();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for r in &self.rows {
            sums[r.node] += r.est_error_s.abs();
            counts[r.node] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn max_abs_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.est_error_s.abs())
            .fold(0.0, f64::max)
    }
}

/// Shared schedule position: the next epoch's base (nominal local seconds,
/// meaningful once clocks are coarse-aligned) and index.
#[derive(Debug, Clone, Copy)]
pub struct SyncCursor {
    pub base_local: f64,
    pub epoch: usize,
}

impl SyncCursor {
    pub fn new(base_local: f64) -> Self {
        SyncCursor {
            base_local,
            epoch: 0,
        }
    }
}

/// The ideal bias matrix a perfect measurement would have produced, masked
/// identically to the measured one so lost exchanges drop out of both.
fn masked_ideal(measured: &BiasMatrix, true_off: &[f64]) -> BiasMatrix {
    let n = true_off.len();
    let mut ideal = BiasMatrix::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if measured.get(i, j).is_some() {
                ideal.record(i, j, true_off[i] - true_off[j]);
            }
        }
    }
    ideal
}

/// One measure-correct cycle. Returns the report rows and the post-correction
/// ground-truth spread (largest pairwise offset), which the caller checks
/// against the next stage's capture window.
#[allow(clippy::too_many_arguments)]
fn sync_epoch(
    world: &mut World,
    g: &Graph,
    w: &WeightMatrix,
    wf: &SyncWaveform,
    plan: &TdmaPlan,
    base_local: f64,
    epoch: usize,
    next_tolerance: f64,
) -> Result<(Vec<SyncRow>, f64), SimError> {
    let res = run_epoch(world, g, wf, plan, base_local, epoch)?;
    let n = world.n_nodes();
    let true_off: Vec<f64> = (0..n).map(|k| world.true_offset(k, base_local)).collect();
    let corr = compute_corrections(&res.offsets, w);
    let ideal = compute_corrections(&masked_ideal(&res.offsets, &true_off), w);
    for (node, &c) in corr.iter().enumerate() {
        world.nodes[node].clock.apply_correction(c);
    }
    let mean_pre = true_off.iter().sum::<f64>() / n as f64;
    let post: Vec<f64> = true_off.iter().zip(&corr).map(|(o, c)| o + c).collect();
    let mean_post = post.iter().sum::<f64>() / n as f64;
    let max = post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = post.iter().cloned().fold(f64::INFINITY, f64::min);
    let rows = (0..n)
        .map(|k| SyncRow {
            epoch,
            node: k,
            true_offset_s: true_off[k] - mean_pre,
            est_error_s: ideal[k] - corr[k],
            correction_s: corr[k],
            converged: (post[k] - mean_post).abs() <= next_tolerance / 2.0,
        })
        .collect();
    Ok((rows, max - min))
}

/// Runs the refinement ladder, one TWTT + consensus epoch per step. After
/// each step the ground-truth residual spread must fit the next step's
/// capture window (`final_tolerance` after the last step), otherwise the run
/// is declared diverged. Callers must have coarse-aligned the clocks to
/// within the first step's window.
pub fn run_refinement(
    world: &mut World,
    g: &Graph,
    schedule: &StageSchedule,
    carrier_hz: f64,
    final_tolerance: f64,
    cursor: &mut SyncCursor,
) -> Result<SyncReport, SimError> {
    schedule.validate()?;
    let w = build_weights(g)?;
    let n = world.n_nodes();
    let mut report = SyncReport::default();
    for (k, step) in schedule.steps.iter().enumerate() {
        let spec = schedule.waveform_spec(k, carrier_hz);
        let wf = SyncWaveform::cached(spec)?;
        let plan = TdmaPlan::for_stage(step.tdma_window, &spec, 0.0);
        let next_tol = schedule
            .steps
            .get(k + 1)
            .map(|s| s.tdma_window)
            .unwrap_or(final_tolerance);
        let (rows, residual) = sync_epoch(
            world,
            g,
            &w,
            &wf,
            &plan,
            cursor.base_local,
            cursor.epoch,
            next_tol,
        )?;
        report.rows.extend(rows);
        cursor.epoch += 1;
        cursor.base_local += plan.epoch_duration(n) + STAGE_GAP_S;
        if residual > next_tol {
            return Err(SimError::RefinementDiverged {
                step: k,
                residual_s: residual,
                tolerance_s: next_tol,
            });
        }
    }
    Ok(report)
}

/// Steady-state loop: TWTT + consensus with the full-rate two-tone waveform,
/// once per epoch period, recording per-node sync error against ground
/// truth.
pub fn run_fine_loop(
    world: &mut World,
    g: &Graph,
    epochs: usize,
    carrier_hz: f64,
    cursor: &mut SyncCursor,
) -> Result<SyncReport, SimError> {
    let w = build_weights(g)?;
    let spec = fine_waveform_spec(carrier_hz);
    let wf = SyncWaveform::cached(spec)?;
    let plan = TdmaPlan::for_stage(FINE_TOLERANCE_S, &spec, FINE_EPOCH_PERIOD_S);
    let n = world.n_nodes();
    let advance = plan.epoch_period.max(plan.epoch_duration(n) + STAGE_GAP_S);
    let mut report = SyncReport::default();
    for _ in 0..epochs {
        let (rows, _) = sync_epoch(
            world,
            g,
            &w,
            &wf,
            &plan,
            cursor.base_local,
            cursor.epoch,
            FINE_TOLERANCE_S,
        )?;
        report.rows.extend(rows);
        cursor.epoch += 1;
        cursor.base_local += advance;
    }
    Ok(report)
}

/// The whole startup flow: coarse packet alignment, refinement ladder, then
/// `fine_epochs` of the steady-state loop, with continuous epoch numbering
/// across the RF stages.
pub fn run_full(
    world: &mut World,
    g: &Graph,
    net: &ControlNetwork,
    schedule: &StageSchedule,
    fine_epochs: usize,
    carrier_hz: f64,
) -> Result<SyncReport, SimError> {
    run_full_with_cursor(world, g, net, schedule, fine_epochs, carrier_hz).map(|(r, _)| r)
}

/// `run_full` that also hands back the schedule cursor, for callers that
/// append further stages (calibration, gain trains) on the synced array.
pub fn run_full_with_cursor(
    world: &mut World,
    g: &Graph,
    net: &ControlNetwork,
    schedule: &StageSchedule,
    fine_epochs: usize,
    carrier_hz: f64,
) -> Result<(SyncReport, SyncCursor), SimError> {
    let coarse = coarse_align(world, net, COARSE_START_S)?;
    let mut cursor = SyncCursor::new(coarse.end_global + POST_COARSE_GAP_S);
    let mut report = run_refinement(
        world,
        g,
        schedule,
        carrier_hz,
        FINE_TOLERANCE_S,
        &mut cursor,
    )?;
    let fine = run_fine_loop(world, g, fine_epochs, carrier_hz, &mut cursor)?;
    report.rows.extend(fine.rows);
    Ok((report, cursor))
}
