//! Cycle-level accelerator model.
//!
//! Three units process each vector in order: the statistics calculator
//! (`p_d` lanes feeding an adder tree), the square-root inverter (or the
//! one-cycle predictor when the layer's ISD is skipped) and the
//! normalization unit (`p_n` lanes, `pipeline_depth` replicas). Samples are
//! pipelined across units by an event-driven scheduler. All arithmetic goes
//! through [`Datapath`], so outputs match the library path bit for bit.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibrate::IsdPredictor;
use crate::datapath::{
    Datapath, IsdOutcome, LaneValues, Lanes, NormKind, NormOutput, Precision, RawStats, Reciprocal,
    StatsOutcome,
};
use crate::error::{Error, Result};
use crate::norm::{IsdMode, NormConfig};
use crate::numerics::NumericFormat;
use crate::trace::ActivationTrace;

/// Fixed per-unit latencies in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Latencies {
    /// After the adder tree: square of mean, subtract.
    pub stats: u64,
    pub invsqrt: u64,
    /// Subtract-multiply and affine.
    pub norm: u64,
    /// Predictor multiply-accumulate when the inverter is bypassed.
    pub predict: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Self {
            stats: 3,
            invsqrt: 6,
            norm: 2,
            predict: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelConfig {
    pub p_d: usize,
    pub p_n: usize,
    pub format: NumericFormat,
    /// Statistics over the first `n_sub` elements; `None` means all of them.
    pub n_sub: Option<usize>,
    /// Number of normalization-unit replicas.
    pub pipeline_depth: usize,
    pub clock_hz: u64,
    pub latency: Latencies,
    pub precision: Precision,
}

impl Default for AccelConfig {
    fn default() -> Self {
        Self {
            p_d: 128,
            p_n: 128,
            format: NumericFormat::Fp32,
            n_sub: None,
            pipeline_depth: 1,
            clock_hz: 100_000_000,
            latency: Latencies::default(),
            precision: Precision::default(),
        }
    }
}

/// Smallest lane count the adder tree supports.
pub const MIN_LANES: usize = 8;

impl AccelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_d < MIN_LANES {
            return Err(Error::config("p_d", format!("must be >= {MIN_LANES}, got {}", self.p_d)));
        }
        if self.p_n < MIN_LANES {
            return Err(Error::config("p_n", format!("must be >= {MIN_LANES}, got {}", self.p_n)));
        }
        if self.pipeline_depth == 0 {
            return Err(Error::config("pipeline_depth", "must be >= 1"));
        }
        if self.clock_hz == 0 {
            return Err(Error::config("clock_hz", "must be positive"));
        }
        if self.n_sub == Some(0) {
            return Err(Error::config("n_sub", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_sub_for(&self, n: usize) -> Result<usize> {
        match self.n_sub {
            None => Ok(n),
            Some(k) if k >= 1 && k <= n => Ok(k),
            Some(k) => Err(Error::config(
                "n_sub",
                format!("must satisfy 1 <= n_sub <= N = {n}, got {k}"),
            )),
        }
    }

    /// Library configuration with identical arithmetic.
    pub fn norm_config(&self, layer: &LayerSpec) -> Result<NormConfig> {
        let n = layer.alpha.len();
        Ok(NormConfig::new(layer.kind, n)
            .with_affine(layer.alpha.clone(), layer.beta.clone())
            .with_format(self.format)
            .with_n_sub(self.n_sub_for(n)?)
            .with_mode(layer.mode)
            .with_precision(self.precision.clone()))
    }

    /// Elements streamed through the statistics unit.
    pub fn stats_elements(&self, n: usize) -> Result<usize> {
        Ok(if self.precision.full_mean { n } else { self.n_sub_for(n)? })
    }

    /// Per-sample stage cycles for a layer of width `n`.
    pub fn stage_cycles(&self, n: usize, kind: NormKind, mode: IsdMode) -> Result<StageCycles> {
        let stats = match (mode, kind) {
            (IsdMode::Predicted, NormKind::RmsNorm) => 0,
            _ => stats_cycles(self.stats_elements(n)?, self.p_d, self.latency.stats),
        };
        let invsqrt = match mode {
            IsdMode::Compute => self.latency.invsqrt,
            IsdMode::Predicted => self.latency.predict,
        };
        Ok(StageCycles {
            stats,
            invsqrt,
            norm: norm_cycles(n, self.p_n, self.latency.norm),
        })
    }
}

/// Per-layer unit description.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: NormKind,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mode: IsdMode,
}

impl LayerSpec {
    /// Identity affine.
    pub fn identity(kind: NormKind, n: usize, mode: IsdMode) -> Self {
        Self {
            kind,
            alpha: vec![1.0; n],
            beta: vec![0.0; n],
            mode,
        }
    }
}

pub fn ceil_log2(p: usize) -> u64 {
    (usize::BITS - (p.max(1) - 1).leading_zeros()) as u64
}

/// `ceil(n_eff / p_d) + ceil(log2 p_d) + c`.
pub fn stats_cycles(n_eff: usize, p_d: usize, c: u64) -> u64 {
    n_eff.div_ceil(p_d) as u64 + ceil_log2(p_d) + c
}

/// `ceil(n / p_n) + c`.
pub fn norm_cycles(n: usize, p_n: usize, c: u64) -> u64 {
    n.div_ceil(p_n) as u64 + c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageCycles {
    /// Zero when the unit is not used.
    pub stats: u64,
    pub invsqrt: u64,
    pub norm: u64,
}

impl StageCycles {
    pub fn sum(&self) -> u64 {
        self.stats + self.invsqrt + self.norm
    }
}

/// Closed-form makespan of `samples` identical jobs through the three units,
/// with `replicas` normalization units.
pub fn closed_form_total(c: StageCycles, samples: usize, replicas: usize) -> u64 {
    if samples == 0 {
        return 0;
    }
    let m = (samples - 1) as u64;
    let r = replicas.max(1) as u64;
    let upstream = c.stats + c.invsqrt;
    let period = c.stats.max(c.invsqrt);
    upstream + (m * period).max((m % r) * period + (m / r) * c.norm) + c.norm
}

/// Steady-state initiation interval.
pub fn initiation_interval(c: StageCycles, replicas: usize) -> u64 {
    c.stats.max(c.invsqrt).max(c.norm.div_ceil(replicas.max(1) as u64))
}

/// Unit stage names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Stats,
    Invsqrt,
    Predict,
    Norm(usize),
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Stats => f.write_str("stats"),
            Unit::Invsqrt => f.write_str("invsqrt"),
            Unit::Predict => f.write_str("predict"),
            Unit::Norm(r) => write!(f, "norm{r}"),
        }
    }
}

impl std::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stats" => Ok(Unit::Stats),
            "invsqrt" => Ok(Unit::Invsqrt),
            "predict" => Ok(Unit::Predict),
            _ => s
                .strip_prefix("norm")
                .and_then(|r| r.parse().ok())
                .map(Unit::Norm)
                .ok_or_else(|| Error::Domain(format!("unknown unit `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    End,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Start => "start",
            EventKind::End => "end",
        })
    }
}

impl std::str::FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(EventKind::Start),
            "end" => Ok(EventKind::End),
            _ => Err(Error::Domain(format!("unknown event `{s}`"))),
        }
    }
}

/// One scheduler log entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub cycle: u64,
    pub unit: Unit,
    pub sample: usize,
    pub layer: usize,
    pub kind: EventKind,
}

/// Start/end cycles of one sample in one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Span {
    pub unit: Unit,
    pub start: u64,
    pub end: u64,
}

/// Per-sample spans in stage order.
pub type SampleSpans = Vec<Span>;

#[derive(Debug, Clone, Copy)]
struct Stage {
    cycles: u64,
    replicas: usize,
    unit: fn(usize) -> Unit,
}

/// Event-driven schedule of `samples` jobs through `c`. Zero-cycle stages are
/// absent. Returns per-sample spans, the event log (cycles offset by `base`)
/// and the makespan.
pub fn schedule(
    c: StageCycles,
    mode: IsdMode,
    replicas: usize,
    samples: usize,
    layer: usize,
    base: u64,
) -> (Vec<SampleSpans>, Vec<Event>, u64) {
    let mut stages = Vec::new();
    if c.stats > 0 {
        stages.push(Stage { cycles: c.stats, replicas: 1, unit: |_| Unit::Stats });
    }
    stages.push(Stage {
        cycles: c.invsqrt,
        replicas: 1,
        unit: match mode {
            IsdMode::Compute => |_| Unit::Invsqrt,
            IsdMode::Predicted => |_| Unit::Predict,
        },
    });
    stages.push(Stage { cycles: c.norm, replicas: replicas.max(1), unit: Unit::Norm });

    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); stages.len()];
    queues[0].extend(0..samples);
    let mut free: Vec<Vec<bool>> = stages.iter().map(|s| vec![true; s.replicas]).collect();
    // (end cycle, stage, replica, sample)
    let mut pending: BinaryHeap<Reverse<(u64, usize, usize, usize)>> = BinaryHeap::new();
    let mut spans: Vec<SampleSpans> = vec![Vec::with_capacity(stages.len()); samples];
    let mut events = Vec::with_capacity(samples * stages.len() * 2);
    let mut now = 0u64;
    let mut makespan = 0u64;
    loop {
        // Retire everything finishing at `now`, then dispatch.
        while let Some(&Reverse((t, st, rep, s))) = pending.peek() {
            if t != now {
                break;
            }
            pending.pop();
            free[st][rep] = true;
            events.push(Event {
                cycle: base + t,
                unit: (stages[st].unit)(rep),
                sample: s,
                layer,
                kind: EventKind::End,
            });
            makespan = makespan.max(t);
            if st + 1 < stages.len() {
                queues[st + 1].push_back(s);
            }
        }
        for (st, stage) in stages.iter().enumerate() {
            while let Some(rep) = free[st].iter().position(|&f| f) {
                let Some(s) = queues[st].pop_front() else { break };
                free[st][rep] = false;
                let unit = (stage.unit)(rep);
                let end = now + stage.cycles;
                spans[s].push(Span { unit, start: now, end });
                events.push(Event {
                    cycle: base + now,
                    unit,
                    sample: s,
                    layer,
                    kind: EventKind::Start,
                });
                pending.push(Reverse((end, st, rep, s)));
            }
        }
        match pending.peek() {
            Some(&Reverse((t, ..))) => now = t,
            None => break,
        }
    }
    (spans, events, makespan)
}

/// Total cycles implied by an event log: the last `end` event.
pub fn replay_total(events: &[Event]) -> u64 {
    events
        .iter()
        .filter(|e| e.kind == EventKind::End)
        .map(|e| e.cycle)
        .max()
        .unwrap_or(0)
}

/// Checks that every unit starts a sample only after the previous unit of
/// the same layer finished it, and that no unit runs two samples at once.
pub fn audit_events(events: &[Event]) -> Result<()> {
    use std::collections::HashMap;
    let stage_rank = |u: Unit| match u {
        Unit::Stats => 0,
        Unit::Invsqrt | Unit::Predict => 1,
        Unit::Norm(_) => 2,
    };
    let mut ends: HashMap<(usize, usize, u8), u64> = HashMap::new();
    let mut starts: HashMap<(usize, usize, u8), u64> = HashMap::new();
    let mut busy: HashMap<Unit, Vec<(u64, u64)>> = HashMap::new();
    for e in events {
        let key = (e.layer, e.sample, stage_rank(e.unit));
        match e.kind {
            EventKind::Start => starts.insert(key, e.cycle),
            EventKind::End => ends.insert(key, e.cycle),
        };
    }
    for (&(layer, sample, rank), &start) in &starts {
        let end = *ends.get(&(layer, sample, rank)).ok_or_else(|| {
            Error::Domain(format!("sample {sample} layer {layer}: start without end"))
        })?;
        if rank > 0 {
            if let Some(&prev_end) = (0..rank).rev().find_map(|r| ends.get(&(layer, sample, r))) {
                if start < prev_end {
                    return Err(Error::Domain(format!(
                        "sample {sample} layer {layer}: stage {rank} starts at {start} before its input is ready at {prev_end}"
                    )));
                }
            }
        }
        let unit = events
            .iter()
            .find(|e| e.kind == EventKind::Start && (e.layer, e.sample, stage_rank(e.unit)) == (layer, sample, rank))
            .map(|e| e.unit)
            .expect("start present");
        busy.entry(unit).or_default().push((start, end));
    }
    for (unit, mut spans) in busy {
        spans.sort_unstable();
        if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(Error::Domain(format!(
                "{unit} overlaps: [{}, {}) and [{}, {})",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    Ok(())
}

/// Pairwise adder tree over one pass of lanes.
fn adder_tree(lanes: &[i128]) -> i128 {
    match lanes.len() {
        0 => 0,
        1 => lanes[0],
        n => {
            let (a, b) = lanes.split_at(n.div_ceil(2));
            adder_tree(a) + adder_tree(b)
        }
    }
}

/// Statistics over `lanes[..count]` in `p_d`-wide passes.
pub fn sim_stats_stage(
    dp: &Datapath,
    lanes: &Lanes,
    count: usize,
    p_d: usize,
    c_stats: u64,
) -> Result<(StatsOutcome, u64)> {
    let cycles = stats_cycles(count, p_d, c_stats);
    let Lanes::Fixed(z) = lanes else {
        return Ok((dp.stats(lanes, count)?, cycles));
    };
    if count == 0 || count > z.len() {
        return Err(Error::DimensionMismatch(format!(
            "statistics over {count} of {} elements",
            z.len()
        )));
    }
    let recip = Reciprocal::new(count);
    let (mut sum, mut sum_sq) = (0i128, 0i128);
    let mut squares = vec![0i128; p_d];
    for pass in z[..count].chunks(p_d) {
        sum += adder_tree(pass);
        // Lanes past the end of the vector are fed zeros.
        squares.fill(0);
        for (sq, &v) in squares.iter_mut().zip(pass) {
            *sq = dp.square_term(v, &recip);
        }
        sum_sq += adder_tree(&squares);
    }
    Ok((dp.finish_fixed(sum, sum_sq, &recip), cycles))
}

/// The inverter: fixed latency regardless of the value.
pub fn sim_invsqrt_stage(dp: &Datapath, stats: &RawStats, c_inv: u64) -> Result<(IsdOutcome, u64)> {
    Ok((dp.isd(stats)?, c_inv))
}

/// The normalization unit in `p_n`-wide chunks. Returns the output, the
/// saturation count and the cycle count.
pub fn sim_norm_stage(
    dp: &Datapath,
    lanes: &Lanes,
    stats: &RawStats,
    isd: &IsdOutcome,
    affine: &crate::datapath::Affine,
    p_n: usize,
    c_norm: u64,
) -> (NormOutput, usize, u64) {
    let n = lanes.len();
    let mut sat = 0;
    let mut out: Option<LaneValues> = None;
    for start in (0..n).step_by(p_n) {
        let (vals, s) = dp.normalize_range(lanes, start..(start + p_n).min(n), stats, &isd.raw, affine);
        sat += s;
        match &mut out {
            Some(o) => o.extend(vals),
            None => out = Some(vals),
        }
    }
    let out = out.unwrap_or(LaneValues::Float(Vec::new()));
    (dp.egress(out), sat, norm_cycles(n, p_n, c_norm))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stats_cycles: u64,
    pub invsqrt_cycles: u64,
    pub norm_cycles: u64,
    pub initiation_interval: u64,
    /// Per-sample spans, offsets relative to the layer start.
    pub samples: Vec<SampleSpans>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub mode: IsdMode,
    pub start_cycle: u64,
    pub total_cycles: u64,
    pub closed_form_cycles: u64,
    pub timing: StageTiming,
    pub outputs: Vec<NormOutput>,
    /// Decoded ISD applied to each sample.
    pub isds: Vec<f64>,
    pub saturations: usize,
    pub variance_clamps: usize,
}

/// Runs one layer over a batch. `predicted` supplies one ISD per sample in
/// predicted mode.
pub fn sim_layer(
    batch: &[Vec<f64>],
    layer: &LayerSpec,
    accel: &AccelConfig,
    predicted: Option<&[f64]>,
) -> Result<LayerReport> {
    sim_layer_at(batch, layer, accel, predicted, 0, 0, None)
}

fn sim_layer_at(
    batch: &[Vec<f64>],
    layer: &LayerSpec,
    accel: &AccelConfig,
    predicted: Option<&[f64]>,
    layer_index: usize,
    base: u64,
    events: Option<&mut Vec<Event>>,
) -> Result<LayerReport> {
    accel.validate()?;
    if batch.is_empty() {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    let n = layer.alpha.len();
    if layer.beta.len() != n {
        return Err(Error::DimensionMismatch("alpha and beta lengths differ".into()));
    }
    if let Some(i) = batch.iter().position(|z| z.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "sample {i} has {} elements, layer expects {n}",
            batch[i].len()
        )));
    }
    if layer.mode == IsdMode::Predicted && predicted.map(<[f64]>::len) != Some(batch.len()) {
        return Err(Error::DimensionMismatch("predicted mode needs one ISD per sample".into()));
    }
    let cfg = accel.norm_config(layer)?;
    let dp = cfg.datapath()?;
    let affine = dp.affine(&layer.alpha, &layer.beta)?;
    let n_sub = cfg.n_sub;
    let mean_count = cfg.mean_count();
    let cycles = accel.stage_cycles(n, layer.kind, layer.mode)?;

    let mut outputs = Vec::with_capacity(batch.len());
    let mut isds = Vec::with_capacity(batch.len());
    let (mut saturations, mut clamps) = (0, 0);
    for (s, z) in batch.iter().enumerate() {
        let zero_var = |e: Error| match e {
            Error::ZeroVariance => Error::ZeroVarianceAt { sample: s, layer: layer_index },
            e => e,
        };
        let (lanes, in_sat) = dp.ingress(z)?;
        let (stats, isd) = match layer.mode {
            IsdMode::Compute => {
                let (st, _) = sim_stats_stage(&dp, &lanes, n_sub, accel.p_d, accel.latency.stats)?;
                clamps += st.clamped as usize;
                let (isd, _) = sim_invsqrt_stage(&dp, &st.raw, accel.latency.invsqrt).map_err(zero_var)?;
                let stats = if mean_count == n_sub {
                    st.raw
                } else {
                    sim_stats_stage(&dp, &lanes, mean_count, accel.p_d, 0)?.0.raw
                };
                (stats, isd)
            }
            IsdMode::Predicted => {
                let isd = dp.isd_from_value(predicted.expect("checked")[s])?;
                let stats = match (layer.kind, &lanes) {
                    (NormKind::RmsNorm, Lanes::Fixed(_)) => RawStats::Fixed { mean: 0, variance: 0 },
                    (NormKind::RmsNorm, Lanes::Float(_)) => RawStats::Float { mean: 0.0, variance: 0.0 },
                    (NormKind::LayerNorm, _) => {
                        sim_stats_stage(&dp, &lanes, mean_count, accel.p_d, 0)?.0.raw
                    }
                };
                (stats, isd)
            }
        };
        let (out, sat, _) =
            sim_norm_stage(&dp, &lanes, &stats, &isd, &affine, accel.p_n, accel.latency.norm);
        saturations += sat + in_sat as usize + isd.saturated as usize;
        isds.push(dp.isd_value(&isd.raw));
        outputs.push(out);
    }

    let (spans, log, total) = schedule(
        cycles,
        layer.mode,
        accel.pipeline_depth,
        batch.len(),
        layer_index,
        base,
    );
    if let Some(ev) = events {
        ev.extend(log);
    }
    Ok(LayerReport {
        layer: layer_index,
        mode: layer.mode,
        start_cycle: base,
        total_cycles: total,
        closed_form_cycles: closed_form_total(cycles, batch.len(), accel.pipeline_depth),
        timing: StageTiming {
            stats_cycles: cycles.stats,
            invsqrt_cycles: cycles.invsqrt,
            norm_cycles: cycles.norm,
            initiation_interval: initiation_interval(cycles, accel.pipeline_depth),
            samples: spans,
        },
        outputs,
        isds,
        saturations,
        variance_clamps: clamps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub total_cycles: u64,
    pub clock_hz: u64,
    pub sample_count: usize,
    pub layers: Vec<LayerReport>,
    /// Normalized vectors per cycle.
    pub throughput: f64,
    pub events: Vec<Event>,
}

impl SimReport {
    pub fn seconds(&self) -> f64 {
        self.total_cycles as f64 / self.clock_hz as f64
    }

    pub fn saturations(&self) -> usize {
        self.layers.iter().map(|l| l.saturations).sum()
    }

    pub fn variance_clamps(&self) -> usize {
        self.layers.iter().map(|l| l.variance_clamps).sum()
    }
}

/// Simulates every layer of a trace back to back with identity affine.
/// Layers inside the predictor's window (after `skip_start`) bypass the
/// inverter and use the ISD predicted from each sample's `skip_start` ISD.
pub fn sim_trace(
    trace: &ActivationTrace,
    kind: NormKind,
    accel: &AccelConfig,
    predictor: Option<&IsdPredictor>,
    record_events: bool,
) -> Result<SimReport> {
    accel.validate()?;
    if let Some(p) = predictor {
        p.validate(Some(trace.layer_count()))?;
    }
    let n = trace.embedding_dim();
    let mut layers: Vec<LayerReport> = Vec::with_capacity(trace.layer_count());
    let mut events = Vec::new();
    let mut base = 0u64;
    for l in 0..trace.layer_count() {
        let batch: Vec<Vec<f64>> = (0..trace.sample_count()).map(|s| trace.vector_f64(s, l)).collect();
        let (mode, predicted) = match predictor {
            Some(p) if p.is_skipped(l) => {
                let anchors = &layers[p.skip_start].isds;
                let pred = anchors
                    .iter()
                    .map(|&live| p.predict(p.anchor_isd(live), l))
                    .collect::<Result<Vec<_>>>()?;
                (IsdMode::Predicted, Some(pred))
            }
            _ => (IsdMode::Compute, None),
        };
        let spec = LayerSpec::identity(kind, n, mode);
        let report = sim_layer_at(
            &batch,
            &spec,
            accel,
            predicted.as_deref(),
            l,
            base,
            record_events.then_some(&mut events),
        )?;
        base += report.total_cycles;
        layers.push(report);
    }
    let vectors = trace.sample_count() * trace.layer_count();
    Ok(SimReport {
        total_cycles: base,
        clock_hz: accel.clock_hz,
        sample_count: trace.sample_count(),
        layers,
        throughput: if base == 0 { 0.0 } else { vectors as f64 / base as f64 },
        events,
    })
}

/// One memory entry of the flattened input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemEntry {
    pub cycle: u64,
    pub address: usize,
    /// Valid elements; the rest of the entry is masked.
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemorySchedule {
    pub entry_width: usize,
    pub entries: Vec<MemEntry>,
    /// Entries the statistics unit reads.
    pub stats_entries: usize,
}

impl MemorySchedule {
    /// Lane mask of entry `i`.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.entry_width).map(|k| k < self.entries[i].valid).collect()
    }
}

/// One entry per cycle over the flattened `shape`; statistics touch only the
/// entries holding the first `n_sub` elements.
pub fn sim_memory_stream(shape: &[usize], entry_width: usize, n_sub: Option<usize>) -> Result<MemorySchedule> {
    if entry_width == 0 {
        return Err(Error::config("entry_width", "must be positive"));
    }
    let total: usize = shape.iter().product();
    let n_sub = n_sub.unwrap_or(total);
    if n_sub > total {
        return Err(Error::config("n_sub", format!("{n_sub} exceeds {total} elements")));
    }
    let entries = (0..total.div_ceil(entry_width))
        .map(|a| MemEntry {
            cycle: a as u64,
            address: a,
            valid: entry_width.min(total - a * entry_width),
        })
        .collect();
    Ok(MemorySchedule {
        entry_width,
        entries,
        stats_entries: n_sub.div_ceil(entry_width),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{run_layer, run_model};
    use crate::exec::Exec;
    use crate::numerics::FixedPointSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn accel(p_d: usize, p_n: usize) -> AccelConfig {
        AccelConfig { p_d, p_n, ..AccelConfig::default() }
    }

    #[test]
    fn stage_formulas() {
        let a = accel(128, 128);
        let c = a.stage_cycles(4096, NormKind::LayerNorm, IsdMode::Compute).unwrap();
        assert_eq!((c.stats, c.invsqrt, c.norm), (42, 6, 34));
        let half = AccelConfig { n_sub: Some(2048), ..a.clone() };
        assert_eq!(half.stage_cycles(4096, NormKind::LayerNorm, IsdMode::Compute).unwrap().stats, 26);
        assert_eq!(stats_cycles(128, 128, 3), 1 + 7 + 3);
        assert_eq!(norm_cycles(128, 128, 2), 3);
        let p = a.stage_cycles(4096, NormKind::LayerNorm, IsdMode::Predicted).unwrap();
        assert_eq!((p.stats, p.invsqrt), (42, 1));
        let p = a.stage_cycles(4096, NormKind::RmsNorm, IsdMode::Predicted).unwrap();
        assert_eq!(p.stats, 0);
        assert_eq!(ceil_log2(80), 7);
        assert_eq!(ceil_log2(8), 3);
    }

    #[test]
    fn pipeline_examples() {
        let c = StageCycles { stats: 42, invsqrt: 6, norm: 34 };
        assert_eq!(closed_form_total(c, 100, 1), 4240);
        assert_eq!(closed_form_total(c, 1, 1), 82);
        let (_, events, total) = schedule(c, IsdMode::Compute, 1, 100, 0, 0);
        assert_eq!(total, 4240);
        assert_eq!(replay_total(&events), 4240);
        audit_events(&events).unwrap();
    }

    #[test]
    fn scheduler_matches_closed_form_grid() {
        for stats in [0, 1, 5, 20, 42] {
            for inv in [1, 6] {
                for norm in [3, 10, 34, 90] {
                    for replicas in 1..=4 {
                        for n in [1, 2, 3, 7, 50] {
                            let c = StageCycles { stats, invsqrt: inv, norm };
                            let (_, ev, total) = schedule(c, IsdMode::Compute, replicas, n, 0, 0);
                            assert_eq!(total, closed_form_total(c, n, replicas), "{c:?} r={replicas} n={n}");
                            audit_events(&ev).unwrap();
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn audit_catches_violations() {
        let c = StageCycles { stats: 5, invsqrt: 6, norm: 4 };
        let (_, mut ev, _) = schedule(c, IsdMode::Compute, 1, 3, 0, 0);
        let i = ev
            .iter()
            .position(|e| e.unit == Unit::Norm(0) && e.kind == EventKind::Start)
            .unwrap();
        ev[i].cycle = 0;
        assert!(audit_events(&ev).is_err());
    }

    #[test]
    fn replicas_lower_interval() {
        let c = StageCycles { stats: 10, invsqrt: 6, norm: 34 };
        assert_eq!(initiation_interval(c, 1), 34);
        assert_eq!(initiation_interval(c, 4), 10);
        assert!(closed_form_total(c, 100, 4) < closed_form_total(c, 100, 1));
    }

    #[test]
    fn unit_names_round_trip() {
        for u in [Unit::Stats, Unit::Invsqrt, Unit::Predict, Unit::Norm(3)] {
            assert_eq!(u.to_string().parse::<Unit>().unwrap(), u);
        }
    }

    #[test]
    fn memory_stream() {
        let m = sim_memory_stream(&[2, 4], 2, None).unwrap();
        assert_eq!(m.entries.iter().map(|e| e.address).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(m.stats_entries, 4);
        let m = sim_memory_stream(&[1, 4096], 128, Some(2048)).unwrap();
        assert_eq!(m.stats_entries, 16);
        assert_eq!(m.entries.len(), 32);
        let m = sim_memory_stream(&[10], 4, None).unwrap();
        assert_eq!(m.entries[2].valid, 2);
        assert_eq!(m.mask(2), vec![true, true, false, false]);
        assert!(sim_memory_stream(&[10], 4, Some(11)).is_err());
    }

    #[test]
    fn inverter_stage_value() {
        let a = AccelConfig::default();
        let dp = a.norm_config(&LayerSpec::identity(NormKind::LayerNorm, 8, IsdMode::Compute))
            .unwrap()
            .datapath()
            .unwrap();
        let var = (0.0625f64 * 2f64.powi(64)) as i128;
        let (isd, cycles) = sim_invsqrt_stage(&dp, &RawStats::Fixed { mean: 0, variance: var }, 6).unwrap();
        assert_eq!(cycles, 6);
        assert!((dp.isd_value(&isd.raw) / 4.0 - 1.0).abs() < 2e-3);
        assert_eq!(
            sim_invsqrt_stage(&dp, &RawStats::Fixed { mean: 0, variance: 0 }, 6),
            Err(Error::ZeroVariance)
        );
    }

    fn formats() -> Vec<NumericFormat> {
        vec![
            NumericFormat::Fp64,
            NumericFormat::Fp32,
            NumericFormat::Fp16,
            NumericFormat::Int8,
            NumericFormat::FixedPoint(FixedPointSpec::new(24, 12, true).unwrap()),
        ]
    }

    #[test]
    fn layer_outputs_match_library() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.gen_range(-3.0..5.0)).collect())
            .collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for fmt in formats() {
            for kind in [NormKind::LayerNorm, NormKind::RmsNorm] {
                for n_sub in [None, Some(64), Some(77)] {
                    for mode in [IsdMode::Compute, IsdMode::Predicted] {
                        let a = AccelConfig { p_d: 16, p_n: 32, format: fmt, n_sub, ..AccelConfig::default() };
                        let layer = LayerSpec { kind, alpha: alpha.clone(), beta: beta.clone(), mode };
                        let pred = vec![0.4; batch.len()];
                        let r = sim_layer(&batch, &layer, &a, Some(&pred)).unwrap();
                        let cfg = a.norm_config(&layer).unwrap();
                        for (z, out) in batch.iter().zip(&r.outputs) {
                            let lib = run_layer(z, &cfg, Some(0.4)).unwrap();
                            assert!(lib.output.bit_identical(out), "{fmt} {kind:?} {n_sub:?} {mode:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn trace_sim_matches_run_model() {
        let spec = crate::trace::SyntheticTraceSpec::log_linear_tail(12, 96, 3, (4, 10, -0.1));
        let trace = crate::trace::generate_synthetic(&spec, 5, Exec::Sequential).unwrap();
        let pred = IsdPredictor {
            skip_start: 4,
            skip_end: 10,
            decay: -0.1,
            anchor: Default::default(),
            anchor_log_isd: 0.0,
        };
        for fmt in formats() {
            let a = AccelConfig { p_d: 32, p_n: 16, format: fmt, n_sub: Some(48), ..AccelConfig::default() };
            let report = sim_trace(&trace, NormKind::RmsNorm, &a, Some(&pred), true).unwrap();
            let base = a.norm_config(&LayerSpec::identity(NormKind::RmsNorm, 96, IsdMode::Compute)).unwrap();
            let lib = run_model(Exec::Parallel, &trace, &base, Some(&pred)).unwrap();
            for (l, layer) in report.layers.iter().enumerate() {
                assert_eq!(layer.mode == IsdMode::Predicted, pred.is_skipped(l));
                for (s, row) in lib.iter().enumerate() {
                    assert!(layer.outputs[s].bit_identical(&row[l].output), "{fmt} l={l}");
                    assert_eq!(layer.isds[s].to_bits(), row[l].isd.to_bits());
                }
            }
            assert_eq!(replay_total(&report.events), report.total_cycles);
            audit_events(&report.events).unwrap();
        }
    }

    #[test]
    fn predicted_mode_never_slower() {
        for kind in [NormKind::LayerNorm, NormKind::RmsNorm] {
            let a = accel(64, 128);
            let c = a.stage_cycles(4096, kind, IsdMode::Compute).unwrap();
            let p = a.stage_cycles(4096, kind, IsdMode::Predicted).unwrap();
            assert!(initiation_interval(p, 1) <= initiation_interval(c, 1));
        }
    }

    #[test]
    fn config_validation() {
        assert!(accel(4, 128).validate().is_err());
        assert!(AccelConfig { pipeline_depth: 0, ..AccelConfig::default() }.validate().is_err());
        let a = AccelConfig { n_sub: Some(10), ..AccelConfig::default() };
        assert!(a.n_sub_for(8).is_err());
        assert!(sim_layer(&[], &LayerSpec::identity(NormKind::RmsNorm, 8, IsdMode::Compute), &a, None).is_err());
    }
}
