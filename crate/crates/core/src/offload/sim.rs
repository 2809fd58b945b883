//! Discrete-event schedules for on-demand and prefetching expert loading.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offload::timing::TimingModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Attn,
    Gate,
    Expert,
    Copy,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub lane: Lane,
    pub kind: EventKind,
    pub layer: usize,
    #[serde(default)]
    pub token: usize,
    #[serde(rename = "start_us")]
    pub start: f64,
    #[serde(rename = "end_us")]
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub compute: f64,
    /// copy time not hidden behind compute
    pub copy: f64,
    pub idle: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.copy + self.idle
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        let t = self.total();
        if t <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        (self.compute / t, self.copy / t, self.idle / t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub events: Vec<ScheduleEvent>,
    pub tpot: f64,
    pub breakdown: Breakdown,
}

impl ScheduleReport {
    fn new(events: Vec<ScheduleEvent>, tpot: f64) -> Self {
        let breakdown = breakdown_of(&events, 0.0, tpot);
        Self {
            events,
            tpot,
            breakdown,
        }
    }

    pub fn lane(&self, lane: Lane) -> impl Iterator<Item = &ScheduleEvent> {
        self.events.iter().filter(move |e| e.lane == lane)
    }

    /// Total length of compute-lane gaps.
    pub fn compute_gaps(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| e.lane == Lane::Compute && e.kind == EventKind::Idle)
            .map(|e| e.end - e.start)
            .sum()
    }
}

fn merge(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.retain(|(a, b)| b > a);
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn clip(iv: &[(f64, f64)], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    iv.iter()
        .map(|&(a, b)| (a.max(lo), b.min(hi)))
        .filter(|(a, b)| b > a)
        .collect()
}

fn length(iv: &[(f64, f64)]) -> f64 {
    iv.iter().map(|(a, b)| b - a).sum()
}

/// Attribute the window `[t0, t1]`: compute-lane busy time, copy-lane busy
/// time while compute is idle, and the remainder.
pub fn breakdown_of(events: &[ScheduleEvent], t0: f64, t1: f64) -> Breakdown {
    let busy = |lane: Lane| {
        merge(clip(
            &events
                .iter()
                .filter(|e| e.lane == lane && e.kind != EventKind::Idle)
                .map(|e| (e.start, e.end))
                .collect::<Vec<_>>(),
            t0,
            t1,
        ))
    };
    let compute = busy(Lane::Compute);
    let copy = busy(Lane::Copy);
    let c_len = length(&compute);
    let union = merge(compute.iter().chain(copy.iter()).copied().collect());
    let copy_only = length(&union) - c_len;
    let total = (t1 - t0).max(0.0);
    Breakdown {
        compute: c_len,
        copy: copy_only,
        idle: (total - c_len - copy_only).max(0.0),
    }
}

/// `(compute_frac, copy_frac, idle_frac)` of a report.
pub fn breakdown(report: &ScheduleReport) -> (f64, f64, f64) {
    report.breakdown.fractions()
}

struct Builder {
    events: Vec<ScheduleEvent>,
}

impl Builder {
    fn push(&mut self, lane: Lane, kind: EventKind, layer: usize, start: f64, dur: f64) -> f64 {
        let end = start + dur;
        self.events.push(ScheduleEvent {
            lane,
            kind,
            layer,
            token: 0,
            start,
            end,
        });
        end
    }

    fn gap(&mut self, layer: usize, from: f64, to: f64) {
        if to > from {
            self.push(Lane::Compute, EventKind::Idle, layer, from, to - from);
        }
    }
}

/// Strictly serial: attention, gate, blocking copy, experts, per layer.
pub fn simulate_on_demand(tm: &TimingModel) -> Result<ScheduleReport> {
    tm.validate()?;
    let mut b = Builder { events: Vec::new() };
    let mut t = 0.0;
    for (l, lt) in tm.layers.iter().enumerate() {
        t = b.push(Lane::Compute, EventKind::Attn, l, t, lt.attn);
        t = b.push(Lane::Compute, EventKind::Gate, l, t, lt.gate_topk);
        let copy = if l == 0 { tm.cold_start() } else { lt.copy };
        let done = b.push(Lane::Copy, EventKind::Copy, l, t, copy);
        b.gap(l, t, done);
        t = b.push(Lane::Compute, EventKind::Expert, l, done, lt.expert);
    }
    Ok(ScheduleReport::new(b.events, t))
}

/// Layer 0 loads after its gate; every later layer's copy is issued once
/// the current layer's gate and copy are both done, on a FIFO copy lane.
pub fn simulate_prefetch(tm: &TimingModel) -> Result<ScheduleReport> {
    tm.validate()?;
    let n = tm.num_layers();
    let mut b = Builder { events: Vec::new() };

    let t = b.push(Lane::Compute, EventKind::Attn, 0, 0.0, tm.layers[0].attn);
    let mut gate_done = b.push(Lane::Compute, EventKind::Gate, 0, t, tm.layers[0].gate_topk);
    let mut copy_done = b.push(Lane::Copy, EventKind::Copy, 0, gate_done, tm.cold_start());
    let mut lane_free = copy_done;
    let mut end = 0.0;

    for l in 0..n {
        let mut next_copy_done = None;
        if l + 1 < n {
            let issue = gate_done.max(copy_done);
            let start = issue.max(lane_free);
            lane_free = b.push(Lane::Copy, EventKind::Copy, l + 1, start, tm.layers[l + 1].copy);
            next_copy_done = Some(lane_free);
        }
        let start = gate_done.max(copy_done);
        b.gap(l, gate_done, start);
        end = b.push(Lane::Compute, EventKind::Expert, l, start, tm.layers[l].expert);
        if let Some(d) = next_copy_done {
            let lt = &tm.layers[l + 1];
            let t = b.push(Lane::Compute, EventKind::Attn, l + 1, end, lt.attn);
            gate_done = b.push(Lane::Compute, EventKind::Gate, l + 1, t, lt.gate_topk);
            copy_done = d;
        }
    }
    b.events.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.lane.cmp_key().cmp(&b.lane.cmp_key()))
    });
    Ok(ScheduleReport::new(b.events, end))
}

impl Lane {
    fn cmp_key(self) -> u8 {
        match self {
            Lane::Compute => 0,
            Lane::Copy => 1,
        }
    }
}

/// `Σ_l min(t_copy,l, t_compute,l)`
pub fn analytic_improvement(tm: &TimingModel) -> f64 {
    tm.layers.iter().map(|l| l.copy.min(l.compute())).sum()
}

/// Largest per-layer copy plus largest per-layer compute: the edge slack
/// between the simulated and closed-form improvements.
pub fn boundary_term(tm: &TimingModel) -> f64 {
    let max_copy = tm.layers.iter().map(|l| l.copy).fold(0.0, f64::max);
    let max_compute = tm.layers.iter().map(|l| l.compute()).fold(0.0, f64::max);
    max_copy.max(tm.cold_start()) + max_compute
}

/// Copy events on one lane never overlap.
pub fn check_copy_serialized(events: &[ScheduleEvent]) -> Result<()> {
    let mut copies: Vec<&ScheduleEvent> = events.iter().filter(|e| e.lane == Lane::Copy).collect();
    copies.sort_by(|a, b| a.start.total_cmp(&b.start));
    for w in copies.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::Invariant(format!(
                "copy for layer {} (token {}) starts at {} before previous copy ends at {}",
                w[1].layer, w[1].token, w[1].start, w[0].end
            )));
        }
    }
    Ok(())
}

/// Every expert event starts no earlier than its layer's copy finished.
pub fn check_read_after_ready(events: &[ScheduleEvent]) -> Result<()> {
    for ex in events.iter().filter(|e| e.kind == EventKind::Expert) {
        let copy = events
            .iter()
            .find(|c| c.kind == EventKind::Copy && c.layer == ex.layer && c.token == ex.token)
            .ok_or_else(|| Error::Invariant(format!("expert at layer {} token {} has no copy", ex.layer, ex.token)))?;
        if ex.start < copy.end {
            return Err(Error::Invariant(format!(
                "layer {} token {}: expert starts at {} before copy ready at {}",
                ex.layer, ex.token, ex.start, copy.end
            )));
        }
    }
    Ok(())
}

/// Peak number of layers simultaneously resident, where a layer occupies a
/// buffer from the start of its copy to the end of its expert step.
pub fn max_resident(events: &[ScheduleEvent]) -> usize {
    let mut edges: Vec<(f64, i32)> = Vec::new();
    for c in events.iter().filter(|e| e.kind == EventKind::Copy) {
        let release = events
            .iter()
            .filter(|e| e.kind == EventKind::Expert && e.layer == c.layer && e.token == c.token)
            .map(|e| e.end)
            .fold(c.end, f64::max);
        edges.push((c.start, 1));
        edges.push((release, -1));
    }
    // releases sort before acquisitions at the same instant
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut cur, mut peak) = (0i32, 0i32);
    for (_, d) in edges {
        cur += d;
        peak = peak.max(cur);
    }
    peak as usize
}
