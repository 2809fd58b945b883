//! Decode with expert weights held host-side and copied into two device
//! buffers by a separate copy lane.

use std::sync::mpsc::{channel, Sender};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{forward_with, ExpertRunner, NextLayerPredictor};
use crate::model::layers::{expert_ffn, DecodeState, RouterDecision};
use crate::model::weights::ExpertWeights;
use crate::model::{prefill, Model};
use crate::numerics::argmax;
use crate::offload::sim::{
    breakdown_of, check_copy_serialized, check_read_after_ready, max_resident, Breakdown, EventKind, Lane,
    ScheduleEvent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    OnDemand,
    Prefetch,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::OnDemand => "on_demand",
            ExecMode::Prefetch => "prefetch",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecConfig {
    pub mode: ExecMode,
    /// injected delay per layer-batch copy
    pub copy_latency: Duration,
    /// split the delay evenly over the k experts of a batch
    pub per_expert: bool,
    /// lower bound on the deadlock timeout (the timeout is
    /// `max(100 × copy_latency, deadlock_floor)`)
    pub deadlock_floor: Duration,
}

impl ExecConfig {
    pub fn new(mode: ExecMode, copy_latency: Duration) -> Self {
        Self {
            mode,
            copy_latency,
            per_expert: false,
            deadlock_floor: Duration::from_secs(1),
        }
    }

    pub fn deadlock_timeout(&self) -> Duration {
        (self.copy_latency * 100).max(self.deadlock_floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Free,
    Loading { layer: usize, seq: u64 },
    Ready { layer: usize, seq: u64 },
    Failed(String),
}

struct Slot {
    status: Status,
    ids: Vec<usize>,
    weights: Vec<ExpertWeights>,
}

/// Two device-side buffers, each able to hold one layer's k experts.
struct BufferPool {
    slots: [(Mutex<Slot>, Condvar); 2],
}

impl BufferPool {
    fn new(model: &Model) -> Self {
        let c = &model.config;
        let slot = || {
            (
                Mutex::new(Slot {
                    status: Status::Free,
                    ids: Vec::new(),
                    weights: vec![ExpertWeights::zeros(c.hidden, c.expert_hidden); c.top_k],
                }),
                Condvar::new(),
            )
        };
        Self {
            slots: [slot(), slot()],
        }
    }
}

struct CopyRequest {
    slot: usize,
    layer: usize,
    token: usize,
    seq: u64,
    ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub mode: ExecMode,
    pub tokens: Vec<u32>,
    #[serde(skip)]
    pub last_logits: Vec<f32>,
    pub events: Vec<ScheduleEvent>,
    /// wall-clock span of each decode step
    pub token_windows: Vec<(f64, f64)>,
}

impl ExecReport {
    pub fn token_us(&self) -> Vec<f64> {
        self.token_windows.iter().map(|(a, b)| b - a).collect()
    }

    pub fn mean_tpot_us(&self) -> f64 {
        let v = self.token_us();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Summed over all decode-step windows.
    pub fn breakdown(&self) -> Breakdown {
        let mut total = Breakdown::default();
        for (t, &(a, b)) in self.token_windows.iter().enumerate() {
            let evs: Vec<ScheduleEvent> = self.events.iter().filter(|e| e.token == t).cloned().collect();
            let part = breakdown_of(&evs, a, b);
            total.compute += part.compute;
            total.copy += part.copy;
            total.idle += part.idle;
        }
        total
    }

    /// Mean busy time per layer on the compute lane (attention, gate, experts).
    pub fn mean_layer_compute_us(&self, layers: usize) -> Vec<f64> {
        self.mean_per_layer(layers, |e| e.lane == Lane::Compute && e.kind != EventKind::Idle)
    }

    pub fn mean_layer_copy_us(&self, layers: usize) -> Vec<f64> {
        self.mean_per_layer(layers, |e| e.kind == EventKind::Copy)
    }

    fn mean_per_layer(&self, layers: usize, pred: impl Fn(&ScheduleEvent) -> bool) -> Vec<f64> {
        let mut sum = vec![0.0; layers];
        for e in self.events.iter().filter(|e| pred(e)) {
            sum[e.layer] += e.end - e.start;
        }
        let n = self.token_windows.len().max(1) as f64;
        sum.iter().map(|s| s / n).collect()
    }

    /// Copy-lane serialization, read-after-ready, and the two-buffer bound,
    /// all checked on the recorded log.
    pub fn check_invariants(&self) -> Result<()> {
        check_copy_serialized(&self.events)?;
        check_read_after_ready(&self.events)?;
        let peak = max_resident(&self.events);
        if peak > 2 {
            return Err(Error::Invariant(format!("{peak} layers resident at once")));
        }
        Ok(())
    }
}

struct Clock(Instant);

impl Clock {
    fn us(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e6
    }
}

struct OffloadRunner<'a> {
    cfg: &'a ExecConfig,
    pool: &'a BufferPool,
    tx: Sender<CopyRequest>,
    clock: &'a Clock,
    layers: usize,
    token: usize,
    /// global layer counter; selects the buffer
    step: u64,
    expected: [Option<(usize, u64)>; 2],
    events: Vec<ScheduleEvent>,
    mark: f64,
}

impl OffloadRunner<'_> {
    fn slot_for(&self, layer_offset: u64) -> usize {
        ((self.step + layer_offset) % 2) as usize
    }

    fn push(&mut self, kind: EventKind, layer: usize, start: f64, end: f64) {
        self.events.push(ScheduleEvent {
            lane: Lane::Compute,
            kind,
            layer,
            token: self.token,
            start,
            end,
        });
    }

    fn deadlock(&self, what: &str, layer: usize, status: &Status) -> Error {
        Error::Deadlock(format!(
            "compute lane waited more than {:?} for {what} (token {}, layer {layer}, buffer state {status:?})",
            self.cfg.deadlock_timeout(),
            self.token
        ))
    }

    /// Take the buffer for `layer` (`offset` layers ahead) and queue its copy.
    fn request(&mut self, offset: u64, layer: usize, ids: &[usize]) -> Result<()> {
        let slot = self.slot_for(offset);
        let seq = self.step + offset;
        let (lock, cv) = &self.pool.slots[slot];
        let limit = self.cfg.deadlock_timeout();
        let start = Instant::now();
        let mut s = lock.lock().expect("buffer lock");
        while s.status != Status::Free {
            let left = limit
                .checked_sub(start.elapsed())
                .ok_or_else(|| self.deadlock("a free buffer", layer, &s.status))?;
            s = cv.wait_timeout(s, left).expect("buffer lock").0;
        }
        s.status = Status::Loading { layer, seq };
        drop(s);
        self.expected[slot] = Some((layer, seq));
        self.tx
            .send(CopyRequest {
                slot,
                layer,
                token: self.token,
                seq,
                ids: ids.to_vec(),
            })
            .map_err(|_| Error::Invariant("copy lane exited".into()))
    }
}

impl ExpertRunner for OffloadRunner<'_> {
    fn begin_layer(&mut self, _layer: usize) -> Result<()> {
        self.mark = self.clock.us();
        Ok(())
    }

    fn after_attention(&mut self, layer: usize) -> Result<()> {
        let now = self.clock.us();
        self.push(EventKind::Attn, layer, self.mark, now);
        self.mark = now;
        Ok(())
    }

    fn after_gate(&mut self, layer: usize, executed: &RouterDecision, next: Option<&RouterDecision>) -> Result<()> {
        let now = self.clock.us();
        self.push(EventKind::Gate, layer, self.mark, now);
        match self.cfg.mode {
            ExecMode::OnDemand => self.request(0, layer, &executed.ids)?,
            ExecMode::Prefetch => {
                if layer == 0 {
                    self.request(0, 0, &executed.ids)?;
                }
                if layer + 1 < self.layers {
                    let next =
                        next.ok_or_else(|| Error::Config("prefetch mode needs a next-layer predictor".into()))?;
                    self.request(1, layer + 1, &next.ids)?;
                }
            }
        }
        Ok(())
    }

    fn run_experts(
        &mut self,
        _model: &Model,
        layer: usize,
        x_norm: &[f32],
        decision: &RouterDecision,
    ) -> Result<Vec<Vec<f32>>> {
        let slot = self.slot_for(0);
        let (want_layer, seq) = self.expected[slot]
            .filter(|(l, _)| *l == layer)
            .ok_or_else(|| Error::Invariant(format!("no copy issued for layer {layer}")))?;
        debug_assert_eq!(want_layer, layer);
        let ready = Status::Ready { layer, seq };
        let (lock, cv) = &self.pool.slots[slot];
        let limit = self.cfg.deadlock_timeout();
        let wait_start = self.clock.us();
        let started = Instant::now();
        let mut s = lock.lock().expect("buffer lock");
        while s.status != ready {
            if let Status::Failed(msg) = &s.status {
                return Err(Error::Invariant(format!("copy for layer {layer} failed: {msg}")));
            }
            let left = limit
                .checked_sub(started.elapsed())
                .ok_or_else(|| self.deadlock("expert weights", layer, &s.status))?;
            s = cv.wait_timeout(s, left).expect("buffer lock").0;
        }
        let t0 = self.clock.us();
        if s.ids != decision.ids {
            return Err(Error::Invariant(format!(
                "layer {layer}: buffer holds experts {:?}, decision needs {:?}",
                s.ids, decision.ids
            )));
        }
        let mut outs = Vec::with_capacity(decision.ids.len());
        for j in 0..decision.ids.len() {
            if s.status != ready {
                return Err(Error::Invariant(format!("layer {layer}: expert read before ready")));
            }
            outs.push(expert_ffn(x_norm, &s.weights[j])?);
        }
        s.status = Status::Free;
        s.ids.clear();
        drop(s);
        cv.notify_all();
        self.expected[slot] = None;
        let t1 = self.clock.us();
        if t0 > wait_start {
            self.push(EventKind::Idle, layer, wait_start, t0);
        }
        self.push(EventKind::Expert, layer, t0, t1);
        self.step += 1;
        Ok(outs)
    }
}

fn copy_worker(
    model: &Model,
    pool: &BufferPool,
    cfg: &ExecConfig,
    clock: &Clock,
    rx: std::sync::mpsc::Receiver<CopyRequest>,
) -> Vec<ScheduleEvent> {
    let mut events = Vec::new();
    for req in rx {
        let start = clock.us();
        let (lock, cv) = &pool.slots[req.slot];
        let k = req.ids.len().max(1) as u32;
        let host = &model.layers[req.layer].experts;
        let mut failure = None;
        if !cfg.per_expert && !cfg.copy_latency.is_zero() {
            thread::sleep(cfg.copy_latency);
        }
        {
            let mut s = lock.lock().expect("buffer lock");
            s.ids.clear();
        }
        for (j, &e) in req.ids.iter().enumerate() {
            if cfg.per_expert && !cfg.copy_latency.is_zero() {
                thread::sleep(cfg.copy_latency / k);
            }
            let mut s = lock.lock().expect("buffer lock");
            if s.status
                != (Status::Loading {
                    layer: req.layer,
                    seq: req.seq,
                })
            {
                failure = Some(format!("buffer {} not reserved for layer {}", req.slot, req.layer));
                break;
            }
            match host.get(e) {
                Some(w) if j < s.weights.len() => {
                    s.weights[j].copy_from(w);
                    s.ids.push(e);
                }
                _ => {
                    failure = Some(format!("expert {e} out of range or buffer too small"));
                    break;
                }
            }
        }
        let end;
        {
            let mut s = lock.lock().expect("buffer lock");
            end = clock.us();
            s.status = match failure {
                Some(msg) => Status::Failed(msg),
                None => Status::Ready {
                    layer: req.layer,
                    seq: req.seq,
                },
            };
        }
        cv.notify_all();
        events.push(ScheduleEvent {
            lane: Lane::Copy,
            kind: EventKind::Copy,
            layer: req.layer,
            token: req.token,
            start,
            end,
        });
    }
    events
}

/// Greedy decode where every expert read goes through the buffer pool.
/// The prompt (all but its last token) is prefilled host-side with true
/// routing; `n_new` offloaded decode steps follow.
pub fn run_offloaded_decode(
    model: &Model,
    prompt: &[u32],
    n_new: usize,
    predictor: Option<&dyn NextLayerPredictor>,
    cfg: &ExecConfig,
) -> Result<ExecReport> {
    if cfg.mode == ExecMode::Prefetch && predictor.is_none() && model.config.layers > 1 {
        return Err(Error::Config("prefetch mode needs a next-layer predictor".into()));
    }
    let mut state = DecodeState::for_model(model);
    let mut cur = prefill(model, &mut state, prompt)?;
    let pool = BufferPool::new(model);
    let clock = Clock(Instant::now());
    let (tx, rx) = channel::<CopyRequest>();

    thread::scope(|scope| {
        let worker = scope.spawn(|| copy_worker(model, &pool, cfg, &clock, rx));
        let mut runner = OffloadRunner {
            cfg,
            pool: &pool,
            tx,
            clock: &clock,
            layers: model.config.layers,
            token: 0,
            step: 0,
            expected: [None, None],
            events: Vec::new(),
            mark: 0.0,
        };
        let mut tokens = Vec::with_capacity(n_new);
        let mut windows = Vec::with_capacity(n_new);
        let mut last_logits = Vec::new();
        let mut outcome = Ok(());
        for t in 0..n_new {
            runner.token = t;
            let a = clock.us();
            match forward_with(model, &mut state, cur, predictor, &mut runner, None) {
                Ok(logits) => {
                    windows.push((a, clock.us()));
                    cur = argmax(&logits) as u32;
                    tokens.push(cur);
                    last_logits = logits;
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        let OffloadRunner { mut events, tx, .. } = runner;
        drop(tx);
        let copy_events = worker
            .join()
            .map_err(|_| Error::Invariant("copy lane panicked".into()))?;
        outcome?;
        events.extend(copy_events);
        events.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(ExecReport {
            mode: cfg.mode,
            tokens,
            last_logits,
            events,
            token_windows: windows,
        })
    })
}

pub fn summary_csv(reports: &[&ExecReport]) -> String {
    use crate::metrics::fmt6;
    let mut s = String::from("mode,tpot_us,compute_frac,copy_frac,idle_frac\n");
    for r in reports {
        let (c, p, i) = r.breakdown().fractions();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode.name(),
            fmt6(r.mean_tpot_us()),
            fmt6(c),
            fmt6(p),
            fmt6(i)
        ));
    }
    s
}
