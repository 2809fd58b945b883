//! Router, experts, and single-head rotary attention for one decoder block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::GatingOrder;
use crate::model::weights::{ExpertWeights, LayerWeights};
use crate::numerics::{axpy, dot, silu, softmax, top_k, Matrix};

/// Selected experts for one token at one layer, ordered by descending gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub ids: Vec<usize>,
    pub gates: Vec<f32>,
}

impl RouterDecision {
    pub fn k(&self) -> usize {
        self.ids.len()
    }

    /// Check the decision against an expert count: distinct in-range ids,
    /// non-negative gates summing to one.
    pub fn validate(&self, experts: usize) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() != self.gates.len() {
            return Err(Error::Invariant(format!(
                "decision has {} ids and {} gates",
                self.ids.len(),
                self.gates.len()
            )));
        }
        for (i, &id) in self.ids.iter().enumerate() {
            if id >= experts {
                return Err(Error::OutOfRange {
                    index: id,
                    len: experts,
                });
            }
            if self.ids[..i].contains(&id) {
                return Err(Error::Invariant(format!("duplicate expert {id}")));
            }
        }
        let sum: f32 = self.gates.iter().sum();
        if self.gates.iter().any(|g| *g < 0.0) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Invariant(format!("gates sum to {sum}")));
        }
        Ok(())
    }
}

/// Turn router logits into a decision under the given gating order.
pub fn route_from_logits(logits: &[f32], k: usize, order: GatingOrder) -> Result<RouterDecision> {
    match order {
        GatingOrder::SoftmaxTopK => {
            let probs = softmax(logits)?;
            let (ids, vals) = top_k(&probs, k)?;
            let mass: f32 = vals.iter().sum();
            let gates = vals.iter().map(|v| v / mass).collect();
            Ok(RouterDecision { ids, gates })
        }
        GatingOrder::TopKSoftmax => {
            let (ids, vals) = top_k(logits, k)?;
            Ok(RouterDecision {
                ids,
                gates: softmax(&vals)?,
            })
        }
    }
}

/// `logits = gate · x_norm`, then top-k routing.
pub fn router(x_norm: &[f32], gate: &Matrix, k: usize, order: GatingOrder) -> Result<(Vec<f32>, RouterDecision)> {
    let logits = gate.matvec(x_norm)?;
    let decision = route_from_logits(&logits, k, order)?;
    Ok((logits, decision))
}

pub fn expert_ffn(x_norm: &[f32], w: &ExpertWeights) -> Result<Vec<f32>> {
    let g = w.w_gate.matvec(x_norm)?;
    let u = w.w_up.matvec(x_norm)?;
    let act: Vec<f32> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
    w.w_down.matvec(&act)
}

/// `sum_i gates[i] * outputs[i]`, accumulated in decision order.
pub fn combine(outputs: &[Vec<f32>], gates: &[f32], hidden: usize) -> Result<Vec<f32>> {
    if outputs.len() != gates.len() {
        return Err(Error::shape(format!(
            "{} expert outputs for {} gates",
            outputs.len(),
            gates.len()
        )));
    }
    let mut m = vec![0.0f32; hidden];
    for (out, &g) in outputs.iter().zip(gates) {
        if out.len() != hidden {
            return Err(Error::shape(format!("expert output {} vs H {hidden}", out.len())));
        }
        axpy(g, out, &mut m);
    }
    Ok(m)
}

/// Raw outputs of the selected experts, in decision order.
pub fn run_selected(x_norm: &[f32], decision: &RouterDecision, experts: &[ExpertWeights]) -> Result<Vec<Vec<f32>>> {
    decision
        .ids
        .iter()
        .map(|&e| {
            let w = experts.get(e).ok_or(Error::OutOfRange {
                index: e,
                len: experts.len(),
            })?;
            expert_ffn(x_norm, w)
        })
        .collect()
}

pub fn moe_block(x_norm: &[f32], decision: &RouterDecision, experts: &[ExpertWeights]) -> Result<Vec<f32>> {
    let outs = run_selected(x_norm, decision, experts)?;
    combine(&outs, &decision.gates, x_norm.len())
}

/// Rotary-embedded keys and raw values seen so far at one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    head_dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KvCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        if self.head_dim == 0 {
            0
        } else {
            self.keys.len() / self.head_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn key(&self, j: usize) -> &[f32] {
        &self.keys[j * self.head_dim..(j + 1) * self.head_dim]
    }

    fn value(&self, j: usize) -> &[f32] {
        &self.values[j * self.head_dim..(j + 1) * self.head_dim]
    }
}

/// Per-layer attention history plus the position of the next token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    caches: Vec<KvCache>,
    position: usize,
}

impl DecodeState {
    pub fn new(layers: usize, head_dim: usize) -> Self {
        Self {
            caches: vec![KvCache::new(head_dim); layers],
            position: 0,
        }
    }

    pub fn for_model(model: &crate::model::Model) -> Self {
        Self::new(model.config.layers, model.config.head_dim)
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn cache(&self, layer: usize) -> &KvCache {
        &self.caches[layer]
    }

    pub(crate) fn cache_mut(&mut self, layer: usize) -> &mut KvCache {
        &mut self.caches[layer]
    }

    pub(crate) fn advance(&mut self) {
        self.position += 1;
    }

    pub fn reset(&mut self) {
        for c in &mut self.caches {
            c.keys.clear();
            c.values.clear();
        }
        self.position = 0;
    }
}

pub fn rope(x: &mut [f32], position: usize, base: f32) {
    let d = x.len();
    for i in 0..d / 2 {
        let inv_freq = (base as f64).powf(-((2 * i) as f64) / d as f64);
        let theta = position as f64 * inv_freq;
        let (s, c) = (theta.sin() as f32, theta.cos() as f32);
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

struct Projected {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

fn project(x_norm: &[f32], lw: &LayerWeights, position: usize, base: f32) -> Result<Projected> {
    let mut q = lw.wq.matvec(x_norm)?;
    let mut k = lw.wk.matvec(x_norm)?;
    let v = lw.wv.matvec(x_norm)?;
    rope(&mut q, position, base);
    rope(&mut k, position, base);
    Ok(Projected { q, k, v })
}

fn attend(cache: &KvCache, p: &Projected, lw: &LayerWeights) -> Result<Vec<f32>> {
    let n = cache.len();
    let scale = 1.0 / (p.q.len() as f32).sqrt();
    let mut scores = Vec::with_capacity(n + 1);
    for j in 0..n {
        scores.push(dot(&p.q, cache.key(j)) * scale);
    }
    scores.push(dot(&p.q, &p.k) * scale);
    let w = softmax(&scores)?;
    let mut o = vec![0.0f32; p.v.len()];
    for (j, &wj) in w[..n].iter().enumerate() {
        axpy(wj, cache.value(j), &mut o);
    }
    axpy(w[n], &p.v, &mut o);
    lw.wo.matvec(&o)
}

fn check_cache(cache: &KvCache, position: usize) -> Result<()> {
    if cache.len() != position {
        return Err(Error::Invariant(format!(
            "attention history holds {} entries at position {position}",
            cache.len()
        )));
    }
    Ok(())
}

/// Causal single-head attention over the cached history plus the current
/// token; appends the current key/value.
pub fn attention_step(
    x_norm: &[f32],
    cache: &mut KvCache,
    lw: &LayerWeights,
    position: usize,
    rope_base: f32,
) -> Result<Vec<f32>> {
    check_cache(cache, position)?;
    let p = project(x_norm, lw, position, rope_base)?;
    let out = attend(cache, &p, lw)?;
    cache.keys.extend_from_slice(&p.k);
    cache.values.extend_from_slice(&p.v);
    Ok(out)
}

/// Same as [`attention_step`] but leaves the history untouched.
pub fn attention_peek(
    x_norm: &[f32],
    cache: &KvCache,
    lw: &LayerWeights,
    position: usize,
    rope_base: f32,
) -> Result<Vec<f32>> {
    check_cache(cache, position)?;
    let p = project(x_norm, lw, position, rope_base)?;
    attend(cache, &p, lw)
}
