//! One-token decode through the pre-norm block stack.
//!
//! The same loop serves the true-router path, speculative execution, and the
//! offloaded executor: callers plug in a [`NextLayerPredictor`] (which decision
//! layer `l+1` will execute) and an [`ExpertRunner`] (where expert weights
//! come from and what happens around the routing step).

use crate::error::{Error, Result};
use crate::model::layers::{attention_step, combine, router, run_selected, DecodeState, RouterDecision};
use crate::model::trace::{LayerRecord, TraceSink};
use crate::model::Model;
use crate::numerics::{add, argmax, rms_norm};

/// Signals available at layer `l` after routing.
#[derive(Debug, Clone, Copy)]
pub struct LayerContext<'a> {
    pub layer: usize,
    /// normalized router input s_l
    pub s: &'a [f32],
    /// post-attention residual r_l
    pub r: &'a [f32],
    /// decision executed at this layer
    pub decision: &'a RouterDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub decision: RouterDecision,
}

pub trait NextLayerPredictor {
    /// Decision for layer `ctx.layer + 1`. `state` already holds layer
    /// `ctx.layer`'s key/value for the current token.
    fn predict_next(&self, model: &Model, state: &DecodeState, ctx: &LayerContext) -> Result<Prediction>;
}

/// Hook points around expert execution.
pub trait ExpertRunner {
    fn begin_layer(&mut self, _layer: usize) -> Result<()> {
        Ok(())
    }

    fn after_attention(&mut self, _layer: usize) -> Result<()> {
        Ok(())
    }

    /// Called once routing (and any next-layer prediction) is done.
    fn after_gate(&mut self, _layer: usize, _executed: &RouterDecision, _next: Option<&RouterDecision>) -> Result<()> {
        Ok(())
    }

    /// Raw outputs of the decision's experts, in decision order.
    fn run_experts(
        &mut self,
        model: &Model,
        layer: usize,
        x_norm: &[f32],
        decision: &RouterDecision,
    ) -> Result<Vec<Vec<f32>>>;
}

/// Experts computed straight from the model's weights.
#[derive(Debug, Default, Clone, Copy)]
pub struct HostExperts;

impl ExpertRunner for HostExperts {
    fn run_experts(
        &mut self,
        model: &Model,
        layer: usize,
        x_norm: &[f32],
        decision: &RouterDecision,
    ) -> Result<Vec<Vec<f32>>> {
        run_selected(x_norm, decision, &model.layers[layer].experts)
    }
}

pub fn embed(model: &Model, token: u32) -> Result<Vec<f32>> {
    let t = token as usize;
    if t >= model.config.vocab {
        return Err(Error::OutOfRange {
            index: t,
            len: model.config.vocab,
        });
    }
    Ok(model.embedding.row(t).to_vec())
}

/// Layer 0 always uses the true router. With a predictor, layer `l >= 1`
/// executes the decision predicted at `l-1`; the true router is still
/// evaluated and logged.
pub fn forward_with(
    model: &Model,
    state: &mut DecodeState,
    token: u32,
    predictor: Option<&dyn NextLayerPredictor>,
    runner: &mut dyn ExpertRunner,
    mut sink: Option<&mut dyn TraceSink>,
) -> Result<Vec<f32>> {
    let cfg = &model.config;
    let position = state.position();
    let mut h = embed(model, token)?;
    let mut pending: Option<Prediction> = None;

    for (l, lw) in model.layers.iter().enumerate() {
        runner.begin_layer(l)?;
        let a = rms_norm(&h, &lw.attn_norm_gain, cfg.eps)?;
        let att = attention_step(&a, state.cache_mut(l), lw, position, cfg.rope_base)?;
        let r = add(&h, &att)?;
        runner.after_attention(l)?;

        let s = rms_norm(&r, &lw.moe_norm_gain, cfg.eps)?;
        let (router_logits, true_decision) = router(&s, &lw.gate, cfg.top_k, cfg.gating)?;
        let executed = match pending.take() {
            Some(p) => p.decision,
            None => true_decision.clone(),
        };
        executed.validate(cfg.experts)?;

        let next = match predictor {
            Some(p) if l + 1 < cfg.layers => {
                let ctx = LayerContext {
                    layer: l,
                    s: &s,
                    r: &r,
                    decision: &executed,
                };
                Some(p.predict_next(model, state, &ctx)?)
            }
            _ => None,
        };
        runner.after_gate(l, &executed, next.as_ref().map(|p| &p.decision))?;

        let outputs = runner.run_experts(model, l, &s, &executed)?;
        let m = combine(&outputs, &executed.gates, cfg.hidden)?;
        let h_next = add(&r, &m)?;

        if let Some(sink) = sink.as_deref_mut() {
            sink.record(&LayerRecord {
                token,
                position,
                layer: l,
                input: h,
                r,
                s,
                router_logits,
                true_decision,
                executed,
                predicted_next: next.clone(),
                expert_outputs: outputs,
                m,
            })?;
        }
        pending = next;
        h = h_next;
    }

    state.advance();
    let hf = rms_norm(&h, &model.final_norm_gain, cfg.eps)?;
    let logits = model.lm_head.matvec(&hf)?;
    if let Some(sink) = sink {
        sink.end_token(position)?;
    }
    Ok(logits)
}

/// True-router decode step.
pub fn forward_decode(
    model: &Model,
    state: &mut DecodeState,
    token: u32,
    sink: Option<&mut dyn TraceSink>,
) -> Result<Vec<f32>> {
    forward_with(model, state, token, None, &mut HostExperts, sink)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// logits of the last decode step
    pub last_logits: Vec<f32>,
}

/// Greedy generation. All but the last prompt token are prefilled with true
/// routing; then `n_new` decode steps run, the first one consuming the last
/// prompt token, each using `predictor` (or the true router when `None`).
pub fn generate(
    model: &Model,
    prompt: &[u32],
    n_new: usize,
    predictor: Option<&dyn NextLayerPredictor>,
) -> Result<Generation> {
    let mut state = DecodeState::for_model(model);
    let mut cur = prefill(model, &mut state, prompt)?;
    let mut tokens = Vec::with_capacity(n_new);
    let mut last_logits = Vec::new();
    for _ in 0..n_new {
        last_logits = forward_with(model, &mut state, cur, predictor, &mut HostExperts, None)?;
        cur = argmax(&last_logits) as u32;
        tokens.push(cur);
    }
    Ok(Generation { tokens, last_logits })
}

/// Process `prompt[..n-1]` with true routing; returns the token that starts decode.
pub fn prefill(model: &Model, state: &mut DecodeState, prompt: &[u32]) -> Result<u32> {
    let (&last, head) = prompt.split_last().ok_or(Error::Empty("prompt"))?;
    for &t in head {
        forward_decode(model, state, t, None)?;
    }
    Ok(last)
}
