//! Next-layer expert prediction: default vectors, the quasi-hidden state, the
//! predictor family, and speculative decode.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::model::forward::{forward_with, HostExperts, LayerContext, NextLayerPredictor, Prediction};
use crate::model::layers::{
    attention_peek, combine, route_from_logits, router, run_selected, DecodeState, RouterDecision,
};
use crate::model::trace::{LayerRecord, TraceBundle, TraceField, TraceSink};
use crate::model::Model;
use crate::numerics::{add, axpy, rms_norm};
use crate::tensor_io::Tensor;

/// Per-(layer, expert) mean of the expert's raw output.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultVectorTable {
    layers: usize,
    experts: usize,
    hidden: usize,
    /// L × E × H
    d: Vec<f32>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct CountsFile {
    layers: usize,
    experts: usize,
    hidden: usize,
    counts: Vec<Vec<u64>>,
}

impl DefaultVectorTable {
    pub fn zeros(layers: usize, experts: usize, hidden: usize) -> Self {
        Self {
            layers,
            experts,
            hidden,
            d: vec![0.0; layers * experts * hidden],
            counts: vec![0; layers * experts],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers, self.experts, self.hidden)
    }

    fn idx(&self, layer: usize, expert: usize) -> Result<usize> {
        if layer >= self.layers {
            return Err(Error::OutOfRange {
                index: layer,
                len: self.layers,
            });
        }
        if expert >= self.experts {
            return Err(Error::OutOfRange {
                index: expert,
                len: self.experts,
            });
        }
        Ok(layer * self.experts + expert)
    }

    pub fn get(&self, layer: usize, expert: usize) -> Result<&[f32]> {
        let i = self.idx(layer, expert)?;
        Ok(&self.d[i * self.hidden..(i + 1) * self.hidden])
    }

    pub fn count(&self, layer: usize, expert: usize) -> Result<u64> {
        Ok(self.counts[self.idx(layer, expert)?])
    }

    pub fn set(&mut self, layer: usize, expert: usize, v: &[f32], count: u64) -> Result<()> {
        if v.len() != self.hidden {
            return Err(Error::shape(format!("default vector {} vs H {}", v.len(), self.hidden)));
        }
        let i = self.idx(layer, expert)?;
        self.d[i * self.hidden..(i + 1) * self.hidden].copy_from_slice(v);
        self.counts[i] = count;
        Ok(())
    }

    /// `Σ_j gates[j] · d[layer][ids[j]]`
    pub fn layer_default(&self, decision: &RouterDecision, layer: usize) -> Result<Vec<f32>> {
        if decision.ids.len() != decision.gates.len() {
            return Err(Error::shape("decision ids/gates length mismatch"));
        }
        let mut out = vec![0.0f32; self.hidden];
        for (&e, &g) in decision.ids.iter().zip(&decision.gates) {
            axpy(g, self.get(layer, e)?, &mut out);
        }
        Ok(out)
    }

    /// `default_vectors.moet` [L, E, H] plus `counts.json` inside `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        Tensor::new(vec![self.layers, self.experts, self.hidden], self.d.clone())?
            .save(dir.join("default_vectors.moet"))?;
        let counts = CountsFile {
            layers: self.layers,
            experts: self.experts,
            hidden: self.hidden,
            counts: self.counts.chunks(self.experts.max(1)).map(|c| c.to_vec()).collect(),
        };
        fs::write(dir.join("counts.json"), serde_json::to_string(&counts)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let t = Tensor::load(dir.join("default_vectors.moet"))?;
        let [l, e, h] = t.dims[..] else {
            return Err(Error::format(format!(
                "default vectors must be rank 3, got {:?}",
                t.dims
            )));
        };
        let counts: CountsFile = serde_json::from_slice(&fs::read(dir.join("counts.json"))?)?;
        if (counts.layers, counts.experts, counts.hidden) != (l, e, h)
            || counts.counts.len() != l
            || counts.counts.iter().any(|c| c.len() != e)
        {
            return Err(Error::format("counts.json does not match default_vectors.moet"));
        }
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::format("non-finite default vector entry"));
        }
        Ok(Self {
            layers: l,
            experts: e,
            hidden: h,
            d: t.data,
            counts: counts.counts.concat(),
        })
    }
}

/// Streaming f64 running mean of raw expert outputs.
#[derive(Debug, Clone)]
pub struct DefaultVectorAccumulator {
    layers: usize,
    experts: usize,
    hidden: usize,
    mean: Vec<f64>,
    counts: Vec<u64>,
}

impl DefaultVectorAccumulator {
    pub fn new(layers: usize, experts: usize, hidden: usize) -> Self {
        Self {
            layers,
            experts,
            hidden,
            mean: vec![0.0; layers * experts * hidden],
            counts: vec![0; layers * experts],
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let c = &model.config;
        Self::new(c.layers, c.experts, c.hidden)
    }

    pub fn observe(&mut self, layer: usize, expert: usize, output: &[f32]) -> Result<()> {
        if layer >= self.layers || expert >= self.experts {
            return Err(Error::format(format!(
                "record for layer {layer} expert {expert} outside {}x{}",
                self.layers, self.experts
            )));
        }
        if output.len() != self.hidden {
            return Err(Error::format(format!(
                "expert output of length {} (H = {})",
                output.len(),
                self.hidden
            )));
        }
        let i = layer * self.experts + expert;
        self.counts[i] += 1;
        let n = self.counts[i] as f64;
        let row = &mut self.mean[i * self.hidden..(i + 1) * self.hidden];
        for (m, &x) in row.iter_mut().zip(output) {
            *m += (x as f64 - *m) / n;
        }
        Ok(())
    }

    pub fn freeze(&self) -> DefaultVectorTable {
        DefaultVectorTable {
            layers: self.layers,
            experts: self.experts,
            hidden: self.hidden,
            d: self.mean.iter().map(|&x| x as f32).collect(),
            counts: self.counts.clone(),
        }
    }
}

impl TraceSink for DefaultVectorAccumulator {
    fn record(&mut self, rec: &LayerRecord) -> Result<()> {
        if rec.expert_outputs.len() != rec.executed.ids.len() {
            return Err(Error::format(format!(
                "layer {}: {} expert outputs for {} selected experts",
                rec.layer,
                rec.expert_outputs.len(),
                rec.executed.ids.len()
            )));
        }
        for (&e, out) in rec.executed.ids.iter().zip(&rec.expert_outputs) {
            self.observe(rec.layer, e, out)?;
        }
        Ok(())
    }
}

pub fn accumulate_default_vectors(bundle: &TraceBundle) -> Result<DefaultVectorTable> {
    bundle.require(&[TraceField::Ids, TraceField::ExpertOut])?;
    if bundle.manifest.tokens == 0 {
        return Err(Error::Empty("trace"));
    }
    let c = bundle.config();
    let mut acc = DefaultVectorAccumulator::new(c.layers, c.experts, c.hidden);
    bundle.replay(&mut acc)?;
    Ok(acc.freeze())
}

/// `rms_norm(r_l + d_l, next_norm_gain, eps)`
pub fn quasi_hidden(r: &[f32], d: &[f32], next_norm_gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    rms_norm(&add(r, d)?, next_norm_gain, eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    BaselineS,
    RouterPf,
    EstPf,
    Hybrid,
    Oracle,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 5] = [
        PredictorKind::BaselineS,
        PredictorKind::RouterPf,
        PredictorKind::EstPf,
        PredictorKind::Hybrid,
        PredictorKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::BaselineS => "baseline-s",
            PredictorKind::RouterPf => "router-pf",
            PredictorKind::EstPf => "est-pf",
            PredictorKind::Hybrid => "hybrid",
            PredictorKind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown predictor `{s}`")))
    }
}

/// Source layer → variant used to predict the following layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HybridMap(pub BTreeMap<usize, PredictorKind>);

impl HybridMap {
    /// Must name a plain variant for every source layer `0..layers-1`.
    pub fn validate(&self, layers: usize) -> Result<()> {
        for l in 0..layers.saturating_sub(1) {
            match self.0.get(&l) {
                None => {
                    return Err(Error::Config(format!("hybrid map does not cover layer {l}")));
                }
                Some(PredictorKind::Hybrid | PredictorKind::Oracle) => {
                    return Err(Error::Config(format!(
                        "hybrid map layer {l}: only baseline-s, router-pf, est-pf allowed"
                    )));
                }
                Some(_) => {}
            }
        }
        if let Some(&l) = self.0.keys().find(|&&l| l + 1 >= layers) {
            return Err(Error::Config(format!(
                "hybrid map names layer {l}, last source layer is {}",
                layers.saturating_sub(2)
            )));
        }
        Ok(())
    }

    /// Router-PF where its recall is at least `threshold`, Est-PF elsewhere.
    pub fn from_hit_rates(router_pf: &[f64], threshold: f64) -> Self {
        Self(
            router_pf
                .iter()
                .enumerate()
                .map(|(l, &r)| {
                    let k = if r >= threshold {
                        PredictorKind::RouterPf
                    } else {
                        PredictorKind::EstPf
                    };
                    (l, k)
                })
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    fn at(&self, layer: usize) -> Result<PredictorKind> {
        self.0
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::Config(format!("hybrid map does not cover layer {layer}")))
    }
}

/// A configured predictor. Shared resources are reference-counted so one
/// predictor can serve several decode streams.
#[derive(Debug, Clone)]
pub struct Predictor {
    kind: PredictorKind,
    table: Option<Arc<DefaultVectorTable>>,
    estimator: Option<Arc<Estimator>>,
    hybrid: Option<HybridMap>,
}

impl Predictor {
    pub fn new(
        kind: PredictorKind,
        model: &Model,
        table: Option<Arc<DefaultVectorTable>>,
        estimator: Option<Arc<Estimator>>,
        hybrid: Option<HybridMap>,
    ) -> Result<Self> {
        let c = &model.config;
        let used: Vec<PredictorKind> = match kind {
            PredictorKind::Hybrid => {
                let map = hybrid
                    .as_ref()
                    .ok_or_else(|| Error::Missing("hybrid map (required by hybrid)".into()))?;
                map.validate(c.layers)?;
                map.0.values().copied().collect()
            }
            k => vec![k],
        };
        let needs_table = used
            .iter()
            .any(|k| matches!(k, PredictorKind::RouterPf | PredictorKind::EstPf));
        let needs_est = used.contains(&PredictorKind::EstPf);
        if needs_table {
            let t = table
                .as_ref()
                .ok_or_else(|| Error::Missing(format!("default vectors (required by {})", kind.name())))?;
            if t.shape() != (c.layers, c.experts, c.hidden) {
                return Err(Error::Config(format!(
                    "default vectors shape {:?} does not match model ({}, {}, {})",
                    t.shape(),
                    c.layers,
                    c.experts,
                    c.hidden
                )));
            }
        }
        if needs_est {
            let e = estimator
                .as_ref()
                .ok_or_else(|| Error::Missing(format!("estimator (required by {})", kind.name())))?;
            let ec = &e.config;
            if (ec.d, ec.experts, ec.layers) != (c.hidden, c.experts, c.layers) {
                return Err(Error::Config(format!(
                    "estimator geometry d={} E={} L={} does not match model",
                    ec.d, ec.experts, ec.layers
                )));
            }
        }
        Ok(Self {
            kind,
            table,
            estimator,
            hybrid,
        })
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    fn variant_at(&self, layer: usize) -> Result<PredictorKind> {
        match (self.kind, &self.hybrid) {
            (PredictorKind::Hybrid, Some(map)) => map.at(layer),
            (k, _) => Ok(k),
        }
    }

    /// Quasi-hidden state of layer `layer` under `decision`.
    pub fn quasi(&self, model: &Model, layer: usize, r: &[f32], decision: &RouterDecision) -> Result<Vec<f32>> {
        let table = self
            .table
            .as_ref()
            .ok_or_else(|| Error::Missing("default vectors".into()))?;
        let d = table.layer_default(decision, layer)?;
        quasi_hidden(r, &d, &model.layers[layer + 1].moe_norm_gain, model.config.eps)
    }

    /// Prediction from layer-`l` signals alone. The oracle needs the live
    /// decode state and is rejected here.
    pub fn predict_from_signals(
        &self,
        model: &Model,
        layer: usize,
        s: &[f32],
        r: &[f32],
        decision: &RouterDecision,
    ) -> Result<Prediction> {
        let c = &model.config;
        if layer + 1 >= c.layers {
            return Err(Error::OutOfRange {
                index: layer + 1,
                len: c.layers,
            });
        }
        let next = &model.layers[layer + 1];
        match self.variant_at(layer)? {
            PredictorKind::BaselineS => {
                let (logits, decision) = router(s, &next.gate, c.top_k, c.gating)?;
                Ok(Prediction { logits, decision })
            }
            PredictorKind::RouterPf => {
                let q = self.quasi(model, layer, r, decision)?;
                let (logits, decision) = router(&q, &next.gate, c.top_k, c.gating)?;
                Ok(Prediction { logits, decision })
            }
            PredictorKind::EstPf => {
                let q = self.quasi(model, layer, r, decision)?;
                let est = self
                    .estimator
                    .as_ref()
                    .ok_or_else(|| Error::Missing("estimator".into()))?;
                let logits = est.forward(&q, layer)?;
                let decision = route_from_logits(&logits, c.top_k, c.gating)?;
                Ok(Prediction { logits, decision })
            }
            PredictorKind::Oracle | PredictorKind::Hybrid => {
                Err(Error::Config("oracle prediction needs the live decode state".into()))
            }
        }
    }
}

/// Runs the rest of layer `l` and the attention of layer `l+1` without
/// touching `state`, and returns the true layer-`l+1` routing.
pub fn oracle_next(model: &Model, state: &DecodeState, ctx: &LayerContext) -> Result<Prediction> {
    let c = &model.config;
    let l = ctx.layer;
    let outputs = run_selected(ctx.s, ctx.decision, &model.layers[l].experts)?;
    let m = combine(&outputs, &ctx.decision.gates, c.hidden)?;
    let h = add(ctx.r, &m)?;
    let next = &model.layers[l + 1];
    let a = rms_norm(&h, &next.attn_norm_gain, c.eps)?;
    let att = attention_peek(&a, state.cache(l + 1), next, state.position(), c.rope_base)?;
    let r = add(&h, &att)?;
    let s = rms_norm(&r, &next.moe_norm_gain, c.eps)?;
    let (logits, decision) = router(&s, &next.gate, c.top_k, c.gating)?;
    Ok(Prediction { logits, decision })
}

impl NextLayerPredictor for Predictor {
    fn predict_next(&self, model: &Model, state: &DecodeState, ctx: &LayerContext) -> Result<Prediction> {
        if self.kind == PredictorKind::Oracle {
            oracle_next(model, state, ctx)
        } else {
            self.predict_from_signals(model, ctx.layer, ctx.s, ctx.r, ctx.decision)
        }
    }
}

/// Decode step that executes the decisions predicted one layer ahead.
pub fn speculative_forward(
    model: &Model,
    state: &mut DecodeState,
    token: u32,
    predictor: &Predictor,
    sink: Option<&mut dyn TraceSink>,
) -> Result<Vec<f32>> {
    forward_with(model, state, token, Some(predictor), &mut HostExperts, sink)
}
