//! Small MLP that maps a layer's quasi-hidden state to the next layer's
//! router logits, trained by KL distillation with hand-written gradients.
//!
//! ```text
//! z = A q + pos[l]
//! h = z + C silu(B z)
//! logits = W_head layernorm(h)
//! ```

use std::fs;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::recall_at_k;
use crate::model::layers::route_from_logits;
use crate::model::trace::{LayerRecord, TraceBundle, TraceField, TraceSink};
use crate::model::{GatingOrder, Model};
use crate::numerics::{derive_seed, Rng};
use crate::speculation::{quasi_hidden, DefaultVectorTable};
use crate::tensor_io::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// input width (model hidden size)
    pub d: usize,
    /// reduction factor
    pub m: usize,
    /// expansion factor
    pub n: usize,
    pub experts: usize,
    pub layers: usize,
    pub top_k: usize,
    #[serde(default = "default_ln_eps")]
    pub eps: f64,
    pub seed: u64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl EstimatorConfig {
    /// m=2, n=4 sized for `model`.
    pub fn for_model(model: &Model, seed: u64) -> Self {
        let c = &model.config;
        Self {
            d: c.hidden,
            m: 2,
            n: 4,
            experts: c.experts,
            layers: c.layers,
            top_k: c.top_k,
            eps: default_ln_eps(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.m < 2 || self.n < 2 {
            return fail(format!("m, n > 1 violated: m={} n={}", self.m, self.n));
        }
        if self.d == 0 || self.d % self.m != 0 {
            return fail(format!("d divisible by m violated: d={} m={}", self.d, self.m));
        }
        if self.experts == 0 || self.layers == 0 {
            return fail("experts and layers must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return fail(format!(
                "1 <= k <= E violated: top_k={} experts={}",
                self.top_k, self.experts
            ));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps > 0 violated: {}", self.eps));
        }
        Ok(())
    }

    pub fn latent(&self) -> usize {
        self.d / self.m
    }

    pub fn inner(&self) -> usize {
        self.latent() * self.n
    }

    /// `d·d/m + L·d/m + 2n(d/m)² + 2·d/m + (d/m)·E`
    pub fn param_count(&self) -> usize {
        let r = self.latent();
        self.d * r + self.layers * r + 2 * self.n * r * r + 2 * r + r * self.experts
    }
}

/// Row-major dense matrix over any float type.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Float> Dense<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn matvec(&self, x: &[F], out: &mut [F]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(x).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        }
    }

    /// `out = selfᵀ g`
    fn matvec_t(&self, g: &[F], out: &mut [F]) {
        out.iter_mut().for_each(|o| *o = F::zero());
        for (i, &gi) in g.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * gi;
            }
        }
    }

    /// `self += scale · g xᵀ`
    fn add_outer(&mut self, g: &[F], x: &[F], scale: F) {
        let cols = self.cols;
        for (i, &gi) in g.iter().enumerate() {
            let s = gi * scale;
            for (w, &xj) in self.data[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *w = *w + s * xj;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// latent × d
    pub a: Dense<F>,
    /// L × latent
    pub pos: Dense<F>,
    /// inner × latent
    pub b: Dense<F>,
    /// latent × inner
    pub c: Dense<F>,
    pub ln_gain: Vec<F>,
    pub ln_bias: Vec<F>,
    /// E × latent
    pub w_head: Dense<F>,
}

pub const TENSOR_NAMES: [&str; 7] = ["a", "pos", "b", "c", "ln_gain", "ln_bias", "w_head"];

impl<F: Float> Params<F> {
    pub fn zeros(cfg: &EstimatorConfig) -> Self {
        let (r, i) = (cfg.latent(), cfg.inner());
        Self {
            a: Dense::zeros(r, cfg.d),
            pos: Dense::zeros(cfg.layers, r),
            b: Dense::zeros(i, r),
            c: Dense::zeros(r, i),
            ln_gain: vec![F::zero(); r],
            ln_bias: vec![F::zero(); r],
            w_head: Dense::zeros(cfg.experts, r),
        }
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[F]; 7] {
        [
            &self.a.data,
            &self.pos.data,
            &self.b.data,
            &self.c.data,
            &self.ln_gain,
            &self.ln_bias,
            &self.w_head.data,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [F]; 7] {
        [
            &mut self.a.data,
            &mut self.pos.data,
            &mut self.b.data,
            &mut self.c.data,
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.w_head.data,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        let cd = |d: &Dense<F>| Dense {
            rows: d.rows,
            cols: d.cols,
            data: cv(&d.data),
        };
        fn cv<F: Float, G: Float>(v: &[F]) -> Vec<G> {
            v.iter().map(|x| G::from(*x).unwrap()).collect()
        }
        Params {
            a: cd(&self.a),
            pos: cd(&self.pos),
            b: cd(&self.b),
            c: cd(&self.c),
            ln_gain: cv(&self.ln_gain),
            ln_bias: cv(&self.ln_bias),
            w_head: cd(&self.w_head),
        }
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = F::zero());
        }
    }
}

impl Params<f32> {
    pub fn init(cfg: &EstimatorConfig) -> Self {
        let mut rng = Rng::new(derive_seed(cfg.seed, "estimator-init"));
        let (r, i) = (cfg.latent(), cfg.inner());
        let mut p = Self::zeros(cfg);
        p.a.data = rng.normal_vec(r * cfg.d, 1.0 / (cfg.d as f32).sqrt());
        p.pos.data = rng.normal_vec(cfg.layers * r, 0.02);
        p.b.data = rng.normal_vec(i * r, 1.0 / (r as f32).sqrt());
        p.c.data = rng.normal_vec(r * i, 1.0 / (i as f32).sqrt());
        p.ln_gain = vec![1.0; r];
        p.w_head.data = rng.normal_vec(cfg.experts * r, 1.0 / (r as f32).sqrt());
        p
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache<F> {
    z: Vec<F>,
    u: Vec<F>,
    act: Vec<F>,
    xhat: Vec<F>,
    y: Vec<F>,
    inv_std: F,
    pub logits: Vec<F>,
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn check_input<F>(cfg: &EstimatorConfig, q: &[F], layer: usize) -> Result<()> {
    if layer >= cfg.layers {
        return Err(Error::OutOfRange {
            index: layer,
            len: cfg.layers,
        });
    }
    if q.len() != cfg.d {
        return Err(Error::shape(format!("estimator input {} vs d {}", q.len(), cfg.d)));
    }
    Ok(())
}

pub fn forward_cached<F: Float>(cfg: &EstimatorConfig, p: &Params<F>, q: &[F], layer: usize) -> Result<Cache<F>> {
    check_input(cfg, q, layer)?;
    let (r, i) = (cfg.latent(), cfg.inner());
    let mut z = vec![F::zero(); r];
    p.a.matvec(q, &mut z);
    for (zj, &pj) in z.iter_mut().zip(p.pos.row(layer)) {
        *zj = *zj + pj;
    }
    let mut u = vec![F::zero(); i];
    p.b.matvec(&z, &mut u);
    let act: Vec<F> = u.iter().map(|&x| x * sigmoid(x)).collect();
    let mut h = vec![F::zero(); r];
    p.c.matvec(&act, &mut h);
    for (hj, &zj) in h.iter_mut().zip(&z) {
        *hj = *hj + zj;
    }

    let rf = F::from(r).unwrap();
    let mean = h.iter().fold(F::zero(), |a, &x| a + x) / rf;
    let var = h.iter().fold(F::zero(), |a, &x| a + (x - mean) * (x - mean)) / rf;
    let inv_std = F::one() / (var + F::from(cfg.eps).unwrap()).sqrt();
    let xhat: Vec<F> = h.iter().map(|&x| (x - mean) * inv_std).collect();
    let y: Vec<F> = xhat
        .iter()
        .zip(&p.ln_gain)
        .zip(&p.ln_bias)
        .map(|((&x, &g), &b)| x * g + b)
        .collect();
    let mut logits = vec![F::zero(); cfg.experts];
    p.w_head.matvec(&y, &mut logits);
    Ok(Cache {
        z,
        u,
        act,
        xhat,
        y,
        inv_std,
        logits,
    })
}

pub fn forward<F: Float>(cfg: &EstimatorConfig, p: &Params<F>, q: &[F], layer: usize) -> Result<Vec<F>> {
    Ok(forward_cached(cfg, p, q, layer)?.logits)
}

fn log_softmax<F: Float>(v: &[F]) -> Vec<F> {
    let max = v.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = v.iter().fold(F::zero(), |a, &x| a + (x - max).exp()).ln() + max;
    v.iter().map(|&x| x - lse).collect()
}

/// `KL(softmax(target) ‖ softmax(pred))` and its gradient `softmax(pred) − softmax(target)`.
pub fn kl_and_grad<F: Float>(target: &[F], pred: &[F]) -> Result<(F, Vec<F>)> {
    if target.len() != pred.len() || target.is_empty() {
        return Err(Error::shape(format!("logits {} vs {}", target.len(), pred.len())));
    }
    let lp = log_softmax(target);
    let lq = log_softmax(pred);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&a, &b) in lp.iter().zip(&lq) {
        let p = a.exp();
        if p > F::zero() {
            loss = loss + p * (a - b);
        }
        grad.push(b.exp() - p);
    }
    Ok((loss.max(F::zero()), grad))
}

pub fn distill_loss<F: Float>(cfg: &EstimatorConfig, p: &Params<F>, q: &[F], layer: usize, target: &[F]) -> Result<F> {
    let out = forward(cfg, p, q, layer)?;
    Ok(kl_and_grad(target, &out)?.0)
}

/// Adds `weight · ∂loss/∂params` into `grads`; returns the unweighted loss.
pub fn accumulate_grad<F: Float>(
    cfg: &EstimatorConfig,
    p: &Params<F>,
    q: &[F],
    layer: usize,
    target: &[F],
    weight: F,
    grads: &mut Params<F>,
) -> Result<F> {
    let cache = forward_cached(cfg, p, q, layer)?;
    let (loss, g) = kl_and_grad(target, &cache.logits)?;
    let (r, i) = (cfg.latent(), cfg.inner());

    grads.w_head.add_outer(&g, &cache.y, weight);
    let mut dy = vec![F::zero(); r];
    p.w_head.matvec_t(&g, &mut dy);

    let mut dxhat = vec![F::zero(); r];
    for j in 0..r {
        grads.ln_gain[j] = grads.ln_gain[j] + weight * dy[j] * cache.xhat[j];
        grads.ln_bias[j] = grads.ln_bias[j] + weight * dy[j];
        dxhat[j] = dy[j] * p.ln_gain[j];
    }
    let rf = F::from(r).unwrap();
    let m1 = dxhat.iter().fold(F::zero(), |a, &x| a + x) / rf;
    let m2 = dxhat.iter().zip(&cache.xhat).fold(F::zero(), |a, (&d, &x)| a + d * x) / rf;
    let dh: Vec<F> = dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(&d, &x)| cache.inv_std * (d - m1 - x * m2))
        .collect();

    grads.c.add_outer(&dh, &cache.act, weight);
    let mut dact = vec![F::zero(); i];
    p.c.matvec_t(&dh, &mut dact);
    let du: Vec<F> = dact
        .iter()
        .zip(&cache.u)
        .map(|(&d, &u)| {
            let s = sigmoid(u);
            d * s * (F::one() + u * (F::one() - s))
        })
        .collect();

    grads.b.add_outer(&du, &cache.z, weight);
    let mut dz = vec![F::zero(); r];
    p.b.matvec_t(&du, &mut dz);
    for (a, &b) in dz.iter_mut().zip(&dh) {
        *a = *a + b;
    }
    let cols = grads.pos.cols;
    for (pj, &d) in grads.pos.data[layer * cols..(layer + 1) * cols].iter_mut().zip(&dz) {
        *pj = *pj + weight * d;
    }
    grads.a.add_outer(&dz, q, weight);
    Ok(loss)
}

/// Gradient of one sample's loss.
pub fn backward<F: Float>(
    cfg: &EstimatorConfig,
    p: &Params<F>,
    q: &[F],
    layer: usize,
    target: &[F],
) -> Result<Params<F>> {
    let mut g = Params::zeros(cfg);
    accumulate_grad(cfg, p, q, layer, target, F::one(), &mut g)?;
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Params<f32>,
    v: Params<f32>,
}

impl Adam {
    pub fn new(cfg: &EstimatorConfig, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
        }
    }

    pub fn update(&mut self, p: &mut Params<f32>, g: &Params<f32>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((pt, gt), mt), vt) in p
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for j in 0..pt.len() {
                let gj = gt[j];
                mt[j] = b1 * mt[j] + (1.0 - b1) * gj;
                vt[j] = b2 * vt[j] + (1.0 - b2) * gj * gj;
                let mhat = mt[j] / bc1;
                let vhat = vt[j] / bc2;
                pt[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// A frozen estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    pub config: EstimatorConfig,
    pub params: Params<f32>,
}

impl Estimator {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn forward(&self, q: &[f32], layer: usize) -> Result<Vec<f32>> {
        forward(&self.config, &self.params, q, layer)
    }

    /// Writes `estimator.json` and one MOET file per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("estimator.json"), serde_json::to_string_pretty(&self.config)?)?;
        let p = &self.params;
        let dims: [Vec<usize>; 7] = [
            vec![p.a.rows, p.a.cols],
            vec![p.pos.rows, p.pos.cols],
            vec![p.b.rows, p.b.cols],
            vec![p.c.rows, p.c.cols],
            vec![p.ln_gain.len()],
            vec![p.ln_bias.len()],
            vec![p.w_head.rows, p.w_head.cols],
        ];
        for ((name, t), d) in TENSOR_NAMES.iter().zip(p.tensors()).zip(dims) {
            Tensor::new(d, t.to_vec())?.save(dir.join(format!("estimator.{name}.moet")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: EstimatorConfig = serde_json::from_slice(&fs::read(dir.join("estimator.json"))?)?;
        config.validate()?;
        let mut params = Params::<f32>::zeros(&config);
        for (name, t) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
            let loaded = Tensor::load(dir.join(format!("estimator.{name}.moet")))?;
            if loaded.data.len() != t.len() {
                return Err(Error::format(format!(
                    "estimator tensor {name}: {} values, expected {}",
                    loaded.data.len(),
                    t.len()
                )));
            }
            t.copy_from_slice(&loaded.data);
        }
        Ok(Self { config, params })
    }
}

/// Which signal feeds the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// quasi-hidden state of the source layer
    Quasi,
    /// true router input of the next layer (sanity task)
    NextRouterInput,
}

/// Flattened (input, source layer, next-layer router logits) samples in
/// token-major order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub d: usize,
    pub experts: usize,
    pub inputs: Vec<f32>,
    pub layers: Vec<u32>,
    pub targets: Vec<f32>,
    /// samples per token (L − 1)
    pub per_token: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.len() / self.per_token.max(1)
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    pub fn target(&self, i: usize) -> &[f32] {
        &self.targets[i * self.experts..(i + 1) * self.experts]
    }

    /// Samples for the token range, preserving order.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Dataset {
        let (a, b) = (start * self.per_token, end * self.per_token);
        Dataset {
            d: self.d,
            experts: self.experts,
            inputs: self.inputs[a * self.d..b * self.d].to_vec(),
            layers: self.layers[a..b].to_vec(),
            targets: self.targets[a * self.experts..b * self.experts].to_vec(),
            per_token: self.per_token,
        }
    }

    /// Temporal split: the last `ceil(10%)` of tokens are held out.
    pub fn split_90_10(&self) -> (Dataset, Dataset) {
        let n = self.tokens();
        let val = n.div_ceil(10).min(n.saturating_sub(1));
        let cut = n - val;
        (self.slice_tokens(0, cut), self.slice_tokens(cut, n))
    }

    pub fn from_trace(
        bundle: &TraceBundle,
        model: &Model,
        table: Option<&DefaultVectorTable>,
        input: InputKind,
    ) -> Result<Self> {
        let mut need = vec![TraceField::RouterLogits];
        match input {
            InputKind::Quasi => need.extend([TraceField::R, TraceField::Ids, TraceField::Gates]),
            InputKind::NextRouterInput => need.push(TraceField::S),
        }
        bundle.require(&need)?;
        if input == InputKind::Quasi && table.is_none() {
            return Err(Error::Missing(
                "default-vector table (required for quasi inputs)".into(),
            ));
        }
        let mut sink = DatasetSink {
            model,
            table,
            input,
            prev: None,
            out: Dataset {
                d: model.config.hidden,
                experts: model.config.experts,
                per_token: model.config.layers.saturating_sub(1),
                ..Default::default()
            },
        };
        bundle.replay(&mut sink)?;
        if sink.out.is_empty() {
            return Err(Error::Empty("trace"));
        }
        Ok(sink.out)
    }
}

struct DatasetSink<'a> {
    model: &'a Model,
    table: Option<&'a DefaultVectorTable>,
    input: InputKind,
    prev: Option<LayerRecord>,
    out: Dataset,
}

impl TraceSink for DatasetSink<'_> {
    fn record(&mut self, rec: &LayerRecord) -> Result<()> {
        if rec.layer > 0 {
            let prev = self
                .prev
                .as_ref()
                .ok_or_else(|| Error::format("layer record without predecessor"))?;
            let l = prev.layer;
            let x = match self.input {
                InputKind::NextRouterInput => rec.s.clone(),
                InputKind::Quasi => {
                    let table = self.table.expect("checked in from_trace");
                    let d = table.layer_default(&prev.executed, l)?;
                    quasi_hidden(
                        &prev.r,
                        &d,
                        &self.model.layers[l + 1].moe_norm_gain,
                        self.model.config.eps,
                    )?
                }
            };
            self.out.inputs.extend_from_slice(&x);
            self.out.layers.push(l as u32);
            self.out.targets.extend_from_slice(&rec.router_logits);
        }
        self.prev = Some(rec.clone());
        Ok(())
    }

    fn end_token(&mut self, _position: usize) -> Result<()> {
        self.prev = None;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    /// final learning rate as a fraction of `lr` (cosine decay)
    #[serde(default = "default_lr_floor")]
    pub lr_floor: f32,
    pub seed: u64,
}

fn default_lr_floor() -> f32 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch: 64,
            steps: 2000,
            eval_every: 100,
            lr_floor: default_lr_floor(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub tokens: f64,
    pub val_kl: f64,
    pub val_hit_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalResult {
    pub mean_kl: f64,
    pub mean_recall: f64,
    /// per source layer
    pub layer_recall: Vec<f64>,
}

pub fn evaluate(est: &Estimator, data: &Dataset, gating: GatingOrder) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let k = est.config.top_k;
    let mut kl = 0.0;
    let mut sums = vec![0.0f64; est.config.layers];
    let mut counts = vec![0usize; est.config.layers];
    for i in 0..data.len() {
        let l = data.layers[i] as usize;
        let out = est.forward(data.input(i), l)?;
        kl += kl_and_grad(data.target(i), &out)?.0 as f64;
        let pred = route_from_logits(&out, k, gating)?;
        let truth = route_from_logits(data.target(i), k, gating)?;
        sums[l] += recall_at_k(&pred, &truth)?;
        counts[l] += 1;
    }
    let n = data.len() as f64;
    let layer_recall: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    Ok(EvalResult {
        mean_kl: kl / n,
        mean_recall: sums.iter().sum::<f64>() / n,
        layer_recall,
    })
}

/// Adam training on `train`, evaluating on `val` every `eval_every` steps
/// (and at steps 0 and `steps`).
pub fn train_estimator(
    cfg: &EstimatorConfig,
    train: &Dataset,
    val: &Dataset,
    hp: &TrainConfig,
    gating: GatingOrder,
) -> Result<(Estimator, Vec<CurvePoint>)> {
    if train.is_empty() {
        return Err(Error::Empty("trace"));
    }
    if train.d != cfg.d || train.experts != cfg.experts {
        return Err(Error::shape(format!(
            "dataset d={} E={} vs estimator d={} E={}",
            train.d, train.experts, cfg.d, cfg.experts
        )));
    }
    if hp.batch == 0 || hp.eval_every == 0 {
        return Err(Error::Config("batch and eval_every must be >= 1".into()));
    }
    let mut est = Estimator::new(cfg.clone())?;
    let mut adam = Adam::new(cfg, hp.lr);
    let mut grads = Params::<f32>::zeros(cfg);
    let mut rng = Rng::new(derive_seed(hp.seed, "estimator-shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let per_token = train.per_token.max(1) as f64;

    let mut curve = Vec::new();
    let mut point = |est: &Estimator, step: usize| -> Result<()> {
        let r = evaluate(est, val, gating)?;
        curve.push(CurvePoint {
            step,
            tokens: (step * hp.batch) as f64 / per_token,
            val_kl: r.mean_kl,
            val_hit_rate: r.mean_recall,
        });
        Ok(())
    };
    point(&est, 0)?;

    let w = 1.0 / hp.batch as f32;
    for step in 1..=hp.steps {
        grads.fill_zero();
        for _ in 0..hp.batch {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            accumulate_grad(
                cfg,
                &est.params,
                train.input(i),
                train.layers[i] as usize,
                train.target(i),
                w,
                &mut grads,
            )?;
        }
        let progress = (step - 1) as f32 / hp.steps.max(1) as f32;
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        adam.lr = hp.lr * (hp.lr_floor + (1.0 - hp.lr_floor) * cos);
        adam.update(&mut est.params, &grads);
        if step % hp.eval_every == 0 || step == hp.steps {
            point(&est, step)?;
        }
    }
    Ok((est, curve))
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("tokens,val_kl,val_hit_rate\n");
    for p in curve {
        s.push_str(&format!(
            "{},{},{}\n",
            crate::metrics::fmt6(p.tokens),
            crate::metrics::fmt6(p.val_kl),
            crate::metrics::fmt6(p.val_hit_rate)
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Centered moving average with a window of `w` (shrinks at the edges).
pub fn smooth(v: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Largest relative error between analytic and central-difference gradients
/// over `coords` random coordinates, computed in f64.
pub fn gradient_check(
    cfg: &EstimatorConfig,
    params: &Params<f32>,
    q: &[f32],
    layer: usize,
    target: &[f32],
    coords: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let p64: Params<f64> = params.cast();
    let q64: Vec<f64> = q.iter().map(|&x| x as f64).collect();
    let t64: Vec<f64> = target.iter().map(|&x| x as f64).collect();
    let g = backward(cfg, &p64, &q64, layer, &t64)?;
    let sizes: Vec<usize> = p64.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = Rng::new(derive_seed(seed, "gradient-check"));
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let mut flat = rng.below(total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let mut probe = p64.clone();
        let orig = probe.tensors()[ti][flat];
        probe.tensors_mut()[ti][flat] = orig + step;
        let up = distill_loss(cfg, &probe, &q64, layer, &t64)?;
        probe.tensors_mut()[ti][flat] = orig - step;
        let down = distill_loss(cfg, &probe, &q64, layer, &t64)?;
        let fd = (up - down) / (2.0 * step);
        let an = g.tensors()[ti][flat];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(worst)
}
