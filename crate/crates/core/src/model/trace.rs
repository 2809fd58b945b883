//! Per-(token, layer) instrumentation records and the on-disk trace bundle.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::{forward_decode, Prediction};
use crate::model::layers::{DecodeState, RouterDecision};
use crate::model::Model;
use crate::numerics::{derive_seed, Rng};
use crate::tensor_io::{StreamReader, StreamWriter};

/// Everything observed at one layer for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub token: u32,
    /// position within the current decode window
    pub position: usize,
    pub layer: usize,
    /// residual entering the layer (empty when replayed from disk)
    pub input: Vec<f32>,
    /// post-attention residual r_l
    pub r: Vec<f32>,
    /// router input s_l = rms_norm(r_l)
    pub s: Vec<f32>,
    pub router_logits: Vec<f32>,
    pub true_decision: RouterDecision,
    pub executed: RouterDecision,
    pub predicted_next: Option<Prediction>,
    /// raw outputs of the executed experts, in decision order
    pub expert_outputs: Vec<Vec<f32>>,
    /// MoE block output m_l
    pub m: Vec<f32>,
}

pub trait TraceSink {
    fn record(&mut self, rec: &LayerRecord) -> Result<()>;

    /// Called after the last layer of each token.
    fn end_token(&mut self, _position: usize) -> Result<()> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Debug, Default)]
pub struct CollectSink {
    pub records: Vec<LayerRecord>,
}

impl TraceSink for CollectSink {
    fn record(&mut self, rec: &LayerRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Forwards to several sinks in order.
pub struct Tee<'a>(pub Vec<&'a mut dyn TraceSink>);

impl TraceSink for Tee<'_> {
    fn record(&mut self, rec: &LayerRecord) -> Result<()> {
        for s in self.0.iter_mut() {
            s.record(rec)?;
        }
        Ok(())
    }

    fn end_token(&mut self, position: usize) -> Result<()> {
        for s in self.0.iter_mut() {
            s.end_token(position)?;
        }
        Ok(())
    }
}

/// Teacher-forced true-router pass over `tokens`, resetting the attention
/// history every `window` tokens.
pub fn run_trace(model: &Model, tokens: &[u32], window: usize, sink: &mut dyn TraceSink) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("workload"));
    }
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let mut state = DecodeState::for_model(model);
    for chunk in tokens.chunks(window) {
        state.reset();
        for &t in chunk {
            forward_decode(model, &mut state, t, Some(&mut *sink))?;
        }
    }
    Ok(())
}

pub fn random_tokens(seed: u64, n: usize, vocab: usize) -> Vec<u32> {
    let mut rng = Rng::new(derive_seed(seed, "trace-tokens"));
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

/// Byte-level tokenization.
pub fn byte_tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceField {
    Tokens,
    S,
    R,
    M,
    RouterLogits,
    Ids,
    Gates,
    ExpertOut,
}

impl TraceField {
    pub const ALL: [TraceField; 8] = [
        TraceField::Tokens,
        TraceField::S,
        TraceField::R,
        TraceField::M,
        TraceField::RouterLogits,
        TraceField::Ids,
        TraceField::Gates,
        TraceField::ExpertOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TraceField::Tokens => "tokens",
            TraceField::S => "s",
            TraceField::R => "r",
            TraceField::M => "m",
            TraceField::RouterLogits => "router_logits",
            TraceField::Ids => "ids",
            TraceField::Gates => "gates",
            TraceField::ExpertOut => "expert_out",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown trace field `{name}`")))
    }

    /// Shape of one token's row.
    pub fn row_dims(self, c: &ModelConfig) -> Vec<usize> {
        match self {
            TraceField::Tokens => vec![],
            TraceField::S | TraceField::R | TraceField::M => vec![c.layers, c.hidden],
            TraceField::RouterLogits => vec![c.layers, c.experts],
            TraceField::Ids | TraceField::Gates => vec![c.layers, c.top_k],
            TraceField::ExpertOut => vec![c.layers, c.top_k, c.hidden],
        }
    }

    fn file(self) -> String {
        format!("{}.moet", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub config: ModelConfig,
    pub tokens: usize,
    pub window: usize,
    pub fields: Vec<TraceField>,
}

impl TraceManifest {
    pub fn has(&self, f: TraceField) -> bool {
        self.fields.contains(&f)
    }
}

/// Streams records into packed per-field MOET arrays.
pub struct TraceWriter {
    dir: PathBuf,
    config: ModelConfig,
    window: usize,
    fields: Vec<TraceField>,
    writers: Vec<StreamWriter>,
    rows: Vec<Vec<f32>>,
    layers_seen: usize,
    tokens: usize,
}

impl TraceWriter {
    pub fn create(dir: impl AsRef<Path>, config: &ModelConfig, window: usize, fields: &[TraceField]) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut fields = fields.to_vec();
        fields.sort_by_key(|f| TraceField::ALL.iter().position(|g| g == f));
        fields.dedup();
        let writers = fields
            .iter()
            .map(|f| StreamWriter::create(dir.join(f.file()), &f.row_dims(config)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir,
            config: config.clone(),
            window,
            rows: vec![Vec::new(); fields.len()],
            fields,
            writers,
            layers_seen: 0,
            tokens: 0,
        })
    }

    pub fn finish(self) -> Result<TraceManifest> {
        if self.layers_seen != 0 {
            return Err(Error::format("trace ended mid-token"));
        }
        for w in self.writers {
            w.finish()?;
        }
        let manifest = TraceManifest {
            config: self.config,
            tokens: self.tokens,
            window: self.window,
            fields: self.fields,
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

impl TraceSink for TraceWriter {
    fn record(&mut self, rec: &LayerRecord) -> Result<()> {
        if rec.layer != self.layers_seen {
            return Err(Error::format(format!(
                "expected layer {}, got {}",
                self.layers_seen, rec.layer
            )));
        }
        for (f, row) in self.fields.iter().zip(self.rows.iter_mut()) {
            match f {
                TraceField::Tokens => {
                    if rec.layer == 0 {
                        row.push(rec.token as f32);
                    }
                }
                TraceField::S => row.extend_from_slice(&rec.s),
                TraceField::R => row.extend_from_slice(&rec.r),
                TraceField::M => row.extend_from_slice(&rec.m),
                TraceField::RouterLogits => row.extend_from_slice(&rec.router_logits),
                TraceField::Ids => row.extend(rec.true_decision.ids.iter().map(|&i| i as f32)),
                TraceField::Gates => row.extend_from_slice(&rec.true_decision.gates),
                TraceField::ExpertOut => {
                    for o in &rec.expert_outputs {
                        row.extend_from_slice(o);
                    }
                }
            }
        }
        self.layers_seen += 1;
        Ok(())
    }

    fn end_token(&mut self, _position: usize) -> Result<()> {
        if self.layers_seen != self.config.layers {
            return Err(Error::format(format!(
                "token ended after {} of {} layers",
                self.layers_seen, self.config.layers
            )));
        }
        for (w, row) in self.writers.iter_mut().zip(self.rows.iter_mut()) {
            w.push_row(row)?;
            row.clear();
        }
        self.layers_seen = 0;
        self.tokens += 1;
        Ok(())
    }
}

/// Read side of a trace bundle directory.
#[derive(Debug, Clone)]
pub struct TraceBundle {
    pub dir: PathBuf,
    pub manifest: TraceManifest,
}

impl TraceBundle {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest: TraceManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        manifest.config.validate()?;
        for f in &manifest.fields {
            let r = StreamReader::open(dir.join(f.file()))?;
            let mut expect = vec![manifest.tokens];
            expect.extend(f.row_dims(&manifest.config));
            if r.dims() != expect.as_slice() {
                return Err(Error::format(format!(
                    "{}: dims {:?}, expected {expect:?}",
                    f.name(),
                    r.dims()
                )));
            }
        }
        Ok(Self { dir, manifest })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.manifest.config
    }

    pub fn require(&self, fields: &[TraceField]) -> Result<()> {
        for f in fields {
            if !self.manifest.has(*f) {
                return Err(Error::Missing(format!("trace field `{}`", f.name())));
            }
        }
        Ok(())
    }

    /// Feed every stored record through `sink`, token by token.
    /// Fields absent from the bundle are left empty.
    pub fn replay(&self, sink: &mut dyn TraceSink) -> Result<()> {
        let c = &self.manifest.config;
        let (l_n, h, e, k) = (c.layers, c.hidden, c.experts, c.top_k);
        let mut readers = self
            .manifest
            .fields
            .iter()
            .map(|f| Ok((*f, StreamReader::open(self.dir.join(f.file()))?, Vec::new())))
            .collect::<Result<Vec<_>>>()?;

        for t in 0..self.manifest.tokens {
            for (_, r, buf) in readers.iter_mut() {
                if !r.next_row(buf)? {
                    return Err(Error::format("trace shorter than manifest"));
                }
            }
            let get = |f: TraceField| readers.iter().find(|(g, _, _)| *g == f).map(|(_, _, b)| b);
            let token = get(TraceField::Tokens).map(|b| b[0] as u32).unwrap_or(0);
            let position = t % self.manifest.window.max(1);
            for l in 0..l_n {
                let slice = |f: TraceField, w: usize| -> Vec<f32> {
                    get(f).map(|b| b[l * w..(l + 1) * w].to_vec()).unwrap_or_default()
                };
                let ids: Vec<usize> = slice(TraceField::Ids, k).iter().map(|&x| x as usize).collect();
                let gates = slice(TraceField::Gates, k);
                let decision = RouterDecision { ids, gates };
                let expert_outputs = get(TraceField::ExpertOut)
                    .map(|b| {
                        (0..k)
                            .map(|j| b[(l * k + j) * h..(l * k + j + 1) * h].to_vec())
                            .collect()
                    })
                    .unwrap_or_default();
                sink.record(&LayerRecord {
                    token,
                    position,
                    layer: l,
                    input: Vec::new(),
                    r: slice(TraceField::R, h),
                    s: slice(TraceField::S, h),
                    router_logits: slice(TraceField::RouterLogits, e),
                    true_decision: decision.clone(),
                    executed: decision,
                    predicted_next: None,
                    expert_outputs,
                    m: slice(TraceField::M, h),
                })?;
            }
            sink.end_token(position)?;
        }
        Ok(())
    }
}
