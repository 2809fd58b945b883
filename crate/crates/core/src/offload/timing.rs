use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer stage durations in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub attn: f64,
    pub gate_topk: f64,
    pub expert: f64,
    pub copy: f64,
}

impl LayerTiming {
    pub fn compute(&self) -> f64 {
        self.attn + self.gate_topk + self.expert
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub layers: Vec<LayerTiming>,
    /// layer-0 blocking load; defaults to layer 0's copy time
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cold_start_copy: Option<f64>,
}

impl TimingModel {
    pub fn uniform(layers: usize, attn: f64, gate_topk: f64, expert: f64, copy: f64) -> Self {
        Self {
            layers: vec![
                LayerTiming {
                    attn,
                    gate_topk,
                    expert,
                    copy,
                };
                layers
            ],
            cold_start_copy: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cold_start(&self) -> f64 {
        self.cold_start_copy
            .unwrap_or_else(|| self.layers.first().map_or(0.0, |l| l.copy))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("timing model needs at least one layer".into()));
        }
        for (l, t) in self.layers.iter().enumerate() {
            for (name, v) in [
                ("t_attn", t.attn),
                ("t_gate_topk", t.gate_topk),
                ("t_expert", t.expert),
                ("t_copy", t.copy),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!(
                        "durations >= 0 violated: layer {l} {name} = {v}"
                    )));
                }
            }
        }
        if let Some(c) = self.cold_start_copy {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("durations >= 0 violated: cold_start_copy = {c}")));
            }
        }
        Ok(())
    }
}

/// MoE geometry of a published model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub name: String,
    pub layers: usize,
    pub experts: usize,
    pub hidden: usize,
    pub expert_hidden: usize,
}

impl ModelGeometry {
    pub fn known() -> Vec<ModelGeometry> {
        let g = |name: &str, layers, experts, hidden, expert_hidden| ModelGeometry {
            name: name.into(),
            layers,
            experts,
            hidden,
            expert_hidden,
        };
        vec![
            g("qwen3-30b-a3b", 48, 128, 2048, 768),
            g("glm-4.7-flash", 47, 64, 2048, 1536),
            g("gpt-oss-120b", 24, 32, 2880, 2880),
            g("qwen3-235b-a22b", 94, 128, 4096, 1536),
        ]
    }

    pub fn by_name(name: &str) -> Option<ModelGeometry> {
        Self::known().into_iter().find(|g| g.name == name)
    }

    /// Three `H × H_moe` matrices per expert.
    pub fn bytes_per_expert(&self, bytes_per_param: usize) -> u64 {
        (3 * self.hidden * self.expert_hidden * bytes_per_param) as u64
    }

    pub fn expert_memory(&self, bytes_per_param: usize) -> u64 {
        (self.layers * self.experts) as u64 * self.bytes_per_expert(bytes_per_param)
    }
}

/// Timing derived from geometry and link bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryTiming {
    pub geometry: ModelGeometry,
    pub top_k: usize,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bytes_per_s: f64,
    #[serde(default = "default_bpp")]
    pub bytes_per_param: usize,
    /// compute / (compute + copy) for one on-demand layer
    pub compute_share: f64,
    /// split of per-layer compute into attention, gate+top-k, experts
    #[serde(default = "default_split")]
    pub compute_split: [f64; 3],
}

fn default_bandwidth() -> f64 {
    25e9
}

fn default_bpp() -> usize {
    2
}

fn default_split() -> [f64; 3] {
    [0.4, 0.1, 0.5]
}

impl GeometryTiming {
    pub fn copy_us(&self) -> f64 {
        let bytes = self.top_k as f64 * self.geometry.bytes_per_expert(self.bytes_per_param) as f64;
        bytes / self.bandwidth_bytes_per_s * 1e6
    }

    pub fn to_timing(&self) -> Result<TimingModel> {
        if self.top_k == 0 || self.top_k > self.geometry.experts {
            return Err(Error::Config(format!(
                "1 <= k <= E violated: top_k={} experts={}",
                self.top_k, self.geometry.experts
            )));
        }
        if !(self.compute_share > 0.0 && self.compute_share < 1.0) {
            return Err(Error::Config(format!(
                "compute_share must lie in (0, 1), got {}",
                self.compute_share
            )));
        }
        if !(self.bandwidth_bytes_per_s > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        let sum: f64 = self.compute_split.iter().sum();
        if self.compute_split.iter().any(|&x| x < 0.0) || sum <= 0.0 {
            return Err(Error::Config(
                "compute_split must be non-negative with positive sum".into(),
            ));
        }
        let copy = self.copy_us();
        let compute = copy * self.compute_share / (1.0 - self.compute_share);
        let [a, g, e] = self.compute_split.map(|x| compute * x / sum);
        let tm = TimingModel::uniform(self.geometry.layers, a, g, e, copy);
        tm.validate()?;
        Ok(tm)
    }
}

/// Any accepted timing file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimingSpec {
    Explicit(TimingModel),
    Geometry(GeometryTiming),
    Uniform {
        layers: usize,
        t_attn: f64,
        t_gate_topk: f64,
        t_expert: f64,
        t_copy: f64,
        #[serde(default)]
        cold_start_copy: Option<f64>,
    },
}

impl TimingSpec {
    pub fn resolve(&self) -> Result<TimingModel> {
        let tm = match self {
            TimingSpec::Explicit(tm) => tm.clone(),
            TimingSpec::Geometry(g) => g.to_timing()?,
            TimingSpec::Uniform {
                layers,
                t_attn,
                t_gate_topk,
                t_expert,
                t_copy,
                cold_start_copy,
            } => {
                let mut tm = TimingModel::uniform(*layers, *t_attn, *t_gate_topk, *t_expert, *t_copy);
                tm.cold_start_copy = *cold_start_copy;
                tm
            }
        };
        tm.validate()?;
        Ok(tm)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Built-in presets.
    pub fn preset(name: &str, top_k: Option<usize>) -> Result<Self> {
        let uniform = |t_copy: f64| TimingSpec::Uniform {
            layers: 48,
            t_attn: 1.0,
            t_gate_topk: 1.0,
            t_expert: 2.0,
            t_copy,
            cold_start_copy: None,
        };
        match name {
            "uniform" => Ok(uniform(10.0)),
            "balanced" => Ok(uniform(4.0)),
            other => {
                let geometry = ModelGeometry::by_name(other)
                    .ok_or_else(|| Error::Config(format!("unknown timing preset `{other}`")))?;
                let top_k =
                    top_k.ok_or_else(|| Error::Config(format!("timing preset `{other}` needs an explicit top-k")))?;
                Ok(TimingSpec::Geometry(GeometryTiming {
                    geometry,
                    top_k,
                    bandwidth_bytes_per_s: default_bandwidth(),
                    bytes_per_param: default_bpp(),
                    compute_share: 0.13,
                    compute_split: default_split(),
                }))
            }
        }
    }
}
