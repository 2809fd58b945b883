use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How router probabilities become gate weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingOrder {
    /// softmax over all experts, top-k, renormalize the selected mass
    #[default]
    SoftmaxTopK,
    /// top-k on logits, softmax over the selected logits
    TopKSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub expert_hidden: usize,
    pub vocab: usize,
    pub head_dim: usize,
    pub eps: f32,
    pub seed: u64,
    #[serde(default)]
    pub gating: GatingOrder,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
}

fn default_rope_base() -> f32 {
    10_000.0
}

impl ModelConfig {
    /// L=8, E=16, k=4, H=64, H_moe=128, byte vocabulary.
    pub fn toy(seed: u64) -> Self {
        Self {
            layers: 8,
            experts: 16,
            top_k: 4,
            hidden: 64,
            expert_hidden: 128,
            vocab: 256,
            head_dim: 32,
            eps: 1e-6,
            seed,
            gating: GatingOrder::SoftmaxTopK,
            rope_base: default_rope_base(),
        }
    }

    /// L=12, E=32, k=4, H=128.
    pub fn toy_large(seed: u64) -> Self {
        Self {
            layers: 12,
            experts: 32,
            top_k: 4,
            hidden: 128,
            expert_hidden: 256,
            vocab: 256,
            head_dim: 64,
            eps: 1e-6,
            seed,
            gating: GatingOrder::SoftmaxTopK,
            rope_base: default_rope_base(),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(seed)),
            "toy-large" => Ok(Self::toy_large(seed)),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected toy or toy-large)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers < 1 {
            return fail("L >= 1 violated: layers=0".into());
        }
        if self.experts < 1 {
            return fail("E >= 1 violated: experts=0".into());
        }
        if self.top_k < 1 || self.top_k > self.experts {
            return fail(format!(
                "1 <= k <= E violated: top_k={} experts={}",
                self.top_k, self.experts
            ));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("expert_hidden", self.expert_hidden),
            ("vocab", self.vocab),
            ("head_dim", self.head_dim),
        ] {
            if v < 1 {
                return fail(format!("{name} >= 1 violated: {name}=0"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps > 0 violated: eps={}", self.eps));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return fail(format!("rope_base > 0 violated: {}", self.rope_base));
        }
        Ok(())
    }

    /// Standard deviation of every random weight tensor.
    pub fn init_std(&self) -> f32 {
        0.4 / (self.hidden as f32).sqrt()
    }

    /// `L * E * 3 * H * H_moe * bytes_per_param`
    pub fn expert_bytes(&self, bytes_per_param: usize) -> u64 {
        (self.layers * self.experts * 3 * self.hidden * self.expert_hidden * bytes_per_param) as u64
    }
}
