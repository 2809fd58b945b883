use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::tensor_io::Tensor;

/// SwiGLU expert: `W_down (silu(W_gate x) * (W_up x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl ExpertWeights {
    pub fn zeros(hidden: usize, expert_hidden: usize) -> Self {
        Self {
            w_gate: Matrix::zeros(expert_hidden, hidden),
            w_up: Matrix::zeros(expert_hidden, hidden),
            w_down: Matrix::zeros(hidden, expert_hidden),
        }
    }

    /// Overwrite in place without reallocating.
    pub fn copy_from(&mut self, other: &ExpertWeights) {
        self.w_gate.data_mut().copy_from_slice(other.w_gate.data());
        self.w_up.data_mut().copy_from_slice(other.w_up.data());
        self.w_down.data_mut().copy_from_slice(other.w_down.data());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Vec<f32>,
    pub moe_norm_gain: Vec<f32>,
    /// head_dim x H
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// H x head_dim
    pub wo: Matrix,
    /// E x H
    pub gate: Matrix,
    pub experts: Vec<ExpertWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab x H
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vec<f32>,
    /// vocab x H
    pub lm_head: Matrix,
}

/// Draw every weight from the seeded stream. Norm gains start at one.
pub fn build_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let h = config.hidden;
    let std = config.init_std();
    let mut rng = Rng::new(derive_seed(config.seed, "model-weights"));

    let embedding = Matrix::random(config.vocab, h, std, &mut rng);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let wq = Matrix::random(config.head_dim, h, std, &mut rng);
        let wk = Matrix::random(config.head_dim, h, std, &mut rng);
        let wv = Matrix::random(config.head_dim, h, std, &mut rng);
        let wo = Matrix::random(h, config.head_dim, std, &mut rng);
        let gate = Matrix::random(config.experts, h, std, &mut rng);
        let experts = (0..config.experts)
            .map(|_| ExpertWeights {
                w_gate: Matrix::random(config.expert_hidden, h, std, &mut rng),
                w_up: Matrix::random(config.expert_hidden, h, std, &mut rng),
                w_down: Matrix::random(h, config.expert_hidden, std, &mut rng),
            })
            .collect();
        layers.push(LayerWeights {
            attn_norm_gain: vec![1.0; h],
            moe_norm_gain: vec![1.0; h],
            wq,
            wk,
            wv,
            wo,
            gate,
            experts,
        });
    }
    let lm_head = Matrix::random(config.vocab, h, std, &mut rng);
    Ok(Model {
        config,
        embedding,
        layers,
        final_norm_gain: vec![1.0; h],
        lm_head,
    })
}

impl Model {
    /// Every tensor with its bundle name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mat = |m: &Matrix| vec![m.rows(), m.cols()];
        let mut out: Vec<(String, Vec<usize>, &[f32])> =
            vec![("embedding".into(), mat(&self.embedding), self.embedding.data())];
        for (l, lw) in self.layers.iter().enumerate() {
            let p = format!("layer{l}");
            out.push((
                format!("{p}.attn_norm"),
                vec![lw.attn_norm_gain.len()],
                &lw.attn_norm_gain,
            ));
            out.push((format!("{p}.moe_norm"), vec![lw.moe_norm_gain.len()], &lw.moe_norm_gain));
            for (name, m) in [
                ("wq", &lw.wq),
                ("wk", &lw.wk),
                ("wv", &lw.wv),
                ("wo", &lw.wo),
                ("gate", &lw.gate),
            ] {
                out.push((format!("{p}.{name}"), mat(m), m.data()));
            }
            for (e, ex) in lw.experts.iter().enumerate() {
                for (name, m) in [("w_gate", &ex.w_gate), ("w_up", &ex.w_up), ("w_down", &ex.w_down)] {
                    out.push((format!("{p}.expert{e}.{name}"), mat(m), m.data()));
                }
            }
        }
        out.push((
            "final_norm".into(),
            vec![self.final_norm_gain.len()],
            &self.final_norm_gain,
        ));
        out.push(("lm_head".into(), mat(&self.lm_head), self.lm_head.data()));
        out
    }

    /// Write `config.json` plus one MOET file per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        for (name, dims, data) in self.named_tensors() {
            Tensor::new(dims, data.to_vec())?.save(dir.join(format!("{name}.moet")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ModelConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        config.validate()?;
        // Build a skeleton with the right shapes, then overwrite from disk.
        let mut model = build_model(config)?;
        let names: Vec<(String, Vec<usize>)> = model.named_tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
        for (name, dims) in names {
            let t = Tensor::load(dir.join(format!("{name}.moet")))?;
            if t.dims != dims {
                return Err(Error::format(format!(
                    "{name}: expected dims {dims:?}, found {:?}",
                    t.dims
                )));
            }
            model.tensor_mut(&name)?.copy_from_slice(&t.data);
        }
        Ok(model)
    }

    fn tensor_mut(&mut self, name: &str) -> Result<&mut [f32]> {
        let missing = || Error::Missing(format!("tensor {name}"));
        match name {
            "embedding" => return Ok(self.embedding.data_mut()),
            "final_norm" => return Ok(&mut self.final_norm_gain),
            "lm_head" => return Ok(self.lm_head.data_mut()),
            _ => {}
        }
        let rest = name.strip_prefix("layer").ok_or_else(missing)?;
        let (l, field) = rest.split_once('.').ok_or_else(missing)?;
        let l: usize = l.parse().map_err(|_| missing())?;
        let lw = self.layers.get_mut(l).ok_or_else(missing)?;
        Ok(match field {
            "attn_norm" => &mut lw.attn_norm_gain,
            "moe_norm" => &mut lw.moe_norm_gain,
            "wq" => lw.wq.data_mut(),
            "wk" => lw.wk.data_mut(),
            "wv" => lw.wv.data_mut(),
            "wo" => lw.wo.data_mut(),
            "gate" => lw.gate.data_mut(),
            other => {
                let (e, w) = other
                    .strip_prefix("expert")
                    .and_then(|s| s.split_once('.'))
                    .ok_or_else(missing)?;
                let e: usize = e.parse().map_err(|_| missing())?;
                let ex = lw.experts.get_mut(e).ok_or_else(missing)?;
                match w {
                    "w_gate" => ex.w_gate.data_mut(),
                    "w_up" => ex.w_up.data_mut(),
                    "w_down" => ex.w_down.data_mut(),
                    _ => return Err(missing()),
                }
            }
        })
    }
}
