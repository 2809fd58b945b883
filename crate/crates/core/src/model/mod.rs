pub mod config;
pub mod forward;
pub mod layers;
pub mod trace;
pub mod weights;

pub use config::{GatingOrder, ModelConfig};
pub use forward::{
    embed, forward_decode, forward_with, generate, prefill, ExpertRunner, Generation, HostExperts, LayerContext,
    NextLayerPredictor, Prediction,
};
pub use layers::{DecodeState, KvCache, RouterDecision};
pub use trace::{run_trace, LayerRecord, TraceBundle, TraceField, TraceSink, TraceWriter};
pub use weights::{build_model, ExpertWeights, LayerWeights, Model};
