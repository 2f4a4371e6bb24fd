//! Deterministic f32 kernels, rotary/sliding-window attention and a small
//! reverse-mode tape used for training.

pub mod attention;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use attention::{attend_query, causal_attention, AttentionConfig, ContiguousKv, KvSource};
pub use graph::{Graph, Grads, LossParts, NodeId};
pub use ops::{causal_conv1d, rms_norm, rope_apply, swiglu_ffn, SwigluParams};
pub use tensor::Tensor;
