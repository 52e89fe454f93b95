//! Micro decoder-only transformer with LoRA adapters.

mod attention;
pub mod checkpoint;
mod config;
mod generate;
mod grads;
mod lora;
mod loss;
mod network;
mod params;

pub use attention::{attention, attention_weights, AttentionMask};
pub use config::ModelConfig;
pub use generate::{banned_next_tokens, generate, generate_ids, is_sentence_end, GenerationConfig};
pub use grads::Gradients;
pub use lora::{attach_lora, count_params, AdapterSet, LoraAdapter, LoraSpec, ParamCount};
pub use loss::{log_softmax_row, nll_loss, shifted_targets};
pub use network::Model;
pub use params::{Param, ParamSet};
