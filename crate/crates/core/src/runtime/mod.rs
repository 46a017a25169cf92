//! Reference forward pass: gating, SwiGLU experts, attention and the decoder stack.

pub mod attention;
pub mod ffn;
pub mod gate;
pub mod linalg;
pub mod model;
pub mod tokenizer;
pub mod trace;

pub use ffn::{ffn_forward, fgmlp_forward, lora_expert_forward, moe_ffn_forward, EvalCounter};
pub use gate::{gate, GateConfig, GateDecision, Router};
pub use linalg::Matrix;
pub use model::{collect_prompt_hiddens, model_forward, Model, PromptHiddens};
pub use tokenizer::ByteTokenizer;
pub use trace::{RouteRecord, RoutingTrace};
