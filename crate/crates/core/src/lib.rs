//! Desk-scale inference lab for layer-wise KV visibility: a byte-level toy
//! transformer, a policy-driven cache and engine, analytic cost accounting,
//! attention diagnostics, loop detection, and a timing harness.

pub mod bench;
pub mod cost;
pub mod diagnostics;
pub mod engine;
pub mod kv;
pub mod loops;
pub mod model;
pub mod par;
pub mod policy;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use engine::{generate, prefill, decode_step, reference_generate, CaptureOptions, GenerationTrace};
pub use kv::{KvGeometry, LayeredKvCache};
pub use model::{Model, ModelConfig, BOS_ID};
pub use par::Exec;
pub use policy::{PolicyKind, TokenClass, TokenRef, VisibilityPolicy};
pub use tensor::Matrix;
