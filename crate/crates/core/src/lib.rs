//! Training-free, context-based knowledge distillation.
//!
//! A student model samples reasoning trajectories under a prompt that carries
//! an experience store; a teacher model critiques those trajectories against
//! its own solution and the gold answer, and emits discrete edits to the
//! store. The store is kept under a token and item budget by a usage-aware,
//! teacher-guided compression pass. No model weights are touched: the store
//! is the only thing that learns.
//!
//! Module map:
//!
//! | module | role |
//! |--------|------|
//! | [`gateway`] | OpenAI-compatible chat client, scripted backend, retries, token ledger |
//! | [`prompts`] | template loading and rendering of every pipeline prompt |
//! | [`trajectory`] | answer extraction, condensation, teacher filtering, balance |
//! | [`store`] | the experience store state machine, usage, utility, compression |
//! | [`critique`] | teacher critique/compression calls and action parsing |
//! | [`distill`] | the end-to-end training loop with checkpointing |
//! | [`eval`] | grading, Mean@k, evaluation runs and cost reports |
//! | [`dataset`] | JSONL sample ingestion |
//! | [`config`] | run configuration |
//! | [`runtime`] | model clients built from configuration, offline responder |

pub mod config;
pub mod critique;
pub mod dataset;
pub mod distill;
pub mod eval;
pub mod gateway;
pub mod prompts;
pub mod runtime;
pub mod store;
pub mod trajectory;

pub use config::RunConfig;
pub use dataset::Sample;
pub use gateway::{ChatRequest, ChatResponse, Gateway, ImageSource, ModelClient, ModelRole, TokenLedger};
pub use store::{CompressionAction, ExperienceId, ExperienceItem, ExperienceStore, UpdateAction};
pub use trajectory::{Answer, Trajectory};
