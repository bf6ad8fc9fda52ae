//! Lag-relative sparse attention (LRSA) from scratch.
//!
//! The crate holds a small reverse-mode autodiff engine over dense tensors,
//! LagKV token scoring, a segmented KV cache that evicts low-scoring tokens
//! one chunk behind the frontier, chunked prefill with the matching static
//! mask, and a toy decoder-only transformer that trains under that mask.
//!
//! ```
//! use lrsa_core::{AttentionKind, LagkvParams, MaskMode, Model, ModelConfig, PrefillState, Rng};
//!
//! let model = Model::<f64>::init(ModelConfig::default(), &mut Rng::new(0)).unwrap();
//! let params = LagkvParams::default();
//! let tokens: Vec<usize> = (0..112).map(|i| (i * 7) % 64).collect();
//!
//! let mut state = PrefillState::new(&model, params, AttentionKind::Lrsa, 2).unwrap();
//! let cached = model.logits(&state.prefill(&model, &tokens).unwrap()).unwrap();
//! let full = model.forward(&tokens, MaskMode::Lrsa(&params)).unwrap();
//! assert!(cached.bitwise_eq(&full));
//! assert_eq!(state.report().tokens_cached[0], 16 + 2 * 16 + 32);
//! ```

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod kv_cache;
pub mod lagkv;
pub mod model;
pub mod real;
pub mod rng;
pub mod task;
pub mod tensor;

pub use attention::{
    attend, causal_score_entries, lrsa_score_entries, AttentionKind, AttnConfig, PrefillState, VisibilitySpec,
};
pub use autodiff::{Graph, Var};
pub use config::{Precision, RunConfig};
pub use error::{Error, Result};
pub use kv_cache::{expected_token_count, CacheReport, LayerKvCache, SegmentedKvCache};
pub use lagkv::{score_chunk, select_topk, ChunkScores, LagkvParams, RetentionSet};
pub use model::{MaskMode, Model, ModelConfig, RetentionPlan, TrainConfig};
pub use real::Real;
pub use rng::Rng;
pub use task::{gen_copy_task, gen_needle_task, TaskInstance, TaskKind, TaskSpec};
pub use tensor::Tensor;
