//! Frozen language-model side: backend contract, beam sequence-level decoding,
//! sequence-to-entity mapping and the precomputed distribution cache.

pub mod backend;
pub mod beam;
pub mod cache;
pub mod entity;
pub mod iterative;

pub use backend::{LanguageModel, ScriptedLm, ScriptedSpec, TableLm};
pub use beam::{beam_generate, beam_generate_with_width, BeamResult, Sequence};
pub use cache::{precompute_cache, CacheMeta, DistributionCache, Generation, PrecomputeJob, PrecomputeStats};
pub use entity::{build_entity_distribution, map_sequences_to_entities, SoftmaxMode};
pub use iterative::iterative_generate;

pub type TokenId = u32;

/// Decimal digits needed for the largest entity index, plus the stop token.
pub fn default_max_tokens(entity_count: u32) -> usize {
    entity_count.saturating_sub(1).max(1).to_string().len() + 1
}
