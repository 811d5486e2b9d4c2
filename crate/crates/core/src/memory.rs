//! Memory accounting: weight bytes, KV-cache bytes, and user capacity.
//!
//! All arithmetic is exact integer math with `u128` intermediates. KV sizes
//! are defined per token first so that per-user totals are exactly linear in
//! context length.

use serde::{Deserialize, Serialize};

use crate::model::{ModelSpec, PrecisionConfig};

/// Bytes of storage for `block_params` weights at the configured weight
/// precision: `ceil(block_params * weight_bits / 8)`.
pub fn weight_bytes(block_params: u64, precision: &PrecisionConfig) -> u64 {
    let bits = block_params as u128 * precision.weight_bits as u128;
    bits.div_ceil(8) as u64
}

/// Per-layer KV bytes one user consumes per token of context:
/// `2 * num_kv_heads * head_dim * cache_bits / 8` (key + value).
pub fn kv_bytes_per_user_per_token(model: &ModelSpec, precision: &PrecisionConfig) -> u64 {
    let bits =
        2u128 * model.num_kv_heads as u128 * model.head_dim as u128 * precision.cache_bits as u128;
    bits.div_ceil(8) as u64
}

/// Per-layer KV bytes one user consumes at a full context of `context_len`
/// tokens. Exactly linear in `context_len`.
pub fn kv_bytes_per_user(model: &ModelSpec, precision: &PrecisionConfig, context_len: u64) -> u64 {
    kv_bytes_per_user_per_token(model, precision) * context_len
}

/// Memory budget of one layer group (the cards one layer's blocks map to).
///
/// `kv_budget_bytes` is a calibrated pool: the bytes actually available for
/// KV caches after unpublished overheads (staging, activation scratch,
/// placement granularity) are taken out. It is shipped with each model
/// descriptor rather than derived from raw card memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub weight_bytes: u64,
    pub kv_bytes_per_user: u64,
    pub scratch_bytes: u64,
    pub kv_budget_bytes: u64,
}

impl MemoryBudget {
    /// Whether the budget fits the cards backing the group.
    pub fn fits(&self, cards_in_group: u64, core_memory_bytes: u64) -> bool {
        let need =
            self.weight_bytes as u128 + self.scratch_bytes as u128 + self.kv_budget_bytes as u128;
        need <= cards_in_group as u128 * core_memory_bytes as u128
    }

    /// Largest number of simultaneous users whose KV caches fit the pool at
    /// the given context length: `floor(kv_budget / (per_token * L))`.
    ///
    /// Returns 0 for an empty budget or degenerate arguments.
    pub fn max_users(&self, kv_per_user_per_token: u64, context_len: u64) -> u64 {
        if kv_per_user_per_token == 0 || context_len == 0 {
            return 0;
        }
        let per_user = kv_per_user_per_token as u128 * context_len as u128;
        (self.kv_budget_bytes as u128 / per_user) as u64
    }
}
