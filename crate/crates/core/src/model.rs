//! Model and precision descriptors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VALID_BITS: [u32; 4] = [2, 4, 8, 16];

/// Per-tensor-class bit widths: activations (A), KV caches (C), weights (W).
///
/// The accelerator supports 8/4/2-bit integer and 16-bit floating point, so
/// every field must be one of {2, 4, 8, 16}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionConfig {
    pub activation_bits: u32,
    pub cache_bits: u32,
    pub weight_bits: u32,
}

impl PrecisionConfig {
    pub fn new(activation_bits: u32, cache_bits: u32, weight_bits: u32) -> Result<Self> {
        let cfg = Self {
            activation_bits,
            cache_bits,
            weight_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 8-bit activations, 8-bit caches, 4-bit weights.
    pub fn a8c8w4() -> Self {
        Self {
            activation_bits: 8,
            cache_bits: 8,
            weight_bits: 4,
        }
    }

    /// 4-bit activations, caches, and weights.
    pub fn a4c4w4() -> Self {
        Self {
            activation_bits: 4,
            cache_bits: 4,
            weight_bits: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [
            ("activation_bits", self.activation_bits),
            ("cache_bits", self.cache_bits),
            ("weight_bits", self.weight_bits),
        ] {
            if !VALID_BITS.contains(&bits) {
                return Err(Error::invalid(
                    "precision",
                    format!("{name} = {bits}, expected one of {VALID_BITS:?}"),
                ));
            }
        }
        Ok(())
    }

    /// Compact A/C/W label, e.g. `A8-C8-W4`.
    pub fn label(&self) -> String {
        format!(
            "A{}-C{}-W{}",
            self.activation_bits, self.cache_bits, self.weight_bits
        )
    }
}

/// Mixture-of-experts structure, when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub num_experts: u64,
    pub active_experts: u64,
    /// Intermediate dimension of a single expert.
    pub expert_dim: u64,
}

/// Transformer (optionally MoE) architecture descriptor.
///
/// Only the quantities that drive memory accounting and partitioning are
/// kept; no tensor contents exist anywhere in this crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    /// Intermediate dimension of the dense MLP block; 0 means the model has
    /// no separate MLP block (or uses expert blocks instead).
    pub mlp_dim: u64,
    pub vocab_size: u64,
    pub moe: Option<MoeSpec>,
    pub total_params: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::invalid("model", "num_layers must be >= 1"));
        }
        if self.num_kv_heads == 0 || self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::invalid(
                "model",
                format!(
                    "num_kv_heads ({}) must divide num_heads ({})",
                    self.num_kv_heads, self.num_heads
                ),
            ));
        }
        if self.num_heads * self.head_dim != self.hidden_dim {
            return Err(Error::invalid(
                "model",
                format!(
                    "num_heads ({}) x head_dim ({}) must equal hidden_dim ({})",
                    self.num_heads, self.head_dim, self.hidden_dim
                ),
            ));
        }
        if self.total_params == 0 {
            return Err(Error::invalid("model", "total_params must be > 0"));
        }
        if let Some(moe) = &self.moe {
            if moe.num_experts == 0 || moe.active_experts == 0 {
                return Err(Error::invalid("model", "MoE expert counts must be >= 1"));
            }
            if moe.active_experts > moe.num_experts {
                return Err(Error::invalid(
                    "model",
                    "active_experts cannot exceed num_experts",
                ));
            }
        }
        Ok(())
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_model() -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 8,
            num_kv_heads: 2,
            head_dim: 8,
            mlp_dim: 128,
            vocab_size: 256,
            moe: None,
            total_params: 100_000,
        }
    }

    #[test]
    fn precision_accepts_supported_widths() {
        for bits in [2u32, 4, 8, 16] {
            assert!(PrecisionConfig::new(bits, bits, bits).is_ok());
        }
        assert!(PrecisionConfig::new(8, 8, 3).is_err());
        assert!(PrecisionConfig::new(0, 8, 4).is_err());
        assert_eq!(PrecisionConfig::a8c8w4().label(), "A8-C8-W4");
    }

    #[test]
    fn model_invariants_enforced() {
        let mut m = toy_model();
        assert!(m.validate().is_ok());

        m.num_kv_heads = 3; // does not divide 8
        assert!(m.validate().is_err());

        let mut m = toy_model();
        m.head_dim = 9; // 8 * 9 != 64
        assert!(m.validate().is_err());

        let mut m = toy_model();
        m.total_params = 0;
        assert!(m.validate().is_err());
    }
}
