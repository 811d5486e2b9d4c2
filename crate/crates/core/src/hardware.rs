//! Hardware resource descriptors: chip, card, node, rack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIB: u64 = 1 << 20;

/// Resource limits of one accelerator card and the node/rack geometry it
/// packs into.
///
/// On-chip memory sizes are binary (MiB); bandwidth is decimal bytes/second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareSpec {
    /// Core-array memory holding weights, KV caches, and intermediates.
    pub core_memory_bytes: u64,
    /// Framebuffer staging memory for off-chip tensor traffic.
    pub framebuffer_bytes: u64,
    /// Number of tensors the framebuffer stages at once.
    pub framebuffer_slots: u32,
    pub cards_per_node: u64,
    pub nodes_per_rack: u64,
    /// Card-to-card transfer latency within one node (seconds).
    pub intra_node_hop_latency: f64,
    /// Node-to-node transfer latency (seconds).
    pub inter_node_hop_latency: f64,
    /// Per-chip on-chip memory bandwidth (bytes/second, decimal).
    pub onchip_bandwidth: f64,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        Self {
            core_memory_bytes: 192 * MIB,
            framebuffer_bytes: 32 * MIB,
            framebuffer_slots: 8,
            cards_per_node: 16,
            nodes_per_rack: 18,
            intra_node_hop_latency: 1e-6,
            inter_node_hop_latency: 5e-6,
            onchip_bandwidth: 13e12,
        }
    }
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<()> {
        if self.framebuffer_slots == 0 || self.cards_per_node == 0 || self.nodes_per_rack == 0 {
            return Err(Error::invalid("hardware", "all counts must be >= 1"));
        }
        if self.intra_node_hop_latency < 0.0 || self.inter_node_hop_latency < 0.0 {
            return Err(Error::invalid("hardware", "hop latencies must be >= 0"));
        }
        if self.onchip_bandwidth < 0.0 {
            return Err(Error::invalid("hardware", "bandwidth must be >= 0"));
        }
        Ok(())
    }

    /// Total on-chip memory: core array plus framebuffer.
    pub fn total_onchip_bytes(&self) -> u64 {
        self.core_memory_bytes + self.framebuffer_bytes
    }

    pub fn cards_per_rack(&self) -> u64 {
        self.cards_per_node * self.nodes_per_rack
    }

    /// Aggregate on-chip bandwidth of a fully populated rack.
    pub fn rack_bandwidth(&self) -> f64 {
        self.cards_per_rack() as f64 * self.onchip_bandwidth
    }
}
