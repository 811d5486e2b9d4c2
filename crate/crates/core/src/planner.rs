//! Partitioning models onto cards, packing cards into nodes and racks, and
//! choosing micro-batch policy.
//!
//! Layers are split at block granularity: one pipeline stage per attention
//! block and one per MLP or expert block, plus a single tensor-parallel
//! output stage. Packing fills nodes sequentially in stage order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::HardwareSpec;
use crate::memory::{self, MemoryBudget};
use crate::model::{ModelSpec, PrecisionConfig};
use crate::scalar::Scalar;

/// Identifies one card within a deployment.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct CardId(pub u32);

impl std::fmt::Display for CardId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "card{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Attention,
    Mlp,
    ExpertGroup,
    Output,
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BlockKind::Attention => "attention",
            BlockKind::Mlp => "mlp",
            BlockKind::ExpertGroup => "expert-group",
            BlockKind::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    /// Cards hold alternative routes; one card serves a given execution.
    Pipeline,
    /// Cards operate in parallel on the same activations.
    Tensor,
}

/// Per-layer card-count override.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOverride {
    pub attention: Option<u64>,
    pub mlp: Option<u64>,
    pub expert_group: Option<u64>,
}

/// Card counts per block kind, with optional per-layer overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingDirectives {
    pub attention: u64,
    pub mlp: Option<u64>,
    pub expert_group: Option<u64>,
    pub output: u64,
    /// How a multi-card expert group operates. `Tensor` keeps all cards on
    /// every execution; `Pipeline` makes each card an alternative route.
    pub expert_parallelism: Parallelism,
    pub overrides: BTreeMap<u64, LayerOverride>,
}

impl Default for MappingDirectives {
    fn default() -> Self {
        Self {
            attention: 1,
            mlp: Some(1),
            expert_group: None,
            output: 1,
            expert_parallelism: Parallelism::Tensor,
            overrides: BTreeMap::new(),
        }
    }
}

impl MappingDirectives {
    /// Checks that every block kind present in `model` has a card count and
    /// that all counts are >= 1.
    pub fn validate_for(&self, model: &ModelSpec) -> Result<()> {
        if self.attention == 0 || self.output == 0 {
            return Err(Error::invalid("directives", "card counts must be >= 1"));
        }
        if model.is_moe() {
            match self.expert_group {
                Some(0) | None => {
                    return Err(Error::invalid(
                        "directives",
                        "MoE model needs expert_group cards >= 1",
                    ))
                }
                _ => {}
            }
        } else if model.mlp_dim > 0 {
            match self.mlp {
                Some(0) | None => {
                    return Err(Error::invalid(
                        "directives",
                        "dense model needs mlp cards >= 1",
                    ))
                }
                _ => {}
            }
        }
        if self
            .overrides
            .values()
            .flat_map(|o| [o.attention, o.mlp, o.expert_group])
            .any(|c| c == Some(0))
        {
            return Err(Error::invalid("directives", "override counts must be >= 1"));
        }
        if let Some(layer) = self.overrides.keys().find(|&&l| l >= model.num_layers) {
            return Err(Error::invalid(
                "directives",
                format!("override for layer {layer} out of range"),
            ));
        }
        Ok(())
    }

    fn cards_for(&self, kind: BlockKind, layer: u64) -> u64 {
        let ov = self.overrides.get(&layer);
        match kind {
            BlockKind::Attention => ov
                .and_then(|o| o.attention)
                .unwrap_or(self.attention),
            BlockKind::Mlp => ov.and_then(|o| o.mlp).or(self.mlp).unwrap_or(1),
            BlockKind::ExpertGroup => ov
                .and_then(|o| o.expert_group)
                .or(self.expert_group)
                .unwrap_or(1),
            BlockKind::Output => self.output,
        }
    }
}

/// Scratch and KV allowances applied during feasibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryPolicy {
    /// Calibrated per-layer KV pool (see [`MemoryBudget`]).
    pub kv_budget_bytes: u64,
    /// Activation-scratch allowance as a fraction of stage weight bytes.
    pub scratch_fraction: f64,
}

impl Default for MemoryPolicy {
    fn default() -> Self {
        Self {
            kv_budget_bytes: 0,
            scratch_fraction: 0.10,
        }
    }
}

impl MemoryPolicy {
    pub fn scratch_for(&self, weight_bytes: u64) -> u64 {
        (weight_bytes as f64 * self.scratch_fraction).ceil() as u64
    }
}

/// One pipeline stage: a block of one layer mapped to a card group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStage {
    pub stage_index: usize,
    pub block_kind: BlockKind,
    /// `None` for the output stage.
    pub layer_index: Option<u64>,
    pub card_ids: Vec<CardId>,
    pub parallelism: Parallelism,
}

/// Ordered stages covering the whole model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub model_name: String,
    pub stages: Vec<PipelineStage>,
    pub total_cards: u64,
    pub stage_count: usize,
}

impl Plan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::EmptyPlan);
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut cards = 0u64;
        let mut last_layer = None;
        for (i, s) in self.stages.iter().enumerate() {
            if s.stage_index != i {
                return Err(Error::invalid("plan", "stage indices must be contiguous"));
            }
            if let (Some(prev), Some(cur)) = (last_layer, s.layer_index) {
                if cur < prev {
                    return Err(Error::invalid("plan", "stages must follow layer order"));
                }
            }
            last_layer = s.layer_index.or(last_layer);
            for c in &s.card_ids {
                if !seen.insert(*c) {
                    return Err(Error::invalid(
                        "plan",
                        format!("{c} assigned to more than one stage"),
                    ));
                }
            }
            cards += s.card_ids.len() as u64;
        }
        if cards != self.total_cards || self.stage_count != self.stages.len() {
            return Err(Error::invalid("plan", "totals do not match stages"));
        }
        Ok(())
    }

    /// Stable content hash used to tag traces produced from this plan.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plan serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

fn fnv1a64(data: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Identifies one server node.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct NodeId(pub u32);

/// A plan placed onto nodes and racks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    pub plan: Plan,
    /// Node of each card, indexed by `CardId`.
    pub node_assignments: Vec<NodeId>,
    pub node_count: u64,
    pub rack_count: u64,
}

impl Deployment {
    pub fn node_of(&self, card: CardId) -> NodeId {
        self.node_assignments[card.0 as usize]
    }
}

/// Micro-batch sizing for a mini-batch of user requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroBatchPolicy {
    pub micro_batch_size: u64,
    pub num_micro_batches: u64,
}

/// Weight-bearing parameter count of one block, from the architecture
/// descriptor. Attention covers Q/K/V/O projections (grouped-query aware),
/// MLP and experts use gated three-matrix blocks, output is the LM head.
pub fn block_params(model: &ModelSpec, kind: BlockKind) -> u64 {
    let h = model.hidden_dim;
    match kind {
        BlockKind::Attention => 2 * h * h + 2 * h * model.num_kv_heads * model.head_dim,
        BlockKind::Mlp => 3 * h * model.mlp_dim,
        BlockKind::ExpertGroup => model
            .moe
            .map(|m| m.num_experts * 3 * h * m.expert_dim)
            .unwrap_or(0),
        BlockKind::Output => model.vocab_size * h,
    }
}

fn layer_block_kinds(model: &ModelSpec) -> Vec<BlockKind> {
    let mut kinds = vec![BlockKind::Attention];
    if model.is_moe() {
        kinds.push(BlockKind::ExpertGroup);
    } else if model.mlp_dim > 0 {
        kinds.push(BlockKind::Mlp);
    }
    kinds
}

/// Partitions `model` into a pipeline of per-block stages plus one
/// tensor-parallel output stage, checking each stage fits its cards.
pub fn plan_model(
    model: &ModelSpec,
    precision: &PrecisionConfig,
    hw: &HardwareSpec,
    directives: &MappingDirectives,
    mem: &MemoryPolicy,
) -> Result<Plan> {
    model.validate()?;
    precision.validate()?;
    hw.validate()?;
    directives.validate_for(model)?;

    let mut stages = Vec::new();
    let mut next_card = 0u32;
    let mut alloc = |n: u64| -> Vec<CardId> {
        let ids = (next_card..next_card + n as u32).map(CardId).collect();
        next_card += n as u32;
        ids
    };

    let kinds = layer_block_kinds(model);
    for layer in 0..model.num_layers {
        for &kind in &kinds {
            let cards = directives.cards_for(kind, layer);
            let parallelism = match kind {
                BlockKind::ExpertGroup => directives.expert_parallelism,
                _ => Parallelism::Pipeline,
            };
            stages.push(PipelineStage {
                stage_index: stages.len(),
                block_kind: kind,
                layer_index: Some(layer),
                card_ids: alloc(cards),
                parallelism,
            });
        }
    }
    stages.push(PipelineStage {
        stage_index: stages.len(),
        block_kind: BlockKind::Output,
        layer_index: None,
        card_ids: alloc(directives.output),
        parallelism: Parallelism::Tensor,
    });

    let plan = Plan {
        model_name: model.name.clone(),
        total_cards: next_card as u64,
        stage_count: stages.len(),
        stages,
    };
    plan.validate()?;
    check_stage_memory(&plan, model, precision, hw, mem)?;
    Ok(plan)
}

fn check_stage_memory(
    plan: &Plan,
    model: &ModelSpec,
    precision: &PrecisionConfig,
    hw: &HardwareSpec,
    mem: &MemoryPolicy,
) -> Result<()> {
    for stage in &plan.stages {
        let weights = memory::weight_bytes(block_params(model, stage.block_kind), precision);
        let kv = match stage.block_kind {
            BlockKind::Attention => mem.kv_budget_bytes,
            _ => 0,
        };
        let scratch = mem.scratch_for(weights);
        let needed = weights + kv + scratch;
        let cards = stage.card_ids.len() as u64;
        let available = cards * hw.core_memory_bytes;
        if needed > available {
            return Err(Error::StageCapacity {
                stage: stage.stage_index,
                kind: stage.block_kind.to_string(),
                layer: stage.layer_index,
                needed_bytes: needed,
                available_bytes: available,
                cards,
            });
        }
    }
    Ok(())
}

/// Requested simultaneous-user workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserWorkload {
    pub context_len: u64,
    pub num_users: u64,
}

/// Minimum cards a load of weights + KV + scratch needs.
pub fn cards_for_load(
    weight_bytes: u64,
    kv_bytes: u64,
    scratch_bytes: u64,
    core_memory_bytes: u64,
) -> u64 {
    let total = weight_bytes as u128 + kv_bytes as u128 + scratch_bytes as u128;
    (total.div_ceil(core_memory_bytes as u128) as u64).max(1)
}

/// Per-block-kind lower bound on cards for the given workload. Directive
/// counts at or above these bounds are feasible.
pub fn capacity_lower_bound(
    model: &ModelSpec,
    precision: &PrecisionConfig,
    hw: &HardwareSpec,
    workload: UserWorkload,
    mem: &MemoryPolicy,
) -> BTreeMap<BlockKind, u64> {
    let kv_total = workload.num_users
        * memory::kv_bytes_per_user(model, precision, workload.context_len);
    let mut bounds = BTreeMap::new();
    let mut kinds = layer_block_kinds(model);
    kinds.push(BlockKind::Output);
    for kind in kinds {
        let weights = memory::weight_bytes(block_params(model, kind), precision);
        let kv = if kind == BlockKind::Attention {
            kv_total
        } else {
            0
        };
        bounds.insert(
            kind,
            cards_for_load(weights, kv, mem.scratch_for(weights), hw.core_memory_bytes),
        );
    }
    bounds
}

/// Builds the per-layer memory budget implied by a plan and workload.
pub fn layer_budget(
    model: &ModelSpec,
    precision: &PrecisionConfig,
    mem: &MemoryPolicy,
) -> MemoryBudget {
    let layer_weights: u64 = layer_block_kinds(model)
        .iter()
        .map(|&k| memory::weight_bytes(block_params(model, k), precision))
        .sum();
    MemoryBudget {
        weight_bytes: layer_weights,
        kv_bytes_per_user: memory::kv_bytes_per_user_per_token(model, precision),
        scratch_bytes: mem.scratch_for(layer_weights),
        kv_budget_bytes: mem.kv_budget_bytes,
    }
}

/// A synthetic plan of `stages` uniform single-card stages, for pipeline
/// experiments and verification harnesses.
pub fn uniform_chain_plan(stages: u64) -> Plan {
    let stages: Vec<PipelineStage> = (0..stages)
        .map(|i| PipelineStage {
            stage_index: i as usize,
            block_kind: if i + 1 == stages && stages > 1 {
                BlockKind::Output
            } else {
                BlockKind::Attention
            },
            layer_index: if i + 1 == stages && stages > 1 {
                None
            } else {
                Some(i)
            },
            card_ids: vec![CardId(i as u32)],
            parallelism: if i + 1 == stages && stages > 1 {
                Parallelism::Tensor
            } else {
                Parallelism::Pipeline
            },
        })
        .collect();
    Plan {
        model_name: format!("uniform-{}", stages.len()),
        total_cards: stages.len() as u64,
        stage_count: stages.len(),
        stages,
    }
}

/// Packs a plan's cards into nodes sequentially in stage order.
pub fn pack(plan: &Plan, hw: &HardwareSpec) -> Result<Deployment> {
    plan.validate()?;
    hw.validate()?;
    let node_assignments = (0..plan.total_cards)
        .map(|card| NodeId((card / hw.cards_per_node) as u32))
        .collect();
    let node_count = plan.total_cards.div_ceil(hw.cards_per_node);
    let rack_count = node_count.div_ceil(hw.nodes_per_rack);
    Ok(Deployment {
        plan: plan.clone(),
        node_assignments,
        node_count,
        rack_count,
    })
}

/// Micro-batch policy: size-1 micro-batches once the pipeline is 16 stages
/// or deeper, larger micro-batches for shallow pipelines.
pub fn microbatch_policy(stage_count: u64, mini_batch: u64) -> Result<MicroBatchPolicy> {
    if stage_count == 0 || mini_batch == 0 {
        return Err(Error::invalid(
            "policy",
            "stage_count and mini_batch must be >= 1",
        ));
    }
    let (size, m) = if stage_count >= 16 {
        (1, mini_batch)
    } else {
        let size = mini_batch.div_ceil(stage_count);
        (size, mini_batch.div_ceil(size))
    };
    Ok(MicroBatchPolicy {
        micro_batch_size: size,
        num_micro_batches: m,
    })
}

/// Steady-state idle-slot fraction of an `stage_count`-deep pipeline fed
/// with `num_micro_batches` micro-batches, under uniform stage times:
/// `max(0, (S - M) / S)`.
pub fn bubble_fraction<S: Scalar>(stage_count: u64, num_micro_batches: u64) -> S {
    if num_micro_batches >= stage_count {
        return S::zero();
    }
    let s = S::from_count(stage_count);
    (s - S::from_count(num_micro_batches)) / s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(layers: u64, mlp_dim: u64) -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            num_layers: layers,
            hidden_dim: 64,
            num_heads: 8,
            num_kv_heads: 2,
            head_dim: 8,
            mlp_dim,
            vocab_size: 256,
            moe: None,
            total_params: 100_000,
        }
    }

    #[test]
    fn minimal_pipeline_is_two_stages() {
        // One layer without a separate MLP block, output on one card.
        let m = toy_model(1, 0);
        let plan = plan_model(
            &m,
            &PrecisionConfig::a8c8w4(),
            &HardwareSpec::default(),
            &MappingDirectives::default(),
            &MemoryPolicy::default(),
        )
        .unwrap();
        assert_eq!(plan.total_cards, 2);
        assert_eq!(plan.stage_count, 2);
        assert_eq!(plan.stages[1].block_kind, BlockKind::Output);
    }

    #[test]
    fn stage_memory_violation_names_stage() {
        let mut m = toy_model(1, 0);
        // A vocab too large for the single output card.
        m.vocab_size = 1_000_000_000;
        let err = plan_model(
            &m,
            &PrecisionConfig::a8c8w4(),
            &HardwareSpec::default(),
            &MappingDirectives::default(),
            &MemoryPolicy::default(),
        )
        .unwrap_err();
        match err {
            Error::StageCapacity { stage, kind, .. } => {
                assert_eq!(stage, 1);
                assert_eq!(kind, "output");
            }
            other => panic!("expected StageCapacity, got {other:?}"),
        }
    }

    #[test]
    fn cards_for_load_examples() {
        let core = 192 * crate::hardware::MIB;
        // 100 MB weights + 117 MB KV on 192 MiB cards -> 2 cards.
        assert_eq!(cards_for_load(100_000_000, 117_440_512, 0, core), 2);
        assert_eq!(cards_for_load(0, 0, 0, core), 1);
        assert_eq!(cards_for_load(10 * core + 1, 0, 0, core), 11);
    }

    #[test]
    fn pack_reproduces_node_and_rack_counts() {
        let hw = HardwareSpec::default();
        for (cards, nodes, racks) in [(84u64, 6u64, 1u64), (440, 28, 2), (16, 1, 1), (104, 7, 1)] {
            let m = toy_model(cards / 2, 0);
            let plan = plan_model(
                &m,
                &PrecisionConfig::a8c8w4(),
                &hw,
                &MappingDirectives {
                    output: cards - (cards / 2),
                    ..MappingDirectives::default()
                },
                &MemoryPolicy::default(),
            )
            .unwrap();
            assert_eq!(plan.total_cards, cards);
            let d = pack(&plan, &hw).unwrap();
            assert_eq!((d.node_count, d.rack_count), (nodes, racks));
        }
    }

    #[test]
    fn pack_is_order_preserving() {
        let m = toy_model(20, 128);
        let hw = HardwareSpec::default();
        let plan = plan_model(
            &m,
            &PrecisionConfig::a8c8w4(),
            &hw,
            &MappingDirectives::default(),
            &MemoryPolicy::default(),
        )
        .unwrap();
        let d = pack(&plan, &hw).unwrap();
        let mut last = NodeId(0);
        for stage in &d.plan.stages {
            for &c in &stage.card_ids {
                let n = d.node_of(c);
                assert!(n >= last);
                last = n;
            }
        }
    }

    #[test]
    fn microbatch_policy_examples() {
        let p = microbatch_policy(81, 28).unwrap();
        assert_eq!((p.micro_batch_size, p.num_micro_batches), (1, 28));

        let p = microbatch_policy(8, 32).unwrap();
        assert_eq!((p.micro_batch_size, p.num_micro_batches), (4, 8));

        let p = microbatch_policy(16, 16).unwrap();
        assert_eq!((p.micro_batch_size, p.num_micro_batches), (1, 16));
    }

    #[test]
    fn bubble_fraction_examples() {
        assert_eq!(bubble_fraction::<f64>(4, 4), 0.0);
        assert_eq!(bubble_fraction::<f64>(4, 2), 0.5);
        assert_eq!(bubble_fraction::<f64>(1, 1), 0.0);
        assert_eq!(bubble_fraction::<f32>(8, 2), 0.75);
        // M > S never reports a negative bubble
        assert_eq!(bubble_fraction::<f64>(4, 9), 0.0);
    }

    #[test]
    fn directive_overrides_apply_per_layer() {
        let m = toy_model(3, 128);
        let mut d = MappingDirectives::default();
        d.overrides.insert(
            1,
            LayerOverride {
                attention: Some(2),
                ..LayerOverride::default()
            },
        );
        let plan = plan_model(
            &m,
            &PrecisionConfig::a8c8w4(),
            &HardwareSpec::default(),
            &d,
            &MemoryPolicy::default(),
        )
        .unwrap();
        // layers 0,2: 1 attention card; layer 1: 2 cards; 3 mlp; 1 output.
        assert_eq!(plan.total_cards, 3 + 1 + 3 + 1);
        assert_eq!(plan.stages[2].card_ids.len(), 2);
    }
}
