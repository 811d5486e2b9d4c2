//! Desk-scale emulation of a rack of pipeline-parallel LLM inference cards:
//! capacity planning, credit-flow-controlled card fabric, discrete-event
//! pipeline simulation, and latency/throughput/power calculators.
//!
//! Floating-point kernels are generic over [`scalar::Scalar`] (`f32` or
//! `f64`); the aliases at the crate root pin the `f64` instantiations used
//! by the CLI and serving layers.

pub mod config;
pub mod engine;
pub mod error;
pub mod fabric;
pub mod hardware;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod power;
pub mod scalar;

pub use error::{Error, Result};
pub use hardware::HardwareSpec;
pub use memory::MemoryBudget;
pub use model::{ModelSpec, MoeSpec, PrecisionConfig};
pub use planner::{
    BlockKind, CardId, Deployment, MappingDirectives, MemoryPolicy, MicroBatchPolicy, NodeId,
    Parallelism, Plan,
};
pub use scalar::Scalar;

/// `f64` instantiations of the scalar-generic types.
pub type PowerModel = power::PowerModel<f64>;
pub type TimingModel = engine::TimingModel<f64>;
pub type Trace = engine::Trace<f64>;
pub type SequenceRecord = metrics::SequenceRecord<f64>;
pub type BatchRecord = metrics::BatchRecord<f64>;
pub type Report = metrics::Report<f64>;
