//! Structured-text descriptors: model files, mapping-directive files, and
//! scenario files, all TOML.
//!
//! Keys are addressed by path: `model.num_layers`, `precision.weight_bits`,
//! `budget.kv_budget_bytes`, `hardware.cards_per_node`,
//! `workload.context_len`, `timing.target_itl`, and so on. Paths inside a
//! scenario resolve relative to the scenario file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::engine::{self, TimingModel, Workload};
use crate::error::{Error, Result};
use crate::hardware::HardwareSpec;
use crate::memory;
use crate::model::{ModelSpec, MoeSpec, PrecisionConfig};
use crate::planner::{
    self, Deployment, LayerOverride, MappingDirectives, MemoryPolicy, MicroBatchPolicy,
    Parallelism,
};

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

/// A model descriptor plus its precision and calibrated memory policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: ModelSpec,
    pub precision: PrecisionConfig,
    pub memory: MemoryPolicy,
}

impl ModelBundle {
    /// Per-layer KV bytes per user per token at this precision.
    pub fn kv_per_user_per_token(&self) -> u64 {
        memory::kv_bytes_per_user_per_token(&self.model, &self.precision)
    }

    /// Simultaneous users the calibrated budget admits at `context_len`.
    pub fn max_users(&self, context_len: u64) -> u64 {
        planner::layer_budget(&self.model, &self.precision, &self.memory)
            .max_users(self.kv_per_user_per_token(), context_len)
    }
}

#[derive(Debug, Deserialize)]
struct ModelFileToml {
    model: ModelToml,
    precision: PrecisionConfig,
    #[serde(default)]
    budget: BudgetToml,
}

#[derive(Debug, Deserialize)]
struct ModelToml {
    name: String,
    num_layers: u64,
    hidden_dim: u64,
    num_heads: u64,
    num_kv_heads: u64,
    head_dim: u64,
    #[serde(default)]
    mlp_dim: u64,
    vocab_size: u64,
    total_params: u64,
    moe: Option<MoeSpec>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default)]
struct BudgetToml {
    kv_budget_bytes: u64,
    scratch_fraction: Option<f64>,
}

/// Loads a model descriptor file (`[model]`, `[precision]`, `[budget]`).
pub fn load_model_file(path: &Path) -> Result<ModelBundle> {
    let toml: ModelFileToml = read_toml(path)?;
    let m = toml.model;
    let model = ModelSpec {
        name: m.name,
        num_layers: m.num_layers,
        hidden_dim: m.hidden_dim,
        num_heads: m.num_heads,
        num_kv_heads: m.num_kv_heads,
        head_dim: m.head_dim,
        mlp_dim: m.mlp_dim,
        vocab_size: m.vocab_size,
        moe: m.moe,
        total_params: m.total_params,
    };
    model
        .validate()
        .map_err(|e| Error::config(format!("{}: model", path.display()), e.to_string()))?;
    toml.precision
        .validate()
        .map_err(|e| Error::config(format!("{}: precision", path.display()), e.to_string()))?;
    let memory = MemoryPolicy {
        kv_budget_bytes: toml.budget.kv_budget_bytes,
        scratch_fraction: toml
            .budget
            .scratch_fraction
            .unwrap_or(MemoryPolicy::default().scratch_fraction),
    };
    Ok(ModelBundle {
        model,
        precision: toml.precision,
        memory,
    })
}

#[derive(Debug, Deserialize)]
struct DirectivesFileToml {
    directives: DirectivesToml,
}

#[derive(Debug, Deserialize)]
struct DirectivesToml {
    #[serde(default = "one")]
    attention: u64,
    mlp: Option<u64>,
    expert_group: Option<u64>,
    #[serde(default = "one")]
    output: u64,
    expert_parallelism: Option<Parallelism>,
    #[serde(default)]
    overrides: BTreeMap<String, LayerOverride>,
}

fn one() -> u64 {
    1
}

/// Loads a mapping-directives file (`[directives]`).
pub fn load_directives_file(path: &Path) -> Result<MappingDirectives> {
    let toml: DirectivesFileToml = read_toml(path)?;
    let d = toml.directives;
    let mut overrides = BTreeMap::new();
    for (layer, o) in d.overrides {
        let idx: u64 = layer.parse().map_err(|_| {
            Error::config(
                format!("{}: directives.overrides.{layer}", path.display()),
                "override keys must be layer indices",
            )
        })?;
        overrides.insert(idx, o);
    }
    Ok(MappingDirectives {
        attention: d.attention,
        mlp: d.mlp,
        expert_group: d.expert_group,
        output: d.output,
        expert_parallelism: d.expert_parallelism.unwrap_or(Parallelism::Tensor),
        overrides,
    })
}

/// Workload section of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct WorkloadConfig {
    pub context_len: u64,
    pub prefill_len: u64,
    pub decode_len: u64,
    pub num_users: u64,
    /// Requests issued in serve mode; defaults to `num_users`.
    pub num_requests: Option<u64>,
    /// Service priority levels; defaults to 3.
    pub priorities: Option<u64>,
    /// Report batch throughputs projected to this per-user decode length.
    pub project_decode_len: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TimingConfig {
    /// Solve stage times from latency targets on the planned deployment.
    Calibrate { target_itl: f64, target_ttft: f64 },
    /// Stage times given directly.
    Explicit {
        decode_stage_seconds: f64,
        prefill_stage_seconds_per_token: f64,
    },
}

/// Service section of a scenario.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub port: u16,
    pub max_new_tokens: u64,
    /// Per-node configure duration for the startup ring, seconds.
    pub ring_configure_seconds: f64,
    pub ring_timeout_seconds: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            max_new_tokens: 32,
            ring_configure_seconds: 0.05,
            ring_timeout_seconds: 30.0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ScenarioFileToml {
    scenario: ScenarioHeaderToml,
    #[serde(default)]
    hardware: HardwareSpec,
    workload: WorkloadConfig,
    timing: TimingConfig,
    #[serde(default)]
    service: ServiceConfig,
}

#[derive(Debug, Deserialize)]
struct ScenarioHeaderToml {
    name: String,
    #[serde(default)]
    seed: u64,
    model: PathBuf,
    directives: PathBuf,
}

/// A fully resolved scenario: every referenced file loaded and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub bundle: ModelBundle,
    pub directives: MappingDirectives,
    pub hardware: HardwareSpec,
    pub workload: WorkloadConfig,
    pub timing: TimingConfig,
    pub service: ServiceConfig,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let toml: ScenarioFileToml = read_toml(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let bundle = load_model_file(&dir.join(&toml.scenario.model))?;
        let directives = load_directives_file(&dir.join(&toml.scenario.directives))?;
        toml.hardware
            .validate()
            .map_err(|e| Error::config(format!("{}: hardware", path.display()), e.to_string()))?;
        let s = Scenario {
            name: toml.scenario.name,
            seed: toml.scenario.seed,
            bundle,
            directives,
            hardware: toml.hardware,
            workload: toml.workload,
            timing: toml.timing,
            service: toml.service,
        };
        s.validate()
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.workload;
        if w.prefill_len + w.decode_len > w.context_len {
            return Err(Error::invalid(
                "workload",
                format!(
                    "prefill_len {} + decode_len {} exceeds context_len {}",
                    w.prefill_len, w.decode_len, w.context_len
                ),
            ));
        }
        if w.num_users == 0 || w.prefill_len == 0 || w.decode_len == 0 {
            return Err(Error::invalid(
                "workload",
                "num_users, prefill_len, decode_len must be >= 1",
            ));
        }
        if w.priorities == Some(0) {
            return Err(Error::invalid("workload", "priorities must be >= 1"));
        }
        Ok(())
    }

    pub fn build_deployment(&self) -> Result<Deployment> {
        let plan = planner::plan_model(
            &self.bundle.model,
            &self.bundle.precision,
            &self.hardware,
            &self.directives,
            &self.bundle.memory,
        )?;
        planner::pack(&plan, &self.hardware)
    }

    /// Simultaneous-user capacity of the calibrated budget at the
    /// scenario's context length.
    pub fn max_users(&self) -> u64 {
        self.bundle.max_users(self.workload.context_len)
    }

    pub fn policy(&self, deployment: &Deployment) -> Result<MicroBatchPolicy> {
        planner::microbatch_policy(
            deployment.plan.stage_count as u64,
            self.workload.num_users,
        )
    }

    /// The timing model: explicit values, or stage times calibrated to the
    /// scenario's latency targets on this deployment.
    pub fn timing_model(&self, deployment: &Deployment) -> Result<TimingModel<f64>> {
        let intra = self.hardware.intra_node_hop_latency;
        let inter = self.hardware.inter_node_hop_latency;
        match self.timing {
            TimingConfig::Explicit {
                decode_stage_seconds,
                prefill_stage_seconds_per_token,
            } => {
                let t = TimingModel {
                    decode_stage_seconds,
                    prefill_stage_seconds_per_token,
                    intra_node_hop: intra,
                    inter_node_hop: inter,
                };
                t.validate()?;
                Ok(t)
            }
            TimingConfig::Calibrate {
                target_itl,
                target_ttft,
            } => {
                let mut t = engine::calibrate(deployment, target_itl, intra, inter)?;
                t.prefill_stage_seconds_per_token = engine::prefill_calibrate(
                    deployment,
                    target_ttft,
                    self.workload.prefill_len,
                    intra,
                    inter,
                )?;
                Ok(t)
            }
        }
    }

    pub fn sim_workload(&self) -> Workload {
        Workload {
            num_users: self.workload.num_users,
            context_len: self.workload.context_len,
            prefill_len: self.workload.prefill_len,
            decode_len: self.workload.decode_len,
        }
    }

    pub fn num_requests(&self) -> u64 {
        self.workload.num_requests.unwrap_or(self.workload.num_users)
    }

    pub fn priorities(&self) -> u64 {
        self.workload.priorities.unwrap_or(3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rackline-config-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    const MODEL_TOML: &str = r#"
[model]
name = "tiny"
num_layers = 2
hidden_dim = 64
num_heads = 8
num_kv_heads = 2
head_dim = 8
mlp_dim = 128
vocab_size = 256
total_params = 100000

[precision]
activation_bits = 8
cache_bits = 8
weight_bits = 4

[budget]
kv_budget_bytes = 1048576
"#;

    const DIRECTIVES_TOML: &str = r#"
[directives]
attention = 1
mlp = 1
output = 2
"#;

    #[test]
    fn loads_model_and_directives() {
        let dir = tmp_dir("model");
        let mpath = write_file(&dir, "m.toml", MODEL_TOML);
        let dpath = write_file(&dir, "d.toml", DIRECTIVES_TOML);
        let bundle = load_model_file(&mpath).unwrap();
        assert_eq!(bundle.model.num_layers, 2);
        assert_eq!(bundle.precision.weight_bits, 4);
        assert_eq!(bundle.memory.kv_budget_bytes, 1_048_576);
        let d = load_directives_file(&dpath).unwrap();
        assert_eq!(d.output, 2);
        assert_eq!(d.mlp, Some(1));
    }

    #[test]
    fn scenario_resolves_relative_paths_and_validates() {
        let dir = tmp_dir("scenario");
        write_file(&dir, "m.toml", MODEL_TOML);
        write_file(&dir, "d.toml", DIRECTIVES_TOML);
        let spath = write_file(
            &dir,
            "s.toml",
            r#"
[scenario]
name = "tiny-run"
seed = 7
model = "m.toml"
directives = "d.toml"

[workload]
context_len = 64
prefill_len = 16
decode_len = 16
num_users = 2

[timing]
mode = "explicit"
decode_stage_seconds = 1e-3
prefill_stage_seconds_per_token = 1e-4
"#,
        );
        let s = Scenario::load(&spath).unwrap();
        assert_eq!(s.name, "tiny-run");
        assert_eq!(s.seed, 7);
        assert_eq!(s.priorities(), 3);
        let d = s.build_deployment().unwrap();
        assert_eq!(d.plan.total_cards, 6);
        let t = s.timing_model(&d).unwrap();
        assert_eq!(t.decode_stage_seconds, 1e-3);
    }

    #[test]
    fn bad_key_reports_path() {
        let dir = tmp_dir("bad");
        let mpath = write_file(&dir, "bad.toml", "[model]\nname = 3\n");
        let err = load_model_file(&mpath).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml"), "{msg}");
    }

    #[test]
    fn infeasible_workload_is_rejected() {
        let dir = tmp_dir("infeasible");
        write_file(&dir, "m.toml", MODEL_TOML);
        write_file(&dir, "d.toml", DIRECTIVES_TOML);
        let spath = write_file(
            &dir,
            "s.toml",
            r#"
[scenario]
name = "bad"
model = "m.toml"
directives = "d.toml"

[workload]
context_len = 16
prefill_len = 16
decode_len = 16
num_users = 2

[timing]
mode = "explicit"
decode_stage_seconds = 1e-3
prefill_stage_seconds_per_token = 1e-4
"#,
        );
        assert!(matches!(
            Scenario::load(&spath),
            Err(Error::Config { .. })
        ));
    }
}
