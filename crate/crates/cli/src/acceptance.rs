//! The acceptance gate: one runnable check per published-figure or property
//! criterion, each with its tolerance pinned in code. `run_all` executes
//! them in order; the `acceptance` test target asserts each one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rackline_core::config::{load_directives_file, load_model_file, Scenario};
use rackline_core::engine::{self, SimOptions, TimingModel, Workload};
use rackline_core::fabric::check::{randomized_run, verify_chain, ChainConfig};
use rackline_core::metrics::{
    batch_throughputs, itl, ttft, BatchRecord, SequenceRecord,
};
use rackline_core::planner::{self, MicroBatchPolicy};
use rackline_core::power::{extrapolate_instances, utilization};
use rackline_core::{HardwareSpec, PowerModel};
use rackline_service::http::{serve_http, AppState, ModelEntry};
use rackline_service::{spawn_instance, Broker};

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {}  {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

fn within(actual: f64, target: f64, tolerance: f64) -> bool {
    (actual - target).abs() <= tolerance * target.abs()
}

/// Runs every criterion against the bundled data directory.
pub fn run_all(data: &Path) -> Vec<CriterionResult> {
    vec![
        table_reproduction(data),
        context_user_tradeoff(data),
        power_model(),
        calibrated_latency_throughput(data),
        pipeline_bubble_law(),
        credit_protocol_verification(),
        metrics_oracle_equivalence(),
        end_to_end_serve(data),
        determinism(data),
    ]
}

/// 1. Exact (cards, nodes, racks) triples for the four bundled configs.
pub fn table_reproduction(data: &Path) -> CriterionResult {
    let hw = HardwareSpec::default();
    let cases = [
        ("granite-3.1-3b", (16u64, 1u64, 1u64)),
        ("granite-3.3-8b", (84, 6, 1)),
        ("gpt-oss-20b", (104, 7, 1)),
        ("gpt-oss-120b", (440, 28, 2)),
    ];
    let mut detail = Vec::new();
    let mut passed = true;
    for (name, expected) in cases {
        let got = (|| -> rackline_core::Result<(u64, u64, u64)> {
            let bundle = load_model_file(&data.join(format!("models/{name}.toml")))?;
            let directives = load_directives_file(&data.join(format!("directives/{name}.toml")))?;
            let plan = planner::plan_model(
                &bundle.model,
                &bundle.precision,
                &hw,
                &directives,
                &bundle.memory,
            )?;
            let d = planner::pack(&plan, &hw)?;
            Ok((plan.total_cards, d.node_count, d.rack_count))
        })();
        match got {
            Ok(t) if t == expected => detail.push(format!("{name} {t:?}")),
            Ok(t) => {
                passed = false;
                detail.push(format!("{name} {t:?} != {expected:?}"));
            }
            Err(e) => {
                passed = false;
                detail.push(format!("{name}: {e}"));
            }
        }
    }
    CriterionResult {
        id: 1,
        name: "resource-table",
        passed,
        detail: detail.join("; "),
    }
}

/// 2. Exact user counts from the calibrated 8B budget.
pub fn context_user_tradeoff(data: &Path) -> CriterionResult {
    let result = load_model_file(&data.join("models/granite-3.3-8b.toml"))
        .map(|bundle| (bundle.max_users(2048), bundle.max_users(4096)));
    let (passed, detail) = match result {
        Ok((28, 14)) => (true, "max_users(2k)=28 max_users(4k)=14".to_string()),
        Ok((a, b)) => (false, format!("max_users(2k)={a} max_users(4k)={b}")),
        Err(e) => (false, e.to_string()),
    };
    CriterionResult {
        id: 2,
        name: "context-user-tradeoff",
        passed,
        detail,
    }
}

/// 3. Power figures to within 1% of their published rounding.
pub fn power_model() -> CriterionResult {
    let pm = PowerModel::default();
    let server = pm.server_envelope_provisioned();
    let rack = pm.rack_envelope(18);
    let six_nodes = pm.rack_envelope(6);
    let util = utilization(10_000.0, six_nodes).unwrap_or(f64::NAN);
    let x = extrapolate_instances(10_000.0, 3, (5_000.0, 10_000.0), rack);

    let checks = [
        ("server 2.2kW", within(server, 2_200.0, 0.01)),
        ("rack 39.6kW", within(rack, 39_600.0, 0.01)),
        ("utilization 76%", within(util, 0.76, 0.01)),
        ("3 instances 30kW", within(x.total_watts, 30_000.0, 0.01)),
        ("fits at 5kW reserve", x.fits_at_low_reserve),
        ("marginal at 10kW reserve", !x.fits_at_high_reserve),
    ];
    let passed = checks.iter().all(|(_, ok)| *ok);
    let detail = format!(
        "server {server:.0} W, rack {:.1} kW, util {:.1}%, 3x {:.1} kW{}",
        rack / 1e3,
        util * 100.0,
        x.total_watts / 1e3,
        checks
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(n, _)| format!("; FAILED {n}"))
            .collect::<String>(),
    );
    CriterionResult {
        id: 3,
        name: "power-model",
        passed,
        detail,
    }
}

/// 4. Calibrated simulation reproduces the published latency and throughput
/// figures within 10%. Decode runs truncated to 128 tokens per user;
/// throughputs are compared after projection to the full decode length.
pub fn calibrated_latency_throughput(data: &Path) -> CriterionResult {
    struct Target {
        scenario: &'static str,
        itl: f64,
        ttft: f64,
        otps: f64,
        eotps: f64,
    }
    let targets = [
        Target {
            scenario: "granite-8b-2k.toml",
            itl: 2.8e-3,
            ttft: 64.8e-3,
            otps: 10_341.0,
            eotps: 9_552.0,
        },
        Target {
            scenario: "granite-8b-4k.toml",
            itl: 2.8e-3,
            ttft: 96.2e-3,
            otps: 5_098.0,
            eotps: 4_855.0,
        },
    ];
    let mut passed = true;
    let mut details = Vec::new();
    for t in targets {
        let run = (|| -> rackline_core::Result<_> {
            let scenario = Scenario::load(&data.join("scenarios").join(t.scenario))?;
            assert_eq!(scenario.workload.decode_len, 128, "desk-scale truncation");
            let (trace, report) =
                crate::run_scenario_simulation(&scenario, SimOptions::default())?;
            Ok((trace, report))
        })();
        match run {
            Ok((_, report)) => {
                let itl_mean = report.itl.as_ref().map(|s| s.mean_seconds).unwrap_or(0.0);
                let ttft_mean = report.ttft.mean_seconds;
                let proj = report.projected.as_ref().expect("projection configured");
                let checks = [
                    ("ITL", itl_mean, t.itl),
                    ("TTFT", ttft_mean, t.ttft),
                    ("OTPS", proj.throughputs.otps, t.otps),
                    ("EOTPS", proj.throughputs.eotps, t.eotps),
                ];
                for (name, actual, target) in checks {
                    if !within(actual, target, 0.10) {
                        passed = false;
                        details.push(format!("{}: {name} {actual:.4} vs {target}", t.scenario));
                    }
                }
                details.push(format!(
                    "{}: ITL {:.2}ms TTFT {:.1}ms OTPS {:.0} EOTPS {:.0}",
                    t.scenario,
                    itl_mean * 1e3,
                    ttft_mean * 1e3,
                    proj.throughputs.otps,
                    proj.throughputs.eotps
                ));
            }
            Err(e) => {
                passed = false;
                details.push(format!("{}: {e}", t.scenario));
            }
        }
    }
    CriterionResult {
        id: 4,
        name: "calibrated-latency",
        passed,
        detail: details.join("; "),
    }
}

/// 5. Measured pipeline idle matches `max(0, (S-M)/S)` within 2 points on
/// the S, M grid; at M=S idle is below 1%.
pub fn pipeline_bubble_law() -> CriterionResult {
    let grid = [1u64, 2, 4, 8, 16, 32];
    let hw = HardwareSpec::default();
    let mut worst: f64 = 0.0;
    let mut passed = true;
    let mut failures = Vec::new();
    for &s in &grid {
        let deployment = planner::pack(&planner::uniform_chain_plan(s), &hw).unwrap();
        for &m in &grid {
            let timing = TimingModel {
                decode_stage_seconds: 1e-4,
                prefill_stage_seconds_per_token: 1e-4,
                intra_node_hop: 0.0,
                inter_node_hop: 0.0,
            };
            let workload = Workload {
                num_users: m,
                context_len: 129,
                prefill_len: 1,
                decode_len: 128,
            };
            let policy = MicroBatchPolicy {
                micro_batch_size: 1,
                num_micro_batches: m,
            };
            match engine::simulate(&deployment, &hw, policy, timing, workload, 7, m) {
                Ok(trace) => {
                    let idle = trace.meta.idle_fraction;
                    let predicted = planner::bubble_fraction::<f64>(s, m);
                    let err = (idle - predicted).abs();
                    worst = worst.max(err);
                    if err > 0.02 {
                        passed = false;
                        failures.push(format!("S={s} M={m}: idle {idle:.3} vs {predicted:.3}"));
                    }
                    if m == s && idle >= 0.01 {
                        passed = false;
                        failures.push(format!("S=M={s}: idle {idle:.4} >= 1%"));
                    }
                }
                Err(e) => {
                    passed = false;
                    failures.push(format!("S={s} M={m}: {e}"));
                }
            }
        }
    }
    CriterionResult {
        id: 5,
        name: "pipeline-bubble-law",
        passed,
        detail: if failures.is_empty() {
            format!("36 grid points, worst |idle-predicted| = {worst:.4}")
        } else {
            failures.join("; ")
        },
    }
}

/// 6. Exhaustive interleaving enumeration for chains up to 3 cards, 3
/// slots, and 6 tensors; randomized long runs with continuous conservation.
pub fn credit_protocol_verification() -> CriterionResult {
    let mut states = 0u64;
    let mut configs = 0u64;
    for cards in 1..=3u32 {
        for slots in 1..=3u32 {
            for tensors in 1..=6u64 {
                match verify_chain(ChainConfig {
                    cards,
                    slots,
                    tensors,
                }) {
                    Ok(report) => {
                        states += report.states;
                        configs += 1;
                    }
                    Err(e) => {
                        return CriterionResult {
                            id: 6,
                            name: "credit-protocol",
                            passed: false,
                            detail: format!("({cards},{slots},{tensors}): {e}"),
                        }
                    }
                }
            }
        }
    }
    let mut rand_events = 0u64;
    for seed in 0..20u64 {
        match randomized_run(6, 4, 100_000, seed) {
            Ok(report) => rand_events += report.events,
            Err(e) => {
                return CriterionResult {
                    id: 6,
                    name: "credit-protocol",
                    passed: false,
                    detail: format!("randomized seed {seed}: {e}"),
                }
            }
        }
    }
    CriterionResult {
        id: 6,
        name: "credit-protocol",
        passed: true,
        detail: format!(
            "{configs} chains exhaustively verified ({states} states); 20 seeds x 1e5 \
             events conserved ({rand_events} events)"
        ),
    }
}

/// 7. The five metric formulas match an independent brute-force evaluation
/// on 1,000 randomized synthetic records; the ITL domain precondition is
/// enforced.
pub fn metrics_oracle_equivalence() -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1337);
    let mut records: Vec<SequenceRecord<f64>> = Vec::new();
    for user in 0..1000u64 {
        let n_in = rng.random_range(1..512);
        let t_start = rng.random_range(0.0..2.0);
        let t_first = t_start + rng.random_range(1e-4..0.2);
        let n_out = rng.random_range(2..64);
        let mut token_times = vec![t_first];
        for _ in 1..n_out {
            let last = *token_times.last().unwrap();
            token_times.push(last + rng.random_range(1e-5..0.01));
        }
        records.push(SequenceRecord {
            user_id: user,
            n_in,
            n_out,
            t_start,
            t_first,
            t_end: *token_times.last().unwrap(),
            token_times,
        });
    }

    // brute-force oracles: explicit loops straight from the definitions
    let tol = 1e-12;
    for r in &records {
        let ttft_bf = r.t_first - r.t_start;
        if (ttft(r) - ttft_bf).abs() > tol {
            return fail7(format!("TTFT mismatch for user {}", r.user_id));
        }
        let mut pairwise = 0.0;
        for k in 1..r.token_times.len() {
            pairwise += r.token_times[k] - r.token_times[k - 1];
        }
        let itl_bf = pairwise / (r.n_out as f64 - 1.0);
        match itl(r) {
            Ok(v) if (v - itl_bf).abs() <= tol * itl_bf.max(1.0) => {}
            other => return fail7(format!("ITL mismatch for user {}: {other:?}", r.user_id)),
        }
    }

    // batch throughputs against explicit min/max scans
    let mut n_in_b = 0u64;
    let mut n_out_b = 0u64;
    let mut t_start_b = f64::INFINITY;
    let mut t_first_b = f64::INFINITY;
    let mut t_end_b = f64::NEG_INFINITY;
    for r in &records {
        n_in_b += r.n_in;
        n_out_b += r.n_out;
        t_start_b = t_start_b.min(r.t_start);
        t_first_b = t_first_b.min(r.t_first);
        t_end_b = t_end_b.max(r.t_end);
    }
    let itps_bf = n_in_b as f64 / (t_first_b - t_start_b);
    let otps_bf = n_out_b as f64 / (t_end_b - t_first_b);
    let eotps_bf = n_out_b as f64 / (t_end_b - t_start_b);
    let batch = BatchRecord::from_records(&records).unwrap();
    let tp = batch_throughputs(&batch).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    if rel(tp.itps, itps_bf) > 1e-12 || rel(tp.otps, otps_bf) > 1e-12 || rel(tp.eotps, eotps_bf) > 1e-12
    {
        return fail7("batch throughput mismatch".into());
    }
    if tp.eotps > tp.otps {
        return fail7("EOTPS exceeded OTPS".into());
    }

    // domain precondition: single-token sequences have no ITL
    let single = SequenceRecord {
        user_id: 0,
        n_in: 4,
        n_out: 1,
        t_start: 0.0,
        t_first: 0.1,
        t_end: 0.1,
        token_times: vec![0.1],
    };
    if itl(&single).is_ok() {
        return fail7("ITL accepted a single-token sequence".into());
    }

    CriterionResult {
        id: 7,
        name: "metrics-oracle",
        passed: true,
        detail: format!(
            "1000 records: TTFT/ITL/ITPS/OTPS/EOTPS all match brute force; \
             ITPS {itps_bf:.0} OTPS {otps_bf:.0} EOTPS {eotps_bf:.0}"
        ),
    }
}

fn fail7(detail: String) -> CriterionResult {
    CriterionResult {
        id: 7,
        name: "metrics-oracle",
        passed: false,
        detail,
    }
}

/// 8. 100 requests at 3 priority levels through the streaming endpoint in
/// virtual time: stream integrity, zero dequeue inversions, and
/// service/engine timestamp coherence.
pub fn end_to_end_serve(data: &Path) -> CriterionResult {
    let scenario_path = data.join("scenarios/granite-8b-serve.toml");
    let result = std::panic::catch_unwind(|| serve_run(&scenario_path));
    match result {
        Ok(Ok(detail)) => CriterionResult {
            id: 8,
            name: "end-to-end-serve",
            passed: true,
            detail,
        },
        Ok(Err(e)) => CriterionResult {
            id: 8,
            name: "end-to-end-serve",
            passed: false,
            detail: e,
        },
        Err(_) => CriterionResult {
            id: 8,
            name: "end-to-end-serve",
            passed: false,
            detail: "serve run panicked".into(),
        },
    }
}

fn serve_run(scenario_path: &Path) -> Result<String, String> {
    let scenario = Scenario::load(scenario_path).map_err(|e| e.to_string())?;
    let requests = scenario.num_requests();
    let levels = scenario.priorities() as u8;
    let model = scenario.bundle.model.name.clone();

    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, None).map_err(|e| e.to_string())?;
    let mut models = BTreeMap::new();
    models.insert(
        model.clone(),
        ModelEntry {
            default_max_tokens: scenario.service.max_new_tokens,
            priority_levels: levels,
        },
    );
    let state = AppState::new(broker.clone(), models);

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let outcome: Result<(), String> = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        tokio::spawn(serve_http(state, listener));
        let client = reqwest::Client::new();

        let mut joins = Vec::new();
        for i in 0..requests {
            let client = client.clone();
            let model = model.clone();
            let url = format!("http://{addr}/v1/chat/completions");
            joins.push(tokio::spawn(async move {
                let body = serde_json::json!({
                    "model": model,
                    "messages": [{"role": "user", "content": format!("request {i}: {}", "x".repeat((i % 40) as usize)) }],
                    "stream": true,
                    "max_tokens": 8 + (i % 9),
                    "priority": i % 3,
                });
                let resp = client.post(url).json(&body).send().await.map_err(|e| e.to_string())?;
                if !resp.status().is_success() {
                    return Err(format!("request {i}: HTTP {}", resp.status()));
                }
                let text = resp.text().await.map_err(|e| e.to_string())?;
                // stream integrity: contiguous indices via chunk order,
                // exactly one finish_reason, then [DONE]
                let chunks: Vec<serde_json::Value> = text
                    .split("\n\n")
                    .filter_map(|b| b.trim().strip_prefix("data: "))
                    .filter(|d| *d != "[DONE]")
                    .map(|d| serde_json::from_str(d).map_err(|e| format!("request {i}: {e}")))
                    .collect::<Result<_, String>>()?;
                if !text.contains("[DONE]") {
                    return Err(format!("request {i}: missing [DONE]"));
                }
                let finishes = chunks
                    .iter()
                    .filter(|c| !c["choices"][0]["finish_reason"].is_null())
                    .count();
                if finishes != 1 {
                    return Err(format!("request {i}: {finishes} terminal chunks"));
                }
                if chunks.last().map(|c| c["choices"][0]["finish_reason"].is_null()) != Some(false)
                {
                    return Err(format!("request {i}: terminal chunk not last"));
                }
                Ok::<usize, String>(chunks.len())
            }));
        }
        for j in joins {
            j.await.map_err(|e| e.to_string())??;
        }
        Ok(())
    });
    outcome?;

    let stats = handle.shutdown().map_err(|e| e.to_string())?;
    if stats.completed.len() as u64 != requests {
        return Err(format!(
            "{} of {requests} tasks completed",
            stats.completed.len()
        ));
    }
    let incoherent = stats
        .completed
        .iter()
        .filter(|c| !c.timestamps_coherent())
        .count();
    if incoherent > 0 {
        return Err(format!("{incoherent} tasks with incoherent timestamps"));
    }
    let inversions = broker.priority_inversions();
    if inversions != 0 {
        return Err(format!("{inversions} priority inversions at dequeue"));
    }
    let trace = stats
        .final_trace
        .ok_or("no engine trace after clean shutdown")?;
    if trace.records.len() as u64 != requests {
        return Err(format!(
            "engine trace has {} records, expected {requests}",
            trace.records.len()
        ));
    }
    Ok(format!(
        "{requests} streamed requests, {} levels, 0 inversions, timestamps coherent",
        levels
    ))
}

/// 9. Re-running a scenario with the same seed produces byte-identical
/// traces and reports.
pub fn determinism(data: &Path) -> CriterionResult {
    let mut checked = Vec::new();
    for (file, truncate) in [("toy-pipeline.toml", None), ("granite-8b-2k.toml", Some(32))] {
        let run = |path: &PathBuf, truncate: Option<u64>| -> rackline_core::Result<(Vec<u8>, Vec<u8>)> {
            let mut scenario = Scenario::load(path)?;
            if let Some(decode) = truncate {
                scenario.workload.decode_len = decode;
                scenario.workload.project_decode_len = None;
            }
            let (trace, report) =
                crate::run_scenario_simulation(&scenario, SimOptions::default())?;
            let mut trace_bytes = Vec::new();
            trace.write_jsonl(&mut trace_bytes)?;
            let report_bytes = serde_json::to_vec_pretty(&report).expect("serializes");
            Ok((trace_bytes, report_bytes))
        };
        let path = data.join("scenarios").join(file);
        match (run(&path, truncate), run(&path, truncate)) {
            (Ok(a), Ok(b)) if a == b => checked.push(format!("{file} byte-identical")),
            (Ok(_), Ok(_)) => {
                return CriterionResult {
                    id: 9,
                    name: "determinism",
                    passed: false,
                    detail: format!("{file}: reruns differ"),
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                return CriterionResult {
                    id: 9,
                    name: "determinism",
                    passed: false,
                    detail: format!("{file}: {e}"),
                }
            }
        }
    }
    CriterionResult {
        id: 9,
        name: "determinism",
        passed: true,
        detail: checked.join("; "),
    }
}
