//! Command implementations behind the `rackline` binary: plan, power,
//! simulate, serve, report, check, and the acceptance runner.

pub mod acceptance;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use rackline_core::config::Scenario;
use rackline_core::engine::{self, SimOptions, Trace, TraceLevel};
use rackline_core::fabric::check::{self, ChainConfig, RandomizedReport, VerificationReport};
use rackline_core::fabric::Fabric;
use rackline_core::metrics::{self, ReportContext};
use rackline_core::planner::Deployment;
use rackline_core::power::{extrapolate_instances, utilization, InstanceExtrapolation};
use rackline_core::{Error, PowerModel, Report};
use rackline_service::http::{serve_http, AppState, ModelEntry};
use rackline_service::{spawn_instance, Broker};

/// Exit codes: distinct classes so scripts can react to failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Invalid { .. } => 2,
        Error::Capacity { .. } | Error::StageCapacity { .. } => 3,
        Error::Calibration { .. } | Error::DegenerateTiming(_) => 4,
        Error::Verification(_) | Error::Protocol(_) => 5,
        _ => 1,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> rackline_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------- plan ----

#[derive(Debug, Serialize)]
pub struct PlanOutput {
    pub scenario: String,
    pub model: String,
    pub precision: String,
    pub stages: Vec<serde_json::Value>,
    pub nodes: Vec<serde_json::Value>,
    pub totals: serde_json::Value,
}

pub fn plan_output(scenario: &Scenario, deployment: &Deployment) -> PlanOutput {
    let plan = &deployment.plan;
    let stages = plan
        .stages
        .iter()
        .map(|s| {
            let nodes: Vec<u32> = s
                .card_ids
                .iter()
                .map(|&c| deployment.node_of(c).0)
                .collect();
            json!({
                "stage": s.stage_index,
                "kind": s.block_kind.to_string(),
                "layer": s.layer_index,
                "parallelism": s.parallelism,
                "cards": s.card_ids.iter().map(|c| c.0).collect::<Vec<_>>(),
                "nodes": nodes,
            })
        })
        .collect();
    let mut node_cards: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (card, node) in deployment.node_assignments.iter().enumerate() {
        node_cards.entry(node.0).or_default().push(card as u32);
    }
    let nodes = node_cards
        .iter()
        .map(|(node, cards)| json!({ "node": node, "cards": cards }))
        .collect();
    let circuits = Fabric::build(plan, &scenario.hardware, 1 << 16)
        .map(|f| f.circuits().len())
        .unwrap_or(0);
    PlanOutput {
        scenario: scenario.name.clone(),
        model: scenario.bundle.model.name.clone(),
        precision: scenario.bundle.precision.label(),
        stages,
        nodes,
        totals: json!({
            "cards": plan.total_cards,
            "nodes": deployment.node_count,
            "racks": deployment.rack_count,
            "stages": plan.stage_count,
            "circuits": circuits,
            "max_users": scenario.max_users(),
            "context_len": scenario.workload.context_len,
        }),
    }
}

pub fn cmd_plan(
    scenario_path: &Path,
    out: Option<&Path>,
    json_out: bool,
) -> rackline_core::Result<()> {
    let scenario = Scenario::load(scenario_path)?;
    let deployment = scenario.build_deployment()?;
    let output = plan_output(&scenario, &deployment);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("deployment.json"), &output)?;
    }
    if json_out {
        println!("{}", serde_json::to_string_pretty(&output).unwrap());
    } else {
        println!(
            "{}: {} ({}) -> {} cards, {} nodes, {} rack(s), {} stages, {} users at {} context",
            output.scenario,
            output.model,
            output.precision,
            deployment.plan.total_cards,
            deployment.node_count,
            deployment.rack_count,
            deployment.plan.stage_count,
            scenario.max_users(),
            scenario.workload.context_len,
        );
    }
    Ok(())
}

// --------------------------------------------------------------- power ----

#[derive(Debug, Serialize)]
pub struct PowerOutput {
    pub model: PowerModel,
    pub server_envelope_watts: f64,
    pub server_envelope_provisioned_watts: f64,
    pub rack_nodes: u64,
    pub rack_envelope_watts: f64,
    pub rack_envelope_nominal_watts: f64,
    pub instance_nodes: u64,
    pub instance_allocation_watts: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_watts: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extrapolation: Option<InstanceExtrapolation<f64>>,
}

pub struct PowerArgs {
    pub scenario: Option<PathBuf>,
    pub rack_nodes: u64,
    pub instances: Option<u64>,
    pub measured_kw: Option<f64>,
    pub reserve_low_kw: f64,
    pub reserve_high_kw: f64,
}

pub fn power_output(args: &PowerArgs) -> rackline_core::Result<PowerOutput> {
    let pm = PowerModel::default();
    pm.validate()?;
    let instance_nodes = match &args.scenario {
        Some(path) => {
            let scenario = Scenario::load(path)?;
            scenario.build_deployment()?.node_count
        }
        None => 6,
    };
    let allocation = pm.rack_envelope(instance_nodes);
    let measured = args.measured_kw.map(|kw| kw * 1e3);
    let util = match measured {
        Some(m) => Some(utilization(m, allocation)?),
        None => None,
    };
    let extrapolation = match (args.instances, measured) {
        (Some(k), Some(m)) => Some(extrapolate_instances(
            m,
            k,
            (args.reserve_low_kw * 1e3, args.reserve_high_kw * 1e3),
            pm.rack_envelope(args.rack_nodes),
        )),
        _ => None,
    };
    Ok(PowerOutput {
        server_envelope_watts: pm.server_envelope(),
        server_envelope_provisioned_watts: pm.server_envelope_provisioned(),
        rack_nodes: args.rack_nodes,
        rack_envelope_watts: pm.rack_envelope(args.rack_nodes),
        rack_envelope_nominal_watts: pm.rack_envelope_nominal(args.rack_nodes),
        instance_nodes,
        instance_allocation_watts: allocation,
        measured_watts: measured,
        utilization: util,
        extrapolation,
        model: pm,
    })
}

pub fn cmd_power(args: &PowerArgs, json_out: bool) -> rackline_core::Result<()> {
    let out = power_output(args)?;
    if json_out {
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
        return Ok(());
    }
    println!("per-server envelope   {:>10.0} W (provisioned {:.1} kW)",
        out.server_envelope_watts, out.server_envelope_provisioned_watts / 1e3);
    println!("rack envelope ({:>2})    {:>10.1} kW (nominal {:.1} kW)",
        out.rack_nodes, out.rack_envelope_watts / 1e3, out.rack_envelope_nominal_watts / 1e3);
    println!("instance allocation   {:>10.1} kW ({} nodes)",
        out.instance_allocation_watts / 1e3, out.instance_nodes);
    if let (Some(m), Some(u)) = (out.measured_watts, out.utilization) {
        println!("measured              {:>10.1} kW ({:.0}% of allocation)", m / 1e3, u * 100.0);
    }
    if let Some(x) = &out.extrapolation {
        println!(
            "{} instances           {:>10.1} kW; reserve {:.0}-{:.0} kW -> fits at low: {}, at high: {}{}",
            x.instances,
            x.total_watts / 1e3,
            x.reserve_low_watts / 1e3,
            x.reserve_high_watts / 1e3,
            x.fits_at_low_reserve,
            x.fits_at_high_reserve,
            if x.marginal() { " (marginal)" } else { "" },
        );
    }
    Ok(())
}

// ------------------------------------------------------------ simulate ----

pub struct SimulateArgs {
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub full_trace: bool,
    pub fabric_log: bool,
    pub csv: bool,
}

/// Runs the scenario's static-batch simulation and aggregates its report.
pub fn run_scenario_simulation(
    scenario: &Scenario,
    opts: SimOptions,
) -> rackline_core::Result<(Trace<f64>, Report)> {
    let deployment = scenario.build_deployment()?;
    let policy = scenario.policy(&deployment)?;
    let timing = scenario.timing_model(&deployment)?;
    let capacity = scenario.max_users();
    let trace = engine::simulate_with(
        &deployment,
        &scenario.hardware,
        policy,
        timing,
        scenario.sim_workload(),
        scenario.seed,
        capacity,
        opts,
        Some(scenario.name.clone()),
    )?;
    let report = metrics::aggregate(
        &trace.records,
        &ReportContext {
            scenario: Some(scenario.name.clone()),
            plan_hash: Some(trace.meta.plan_hash.clone()),
            seed: Some(scenario.seed),
            idle_fraction: Some(trace.meta.idle_fraction),
            project_to_decode_len: scenario.workload.project_decode_len,
        },
    )?;
    Ok((trace, report))
}

pub fn cmd_simulate(args: &SimulateArgs, json_out: bool) -> rackline_core::Result<()> {
    let scenario = Scenario::load(&args.scenario)?;
    let opts = SimOptions {
        trace_level: if args.full_trace {
            TraceLevel::Full
        } else {
            TraceLevel::Lifecycle
        },
        record_protocol: args.fabric_log,
    };
    let (trace, report) = run_scenario_simulation(&scenario, opts)?;

    fs::create_dir_all(&args.out)?;
    let trace_path = args.out.join("trace.jsonl");
    let mut file = fs::File::create(&trace_path)?;
    trace.write_jsonl(&mut file)?;
    write_json(&args.out.join("summary.json"), &json!({ "meta": trace.meta, "report": report }))?;
    if args.fabric_log {
        let mut f = fs::File::create(args.out.join("fabric.jsonl"))?;
        use std::io::Write;
        for ev in &trace.protocol_events {
            writeln!(f, "{}", serde_json::to_string(ev).unwrap())?;
        }
    }
    if args.csv {
        let f = fs::File::create(args.out.join("sequences.csv"))?;
        metrics::write_csv(&trace.records, f)?;
    }

    if json_out {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "meta": trace.meta, "report": report })).unwrap()
        );
    } else {
        print_report(&report);
        println!("trace written to {}", trace_path.display());
    }
    Ok(())
}

pub fn print_report(report: &Report) {
    println!(
        "sequences {:>6}   tokens in/out {}/{}",
        report.sequences, report.totals.input_tokens, report.totals.output_tokens
    );
    println!(
        "TTFT  mean {:>10.3} ms   median {:>10.3} ms   p99 {:>10.3} ms",
        report.ttft.mean_seconds * 1e3,
        report.ttft.median_seconds * 1e3,
        report.ttft.p99_seconds * 1e3
    );
    if let Some(itl) = &report.itl {
        println!(
            "ITL   mean {:>10.3} ms   median {:>10.3} ms   p99 {:>10.3} ms",
            itl.mean_seconds * 1e3,
            itl.median_seconds * 1e3,
            itl.p99_seconds * 1e3
        );
    }
    println!(
        "batch ITPS {:>10.0}   OTPS {:>10.0}   EOTPS {:>10.0}",
        report.batch.itps, report.batch.otps, report.batch.eotps
    );
    if let Some(p) = &report.projected {
        println!(
            "proj. (decode {}) OTPS {:>10.0}   EOTPS {:>10.0}",
            p.decode_len, p.throughputs.otps, p.throughputs.eotps
        );
    }
    if let Some(idle) = report.idle_fraction {
        println!("pipeline idle fraction {:.3}", idle);
    }
}

// -------------------------------------------------------------- report ----

pub fn cmd_report(
    trace_path: &Path,
    project: Option<u64>,
    csv: Option<&Path>,
    json_out: bool,
) -> rackline_core::Result<()> {
    let file = fs::File::open(trace_path)?;
    let trace = Trace::<f64>::read_jsonl(BufReader::new(file))?;
    let report = metrics::aggregate(
        &trace.records,
        &ReportContext {
            scenario: trace.meta.scenario.clone(),
            plan_hash: Some(trace.meta.plan_hash.clone()),
            seed: Some(trace.meta.seed),
            idle_fraction: Some(trace.meta.idle_fraction),
            project_to_decode_len: project,
        },
    )?;
    if let Some(path) = csv {
        let f = fs::File::create(path)?;
        metrics::write_csv(&trace.records, f)?;
    }
    if json_out {
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
    } else {
        print_report(&report);
    }
    Ok(())
}

// --------------------------------------------------------------- check ----

#[derive(Debug, Serialize)]
pub struct CheckOutput {
    pub exhaustive: Vec<VerificationReport>,
    pub randomized: Vec<RandomizedReport>,
}

pub struct CheckArgs {
    pub grid: bool,
    pub cards: u32,
    pub slots: u32,
    pub tensors: u64,
    pub random_events: u64,
    pub seeds: u64,
}

pub fn run_check(args: &CheckArgs) -> rackline_core::Result<CheckOutput> {
    let mut exhaustive = Vec::new();
    if args.grid {
        for cards in 1..=3 {
            for slots in 1..=3 {
                for tensors in 1..=6 {
                    exhaustive.push(check::verify_chain(ChainConfig {
                        cards,
                        slots,
                        tensors,
                    })?);
                }
            }
        }
    } else {
        exhaustive.push(check::verify_chain(ChainConfig {
            cards: args.cards,
            slots: args.slots,
            tensors: args.tensors,
        })?);
    }
    let mut randomized = Vec::new();
    for seed in 0..args.seeds {
        randomized.push(check::randomized_run(6, 4, args.random_events, seed)?);
    }
    Ok(CheckOutput {
        exhaustive,
        randomized,
    })
}

pub fn cmd_check(args: &CheckArgs, json_out: bool) -> rackline_core::Result<()> {
    let out = run_check(args)?;
    if json_out {
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
        return Ok(());
    }
    let states: u64 = out.exhaustive.iter().map(|r| r.states).sum();
    println!(
        "verified: {} states across {} config(s), no overflow, no deadlock",
        states,
        out.exhaustive.len()
    );
    for r in &out.exhaustive {
        println!(
            "  chain cards={} slots={} tensors={}: {} states, {} terminal",
            r.config.cards, r.config.slots, r.config.tensors, r.states, r.terminal_states
        );
    }
    if !out.randomized.is_empty() {
        let events: u64 = out.randomized.iter().map(|r| r.events).sum();
        println!(
            "randomized: {} seeds x {} events, conservation held, all tensors delivered \
             ({} events total)",
            out.randomized.len(),
            out.randomized.first().map(|r| r.events).unwrap_or(0),
            events
        );
    }
    Ok(())
}

// --------------------------------------------------------------- serve ----

pub struct ServeArgs {
    pub scenario: PathBuf,
    pub port: Option<u16>,
    pub real_time_scale: Option<f64>,
}

/// Starts the instance and the HTTP endpoint; runs until interrupted.
/// `RACKLINE_PORT` and `RACKLINE_PRIORITY_LEVELS` override the scenario.
pub fn cmd_serve(args: &ServeArgs) -> rackline_core::Result<()> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Ok(levels) = std::env::var("RACKLINE_PRIORITY_LEVELS") {
        let levels: u64 = levels
            .parse()
            .map_err(|_| Error::config("RACKLINE_PRIORITY_LEVELS", "expected an integer"))?;
        scenario.workload.priorities = Some(levels.max(1));
    }
    let port = std::env::var("RACKLINE_PORT")
        .ok()
        .and_then(|p| p.parse().ok())
        .or(args.port)
        .unwrap_or(scenario.service.port);

    let broker = Arc::new(Broker::new());
    let handle = spawn_instance(broker.clone(), &scenario, args.real_time_scale)
        .map_err(|e| Error::invalid("service", e.to_string()))?;
    let mut models = BTreeMap::new();
    models.insert(
        scenario.bundle.model.name.clone(),
        ModelEntry {
            default_max_tokens: scenario.service.max_new_tokens,
            priority_levels: scenario.priorities() as u8,
        },
    );
    let state = AppState::new(broker, models);

    let model_name = handle.model_name.clone();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        println!(
            "serving {model_name} on http://0.0.0.0:{port}/v1/chat/completions ({} mode)",
            if args.real_time_scale.is_some() {
                "real-time"
            } else {
                "virtual-time"
            },
        );
        tokio::select! {
            r = serve_http(state, listener) => r,
            _ = tokio::signal::ctrl_c() => {
                println!("shutting down");
                Ok(())
            }
        }
    })?;
    handle
        .shutdown()
        .map_err(|e| Error::invalid("service", e.to_string()))?;
    Ok(())
}
