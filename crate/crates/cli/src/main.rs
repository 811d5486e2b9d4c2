use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rackline_cli::{
    acceptance, cmd_check, cmd_plan, cmd_power, cmd_report, cmd_serve, cmd_simulate, exit_code,
    CheckArgs, PowerArgs, ServeArgs, SimulateArgs,
};

/// Desk-scale rack-of-cards LLM-inference emulator: capacity planning,
/// credit-flow fabric, pipeline simulation, serving, and power budgeting.
#[derive(Parser)]
#[command(name = "rackline", version, about)]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the scenario's model onto cards, nodes, and racks.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        /// Also write deployment.json under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power envelopes, utilization, and multi-instance extrapolation.
    Power {
        /// Scenario whose deployment sizes the instance allocation
        /// (default: a 6-node instance).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Nodes in the rack envelope.
        #[arg(long, default_value_t = 18)]
        nodes: u64,
        /// Extrapolate to this many instances (needs --measured-kw).
        #[arg(long)]
        instances: Option<u64>,
        /// Measured per-instance draw in kW.
        #[arg(long)]
        measured_kw: Option<f64>,
        #[arg(long, default_value_t = 5.0)]
        reserve_low_kw: f64,
        #[arg(long, default_value_t = 10.0)]
        reserve_high_kw: f64,
    },
    /// Run the scenario's pipeline simulation and write trace + report.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for trace.jsonl, summary.json, and friends.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Record stage, hop, and idle events too.
        #[arg(long)]
        full_trace: bool,
        /// Also write the fabric protocol event log (fabric.jsonl).
        #[arg(long)]
        fabric_log: bool,
        /// Also write per-sequence timings as sequences.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Recompute a metrics report from an existing trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// Project batch throughputs to this per-user decode length.
        #[arg(long)]
        project_decode_len: Option<u64>,
        /// Write per-sequence rows to this CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Serve the scenario behind the streaming completions endpoint.
    /// RACKLINE_PORT and RACKLINE_PRIORITY_LEVELS override the scenario.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        /// Wall seconds per virtual second (default: run in virtual time).
        #[arg(long)]
        real_time_scale: Option<f64>,
    },
    /// Verify the credit protocol by exhaustive interleaving enumeration
    /// plus randomized long schedules.
    Check {
        /// Verify the whole small-chain grid (cards, slots <= 3,
        /// tensors <= 6) instead of a single configuration.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 3)]
        cards: u32,
        #[arg(long, default_value_t = 2)]
        slots: u32,
        #[arg(long, default_value_t = 5)]
        tensors: u64,
        #[arg(long, default_value_t = 100_000)]
        random_events: u64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Run every acceptance criterion against the bundled data files.
    AllAcceptance {
        /// Directory holding models/, directives/, and scenarios/.
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan { scenario, out } => cmd_plan(scenario, out.as_deref(), cli.json),
        Command::Power {
            scenario,
            nodes,
            instances,
            measured_kw,
            reserve_low_kw,
            reserve_high_kw,
        } => cmd_power(
            &PowerArgs {
                scenario: scenario.clone(),
                rack_nodes: *nodes,
                instances: *instances,
                measured_kw: *measured_kw,
                reserve_low_kw: *reserve_low_kw,
                reserve_high_kw: *reserve_high_kw,
            },
            cli.json,
        ),
        Command::Simulate {
            scenario,
            out,
            full_trace,
            fabric_log,
            csv,
        } => cmd_simulate(
            &SimulateArgs {
                scenario: scenario.clone(),
                out: out.clone(),
                full_trace: *full_trace,
                fabric_log: *fabric_log,
                csv: *csv,
            },
            cli.json,
        ),
        Command::Report {
            trace,
            project_decode_len,
            csv,
        } => cmd_report(trace, *project_decode_len, csv.as_deref(), cli.json),
        Command::Serve {
            scenario,
            port,
            real_time_scale,
        } => cmd_serve(&ServeArgs {
            scenario: scenario.clone(),
            port: *port,
            real_time_scale: *real_time_scale,
        }),
        Command::Check {
            grid,
            cards,
            slots,
            tensors,
            random_events,
            seeds,
        } => cmd_check(
            &CheckArgs {
                grid: *grid,
                cards: *cards,
                slots: *slots,
                tensors: *tensors,
                random_events: *random_events,
                seeds: *seeds,
            },
            cli.json,
        ),
        Command::AllAcceptance { data } => {
            let results = acceptance::run_all(data);
            let mut all_passed = true;
            for r in &results {
                println!("{}", r.line());
                all_passed &= r.passed;
            }
            if cli.json {
                let json: Vec<_> = results
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "id": r.id, "name": r.name, "passed": r.passed, "detail": r.detail
                        })
                    })
                    .collect();
                println!("{}", serde_json::to_string_pretty(&json).unwrap());
            }
            if all_passed {
                Ok(())
            } else {
                return ExitCode::from(5);
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
