//! End-to-end checks of the command-line surface: every subcommand against
//! the bundled scenarios, exit codes, and artifact files.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rackline"))
}

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn out_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rackline-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn plan_emits_published_totals_as_json() {
    let output = bin()
        .args(["plan", "--json", "--scenario"])
        .arg(data().join("scenarios/granite-8b-2k.toml"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let v: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(v["totals"]["cards"], 84);
    assert_eq!(v["totals"]["nodes"], 6);
    assert_eq!(v["totals"]["racks"], 1);
    assert_eq!(v["totals"]["stages"], 81);
    assert_eq!(v["totals"]["max_users"], 28);
    assert_eq!(v["stages"].as_array().unwrap().len(), 81);
}

#[test]
fn power_reports_envelopes() {
    let output = bin()
        .args([
            "power",
            "--json",
            "--nodes",
            "18",
            "--instances",
            "3",
            "--measured-kw",
            "10.0",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let v: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(v["server_envelope_watts"], 2118.0);
    assert_eq!(v["server_envelope_provisioned_watts"], 2200.0);
    assert_eq!(v["rack_envelope_watts"], 39600.0);
    assert_eq!(v["extrapolation"]["total_watts"], 30000.0);
    assert_eq!(v["extrapolation"]["fits_at_low_reserve"], true);
    assert_eq!(v["extrapolation"]["fits_at_high_reserve"], false);
}

#[test]
fn simulate_report_roundtrip_and_determinism() {
    let dir1 = out_dir("sim1");
    let dir2 = out_dir("sim2");
    for dir in [&dir1, &dir2] {
        let output = bin()
            .args(["simulate", "--csv", "--scenario"])
            .arg(data().join("scenarios/toy-pipeline.toml"))
            .arg("--out")
            .arg(dir)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "{}",
            String::from_utf8_lossy(&output.stderr)
        );
        assert!(dir.join("trace.jsonl").exists());
        assert!(dir.join("summary.json").exists());
        assert!(dir.join("sequences.csv").exists());
    }
    // same seed, byte-identical artifacts
    let t1 = std::fs::read(dir1.join("trace.jsonl")).unwrap();
    let t2 = std::fs::read(dir2.join("trace.jsonl")).unwrap();
    assert_eq!(t1, t2);
    let s1 = std::fs::read(dir1.join("summary.json")).unwrap();
    let s2 = std::fs::read(dir2.join("summary.json")).unwrap();
    assert_eq!(s1, s2);

    // report recomputes the same metrics from the trace alone
    let output = bin()
        .args(["report", "--json", "--trace"])
        .arg(dir1.join("trace.jsonl"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir1.join("summary.json")).unwrap()).unwrap();
    assert_eq!(report["ttft"], summary["report"]["ttft"]);
    assert_eq!(report["batch"], summary["report"]["batch"]);
}

#[test]
fn check_verifies_the_example_chain() {
    let output = bin()
        .args([
            "check",
            "--cards",
            "3",
            "--slots",
            "2",
            "--tensors",
            "5",
            "--seeds",
            "2",
            "--random-events",
            "5000",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("verified:"));
    assert!(text.contains("no overflow, no deadlock"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = out_dir("badcfg");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "[scenario]\nname = 3\n").unwrap();
    let output = bin()
        .args(["plan", "--scenario"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn capacity_errors_exit_with_code_3() {
    // more users than the calibrated budget admits
    let dir = out_dir("cap");
    std::fs::create_dir_all(&dir).unwrap();
    let scenario = format!(
        r#"
[scenario]
name = "over-capacity"
model = "{models}/granite-3.3-8b.toml"
directives = "{directives}/granite-3.3-8b.toml"

[workload]
context_len = 2048
prefill_len = 1024
decode_len = 16
num_users = 64

[timing]
mode = "calibrate"
target_itl = 2.8e-3
target_ttft = 64.8e-3
"#,
        models = data().join("models").display(),
        directives = data().join("directives").display(),
    );
    let path = dir.join("over.toml");
    std::fs::write(&path, scenario).unwrap();
    let output = bin()
        .args(["simulate", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn calibration_errors_exit_with_code_4() {
    let dir = out_dir("cal");
    std::fs::create_dir_all(&dir).unwrap();
    let scenario = format!(
        r#"
[scenario]
name = "infeasible-itl"
model = "{models}/granite-3.3-8b.toml"
directives = "{directives}/granite-3.3-8b.toml"

[hardware]
inter_node_hop_latency = 1e-3

[workload]
context_len = 2048
prefill_len = 1024
decode_len = 16
num_users = 4

[timing]
mode = "calibrate"
target_itl = 2.8e-3
target_ttft = 64.8e-3
"#,
        models = data().join("models").display(),
        directives = data().join("directives").display(),
    );
    let path = dir.join("cal.toml");
    std::fs::write(&path, scenario).unwrap();
    let output = bin()
        .args(["simulate", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn moe_scenario_plans_with_single_tensor_circuit() {
    let output = bin()
        .args(["plan", "--json", "--scenario"])
        .arg(data().join("scenarios/gpt-oss-20b-plan.toml"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let v: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(v["totals"]["cards"], 104);
    assert_eq!(v["totals"]["nodes"], 7);
    assert_eq!(v["totals"]["circuits"], 1);
}
