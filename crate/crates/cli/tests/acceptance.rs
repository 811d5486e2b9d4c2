//! The acceptance suite: one test per criterion, each printing its
//! pass/fail line. Run with `--nocapture` to see every line:
//!
//! ```text
//! cargo test -p rackline-cli --test acceptance -- --nocapture
//! ```

use std::path::PathBuf;

use rackline_cli::acceptance::{self, CriterionResult};

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn assert_criterion(result: CriterionResult) {
    println!("{}", result.line());
    assert!(result.passed, "{}", result.line());
}

#[test]
fn criterion_1_resource_table_reproduction() {
    assert_criterion(acceptance::table_reproduction(&data()));
}

#[test]
fn criterion_2_context_user_tradeoff() {
    assert_criterion(acceptance::context_user_tradeoff(&data()));
}

#[test]
fn criterion_3_power_model() {
    assert_criterion(acceptance::power_model());
}

#[test]
fn criterion_4_calibrated_latency_throughput() {
    assert_criterion(acceptance::calibrated_latency_throughput(&data()));
}

#[test]
fn criterion_5_pipeline_bubble_law() {
    assert_criterion(acceptance::pipeline_bubble_law());
}

#[test]
fn criterion_6_credit_protocol_verification() {
    assert_criterion(acceptance::credit_protocol_verification());
}

#[test]
fn criterion_7_metrics_oracle_equivalence() {
    assert_criterion(acceptance::metrics_oracle_equivalence());
}

#[test]
fn criterion_8_end_to_end_serve() {
    assert_criterion(acceptance::end_to_end_serve(&data()));
}

#[test]
fn criterion_9_determinism() {
    assert_criterion(acceptance::determinism(&data()));
}
