use super::*;
use crate::metrics::{self, BatchRecord};
use crate::model::ModelSpec;
use crate::planner::{self, MappingDirectives, MemoryPolicy};
use crate::model::PrecisionConfig;

/// A deployment with exactly `stages` uniform single-card stages.
pub(crate) fn uniform_deployment(stages: u64, hw: &HardwareSpec) -> Deployment {
    planner::pack(&planner::uniform_chain_plan(stages), hw).unwrap()
}

/// Planner integration check: a real (toy) model produces the same shape
/// the synthetic chain helper does.
#[test]
fn planned_model_matches_uniform_chain_shape() {
    let hw = HardwareSpec::default();
    let m = ModelSpec {
        name: "uniform-4".into(),
        num_layers: 3,
        hidden_dim: 64,
        num_heads: 8,
        num_kv_heads: 2,
        head_dim: 8,
        mlp_dim: 0,
        vocab_size: 256,
        moe: None,
        total_params: 1000,
    };
    let plan = planner::plan_model(
        &m,
        &PrecisionConfig::a8c8w4(),
        &hw,
        &MappingDirectives::default(),
        &MemoryPolicy::default(),
    )
    .unwrap();
    assert_eq!(plan.stage_count, 4);
    assert_eq!(plan.total_cards, 4);
    assert_eq!(planner::uniform_chain_plan(4).stage_count, 4);
}

fn zero_hop_timing(decode: f64, prefill_per_token: f64) -> TimingModel<f64> {
    TimingModel {
        decode_stage_seconds: decode,
        prefill_stage_seconds_per_token: prefill_per_token,
        intra_node_hop: 0.0,
        inter_node_hop: 0.0,
    }
}

fn policy(size: u64, m: u64) -> MicroBatchPolicy {
    MicroBatchPolicy {
        micro_batch_size: size,
        num_micro_batches: m,
    }
}

fn run_uniform(stages: u64, m: u64, decode_len: u64) -> Trace<f64> {
    let hw = HardwareSpec::default();
    let d = uniform_deployment(stages, &hw);
    let workload = Workload {
        num_users: m,
        context_len: decode_len + 1,
        prefill_len: 1,
        decode_len,
    };
    simulate(
        &d,
        &hw,
        policy(1, m),
        zero_hop_timing(1e-3, 1e-3),
        workload,
        7,
        m,
    )
    .unwrap()
}

#[test]
fn calibrate_solves_stage_time() {
    let hw = HardwareSpec::default();
    let d81 = uniform_deployment(81, &hw);
    let t = calibrate::<f64>(&d81, 2.8e-3, 0.0, 0.0).unwrap();
    assert!((t.decode_stage_seconds - 2.8e-3 / 81.0).abs() < 1e-15);
    assert!((t.decode_stage_seconds - 34.567901e-6).abs() < 1e-10);

    let d1 = uniform_deployment(1, &hw);
    let t = calibrate::<f64>(&d1, 1e-3, 0.0, 0.0).unwrap();
    assert!((t.decode_stage_seconds - 1e-3).abs() < 1e-15);
}

#[test]
fn calibrate_rejects_infeasible_target() {
    let hw = HardwareSpec::default();
    let d = uniform_deployment(81, &hw);
    // hops summing past the target: 81 stages of single cards on 6 nodes
    let err = calibrate::<f64>(&d, 2.8e-3, 2.9e-3 / 82.0, 2.9e-3 / 82.0).unwrap_err();
    assert!(matches!(err, Error::Calibration { .. }));
}

#[test]
fn prefill_calibrate_examples() {
    let hw = HardwareSpec::default();
    let d81 = uniform_deployment(81, &hw);
    let r = prefill_calibrate::<f64>(&d81, 64.8e-3, 1024, 0.0, 0.0).unwrap();
    assert!((r - 64.8e-3 / (81.0 * 1024.0)).abs() < 1e-18);
    assert!((r - 0.78125e-6).abs() < 1e-12);

    let r = prefill_calibrate::<f64>(&d81, 96.2e-3, 2048, 0.0, 0.0).unwrap();
    assert!((r - 96.2e-3 / (81.0 * 2048.0)).abs() < 1e-18);
    assert!((r - 0.58e-6).abs() < 1e-8);

    let d1 = uniform_deployment(1, &hw);
    let r = prefill_calibrate::<f64>(&d1, 1e-3, 1, 0.0, 0.0).unwrap();
    assert!((r - 1e-3).abs() < 1e-15);
}

#[test]
fn four_stage_pipeline_reaches_four_ms_period_with_no_idle() {
    // S=4 uniform 1 ms stages, M=4, zero hops: steady-state token period
    // is 4 ms per user and the pipeline stays full.
    let trace = run_uniform(4, 4, 128);
    for rec in &trace.records {
        for w in rec.token_times.windows(2) {
            assert!((w[1] - w[0] - 4e-3).abs() < 1e-12);
        }
    }
    assert!(trace.meta.idle_fraction < 0.01, "idle {}", trace.meta.idle_fraction);
}

#[test]
fn half_filled_pipeline_idles_half_the_time() {
    let trace = run_uniform(4, 2, 128);
    assert!(
        (trace.meta.idle_fraction - 0.5).abs() < 0.02,
        "idle {}",
        trace.meta.idle_fraction
    );
}

#[test]
fn single_stage_single_batch_has_no_bubble() {
    let trace = run_uniform(1, 1, 64);
    assert!(trace.meta.idle_fraction < 0.01);
}

#[test]
fn throughput_identity_otps_equals_m_over_itl() {
    // M <= S uniform stages: OTPS_B = M / ITL_s within 5%
    for (s, m) in [(8u64, 4u64), (16, 8), (4, 4)] {
        let trace = run_uniform(s, m, 128);
        let batch = BatchRecord::from_records(&trace.records).unwrap();
        let otps = metrics::batch_throughputs(&batch).unwrap().otps;
        let itl = metrics::itl(&trace.records[0]).unwrap();
        let predicted = m as f64 / itl;
        assert!(
            (otps - predicted).abs() / predicted < 0.05,
            "S={s} M={m}: otps {otps} vs {predicted}"
        );
    }
}

#[test]
fn steady_state_gaps_have_zero_variance() {
    // prefill ten times longer than decode: the transition token pays the
    // convoy, all later gaps are identical
    let hw = HardwareSpec::default();
    let d = uniform_deployment(6, &hw);
    let workload = Workload {
        num_users: 6,
        context_len: 74,
        prefill_len: 10,
        decode_len: 64,
    };
    let trace = simulate(
        &d,
        &hw,
        policy(1, 6),
        zero_hop_timing(1e-3, 1e-3),
        workload,
        7,
        6,
    )
    .unwrap();
    for rec in &trace.records {
        let gaps: Vec<f64> = rec.token_times.windows(2).map(|w| w[1] - w[0]).collect();
        for w in gaps[1..].windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-9, "steady gaps must be constant");
        }
    }
}

#[test]
fn hop_latencies_extend_the_token_period() {
    // every card on its own node: entry intra, transitions and exit inter
    let hw = HardwareSpec {
        cards_per_node: 1,
        ..HardwareSpec::default()
    };
    let d = uniform_deployment(3, &hw);
    let intra = 10e-6f64;
    let inter = 100e-6f64;
    let hops = pipeline_hop_seconds(&d, intra, inter);
    assert!((hops - (intra + 2.0 * inter + inter)).abs() < 1e-12);

    let target = 3.0 * 1e-3 + hops;
    let timing = calibrate::<f64>(&d, target, intra, inter).unwrap();
    assert!((timing.decode_stage_seconds - 1e-3).abs() < 1e-12);

    let timing = TimingModel {
        prefill_stage_seconds_per_token: 1e-3,
        ..timing
    };
    let workload = Workload {
        num_users: 3,
        context_len: 65,
        prefill_len: 1,
        decode_len: 64,
    };
    let trace = simulate(&d, &hw, policy(1, 3), timing, workload, 7, 3).unwrap();
    let rec = &trace.records[0];
    let gaps: Vec<f64> = rec.token_times.windows(2).map(|w| w[1] - w[0]).collect();
    for g in &gaps[1..] {
        assert!((g - target).abs() < 1e-9, "gap {g} vs target {target}");
    }
}

#[test]
fn deterministic_traces_are_byte_identical() {
    let a = run_uniform(8, 4, 32);
    let b = run_uniform(8, 4, 32);
    let mut buf_a = Vec::new();
    let mut buf_b = Vec::new();
    a.write_jsonl(&mut buf_a).unwrap();
    b.write_jsonl(&mut buf_b).unwrap();
    assert_eq!(buf_a, buf_b);
}

#[test]
fn trace_round_trips_through_jsonl() {
    let trace = run_uniform(4, 2, 16);
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).unwrap();
    let back = Trace::<f64>::read_jsonl(&buf[..]).unwrap();
    assert_eq!(back.meta, trace.meta);
    assert_eq!(back.records, trace.records);
    assert_eq!(back.events.len(), trace.events.len());
}

#[test]
fn capacity_violation_is_rejected() {
    let hw = HardwareSpec::default();
    let d = uniform_deployment(4, &hw);
    let workload = Workload {
        num_users: 8,
        context_len: 20,
        prefill_len: 1,
        decode_len: 4,
    };
    let err = simulate(
        &d,
        &hw,
        policy(1, 8),
        zero_hop_timing(1e-3, 1e-3),
        workload,
        7,
        4, // capacity below the request
    )
    .unwrap_err();
    assert!(matches!(err, Error::Capacity { requested: 8, capacity: 4 }));
}

#[test]
fn degenerate_timing_is_rejected() {
    let hw = HardwareSpec::default();
    let d = uniform_deployment(4, &hw);
    let workload = Workload {
        num_users: 2,
        context_len: 20,
        prefill_len: 1,
        decode_len: 4,
    };
    let err = simulate(
        &d,
        &hw,
        policy(1, 2),
        zero_hop_timing(0.0, 1e-3),
        workload,
        7,
        4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::DegenerateTiming(_)));
}

#[test]
fn backpressure_with_one_slot_framebuffers_still_completes() {
    let hw = HardwareSpec {
        framebuffer_slots: 1,
        ..HardwareSpec::default()
    };
    let d = uniform_deployment(3, &hw);
    let workload = Workload {
        num_users: 6,
        context_len: 20,
        prefill_len: 1,
        decode_len: 16,
    };
    let trace = simulate(
        &d,
        &hw,
        policy(1, 6),
        zero_hop_timing(1e-3, 1e-3),
        workload,
        7,
        6,
    )
    .unwrap();
    assert_eq!(trace.records.len(), 6);
    for rec in &trace.records {
        rec.validate().unwrap();
        assert_eq!(rec.n_out, 16);
    }
}

#[test]
fn live_admission_joins_at_token_boundaries() {
    let hw = HardwareSpec::default();
    let d = uniform_deployment(4, &hw);
    let mut session = LiveSession::new(
        &d,
        &hw,
        policy(1, 2),
        zero_hop_timing(1e-3, 1e-3),
        2, // two simultaneous users
        7,
        SimOptions::default(),
    )
    .unwrap();
    let spec = SequenceSpec {
        prefill_len: 1,
        decode_len: 8,
    };
    session.admit(spec, None).unwrap();
    session.admit(spec, None).unwrap();
    session.admit(spec, None).unwrap(); // queued behind capacity 2
    assert_eq!(session.active_users(), 2);

    let mut done = Vec::new();
    while let Some(ev) = session.step().unwrap() {
        if let SessionEvent::SequenceDone { record } = ev {
            done.push(record);
        }
    }
    assert_eq!(done.len(), 3);
    let third = done.iter().find(|r| r.user_id == 2).unwrap();
    let earliest_end = done
        .iter()
        .filter(|r| r.user_id != 2)
        .map(|r| r.t_end)
        .fold(f64::INFINITY, f64::min);
    // the third sequence starts only after a completion freed a slot
    assert!(third.t_start >= earliest_end);
    let trace = session.finish(None).unwrap();
    assert_eq!(trace.records.len(), 3);
}

#[test]
fn works_at_f32() {
    let hw = HardwareSpec::default();
    let d = uniform_deployment(4, &hw);
    let workload = Workload {
        num_users: 4,
        context_len: 40,
        prefill_len: 1,
        decode_len: 32,
    };
    let timing = TimingModel::<f32> {
        decode_stage_seconds: 1e-3,
        prefill_stage_seconds_per_token: 1e-3,
        intra_node_hop: 0.0,
        inter_node_hop: 0.0,
    };
    let trace = simulate(&d, &hw, policy(1, 4), timing, workload, 7, 4).unwrap();
    assert_eq!(trace.records.len(), 4);
    assert!(trace.meta.idle_fraction < 0.05);
}
