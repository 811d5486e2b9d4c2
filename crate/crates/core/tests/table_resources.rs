//! Card/node/rack totals for the bundled model configurations, and the
//! context-length/user-count tradeoff of the calibrated 8B budget.

use std::path::PathBuf;

use rackline_core::config::{load_directives_file, load_model_file};
use rackline_core::planner::{self, UserWorkload};
use rackline_core::HardwareSpec;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn bundled_configs_reproduce_published_resource_totals() {
    let hw = HardwareSpec::default();
    let cases = [
        ("granite-3.1-3b", 16u64, 1u64, 1u64),
        ("granite-3.3-8b", 84, 6, 1),
        ("gpt-oss-20b", 104, 7, 1),
        ("gpt-oss-120b", 440, 28, 2),
    ];
    for (name, cards, nodes, racks) in cases {
        let bundle = load_model_file(&data_dir().join(format!("models/{name}.toml"))).unwrap();
        let directives =
            load_directives_file(&data_dir().join(format!("directives/{name}.toml"))).unwrap();
        let plan = planner::plan_model(
            &bundle.model,
            &bundle.precision,
            &hw,
            &directives,
            &bundle.memory,
        )
        .unwrap();
        let deployment = planner::pack(&plan, &hw).unwrap();
        assert_eq!(
            (plan.total_cards, deployment.node_count, deployment.rack_count),
            (cards, nodes, racks),
            "{name}"
        );
    }
}

#[test]
fn eight_b_plan_has_81_stages() {
    let hw = HardwareSpec::default();
    let bundle = load_model_file(&data_dir().join("models/granite-3.3-8b.toml")).unwrap();
    let directives =
        load_directives_file(&data_dir().join("directives/granite-3.3-8b.toml")).unwrap();
    let plan = planner::plan_model(
        &bundle.model,
        &bundle.precision,
        &hw,
        &directives,
        &bundle.memory,
    )
    .unwrap();
    assert_eq!(plan.stage_count, 81);
}

#[test]
fn calibrated_budget_reproduces_user_counts() {
    let bundle = load_model_file(&data_dir().join("models/granite-3.3-8b.toml")).unwrap();
    assert_eq!(bundle.kv_per_user_per_token(), 2048);
    assert_eq!(bundle.max_users(2048), 28);
    assert_eq!(bundle.max_users(4096), 14);
    assert_eq!(bundle.max_users(1024), 56);
    assert_eq!(bundle.max_users(8192), 7);
}

#[test]
fn directives_never_fall_below_capacity_lower_bounds() {
    let hw = HardwareSpec::default();
    for name in [
        "granite-3.1-3b",
        "granite-3.3-8b",
        "gpt-oss-20b",
        "gpt-oss-120b",
    ] {
        let bundle = load_model_file(&data_dir().join(format!("models/{name}.toml"))).unwrap();
        let directives =
            load_directives_file(&data_dir().join(format!("directives/{name}.toml"))).unwrap();
        let users = bundle.max_users(2048).max(1);
        let bounds = planner::capacity_lower_bound(
            &bundle.model,
            &bundle.precision,
            &hw,
            UserWorkload {
                context_len: 2048,
                num_users: users,
            },
            &bundle.memory,
        );
        for (kind, bound) in bounds {
            let directive = match kind {
                planner::BlockKind::Attention => directives.attention,
                planner::BlockKind::Mlp => directives.mlp.unwrap_or(0),
                planner::BlockKind::ExpertGroup => directives.expert_group.unwrap_or(0),
                planner::BlockKind::Output => directives.output,
            };
            if directive > 0 {
                assert!(
                    bound <= directive,
                    "{name}: {kind} lower bound {bound} exceeds directive {directive}"
                );
            }
        }
    }
}
