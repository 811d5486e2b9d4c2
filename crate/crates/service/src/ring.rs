//! Ring-based startup readiness: nodes configure their cards in parallel
//! while a token circulates; the pipeline manager declares the instance
//! ready after the first full pass that observes every node's flag set.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// The circulating token: pass counter plus per-node ready flags. Flags are
/// monotone within a run: once set they stay set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingToken {
    pub pass_number: u64,
    pub ready_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingOutcome {
    /// Virtual seconds from startup until readiness was declared.
    pub ready_at: f64,
    pub passes: u64,
    pub token: RingToken,
}

/// Simulates the startup ring. `configure_seconds[i]` is node `i`'s card
/// configuration time (`None`: the node never reports). `hop_seconds` is
/// the token's per-hop latency. Fails, naming the first silent node, once
/// the token has circulated past `timeout_seconds`.
pub fn ring_ready(
    configure_seconds: &[Option<f64>],
    hop_seconds: f64,
    timeout_seconds: f64,
) -> Result<RingOutcome> {
    if configure_seconds.is_empty() {
        return Err(ServiceError::InvalidRequest("ring needs >= 1 node".into()));
    }
    let n = configure_seconds.len();
    let mut token = RingToken {
        pass_number: 0,
        ready_flags: vec![false; n],
    };
    let mut now = 0.0f64;
    loop {
        token.pass_number += 1;
        let mut all_set = true;
        for (i, conf) in configure_seconds.iter().enumerate() {
            now += hop_seconds;
            match conf {
                Some(d) if now >= *d => token.ready_flags[i] = true,
                _ => {}
            }
            all_set &= token.ready_flags[i];
        }
        now += hop_seconds; // back to the manager
        if all_set {
            return Ok(RingOutcome {
                ready_at: now,
                passes: token.pass_number,
                token,
            });
        }
        if now > timeout_seconds {
            let node = token
                .ready_flags
                .iter()
                .position(|&f| !f)
                .expect("some flag unset");
            return Err(ServiceError::StartupFailure {
                node,
                timeout_seconds,
            });
        }
        // nothing will ever change once every remaining node is silent
        if configure_seconds
            .iter()
            .zip(&token.ready_flags)
            .all(|(c, &f)| f || c.is_none())
        {
            let node = token
                .ready_flags
                .iter()
                .position(|&f| !f)
                .expect("some flag unset");
            return Err(ServiceError::StartupFailure {
                node,
                timeout_seconds,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_is_ready_right_after_configuring() {
        let out = ring_ready(&[Some(1.0)], 0.01, 30.0).unwrap();
        assert!(out.ready_at >= 1.0);
        assert!(out.ready_at <= 1.0 + 2.0 * 0.02 + 1.0); // few passes of slack
        assert!(out.token.ready_flags.iter().all(|&f| f));
    }

    #[test]
    fn staggered_nodes_converge_within_two_passes_of_the_slowest() {
        let durations: Vec<Option<f64>> = (1..=6).map(|d| Some(d as f64)).collect();
        let hop = 0.01;
        let out = ring_ready(&durations, hop, 30.0).unwrap();
        assert!(out.ready_at >= 6.0, "cannot precede the slowest configure");
        // within two full ring passes of the slowest node finishing
        assert!(out.ready_at <= 6.0 + 2.0 * 7.0 * hop);
    }

    #[test]
    fn unresponsive_node_fails_startup_by_name() {
        let mut durations: Vec<Option<f64>> = (1..=6).map(|d| Some(d as f64)).collect();
        durations[3] = None;
        let err = ring_ready(&durations, 0.01, 30.0).unwrap_err();
        match err {
            ServiceError::StartupFailure { node, .. } => assert_eq!(node, 3),
            other => panic!("expected StartupFailure, got {other}"),
        }
    }

    #[test]
    fn flags_are_monotone_across_passes() {
        // a fast and a slow node force multiple passes
        let out = ring_ready(&[Some(0.0), Some(5.0)], 0.5, 30.0).unwrap();
        assert!(out.passes > 1);
        assert!(out.token.ready_flags.iter().all(|&f| f));
    }
}
