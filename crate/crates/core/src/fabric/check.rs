//! Protocol verification for the credit-flow fabric.
//!
//! [`verify_chain`] exhaustively enumerates every interleaving of injects,
//! deliveries, and compute-forward steps on a small card chain, proving the
//! absence of framebuffer overflow and deadlock. [`randomized_run`] drives
//! long random schedules on larger configurations, checking per-edge credit
//! conservation after every event. Both walk the same [`Fabric`]
//! implementation the simulator uses; interleavings are explored by explicit
//! state enumeration, not by threads.
//!
//! Cards compute their staged tensors in framebuffer arrival order, exactly
//! as the simulator schedules them; injection, transfer, and credit-return
//! timing interleave freely.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Endpoint, Fabric, Packet, PacketKind, ReleasedSend, SendOutcome, TensorId};
use crate::error::{Error, Result};
use crate::planner::CardId;

/// A linear chain configuration under verification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChainConfig {
    pub cards: u32,
    pub slots: u32,
    pub tensors: u64,
}

/// Outcome of exhaustive enumeration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: ChainConfig,
    /// Distinct protocol states reached.
    pub states: u64,
    /// Terminal states, all of which completed every tensor.
    pub terminal_states: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Inject,
    Deliver(Endpoint, Endpoint, u8),
    Forward(CardId, TensorId),
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Inject => write!(f, "inject"),
            Action::Deliver(s, d, k) => {
                let kind = if *k == 0 { "output" } else { "credit" };
                write!(f, "deliver {kind} {s} -> {d}")
            }
            Action::Forward(c, t) => write!(f, "forward tensor {} at {c}", t.0),
        }
    }
}

type NetKey = (Endpoint, Endpoint, u8);

const KIND_OUTPUT: u8 = 0;
const KIND_CREDIT: u8 = 1;

fn net_key(p: &Packet) -> NetKey {
    let k = match p.kind {
        PacketKind::Output => KIND_OUTPUT,
        PacketKind::Credit => KIND_CREDIT,
        PacketKind::Input => unreachable!("input packets are not transported"),
    };
    (p.source, p.destination, k)
}

/// Fabric plus the packets currently traveling between endpoints. Each
/// (source, destination, kind) lane delivers in FIFO order, matching
/// descriptor-chain DMA ordering.
#[derive(Clone)]
struct ProtocolState {
    fabric: Fabric,
    net: BTreeMap<NetKey, VecDeque<Packet>>,
    injected: u64,
    completed: u64,
    budget: u64,
}

impl ProtocolState {
    fn new(fabric: Fabric, budget: u64) -> Self {
        Self {
            fabric,
            net: BTreeMap::new(),
            injected: 0,
            completed: 0,
            budget,
        }
    }

    fn key(&self) -> Vec<u8> {
        let mut key = self.fabric.state_key();
        key.push(0xAA);
        key.extend_from_slice(&self.injected.to_le_bytes());
        key.extend_from_slice(&self.completed.to_le_bytes());
        for ((s, d, k), q) in &self.net {
            key.push(match s {
                Endpoint::Host => 0xFF,
                Endpoint::Card(c) => c.0 as u8,
            });
            key.push(match d {
                Endpoint::Host => 0xFF,
                Endpoint::Card(c) => c.0 as u8,
            });
            key.push(*k);
            key.push(q.len() as u8);
            for p in q {
                key.extend_from_slice(&(p.tensor.0 as u32).to_le_bytes());
            }
        }
        key
    }

    fn enabled(&self) -> Vec<Action> {
        let mut actions = Vec::new();
        if self.injected < self.budget {
            actions.push(Action::Inject);
        }
        for (&(s, d, k), q) in &self.net {
            if !q.is_empty() {
                actions.push(Action::Deliver(s, d, k));
            }
        }
        for card in 0..self.fabric.card_count() {
            let card = CardId(card);
            if let Some((_, tensor)) = self.fabric.oldest_stageable(card) {
                actions.push(Action::Forward(card, tensor));
            }
        }
        actions
    }

    fn push_packets(&mut self, packets: Vec<Packet>) {
        for p in packets {
            self.net.entry(net_key(&p)).or_default().push_back(p);
        }
    }

    fn handle_released(&mut self, released: Vec<ReleasedSend>) -> Result<()> {
        for r in released {
            self.push_packets(r.packets);
            if let Endpoint::Card(c) = r.source {
                let credits = self.fabric.consume_and_credit(c, r.tensor)?;
                self.push_packets(credits);
            }
        }
        Ok(())
    }

    fn apply(&mut self, action: &Action) -> Result<()> {
        match action {
            Action::Inject => {
                let t = TensorId(self.injected);
                self.injected += 1;
                if let SendOutcome::Sent(ps) = self.fabric.inject(t)? {
                    self.push_packets(ps);
                }
            }
            Action::Deliver(s, d, k) => {
                let lane = (*s, *d, *k);
                let packet = {
                    let q = self
                        .net
                        .get_mut(&lane)
                        .ok_or_else(|| Error::Protocol("empty delivery lane".into()))?;
                    let p = q.pop_front().expect("enabled lane is non-empty");
                    if q.is_empty() {
                        self.net.remove(&lane);
                    }
                    p
                };
                let effect = self.fabric.deliver(&packet)?;
                if packet.kind == PacketKind::Output && packet.destination == Endpoint::Host {
                    self.completed += 1;
                }
                self.handle_released(effect.released)?;
            }
            Action::Forward(card, tensor) => {
                let circuit = self.fabric.active_circuit();
                if let SendOutcome::Sent(ps) = self.fabric.try_send(*card, circuit, *tensor)? {
                    self.push_packets(ps);
                    let credits = self.fabric.consume_and_credit(*card, *tensor)?;
                    self.push_packets(credits);
                }
            }
        }
        self.fabric.check_conservation()
    }
}

/// Exhaustively explores every interleaving for a chain, proving that no
/// reachable state overflows a framebuffer and that every schedule delivers
/// all tensors (no deadlock). Every action strictly consumes a finite
/// resource, so the reachable graph is a DAG and the search terminates.
///
/// The fast pass keeps no history; if it finds a violation, a second pass
/// rebuilds the counterexample path (exploration is deterministic).
pub fn verify_chain(config: ChainConfig) -> Result<VerificationReport> {
    if config.cards == 0 || config.slots == 0 {
        return Err(Error::invalid("chain", "cards and slots must be >= 1"));
    }
    match explore(config, false) {
        Ok(report) => Ok(report),
        Err(_) => explore(config, true),
    }
}

fn explore(config: ChainConfig, with_trace: bool) -> Result<VerificationReport> {
    let fabric = Fabric::linear_chain(config.cards, config.slots, 64);
    let init = ProtocolState::new(fabric, config.tensors);

    let mut seen: HashMap<Vec<u8>, ()> = HashMap::new();
    let mut parents: HashMap<Vec<u8>, (Vec<u8>, String)> = HashMap::new();
    let mut queue = VecDeque::new();
    seen.insert(init.key(), ());
    queue.push_back(init);
    let mut terminal = 0u64;

    while let Some(state) = queue.pop_front() {
        let actions = state.enabled();
        if actions.is_empty() {
            if state.completed != config.tensors {
                return Err(Error::Verification(format!(
                    "deadlock: {} of {} tensors completed; trace:\n{}",
                    state.completed,
                    config.tensors,
                    trace_to(&parents, &state.key())
                )));
            }
            if !state.fabric.quiescent() {
                return Err(Error::Verification(
                    "terminal state left residue in the fabric".into(),
                ));
            }
            terminal += 1;
            continue;
        }
        let state_key = with_trace.then(|| state.key());
        for action in actions {
            let mut next = state.clone();
            if let Err(e) = next.apply(&action) {
                let trace = state_key
                    .as_ref()
                    .map(|k| trace_to(&parents, k))
                    .unwrap_or_default();
                return Err(Error::Verification(format!(
                    "{e}; after `{action}`; trace:\n{trace}"
                )));
            }
            let key = next.key();
            if seen.insert(key.clone(), ()).is_none() {
                if let Some(state_key) = &state_key {
                    parents.insert(key, (state_key.clone(), action.to_string()));
                }
                queue.push_back(next);
            }
        }
    }

    Ok(VerificationReport {
        config,
        states: seen.len() as u64,
        terminal_states: terminal,
    })
}

fn trace_to(parents: &HashMap<Vec<u8>, (Vec<u8>, String)>, key: &[u8]) -> String {
    let mut steps = Vec::new();
    let mut cur = key.to_vec();
    while let Some((prev, action)) = parents.get(&cur) {
        steps.push(action.clone());
        cur = prev.clone();
    }
    steps.reverse();
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("  {:>3}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Outcome of one randomized schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomizedReport {
    pub cards: u32,
    pub slots: u32,
    pub seed: u64,
    pub events: u64,
    pub tensors_completed: u64,
}

/// Drives a random schedule of `max_events` actions on a chain, checking
/// conservation after every event, then drains and requires the fabric to
/// end quiescent with every injected tensor delivered.
pub fn randomized_run(
    cards: u32,
    slots: u32,
    max_events: u64,
    seed: u64,
) -> Result<RandomizedReport> {
    let fabric = Fabric::linear_chain(cards, slots, 64);
    // keep injections flowing for the whole event budget
    let mut state = ProtocolState::new(fabric, u64::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = 0u64;

    while events < max_events {
        let actions = state.enabled();
        debug_assert!(!actions.is_empty(), "inject is always enabled here");
        let action = &actions[rng.random_range(0..actions.len())];
        state
            .apply(action)
            .map_err(|e| Error::Verification(format!("seed {seed}, event {events}: {e}")))?;
        events += 1;
    }

    // drain: no further injections
    state.budget = state.injected;
    loop {
        let actions = state.enabled();
        if actions.is_empty() {
            break;
        }
        let action = &actions[rng.random_range(0..actions.len())];
        state
            .apply(action)
            .map_err(|e| Error::Verification(format!("seed {seed}, drain: {e}")))?;
        events += 1;
    }

    if state.completed != state.injected {
        return Err(Error::Verification(format!(
            "seed {seed}: {} of {} tensors completed after drain",
            state.completed, state.injected
        )));
    }
    if !state.fabric.quiescent() {
        return Err(Error::Verification(format!(
            "seed {seed}: fabric not quiescent after drain"
        )));
    }
    Ok(RandomizedReport {
        cards,
        slots,
        seed,
        events,
        tensors_completed: state.completed,
    })
}
