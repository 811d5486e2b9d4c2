//! Discrete-event simulator driving micro-batches through the planned
//! pipeline over the credit-flow fabric.
//!
//! Each micro-batch pass (one prefill, then one per generated token) flows
//! as a tensor through every stage in order. Stage compute is serialized per
//! stage resource, transfers respect the fabric's credit discipline, and
//! token `k+1` of a micro-batch enters stage 0 only after token `k` exits
//! the last stage and returns to the host. Time is virtual; runs are
//! deterministic for fixed inputs and seed.

use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{
    CircuitId, Endpoint, Fabric, Packet, PacketKind, ProtocolEvent, SendOutcome, TensorId,
};
use crate::hardware::HardwareSpec;
use crate::metrics::SequenceRecord;
use crate::planner::{CardId, Deployment, MicroBatchPolicy, NodeId, Parallelism};
use crate::scalar::Scalar;

/// Calibratable stage and hop timings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TimingModel<S: Scalar> {
    /// Seconds one stage spends on one micro-batch during decode.
    pub decode_stage_seconds: S,
    /// Seconds per prompt token one stage spends during prefill.
    pub prefill_stage_seconds_per_token: S,
    pub intra_node_hop: S,
    pub inter_node_hop: S,
}

impl<S: Scalar> TimingModel<S> {
    pub fn validate(&self) -> Result<()> {
        if self.decode_stage_seconds <= S::zero() {
            return Err(Error::DegenerateTiming(
                "decode_stage_seconds must be > 0".into(),
            ));
        }
        if self.prefill_stage_seconds_per_token <= S::zero() {
            return Err(Error::DegenerateTiming(
                "prefill_stage_seconds_per_token must be > 0".into(),
            ));
        }
        if self.intra_node_hop < S::zero() || self.inter_node_hop < S::zero() {
            return Err(Error::DegenerateTiming("hop latencies must be >= 0".into()));
        }
        Ok(())
    }

    fn hop(&self, a: NodeId, b: NodeId) -> S {
        if a == b {
            self.intra_node_hop
        } else {
            self.inter_node_hop
        }
    }
}

/// Per-pass workload of one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub num_users: u64,
    pub context_len: u64,
    pub prefill_len: u64,
    pub decode_len: u64,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.prefill_len == 0 || self.decode_len == 0 {
            return Err(Error::invalid(
                "workload",
                "num_users, prefill_len, and decode_len must be >= 1",
            ));
        }
        if self.prefill_len + self.decode_len > self.context_len {
            return Err(Error::invalid(
                "workload",
                format!(
                    "prefill_len {} + decode_len {} exceeds context_len {}",
                    self.prefill_len, self.decode_len, self.context_len
                ),
            ));
        }
        Ok(())
    }
}

/// Total hop latency around one pipeline pass: host to entry, every stage
/// transition, and exit back to the host. The host lives on node 0.
pub fn pipeline_hop_seconds<S: Scalar>(deployment: &Deployment, intra: S, inter: S) -> S {
    let host = NodeId(0);
    let timing = TimingModel {
        decode_stage_seconds: S::one(),
        prefill_stage_seconds_per_token: S::one(),
        intra_node_hop: intra,
        inter_node_hop: inter,
    };
    let stages = &deployment.plan.stages;
    let group_nodes = |cards: &[CardId]| -> Vec<NodeId> {
        cards.iter().map(|&c| deployment.node_of(c)).collect()
    };
    let worst = |from: &[NodeId], to: &[NodeId]| -> S {
        let mut w = S::zero();
        for &a in from {
            for &b in to {
                w = w.max(timing.hop(a, b));
            }
        }
        w
    };
    let mut total = worst(&[host], &group_nodes(&stages[0].card_ids));
    for w in stages.windows(2) {
        total = total + worst(&group_nodes(&w[0].card_ids), &group_nodes(&w[1].card_ids));
    }
    total = total + worst(&group_nodes(&stages[stages.len() - 1].card_ids), &[host]);
    total
}

/// Solves the per-stage decode time that reproduces `target_itl` on this
/// deployment: `(target - hop total) / stage_count`. The prefill rate is
/// left at a placeholder and set by [`prefill_calibrate`].
pub fn calibrate<S: Scalar>(
    deployment: &Deployment,
    target_itl: S,
    intra_node_hop: S,
    inter_node_hop: S,
) -> Result<TimingModel<S>> {
    let hops = pipeline_hop_seconds(deployment, intra_node_hop, inter_node_hop);
    if target_itl <= hops {
        return Err(Error::Calibration {
            target_seconds: target_itl.as_f64(),
            hop_seconds: hops.as_f64(),
        });
    }
    let stages = S::from_count(deployment.plan.stage_count as u64);
    Ok(TimingModel {
        decode_stage_seconds: (target_itl - hops) / stages,
        prefill_stage_seconds_per_token: S::from_config(1e-9),
        intra_node_hop,
        inter_node_hop,
    })
}

/// Solves the per-token prefill rate that reproduces `target_ttft` for the
/// given prompt length: `(target - hop total) / (stage_count * prompt_len)`.
/// Prefill is linear in prompt length, so the rate is per context length.
pub fn prefill_calibrate<S: Scalar>(
    deployment: &Deployment,
    target_ttft: S,
    prompt_len: u64,
    intra_node_hop: S,
    inter_node_hop: S,
) -> Result<S> {
    if prompt_len == 0 {
        return Err(Error::invalid("calibration", "prompt_len must be >= 1"));
    }
    let hops = pipeline_hop_seconds(deployment, intra_node_hop, inter_node_hop);
    if target_ttft <= hops {
        return Err(Error::Calibration {
            target_seconds: target_ttft.as_f64(),
            hop_seconds: hops.as_f64(),
        });
    }
    let stages = S::from_count(deployment.plan.stage_count as u64);
    Ok((target_ttft - hops) / (stages * S::from_count(prompt_len)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StageStart,
    StageEnd,
    Hop,
    TokenEmitted,
    PrefillDone,
    Idle,
}

/// One timestamped simulation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Event<S: Scalar> {
    pub time: S,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user: Option<u64>,
}

/// How much event detail a run records. Lifecycle always includes per-user
/// prefill-begin, prefill-done, and token events; Full adds stage, hop, and
/// idle events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    #[default]
    Lifecycle,
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    pub trace_level: TraceLevel,
    /// Record the fabric protocol event log alongside the trace.
    pub record_protocol: bool,
}

/// A fabric protocol event stamped with virtual time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TimedProtocolEvent<S: Scalar> {
    pub time: S,
    #[serde(flatten)]
    pub event: ProtocolEvent,
}

/// Run metadata plus summary figures, written as the trace header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TraceMeta<S: Scalar> {
    pub scenario: Option<String>,
    pub model: String,
    pub plan_hash: String,
    pub seed: u64,
    pub stage_count: usize,
    pub total_cards: u64,
    pub policy: MicroBatchPolicy,
    pub timing: TimingModel<S>,
    pub users: u64,
    pub prefill_len: u64,
    pub decode_len: u64,
    /// 1 - busy/(resources x makespan), over the active window.
    pub idle_fraction: S,
    pub makespan_seconds: S,
    pub virtual_duration_seconds: S,
}

/// Full result of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Trace<S: Scalar> {
    pub meta: TraceMeta<S>,
    pub events: Vec<Event<S>>,
    pub records: Vec<SequenceRecord<S>>,
    pub protocol_events: Vec<TimedProtocolEvent<S>>,
}

impl<S: Scalar> Trace<S> {
    /// Writes the trace as JSON lines: one meta header, then events, then
    /// per-sequence records.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct MetaLine<'a, S: Scalar> {
            meta: &'a TraceMeta<S>,
        }
        #[derive(Serialize)]
        struct EventLine<'a, S: Scalar> {
            event: &'a Event<S>,
        }
        #[derive(Serialize)]
        struct RecordLine<'a, S: Scalar> {
            record: &'a SequenceRecord<S>,
        }
        writeln!(
            w,
            "{}",
            serde_json::to_string(&MetaLine { meta: &self.meta }).expect("meta serializes")
        )?;
        for event in &self.events {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&EventLine { event }).expect("event serializes")
            )?;
        }
        for record in &self.records {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&RecordLine { record }).expect("record serializes")
            )?;
        }
        Ok(())
    }

    /// Reads a trace back from its JSON-lines form.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace<S>> {
        #[derive(Deserialize)]
        #[serde(bound = "S: Scalar")]
        enum Line<S: Scalar> {
            #[serde(rename = "meta")]
            Meta(TraceMeta<S>),
            #[serde(rename = "event")]
            Event(Event<S>),
            #[serde(rename = "record")]
            Record(SequenceRecord<S>),
        }
        let mut meta = None;
        let mut events = Vec::new();
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line<S> = serde_json::from_str(&line)
                .map_err(|e| Error::config(format!("trace line {}", i + 1), e.to_string()))?;
            match parsed {
                Line::Meta(m) => meta = Some(m),
                Line::Event(e) => events.push(e),
                Line::Record(rec) => records.push(rec),
            }
        }
        Ok(Trace {
            meta: meta.ok_or_else(|| Error::config("trace", "missing meta header line"))?,
            events,
            records,
            protocol_events: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PassKind {
    Prefill,
    Decode,
}

#[derive(Debug, Clone)]
enum Payload {
    Arrive(Packet),
    StageDone { resource: usize, tensor: TensorId },
}

struct HeapItem<S: Scalar> {
    time: S,
    seq: u64,
    payload: Payload,
}

impl<S: Scalar> PartialEq for HeapItem<S> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl<S: Scalar> Eq for HeapItem<S> {}
impl<S: Scalar> PartialOrd for HeapItem<S> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Scalar> Ord for HeapItem<S> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on (time, seq); times are always finite
        other
            .time
            .partial_cmp(&self.time)
            .expect("finite event times")
            .then(other.seq.cmp(&self.seq))
    }
}

struct TensorRt {
    mb: usize,
    circuit: CircuitId,
    kind: PassKind,
}

struct MbRt {
    users: Vec<u64>,
    circuit: CircuitId,
    prefill_len: u64,
    decode_len: u64,
    tokens_done: u64,
    done: bool,
}

struct ResourceRt<S: Scalar> {
    stage: usize,
    busy_until: Option<(TensorId, S)>,
    ready: VecDeque<TensorId>,
    busy_seconds: S,
    last_end: Option<S>,
}

struct UserRt<S: Scalar> {
    n_in: u64,
    n_out: u64,
    t_start: Option<S>,
    token_times: Vec<S>,
}

/// A session event surfaced to the caller as simulation progresses.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent<S: Scalar> {
    /// Token `index` (1-based) of `user` arrived at the host.
    Token {
        user: u64,
        micro_batch: u64,
        index: u64,
        time: S,
    },
    /// A sequence finished; its completed timing record.
    SequenceDone { record: SequenceRecord<S> },
}

/// Specification of one admitted sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceSpec {
    pub prefill_len: u64,
    pub decode_len: u64,
}

/// An incremental simulation: sequences are admitted (dynamic batching
/// happens at event boundaries, when capacity frees), and events stream out
/// via [`LiveSession::step`]. One instance is a single-threaded event loop.
pub struct LiveSession<S: Scalar> {
    deployment: Deployment,
    timing: TimingModel<S>,
    policy: MicroBatchPolicy,
    capacity: u64,
    opts: SimOptions,
    seed: u64,

    fabric: Fabric,
    now: S,
    seq: u64,
    heap: BinaryHeap<HeapItem<S>>,
    out: VecDeque<SessionEvent<S>>,

    stage_of_card: Vec<usize>,
    /// resource index per (circuit, stage)
    resource_of: Vec<Vec<usize>>,
    /// expected shard arrivals per (circuit, stage); last entry is host exit
    expected: Vec<Vec<u32>>,
    resources: Vec<ResourceRt<S>>,

    tensors: BTreeMap<TensorId, TensorRt>,
    arrivals: BTreeMap<TensorId, u32>,
    host_arrivals: BTreeMap<TensorId, u32>,
    next_tensor: u64,

    mbs: Vec<MbRt>,
    users: Vec<UserRt<S>>,
    pending: VecDeque<(Vec<u64>, SequenceSpec, CircuitId)>,
    active_users: u64,

    events: Vec<Event<S>>,
    protocol_events: Vec<TimedProtocolEvent<S>>,
    first_activity: Option<S>,
    last_activity: S,
}

impl<S: Scalar> LiveSession<S> {
    pub fn new(
        deployment: &Deployment,
        hw: &HardwareSpec,
        policy: MicroBatchPolicy,
        timing: TimingModel<S>,
        capacity: u64,
        seed: u64,
        opts: SimOptions,
    ) -> Result<Self> {
        timing.validate()?;
        if capacity == 0 {
            return Err(Error::Capacity {
                requested: 1,
                capacity: 0,
            });
        }
        // embedding-sized activations travel between stages
        let mut fabric = Fabric::build(&deployment.plan, hw, 1 << 16)?;
        if opts.record_protocol {
            fabric.enable_recording();
        }

        let mut stage_of_card = vec![usize::MAX; deployment.plan.total_cards as usize];
        for stage in &deployment.plan.stages {
            for &c in &stage.card_ids {
                stage_of_card[c.0 as usize] = stage.stage_index;
            }
        }

        let stage_count = deployment.plan.stage_count;
        let mut resources: Vec<ResourceRt<S>> = Vec::new();
        let mut resource_of = Vec::new();
        let mut expected = Vec::new();
        // stages with pipeline-parallel alternatives get one compute
        // resource per card; tensor-parallel groups act as one resource
        let mut stage_resource_base = Vec::with_capacity(stage_count);
        for stage in &deployment.plan.stages {
            let subs = match stage.parallelism {
                Parallelism::Pipeline => stage.card_ids.len(),
                Parallelism::Tensor => 1,
            };
            stage_resource_base.push((resources.len(), subs));
            for _ in 0..subs {
                resources.push(ResourceRt {
                    stage: stage.stage_index,
                    busy_until: None,
                    ready: VecDeque::new(),
                    busy_seconds: S::zero(),
                    last_end: None,
                });
            }
        }
        for circuit in fabric.circuits() {
            let mut per_stage_resource = Vec::with_capacity(stage_count);
            let mut per_stage_expected = Vec::with_capacity(stage_count + 1);
            let mut prev_len = 1u32; // host
            for (stage_idx, hop) in circuit.hops.iter().enumerate() {
                let group_len = hop.from.len() as u32;
                let (base, subs) = stage_resource_base[stage_idx];
                let sub = if subs > 1 {
                    (circuit.circuit_id as usize) % subs
                } else {
                    0
                };
                per_stage_resource.push(base + sub);
                per_stage_expected.push(prev_len * group_len);
                prev_len = group_len;
            }
            per_stage_expected.push(prev_len); // host exit shards
            resource_of.push(per_stage_resource);
            expected.push(per_stage_expected);
        }

        Ok(Self {
            deployment: deployment.clone(),
            timing,
            policy,
            capacity,
            opts,
            seed,
            fabric,
            now: S::zero(),
            seq: 0,
            heap: BinaryHeap::new(),
            out: VecDeque::new(),
            stage_of_card,
            resource_of,
            expected,
            resources,
            tensors: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            host_arrivals: BTreeMap::new(),
            next_tensor: 0,
            mbs: Vec::new(),
            users: Vec::new(),
            pending: VecDeque::new(),
            active_users: 0,
            events: Vec::new(),
            protocol_events: Vec::new(),
            first_activity: None,
            last_activity: S::zero(),
        })
    }

    pub fn now(&self) -> S {
        self.now
    }

    pub fn active_users(&self) -> u64 {
        self.active_users
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn plan_hash(&self) -> String {
        self.deployment.plan.content_hash()
    }

    /// Admits one sequence as its own micro-batch on `circuit` (dynamic
    /// batching). Returns the user id; injection happens as soon as a
    /// capacity slot is free, at the current event boundary.
    pub fn admit(&mut self, spec: SequenceSpec, circuit: Option<CircuitId>) -> Result<u64> {
        let user = self.new_user(spec);
        self.queue_micro_batch(vec![user], spec, circuit.unwrap_or(0))?;
        Ok(user)
    }

    /// Admits a group of users as one micro-batch (static batching).
    pub fn admit_group(&mut self, count: u64, spec: SequenceSpec) -> Result<Vec<u64>> {
        let users: Vec<u64> = (0..count).map(|_| self.new_user(spec)).collect();
        self.queue_micro_batch(users.clone(), spec, 0)?;
        Ok(users)
    }

    fn new_user(&mut self, spec: SequenceSpec) -> u64 {
        let id = self.users.len() as u64;
        self.users.push(UserRt {
            n_in: spec.prefill_len,
            n_out: spec.decode_len,
            t_start: None,
            token_times: Vec::new(),
        });
        id
    }

    fn queue_micro_batch(
        &mut self,
        users: Vec<u64>,
        spec: SequenceSpec,
        circuit: CircuitId,
    ) -> Result<()> {
        if spec.prefill_len == 0 || spec.decode_len == 0 {
            return Err(Error::invalid(
                "sequence",
                "prefill_len and decode_len must be >= 1",
            ));
        }
        if circuit as usize >= self.fabric.circuits().len() {
            return Err(Error::UnknownCircuit(circuit));
        }
        self.pending.push_back((users, spec, circuit));
        self.pump_admissions()?;
        Ok(())
    }

    fn pump_admissions(&mut self) -> Result<()> {
        while let Some((users, _, _)) = self.pending.front() {
            if self.active_users + users.len() as u64 > self.capacity {
                break;
            }
            let (users, spec, circuit) = self.pending.pop_front().expect("peeked");
            self.active_users += users.len() as u64;
            let mb = self.mbs.len();
            self.mbs.push(MbRt {
                users,
                circuit,
                prefill_len: spec.prefill_len,
                decode_len: spec.decode_len,
                tokens_done: 0,
                done: false,
            });
            self.inject_pass(mb, PassKind::Prefill)?;
        }
        Ok(())
    }

    fn inject_pass(&mut self, mb: usize, kind: PassKind) -> Result<()> {
        let tensor = TensorId(self.next_tensor);
        self.next_tensor += 1;
        let circuit = self.mbs[mb].circuit;
        self.tensors.insert(tensor, TensorRt { mb, circuit, kind });
        self.fabric.select_circuit(circuit)?;
        match self.fabric.inject(tensor)? {
            SendOutcome::Sent(packets) => self.schedule_packets(packets),
            SendOutcome::Held => {}
        }
        self.drain_protocol_log();
        Ok(())
    }

    fn node_of_endpoint(&self, e: Endpoint) -> NodeId {
        match e {
            Endpoint::Host => NodeId(0),
            Endpoint::Card(c) => self.deployment.node_of(c),
        }
    }

    fn schedule_packets(&mut self, packets: Vec<Packet>) {
        for p in packets {
            let latency = self
                .timing
                .hop(self.node_of_endpoint(p.source), self.node_of_endpoint(p.destination));
            if self.opts.trace_level == TraceLevel::Full && p.kind == PacketKind::Output {
                let stage = match p.destination {
                    Endpoint::Card(c) => Some(self.stage_of_card[c.0 as usize]),
                    Endpoint::Host => None,
                };
                let rt = self.tensors.get(&p.tensor);
                self.events.push(Event {
                    time: self.now,
                    kind: EventKind::Hop,
                    stage,
                    micro_batch: rt.map(|t| t.mb as u64),
                    user: None,
                });
            }
            let time = self.now + latency;
            self.push_heap(time, Payload::Arrive(p));
        }
    }

    fn push_heap(&mut self, time: S, payload: Payload) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(HeapItem { time, seq, payload });
    }

    fn drain_protocol_log(&mut self) {
        if self.opts.record_protocol {
            let now = self.now;
            for event in self.fabric.take_events() {
                self.protocol_events.push(TimedProtocolEvent { time: now, event });
            }
        }
    }

    /// Runs the event loop until the next session-visible event. `None`
    /// means the session is idle: nothing queued, nothing in flight.
    pub fn step(&mut self) -> Result<Option<SessionEvent<S>>> {
        // continuous protocol auditing, amortized over event batches
        const CONSERVATION_INTERVAL: u64 = if cfg!(debug_assertions) { 256 } else { 8192 };
        loop {
            if let Some(ev) = self.out.pop_front() {
                return Ok(Some(ev));
            }
            let Some(item) = self.heap.pop() else {
                return Ok(None);
            };
            debug_assert!(item.time >= self.now, "event times are non-decreasing");
            self.now = item.time;
            match item.payload {
                Payload::Arrive(packet) => self.on_arrive(packet)?,
                Payload::StageDone { resource, tensor } => self.on_stage_done(resource, tensor)?,
            }
            if self.seq % CONSERVATION_INTERVAL == 0 {
                self.fabric.check_conservation()?;
            }
        }
    }

    fn on_arrive(&mut self, packet: Packet) -> Result<()> {
        let effect = self.fabric.deliver(&packet)?;
        self.drain_protocol_log();
        for released in effect.released {
            if let Endpoint::Card(c) = released.source {
                let credits = self.fabric.consume_and_credit(c, released.tensor)?;
                self.drain_protocol_log();
                self.schedule_packets(credits);
            }
            self.schedule_packets(released.packets);
        }
        if packet.kind != PacketKind::Output {
            return Ok(());
        }
        match packet.destination {
            Endpoint::Host => {
                let count = self.host_arrivals.entry(packet.tensor).or_insert(0);
                *count += 1;
                let circuit = self.tensors[&packet.tensor].circuit as usize;
                let exit_shards = *self.expected[circuit].last().expect("exit entry");
                if *count == exit_shards {
                    self.host_arrivals.remove(&packet.tensor);
                    self.on_token_exit(packet.tensor)?;
                }
            }
            Endpoint::Card(card) => {
                let stage = self.stage_of_card[card.0 as usize];
                let count = self.arrivals.entry(packet.tensor).or_insert(0);
                *count += 1;
                let circuit = self.tensors[&packet.tensor].circuit as usize;
                if *count == self.expected[circuit][stage] {
                    self.arrivals.remove(&packet.tensor);
                    let resource = self.resource_of[circuit][stage];
                    self.resources[resource].ready.push_back(packet.tensor);
                    self.try_start(resource)?;
                }
            }
        }
        Ok(())
    }

    fn pass_duration(&self, tensor: TensorId) -> S {
        let rt = &self.tensors[&tensor];
        match rt.kind {
            PassKind::Prefill => {
                self.timing.prefill_stage_seconds_per_token
                    * S::from_count(self.mbs[rt.mb].prefill_len)
            }
            PassKind::Decode => self.timing.decode_stage_seconds,
        }
    }

    fn try_start(&mut self, resource: usize) -> Result<()> {
        if self.resources[resource].busy_until.is_some() {
            return Ok(());
        }
        let Some(tensor) = self.resources[resource].ready.pop_front() else {
            return Ok(());
        };
        let duration = self.pass_duration(tensor);
        let stage = self.resources[resource].stage;
        let rt = &self.tensors[&tensor];
        let mb = rt.mb;
        let kind = rt.kind;

        if self.first_activity.is_none() {
            self.first_activity = Some(self.now);
        }
        if self.opts.trace_level == TraceLevel::Full {
            if let Some(last_end) = self.resources[resource].last_end {
                if self.now > last_end {
                    self.events.push(Event {
                        time: last_end,
                        kind: EventKind::Idle,
                        stage: Some(stage),
                        micro_batch: None,
                        user: None,
                    });
                }
            }
        }
        // prefill entering stage 0 marks where each member's prompt
        // processing begins
        if kind == PassKind::Prefill && stage == 0 {
            let users = self.mbs[mb].users.clone();
            for user in users {
                self.users[user as usize].t_start = Some(self.now);
                self.events.push(Event {
                    time: self.now,
                    kind: EventKind::StageStart,
                    stage: Some(0),
                    micro_batch: Some(mb as u64),
                    user: Some(user),
                });
            }
        } else if self.opts.trace_level == TraceLevel::Full {
            self.events.push(Event {
                time: self.now,
                kind: EventKind::StageStart,
                stage: Some(stage),
                micro_batch: Some(mb as u64),
                user: None,
            });
        }

        let until = self.now + duration;
        let res = &mut self.resources[resource];
        res.busy_until = Some((tensor, until));
        res.busy_seconds = res.busy_seconds + duration;
        self.push_heap(until, Payload::StageDone { resource, tensor });
        Ok(())
    }

    fn on_stage_done(&mut self, resource: usize, tensor: TensorId) -> Result<()> {
        let stage = self.resources[resource].stage;
        {
            let res = &mut self.resources[resource];
            debug_assert!(matches!(res.busy_until, Some((t, _)) if t == tensor));
            res.busy_until = None;
            res.last_end = Some(self.now);
        }
        self.last_activity = self.now;
        if self.opts.trace_level == TraceLevel::Full {
            let mb = self.tensors[&tensor].mb as u64;
            self.events.push(Event {
                time: self.now,
                kind: EventKind::StageEnd,
                stage: Some(stage),
                micro_batch: Some(mb),
                user: None,
            });
        }

        // forward the produced output from every card of this stage group;
        // a successful send consumes the input slots and credits upstream
        let circuit_id = self.tensors[&tensor].circuit;
        let group: Vec<CardId> = self.fabric.circuits()[circuit_id as usize].hops[stage]
            .from
            .clone();
        for card in group {
            match self.fabric.try_send(card, circuit_id, tensor)? {
                SendOutcome::Sent(packets) => {
                    let credits = self.fabric.consume_and_credit(card, tensor)?;
                    self.drain_protocol_log();
                    self.schedule_packets(credits);
                    self.schedule_packets(packets);
                }
                SendOutcome::Held => {
                    self.drain_protocol_log();
                }
            }
        }
        self.try_start(resource)
    }

    fn on_token_exit(&mut self, tensor: TensorId) -> Result<()> {
        let rt = self.tensors.remove(&tensor).expect("tensor registered");
        let mb_idx = rt.mb;
        let (token_index, users) = {
            let mb = &mut self.mbs[mb_idx];
            mb.tokens_done += 1;
            (mb.tokens_done, mb.users.clone())
        };
        for &user in &users {
            self.users[user as usize].token_times.push(self.now);
            if token_index == 1 {
                self.events.push(Event {
                    time: self.now,
                    kind: EventKind::PrefillDone,
                    stage: None,
                    micro_batch: Some(mb_idx as u64),
                    user: Some(user),
                });
            }
            self.events.push(Event {
                time: self.now,
                kind: EventKind::TokenEmitted,
                stage: None,
                micro_batch: Some(mb_idx as u64),
                user: Some(user),
            });
            self.out.push_back(SessionEvent::Token {
                user,
                micro_batch: mb_idx as u64,
                index: token_index,
                time: self.now,
            });
        }
        if token_index < self.mbs[mb_idx].decode_len {
            self.inject_pass(mb_idx, PassKind::Decode)?;
        } else {
            self.mbs[mb_idx].done = true;
            self.active_users -= users.len() as u64;
            for &user in &users {
                let record = self.finish_record(user)?;
                self.out.push_back(SessionEvent::SequenceDone { record });
            }
            self.pump_admissions()?;
        }
        Ok(())
    }

    fn finish_record(&self, user: u64) -> Result<SequenceRecord<S>> {
        let u = &self.users[user as usize];
        let record = SequenceRecord {
            user_id: user,
            n_in: u.n_in,
            n_out: u.n_out,
            t_start: u.t_start.expect("sequence started"),
            t_first: *u.token_times.first().expect("tokens emitted"),
            t_end: *u.token_times.last().expect("tokens emitted"),
            token_times: u.token_times.clone(),
        };
        record.validate()?;
        Ok(record)
    }

    /// Measured idle fraction over the active window.
    pub fn idle_fraction(&self) -> S {
        let (Some(first), last) = (self.first_activity, self.last_activity) else {
            return S::zero();
        };
        let makespan = last - first;
        if makespan <= S::zero() {
            return S::zero();
        }
        let busy: S = self
            .resources
            .iter()
            .fold(S::zero(), |acc, r| acc + r.busy_seconds);
        S::one() - busy / (S::from_count(self.resources.len() as u64) * makespan)
    }

    /// Finalizes the run into a [`Trace`]. All admitted sequences must have
    /// completed and the fabric must be quiescent.
    pub fn finish(mut self, scenario: Option<String>) -> Result<Trace<S>> {
        if self.mbs.iter().any(|mb| !mb.done) || !self.pending.is_empty() {
            return Err(Error::invalid(
                "session",
                "finish called with incomplete sequences",
            ));
        }
        self.fabric.check_conservation()?;
        if !self.fabric.quiescent() {
            return Err(Error::Protocol(
                "session finished with tensors still staged or in flight".into(),
            ));
        }
        let records: Vec<SequenceRecord<S>> = (0..self.users.len())
            .map(|u| self.finish_record(u as u64))
            .collect::<Result<_>>()?;
        let makespan = match self.first_activity {
            Some(first) => self.last_activity - first,
            None => S::zero(),
        };
        let meta = TraceMeta {
            scenario,
            model: self.deployment.plan.model_name.clone(),
            plan_hash: self.deployment.plan.content_hash(),
            seed: self.seed,
            stage_count: self.deployment.plan.stage_count,
            total_cards: self.deployment.plan.total_cards,
            policy: self.policy,
            timing: self.timing,
            users: self.users.len() as u64,
            prefill_len: records.first().map(|r| r.n_in).unwrap_or(0),
            decode_len: records.first().map(|r| r.n_out).unwrap_or(0),
            idle_fraction: self.idle_fraction(),
            makespan_seconds: makespan,
            virtual_duration_seconds: self.now,
        };
        self.events.sort_by(|a, b| {
            a.time
                .partial_cmp(&b.time)
                .expect("finite event times")
                .then(std::cmp::Ordering::Equal)
        });
        Ok(Trace {
            meta,
            events: self.events,
            records,
            protocol_events: self.protocol_events,
        })
    }
}

/// Runs a full static-batch simulation: `workload.num_users` sequences are
/// split into micro-batches per `policy`, admitted at time zero, and run to
/// completion.
pub fn simulate<S: Scalar>(
    deployment: &Deployment,
    hw: &HardwareSpec,
    policy: MicroBatchPolicy,
    timing: TimingModel<S>,
    workload: Workload,
    seed: u64,
    user_capacity: u64,
) -> Result<Trace<S>> {
    simulate_with(
        deployment,
        hw,
        policy,
        timing,
        workload,
        seed,
        user_capacity,
        SimOptions::default(),
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_with<S: Scalar>(
    deployment: &Deployment,
    hw: &HardwareSpec,
    policy: MicroBatchPolicy,
    timing: TimingModel<S>,
    workload: Workload,
    seed: u64,
    user_capacity: u64,
    opts: SimOptions,
    scenario: Option<String>,
) -> Result<Trace<S>> {
    workload.validate()?;
    if workload.num_users > user_capacity {
        return Err(Error::Capacity {
            requested: workload.num_users,
            capacity: user_capacity,
        });
    }
    if policy.micro_batch_size == 0
        || policy.micro_batch_size * policy.num_micro_batches < workload.num_users
    {
        return Err(Error::invalid(
            "policy",
            "micro_batch_size x num_micro_batches must cover the mini-batch",
        ));
    }
    let mut session = LiveSession::new(
        deployment,
        hw,
        policy,
        timing,
        user_capacity,
        seed,
        opts,
    )?;
    let spec = SequenceSpec {
        prefill_len: workload.prefill_len,
        decode_len: workload.decode_len,
    };
    let mut remaining = workload.num_users;
    while remaining > 0 {
        let size = remaining.min(policy.micro_batch_size);
        session.admit_group(size, spec)?;
        remaining -= size;
    }
    while session.step()?.is_some() {}
    session.finish(scenario)
}

#[cfg(test)]
mod tests;
