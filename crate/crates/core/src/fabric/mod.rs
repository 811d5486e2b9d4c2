//! Software emulation of the card-to-card communication substrate:
//! framebuffer slots, per-edge credit counters, output-to-input packet
//! conversion, precomputed descriptor chains, and switchable virtual
//! circuits.
//!
//! The fabric is untimed protocol state. Callers (the engine, the protocol
//! checker) decide when packets travel; the fabric guarantees the credit
//! discipline: a send consumes one credit per destination, a held send
//! queues FIFO at the source, and consuming a tensor (by forwarding its
//! result downstream or to the host) frees the slot and returns a credit
//! packet upstream.

pub mod check;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::HardwareSpec;
use crate::planner::{CardId, Parallelism, Plan};

/// Bytes of a credit packet on the wire.
pub const CREDIT_PACKET_BYTES: u64 = 16;

pub type CircuitId = u32;

/// Identifies one activation tensor flowing through a circuit.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct TensorId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Host,
    Card(CardId),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Host => f.write_str("host"),
            Endpoint::Card(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PacketKind {
    Output,
    Input,
    Credit,
}

/// A tensor or credit transfer between two endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub kind: PacketKind,
    pub circuit: CircuitId,
    pub tensor: TensorId,
    pub source: Endpoint,
    pub destination: Endpoint,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Output,
    Credit,
}

/// One precomputed transfer descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferDescriptor {
    pub source: Endpoint,
    pub destination: Endpoint,
    pub kind: DescriptorKind,
}

/// Ordered descriptors installed on one card for one circuit. Precomputed
/// before inference, immutable during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorChain {
    pub descriptors: Vec<TransferDescriptor>,
}

/// Where a hop delivers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HopTarget {
    Cards(Vec<CardId>),
    Host,
}

/// One stage-to-stage transfer of a circuit (the final hop exits to host).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitHop {
    pub from: Vec<CardId>,
    pub to: HopTarget,
}

/// A routed execution path: entry cards, ordered hops, output cards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualCircuit {
    pub circuit_id: CircuitId,
    pub entry: Vec<CardId>,
    pub output: Vec<CardId>,
    pub hops: Vec<CircuitHop>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FbEntry {
    tensor: TensorId,
    source: Endpoint,
    circuit: CircuitId,
}

/// One emulated card's mutable protocol state: framebuffer occupancy and
/// FIFO queues of held sends. The card's credit counters live in the fabric
/// edge table; its descriptor store is part of the shared topology (see
/// [`Fabric::descriptor_store`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualCard {
    card_id: CardId,
    capacity: u32,
    framebuffer: Vec<FbEntry>,
    held: BTreeMap<CircuitId, VecDeque<TensorId>>,
}

impl VirtualCard {
    pub fn occupancy(&self) -> usize {
        self.framebuffer.len()
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn holds(&self, tensor: TensorId) -> bool {
        self.framebuffer.iter().any(|e| e.tensor == tensor)
    }
}

/// Immutable per-edge routing data.
#[derive(Debug, PartialEq, Eq)]
struct EdgeMeta {
    circuit: CircuitId,
    source: Endpoint,
    destination: Endpoint,
    /// `None` for host-bound edges, which are never back-pressured.
    capacity: Option<u32>,
}

/// Mutable per-edge counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct EdgeDyn {
    credits: u32,
    in_flight_outputs: u32,
    in_flight_credits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolEventKind {
    Send,
    Hold,
    Deliver,
    Credit,
}

/// One protocol event, emitted when recording is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolEvent {
    pub event: ProtocolEventKind,
    pub circuit: CircuitId,
    pub tensor: TensorId,
    pub source: Endpoint,
    pub destination: Endpoint,
    /// Credit counter of the edge after the event, when it has one.
    pub counter: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SendOutcome {
    /// Packets now in flight; the caller schedules their delivery.
    Sent(Vec<Packet>),
    /// No credit on at least one destination edge; queued FIFO at source.
    Held,
}

/// A held send that a returning credit released.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleasedSend {
    pub source: Endpoint,
    pub tensor: TensorId,
    pub circuit: CircuitId,
    pub packets: Vec<Packet>,
}

/// Effect of delivering a packet.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeliveryEffect {
    /// For output packets landing on a card: the recorded input packet.
    pub converted: Option<Packet>,
    /// Held sends released by a credit delivery. For each entry whose
    /// source is a card, the caller must invoke [`Fabric::consume_and_credit`]
    /// for the released tensor on that card.
    pub released: Vec<ReleasedSend>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CompiledCircuit {
    id: CircuitId,
    entry_edges: Vec<usize>,
    /// Outgoing edge indices per card on this circuit.
    out_edges: BTreeMap<CardId, Vec<usize>>,
}

/// Routing fixed at build time, shared by every clone of a fabric so that
/// protocol-state snapshots stay cheap for the exhaustive checker.
#[derive(Debug, PartialEq)]
struct Topology {
    circuits: Vec<VirtualCircuit>,
    compiled: Vec<CompiledCircuit>,
    edges: Vec<EdgeMeta>,
    edge_index: BTreeMap<(CircuitId, Endpoint, Endpoint), usize>,
    descriptor_stores: Vec<BTreeMap<CircuitId, DescriptorChain>>,
    tensor_bytes: u64,
}

/// The card fabric: all cards, circuits, and credit-tracked edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Fabric {
    topo: Arc<Topology>,
    cards: Vec<VirtualCard>,
    edges: Vec<EdgeDyn>,
    active_circuit: CircuitId,
    host_held: VecDeque<(CircuitId, TensorId)>,
    recorder: Option<Vec<ProtocolEvent>>,
}

impl Fabric {
    /// Builds the fabric for a plan: one virtual circuit per execution path
    /// (dense plans have exactly one; pipeline-parallel expert groups yield
    /// one route per expert card), descriptor chains installed on every
    /// participating card, and credit counters initialized from destination
    /// framebuffer capacity.
    pub fn build(plan: &Plan, hw: &HardwareSpec, tensor_bytes: u64) -> Result<Fabric> {
        if plan.stages.is_empty() {
            return Err(Error::EmptyPlan);
        }
        plan.validate()?;
        hw.validate()?;

        let route_count = plan
            .stages
            .iter()
            .filter(|s| s.parallelism == Parallelism::Pipeline)
            .map(|s| s.card_ids.len())
            .max()
            .unwrap_or(1)
            .max(1);

        let mut routes = Vec::with_capacity(route_count);
        for r in 0..route_count {
            let groups: Vec<Vec<CardId>> = plan
                .stages
                .iter()
                .map(|s| match s.parallelism {
                    Parallelism::Pipeline => vec![s.card_ids[r % s.card_ids.len()]],
                    Parallelism::Tensor => s.card_ids.clone(),
                })
                .collect();
            routes.push(groups);
        }
        Self::from_routes(
            plan.total_cards as u32,
            routes,
            hw.framebuffer_slots,
            tensor_bytes,
        )
    }

    /// A single-circuit chain of `cards` cards with `slots` framebuffer
    /// slots each. Used by the protocol checker and tests.
    pub fn linear_chain(cards: u32, slots: u32, tensor_bytes: u64) -> Fabric {
        let routes = vec![(0..cards).map(|c| vec![CardId(c)]).collect()];
        Self::from_routes(cards, routes, slots, tensor_bytes).expect("chain builds")
    }

    fn from_routes(
        card_count: u32,
        routes: Vec<Vec<Vec<CardId>>>,
        slots: u32,
        tensor_bytes: u64,
    ) -> Result<Fabric> {
        let mut edges: Vec<EdgeMeta> = Vec::new();
        let mut edge_index = BTreeMap::new();
        let mut circuits = Vec::new();
        let mut compiled = Vec::new();

        let add_edge = |edges: &mut Vec<EdgeMeta>,
                        edge_index: &mut BTreeMap<(CircuitId, Endpoint, Endpoint), usize>,
                        circuit: CircuitId,
                        source: Endpoint,
                        destination: Endpoint|
         -> usize {
            let key = (circuit, source, destination);
            *edge_index.entry(key).or_insert_with(|| {
                edges.push(EdgeMeta {
                    circuit,
                    source,
                    destination,
                    capacity: match destination {
                        Endpoint::Host => None,
                        Endpoint::Card(_) => Some(0), // sized below
                    },
                });
                edges.len() - 1
            })
        };

        for (r, groups) in routes.iter().enumerate() {
            let id = r as CircuitId;
            let mut entry_edges = Vec::new();
            let mut out_edges: BTreeMap<CardId, Vec<usize>> = BTreeMap::new();

            for &card in &groups[0] {
                entry_edges.push(add_edge(
                    &mut edges,
                    &mut edge_index,
                    id,
                    Endpoint::Host,
                    Endpoint::Card(card),
                ));
            }
            let mut hops = Vec::new();
            for w in groups.windows(2) {
                let (from, to) = (&w[0], &w[1]);
                for &a in from {
                    for &b in to {
                        let e = add_edge(
                            &mut edges,
                            &mut edge_index,
                            id,
                            Endpoint::Card(a),
                            Endpoint::Card(b),
                        );
                        out_edges.entry(a).or_default().push(e);
                    }
                }
                hops.push(CircuitHop {
                    from: from.clone(),
                    to: HopTarget::Cards(to.clone()),
                });
            }
            let last = groups.last().expect("non-empty route");
            for &a in last {
                let e = add_edge(
                    &mut edges,
                    &mut edge_index,
                    id,
                    Endpoint::Card(a),
                    Endpoint::Host,
                );
                out_edges.entry(a).or_default().push(e);
            }
            hops.push(CircuitHop {
                from: last.clone(),
                to: HopTarget::Host,
            });

            circuits.push(VirtualCircuit {
                circuit_id: id,
                entry: groups[0].clone(),
                output: last.clone(),
                hops,
            });
            compiled.push(CompiledCircuit {
                id,
                entry_edges,
                out_edges,
            });
        }

        // Size credited edges: split each destination's framebuffer slots
        // across every (circuit, source) pair that can target it, so
        // occupancy can never exceed capacity under any interleaving.
        let mut fan_in = vec![0u32; card_count as usize];
        for e in &edges {
            if let Endpoint::Card(c) = e.destination {
                fan_in[c.0 as usize] += 1;
            }
        }
        let mut edge_dyn = vec![EdgeDyn::default(); edges.len()];
        for (meta, dy) in edges.iter_mut().zip(edge_dyn.iter_mut()) {
            if let Endpoint::Card(c) = meta.destination {
                let share = slots / fan_in[c.0 as usize];
                if share == 0 {
                    return Err(Error::invalid(
                        "fabric",
                        format!(
                            "{c} has fan-in {} exceeding its {slots} framebuffer slots",
                            fan_in[c.0 as usize]
                        ),
                    ));
                }
                meta.capacity = Some(share);
                dy.credits = share;
            }
        }

        // Install descriptor chains: outputs in hop order, then credits for
        // every incoming edge.
        let mut descriptor_stores: Vec<BTreeMap<CircuitId, DescriptorChain>> =
            vec![BTreeMap::new(); card_count as usize];
        for comp in &compiled {
            for (card, store) in descriptor_stores.iter_mut().enumerate() {
                let card = CardId(card as u32);
                let mut descriptors = Vec::new();
                if let Some(out) = comp.out_edges.get(&card) {
                    for &e in out {
                        descriptors.push(TransferDescriptor {
                            source: edges[e].source,
                            destination: edges[e].destination,
                            kind: DescriptorKind::Output,
                        });
                    }
                }
                for e in &edges {
                    if e.circuit == comp.id && e.destination == Endpoint::Card(card) {
                        descriptors.push(TransferDescriptor {
                            source: e.destination,
                            destination: e.source,
                            kind: DescriptorKind::Credit,
                        });
                    }
                }
                if !descriptors.is_empty() {
                    store.insert(comp.id, DescriptorChain { descriptors });
                }
            }
        }

        let cards = (0..card_count)
            .map(|c| VirtualCard {
                card_id: CardId(c),
                capacity: slots,
                framebuffer: Vec::new(),
                held: BTreeMap::new(),
            })
            .collect();

        Ok(Fabric {
            topo: Arc::new(Topology {
                circuits,
                compiled,
                edges,
                edge_index,
                descriptor_stores,
                tensor_bytes,
            }),
            cards,
            edges: edge_dyn,
            active_circuit: 0,
            host_held: VecDeque::new(),
            recorder: None,
        })
    }

    pub fn circuits(&self) -> &[VirtualCircuit] {
        &self.topo.circuits
    }

    pub fn card(&self, id: CardId) -> &VirtualCard {
        &self.cards[id.0 as usize]
    }

    pub fn card_count(&self) -> u32 {
        self.cards.len() as u32
    }

    /// The precomputed descriptor chains installed on a card, per circuit.
    pub fn descriptor_store(&self, card: CardId) -> &BTreeMap<CircuitId, DescriptorChain> {
        &self.topo.descriptor_stores[card.0 as usize]
    }

    /// Tensors staged at `card` that have not yet attempted a forward
    /// (tensors in the held queue already did and are waiting on credits).
    pub fn stageable_tensors(&self, card: CardId) -> Vec<(CircuitId, TensorId)> {
        let vc = &self.cards[card.0 as usize];
        let mut out: Vec<(CircuitId, TensorId)> = Vec::new();
        for e in &vc.framebuffer {
            let held = vc
                .held
                .get(&e.circuit)
                .is_some_and(|q| q.contains(&e.tensor));
            if !held && !out.contains(&(e.circuit, e.tensor)) {
                out.push((e.circuit, e.tensor));
            }
        }
        out
    }

    /// The oldest staged tensor at `card` that has not yet attempted a
    /// forward. Cards process framebuffer entries in arrival order.
    pub fn oldest_stageable(&self, card: CardId) -> Option<(CircuitId, TensorId)> {
        self.stageable_tensors(card).into_iter().next()
    }

    pub fn active_circuit(&self) -> CircuitId {
        self.active_circuit
    }

    /// Switches the execution path used by subsequent injections. No card
    /// memory is touched; reselecting the current circuit is a no-op.
    pub fn select_circuit(&mut self, id: CircuitId) -> Result<()> {
        if (id as usize) >= self.topo.circuits.len() {
            return Err(Error::UnknownCircuit(id));
        }
        self.active_circuit = id;
        Ok(())
    }

    pub fn enable_recording(&mut self) {
        self.recorder = Some(Vec::new());
    }

    pub fn take_events(&mut self) -> Vec<ProtocolEvent> {
        match &mut self.recorder {
            Some(events) => std::mem::take(events),
            None => Vec::new(),
        }
    }

    fn record(&mut self, ev: ProtocolEvent) {
        if let Some(rec) = &mut self.recorder {
            rec.push(ev);
        }
    }

    /// Credits currently available on an edge, for inspection.
    pub fn edge_credits(
        &self,
        circuit: CircuitId,
        source: Endpoint,
        destination: Endpoint,
    ) -> Option<u32> {
        self.topo
            .edge_index
            .get(&(circuit, source, destination))
            .map(|&e| self.edges[e].credits)
    }

    /// Output packets currently in flight on an edge.
    pub fn edge_in_flight(
        &self,
        circuit: CircuitId,
        source: Endpoint,
        destination: Endpoint,
    ) -> Option<u32> {
        self.topo
            .edge_index
            .get(&(circuit, source, destination))
            .map(|&e| self.edges[e].in_flight_outputs)
    }

    /// Injects a tensor from the host onto the active circuit's entry cards.
    pub fn inject(&mut self, tensor: TensorId) -> Result<SendOutcome> {
        let circuit = self.active_circuit;
        if !self.host_held.is_empty() {
            // strict FIFO: later injections never overtake held ones
            self.host_held.push_back((circuit, tensor));
            self.record_hold(circuit, tensor, Endpoint::Host);
            return Ok(SendOutcome::Held);
        }
        let edge_ids = self.topo.compiled[circuit as usize].entry_edges.clone();
        self.send_over(circuit, tensor, Endpoint::Host, &edge_ids)
    }

    /// Sends `tensor`, staged on `card`, down `circuit`'s outgoing edges.
    /// All destination edges must have a credit or the send is held.
    pub fn try_send(
        &mut self,
        card: CardId,
        circuit: CircuitId,
        tensor: TensorId,
    ) -> Result<SendOutcome> {
        if (circuit as usize) >= self.topo.compiled.len() {
            return Err(Error::UnknownCircuit(circuit));
        }
        if !self.cards[card.0 as usize].holds(tensor) {
            return Err(Error::Protocol(format!(
                "send of {tensor:?} from {card}: tensor does not occupy a framebuffer slot"
            )));
        }
        let edge_ids = self.topo.compiled[circuit as usize]
            .out_edges
            .get(&card)
            .cloned()
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "{card} has no outgoing descriptors on circuit {circuit}"
                ))
            })?;
        self.send_over(circuit, tensor, Endpoint::Card(card), &edge_ids)
    }

    fn send_over(
        &mut self,
        circuit: CircuitId,
        tensor: TensorId,
        source: Endpoint,
        edge_ids: &[usize],
    ) -> Result<SendOutcome> {
        let blocked = edge_ids
            .iter()
            .any(|&e| self.topo.edges[e].capacity.is_some() && self.edges[e].credits == 0);
        if blocked {
            match source {
                Endpoint::Host => self.host_held.push_back((circuit, tensor)),
                Endpoint::Card(c) => self.cards[c.0 as usize]
                    .held
                    .entry(circuit)
                    .or_default()
                    .push_back(tensor),
            }
            self.record_hold(circuit, tensor, source);
            return Ok(SendOutcome::Held);
        }
        let mut packets = Vec::with_capacity(edge_ids.len());
        for &e in edge_ids {
            if self.topo.edges[e].capacity.is_some() {
                self.edges[e].credits -= 1;
            }
            self.edges[e].in_flight_outputs += 1;
            let counter = self.topo.edges[e].capacity.map(|_| self.edges[e].credits);
            let destination = self.topo.edges[e].destination;
            let packet = Packet {
                kind: PacketKind::Output,
                circuit,
                tensor,
                source,
                destination,
                size_bytes: self.topo.tensor_bytes,
            };
            self.record(ProtocolEvent {
                event: ProtocolEventKind::Send,
                circuit,
                tensor,
                source,
                destination,
                counter,
            });
            packets.push(packet);
        }
        Ok(SendOutcome::Sent(packets))
    }

    fn record_hold(&mut self, circuit: CircuitId, tensor: TensorId, source: Endpoint) {
        self.record(ProtocolEvent {
            event: ProtocolEventKind::Hold,
            circuit,
            tensor,
            source,
            destination: source,
            counter: None,
        });
    }

    /// Delivers an in-flight packet to its destination.
    ///
    /// Output packets become input occupancy at the destination card; the
    /// free-slot guarantee is enforced, and violating it is a
    /// protocol-integrity fault (unreachable when credits are respected).
    /// Credit packets increment the edge counter and release held sends in
    /// FIFO order.
    pub fn deliver(&mut self, packet: &Packet) -> Result<DeliveryEffect> {
        match packet.kind {
            PacketKind::Output => self.deliver_output(packet),
            PacketKind::Credit => self.deliver_credit(packet),
            PacketKind::Input => Err(Error::Protocol(
                "input packets are a delivery record, not a transport kind".into(),
            )),
        }
    }

    fn deliver_output(&mut self, packet: &Packet) -> Result<DeliveryEffect> {
        let e = self.edge_for(packet.circuit, packet.source, packet.destination)?;
        if self.edges[e].in_flight_outputs == 0 {
            return Err(Error::Protocol(format!(
                "delivery of {:?} on {} -> {} without a matching send",
                packet.tensor, packet.source, packet.destination
            )));
        }
        self.edges[e].in_flight_outputs -= 1;
        let mut converted = None;
        if let Endpoint::Card(card) = packet.destination {
            let vc = &mut self.cards[card.0 as usize];
            if vc.framebuffer.len() >= vc.capacity as usize {
                return Err(Error::Protocol(format!(
                    "framebuffer overflow at {card}: delivery with zero free slots"
                )));
            }
            vc.framebuffer.push(FbEntry {
                tensor: packet.tensor,
                source: packet.source,
                circuit: packet.circuit,
            });
            converted = Some(Packet {
                kind: PacketKind::Input,
                ..packet.clone()
            });
        }
        self.record(ProtocolEvent {
            event: ProtocolEventKind::Deliver,
            circuit: packet.circuit,
            tensor: packet.tensor,
            source: packet.source,
            destination: packet.destination,
            counter: None,
        });
        Ok(DeliveryEffect {
            converted,
            released: Vec::new(),
        })
    }

    fn deliver_credit(&mut self, packet: &Packet) -> Result<DeliveryEffect> {
        // A credit for edge (destination -> source) travels the reverse way.
        let e = self.edge_for(packet.circuit, packet.destination, packet.source)?;
        {
            let capacity = self.topo.edges[e].capacity.ok_or_else(|| {
                Error::Protocol("credit delivered on an uncredited edge".into())
            })?;
            let edge = &mut self.edges[e];
            if edge.in_flight_credits == 0 {
                return Err(Error::Protocol(
                    "credit delivered without a matching consume".into(),
                ));
            }
            edge.in_flight_credits -= 1;
            if edge.credits >= capacity {
                return Err(Error::Protocol(format!(
                    "credit counter for {} -> {} would exceed its capacity {capacity}",
                    packet.destination, packet.source
                )));
            }
            edge.credits += 1;
        }
        self.record(ProtocolEvent {
            event: ProtocolEventKind::Deliver,
            circuit: packet.circuit,
            tensor: packet.tensor,
            source: packet.source,
            destination: packet.destination,
            counter: Some(self.edges[e].credits),
        });
        let released = self.release_held(packet.destination)?;
        Ok(DeliveryEffect {
            converted: None,
            released,
        })
    }

    /// Re-attempts held sends at `endpoint` after a credit returned. Each
    /// queue is FIFO: a blocked head never lets later tensors of its queue
    /// overtake, but one circuit's blocked queue does not starve another's.
    fn release_held(&mut self, endpoint: Endpoint) -> Result<Vec<ReleasedSend>> {
        let mut released = Vec::new();
        loop {
            let heads: Vec<(CircuitId, TensorId)> = match endpoint {
                // host injections are one strict FIFO across circuits
                Endpoint::Host => self.host_held.front().copied().into_iter().collect(),
                Endpoint::Card(c) => self.cards[c.0 as usize]
                    .held
                    .iter()
                    .filter_map(|(&circuit, q)| q.front().map(|&t| (circuit, t)))
                    .collect(),
            };
            let mut progressed = false;
            for (circuit, tensor) in heads {
                let edge_ids = match endpoint {
                    Endpoint::Host => self.topo.compiled[circuit as usize].entry_edges.clone(),
                    Endpoint::Card(c) => self.topo.compiled[circuit as usize]
                        .out_edges
                        .get(&c)
                        .cloned()
                        .expect("held tensor has outgoing descriptors"),
                };
                let can_send = edge_ids.iter().all(|&e| {
                    self.topo.edges[e].capacity.is_none() || self.edges[e].credits > 0
                });
                if !can_send {
                    continue;
                }
                match endpoint {
                    Endpoint::Host => {
                        self.host_held.pop_front();
                    }
                    Endpoint::Card(c) => {
                        self.cards[c.0 as usize]
                            .held
                            .get_mut(&circuit)
                            .expect("held queue exists")
                            .pop_front();
                    }
                }
                match self.send_over(circuit, tensor, endpoint, &edge_ids)? {
                    SendOutcome::Sent(packets) => released.push(ReleasedSend {
                        source: endpoint,
                        tensor,
                        circuit,
                        packets,
                    }),
                    SendOutcome::Held => unreachable!("send was checked against credits"),
                }
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        Ok(released)
    }

    /// Marks `tensor` consumed at `card` (its resulting output has been
    /// forwarded downstream or to the host): frees its framebuffer slots and
    /// returns one credit packet per upstream source.
    pub fn consume_and_credit(&mut self, card: CardId, tensor: TensorId) -> Result<Vec<Packet>> {
        let vc = &mut self.cards[card.0 as usize];
        let mut entries = Vec::new();
        vc.framebuffer.retain(|e| {
            if e.tensor == tensor {
                entries.push(e.clone());
                false
            } else {
                true
            }
        });
        if entries.is_empty() {
            return Err(Error::Protocol(format!(
                "consume of {tensor:?} at {card}: no occupied slot holds it"
            )));
        }
        let mut credits = Vec::with_capacity(entries.len());
        for entry in entries {
            let e = self.edge_for(entry.circuit, entry.source, Endpoint::Card(card))?;
            self.edges[e].in_flight_credits += 1;
            let packet = Packet {
                kind: PacketKind::Credit,
                circuit: entry.circuit,
                tensor,
                source: Endpoint::Card(card),
                destination: entry.source,
                size_bytes: CREDIT_PACKET_BYTES,
            };
            self.record(ProtocolEvent {
                event: ProtocolEventKind::Credit,
                circuit: entry.circuit,
                tensor,
                source: Endpoint::Card(card),
                destination: entry.source,
                counter: Some(self.edges[e].credits),
            });
            credits.push(packet);
        }
        Ok(credits)
    }

    fn edge_for(
        &self,
        circuit: CircuitId,
        source: Endpoint,
        destination: Endpoint,
    ) -> Result<usize> {
        self.topo
            .edge_index
            .get(&(circuit, source, destination))
            .copied()
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "no edge {source} -> {destination} on circuit {circuit}"
                ))
            })
    }

    /// Verifies per-edge credit conservation:
    /// `credits + occupied(from that source) + outputs in flight + credits
    /// in flight = capacity` on every credited edge.
    pub fn check_conservation(&self) -> Result<()> {
        for (meta, dy) in self.topo.edges.iter().zip(self.edges.iter()) {
            let Some(capacity) = meta.capacity else {
                continue;
            };
            let Endpoint::Card(dst) = meta.destination else {
                continue;
            };
            let occupied = self.cards[dst.0 as usize]
                .framebuffer
                .iter()
                .filter(|e| e.source == meta.source && e.circuit == meta.circuit)
                .count() as u32;
            let sum = dy.credits + occupied + dy.in_flight_outputs + dy.in_flight_credits;
            if sum != capacity {
                return Err(Error::Protocol(format!(
                    "conservation violated on {} -> {} (circuit {}): credits {} + occupied \
                     {occupied} + outputs {} + returning {} != capacity {capacity}",
                    meta.source,
                    meta.destination,
                    meta.circuit,
                    dy.credits,
                    dy.in_flight_outputs,
                    dy.in_flight_credits
                )));
            }
        }
        Ok(())
    }

    /// True when nothing is staged, held, or in flight.
    pub fn quiescent(&self) -> bool {
        self.host_held.is_empty()
            && self
                .cards
                .iter()
                .all(|c| c.framebuffer.is_empty() && c.held.values().all(|q| q.is_empty()))
            && self
                .edges
                .iter()
                .all(|e| e.in_flight_outputs == 0 && e.in_flight_credits == 0)
    }

    /// Compact canonical encoding of protocol state, for state enumeration.
    /// Sections are length-prefixed so distinct states never collide.
    pub(crate) fn state_key(&self) -> Vec<u8> {
        fn push_tensor(key: &mut Vec<u8>, t: TensorId) {
            key.extend_from_slice(&(t.0 as u32).to_le_bytes());
        }
        let mut key = Vec::with_capacity(64);
        key.push(self.active_circuit as u8);
        key.push(self.host_held.len() as u8);
        for &(circuit, tensor) in &self.host_held {
            key.push(circuit as u8);
            push_tensor(&mut key, tensor);
        }
        for card in &self.cards {
            let mut entries: Vec<&FbEntry> = card.framebuffer.iter().collect();
            entries.sort_by_key(|e| (e.tensor, e.source, e.circuit));
            key.push(entries.len() as u8);
            for e in entries {
                push_tensor(&mut key, e.tensor);
                key.push(e.circuit as u8);
                key.push(match e.source {
                    Endpoint::Host => 0xFF,
                    Endpoint::Card(c) => c.0 as u8,
                });
            }
            key.push(card.held.len() as u8);
            for (circuit, q) in &card.held {
                key.push(*circuit as u8);
                key.push(q.len() as u8);
                for &t in q {
                    push_tensor(&mut key, t);
                }
            }
        }
        for e in &self.edges {
            key.push(e.credits as u8);
            key.push(e.in_flight_outputs as u8);
            key.push(e.in_flight_credits as u8);
        }
        key
    }

    #[cfg(test)]
    fn edge_dyn_mut(
        &mut self,
        circuit: CircuitId,
        source: Endpoint,
        destination: Endpoint,
    ) -> &mut EdgeDyn {
        let e = self.topo.edge_index[&(circuit, source, destination)];
        &mut self.edges[e]
    }
}
