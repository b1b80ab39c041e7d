//! EnCoR control plane: SME with its subscriber database, stateless HOP
//! relays, iNBs and UEs, running attach and both handover modes on the
//! discrete-event kernel.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{
    assign_private_addr, AddressError, DownlinkOutcome, InbNat, InbPrefix, Packet, RecentlyMovedTable,
    UePrivateAddr, DEFAULT_MOVED_TTL,
};
use crate::charging::InbQuota;
use crate::message::{
    ControlMessage, DataPacket, Element, HandoverContext, HandoverMode, HandoverTrace, MessageKind,
    Payload, ProcedureBook, ProcedureLog, Signal, TraceOutcome, UserPath,
};
use crate::security::{
    chain_k_enb, derive_k_enb, generate_auth_vector, AuthVector, Key256, Qci, SessionKeys,
    SubscriberRecord, UeSecurity,
};
use crate::sim::{Delivery, NodeId, Process, RunStats, ServiceModel, SimError, SimTime, Simulator};

/// IMSI of UE index 0; UE `j` has IMSI `IMSI_BASE + j`.
pub const IMSI_BASE: u64 = 1001;

pub fn imsi_of(ue: u32) -> u64 {
    IMSI_BASE + u64::from(ue)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("unknown UE {0}")]
    UnknownUe(u32),
    #[error("unknown base station {0}")]
    UnknownStation(u32),
    #[error("UE {0} is not connected")]
    NotConnected(u32),
    #[error("UE {ue} is served by {serving}, not {claimed}")]
    WrongSource { ue: u32, serving: u32, claimed: u32 },
    #[error("source and target are the same base station {0}")]
    SameStation(u32),
    #[error("base stations {src} and {tgt} share no HOP")]
    NoSharedHop { src: u32, tgt: u32 },
    #[error("UE {0} is not detached")]
    NotDetached(u32),
    #[error("attach of UE {ue} failed: {cause}")]
    AttachFailed { ue: u32, cause: String },
    #[error("procedure {0} did not finish")]
    Unfinished(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Relay(#[from] RelayError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Address(#[from] AddressError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RelayError {
    #[error("HOP {hop} has no base station {dst}")]
    UnknownDestination { hop: u32, dst: Element },
}

/// One-way latencies of the simulated links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkLatencies {
    /// UE to base station.
    pub air: SimTime,
    /// Base station to HOP.
    pub edge: SimTime,
    /// Base station to the central core.
    pub backhaul: SimTime,
    /// Core to the Internet.
    pub core_internet: SimTime,
    /// Base station straight to the Internet.
    pub edge_internet: SimTime,
}

impl Default for LinkLatencies {
    fn default() -> Self {
        Self {
            air: SimTime::from_millis(2),
            edge: SimTime::from_millis(2),
            backhaul: SimTime::from_millis(10),
            core_internet: SimTime::from_millis(5),
            edge_internet: SimTime::from_millis(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncorConfig {
    pub inbs: u32,
    pub inbs_per_hop: u32,
    pub ues: u32,
    pub latencies: LinkLatencies,
    /// Messages per second the SME can process; `None` is instantaneous.
    pub core_service_rate: Option<f64>,
    pub edge_service_rate: Option<f64>,
    pub service_model: ServiceModel,
    /// Per-iNB UE limit for admission control.
    pub admission_cap: Option<usize>,
    pub moved_ttl: SimTime,
    pub forwarding: bool,
    /// Re-key through the SME after each direct handover.
    pub rekey_after_direct: bool,
    pub seed: u64,
}

impl Default for EncorConfig {
    fn default() -> Self {
        Self {
            inbs: 8,
            inbs_per_hop: 8,
            ues: 4,
            latencies: LinkLatencies::default(),
            core_service_rate: None,
            edge_service_rate: None,
            service_model: ServiceModel::Deterministic,
            admission_cap: None,
            moved_ttl: DEFAULT_MOVED_TTL,
            forwarding: true,
            rekey_after_direct: false,
            seed: 1,
        }
    }
}

/// Handover relay proxy. Knows only which iNBs it reaches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopNode {
    pub id: u32,
    pub connected: BTreeSet<u32>,
}

impl HopNode {
    pub fn new(id: u32, connected: impl IntoIterator<Item = u32>) -> Self {
        Self {
            id,
            connected: connected.into_iter().collect(),
        }
    }

    pub fn relay(&self, msg: &ControlMessage) -> Result<ControlMessage, RelayError> {
        match msg.dst {
            Element::Inb(i) if self.connected.contains(&i) => Ok(msg.clone()),
            dst => Err(RelayError::UnknownDestination { hop: self.id, dst }),
        }
    }

    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("HOP state serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UeState {
    Detached,
    Attaching,
    Connected,
    HandingOver { source: u32, target: u32 },
}

/// Snapshot of everything the network holds about one UE.
#[derive(Debug, Clone, PartialEq)]
pub struct UeContext {
    pub state: UeState,
    pub serving_inb: Option<u32>,
    pub private_addr: Option<UePrivateAddr>,
    pub keys: Option<SessionKeys>,
    pub qci: Qci,
    pub quota: Option<InbQuota>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextState {
    Active,
    /// Still serving while the target prepares.
    Preparing { target: u32 },
    /// Command sent to the UE; waiting for release.
    HandedOff { target: u32 },
    Pending { source: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InbContext {
    pub state: ContextState,
    pub addr: UePrivateAddr,
    pub keys: SessionKeys,
    pub qci: Qci,
    pub quota: Option<InbQuota>,
}

impl InbContext {
    pub fn is_active(&self) -> bool {
        matches!(self.state, ContextState::Active | ContextState::Preparing { .. })
    }
}

/// Edge base station. Holds contexts and its NAT; in-flight downlink is
/// never queued here.
#[derive(Debug, Clone)]
pub struct Inb {
    pub index: u32,
    pub hop: u32,
    pub nat: InbNat,
    pub contexts: BTreeMap<u64, InbContext>,
}

impl Inb {
    fn admitted(&self) -> usize {
        self.contexts
            .values()
            .filter(|c| !matches!(c.state, ContextState::HandedOff { .. }))
            .count()
    }
}

#[derive(Debug, Clone)]
struct UeDevice {
    imsi: u64,
    sec: UeSecurity,
    state: UeState,
    camped: Option<u32>,
    serving: Option<u32>,
    k_asme: Option<Key256>,
    keys: Option<SessionKeys>,
    addr: Option<UePrivateAddr>,
    last_failure: Option<String>,
}

#[derive(Debug, Clone)]
struct SmeSession {
    keys: SessionKeys,
    qci: Qci,
    pending: Option<AuthVector>,
}

/// Session management entity plus the subscriber database it fronts.
#[derive(Debug, Clone, Default)]
pub struct Sme {
    pub subdb: BTreeMap<u64, SubscriberRecord>,
    sessions: BTreeMap<u64, SmeSession>,
    pub auth_failures: Vec<(u64, String)>,
}

impl Sme {
    pub fn session_keys(&self, imsi: u64) -> Option<SessionKeys> {
        self.sessions.get(&imsi).map(|s| s.keys)
    }
}

/// Downlink data bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataLog {
    pub sent: u64,
    /// (packet id, arrival time) at the UE.
    pub delivered: Vec<(u64, SimTime)>,
    /// (packet id, base station, time).
    pub dropped: Vec<(u64, u32, SimTime)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Core,
    Internet,
    Hop(u32),
    Inb(u32),
    Ue(u32),
}

#[derive(Debug, Serialize, Deserialize)]
struct HandoverCommand {
    target: u32,
    ncc: u32,
    c_rnti: u16,
}

/// Event handler holding all EnCoR element state.
#[derive(Debug, Clone)]
pub struct EncorControl {
    cfg: EncorConfig,
    roles: Vec<Role>,
    core: NodeId,
    internet: NodeId,
    hop_nodes: Vec<NodeId>,
    inb_nodes: Vec<NodeId>,
    ue_nodes: Vec<NodeId>,
    pub sme: Sme,
    pub hops: Vec<HopNode>,
    pub inbs: Vec<Inb>,
    ues: Vec<UeDevice>,
    pub book: ProcedureBook,
    pub data: DataLog,
    pub unexpected: u64,
}

impl EncorControl {
    /// Builds the element state and the matching simulator topology.
    pub fn build(cfg: EncorConfig, sim: &mut Simulator<Signal>) -> Result<Self, ControlError> {
        if cfg.inbs == 0 || cfg.inbs_per_hop == 0 {
            return Err(ControlError::Config("need at least one iNB per HOP".into()));
        }
        let lat = cfg.latencies;
        let mut roles = Vec::new();
        let mut add = |sim: &mut Simulator<Signal>, rate, role| -> Result<NodeId, SimError> {
            let id = sim.add_node(rate)?;
            roles.push(role);
            Ok(id)
        };
        let core = add(sim, cfg.core_service_rate, Role::Core)?;
        let internet = add(sim, None, Role::Internet)?;
        let hop_count = cfg.inbs.div_ceil(cfg.inbs_per_hop);
        let mut hop_nodes = Vec::new();
        let mut hops = Vec::new();
        for h in 0..hop_count {
            hop_nodes.push(add(sim, cfg.edge_service_rate, Role::Hop(h))?);
            let lo = h * cfg.inbs_per_hop;
            let hi = (lo + cfg.inbs_per_hop).min(cfg.inbs);
            hops.push(HopNode::new(h, lo..hi));
        }
        let mut inb_nodes = Vec::new();
        let mut inbs = Vec::new();
        for i in 0..cfg.inbs {
            let node = add(sim, cfg.edge_service_rate, Role::Inb(i))?;
            let hop = i / cfg.inbs_per_hop;
            sim.add_link(node, hop_nodes[hop as usize], lat.edge, 0.0)?;
            sim.add_link(node, core, lat.backhaul, 0.0)?;
            sim.add_link(node, internet, lat.edge_internet, 0.0)?;
            inb_nodes.push(node);
            let mut nat = InbNat::new(InbPrefix::for_index(i), RecentlyMovedTable::new(cfg.moved_ttl));
            nat.forwarding_enabled = cfg.forwarding;
            inbs.push(Inb {
                index: i,
                hop,
                nat,
                contexts: BTreeMap::new(),
            });
        }
        sim.add_link(core, internet, lat.core_internet, 0.0)?;
        let mut ue_nodes = Vec::new();
        let mut ues = Vec::new();
        let mut sme = Sme::default();
        for j in 0..cfg.ues {
            let node = add(sim, None, Role::Ue(j))?;
            for &inb in &inb_nodes {
                sim.add_link(node, inb, lat.air, 0.0)?;
            }
            ue_nodes.push(node);
            let rec = SubscriberRecord::with_derived_key(imsi_of(j));
            ues.push(UeDevice {
                imsi: rec.imsi,
                sec: UeSecurity::new(rec.k),
                state: UeState::Detached,
                camped: None,
                serving: None,
                k_asme: None,
                keys: None,
                addr: None,
                last_failure: None,
            });
            sme.subdb.insert(rec.imsi, rec);
        }
        Ok(Self {
            cfg,
            roles,
            core,
            internet,
            hop_nodes,
            inb_nodes,
            ue_nodes,
            sme,
            hops,
            inbs,
            ues,
            book: ProcedureBook::default(),
            data: DataLog::default(),
            unexpected: 0,
        })
    }

    pub fn config(&self) -> &EncorConfig {
        &self.cfg
    }

    pub fn core_node(&self) -> NodeId {
        self.core
    }

    pub fn ue_count(&self) -> u32 {
        self.ues.len() as u32
    }

    /// iNBs reachable through the same HOP, excluding `inb` itself.
    pub fn neighbors(&self, inb: u32) -> Vec<u32> {
        let Some(station) = self.inbs.get(inb as usize) else {
            return Vec::new();
        };
        self.hops[station.hop as usize]
            .connected
            .iter()
            .copied()
            .filter(|&i| i != inb)
            .collect()
    }

    pub fn shared_hop(&self, a: u32, b: u32) -> Option<u32> {
        self.hops
            .iter()
            .find(|h| h.connected.contains(&a) && h.connected.contains(&b))
            .map(|h| h.id)
    }

    pub fn ue_state(&self, ue: u32) -> Option<UeState> {
        self.ues.get(ue as usize).map(|u| u.state)
    }

    pub fn serving(&self, ue: u32) -> Option<u32> {
        self.ues.get(ue as usize).and_then(|u| u.serving)
    }

    pub fn ue_keys(&self, ue: u32) -> Option<SessionKeys> {
        self.ues.get(ue as usize).and_then(|u| u.keys)
    }

    pub fn last_failure(&self, ue: u32) -> Option<&str> {
        self.ues.get(ue as usize).and_then(|u| u.last_failure.as_deref())
    }

    pub fn subscriber_mut(&mut self, imsi: u64) -> Option<&mut SubscriberRecord> {
        self.sme.subdb.get_mut(&imsi)
    }

    pub fn deprovision(&mut self, imsi: u64) -> Option<SubscriberRecord> {
        self.sme.subdb.remove(&imsi)
    }

    /// Base stations holding an active (serving) context for `imsi`.
    pub fn active_holders(&self, imsi: u64) -> Vec<u32> {
        self.inbs
            .iter()
            .filter(|s| s.contexts.get(&imsi).is_some_and(InbContext::is_active))
            .map(|s| s.index)
            .collect()
    }

    pub fn ue_context(&self, ue: u32) -> Option<UeContext> {
        let dev = self.ues.get(ue as usize)?;
        let ctx = dev
            .serving
            .and_then(|s| self.inbs[s as usize].contexts.get(&dev.imsi));
        let mut state = dev.state;
        if let (UeState::Connected, Some(c)) = (state, ctx) {
            if let ContextState::Preparing { target } = c.state {
                state = UeState::HandingOver {
                    source: dev.serving.expect("context implies serving"),
                    target,
                };
            }
        }
        Some(UeContext {
            state,
            serving_inb: dev.serving,
            private_addr: dev.addr,
            keys: dev.keys,
            qci: ctx.map(|c| c.qci).unwrap_or_default(),
            quota: ctx.and_then(|c| c.quota.clone()),
        })
    }

    pub fn handover_trace(&self, procedure: u64) -> Option<&HandoverTrace> {
        self.book.handover(procedure)
    }

    pub fn procedure_log(&self, procedure: u64) -> Option<&ProcedureLog> {
        self.book.log(procedure)
    }

    pub fn drain_finished(&mut self) -> Vec<HandoverTrace> {
        self.book.drain_finished()
    }

    /// Uplink path of `ue`'s traffic: straight out of its serving iNB.
    pub fn user_path(&self, ue: u32) -> Option<UserPath> {
        let inb = self.serving(ue)?;
        Some(UserPath {
            hops: vec![Element::Ue(ue), Element::Inb(inb), Element::Internet],
            latency: self.cfg.latencies.air + self.cfg.latencies.edge_internet,
        })
    }

    fn device(&self, ue: u32) -> Result<&UeDevice, ControlError> {
        self.ues.get(ue as usize).ok_or(ControlError::UnknownUe(ue))
    }

    fn check_station(&self, inb: u32) -> Result<(), ControlError> {
        if (inb as usize) < self.inbs.len() {
            Ok(())
        } else {
            Err(ControlError::UnknownStation(inb))
        }
    }

    fn ue_index(&self, imsi: u64) -> Option<u32> {
        let j = imsi.checked_sub(IMSI_BASE)?;
        (j < self.ues.len() as u64).then_some(j as u32)
    }

    fn phys(&self, e: Element) -> NodeId {
        match e {
            Element::Ue(j) => self.ue_nodes[j as usize],
            Element::Inb(i) | Element::Enb(i) => self.inb_nodes[i as usize],
            Element::Hop(h) => self.hop_nodes[h as usize],
            Element::Internet => self.internet,
            Element::Cp(_) => self.internet,
            _ => self.core,
        }
    }

    /// Puts a logical message on the wire, choosing its physical path.
    fn send(&mut self, sim: &mut Simulator<Signal>, msg: ControlMessage) {
        let from = self.phys(msg.src);
        let to = self.phys(msg.dst);
        let mut via = Vec::new();
        if msg.src.is_core() && !msg.dst.is_core() {
            // Generating a message costs the core one service.
            via.push(self.core);
        }
        let nas_station = match (msg.src, msg.dst) {
            (Element::Ue(j), d) if d.is_core() => self.ues[j as usize].camped,
            (s, Element::Ue(j)) if s.is_core() => self.ues[j as usize].camped,
            _ => None,
        };
        if let Some(i) = nas_station {
            via.push(self.inb_nodes[i as usize]);
        }
        let now = sim.now();
        if let Some(h) = msg.relay {
            self.book.record(&msg, now, (via.len() + 2) as u8);
            let hop = self.hop_nodes[h as usize];
            sim.send_via(from, &via, hop, Signal::Control(msg))
                .expect("control topology is connected");
        } else {
            self.book.record(&msg, now, (via.len() + 1) as u8);
            sim.send_via(from, &via, to, Signal::Control(msg))
                .expect("control topology is connected");
        }
    }

    fn finish(&mut self, procedure: u64, now: SimTime, outcome: TraceOutcome) {
        self.book.finish(procedure, now, outcome);
    }

    /// Starts an attach of `ue` through `inb`. Returns the procedure id.
    pub fn start_attach(
        &mut self,
        sim: &mut Simulator<Signal>,
        ue: u32,
        inb: u32,
    ) -> Result<u64, ControlError> {
        self.check_station(inb)?;
        let dev = self.device(ue)?;
        if dev.state != UeState::Detached {
            return Err(ControlError::NotDetached(ue));
        }
        let imsi = dev.imsi;
        let procedure = self.book.open_log(imsi);
        let dev = &mut self.ues[ue as usize];
        dev.state = UeState::Attaching;
        dev.camped = Some(inb);
        dev.last_failure = None;
        let msg = ControlMessage::new(MessageKind::AttachRequest, Element::Ue(ue), Element::Sme, imsi, procedure)
            .with_payload(Payload::Attach { imsi });
        self.send(sim, msg);
        Ok(procedure)
    }

    /// Drops all state for `ue` locally (power-off).
    pub fn detach(&mut self, ue: u32) -> Result<(), ControlError> {
        let imsi = self.device(ue)?.imsi;
        for s in &mut self.inbs {
            s.contexts.remove(&imsi);
        }
        self.sme.sessions.remove(&imsi);
        let dev = &mut self.ues[ue as usize];
        dev.state = UeState::Detached;
        dev.serving = None;
        dev.camped = None;
        dev.keys = None;
        dev.k_asme = None;
        dev.addr = None;
        Ok(())
    }

    /// Starts a handover of `ue` from `src` to `tgt`. Returns the procedure id.
    pub fn start_handover(
        &mut self,
        sim: &mut Simulator<Signal>,
        ue: u32,
        src: u32,
        tgt: u32,
        mode: HandoverMode,
    ) -> Result<u64, ControlError> {
        self.check_station(src)?;
        self.check_station(tgt)?;
        let dev = self.device(ue)?;
        if dev.state != UeState::Connected {
            return Err(ControlError::NotConnected(ue));
        }
        let serving = dev.serving.expect("connected UE has a serving iNB");
        if serving != src {
            return Err(ControlError::WrongSource {
                ue,
                serving,
                claimed: src,
            });
        }
        if src == tgt {
            return Err(ControlError::SameStation(src));
        }
        let hop = self
            .shared_hop(src, tgt)
            .ok_or(ControlError::NoSharedHop { src, tgt })?;
        let imsi = dev.imsi;
        let ctx = self.inbs[src as usize]
            .contexts
            .get_mut(&imsi)
            .expect("serving iNB holds the context");
        if ctx.state != ContextState::Active {
            return Err(ControlError::NotConnected(ue));
        }
        ctx.state = ContextState::Preparing { target: tgt };
        let handover = HandoverContext {
            source: src,
            target: tgt,
            addr: ctx.addr,
            qci: ctx.qci,
            keys: None,
        };
        let current_keys = ctx.keys;
        let procedure = self.book.open_handover(imsi, mode, src, tgt, sim.now());
        let msg = match mode {
            HandoverMode::CoreAssisted => {
                ControlMessage::new(MessageKind::HoRequired, Element::Inb(src), Element::Sme, imsi, procedure)
                    .with_payload(Payload::Handover(handover))
            }
            HandoverMode::Direct | HandoverMode::S1 => ControlMessage::new(
                MessageKind::HoRequired,
                Element::Inb(src),
                Element::Inb(tgt),
                imsi,
                procedure,
            )
            .relayed_by(hop)
            .with_payload(Payload::Handover(HandoverContext {
                keys: Some(current_keys),
                ..handover
            })),
        };
        self.send(sim, msg);
        Ok(procedure)
    }

    /// Injects a downlink packet from the Internet addressed to `imsi`'s
    /// public address behind `via_inb`.
    pub fn send_downlink(
        &mut self,
        sim: &mut Simulator<Signal>,
        imsi: u64,
        via_inb: u32,
        payload: Vec<u8>,
    ) -> Result<u64, ControlError> {
        self.check_station(via_inb)?;
        let id = self.data.sent;
        self.data.sent += 1;
        let pkt = DataPacket {
            id,
            imsi,
            packet: Packet {
                src: crate::addressing::Addr128::from_parts(0x2001_0db8_ffff_0000, 1),
                dst: self.inbs[via_inb as usize].nat.prefix.public_addr(imsi),
                payload,
            },
            sent_at: sim.now(),
        };
        sim.send(self.internet, self.inb_nodes[via_inb as usize], Signal::Data(pkt))?;
        Ok(id)
    }

    fn on_data(&mut self, sim: &mut Simulator<Signal>, node: NodeId, pkt: DataPacket) {
        let now = sim.now();
        match self.roles[node.0 as usize] {
            Role::Inb(i) => {
                let station = &mut self.inbs[i as usize];
                let contexts = &station.contexts;
                let attached = |id: u64| {
                    contexts
                        .values()
                        .any(|c| c.is_active() && c.addr.identifier() == id)
                };
                let DataPacket { id, imsi, packet, sent_at } = pkt;
                match station.nat.downlink(packet, attached, now) {
                    DownlinkOutcome::Deliver(p) => {
                        let ue = self.ue_index(imsi).expect("attached UE is known");
                        let out = DataPacket { id, imsi, packet: p, sent_at };
                        sim.send(node, self.ue_nodes[ue as usize], Signal::Data(out))
                            .expect("air link exists");
                    }
                    DownlinkOutcome::Forward(p) => {
                        let tgt = self
                            .inbs
                            .iter()
                            .position(|s| s.nat.prefix.locator() == p.dst.locator())
                            .expect("moved entries name known iNBs");
                        let out = DataPacket { id, imsi, packet: p, sent_at };
                        sim.send(node, self.inb_nodes[tgt], Signal::Data(out))
                            .expect("iNBs are connected");
                    }
                    DownlinkOutcome::Dropped => self.data.dropped.push((id, i, now)),
                }
            }
            Role::Ue(j) => {
                let from_serving = self.ues[j as usize].serving.is_some();
                if from_serving {
                    self.data.delivered.push((pkt.id, now));
                } else {
                    self.data.dropped.push((pkt.id, u32::MAX, now));
                }
            }
            _ => self.unexpected += 1,
        }
    }

    fn on_control(&mut self, sim: &mut Simulator<Signal>, msg: ControlMessage) {
        let now = sim.now();
        use MessageKind as K;
        match (msg.dst, msg.kind) {
            (Element::Sme, K::AttachRequest) => self.sme_attach_request(sim, msg),
            (Element::Ue(j), K::AuthChallenge) => self.ue_challenge(sim, j, msg),
            (Element::Sme, K::AuthResponse) => self.sme_auth_response(sim, msg),
            (Element::Sme, K::AuthFailure) => {
                let cause = match &msg.payload {
                    Payload::Failure { cause } => cause.clone(),
                    _ => "authentication failure".to_string(),
                };
                if let Some(s) = self.sme.sessions.get_mut(&msg.ue) {
                    s.pending = None;
                }
                self.sme.auth_failures.push((msg.ue, cause.clone()));
                self.finish(msg.procedure, now, TraceOutcome::Failed(cause));
            }
            (Element::Inb(i), K::InitialContextSetup) => {
                let Payload::ContextSetup { keys, addr, qci } = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                self.inbs[i as usize].contexts.insert(
                    msg.ue,
                    InbContext {
                        state: ContextState::Active,
                        addr,
                        keys,
                        qci,
                        quota: None,
                    },
                );
                let ue = self.ue_index(msg.ue).expect("known UE");
                let reply = ControlMessage::new(K::AttachAccept, Element::Inb(i), Element::Ue(ue), msg.ue, msg.procedure)
                    .with_payload(Payload::Accept { addr });
                self.send(sim, reply);
            }
            (Element::Ue(j), K::AttachAccept) => {
                let Payload::Accept { addr } = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let Element::Inb(i) = msg.src else {
                    self.unexpected += 1;
                    return;
                };
                let dev = &mut self.ues[j as usize];
                let k_asme = dev.k_asme.expect("accept follows a successful challenge");
                dev.keys = Some(derive_k_enb(&k_asme, 0));
                dev.addr = Some(addr);
                dev.serving = Some(i);
                dev.state = UeState::Connected;
                self.finish(msg.procedure, now, TraceOutcome::Completed);
            }
            (Element::Ue(j), K::AttachReject) => {
                let cause = match msg.payload {
                    Payload::Failure { cause } => cause,
                    _ => "rejected".into(),
                };
                let dev = &mut self.ues[j as usize];
                dev.state = UeState::Detached;
                dev.camped = None;
                dev.last_failure = Some(cause.clone());
                self.finish(msg.procedure, now, TraceOutcome::Failed(cause));
            }
            (Element::Sme, K::HoRequired) => {
                let Payload::Handover(mut ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let Some(session) = self.sme.sessions.get_mut(&msg.ue) else {
                    self.unexpected += 1;
                    return;
                };
                session.keys = chain_k_enb(&session.keys);
                ho.keys = Some(session.keys);
                let fwd = ControlMessage::new(K::HoRequest, Element::Sme, Element::Inb(ho.target), msg.ue, msg.procedure)
                    .with_payload(Payload::Handover(ho));
                self.send(sim, fwd);
            }
            (Element::Inb(t), K::HoRequest | K::HoRequired) => self.target_prepare(sim, t, msg),
            (Element::Inb(s), K::HoRequestAck) => {
                let Payload::Command(command) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let Some(ctx) = self.inbs[s as usize].contexts.get_mut(&msg.ue) else {
                    self.unexpected += 1;
                    return;
                };
                let ContextState::Preparing { target } = ctx.state else {
                    self.unexpected += 1;
                    return;
                };
                ctx.state = ContextState::HandedOff { target };
                let ue = self.ue_index(msg.ue).expect("known UE");
                let cmd = ControlMessage::new(K::HoCommand, Element::Inb(s), Element::Ue(ue), msg.ue, msg.procedure)
                    .with_payload(Payload::Command(command));
                self.send(sim, cmd);
            }
            (Element::Inb(s), K::HoPreparationFailure) => {
                if let Some(ctx) = self.inbs[s as usize].contexts.get_mut(&msg.ue) {
                    if let ContextState::Preparing { .. } = ctx.state {
                        ctx.state = ContextState::Active;
                    }
                }
                self.finish(msg.procedure, now, TraceOutcome::Failed("target refused admission".into()));
            }
            (Element::Ue(j), K::HoCommand) => {
                let Payload::Command(bytes) = &msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let Ok(cmd) = serde_json::from_slice::<HandoverCommand>(bytes) else {
                    self.unexpected += 1;
                    return;
                };
                let dev = &mut self.ues[j as usize];
                if let Some(mut keys) = dev.keys {
                    while keys.ncc < cmd.ncc {
                        keys = chain_k_enb(&keys);
                    }
                    dev.keys = Some(keys);
                }
                dev.serving = Some(cmd.target);
                dev.camped = Some(cmd.target);
                let confirm = ControlMessage::new(K::HoConfirm, Element::Ue(j), Element::Inb(cmd.target), msg.ue, msg.procedure);
                self.send(sim, confirm);
            }
            (Element::Inb(t), K::HoConfirm) => {
                let Some(ctx) = self.inbs[t as usize].contexts.get_mut(&msg.ue) else {
                    self.unexpected += 1;
                    return;
                };
                let ContextState::Pending { source } = ctx.state else {
                    self.unexpected += 1;
                    return;
                };
                ctx.state = ContextState::Active;
                let hop = self.shared_hop(source, t).expect("checked at start");
                let notify = ControlMessage::new(K::HoCompleteNotify, Element::Inb(t), Element::Inb(source), msg.ue, msg.procedure)
                    .relayed_by(hop);
                self.send(sim, notify);
                let direct = self
                    .book
                    .handover(msg.procedure)
                    .is_some_and(|tr| tr.mode == HandoverMode::Direct);
                if direct && self.cfg.rekey_after_direct {
                    self.start_rekey(sim, t, msg.ue);
                }
            }
            (Element::Inb(s), K::HoCompleteNotify) => {
                let Some(ctx) = self.inbs[s as usize].contexts.remove(&msg.ue) else {
                    self.unexpected += 1;
                    return;
                };
                let ContextState::HandedOff { target } = ctx.state else {
                    self.unexpected += 1;
                    return;
                };
                let target_prefix = self.inbs[target as usize].nat.prefix;
                self.inbs[s as usize]
                    .nat
                    .record_move(ctx.addr.identifier(), target_prefix, now);
                let hop = self.inbs[s as usize].hop;
                let release = ControlMessage::new(K::UeContextRelease, Element::Inb(s), Element::Hop(hop), msg.ue, msg.procedure);
                self.send(sim, release);
            }
            (Element::Hop(_), K::UeContextRelease) => {
                self.finish(msg.procedure, now, TraceOutcome::Completed);
            }
            (Element::Sme, K::KeyRefreshRequest) => {
                let Some(session) = self.sme.sessions.get_mut(&msg.ue) else {
                    self.unexpected += 1;
                    return;
                };
                session.keys = chain_k_enb(&session.keys);
                let reply = ControlMessage::new(K::KeyRefreshResponse, Element::Sme, msg.src, msg.ue, msg.procedure)
                    .with_payload(Payload::Keys(session.keys));
                self.send(sim, reply);
            }
            (Element::Inb(i), K::KeyRefreshResponse) => {
                let Payload::Keys(keys) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                if let Some(ctx) = self.inbs[i as usize].contexts.get_mut(&msg.ue) {
                    ctx.keys = keys;
                }
                let ue = self.ue_index(msg.ue).expect("known UE");
                let cmd = ControlMessage::new(K::KeyRefreshCommand, Element::Inb(i), Element::Ue(ue), msg.ue, msg.procedure)
                    .with_payload(Payload::Keys(SessionKeys { k_enb: [0; 32], ncc: keys.ncc }));
                self.send(sim, cmd);
            }
            (Element::Ue(j), K::KeyRefreshCommand) => {
                let Payload::Keys(SessionKeys { ncc, .. }) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let dev = &mut self.ues[j as usize];
                if let Some(mut keys) = dev.keys {
                    while keys.ncc < ncc {
                        keys = chain_k_enb(&keys);
                    }
                    dev.keys = Some(keys);
                }
                self.finish(msg.procedure, now, TraceOutcome::Completed);
            }
            _ => self.unexpected += 1,
        }
    }

    fn start_rekey(&mut self, sim: &mut Simulator<Signal>, inb: u32, imsi: u64) {
        let procedure = self.book.open_log(imsi);
        let req = ControlMessage::new(MessageKind::KeyRefreshRequest, Element::Inb(inb), Element::Sme, imsi, procedure);
        self.send(sim, req);
    }

    fn sme_attach_request(&mut self, sim: &mut Simulator<Signal>, msg: ControlMessage) {
        let Payload::Attach { imsi } = msg.payload else {
            self.unexpected += 1;
            return;
        };
        let Some(rec) = self.sme.subdb.get_mut(&imsi) else {
            let reply = ControlMessage::new(MessageKind::AttachReject, Element::Sme, msg.src, imsi, msg.procedure)
                .with_payload(Payload::Failure {
                    cause: format!("unknown subscriber {imsi}"),
                });
            self.send(sim, reply);
            return;
        };
        let mut rand = [0u8; 16];
        sim.rng().fill(&mut rand);
        let vector = generate_auth_vector(rec, rand);
        let qci = rec.qci;
        self.sme.sessions.insert(
            imsi,
            SmeSession {
                keys: derive_k_enb(&vector.k_asme, 0),
                qci,
                pending: Some(vector),
            },
        );
        let reply = ControlMessage::new(MessageKind::AuthChallenge, Element::Sme, msg.src, imsi, msg.procedure)
            .with_payload(Payload::Challenge {
                rand: vector.rand,
                autn: vector.autn,
            });
        self.send(sim, reply);
    }

    fn ue_challenge(&mut self, sim: &mut Simulator<Signal>, j: u32, msg: ControlMessage) {
        let Payload::Challenge { rand, autn } = msg.payload else {
            self.unexpected += 1;
            return;
        };
        let dev = &mut self.ues[j as usize];
        let reply = match dev.sec.process_challenge(rand, autn) {
            Ok(resp) => {
                dev.k_asme = Some(resp.k_asme);
                ControlMessage::new(MessageKind::AuthResponse, Element::Ue(j), Element::Sme, msg.ue, msg.procedure)
                    .with_payload(Payload::Response { res: resp.res })
            }
            Err(e) => {
                let cause = e.to_string();
                dev.state = UeState::Detached;
                dev.last_failure = Some(cause.clone());
                ControlMessage::new(MessageKind::AuthFailure, Element::Ue(j), Element::Sme, msg.ue, msg.procedure)
                    .with_payload(Payload::Failure { cause })
            }
        };
        self.send(sim, reply);
    }

    fn sme_auth_response(&mut self, sim: &mut Simulator<Signal>, msg: ControlMessage) {
        let Payload::Response { res } = msg.payload else {
            self.unexpected += 1;
            return;
        };
        let imsi = msg.ue;
        let session = self.sme.sessions.get_mut(&imsi);
        let vector = session.as_ref().and_then(|s| s.pending);
        let Some(vector) = vector.filter(|v| v.xres == res) else {
            self.sme.auth_failures.push((imsi, "RES mismatch".into()));
            let reply = ControlMessage::new(MessageKind::AttachReject, Element::Sme, msg.src, imsi, msg.procedure)
                .with_payload(Payload::Failure {
                    cause: "RES mismatch".into(),
                });
            self.send(sim, reply);
            return;
        };
        let session = self.sme.sessions.get_mut(&imsi).expect("checked above");
        session.pending = None;
        let keys = derive_k_enb(&vector.k_asme, 0);
        session.keys = keys;
        let qci = session.qci;
        let ue = self.ue_index(imsi).expect("known UE");
        let inb = self.ues[ue as usize].camped.expect("attaching UE is camped");
        let addr = match assign_private_addr(imsi) {
            Ok(a) => a,
            Err(e) => {
                let reply = ControlMessage::new(MessageKind::AttachReject, Element::Sme, msg.src, imsi, msg.procedure)
                    .with_payload(Payload::Failure { cause: e.to_string() });
                self.send(sim, reply);
                return;
            }
        };
        let setup = ControlMessage::new(MessageKind::InitialContextSetup, Element::Sme, Element::Inb(inb), imsi, msg.procedure)
            .with_payload(Payload::ContextSetup { keys, addr, qci });
        self.send(sim, setup);
    }

    fn target_prepare(&mut self, sim: &mut Simulator<Signal>, t: u32, msg: ControlMessage) {
        let Payload::Handover(ho) = msg.payload else {
            self.unexpected += 1;
            return;
        };
        let Some(keys) = ho.keys else {
            self.unexpected += 1;
            return;
        };
        let hop = self.shared_hop(ho.source, t).expect("checked at start");
        let station = &mut self.inbs[t as usize];
        let full = self.cfg.admission_cap.is_some_and(|cap| station.admitted() >= cap);
        if full {
            let fail = ControlMessage::new(
                MessageKind::HoPreparationFailure,
                Element::Inb(t),
                Element::Inb(ho.source),
                msg.ue,
                msg.procedure,
            )
            .relayed_by(hop);
            self.send(sim, fail);
            return;
        }
        station.contexts.insert(
            msg.ue,
            InbContext {
                state: ContextState::Pending { source: ho.source },
                addr: ho.addr,
                keys,
                qci: ho.qci,
                quota: None,
            },
        );
        let command = HandoverCommand {
            target: t,
            ncc: keys.ncc,
            c_rnti: (msg.procedure & 0xffff) as u16,
        };
        let bytes = serde_json::to_vec(&command).expect("command serializes");
        let ack = ControlMessage::new(MessageKind::HoRequestAck, Element::Inb(t), Element::Inb(ho.source), msg.ue, msg.procedure)
            .relayed_by(hop)
            .with_payload(Payload::Command(bytes));
        self.send(sim, ack);
    }
}

impl Process<Signal> for EncorControl {
    fn on_message(&mut self, sim: &mut Simulator<Signal>, d: Delivery<Signal>) {
        match d.msg {
            Signal::Data(pkt) => self.on_data(sim, d.node, pkt),
            Signal::Control(msg) => {
                if let Role::Hop(h) = self.roles[d.node.0 as usize] {
                    if msg.dst != Element::Hop(h) {
                        match self.hops[h as usize].relay(&msg) {
                            Ok(out) => {
                                let to = self.phys(out.dst);
                                sim.send(d.node, to, Signal::Control(out))
                                    .expect("HOP reaches its iNBs");
                            }
                            Err(e) => {
                                let now = sim.now();
                                self.finish(msg.procedure, now, TraceOutcome::Failed(e.to_string()));
                            }
                        }
                        return;
                    }
                }
                self.on_control(sim, msg);
            }
        }
    }
}

/// An EnCoR deployment together with its simulator.
pub struct EncorNetwork {
    pub sim: Simulator<Signal>,
    pub control: EncorControl,
}

impl EncorNetwork {
    pub fn new(cfg: EncorConfig) -> Result<Self, ControlError> {
        let mut sim = Simulator::new(cfg.seed).with_service_model(cfg.service_model);
        let control = EncorControl::build(cfg, &mut sim)?;
        Ok(Self { sim, control })
    }

    pub fn run(&mut self) -> RunStats {
        self.sim.run(&mut self.control)
    }

    /// Attaches `ue` through `inb` and runs the network until idle.
    pub fn attach(&mut self, ue: u32, inb: u32) -> Result<UeContext, ControlError> {
        let procedure = self.control.start_attach(&mut self.sim, ue, inb)?;
        self.run();
        let log = self
            .control
            .procedure_log(procedure)
            .expect("attach procedure recorded");
        match &log.outcome {
            TraceOutcome::Completed => Ok(self.control.ue_context(ue).expect("known UE")),
            TraceOutcome::Failed(cause) => Err(ControlError::AttachFailed {
                ue,
                cause: cause.clone(),
            }),
            TraceOutcome::InProgress => Err(ControlError::Unfinished(procedure)),
        }
    }

    pub fn attach_log(&self, procedure: u64) -> Option<&ProcedureLog> {
        self.control.procedure_log(procedure)
    }

    fn handover(
        &mut self,
        ue: u32,
        src: u32,
        tgt: u32,
        mode: HandoverMode,
    ) -> Result<HandoverTrace, ControlError> {
        let procedure = self.control.start_handover(&mut self.sim, ue, src, tgt, mode)?;
        self.run();
        self.control.drain_finished();
        Ok(self
            .control
            .handover_trace(procedure)
            .cloned()
            .expect("handover recorded"))
    }

    pub fn handover_core_assisted(
        &mut self,
        ue: u32,
        src: u32,
        tgt: u32,
    ) -> Result<HandoverTrace, ControlError> {
        self.handover(ue, src, tgt, HandoverMode::CoreAssisted)
    }

    pub fn handover_direct(&mut self, ue: u32, src: u32, tgt: u32) -> Result<HandoverTrace, ControlError> {
        self.handover(ue, src, tgt, HandoverMode::Direct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inb_has_no_downlink_buffer() {
        // Exhaustive destructuring: adding a field (such as a packet queue)
        // breaks this test.
        let mut sim = Simulator::new(0);
        let c = EncorControl::build(EncorConfig::default(), &mut sim).unwrap();
        let Inb {
            index: _,
            hop: _,
            nat: _,
            contexts: _,
        } = c.inbs[0].clone();
    }

    #[test]
    fn hop_has_no_per_ue_fields() {
        let HopNode { id: _, connected: _ } = HopNode::new(0, [1, 2]);
    }
}
