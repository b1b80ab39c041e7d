//! LTE reference network: MME/HSS, S-GW and P-GW anchoring the UE's IP
//! address through GTP tunnels, with S1 handover and downlink buffering.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{Addr128, Packet};
use crate::control::{imsi_of, LinkLatencies, IMSI_BASE};
use crate::message::{
    ControlMessage, DataPacket, Element, HandoverContext, HandoverMode, HandoverTrace, MessageKind,
    Payload, ProcedureBook, ProcedureLog, Signal, TraceOutcome, UserPath,
};
use crate::addressing::assign_private_addr;
use crate::security::{
    chain_k_enb, derive_k_enb, generate_auth_vector, AuthVector, Key256, Qci, SessionKeys,
    SubscriberRecord, UeSecurity,
};
use crate::sim::{Delivery, NodeId, Process, RunStats, ServiceModel, SimError, SimTime, Simulator};

/// Locator of the P-GW address pool.
pub const PGW_POOL: u64 = 0x2001_0db8_ffff_0001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LteError {
    #[error("unknown UE {0}")]
    UnknownUe(u32),
    #[error("unknown eNB {0}")]
    UnknownEnb(u32),
    #[error("UE {0} is not connected")]
    NotConnected(u32),
    #[error("UE {ue} is served by eNB {serving}, not {claimed}")]
    WrongSource { ue: u32, serving: u32, claimed: u32 },
    #[error("source and target are the same eNB {0}")]
    SameEnb(u32),
    #[error("UE {0} is not detached")]
    NotDetached(u32),
    #[error("attach of UE {ue} failed: {cause}")]
    AttachFailed { ue: u32, cause: String },
    #[error("no tunnel for UE {0}")]
    NoTunnel(u32),
    #[error("procedure {0} did not finish")]
    Unfinished(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LteConfig {
    pub enbs: u32,
    pub ues: u32,
    pub latencies: LinkLatencies,
    /// S-GW to P-GW; zero when co-located.
    pub sgw_pgw: SimTime,
    /// Messages per second the MME/S-GW control plane can process.
    pub core_service_rate: Option<f64>,
    pub edge_service_rate: Option<f64>,
    pub service_model: ServiceModel,
    /// Downlink packets the S-GW holds per UE during handover.
    pub buffer_cap: Option<usize>,
    pub admission_cap: Option<usize>,
    pub seed: u64,
}

impl Default for LteConfig {
    fn default() -> Self {
        Self {
            enbs: 8,
            ues: 4,
            latencies: LinkLatencies::default(),
            sgw_pgw: SimTime::ZERO,
            core_service_rate: None,
            edge_service_rate: None,
            service_model: ServiceModel::Deterministic,
            buffer_cap: None,
            admission_cap: None,
            seed: 1,
        }
    }
}

/// One GTP tunnel segment between two elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunnelSegment {
    pub upstream: Element,
    pub downstream: Element,
    /// Allocated by the upstream end for uplink traffic.
    pub teid_up: u32,
    /// Allocated by the downstream end for downlink traffic.
    pub teid_down: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtpTunnel {
    /// eNB to S-GW.
    pub s1: TunnelSegment,
    /// S-GW to P-GW.
    pub s5: TunnelSegment,
}

impl GtpTunnel {
    pub fn enb(&self) -> u32 {
        match self.s1.downstream {
            Element::Enb(i) => i,
            other => unreachable!("S1 segment ends at {other}"),
        }
    }
}

/// Per-UE state at the mobility anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorState {
    pub public_ip: Addr128,
    pub tunnel: GtpTunnel,
    /// Indirect forwarding tunnel is up; returned packets are held.
    pub indirect: bool,
    pub buffer: VecDeque<DataPacket>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LteUeState {
    Detached,
    Attaching,
    Connected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnbContextState {
    Active,
    Preparing { target: u32 },
    HandedOff { target: u32 },
    Pending { source: u32, teid: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnbContext {
    pub state: EnbContextState,
    pub keys: SessionKeys,
    pub qci: Qci,
}

#[derive(Debug, Clone, Default)]
pub struct Enb {
    pub contexts: BTreeMap<u64, EnbContext>,
}

#[derive(Debug, Clone)]
struct LteUe {
    imsi: u64,
    sec: UeSecurity,
    state: LteUeState,
    camped: Option<u32>,
    serving: Option<u32>,
    k_asme: Option<Key256>,
    keys: Option<SessionKeys>,
    last_failure: Option<String>,
}

#[derive(Debug, Clone)]
struct MmeSession {
    keys: SessionKeys,
    qci: Qci,
    pending: Option<AuthVector>,
    target_teid: Option<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct DownlinkLog {
    pub sent: u64,
    pub delivered: Vec<(u64, SimTime)>,
    pub dropped: Vec<(u64, SimTime)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Core,
    Gateway,
    Internet,
    Enb(u32),
    Ue(u32),
}

/// Event handler holding all LTE element state.
#[derive(Debug, Clone)]
pub struct LteControl {
    cfg: LteConfig,
    roles: Vec<Role>,
    core: NodeId,
    gateway: NodeId,
    internet: NodeId,
    enb_nodes: Vec<NodeId>,
    ue_nodes: Vec<NodeId>,
    pub subdb: BTreeMap<u64, SubscriberRecord>,
    sessions: BTreeMap<u64, MmeSession>,
    pub anchors: BTreeMap<u64, AnchorState>,
    pub enbs: Vec<Enb>,
    ues: Vec<LteUe>,
    teids: BTreeMap<Element, u32>,
    pub book: ProcedureBook,
    pub data: DownlinkLog,
    pub unexpected: u64,
}

impl LteControl {
    pub fn build(cfg: LteConfig, sim: &mut Simulator<Signal>) -> Result<Self, LteError> {
        if cfg.enbs == 0 {
            return Err(LteError::Config("need at least one eNB".into()));
        }
        let lat = cfg.latencies;
        let mut roles = Vec::new();
        let mut add = |sim: &mut Simulator<Signal>, rate, role| -> Result<NodeId, SimError> {
            let id = sim.add_node(rate)?;
            roles.push(role);
            Ok(id)
        };
        let core = add(sim, cfg.core_service_rate, Role::Core)?;
        let gateway = add(sim, None, Role::Gateway)?;
        let internet = add(sim, None, Role::Internet)?;
        sim.add_link(gateway, internet, lat.core_internet + cfg.sgw_pgw, 0.0)?;
        let mut enb_nodes = Vec::new();
        for i in 0..cfg.enbs {
            let n = add(sim, cfg.edge_service_rate, Role::Enb(i))?;
            sim.add_link(n, core, lat.backhaul, 0.0)?;
            sim.add_link(n, gateway, lat.backhaul, 0.0)?;
            enb_nodes.push(n);
        }
        let mut ue_nodes = Vec::new();
        let mut ues = Vec::new();
        let mut subdb = BTreeMap::new();
        for j in 0..cfg.ues {
            let n = add(sim, None, Role::Ue(j))?;
            for &e in &enb_nodes {
                sim.add_link(n, e, lat.air, 0.0)?;
            }
            ue_nodes.push(n);
            let rec = SubscriberRecord::with_derived_key(imsi_of(j));
            ues.push(LteUe {
                imsi: rec.imsi,
                sec: UeSecurity::new(rec.k),
                state: LteUeState::Detached,
                camped: None,
                serving: None,
                k_asme: None,
                keys: None,
                last_failure: None,
            });
            subdb.insert(rec.imsi, rec);
        }
        Ok(Self {
            enbs: vec![Enb::default(); cfg.enbs as usize],
            cfg,
            roles,
            core,
            gateway,
            internet,
            enb_nodes,
            ue_nodes,
            subdb,
            sessions: BTreeMap::new(),
            anchors: BTreeMap::new(),
            ues,
            teids: BTreeMap::new(),
            book: ProcedureBook::default(),
            data: DownlinkLog::default(),
            unexpected: 0,
        })
    }

    pub fn config(&self) -> &LteConfig {
        &self.cfg
    }

    pub fn core_node(&self) -> NodeId {
        self.core
    }

    pub fn ue_count(&self) -> u32 {
        self.ues.len() as u32
    }

    pub fn enb_count(&self) -> u32 {
        self.enbs.len() as u32
    }

    pub fn serving(&self, ue: u32) -> Option<u32> {
        self.ues.get(ue as usize).and_then(|u| u.serving)
    }

    pub fn ue_state(&self, ue: u32) -> Option<LteUeState> {
        self.ues.get(ue as usize).map(|u| u.state)
    }

    pub fn ue_keys(&self, ue: u32) -> Option<SessionKeys> {
        self.ues.get(ue as usize).and_then(|u| u.keys)
    }

    pub fn last_failure(&self, ue: u32) -> Option<&str> {
        self.ues.get(ue as usize).and_then(|u| u.last_failure.as_deref())
    }

    pub fn anchor(&self, ue: u32) -> Option<&AnchorState> {
        self.anchors.get(&imsi_of(ue))
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

    /// Every eNB except `enb`; S1 handover needs no shared relay.
    pub fn neighbors(&self, enb: u32) -> Vec<u32> {
        (0..self.enb_count()).filter(|&i| i != enb).collect()
    }

    /// Uplink path of `ue`'s traffic through the anchors.
    pub fn route_user_packet(&self, ue: u32) -> Result<UserPath, LteError> {
        let imsi = imsi_of(ue);
        let anchor = self.anchors.get(&imsi).ok_or(LteError::NoTunnel(ue))?;
        let lat = self.cfg.latencies;
        Ok(UserPath {
            hops: vec![
                Element::Ue(ue),
                Element::Enb(anchor.tunnel.enb()),
                Element::Sgw,
                Element::Pgw,
                Element::Internet,
            ],
            latency: lat.air + lat.backhaul + self.cfg.sgw_pgw + lat.core_internet,
        })
    }

    /// Next TEID from `at`'s own space; spaces of different nodes do not overlap.
    fn allocate_teid(&mut self, at: Element) -> u32 {
        let base = match at {
            Element::Sgw => 0x0100_0000,
            Element::Pgw => 0x0200_0000,
            Element::Enb(i) => 0x1000_0000 + (i << 16),
            _ => 0x0f00_0000,
        };
        let next = self.teids.entry(at).or_insert(0);
        *next += 1;
        base + *next
    }

    fn ue_index(&self, imsi: u64) -> Option<u32> {
        let j = imsi.checked_sub(IMSI_BASE)?;
        (j < self.ues.len() as u64).then_some(j as u32)
    }

    fn phys(&self, e: Element) -> NodeId {
        match e {
            Element::Ue(j) => self.ue_nodes[j as usize],
            Element::Enb(i) | Element::Inb(i) => self.enb_nodes[i as usize],
            Element::Internet => self.internet,
            _ => self.core,
        }
    }

    /// Sends a logical message. Every core-anchored message is served once
    /// by the core node.
    fn send(&mut self, sim: &mut Simulator<Signal>, msg: ControlMessage) {
        let from = self.phys(msg.src);
        let to = self.phys(msg.dst);
        let mut via = Vec::new();
        let src_core = msg.src.is_core();
        let dst_core = msg.dst.is_core();
        if msg.via_core && !dst_core {
            via.push(self.core);
        }
        let nas = match (msg.src, msg.dst) {
            (Element::Ue(j), d) if d.is_core() => self.ues[j as usize].camped,
            (s, Element::Ue(j)) if s.is_core() => self.ues[j as usize].camped,
            _ => None,
        };
        if let Some(i) = nas {
            via.push(self.enb_nodes[i as usize]);
        }
        let hops = if src_core && dst_core { 1 } else { via.len() + 1 };
        self.book.record(&msg, sim.now(), hops as u8);
        sim.send_via(from, &via, to, Signal::Control(msg))
            .expect("LTE topology is connected");
    }

    fn finish(&mut self, procedure: u64, now: SimTime, outcome: TraceOutcome) {
        self.book.finish(procedure, now, outcome);
    }

    pub fn start_attach(&mut self, sim: &mut Simulator<Signal>, ue: u32, enb: u32) -> Result<u64, LteError> {
        if enb >= self.enb_count() {
            return Err(LteError::UnknownEnb(enb));
        }
        let dev = self.ues.get_mut(ue as usize).ok_or(LteError::UnknownUe(ue))?;
        if dev.state != LteUeState::Detached {
            return Err(LteError::NotDetached(ue));
        }
        dev.state = LteUeState::Attaching;
        dev.camped = Some(enb);
        dev.last_failure = None;
        let imsi = dev.imsi;
        let procedure = self.book.open_log(imsi);
        let msg = ControlMessage::new(MessageKind::AttachRequest, Element::Ue(ue), Element::Mme, imsi, procedure)
            .with_payload(Payload::Attach { imsi });
        self.send(sim, msg);
        Ok(procedure)
    }

    pub fn start_handover(
        &mut self,
        sim: &mut Simulator<Signal>,
        ue: u32,
        src: u32,
        tgt: u32,
    ) -> Result<u64, LteError> {
        for e in [src, tgt] {
            if e >= self.enb_count() {
                return Err(LteError::UnknownEnb(e));
            }
        }
        let dev = self.ues.get(ue as usize).ok_or(LteError::UnknownUe(ue))?;
        if dev.state != LteUeState::Connected {
            return Err(LteError::NotConnected(ue));
        }
        let serving = dev.serving.expect("connected UE is served");
        if serving != src {
            return Err(LteError::WrongSource {
                ue,
                serving,
                claimed: src,
            });
        }
        if src == tgt {
            return Err(LteError::SameEnb(src));
        }
        let imsi = dev.imsi;
        let ctx = self.enbs[src as usize]
            .contexts
            .get_mut(&imsi)
            .expect("serving eNB holds the context");
        if ctx.state != EnbContextState::Active {
            return Err(LteError::NotConnected(ue));
        }
        ctx.state = EnbContextState::Preparing { target: tgt };
        let qci = ctx.qci;
        let procedure = self.book.open_handover(imsi, HandoverMode::S1, src, tgt, sim.now());
        let addr = assign_private_addr(imsi).expect("provisioned IMSIs are nonzero");
        let msg = ControlMessage::new(MessageKind::HoRequired, Element::Enb(src), Element::Mme, imsi, procedure)
            .with_payload(Payload::Handover(HandoverContext {
                source: src,
                target: tgt,
                addr,
                qci,
                keys: None,
            }));
        self.send(sim, msg);
        Ok(procedure)
    }

    /// Injects a downlink packet from the Internet to `ue`'s public address.
    pub fn send_downlink(&mut self, sim: &mut Simulator<Signal>, ue: u32, payload: Vec<u8>) -> Result<u64, LteError> {
        let imsi = imsi_of(ue);
        let anchor = self.anchors.get(&imsi).ok_or(LteError::NoTunnel(ue))?;
        let id = self.data.sent;
        self.data.sent += 1;
        let pkt = DataPacket {
            id,
            imsi,
            packet: Packet {
                src: Addr128::from_parts(0x2001_0db8_ffff_0000, 1),
                dst: anchor.public_ip,
                payload,
            },
            sent_at: sim.now(),
        };
        sim.send(self.internet, self.gateway, Signal::Data(pkt))?;
        Ok(id)
    }

    fn on_data(&mut self, sim: &mut Simulator<Signal>, node: NodeId, origin: NodeId, pkt: DataPacket) {
        let now = sim.now();
        match self.roles[node.0 as usize] {
            Role::Gateway => {
                let Some(anchor) = self.anchors.get_mut(&pkt.imsi) else {
                    self.data.dropped.push((pkt.id, now));
                    return;
                };
                let forwarded = matches!(self.roles[origin.0 as usize], Role::Enb(_));
                if forwarded && anchor.indirect {
                    // Returned by the source eNB over the indirect tunnel.
                    if self.cfg.buffer_cap.is_some_and(|cap| anchor.buffer.len() >= cap) {
                        self.data.dropped.push((pkt.id, now));
                    } else {
                        anchor.buffer.push_back(pkt);
                    }
                    return;
                }
                let enb = self.enb_nodes[anchor.tunnel.enb() as usize];
                sim.send(node, enb, Signal::Data(pkt)).expect("gateway reaches eNBs");
            }
            Role::Enb(i) => {
                let state = self.enbs[i as usize].contexts.get(&pkt.imsi).map(|c| c.state);
                match state {
                    Some(EnbContextState::Active | EnbContextState::Preparing { .. }) => {
                        let ue = self.ue_index(pkt.imsi).expect("known UE");
                        sim.send(node, self.ue_nodes[ue as usize], Signal::Data(pkt))
                            .expect("air link exists");
                    }
                    Some(EnbContextState::HandedOff { .. }) => {
                        sim.send(node, self.gateway, Signal::Data(pkt))
                            .expect("eNB reaches gateway");
                    }
                    _ => self.data.dropped.push((pkt.id, now)),
                }
            }
            Role::Ue(_) => self.data.delivered.push((pkt.id, now)),
            _ => self.unexpected += 1,
        }
    }

    fn on_control(&mut self, sim: &mut Simulator<Signal>, msg: ControlMessage) {
        use MessageKind as K;
        let now = sim.now();
        let p = msg.procedure;
        let imsi = msg.ue;
        match (msg.dst, msg.kind) {
            (Element::Mme, K::AttachRequest) => {
                let Some(rec) = self.subdb.get_mut(&imsi) else {
                    let reply = ControlMessage::new(K::AttachReject, Element::Mme, msg.src, imsi, p)
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
                self.sessions.insert(
                    imsi,
                    MmeSession {
                        keys: derive_k_enb(&vector.k_asme, 0),
                        qci,
                        pending: Some(vector),
                        target_teid: None,
                    },
                );
                let reply = ControlMessage::new(K::AuthChallenge, Element::Mme, msg.src, imsi, p)
                    .with_payload(Payload::Challenge {
                        rand: vector.rand,
                        autn: vector.autn,
                    });
                self.send(sim, reply);
            }
            (Element::Ue(j), K::AuthChallenge) => {
                let Payload::Challenge { rand, autn } = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let dev = &mut self.ues[j as usize];
                let reply = match dev.sec.process_challenge(rand, autn) {
                    Ok(resp) => {
                        dev.k_asme = Some(resp.k_asme);
                        ControlMessage::new(K::AuthResponse, Element::Ue(j), Element::Mme, imsi, p)
                            .with_payload(Payload::Response { res: resp.res })
                    }
                    Err(e) => {
                        dev.state = LteUeState::Detached;
                        dev.last_failure = Some(e.to_string());
                        ControlMessage::new(K::AuthFailure, Element::Ue(j), Element::Mme, imsi, p)
                            .with_payload(Payload::Failure { cause: e.to_string() })
                    }
                };
                self.send(sim, reply);
            }
            (Element::Mme, K::AuthFailure) => {
                let cause = match msg.payload {
                    Payload::Failure { cause } => cause,
                    _ => "authentication failure".into(),
                };
                self.sessions.remove(&imsi);
                self.finish(p, now, TraceOutcome::Failed(cause));
            }
            (Element::Mme, K::AuthResponse) => {
                let Payload::Response { res } = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let ok = self
                    .sessions
                    .get(&imsi)
                    .and_then(|s| s.pending)
                    .is_some_and(|v| v.xres == res);
                if !ok {
                    let reply = ControlMessage::new(K::AttachReject, Element::Mme, msg.src, imsi, p)
                        .with_payload(Payload::Failure {
                            cause: "RES mismatch".into(),
                        });
                    self.send(sim, reply);
                    return;
                }
                let req = ControlMessage::new(K::CreateSessionRequest, Element::Mme, Element::Sgw, imsi, p);
                self.send(sim, req);
            }
            (Element::Sgw, K::CreateSessionRequest) => {
                let ue = self.ue_index(imsi).expect("known UE");
                let enb = self.ues[ue as usize].camped.expect("attaching UE is camped");
                let teid_up = self.allocate_teid(Element::Sgw);
                let s5_down = self.allocate_teid(Element::Sgw);
                let s5_up = self.allocate_teid(Element::Pgw);
                let tunnel = GtpTunnel {
                    s1: TunnelSegment {
                        upstream: Element::Sgw,
                        downstream: Element::Enb(enb),
                        teid_up,
                        teid_down: 0,
                    },
                    s5: TunnelSegment {
                        upstream: Element::Pgw,
                        downstream: Element::Sgw,
                        teid_up: s5_up,
                        teid_down: s5_down,
                    },
                };
                let public_ip = Addr128::from_parts(PGW_POOL, imsi);
                self.anchors.insert(
                    imsi,
                    AnchorState {
                        public_ip,
                        tunnel,
                        indirect: false,
                        buffer: VecDeque::new(),
                    },
                );
                let reply = ControlMessage::new(K::CreateSessionResponse, Element::Sgw, Element::Mme, imsi, p)
                    .with_payload(Payload::Tunnel { teid: teid_up });
                self.send(sim, reply);
            }
            (Element::Mme, K::CreateSessionResponse) => {
                let Some(session) = self.sessions.get_mut(&imsi) else {
                    self.unexpected += 1;
                    return;
                };
                let vector = session.pending.take().expect("response follows challenge");
                session.keys = derive_k_enb(&vector.k_asme, 0);
                let (keys, qci) = (session.keys, session.qci);
                let ue = self.ue_index(imsi).expect("known UE");
                let enb = self.ues[ue as usize].camped.expect("attaching UE is camped");
                let addr = assign_private_addr(imsi).expect("nonzero IMSI");
                let setup = ControlMessage::new(K::InitialContextSetup, Element::Mme, Element::Enb(enb), imsi, p)
                    .with_payload(Payload::ContextSetup { keys, addr, qci });
                self.send(sim, setup);
            }
            (Element::Enb(i), K::InitialContextSetup) => {
                let Payload::ContextSetup { keys, addr, qci } = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let teid = self.allocate_teid(Element::Enb(i));
                if let Some(a) = self.anchors.get_mut(&imsi) {
                    a.tunnel.s1.teid_down = teid;
                }
                self.enbs[i as usize].contexts.insert(
                    imsi,
                    EnbContext {
                        state: EnbContextState::Active,
                        keys,
                        qci,
                    },
                );
                let ue = self.ue_index(imsi).expect("known UE");
                let accept = ControlMessage::new(K::AttachAccept, Element::Enb(i), Element::Ue(ue), imsi, p)
                    .with_payload(Payload::Accept { addr });
                self.send(sim, accept);
            }
            (Element::Ue(j), K::AttachAccept) => {
                let Element::Enb(i) = msg.src else {
                    self.unexpected += 1;
                    return;
                };
                let dev = &mut self.ues[j as usize];
                let k_asme = dev.k_asme.expect("accept follows challenge");
                dev.keys = Some(derive_k_enb(&k_asme, 0));
                dev.serving = Some(i);
                dev.state = LteUeState::Connected;
                self.finish(p, now, TraceOutcome::Completed);
            }
            (Element::Ue(j), K::AttachReject) => {
                let cause = match msg.payload {
                    Payload::Failure { cause } => cause,
                    _ => "rejected".into(),
                };
                let dev = &mut self.ues[j as usize];
                dev.state = LteUeState::Detached;
                dev.camped = None;
                dev.last_failure = Some(cause.clone());
                self.finish(p, now, TraceOutcome::Failed(cause));
            }
            // S1 handover
            (Element::Mme, K::HoRequired) => {
                let Payload::Handover(mut ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let Some(session) = self.sessions.get_mut(&imsi) else {
                    self.unexpected += 1;
                    return;
                };
                ho.keys = Some(chain_k_enb(&session.keys));
                let req = ControlMessage::new(K::HoRequest, Element::Mme, Element::Enb(ho.target), imsi, p)
                    .with_payload(Payload::Handover(ho));
                self.send(sim, req);
            }
            (Element::Enb(t), K::HoRequest) => {
                let Payload::Handover(ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let enb = &self.enbs[t as usize];
                let full = self.cfg.admission_cap.is_some_and(|cap| {
                    enb.contexts
                        .values()
                        .filter(|c| !matches!(c.state, EnbContextState::HandedOff { .. }))
                        .count()
                        >= cap
                });
                if full {
                    let fail = ControlMessage::new(K::HoPreparationFailure, Element::Enb(t), Element::Mme, imsi, p)
                        .with_payload(Payload::Handover(ho));
                    self.send(sim, fail);
                    return;
                }
                let teid = self.allocate_teid(Element::Enb(t));
                self.enbs[t as usize].contexts.insert(
                    imsi,
                    EnbContext {
                        state: EnbContextState::Pending {
                            source: ho.source,
                            teid,
                        },
                        keys: ho.keys.expect("MME supplies keys"),
                        qci: ho.qci,
                    },
                );
                let ack = ControlMessage::new(K::HoRequestAck, Element::Enb(t), Element::Mme, imsi, p)
                    .with_payload(Payload::Handover(ho));
                self.send(sim, ack);
            }
            (Element::Mme, K::HoPreparationFailure) => {
                let Payload::Handover(ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let fail = ControlMessage::new(K::HoPreparationFailure, Element::Mme, Element::Enb(ho.source), imsi, p);
                self.send(sim, fail);
            }
            (Element::Enb(s), K::HoPreparationFailure) => {
                if let Some(ctx) = self.enbs[s as usize].contexts.get_mut(&imsi) {
                    ctx.state = EnbContextState::Active;
                }
                self.finish(p, now, TraceOutcome::Failed("target refused admission".into()));
            }
            (Element::Mme, K::HoRequestAck) => {
                let Payload::Handover(ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                if let Some(s) = self.sessions.get_mut(&imsi) {
                    s.keys = ho.keys.expect("keys travel with the context");
                }
                let req = ControlMessage::new(K::CreateIndirectTunnelReq, Element::Mme, Element::Sgw, imsi, p)
                    .with_payload(Payload::Handover(ho));
                self.send(sim, req);
            }
            (Element::Sgw, K::CreateIndirectTunnelReq) => {
                if let Some(anchor) = self.anchors.get_mut(&imsi) {
                    anchor.indirect = true;
                }
                let resp = ControlMessage::new(K::CreateIndirectTunnelResp, Element::Sgw, Element::Mme, imsi, p)
                    .with_payload(msg.payload);
                self.send(sim, resp);
            }
            (Element::Mme, K::CreateIndirectTunnelResp) => {
                let Payload::Handover(ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let cmd = ControlMessage::new(K::HoCommand, Element::Mme, Element::Enb(ho.source), imsi, p)
                    .with_payload(Payload::Handover(ho));
                self.send(sim, cmd);
            }
            (Element::Enb(s), K::HoCommand) => {
                let Payload::Handover(ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                if let Some(ctx) = self.enbs[s as usize].contexts.get_mut(&imsi) {
                    ctx.state = EnbContextState::HandedOff { target: ho.target };
                }
                let ue = self.ue_index(imsi).expect("known UE");
                let to_ue = ControlMessage::new(K::HoCommand, Element::Enb(s), Element::Ue(ue), imsi, p)
                    .core_anchored()
                    .with_payload(Payload::Handover(ho.clone()));
                self.send(sim, to_ue);
                let status = ControlMessage::new(K::EnbStatusTransfer, Element::Enb(s), Element::Mme, imsi, p)
                    .with_payload(Payload::Handover(ho));
                self.send(sim, status);
            }
            (Element::Mme, K::EnbStatusTransfer) => {
                let Payload::Handover(ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let fwd = ControlMessage::new(K::MmeStatusTransfer, Element::Mme, Element::Enb(ho.target), imsi, p);
                self.send(sim, fwd);
            }
            (Element::Enb(_), K::MmeStatusTransfer) => {}
            (Element::Ue(j), K::HoCommand) => {
                let Payload::Handover(ho) = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let dev = &mut self.ues[j as usize];
                if let (Some(keys), Some(new)) = (dev.keys, ho.keys) {
                    let mut k = keys;
                    while k.ncc < new.ncc {
                        k = chain_k_enb(&k);
                    }
                    dev.keys = Some(k);
                }
                dev.serving = Some(ho.target);
                dev.camped = Some(ho.target);
                let confirm = ControlMessage::new(K::HoConfirm, Element::Ue(j), Element::Enb(ho.target), imsi, p)
                    .core_anchored();
                self.send(sim, confirm);
            }
            (Element::Enb(t), K::HoConfirm) => {
                let Some(ctx) = self.enbs[t as usize].contexts.get_mut(&imsi) else {
                    self.unexpected += 1;
                    return;
                };
                let EnbContextState::Pending { teid, .. } = ctx.state else {
                    self.unexpected += 1;
                    return;
                };
                ctx.state = EnbContextState::Active;
                let notify = ControlMessage::new(K::HoNotify, Element::Enb(t), Element::Mme, imsi, p)
                    .with_payload(Payload::Tunnel { teid });
                if let Some(s) = self.sessions.get_mut(&imsi) {
                    s.target_teid = Some(teid);
                }
                self.send(sim, notify);
            }
            (Element::Mme, K::HoNotify) => {
                let req = ControlMessage::new(K::ModifyBearerReq, Element::Mme, Element::Sgw, imsi, p)
                    .with_payload(msg.payload);
                self.send(sim, req);
            }
            (Element::Sgw, K::ModifyBearerReq) => {
                let Payload::Tunnel { teid } = msg.payload else {
                    self.unexpected += 1;
                    return;
                };
                let target = self
                    .book
                    .handover(p)
                    .map(|t| t.target)
                    .expect("bearer change belongs to a handover");
                if let Some(anchor) = self.anchors.get_mut(&imsi) {
                    anchor.tunnel.s1.downstream = Element::Enb(target);
                    anchor.tunnel.s1.teid_down = teid;
                    anchor.indirect = false;
                    let node = self.enb_nodes[target as usize];
                    for pkt in anchor.buffer.drain(..) {
                        sim.send(self.gateway, node, Signal::Data(pkt))
                            .expect("gateway reaches eNBs");
                    }
                }
                let resp = ControlMessage::new(K::ModifyBearerResp, Element::Sgw, Element::Mme, imsi, p);
                self.send(sim, resp);
            }
            (Element::Mme, K::ModifyBearerResp) => {
                let Some(source) = self.book.handover(p).map(|t| t.source) else {
                    self.unexpected += 1;
                    return;
                };
                let cmd = ControlMessage::new(K::UeContextReleaseCommand, Element::Mme, Element::Enb(source), imsi, p);
                self.send(sim, cmd);
            }
            (Element::Enb(s), K::UeContextReleaseCommand) => {
                self.enbs[s as usize].contexts.remove(&imsi);
                let done = ControlMessage::new(K::UeContextReleaseComplete, Element::Enb(s), Element::Mme, imsi, p);
                self.send(sim, done);
            }
            (Element::Mme, K::UeContextReleaseComplete) => {
                self.finish(p, now, TraceOutcome::Completed);
            }
            _ => self.unexpected += 1,
        }
    }
}

impl Process<Signal> for LteControl {
    fn on_message(&mut self, sim: &mut Simulator<Signal>, d: Delivery<Signal>) {
        match d.msg {
            Signal::Data(pkt) => self.on_data(sim, d.node, d.origin, pkt),
            Signal::Control(msg) => self.on_control(sim, msg),
        }
    }
}

/// An LTE deployment together with its simulator.
pub struct LteNetwork {
    pub sim: Simulator<Signal>,
    pub control: LteControl,
}

impl LteNetwork {
    pub fn new(cfg: LteConfig) -> Result<Self, LteError> {
        let mut sim = Simulator::new(cfg.seed).with_service_model(cfg.service_model);
        let control = LteControl::build(cfg, &mut sim)?;
        Ok(Self { sim, control })
    }

    pub fn run(&mut self) -> RunStats {
        self.sim.run(&mut self.control)
    }

    pub fn attach_lte(&mut self, ue: u32, enb: u32) -> Result<GtpTunnel, LteError> {
        let procedure = self.control.start_attach(&mut self.sim, ue, enb)?;
        self.run();
        let log = self.control.procedure_log(procedure).expect("attach recorded");
        match &log.outcome {
            TraceOutcome::Completed => Ok(self.control.anchor(ue).expect("anchored").tunnel),
            TraceOutcome::Failed(cause) => Err(LteError::AttachFailed {
                ue,
                cause: cause.clone(),
            }),
            TraceOutcome::InProgress => Err(LteError::Unfinished(procedure)),
        }
    }

    pub fn s1_handover(&mut self, ue: u32, src: u32, tgt: u32) -> Result<HandoverTrace, LteError> {
        let procedure = self.control.start_handover(&mut self.sim, ue, src, tgt)?;
        self.run();
        self.control.drain_finished();
        Ok(self
            .control
            .handover_trace(procedure)
            .cloned()
            .expect("handover recorded"))
    }
}
