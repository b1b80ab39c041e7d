//! Mobility-tolerant transport with passive connection migration, running on
//! the simulation kernel through the iNB NAT, plus three toy applications:
//! bulk download, buffered video with buffer-based ABR, and a live stream.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{
    assign_private_addr, Addr128, DownlinkOutcome, InbNat, InbPrefix, Packet, RecentlyMovedTable,
};
use crate::sim::{
    Categorize, Delivery, EventHandle, NodeId, Process, SimError, SimTime, Simulator,
};

const SERVER_LOCATOR: u64 = 0x2001_0db8_5e5e_0000;
const CLIENT_SUBSCRIBER: u64 = 0xc1;

const TOKEN_RTO: u64 = 1;
const TOKEN_FRAME: u64 = 2;
const TOKEN_IDLE: u64 = 3;
const TOKEN_WAKE: u64 = 4;
const TOKEN_WATCHDOG: u64 = 5;
const TOKEN_END: u64 = 6;
const TOKEN_HANDOVER: u64 = 1_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid transport configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub bandwidth_mbps: f64,
    pub packet_bytes: u32,
    pub wan_latency: SimTime,
    pub air_latency: SimTime,
    /// Latency between neighbouring iNBs, used by forwarded packets.
    pub edge_latency: SimTime,
    pub inbs: u32,
    pub initial_window: u32,
    pub max_window: u32,
    /// RTT assumed before the first sample.
    pub initial_rtt: SimTime,
    pub min_rto: SimTime,
    pub max_rto: SimTime,
    pub forwarding: bool,
    pub moved_ttl: SimTime,
    /// Safety horizon for runs that would otherwise never end.
    pub max_duration: SimTime,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            bandwidth_mbps: 20.0,
            packet_bytes: 1200,
            wan_latency: SimTime::from_millis(20),
            air_latency: SimTime::from_millis(2),
            edge_latency: SimTime::from_millis(2),
            inbs: 2,
            initial_window: 10,
            max_window: 600,
            initial_rtt: SimTime::from_millis(100),
            min_rto: SimTime::from_millis(20),
            max_rto: SimTime::from_secs(8),
            forwarding: true,
            moved_ttl: SimTime::from_secs(2),
            max_duration: SimTime::from_secs(600),
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), TransportError> {
        let bad = |m: &str| Err(TransportError::Config(m.to_string()));
        if !(self.bandwidth_mbps > 0.0 && self.bandwidth_mbps.is_finite()) {
            return bad("bandwidth must be positive");
        }
        if self.packet_bytes == 0 {
            return bad("packet size must be positive");
        }
        if self.inbs < 2 {
            return bad("at least two iNBs are needed to migrate");
        }
        if self.initial_window == 0 || self.max_window < self.initial_window {
            return bad("window bounds are inconsistent");
        }
        Ok(())
    }

    fn packets_per_sec(&self) -> f64 {
        self.bandwidth_mbps * 1e6 / (8.0 * self.packet_bytes as f64)
    }
}

/// Connection state shared by both ends. The server learns a new client
/// address only from a packet carrying this connection id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MobiConn {
    pub id: u64,
    pub client_addr: Addr128,
    /// Where the server sends; may be stale.
    pub server_path: Addr128,
}

impl MobiConn {
    pub fn new(id: u64, client_addr: Addr128) -> Self {
        Self {
            id,
            client_addr,
            server_path: client_addr,
        }
    }

    /// Changes the client's address without telling the server. Returns
    /// false when the address is unchanged.
    pub fn client_migrate(&mut self, new_addr: Addr128) -> bool {
        if new_addr == self.client_addr {
            return false;
        }
        self.client_addr = new_addr;
        true
    }

    /// Server-side receipt of a packet. Returns true when the path moved.
    pub fn server_receive(&mut self, conn_id: u64, src: Addr128) -> bool {
        if conn_id != self.id || src == self.server_path {
            return false;
        }
        self.server_path = src;
        true
    }

    pub fn is_stale(&self) -> bool {
        self.client_addr != self.server_path
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MigrationMode {
    PassiveOnly,
    PingOnIdle,
}

impl fmt::Display for MigrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MigrationMode::PassiveOnly => "passive",
            MigrationMode::PingOnIdle => "ping",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationPolicy {
    pub mode: MigrationMode,
    pub idle_deadline: SimTime,
}

impl MigrationPolicy {
    pub fn passive() -> Self {
        Self {
            mode: MigrationMode::PassiveOnly,
            idle_deadline: SimTime::from_millis(100),
        }
    }

    pub fn ping(idle_deadline: SimTime) -> Self {
        Self {
            mode: MigrationMode::PingOnIdle,
            idle_deadline,
        }
    }

    /// Ping policy with the deadline at 1.5 frame intervals.
    pub fn ping_for_frames(frame_interval: SimTime) -> Self {
        Self::ping(SimTime::from_micros(frame_interval.as_micros() * 3 / 2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HandoverTrigger {
    At(SimTime),
    /// Migrate `delay` after the first completed frame or chunk at or after
    /// `not_before`, i.e. while the client has nothing outstanding.
    AfterIdle { not_before: SimTime, delay: SimTime },
    /// Migrate `delay` after the first chunk request at or after
    /// `not_before`, i.e. while that chunk is being fetched.
    AfterRequest { not_before: SimTime, delay: SimTime },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HandoverSchedule {
    pub triggers: Vec<HandoverTrigger>,
}

impl HandoverSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(times: &[SimTime]) -> Self {
        Self {
            triggers: times.iter().map(|&t| HandoverTrigger::At(t)).collect(),
        }
    }

    /// Roughly periodic handovers in `[start, end)` with seeded jitter of up
    /// to half a period either way.
    pub fn jittered(start: SimTime, end: SimTime, period: SimTime, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = period.as_micros();
        let mut times = Vec::new();
        let mut t = start.as_micros() + p / 2;
        while t < end.as_micros() {
            let j = rng.random_range(0..p.max(1)) as i64 - (p / 2) as i64;
            times.push(SimTime::from_micros((t as i64 + j).max(start.as_micros() as i64) as u64));
            t += p;
        }
        Self::at(&times)
    }

    pub fn len(&self) -> usize {
        self.triggers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triggers.is_empty()
    }
}

/// Buffer-based bitrate selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbrState {
    /// (level, bitrate in Mbps), ascending.
    pub ladder: Vec<(u8, f64)>,
    /// Buffer lengths at which the next rung unlocks.
    pub thresholds: Vec<f64>,
    pub chunk_s: f64,
    pub buffer_s: f64,
}

impl Default for AbrState {
    fn default() -> Self {
        Self {
            ladder: vec![(1, 0.5), (2, 1.0), (3, 2.0), (4, 3.0), (5, 5.0)],
            thresholds: vec![5.0, 10.0, 15.0, 20.0],
            chunk_s: 2.0,
            buffer_s: 0.0,
        }
    }
}

impl AbrState {
    pub fn select(&self) -> (u8, f64) {
        let rung = self
            .thresholds
            .iter()
            .filter(|&&t| self.buffer_s >= t)
            .count()
            .min(self.ladder.len() - 1);
        self.ladder[rung]
    }

    pub fn chunk_bytes(&self, bitrate_mbps: f64) -> u64 {
        (bitrate_mbps * 1e6 * self.chunk_s / 8.0).round() as u64
    }

    pub fn top_threshold(&self) -> f64 {
        self.thresholds.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppKind {
    Bulk,
    Buffered,
    Live,
}

impl fmt::Display for AppKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AppKind::Bulk => "bulk",
            AppKind::Buffered => "buffered",
            AppKind::Live => "live",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppMetrics {
    pub app: AppKind,
    pub policy: MigrationMode,
    pub handovers: u32,
    pub throughput_mbps: f64,
    pub packets_sent: u64,
    pub retransmissions: u64,
    /// Retransmitted packets per second of transfer.
    pub retx_rate: f64,
    pub retx_per_packet: f64,
    pub stall_s: f64,
    pub buffer_s: f64,
    pub quality: f64,
    pub frames: u64,
    pub fps: f64,
    pub deadlocked: bool,
    /// Transport control packets the client sent beyond acknowledgements.
    pub pings: u64,
    pub dropped_at_nat: u64,
    pub forwarded_at_nat: u64,
    pub elapsed_s: f64,
    pub migration_times: Vec<SimTime>,
}

/// One CSV row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub app: String,
    pub policy: String,
    pub handovers: u32,
    pub throughput_mbps: f64,
    pub retx_rate: f64,
    pub stall_s: f64,
    pub buffer_s: f64,
    pub quality: f64,
    pub fps: f64,
    pub deadlocked: bool,
}

impl AppMetrics {
    pub fn row(&self) -> MetricsRow {
        MetricsRow {
            app: self.app.to_string(),
            policy: self.policy.to_string(),
            handovers: self.handovers,
            throughput_mbps: self.throughput_mbps,
            retx_rate: self.retx_rate,
            stall_s: self.stall_s,
            buffer_s: self.buffer_s,
            quality: self.quality,
            fps: self.fps,
            deadlocked: self.deadlocked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferedParams {
    pub duration: SimTime,
    pub abr: AbrState,
    pub max_buffer_s: f64,
}

impl Default for BufferedParams {
    fn default() -> Self {
        Self {
            duration: SimTime::from_secs(60),
            abr: AbrState::default(),
            max_buffer_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveParams {
    pub frame_interval: SimTime,
    pub frame_bytes: u32,
    pub duration: SimTime,
    /// No completed frame for this long counts as a deadlock.
    pub give_up: SimTime,
}

impl Default for LiveParams {
    fn default() -> Self {
        Self {
            frame_interval: SimTime::from_micros(41_667),
            frame_bytes: 20_000,
            duration: SimTime::from_secs(20),
            give_up: SimTime::from_secs(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Body {
    Data {
        pn: u64,
        unit: u64,
        tag: u64,
        tag_units: u32,
        bytes: u32,
    },
    Ack {
        pn: u64,
    },
    Ping,
    Request {
        tag: u64,
        bytes: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wire {
    src: Addr128,
    dst: Addr128,
    conn: u64,
    body: Body,
}

impl Categorize for Wire {
    fn category(&self) -> &'static str {
        match self.body {
            Body::Data { .. } => "data",
            Body::Ack { .. } => "ack",
            Body::Ping => "ping",
            Body::Request { .. } => "request",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    id: u64,
    tag: u64,
    tag_units: u32,
    bytes: u32,
    retx: bool,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    unit: Unit,
    sent_at: SimTime,
}

/// Server-side reliability and AIMD window.
#[derive(Debug)]
struct Sender {
    next_pn: u64,
    next_unit: u64,
    pending: VecDeque<Unit>,
    outstanding: BTreeMap<u64, InFlight>,
    cwnd: f64,
    ssthresh: f64,
    srtt: Option<f64>,
    backoff: u32,
    rto_timer: Option<EventHandle>,
    last_send: SimTime,
    sent: u64,
    retransmitted: u64,
}

impl Sender {
    fn new(cfg: &TransportConfig) -> Self {
        Self {
            next_pn: 0,
            next_unit: 0,
            pending: VecDeque::new(),
            outstanding: BTreeMap::new(),
            cwnd: cfg.initial_window as f64,
            ssthresh: f64::INFINITY,
            srtt: None,
            backoff: 0,
            rto_timer: None,
            last_send: SimTime::ZERO,
            sent: 0,
            retransmitted: 0,
        }
    }

    fn enqueue(&mut self, tag: u64, bytes: u64, packet: u32) {
        let units = bytes.div_ceil(packet as u64).max(1) as u32;
        for i in 0..units {
            let size = if i + 1 == units {
                (bytes - (units as u64 - 1) * packet as u64).max(1) as u32
            } else {
                packet
            };
            self.pending.push_back(Unit {
                id: self.next_unit,
                tag,
                tag_units: units,
                bytes: size,
                retx: false,
            });
            self.next_unit += 1;
        }
    }

    fn rto(&self, cfg: &TransportConfig) -> SimTime {
        let base = self
            .srtt
            .map_or(2.0 * cfg.initial_rtt.as_secs_f64(), |s| 2.0 * s)
            .max(cfg.min_rto.as_secs_f64());
        let backed = base * f64::powi(2.0, self.backoff.min(20) as i32);
        SimTime::from_secs_f64(backed.min(cfg.max_rto.as_secs_f64()))
    }
}

#[derive(Debug)]
struct Client {
    private: Addr128,
    serving: usize,
    received_units: HashSet<u64>,
    tag_progress: HashMap<u64, u32>,
    last_rx: SimTime,
    ping_pending: bool,
    idle_timer: Option<EventHandle>,
    pings: u64,
    migrations: u32,
    bytes: u64,
}

#[derive(Debug)]
struct BufferedApp {
    params: BufferedParams,
    abr: AbrState,
    started: bool,
    warm: bool,
    last_update: SimTime,
    warm_since: SimTime,
    stall_s: f64,
    buffer_integral: f64,
    levels: Vec<u8>,
    warm_levels: Vec<u8>,
    requested: HashMap<u64, (u8, bool)>,
    next_chunk: u64,
    waiting: bool,
}

impl BufferedApp {
    /// Drains the playback buffer up to `now`.
    fn advance(&mut self, now: SimTime) {
        let dt = (now - self.last_update).as_secs_f64();
        self.last_update = now;
        if !self.started || dt <= 0.0 {
            return;
        }
        let b = self.abr.buffer_s;
        let area = if b >= dt {
            self.abr.buffer_s = b - dt;
            b * dt - dt * dt / 2.0
        } else {
            self.stall_s += dt - b;
            self.abr.buffer_s = 0.0;
            b * b / 2.0
        };
        if self.warm {
            self.buffer_integral += area;
        }
    }
}

#[derive(Debug)]
struct LiveApp {
    params: LiveParams,
    next_frame: u64,
    frames_done: u64,
    last_frame_done: SimTime,
}

#[derive(Debug)]
enum App {
    Bulk { total: u64, done_at: Option<SimTime> },
    Buffered(Box<BufferedApp>),
    Live(LiveApp),
}

#[derive(Debug, Clone, Copy)]
struct Nodes {
    server: NodeId,
    client: NodeId,
    first_inb: u32,
}

struct Harness {
    cfg: TransportConfig,
    policy: MigrationPolicy,
    nodes: Nodes,
    nats: Vec<InbNat>,
    conn: MobiConn,
    server_addr: Addr128,
    sender: Sender,
    client: Client,
    app: App,
    /// Triggers waiting for an application event.
    relative: Vec<HandoverTrigger>,
    timed_handovers: u64,
    migration_times: Vec<SimTime>,
    deadlocked: bool,
    end: SimTime,
}

impl Harness {
    fn inb_node(&self, index: usize) -> NodeId {
        NodeId(self.nodes.first_inb + index as u32)
    }

    fn inb_index(&self, node: NodeId) -> Option<usize> {
        let i = node.0.checked_sub(self.nodes.first_inb)? as usize;
        (i < self.nats.len()).then_some(i)
    }

    fn inb_for_locator(&self, locator: u64) -> Option<usize> {
        self.nats.iter().position(|n| n.prefix.locator() == locator)
    }

    fn client_public(&self) -> Addr128 {
        let pkt = Packet {
            src: self.client.private,
            dst: self.server_addr,
            payload: Vec::new(),
        };
        let mut nat = self.nats[self.client.serving].clone();
        nat.uplink(pkt).src
    }

    fn client_send(&mut self, sim: &mut Simulator<Wire>, body: Body) {
        let pkt = Packet {
            src: self.client.private,
            dst: self.server_addr,
            payload: Vec::new(),
        };
        let pkt = self.nats[self.client.serving].uplink(pkt);
        let wire = Wire {
            src: pkt.src,
            dst: pkt.dst,
            conn: self.conn.id,
            body,
        };
        // Uplink is not rate limited, so it skips the iNB's downlink queue.
        sim.send(self.nodes.client, self.nodes.server, wire)
            .expect("uplink route");
    }

    fn pump(&mut self, sim: &mut Simulator<Wire>) {
        let now = sim.now();
        let rto = self.sender.rto(&self.cfg);
        if self.sender.outstanding.is_empty() && now.saturating_sub(self.sender.last_send) > rto {
            // Restart after idle.
            self.sender.cwnd = self.sender.cwnd.min(self.cfg.initial_window as f64);
        }
        while (self.sender.outstanding.len() as f64) < self.sender.cwnd.floor() {
            let Some(unit) = self.sender.pending.pop_front() else {
                break;
            };
            let pn = self.sender.next_pn;
            self.sender.next_pn += 1;
            self.sender.sent += 1;
            if unit.retx {
                self.sender.retransmitted += 1;
            }
            self.sender.last_send = now;
            self.sender.outstanding.insert(pn, InFlight { unit, sent_at: now });
            let dst = self.conn.server_path;
            let inb = self
                .inb_for_locator(dst.locator())
                .expect("server path points at a known iNB");
            let wire = Wire {
                src: self.server_addr,
                dst,
                conn: self.conn.id,
                body: Body::Data {
                    pn,
                    unit: unit.id,
                    tag: unit.tag,
                    tag_units: unit.tag_units,
                    bytes: unit.bytes,
                },
            };
            sim.send(self.nodes.server, self.inb_node(inb), wire)
                .expect("downlink route");
        }
        self.arm_rto(sim);
    }

    fn arm_rto(&mut self, sim: &mut Simulator<Wire>) {
        if self.sender.rto_timer.is_some() {
            return;
        }
        let Some(first) = self.sender.outstanding.values().next() else {
            return;
        };
        let at = (first.sent_at + self.sender.rto(&self.cfg)).max(sim.now());
        let h = sim
            .schedule_timer(at, self.nodes.server, TOKEN_RTO)
            .expect("future timer");
        self.sender.rto_timer = Some(h);
    }

    fn rearm_rto(&mut self, sim: &mut Simulator<Wire>) {
        if let Some(h) = self.sender.rto_timer.take() {
            sim.cancel(h);
        }
        self.arm_rto(sim);
    }

    /// Timeout: everything in flight is presumed lost and resent, as after
    /// a retransmission timeout in TCP.
    fn on_rto(&mut self, sim: &mut Simulator<Wire>) {
        self.sender.rto_timer = None;
        let rto = self.sender.rto(&self.cfg);
        let expired = self
            .sender
            .outstanding
            .values()
            .next()
            .is_some_and(|f| f.sent_at + rto <= sim.now());
        if !expired {
            self.arm_rto(sim);
            return;
        }
        let lost = std::mem::take(&mut self.sender.outstanding);
        for f in lost.into_values().rev() {
            self.sender.pending.push_front(Unit { retx: true, ..f.unit });
        }
        self.sender.ssthresh = (self.sender.cwnd / 2.0).max(2.0);
        self.sender.cwnd = 2.0;
        self.sender.backoff += 1;
        self.pump(sim);
    }

    fn on_ack(&mut self, sim: &mut Simulator<Wire>, pn: u64) {
        let Some(f) = self.sender.outstanding.remove(&pn) else {
            return;
        };
        let sample = (sim.now() - f.sent_at).as_secs_f64();
        self.sender.srtt = Some(match self.sender.srtt {
            None => sample,
            Some(s) => 0.875 * s + 0.125 * sample,
        });
        self.sender.backoff = 0;
        let s = &mut self.sender;
        if s.cwnd < s.ssthresh {
            s.cwnd += 1.0;
        } else {
            s.cwnd += 1.0 / s.cwnd;
        }
        s.cwnd = s.cwnd.min(self.cfg.max_window as f64);
        // The armed timer re-checks the oldest packet when it fires.
        self.pump(sim);
    }

    fn server_receive(&mut self, sim: &mut Simulator<Wire>, wire: Wire) {
        if wire.conn != self.conn.id {
            return;
        }
        self.conn.server_receive(wire.conn, wire.src);
        match wire.body {
            Body::Ack { pn } => self.on_ack(sim, pn),
            Body::Request { tag, bytes } => {
                self.sender.enqueue(tag, bytes, self.cfg.packet_bytes);
                self.pump(sim);
            }
            // The path update above is all a ping is for, but anything queued
            // behind a backed-off timer goes out now.
            Body::Ping => {
                self.sender.backoff = 0;
                self.rearm_rto(sim);
                self.pump(sim);
            }
            Body::Data { .. } => {}
        }
    }

    fn inb_receive(&mut self, sim: &mut Simulator<Wire>, index: usize, mut wire: Wire) {
        let serving = self.client.serving;
        let pkt = Packet {
            src: wire.src,
            dst: wire.dst,
            payload: Vec::new(),
        };
        match self.nats[index].downlink(pkt, |_| serving == index, sim.now()) {
            DownlinkOutcome::Deliver(p) => {
                wire.dst = p.dst;
                sim.send(self.inb_node(index), self.nodes.client, wire)
                    .expect("air link");
            }
            DownlinkOutcome::Forward(p) => {
                wire.dst = p.dst;
                let target = self
                    .inb_for_locator(p.dst.locator())
                    .expect("forwarding target is a known iNB");
                sim.send(self.inb_node(index), self.inb_node(target), wire)
                    .expect("edge link");
            }
            DownlinkOutcome::Dropped => {}
        }
    }

    fn client_receive(&mut self, sim: &mut Simulator<Wire>, wire: Wire) {
        let Body::Data {
            pn,
            unit,
            tag,
            tag_units,
            bytes,
        } = wire.body
        else {
            return;
        };
        let now = sim.now();
        self.client.last_rx = now;
        self.client.ping_pending = false;
        self.arm_idle(sim);
        self.client_send(sim, Body::Ack { pn });
        if !self.client.received_units.insert(unit) {
            return;
        }
        self.client.bytes += bytes as u64;
        let done = {
            let c = self.client.tag_progress.entry(tag).or_insert(0);
            *c += 1;
            *c == tag_units
        };
        if done {
            self.tag_complete(sim, tag);
        }
    }

    fn tag_complete(&mut self, sim: &mut Simulator<Wire>, tag: u64) {
        let now = sim.now();
        self.fire_relative(sim, |t| match t {
            HandoverTrigger::AfterIdle { not_before, delay } if now >= not_before => Some(delay),
            _ => None,
        });
        match &mut self.app {
            App::Bulk { total, done_at } => {
                if self.client.received_units.len() as u64 == *total && done_at.is_none() {
                    *done_at = Some(now);
                    sim.halt();
                }
            }
            App::Buffered(b) => {
                b.advance(now);
                b.abr.buffer_s += b.abr.chunk_s;
                if !b.started {
                    b.started = true;
                }
                if let Some((level, warm)) = b.requested.remove(&tag) {
                    b.levels.push(level);
                    if warm {
                        b.warm_levels.push(level);
                    }
                }
                if !b.warm && b.abr.buffer_s >= b.abr.top_threshold() {
                    b.warm = true;
                    b.warm_since = now;
                }
                self.request_chunk(sim);
            }
            App::Live(l) => {
                l.frames_done += 1;
                l.last_frame_done = now;
            }
        }
    }

    fn request_chunk(&mut self, sim: &mut Simulator<Wire>) {
        let now = sim.now();
        let App::Buffered(b) = &mut self.app else {
            return;
        };
        b.advance(now);
        let room = b.params.max_buffer_s - b.abr.buffer_s;
        if room < b.abr.chunk_s {
            if !b.waiting {
                b.waiting = true;
                let wait = SimTime::from_secs_f64(b.abr.chunk_s - room);
                sim.timer_after(wait, self.nodes.client, TOKEN_WAKE);
            }
            return;
        }
        let (level, rate) = b.abr.select();
        let bytes = b.abr.chunk_bytes(rate);
        let tag = b.next_chunk;
        b.next_chunk += 1;
        b.requested.insert(tag, (level, b.warm));
        self.client_send(sim, Body::Request { tag, bytes });
        self.fire_relative(sim, |t| match t {
            HandoverTrigger::AfterRequest { not_before, delay } if now >= not_before => {
                Some(delay)
            }
            _ => None,
        });
    }

    /// Schedules every waiting trigger for which `due` yields a delay.
    fn fire_relative(
        &mut self,
        sim: &mut Simulator<Wire>,
        due: impl Fn(HandoverTrigger) -> Option<SimTime>,
    ) {
        let mut fired = Vec::new();
        self.relative.retain(|&t| match due(t) {
            Some(delay) => {
                fired.push(delay);
                false
            }
            None => true,
        });
        for delay in fired {
            self.timed_handovers += 1;
            sim.timer_after(delay, self.nodes.client, TOKEN_HANDOVER + self.timed_handovers);
        }
    }

    fn arm_idle(&mut self, sim: &mut Simulator<Wire>) {
        if self.policy.mode != MigrationMode::PingOnIdle {
            return;
        }
        if let Some(h) = self.client.idle_timer.take() {
            sim.cancel(h);
        }
        let at = (self.client.last_rx + self.policy.idle_deadline).max(sim.now());
        self.client.idle_timer = Some(
            sim.schedule_timer(at, self.nodes.client, TOKEN_IDLE)
                .expect("future timer"),
        );
    }

    fn migrate(&mut self, sim: &mut Simulator<Wire>) {
        let old = self.client.serving;
        let new = (old + 1) % self.nats.len();
        let target = self.nats[new].prefix;
        let id = self.client.private.identifier();
        self.nats[old].record_move(id, target, sim.now());
        self.client.serving = new;
        self.client.migrations += 1;
        self.migration_times.push(sim.now());
        let addr = self.client_public();
        self.conn.client_migrate(addr);
        self.client.ping_pending = true;
        self.arm_idle(sim);
    }

    fn on_frame_tick(&mut self, sim: &mut Simulator<Wire>) {
        let App::Live(l) = &mut self.app else {
            return;
        };
        let tag = l.next_frame;
        l.next_frame += 1;
        let bytes = l.params.frame_bytes as u64;
        let interval = l.params.frame_interval;
        self.sender.enqueue(tag, bytes, self.cfg.packet_bytes);
        if sim.now() + interval < self.end {
            sim.timer_after(interval, self.nodes.server, TOKEN_FRAME);
        }
        self.pump(sim);
    }

    fn on_watchdog(&mut self, sim: &mut Simulator<Wire>) {
        let App::Live(l) = &self.app else {
            return;
        };
        if sim.now().saturating_sub(l.last_frame_done) > l.params.give_up {
            self.deadlocked = true;
            sim.halt();
            return;
        }
        sim.timer_after(SimTime::from_millis(100), self.nodes.client, TOKEN_WATCHDOG);
    }
}

impl Process<Wire> for Harness {
    fn on_message(&mut self, sim: &mut Simulator<Wire>, d: Delivery<Wire>) {
        if d.node == self.nodes.server {
            self.server_receive(sim, d.msg);
        } else if d.node == self.nodes.client {
            self.client_receive(sim, d.msg);
        } else if let Some(i) = self.inb_index(d.node) {
            self.inb_receive(sim, i, d.msg);
        }
    }

    fn on_timer(&mut self, sim: &mut Simulator<Wire>, _node: NodeId, token: u64) {
        match token {
            TOKEN_RTO => self.on_rto(sim),
            TOKEN_FRAME => self.on_frame_tick(sim),
            TOKEN_IDLE => {
                self.client.idle_timer = None;
                if self.client.ping_pending {
                    self.client.ping_pending = false;
                    self.client.pings += 1;
                    self.client_send(sim, Body::Ping);
                }
            }
            TOKEN_WAKE => {
                if let App::Buffered(b) = &mut self.app {
                    b.waiting = false;
                }
                self.request_chunk(sim);
            }
            TOKEN_WATCHDOG => self.on_watchdog(sim),
            TOKEN_END => sim.halt(),
            t if t >= TOKEN_HANDOVER => self.migrate(sim),
            _ => {}
        }
    }
}

/// What to run.
#[derive(Debug, Clone, PartialEq)]
pub enum AppSpec {
    Bulk { file_bytes: u64 },
    Buffered(BufferedParams),
    Live(LiveParams),
}

/// Runs one application over one handover schedule.
pub fn run_app(
    cfg: &TransportConfig,
    spec: &AppSpec,
    schedule: &HandoverSchedule,
    policy: MigrationPolicy,
    seed: u64,
) -> Result<AppMetrics, TransportError> {
    cfg.validate()?;
    let mut sim: Simulator<Wire> = Simulator::new(seed);
    let server = sim.add_node(None)?;
    let first_inb = sim.add_node(Some(cfg.packets_per_sec()))?.0;
    for _ in 1..cfg.inbs {
        sim.add_node(Some(cfg.packets_per_sec()))?;
    }
    let client = sim.add_node(None)?;
    for i in 0..cfg.inbs {
        let inb = NodeId(first_inb + i);
        sim.add_link(server, inb, cfg.wan_latency, 0.0)?;
        sim.add_link(inb, client, cfg.air_latency, 0.0)?;
        if i + 1 < cfg.inbs {
            sim.add_link(inb, NodeId(first_inb + i + 1), cfg.edge_latency, 0.0)?;
        }
    }
    let nats: Vec<InbNat> = (0..cfg.inbs)
        .map(|i| {
            let mut n = InbNat::new(InbPrefix::for_index(i), RecentlyMovedTable::new(cfg.moved_ttl));
            n.forwarding_enabled = cfg.forwarding;
            n
        })
        .collect();
    let private = assign_private_addr(CLIENT_SUBSCRIBER)
        .expect("nonzero subscriber")
        .addr();
    let conn_id = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee).random::<u64>();
    let initial = nats[0].prefix.public_addr(private.identifier());
    let end = match spec {
        AppSpec::Bulk { .. } => cfg.max_duration,
        AppSpec::Buffered(p) => p.duration.min(cfg.max_duration),
        AppSpec::Live(p) => p.duration.min(cfg.max_duration),
    };
    let app = match spec {
        AppSpec::Bulk { file_bytes } => App::Bulk {
            total: file_bytes.div_ceil(cfg.packet_bytes as u64).max(1),
            done_at: None,
        },
        AppSpec::Buffered(p) => App::Buffered(Box::new(BufferedApp {
            params: p.clone(),
            abr: AbrState {
                buffer_s: 0.0,
                ..p.abr.clone()
            },
            started: false,
            warm: false,
            last_update: SimTime::ZERO,
            warm_since: SimTime::ZERO,
            stall_s: 0.0,
            buffer_integral: 0.0,
            levels: Vec::new(),
            warm_levels: Vec::new(),
            requested: HashMap::new(),
            next_chunk: 0,
            waiting: false,
        })),
        AppSpec::Live(p) => App::Live(LiveApp {
            params: p.clone(),
            next_frame: 0,
            frames_done: 0,
            last_frame_done: SimTime::ZERO,
        }),
    };
    let nodes = Nodes {
        server,
        client,
        first_inb,
    };
    let mut h = Harness {
        cfg: cfg.clone(),
        policy,
        nodes,
        nats,
        conn: MobiConn::new(conn_id, initial),
        server_addr: Addr128::from_parts(SERVER_LOCATOR, 1),
        sender: Sender::new(cfg),
        client: Client {
            private,
            serving: 0,
            received_units: HashSet::new(),
            tag_progress: HashMap::new(),
            last_rx: SimTime::ZERO,
            ping_pending: false,
            idle_timer: None,
            pings: 0,
            migrations: 0,
            bytes: 0,
        },
        app,
        relative: Vec::new(),
        timed_handovers: 0,
        migration_times: Vec::new(),
        deadlocked: false,
        end,
    };
    for trig in &schedule.triggers {
        match *trig {
            HandoverTrigger::At(t) => {
                h.timed_handovers += 1;
                sim.schedule_timer(t, client, TOKEN_HANDOVER + h.timed_handovers)?;
            }
            _ => h.relative.push(*trig),
        }
    }
    sim.schedule_timer(end, client, TOKEN_END)?;
    match spec {
        AppSpec::Bulk { file_bytes } => {
            h.sender.enqueue(0, *file_bytes, cfg.packet_bytes);
            h.pump(&mut sim);
        }
        AppSpec::Buffered(_) => h.request_chunk(&mut sim),
        AppSpec::Live(_) => {
            sim.schedule_timer(SimTime::ZERO, server, TOKEN_FRAME)?;
            sim.schedule_timer(SimTime::from_millis(100), client, TOKEN_WATCHDOG)?;
        }
    }
    sim.run_until(end, &mut h);
    let now = sim.now();
    Ok(collect(&mut h, now, end))
}

fn collect(h: &mut Harness, now: SimTime, end: SimTime) -> AppMetrics {
    let sent = h.sender.sent;
    let retx = h.sender.retransmitted;
    let mut m = AppMetrics {
        app: AppKind::Bulk,
        policy: h.policy.mode,
        handovers: h.client.migrations,
        throughput_mbps: 0.0,
        packets_sent: sent,
        retransmissions: retx,
        retx_rate: 0.0,
        retx_per_packet: if sent == 0 { 0.0 } else { retx as f64 / sent as f64 },
        stall_s: 0.0,
        buffer_s: 0.0,
        quality: 0.0,
        frames: 0,
        fps: 0.0,
        deadlocked: h.deadlocked,
        pings: h.client.pings,
        dropped_at_nat: h.nats.iter().map(|n| n.dropped).sum(),
        forwarded_at_nat: h.nats.iter().map(|n| n.forwarded).sum(),
        elapsed_s: now.as_secs_f64(),
        migration_times: h.migration_times.clone(),
    };
    let rate = |bytes: u64, secs: f64| {
        if secs > 0.0 {
            bytes as f64 * 8.0 / secs / 1e6
        } else {
            0.0
        }
    };
    match &mut h.app {
        App::Bulk { done_at, .. } => {
            m.app = AppKind::Bulk;
            match done_at {
                Some(t) => m.throughput_mbps = rate(h.client.bytes, t.as_secs_f64()),
                None => {
                    m.deadlocked = true;
                    m.throughput_mbps = rate(h.client.bytes, now.as_secs_f64());
                }
            }
        }
        App::Buffered(b) => {
            m.app = AppKind::Buffered;
            b.advance(end.max(now));
            m.throughput_mbps = rate(h.client.bytes, end.as_secs_f64());
            m.stall_s = b.stall_s;
            let warm_span = (end - b.warm_since).as_secs_f64();
            m.buffer_s = if b.warm && warm_span > 0.0 {
                b.buffer_integral / warm_span
            } else {
                b.abr.buffer_s
            };
            let levels = if b.warm_levels.is_empty() {
                &b.levels
            } else {
                &b.warm_levels
            };
            m.quality = if levels.is_empty() {
                0.0
            } else {
                levels.iter().map(|&l| l as f64).sum::<f64>() / levels.len() as f64
            };
        }
        App::Live(l) => {
            m.app = AppKind::Live;
            m.frames = l.frames_done;
            m.fps = l.frames_done as f64 / l.params.duration.as_secs_f64();
            m.throughput_mbps = rate(h.client.bytes, end.as_secs_f64());
        }
    }
    let active = match &h.app {
        App::Bulk { done_at: Some(t), .. } => t.as_secs_f64(),
        App::Bulk { .. } => now.as_secs_f64(),
        _ => end.as_secs_f64(),
    };
    if active > 0.0 {
        m.retx_rate = retx as f64 / active;
    }
    m
}

pub fn run_bulk(
    cfg: &TransportConfig,
    file_bytes: u64,
    schedule: &HandoverSchedule,
    policy: MigrationPolicy,
    seed: u64,
) -> Result<AppMetrics, TransportError> {
    run_app(cfg, &AppSpec::Bulk { file_bytes }, schedule, policy, seed)
}

pub fn run_buffered(
    cfg: &TransportConfig,
    params: &BufferedParams,
    schedule: &HandoverSchedule,
    policy: MigrationPolicy,
    seed: u64,
) -> Result<AppMetrics, TransportError> {
    run_app(cfg, &AppSpec::Buffered(params.clone()), schedule, policy, seed)
}

pub fn run_live(
    cfg: &TransportConfig,
    params: &LiveParams,
    policy: MigrationPolicy,
    schedule: &HandoverSchedule,
    seed: u64,
) -> Result<AppMetrics, TransportError> {
    run_app(cfg, &AppSpec::Live(params.clone()), schedule, policy, seed)
}

/// A live stream that migrates during an inter-frame gap with forwarding
/// unavailable, the setting in which passive migration can deadlock.
pub fn live_idle_migration(
    cfg: &TransportConfig,
    params: &LiveParams,
    mode: MigrationMode,
    seed: u64,
) -> Result<AppMetrics, TransportError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TransportConfig {
        forwarding: false,
        ..cfg.clone()
    };
    let not_before = SimTime::from_millis(rng.random_range(1_000..4_000));
    // Frames take a few ms to arrive; stay clear of the next one.
    let gap = params.frame_interval.as_micros();
    let delay = SimTime::from_micros(rng.random_range(gap / 20..gap / 2));
    let schedule = HandoverSchedule {
        triggers: vec![HandoverTrigger::AfterIdle { not_before, delay }],
    };
    let policy = match mode {
        MigrationMode::PassiveOnly => MigrationPolicy::passive(),
        MigrationMode::PingOnIdle => MigrationPolicy::ping_for_frames(params.frame_interval),
    };
    run_live(&cfg, params, policy, &schedule, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossStudy {
    pub file_bytes: u64,
    pub buffered: BufferedParams,
    /// The handover follows the first chunk request after a seeded instant
    /// in `[earliest, latest)`.
    pub earliest: SimTime,
    pub latest: SimTime,
    /// Upper bound on the seeded delay between that request and the move.
    pub max_fetch_delay: SimTime,
}

impl Default for LossStudy {
    fn default() -> Self {
        Self {
            // About as long as the video run at the default bandwidth.
            file_bytes: 100_000_000,
            buffered: BufferedParams {
                duration: SimTime::from_secs(40),
                ..BufferedParams::default()
            },
            earliest: SimTime::from_secs(10),
            latest: SimTime::from_secs(30),
            max_fetch_delay: SimTime::from_millis(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossComparison {
    pub seed: u64,
    pub handover_at_s: f64,
    pub bulk_increase: f64,
    pub buffered_increase: f64,
    pub bulk_retx_no_forwarding: u64,
    pub bulk_retx_forwarding: u64,
}

struct Baselines {
    bulk: f64,
    buffered: f64,
}

fn loss_policy() -> MigrationPolicy {
    MigrationPolicy::ping(SimTime::from_millis(100))
}

fn no_forwarding(cfg: &TransportConfig) -> TransportConfig {
    TransportConfig {
        forwarding: false,
        ..cfg.clone()
    }
}

fn loss_baselines(cfg: &TransportConfig, study: &LossStudy) -> Result<Baselines, TransportError> {
    let off = no_forwarding(cfg);
    let none = HandoverSchedule::none();
    Ok(Baselines {
        bulk: run_bulk(&off, study.file_bytes, &none, loss_policy(), 0)?.retx_rate,
        buffered: run_buffered(&off, &study.buffered, &none, loss_policy(), 0)?.retx_rate,
    })
}

fn compare_with(
    cfg: &TransportConfig,
    study: &LossStudy,
    base: &Baselines,
    seed: u64,
) -> Result<LossComparison, TransportError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let not_before =
        SimTime::from_micros(rng.random_range(study.earliest.as_micros()..study.latest.as_micros()));
    let delay = SimTime::from_micros(rng.random_range(20_000..study.max_fetch_delay.as_micros()));
    let off = no_forwarding(cfg);
    let on = TransportConfig {
        forwarding: true,
        ..cfg.clone()
    };
    let fetch = HandoverSchedule {
        triggers: vec![HandoverTrigger::AfterRequest { not_before, delay }],
    };
    let buf_ho = run_buffered(&off, &study.buffered, &fetch, loss_policy(), seed)?;
    let at = *buf_ho
        .migration_times
        .first()
        .ok_or_else(|| TransportError::Config("handover never triggered".into()))?;
    // Bulk moves at the same instant.
    let same = HandoverSchedule::at(&[at]);
    let bulk_ho = run_bulk(&off, study.file_bytes, &same, loss_policy(), seed)?;
    let bulk_fwd = run_bulk(&on, study.file_bytes, &same, loss_policy(), seed)?;
    Ok(LossComparison {
        seed,
        handover_at_s: at.as_secs_f64(),
        bulk_increase: bulk_ho.retx_rate - base.bulk,
        buffered_increase: buf_ho.retx_rate - base.buffered,
        bulk_retx_no_forwarding: bulk_ho.retransmissions,
        bulk_retx_forwarding: bulk_fwd.retransmissions,
    })
}

/// Paired runs for one seed with a single handover: the video migrates
/// while fetching a chunk and the bulk download migrates at the same
/// instant, both with forwarding disabled, against handover-free baselines;
/// bulk is then repeated with forwarding enabled.
pub fn loss_comparison(
    cfg: &TransportConfig,
    study: &LossStudy,
    seed: u64,
) -> Result<LossComparison, TransportError> {
    let base = loss_baselines(cfg, study)?;
    compare_with(cfg, study, &base, seed)
}

/// `loss_comparison` over many seeds. Without handovers nothing in a run
/// is random, so the baselines are computed once.
pub fn loss_study(
    cfg: &TransportConfig,
    study: &LossStudy,
    seeds: &[u64],
) -> Result<Vec<LossComparison>, TransportError> {
    let base = loss_baselines(cfg, study)?;
    seeds
        .iter()
        .map(|&seed| compare_with(cfg, study, &base, seed))
        .collect()
}
