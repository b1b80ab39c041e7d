//! Online charging: a central OCS holding balances, Charging Proxies caching
//! batches of quota, and per-UE counters enforced at the base station.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{ControlMessage, Element, MessageKind, Payload, Signal};
use crate::sim::{Delivery, NodeId, Process, SimError, SimTime, Simulator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChargingError {
    #[error("unknown base station {0}")]
    UnknownStation(u32),
    #[error("unknown charging proxy {0}")]
    UnknownProxy(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub subscriber: u64,
    pub balance: u64,
}

/// Grants `min(requested, balance)` and debits it.
pub fn ocs_grant(account: &mut Account, requested: u64) -> u64 {
    let grant = requested.min(account.balance);
    account.balance -= grant;
    grant
}

#[derive(Debug, Clone, Default)]
pub struct Ocs {
    pub accounts: BTreeMap<u64, Account>,
    pub requests: u64,
    pub granted: u64,
}

impl Ocs {
    pub fn open(&mut self, subscriber: u64, balance: u64) {
        self.accounts.insert(subscriber, Account { subscriber, balance });
    }

    pub fn request(&mut self, subscriber: u64, bytes: u64) -> u64 {
        self.requests += 1;
        let grant = match self.accounts.get_mut(&subscriber) {
            Some(acc) => ocs_grant(acc, bytes),
            None => 0,
        };
        self.granted += grant;
        grant
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CpEntry {
    pub granted: u64,
    pub remaining: u64,
    /// The OCS answered a request with zero.
    pub exhausted: bool,
}

/// Charging Proxy cache. Losing it only forfeits the cached remainder.
#[derive(Debug, Clone)]
pub struct CpCache {
    pub id: u32,
    pub batch: u64,
    pub entries: BTreeMap<u64, CpEntry>,
    pub ocs_requests: u64,
    pub subquota_granted: u64,
}

impl CpCache {
    pub fn new(id: u32, batch: u64) -> Self {
        Self {
            id,
            batch,
            entries: BTreeMap::new(),
            ocs_requests: 0,
            subquota_granted: 0,
        }
    }

    /// True when serving `amount` needs a batch from the OCS first.
    pub fn needs_refill(&self, subscriber: u64, amount: u64) -> bool {
        let e = self.entries.get(&subscriber).copied().unwrap_or_default();
        e.remaining < amount && !e.exhausted
    }

    pub fn add_batch(&mut self, subscriber: u64, grant: u64) {
        let e = self.entries.entry(subscriber).or_default();
        e.granted += grant;
        e.remaining += grant;
        if grant == 0 {
            e.exhausted = true;
        }
    }

    /// Serves up to `amount` from the cache.
    pub fn take(&mut self, subscriber: u64, amount: u64) -> u64 {
        let e = self.entries.entry(subscriber).or_default();
        let give = amount.min(e.remaining);
        e.remaining -= give;
        self.subquota_granted += give;
        give
    }

    /// Forgets every cached remainder.
    pub fn restart(&mut self) {
        self.entries.clear();
    }
}

/// Synchronous sub-quota grant: one OCS request of `batch` bytes when the
/// cache cannot cover `amount`.
pub fn cp_subquota(cp: &mut CpCache, ocs: &mut Ocs, subscriber: u64, amount: u64) -> u64 {
    if cp.needs_refill(subscriber, amount) {
        cp.ocs_requests += 1;
        let grant = ocs.request(subscriber, cp.batch);
        cp.add_batch(subscriber, grant);
    }
    cp.take(subscriber, amount)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InbQuota {
    pub granted: u64,
    pub used: u64,
    pub threshold: f64,
    pub refill_pending: bool,
    /// A refill came back empty.
    pub denied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsumeOutcome {
    pub allowed: u64,
    pub rejected: u64,
    /// The threshold was crossed; the caller must request a refill.
    pub refill: bool,
}

impl InbQuota {
    pub fn new(threshold: f64) -> Self {
        Self {
            granted: 0,
            used: 0,
            threshold,
            refill_pending: false,
            denied: false,
        }
    }

    pub fn remaining(&self) -> u64 {
        self.granted - self.used
    }

    pub fn is_cut_off(&self) -> bool {
        self.denied && self.used == self.granted
    }

    pub fn consume(&mut self, bytes: u64) -> ConsumeOutcome {
        let allowed = bytes.min(self.remaining());
        self.used += allowed;
        let crossed = self.granted > 0 && self.used as f64 >= self.threshold * self.granted as f64;
        let starving = allowed < bytes;
        let refill = !self.refill_pending && !self.denied && (crossed || starving);
        if refill {
            self.refill_pending = true;
        }
        ConsumeOutcome {
            allowed,
            rejected: bytes - allowed,
            refill,
        }
    }

    pub fn apply_grant(&mut self, grant: u64) {
        self.refill_pending = false;
        self.granted += grant;
        if grant == 0 {
            self.denied = true;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargingConfig {
    pub proxies: u32,
    pub inbs: u32,
    pub sub_quota: u64,
    pub batch: u64,
    pub threshold: f64,
    pub inb_cp_latency: SimTime,
    pub cp_ocs_latency: SimTime,
    pub seed: u64,
}

impl Default for ChargingConfig {
    fn default() -> Self {
        let sub_quota = 1_000_000;
        Self {
            proxies: 1,
            inbs: 2,
            sub_quota,
            batch: 10 * sub_quota,
            threshold: 0.8,
            inb_cp_latency: SimTime::from_millis(2),
            cp_ocs_latency: SimTime::from_millis(10),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChargingEvent {
    pub time: SimTime,
    pub actor: String,
    pub event: &'static str,
    pub subscriber: u64,
    pub bytes: u64,
}

/// Byte totals at each tier of the charging hierarchy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ledger {
    pub initial_balance: u64,
    pub ocs_granted: u64,
    pub cp_granted: u64,
    pub inb_granted: u64,
    pub delivered: u64,
    pub rejected: u64,
    pub ocs_requests: u64,
}

impl Ledger {
    pub fn is_conserved(&self) -> bool {
        self.delivered <= self.inb_granted
            && self.inb_granted <= self.cp_granted
            && self.cp_granted <= self.ocs_granted
            && self.ocs_granted <= self.initial_balance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub at: SimTime,
    pub subscriber: u64,
    pub inb: u32,
    pub bytes: u64,
}

/// OCS, proxies and base-station counters as simulation nodes.
#[derive(Debug, Clone)]
pub struct ChargingState {
    cfg: ChargingConfig,
    ocs_node: NodeId,
    cp_nodes: Vec<NodeId>,
    inb_nodes: Vec<NodeId>,
    pub ocs: Ocs,
    pub proxies: Vec<CpCache>,
    /// Base-station requests waiting on an OCS answer, per proxy.
    waiting: Vec<BTreeMap<u64, Vec<u32>>>,
    pub quotas: Vec<BTreeMap<u64, InbQuota>>,
    pub log: Vec<ChargingEvent>,
    workload: Vec<UsageEvent>,
    initial_balance: u64,
    delivered: u64,
    rejected: u64,
}

impl ChargingState {
    pub fn build(cfg: ChargingConfig, sim: &mut Simulator<Signal>) -> Result<Self, ChargingError> {
        if cfg.proxies == 0 || cfg.inbs == 0 {
            return Err(ChargingError::Config("need at least one proxy and one base station".into()));
        }
        if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
            return Err(ChargingError::Config(format!("threshold {} outside (0, 1]", cfg.threshold)));
        }
        let ocs_node = sim.add_node(None)?;
        let mut cp_nodes = Vec::new();
        for _ in 0..cfg.proxies {
            let n = sim.add_node(None)?;
            sim.add_link(n, ocs_node, cfg.cp_ocs_latency, 0.0)?;
            cp_nodes.push(n);
        }
        let mut inb_nodes = Vec::new();
        for i in 0..cfg.inbs {
            let n = sim.add_node(None)?;
            sim.add_link(n, cp_nodes[(i % cfg.proxies) as usize], cfg.inb_cp_latency, 0.0)?;
            inb_nodes.push(n);
        }
        Ok(Self {
            proxies: (0..cfg.proxies).map(|c| CpCache::new(c, cfg.batch)).collect(),
            waiting: vec![BTreeMap::new(); cfg.proxies as usize],
            quotas: vec![BTreeMap::new(); cfg.inbs as usize],
            cfg,
            ocs_node,
            cp_nodes,
            inb_nodes,
            ocs: Ocs::default(),
            log: Vec::new(),
            workload: Vec::new(),
            initial_balance: 0,
            delivered: 0,
            rejected: 0,
        })
    }

    pub fn proxy_of(&self, inb: u32) -> u32 {
        inb % self.cfg.proxies
    }

    pub fn open_account(&mut self, subscriber: u64, balance: u64) {
        self.initial_balance += balance;
        self.ocs.open(subscriber, balance);
    }

    pub fn ledger(&self) -> Ledger {
        Ledger {
            initial_balance: self.initial_balance,
            ocs_granted: self.ocs.granted,
            cp_granted: self.proxies.iter().map(|c| c.subquota_granted).sum(),
            inb_granted: self.quotas.iter().flat_map(|m| m.values()).map(|q| q.granted).sum(),
            delivered: self.delivered,
            rejected: self.rejected,
            ocs_requests: self.ocs.requests,
        }
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("time_us,actor,event,subscriber,bytes\n");
        for e in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.time.as_micros(),
                e.actor,
                e.event,
                e.subscriber,
                e.bytes
            ));
        }
        out
    }

    fn note(&mut self, time: SimTime, actor: Element, event: &'static str, subscriber: u64, bytes: u64) {
        self.log.push(ChargingEvent {
            time,
            actor: actor.to_string(),
            event,
            subscriber,
            bytes,
        });
    }

    fn request_subquota(&mut self, sim: &mut Simulator<Signal>, inb: u32, subscriber: u64) {
        let cp = self.proxy_of(inb);
        let msg = ControlMessage::new(MessageKind::QuotaRequest, Element::Inb(inb), Element::Cp(cp), subscriber, 0)
            .with_payload(Payload::Quota {
                subscriber,
                bytes: self.cfg.sub_quota,
            });
        self.note(sim.now(), Element::Inb(inb), "quota-request", subscriber, self.cfg.sub_quota);
        sim.send(self.inb_nodes[inb as usize], self.cp_nodes[cp as usize], Signal::Control(msg))
            .expect("base station reaches its proxy");
    }

    /// Installs an empty counter for `subscriber` at `inb` and asks for the
    /// first sub-quota.
    pub fn admit(&mut self, sim: &mut Simulator<Signal>, subscriber: u64, inb: u32) -> Result<(), ChargingError> {
        let quotas = self
            .quotas
            .get_mut(inb as usize)
            .ok_or(ChargingError::UnknownStation(inb))?;
        if quotas.contains_key(&subscriber) {
            return Ok(());
        }
        let mut q = InbQuota::new(self.cfg.threshold);
        q.refill_pending = true;
        quotas.insert(subscriber, q);
        self.request_subquota(sim, inb, subscriber);
        Ok(())
    }

    /// Counts `bytes` of traffic at `inb`; returns the bytes allowed through.
    pub fn consume(
        &mut self,
        sim: &mut Simulator<Signal>,
        subscriber: u64,
        inb: u32,
        bytes: u64,
    ) -> Result<u64, ChargingError> {
        self.admit(sim, subscriber, inb)?;
        let q = self.quotas[inb as usize]
            .get_mut(&subscriber)
            .expect("admitted above");
        let was_cut = q.is_cut_off();
        let out = q.consume(bytes);
        let cut = !was_cut && q.is_cut_off();
        self.delivered += out.allowed;
        self.rejected += out.rejected;
        if out.refill {
            self.request_subquota(sim, inb, subscriber);
        }
        if out.rejected > 0 {
            self.note(sim.now(), Element::Inb(inb), "reject", subscriber, out.rejected);
        }
        if cut {
            self.note(sim.now(), Element::Inb(inb), "cutoff", subscriber, 0);
        }
        Ok(out.allowed)
    }

    pub fn restart_proxy(&mut self, cp: u32, now: SimTime) -> Result<(), ChargingError> {
        let cache = self
            .proxies
            .get_mut(cp as usize)
            .ok_or(ChargingError::UnknownProxy(cp))?;
        let forfeited: u64 = cache.entries.values().map(|e| e.remaining).sum();
        cache.restart();
        self.note(now, Element::Cp(cp), "restart", 0, forfeited);
        Ok(())
    }

    fn proxy_serve(&mut self, sim: &mut Simulator<Signal>, cp: u32, inb: u32, subscriber: u64) {
        let amount = self.cfg.sub_quota;
        let give = self.proxies[cp as usize].take(subscriber, amount);
        self.note(sim.now(), Element::Cp(cp), "subquota", subscriber, give);
        let msg = ControlMessage::new(MessageKind::QuotaGrant, Element::Cp(cp), Element::Inb(inb), subscriber, 0)
            .with_payload(Payload::Quota { subscriber, bytes: give });
        sim.send(self.cp_nodes[cp as usize], self.inb_nodes[inb as usize], Signal::Control(msg))
            .expect("proxy reaches base station");
    }

    fn on_control(&mut self, sim: &mut Simulator<Signal>, msg: ControlMessage) {
        let now = sim.now();
        let Payload::Quota { subscriber, bytes } = msg.payload else {
            return;
        };
        match (msg.dst, msg.kind, msg.src) {
            (Element::Cp(cp), MessageKind::QuotaRequest, Element::Inb(inb)) => {
                let waiting = &mut self.waiting[cp as usize];
                if let Some(queue) = waiting.get_mut(&subscriber) {
                    queue.push(inb);
                    return;
                }
                if self.proxies[cp as usize].needs_refill(subscriber, bytes) {
                    waiting.insert(subscriber, vec![inb]);
                    self.proxies[cp as usize].ocs_requests += 1;
                    let batch = self.cfg.batch;
                    self.note(now, Element::Cp(cp), "credit-request", subscriber, batch);
                    let req = ControlMessage::new(MessageKind::CreditRequest, Element::Cp(cp), Element::Ocs, subscriber, 0)
                        .with_payload(Payload::Quota { subscriber, bytes: batch });
                    sim.send(self.cp_nodes[cp as usize], self.ocs_node, Signal::Control(req))
                        .expect("proxy reaches OCS");
                } else {
                    self.proxy_serve(sim, cp, inb, subscriber);
                }
            }
            (Element::Ocs, MessageKind::CreditRequest, Element::Cp(cp)) => {
                let grant = self.ocs.request(subscriber, bytes);
                self.note(now, Element::Ocs, "credit-grant", subscriber, grant);
                let reply = ControlMessage::new(MessageKind::CreditGrant, Element::Ocs, Element::Cp(cp), subscriber, 0)
                    .with_payload(Payload::Quota { subscriber, bytes: grant });
                sim.send(self.ocs_node, self.cp_nodes[cp as usize], Signal::Control(reply))
                    .expect("OCS reaches proxy");
            }
            (Element::Cp(cp), MessageKind::CreditGrant, _) => {
                self.proxies[cp as usize].add_batch(subscriber, bytes);
                let queue = self.waiting[cp as usize].remove(&subscriber).unwrap_or_default();
                for inb in queue {
                    self.proxy_serve(sim, cp, inb, subscriber);
                }
            }
            (Element::Inb(inb), MessageKind::QuotaGrant, _) => {
                let q = self.quotas[inb as usize].entry(subscriber).or_insert_with(|| InbQuota::new(self.cfg.threshold));
                q.apply_grant(bytes);
                let cut = q.is_cut_off();
                self.note(now, Element::Inb(inb), "quota-grant", subscriber, bytes);
                if cut {
                    self.note(now, Element::Inb(inb), "cutoff", subscriber, 0);
                }
            }
            _ => {}
        }
    }
}

impl Process<Signal> for ChargingState {
    fn on_message(&mut self, sim: &mut Simulator<Signal>, d: Delivery<Signal>) {
        if let Signal::Control(msg) = d.msg {
            self.on_control(sim, msg);
        }
    }

    fn on_timer(&mut self, sim: &mut Simulator<Signal>, _node: NodeId, token: u64) {
        let Some(ev) = self.workload.get(token as usize).copied() else {
            return;
        };
        // Workload events were validated when scheduled.
        let _ = self.consume(sim, ev.subscriber, ev.inb, ev.bytes);
    }
}

pub struct ChargingNetwork {
    pub sim: Simulator<Signal>,
    pub state: ChargingState,
}

impl ChargingNetwork {
    pub fn new(cfg: ChargingConfig) -> Result<Self, ChargingError> {
        let mut sim = Simulator::new(cfg.seed);
        let state = ChargingState::build(cfg, &mut sim)?;
        Ok(Self { sim, state })
    }

    /// Plays `events` (in any order) and runs until the network is idle.
    pub fn run_workload(&mut self, events: &[UsageEvent]) -> Result<Ledger, ChargingError> {
        let base = self.state.workload.len() as u64;
        for (k, ev) in events.iter().enumerate() {
            if ev.inb >= self.state.cfg.inbs {
                return Err(ChargingError::UnknownStation(ev.inb));
            }
            let node = self.state.inb_nodes[ev.inb as usize];
            self.sim.schedule_timer(ev.at.max(self.sim.now()), node, base + k as u64)?;
        }
        self.state.workload.extend_from_slice(events);
        self.sim.run(&mut self.state);
        Ok(self.state.ledger())
    }
}
