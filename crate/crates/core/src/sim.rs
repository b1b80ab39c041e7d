//! Deterministic discrete-event kernel.
//!
//! Simulated time advances only by executing events. Nodes serve messages one
//! at a time from a FIFO queue; links add latency and may drop messages. All
//! randomness comes from a single seeded generator owned by the simulator, so
//! a given seed and scenario always produce the same [`RunStats`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in microseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round().max(0.0) as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn saturating_add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("simulated time overflow"))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("negative simulated duration"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Identifier of a node inside one simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Handle to a scheduled event, usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// Identifier assigned to every message entering the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeliveryHandle(pub u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at {at} when the clock is already at {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
    #[error("no route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("loss probability {0} outside [0, 1]")]
    InvalidLoss(f64),
    #[error("service rate {0} must be positive and finite")]
    InvalidRate(f64),
}

/// How long a node spends serving one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceModel {
    /// Every message takes exactly `1 / service_rate`.
    #[default]
    Deterministic,
    /// Service times are exponentially distributed with mean `1 / service_rate`.
    Exponential,
}

/// Messages carried by the simulator report a category used for statistics.
pub trait Categorize {
    fn category(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy)]
pub struct SimLink {
    pub endpoints: (NodeId, NodeId),
    pub latency: SimTime,
    pub loss_probability: f64,
}

#[derive(Debug, Clone, Copy)]
struct Leg {
    to: NodeId,
    latency: SimTime,
    loss: f64,
}

#[derive(Debug)]
struct Parcel<M> {
    id: u64,
    msg: M,
    origin: NodeId,
    legs: VecDeque<Leg>,
    sent_at: SimTime,
    arrived_at: SimTime,
}

/// Capacity-limited processing node with a FIFO queue.
#[derive(Debug)]
pub struct SimNode<M> {
    pub id: NodeId,
    /// Messages per simulated second; `None` serves instantly.
    pub service_rate: Option<f64>,
    queue: VecDeque<Box<Parcel<M>>>,
    busy: bool,
    busy_until: SimTime,
}

impl<M> SimNode<M> {
    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }
}

/// A message that finished service at its final node.
#[derive(Debug)]
pub struct Delivery<M> {
    pub id: DeliveryHandle,
    pub node: NodeId,
    pub origin: NodeId,
    pub msg: M,
    pub sent_at: SimTime,
}

/// Looks up a category without allocating when it already exists.
fn category_entry<'a>(
    map: &'a mut BTreeMap<String, CategoryStats>,
    cat: &str,
) -> &'a mut CategoryStats {
    if !map.contains_key(cat) {
        map.insert(cat.to_string(), CategoryStats::default());
    }
    map.get_mut(cat).expect("just inserted")
}

/// Event-driven behaviour attached to a simulator.
pub trait Process<M> {
    fn on_message(&mut self, sim: &mut Simulator<M>, delivery: Delivery<M>);

    fn on_timer(&mut self, _sim: &mut Simulator<M>, _node: NodeId, _token: u64) {}
}

enum Action<M> {
    Arrive { node: NodeId, parcel: Box<Parcel<M>> },
    ServiceDone { node: NodeId },
    Timer { node: NodeId, token: u64 },
}

/// A timed event. Events with equal `at` run in ascending `sequence`.
pub struct SimEvent<M> {
    pub at: SimTime,
    pub sequence: u64,
    action: Action<M>,
}

impl<M> PartialEq for SimEvent<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.sequence) == (other.at, other.sequence)
    }
}

impl<M> Eq for SimEvent<M> {}

impl<M> PartialOrd for SimEvent<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for SimEvent<M> {
    // BinaryHeap is a max-heap; invert so the earliest event pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.sequence).cmp(&(self.at, self.sequence))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// End-to-end latency of each delivered message, in microseconds.
    pub latencies_us: Vec<u64>,
}

impl CategoryStats {
    pub fn mean_latency_us(&self) -> Option<f64> {
        if self.latencies_us.is_empty() {
            return None;
        }
        Some(self.latencies_us.iter().sum::<u64>() as f64 / self.latencies_us.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub served: u64,
    /// Total time messages spent queued plus in service at this node.
    pub sojourn_us: u64,
}

impl NodeStats {
    pub fn mean_sojourn_us(&self) -> Option<f64> {
        (self.served > 0).then(|| self.sojourn_us as f64 / self.served as f64)
    }
}

/// Snapshot of simulator counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub now_us: u64,
    pub events_processed: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub by_category: BTreeMap<String, CategoryStats>,
    pub by_node: BTreeMap<u32, NodeStats>,
}

impl RunStats {
    /// Renders the `(metric, category, value)` CSV form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,category,value\n");
        let mut row = |metric: &str, category: &str, value: String| {
            out.push_str(&format!("{metric},{category},{value}\n"));
        };
        row("now_us", "all", self.now_us.to_string());
        row("events_processed", "all", self.events_processed.to_string());
        row("sent", "all", self.sent.to_string());
        row("delivered", "all", self.delivered.to_string());
        row("dropped", "all", self.dropped.to_string());
        row("in_flight", "all", self.in_flight.to_string());
        for (cat, s) in &self.by_category {
            row("sent", cat, s.sent.to_string());
            row("delivered", cat, s.delivered.to_string());
            row("dropped", cat, s.dropped.to_string());
            if let Some(mean) = s.mean_latency_us() {
                row("mean_latency_us", cat, format!("{mean:.3}"));
            }
        }
        for (node, s) in &self.by_node {
            let cat = format!("node{node}");
            row("served", &cat, s.served.to_string());
            if let Some(mean) = s.mean_sojourn_us() {
                row("mean_sojourn_us", &cat, format!("{mean:.3}"));
            }
        }
        out
    }
}

pub struct Simulator<M> {
    now: SimTime,
    next_sequence: u64,
    next_message: u64,
    queue: BinaryHeap<SimEvent<M>>,
    cancelled: HashSet<u64>,
    nodes: Vec<SimNode<M>>,
    links: HashMap<(NodeId, NodeId), SimLink>,
    routes: HashMap<(NodeId, NodeId), Option<(SimTime, f64)>>,
    service_model: ServiceModel,
    rng: ChaCha8Rng,
    halted: bool,
    stats: RunStats,
}

impl<M: Categorize> Simulator<M> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            next_sequence: 0,
            next_message: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            nodes: Vec::new(),
            links: HashMap::new(),
            routes: HashMap::new(),
            service_model: ServiceModel::Deterministic,
            rng: ChaCha8Rng::seed_from_u64(seed),
            halted: false,
            stats: RunStats::default(),
        }
    }

    pub fn with_service_model(mut self, model: ServiceModel) -> Self {
        self.service_model = model;
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn add_node(&mut self, service_rate: Option<f64>) -> Result<NodeId, SimError> {
        if let Some(rate) = service_rate {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(SimError::InvalidRate(rate));
            }
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(SimNode {
            id,
            service_rate,
            queue: VecDeque::new(),
            busy: false,
            busy_until: SimTime::ZERO,
        });
        Ok(id)
    }

    pub fn node(&self, id: NodeId) -> Option<&SimNode<M>> {
        self.nodes.get(id.0 as usize)
    }

    pub fn set_service_rate(&mut self, id: NodeId, rate: Option<f64>) -> Result<(), SimError> {
        if let Some(r) = rate {
            if !(r.is_finite() && r > 0.0) {
                return Err(SimError::InvalidRate(r));
            }
        }
        self.nodes
            .get_mut(id.0 as usize)
            .ok_or(SimError::UnknownNode(id))?
            .service_rate = rate;
        Ok(())
    }

    /// Adds (or replaces) an undirected link.
    pub fn add_link(
        &mut self,
        a: NodeId,
        b: NodeId,
        latency: SimTime,
        loss_probability: f64,
    ) -> Result<(), SimError> {
        for n in [a, b] {
            if self.node(n).is_none() {
                return Err(SimError::UnknownNode(n));
            }
        }
        if !(0.0..=1.0).contains(&loss_probability) {
            return Err(SimError::InvalidLoss(loss_probability));
        }
        let link = SimLink {
            endpoints: (a, b),
            latency,
            loss_probability,
        };
        self.links.insert(ordered(a, b), link);
        self.routes.clear();
        Ok(())
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> Option<&SimLink> {
        self.links.get(&ordered(a, b))
    }

    /// Latency and combined loss from `src` to `dst`: the direct link when one
    /// exists, otherwise the lowest-latency multi-link path. Transit nodes do
    /// not serve the message.
    pub fn route(&mut self, src: NodeId, dst: NodeId) -> Result<(SimTime, f64), SimError> {
        if src == dst {
            return Ok((SimTime::ZERO, 0.0));
        }
        if let Some(link) = self.links.get(&ordered(src, dst)) {
            return Ok((link.latency, link.loss_probability));
        }
        if let Some(cached) = self.routes.get(&(src, dst)) {
            return cached.ok_or(SimError::NoRoute { src, dst });
        }
        let found = self.shortest_path(src, dst);
        self.routes.insert((src, dst), found);
        found.ok_or(SimError::NoRoute { src, dst })
    }

    fn shortest_path(&self, src: NodeId, dst: NodeId) -> Option<(SimTime, f64)> {
        let mut graph: UnGraph<(), (u64, f64)> = UnGraph::new_undirected();
        let idx: Vec<NodeIndex> = self.nodes.iter().map(|_| graph.add_node(())).collect();
        let mut links: Vec<_> = self.links.values().collect();
        links.sort_by_key(|l| ordered(l.endpoints.0, l.endpoints.1));
        for l in links {
            graph.add_edge(
                idx[l.endpoints.0 .0 as usize],
                idx[l.endpoints.1 .0 as usize],
                (l.latency.as_micros(), l.loss_probability),
            );
        }
        let (latency, path) = petgraph::algo::astar(
            &graph,
            idx[src.0 as usize],
            |n| n == idx[dst.0 as usize],
            |e| e.weight().0,
            |_| 0,
        )?;
        let mut keep = 1.0;
        for pair in path.windows(2) {
            let e = graph.find_edge(pair[0], pair[1])?;
            keep *= 1.0 - graph[e].1;
        }
        Some((SimTime::from_micros(latency), 1.0 - keep))
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.next_sequence;
        self.next_sequence += 1;
        s
    }

    fn push(&mut self, at: SimTime, action: Action<M>) -> EventHandle {
        let sequence = self.next_seq();
        self.queue.push(SimEvent {
            at,
            sequence,
            action,
        });
        EventHandle(sequence)
    }

    /// Injects `msg` directly into `node`'s queue at time `at`.
    pub fn schedule(&mut self, at: SimTime, node: NodeId, msg: M) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::ScheduleInPast { at, now: self.now });
        }
        if self.node(node).is_none() {
            return Err(SimError::UnknownNode(node));
        }
        let parcel = self.new_parcel(node, msg, VecDeque::new());
        Ok(self.push(at, Action::Arrive { node, parcel: Box::new(parcel) }))
    }

    pub fn schedule_timer(
        &mut self,
        at: SimTime,
        node: NodeId,
        token: u64,
    ) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::ScheduleInPast { at, now: self.now });
        }
        Ok(self.push(at, Action::Timer { node, token }))
    }

    pub fn timer_after(&mut self, delay: SimTime, node: NodeId, token: u64) -> EventHandle {
        let at = self.now + delay;
        self.push(at, Action::Timer { node, token })
    }

    /// Cancels a pending event. Returns false if it already ran or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_sequence {
            return false;
        }
        let pending = self.queue.iter().any(|e| e.sequence == handle.0);
        pending && self.cancelled.insert(handle.0)
    }

    fn new_parcel(&mut self, origin: NodeId, msg: M, legs: VecDeque<Leg>) -> Parcel<M> {
        let id = self.next_message;
        self.next_message += 1;
        let cat = category_entry(&mut self.stats.by_category, msg.category());
        cat.sent += 1;
        self.stats.sent += 1;
        Parcel {
            id,
            msg,
            origin,
            legs,
            sent_at: self.now,
            arrived_at: self.now,
        }
    }

    /// Sends `msg` from `src` to `dst`; it is served once at `dst`.
    pub fn send(&mut self, src: NodeId, dst: NodeId, msg: M) -> Result<DeliveryHandle, SimError> {
        self.send_via(src, &[], dst, msg)
    }

    /// Sends `msg` through each node of `via` in turn, being queued and served
    /// at every one of them, before its final service at `dst`.
    pub fn send_via(
        &mut self,
        src: NodeId,
        via: &[NodeId],
        dst: NodeId,
        msg: M,
    ) -> Result<DeliveryHandle, SimError> {
        let mut legs = VecDeque::with_capacity(via.len() + 1);
        let mut at = src;
        for &next in via.iter().chain(std::iter::once(&dst)) {
            if self.node(next).is_none() {
                return Err(SimError::UnknownNode(next));
            }
            let (latency, loss) = self.route(at, next)?;
            legs.push_back(Leg {
                to: next,
                latency,
                loss,
            });
            at = next;
        }
        let parcel = self.new_parcel(src, msg, legs);
        let id = DeliveryHandle(parcel.id);
        self.depart(Box::new(parcel));
        Ok(id)
    }

    fn depart(&mut self, mut parcel: Box<Parcel<M>>) {
        let leg = parcel.legs.pop_front().expect("parcel without a leg");
        if leg.loss > 0.0 && self.rng.random::<f64>() < leg.loss {
            self.stats.dropped += 1;
            let cat = parcel.msg.category();
            category_entry(&mut self.stats.by_category, cat).dropped += 1;
            return;
        }
        let at = self.now + leg.latency;
        self.push(at, Action::Arrive { node: leg.to, parcel });
    }

    fn service_time(&mut self, node: NodeId) -> SimTime {
        let Some(rate) = self.nodes[node.0 as usize].service_rate else {
            return SimTime::ZERO;
        };
        match self.service_model {
            ServiceModel::Deterministic => SimTime::from_secs_f64(1.0 / rate),
            ServiceModel::Exponential => {
                let exp = Exp::new(rate).expect("validated rate");
                SimTime::from_secs_f64(exp.sample(&mut self.rng))
            }
        }
    }

    fn start_service(&mut self, node: NodeId) {
        let service = self.service_time(node);
        let done = self.now + service;
        let n = &mut self.nodes[node.0 as usize];
        n.busy = true;
        n.busy_until = done;
        self.push(done, Action::ServiceDone { node });
    }

    /// Stops the current `run_*` call after the event being executed.
    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue
            .iter()
            .filter(|e| !self.cancelled.contains(&e.sequence))
            .map(|e| e.at)
            .min()
    }

    /// Executes the earliest pending event whose time is at most `limit`.
    /// Returns false when there is none.
    pub fn step<P: Process<M>>(&mut self, limit: SimTime, process: &mut P) -> bool {
        loop {
            let Some(top) = self.queue.peek() else {
                return false;
            };
            if top.at > limit {
                return false;
            }
            let event = self.queue.pop().expect("peeked");
            if !self.cancelled.is_empty() && self.cancelled.remove(&event.sequence) {
                continue;
            }
            debug_assert!(event.at >= self.now);
            self.now = event.at;
            self.stats.events_processed += 1;
            self.execute(event.action, process);
            return true;
        }
    }

    fn execute<P: Process<M>>(&mut self, action: Action<M>, process: &mut P) {
        match action {
            Action::Arrive { node, mut parcel } => {
                parcel.arrived_at = self.now;
                let n = &mut self.nodes[node.0 as usize];
                n.queue.push_back(parcel);
                if !n.busy {
                    self.start_service(node);
                }
            }
            Action::ServiceDone { node } => {
                let n = &mut self.nodes[node.0 as usize];
                n.busy = false;
                let parcel = n.queue.pop_front().expect("service completion on empty queue");
                let more = !n.queue.is_empty();
                let ns = self.stats.by_node.entry(node.0).or_default();
                ns.served += 1;
                ns.sojourn_us += (self.now - parcel.arrived_at).as_micros();
                if more {
                    self.start_service(node);
                }
                if !parcel.legs.is_empty() {
                    self.depart(parcel);
                    return;
                }
                self.stats.delivered += 1;
                let latency = (self.now - parcel.sent_at).as_micros();
                let cat = category_entry(&mut self.stats.by_category, parcel.msg.category());
                cat.delivered += 1;
                cat.latencies_us.push(latency);
                let delivery = Delivery {
                    id: DeliveryHandle(parcel.id),
                    node,
                    origin: parcel.origin,
                    msg: parcel.msg,
                    sent_at: parcel.sent_at,
                };
                process.on_message(self, delivery);
            }
            Action::Timer { node, token } => process.on_timer(self, node, token),
        }
    }

    /// Runs every event with `at <= t_end` in time order and returns a stats
    /// snapshot. The clock ends at `t_end` unless `t_end` is `SimTime::MAX` or
    /// a process halted the run.
    pub fn run_until<P: Process<M>>(&mut self, t_end: SimTime, process: &mut P) -> RunStats {
        self.halted = false;
        while !self.halted && self.step(t_end, process) {}
        if !self.halted && t_end != SimTime::MAX && t_end > self.now {
            self.now = t_end;
        }
        self.halted = false;
        self.stats()
    }

    /// Runs until no events remain or a process halts the run.
    pub fn run<P: Process<M>>(&mut self, process: &mut P) -> RunStats {
        self.run_until(SimTime::MAX, process)
    }

    pub fn stats(&self) -> RunStats {
        let mut s = self.stats.clone();
        s.now_us = self.now.as_micros();
        s.in_flight = s.sent - s.delivered - s.dropped;
        s
    }
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// A [`Process`] that only records deliveries. Handy for tests and for pure
/// queueing experiments.
#[derive(Debug, Default)]
pub struct Recorder<M> {
    pub deliveries: Vec<(SimTime, Delivery<M>)>,
    pub timers: Vec<(SimTime, NodeId, u64)>,
}

impl<M> Recorder<M> {
    pub fn new() -> Self {
        Self {
            deliveries: Vec::new(),
            timers: Vec::new(),
        }
    }
}

impl<M: Categorize> Process<M> for Recorder<M> {
    fn on_message(&mut self, sim: &mut Simulator<M>, delivery: Delivery<M>) {
        self.deliveries.push((sim.now(), delivery));
    }

    fn on_timer(&mut self, sim: &mut Simulator<M>, node: NodeId, token: u64) {
        self.timers.push((sim.now(), node, token));
    }
}
