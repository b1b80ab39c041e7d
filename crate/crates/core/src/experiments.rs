//! Reproducible scenarios: handover completion under core load, the
//! per-handover message table, and user-plane path latency.

use std::fmt;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, EncorConfig, EncorControl, EncorNetwork, LinkLatencies};
use crate::lte::{LteConfig, LteControl, LteError, LteNetwork};
use crate::message::{count_messages, HandoverMode, HandoverTrace, Signal, TraceOutcome};
use crate::sim::{Delivery, NodeId, Process, ServiceModel, SimTime, Simulator};
use crate::transport::{live_idle_migration, LiveParams, MigrationMode, TransportConfig, TransportError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Encor(#[from] ControlError),
    #[error(transparent)]
    Lte(#[from] LteError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Encor,
    Lte,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Encor => "encor",
            Architecture::Lte => "lte",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadScenario {
    pub ues: u32,
    pub stations: u32,
    /// Stations per HOP group. Handover targets stay inside the group.
    pub group_size: u32,
    /// Offered handover events per second, ascending.
    pub rates: Vec<f64>,
    /// Core messages per second.
    pub core_service_rate: f64,
    pub service_model: ServiceModel,
    pub latencies: LinkLatencies,
    /// Handovers are offered over `[0, horizon)`.
    pub horizon: SimTime,
    /// Handovers started before this are not measured.
    pub warmup: SimTime,
    /// Extra time after the horizon for in-flight handovers to finish.
    pub drain: SimTime,
    pub seed: u64,
}

impl Default for LoadScenario {
    fn default() -> Self {
        Self {
            ues: 32,
            stations: 64,
            group_size: 8,
            rates: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 48.0, 64.0],
            core_service_rate: 1000.0,
            service_model: ServiceModel::Deterministic,
            latencies: LinkLatencies::default(),
            horizon: SimTime::from_secs(60),
            warmup: SimTime::from_secs(2),
            drain: SimTime::from_secs(30),
            seed: 1,
        }
    }
}

impl LoadScenario {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Scenario(m.to_string()));
        if self.ues == 0 || self.stations == 0 {
            return bad("need at least one UE and one station");
        }
        if self.group_size < 2 || !self.stations.is_multiple_of(self.group_size) {
            return bad("group_size must be at least 2 and divide stations");
        }
        if self.rates.is_empty() || self.rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("rates must be positive");
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return bad("rates must be strictly ascending");
        }
        if !(self.core_service_rate.is_finite() && self.core_service_rate > 0.0) {
            return bad("core_service_rate must be positive");
        }
        if self.warmup >= self.horizon {
            return bad("warmup must end before the horizon");
        }
        Ok(())
    }

    /// Station where `ue` starts: spread evenly over the groups.
    fn home_station(&self, ue: u32) -> u32 {
        (ue as u64 * self.stations as u64 / self.ues as u64) as u32
    }
}

/// Per-handover core messages of the canonical sequences.
pub fn core_messages_per_handover(arch: Architecture) -> usize {
    match arch {
        Architecture::Encor => 2,
        Architecture::Lte => 15,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRow {
    pub arch: Architecture,
    pub rate_per_s: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// Mean over measured handovers of the messages that touched the core.
    pub core_msgs_per_ho: f64,
    /// Offered core message rate exceeds the core service rate.
    pub saturated: bool,
    pub handovers: u64,
    /// Core messages per second over service rate, at the achieved rate.
    pub utilization: f64,
    /// Offered events that found every UE already in a handover.
    pub blocked: u64,
    pub unfinished: u64,
    /// Smallest completion time observed, in milliseconds.
    pub min_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadResult {
    pub rows: Vec<LoadRow>,
}

impl LoadResult {
    pub fn series(&self, arch: Architecture) -> impl Iterator<Item = &LoadRow> {
        self.rows.iter().filter(move |r| r.arch == arch)
    }

    pub fn at(&self, arch: Architecture, rate: f64) -> Option<&LoadRow> {
        self.series(arch).find(|r| r.rate_per_s == rate)
    }
}

/// Control plane the load driver can push handovers into.
trait Plane: Process<Signal> {
    fn begin(&mut self, sim: &mut Simulator<Signal>, ue: u32, src: u32, tgt: u32) -> bool;
    fn serving(&self, ue: u32) -> Option<u32>;
    fn finished(&mut self) -> Vec<HandoverTrace>;
    fn core(&self) -> NodeId;
}

impl Plane for EncorControl {
    fn begin(&mut self, sim: &mut Simulator<Signal>, ue: u32, src: u32, tgt: u32) -> bool {
        self.start_handover(sim, ue, src, tgt, HandoverMode::CoreAssisted).is_ok()
    }
    fn serving(&self, ue: u32) -> Option<u32> {
        EncorControl::serving(self, ue)
    }
    fn finished(&mut self) -> Vec<HandoverTrace> {
        self.drain_finished()
    }
    fn core(&self) -> NodeId {
        self.core_node()
    }
}

impl Plane for LteControl {
    fn begin(&mut self, sim: &mut Simulator<Signal>, ue: u32, src: u32, tgt: u32) -> bool {
        self.start_handover(sim, ue, src, tgt).is_ok()
    }
    fn serving(&self, ue: u32) -> Option<u32> {
        LteControl::serving(self, ue)
    }
    fn finished(&mut self) -> Vec<HandoverTrace> {
        self.drain_finished()
    }
    fn core(&self) -> NodeId {
        self.core_node()
    }
}

const ARRIVAL: u64 = 1;

/// Wraps a control plane and injects a Poisson stream of handovers.
struct LoadDriver<'a, P> {
    plane: P,
    scenario: &'a LoadScenario,
    rng: ChaCha8Rng,
    gap: Exp<f64>,
    busy: Vec<bool>,
    done: Vec<HandoverTrace>,
    started: u64,
    blocked: u64,
}

impl<P: Plane> LoadDriver<'_, P> {
    fn collect(&mut self) {
        for trace in self.plane.finished() {
            let ue = (trace.ue - crate::control::IMSI_BASE) as usize;
            self.busy[ue] = false;
            self.done.push(trace);
        }
    }

    fn arrive(&mut self, sim: &mut Simulator<Signal>) {
        let idle: Vec<u32> = (0..self.scenario.ues).filter(|&u| !self.busy[u as usize]).collect();
        if idle.is_empty() {
            self.blocked += 1;
        } else {
            let ue = idle[self.rng.random_range(0..idle.len())];
            let src = self.plane.serving(ue).expect("load UEs stay attached");
            let g = self.scenario.group_size;
            let base = src / g * g;
            let mut tgt = base + self.rng.random_range(0..g - 1);
            if tgt >= src {
                tgt += 1;
            }
            if self.plane.begin(sim, ue, src, tgt) {
                self.busy[ue as usize] = true;
                self.started += 1;
            }
        }
        let next = sim.now() + SimTime::from_secs_f64(self.gap.sample(&mut self.rng));
        if next < self.scenario.horizon {
            sim.timer_after(next - sim.now(), self.plane.core(), ARRIVAL);
        }
    }
}

impl<P: Plane> Process<Signal> for LoadDriver<'_, P> {
    fn on_message(&mut self, sim: &mut Simulator<Signal>, d: Delivery<Signal>) {
        self.plane.on_message(sim, d);
        self.collect();
    }

    fn on_timer(&mut self, sim: &mut Simulator<Signal>, node: NodeId, token: u64) {
        if token == ARRIVAL {
            self.arrive(sim);
        } else {
            self.plane.on_timer(sim, node, token);
        }
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    // Nearest rank.
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn drive<P: Plane>(
    scenario: &LoadScenario,
    arch: Architecture,
    rate: f64,
    mut sim: Simulator<Signal>,
    mut plane: P,
    attach: impl Fn(&mut P, &mut Simulator<Signal>, u32, u32) -> bool,
) -> Result<LoadRow, ExperimentError> {
    for ue in 0..scenario.ues {
        if !attach(&mut plane, &mut sim, ue, scenario.home_station(ue)) {
            return Err(ExperimentError::Scenario(format!("UE {ue} failed to attach")));
        }
        sim.run(&mut plane);
    }
    plane.finished();
    // Attach traffic is not part of the measurement.
    let offset = sim.now();
    let mut shifted = scenario.clone();
    shifted.horizon = offset + scenario.horizon;
    let warmup = offset + scenario.warmup;
    let core = plane.core();
    let mut driver = LoadDriver {
        plane,
        scenario: &shifted,
        rng: ChaCha8Rng::seed_from_u64(scenario.seed ^ rate.to_bits()),
        gap: Exp::new(rate).map_err(|e| ExperimentError::Scenario(e.to_string()))?,
        busy: vec![false; scenario.ues as usize],
        done: Vec::new(),
        started: 0,
        blocked: 0,
    };
    sim.timer_after(SimTime::ZERO, core, ARRIVAL);
    sim.run_until(shifted.horizon + scenario.drain, &mut driver);
    driver.collect();

    let measured: Vec<&HandoverTrace> = driver
        .done
        .iter()
        .filter(|t| t.start >= warmup && t.outcome == TraceOutcome::Completed)
        .collect();
    let mut times: Vec<f64> = measured
        .iter()
        .filter_map(|t| t.completion_time())
        .map(|d| d.as_millis_f64())
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let core_msgs = measured
        .iter()
        .map(|t| count_messages(t).via_core as f64)
        .sum::<f64>()
        / n.max(1) as f64;
    let per_ho = core_messages_per_handover(arch) as f64;
    let achieved = driver.started as f64 / scenario.horizon.as_secs_f64();
    Ok(LoadRow {
        arch,
        rate_per_s: rate,
        mean_ms: times.iter().sum::<f64>() / n.max(1) as f64,
        p95_ms: percentile(&times, 95.0),
        core_msgs_per_ho: core_msgs,
        saturated: per_ho * rate > scenario.core_service_rate,
        handovers: n as u64,
        utilization: per_ho * achieved / scenario.core_service_rate,
        blocked: driver.blocked,
        unfinished: driver.started - driver.done.len() as u64,
        min_ms: times.first().copied().unwrap_or(f64::NAN),
    })
}

/// One architecture at one offered rate.
pub fn run_load_point(
    scenario: &LoadScenario,
    arch: Architecture,
    rate: f64,
) -> Result<LoadRow, ExperimentError> {
    scenario.validate()?;
    let model = scenario.service_model;
    let mut sim = Simulator::new(scenario.seed).with_service_model(model);
    match arch {
        Architecture::Encor => {
            let cfg = EncorConfig {
                inbs: scenario.stations,
                inbs_per_hop: scenario.group_size,
                ues: scenario.ues,
                latencies: scenario.latencies,
                core_service_rate: Some(scenario.core_service_rate),
                service_model: model,
                seed: scenario.seed,
                ..EncorConfig::default()
            };
            let plane = EncorControl::build(cfg, &mut sim)?;
            drive(scenario, arch, rate, sim, plane, |p, sim, ue, st| {
                p.start_attach(sim, ue, st).is_ok()
            })
        }
        Architecture::Lte => {
            let cfg = LteConfig {
                enbs: scenario.stations,
                ues: scenario.ues,
                latencies: scenario.latencies,
                core_service_rate: Some(scenario.core_service_rate),
                service_model: model,
                seed: scenario.seed,
                ..LteConfig::default()
            };
            let plane = LteControl::build(cfg, &mut sim)?;
            drive(scenario, arch, rate, sim, plane, |p, sim, ue, st| {
                p.start_attach(sim, ue, st).is_ok()
            })
        }
    }
}

/// Sweeps every rate for both architectures on the same topology and
/// throttle. Rows are grouped by architecture, rates ascending.
pub fn run_load_sweep(scenario: &LoadScenario) -> Result<LoadResult, ExperimentError> {
    scenario.validate()?;
    let mut rows = Vec::new();
    for arch in [Architecture::Encor, Architecture::Lte] {
        for &rate in &scenario.rates {
            rows.push(run_load_point(scenario, arch, rate)?);
        }
    }
    Ok(LoadResult { rows })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub procedure: String,
    pub total: usize,
    pub via_core: usize,
    /// Inclusive bounds the total must fall in.
    pub expected_total: (usize, usize),
    pub expected_via_core: (usize, usize),
}

impl TableRow {
    pub fn matches(&self) -> bool {
        let within = |v: usize, (lo, hi): (usize, usize)| lo <= v && v <= hi;
        within(self.total, self.expected_total) && within(self.via_core, self.expected_via_core)
    }
}

impl fmt::Display for TableRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}({})", self.procedure, self.total, self.via_core)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTable {
    pub rows: Vec<TableRow>,
}

impl MessageTable {
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(TableRow::matches)
    }
}

/// Runs one canonical handover per architecture and tallies its messages.
///
/// With `CoreAssisted` the table also carries the EnCoR total including the
/// transport packets a client sends to re-learn its path after migrating.
pub fn run_message_table(mode: HandoverMode) -> Result<MessageTable, ExperimentError> {
    let mut rows = Vec::new();

    let mut lte = LteNetwork::new(LteConfig::default())?;
    lte.attach_lte(0, 0)?;
    let s1 = count_messages(&lte.s1_handover(0, 0, 1)?);
    rows.push(TableRow {
        procedure: "LTE".into(),
        total: s1.total,
        via_core: s1.via_core,
        expected_total: (15, 15),
        expected_via_core: (15, 15),
    });

    let mut encor = EncorNetwork::new(EncorConfig::default())?;
    encor.attach(0, 0)?;
    match mode {
        HandoverMode::Direct => {
            let c = count_messages(&encor.handover_direct(0, 0, 1)?);
            rows.push(TableRow {
                procedure: "EnCoR direct".into(),
                total: c.total,
                via_core: c.via_core,
                expected_total: (6, 6),
                expected_via_core: (0, 0),
            });
        }
        _ => {
            let c = count_messages(&encor.handover_core_assisted(0, 0, 1)?);
            rows.push(TableRow {
                procedure: "EnCoR".into(),
                total: c.total,
                via_core: c.via_core,
                expected_total: (7, 7),
                expected_via_core: (2, 2),
            });
            let extra = transport_extra_packets()?;
            rows.push(TableRow {
                procedure: "EnCoR+transport".into(),
                total: c.total + extra,
                via_core: c.via_core,
                expected_total: (8, 10),
                expected_via_core: (2, 2),
            });
        }
    }
    Ok(MessageTable { rows })
}

/// Control packets the client sends per migration, measured on a live
/// stream that moves during an idle gap.
fn transport_extra_packets() -> Result<usize, ExperimentError> {
    let m = live_idle_migration(
        &TransportConfig::default(),
        &LiveParams::default(),
        MigrationMode::PingOnIdle,
        1,
    )?;
    if m.handovers == 0 {
        return Err(ExperimentError::Scenario("transport run never migrated".into()));
    }
    Ok((m.pings as f64 / m.handovers as f64).ceil() as usize)
}

/// Weighted undirected graph for user-plane path comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTopology {
    pub nodes: usize,
    /// `(a, b, one-way ms)`.
    pub links: Vec<(usize, usize, f64)>,
    /// UE to serving station, one way.
    pub air_ms: f64,
    pub station: usize,
    /// Mobility anchor every LTE packet passes through.
    pub anchor: usize,
    pub destination: usize,
}

impl PathTopology {
    /// Station, core and Internet with the simulator's default latencies.
    pub fn from_latencies(lat: &LinkLatencies) -> Self {
        Self {
            nodes: 3,
            links: vec![
                (0, 1, lat.backhaul.as_millis_f64()),
                (1, 2, lat.core_internet.as_millis_f64()),
                (0, 2, lat.edge_internet.as_millis_f64()),
            ],
            air_ms: lat.air.as_millis_f64(),
            station: 0,
            anchor: 1,
            destination: 2,
        }
    }

    fn graph(&self) -> Result<UnGraph<(), f64>, ExperimentError> {
        let mut g = UnGraph::with_capacity(self.nodes, self.links.len());
        for _ in 0..self.nodes {
            g.add_node(());
        }
        for &(a, b, w) in &self.links {
            if a >= self.nodes || b >= self.nodes {
                return Err(ExperimentError::Scenario(format!("link {a}-{b} names a missing node")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(ExperimentError::Scenario(format!("link {a}-{b} has latency {w}")));
            }
            g.add_edge(NodeIndex::new(a), NodeIndex::new(b), w);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLatency {
    pub lte_rtt_ms: f64,
    pub encor_rtt_ms: f64,
    /// Extra one-way latency of going through the anchor.
    pub detour_ms: f64,
}

fn shortest(g: &UnGraph<(), f64>, from: usize, to: usize) -> Result<f64, ExperimentError> {
    dijkstra(g, NodeIndex::new(from), Some(NodeIndex::new(to)), |e| *e.weight())
        .get(&NodeIndex::new(to))
        .copied()
        .ok_or_else(|| ExperimentError::Scenario(format!("node {to} unreachable from {from}")))
}

/// Round-trip time to the destination when LTE hauls traffic through the
/// anchor versus EnCoR egressing at the nearest route from the station.
pub fn run_path_latency(topology: &PathTopology) -> Result<PathLatency, ExperimentError> {
    let g = topology.graph()?;
    for n in [topology.station, topology.anchor, topology.destination] {
        if n >= topology.nodes {
            return Err(ExperimentError::Scenario(format!("node {n} out of range")));
        }
    }
    let direct = shortest(&g, topology.station, topology.destination)?;
    let anchored = shortest(&g, topology.station, topology.anchor)?
        + shortest(&g, topology.anchor, topology.destination)?;
    Ok(PathLatency {
        lte_rtt_ms: 2.0 * (topology.air_ms + anchored),
        encor_rtt_ms: 2.0 * (topology.air_ms + direct),
        detour_ms: anchored - direct,
    })
}
