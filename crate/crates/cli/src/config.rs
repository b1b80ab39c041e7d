//! Run configuration. Every key is optional and defaults to the value
//! documented beside it; unknown keys are rejected.

use std::path::{Path, PathBuf};

use encor::control::LinkLatencies;
use encor::experiments::LoadScenario;
use encor::mec::{GridNetwork, MessageCosts};
use encor::placement::{CostModel, SyntheticSpec};
use encor::sim::{ServiceModel, SimTime};
use encor::transport::{BufferedParams, LiveParams, TransportConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; `--seed` overrides it.
    pub seed: u64,
    /// Output directory; `--out` overrides it. Unset prints to stdout.
    pub out: Option<PathBuf>,
    pub load: LoadSection,
    pub mec: MecSection,
    pub placement: PlacementSection,
    pub apps: AppsSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            out: None,
            load: LoadSection::default(),
            mec: MecSection::default(),
            placement: PlacementSection::default(),
            apps: AppsSection::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("{field}: {why}")));
        let l = &self.load;
        if l.rates.windows(2).any(|w| w[0] >= w[1]) {
            return bad("load.rates", "must be strictly ascending");
        }
        if l.rates.iter().any(|r| !(positive(*r) && r.is_finite())) {
            return bad("load.rates", "must be positive");
        }
        if !positive(l.core_service_rate) {
            return bad("load.core_service_rate", "must be positive");
        }
        if !(l.horizon_s > l.warmup_s && non_negative(l.warmup_s)) {
            return bad("load.horizon_s", "must exceed load.warmup_s");
        }
        for (name, v) in [
            ("load.air_ms", l.air_ms),
            ("load.edge_ms", l.edge_ms),
            ("load.backhaul_ms", l.backhaul_ms),
            ("load.core_internet_ms", l.core_internet_ms),
            ("load.edge_internet_ms", l.edge_internet_ms),
            ("load.drain_s", l.drain_s),
        ] {
            if !(non_negative(v) && v.is_finite()) {
                return bad(name, "must be a non-negative number");
            }
        }
        if !non_negative(self.mec.minutes) {
            return bad("mec.minutes", "must be non-negative");
        }
        if !non_negative(self.mec.rate_per_min) {
            return bad("mec.rate_per_min", "must be non-negative");
        }
        let p = &self.placement;
        if p.max_cores == 0 {
            return bad("placement.max_cores", "must be at least 1");
        }
        if p.budgets_km.iter().any(|&b| !non_negative(b)) {
            return bad("placement.budgets_km", "must be non-negative");
        }
        if p.counties == 0 || p.pops == 0 || p.cdns == 0 {
            return bad("placement", "counties, pops and cdns must be at least 1");
        }
        let a = &self.apps;
        if !positive(a.bandwidth_mbps) {
            return bad("apps.bandwidth_mbps", "must be positive");
        }
        if a.file_mb == 0 {
            return bad("apps.file_mb", "must be positive");
        }
        if !(positive(a.buffered_s) && positive(a.live_s)) {
            return bad("apps", "buffered_s and live_s must be positive");
        }
        Ok(())
    }
}

// False for NaN as well.
fn positive(v: f64) -> bool {
    v > 0.0
}

fn non_negative(v: f64) -> bool {
    v >= 0.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadSection {
    /// 32
    pub ues: u32,
    /// 64
    pub stations: u32,
    /// 8 stations share a HOP.
    pub group_size: u32,
    /// Handover events per second: 1, 2, 4, 8, 16, 32, 48, 64.
    pub rates: Vec<f64>,
    /// 1000 messages per second, so LTE reaches 0.96 utilization at the top
    /// rate.
    pub core_service_rate: f64,
    /// "deterministic" or "exponential".
    pub service_model: ServiceModel,
    pub horizon_s: f64,
    pub warmup_s: f64,
    pub drain_s: f64,
    pub air_ms: f64,
    pub edge_ms: f64,
    pub backhaul_ms: f64,
    pub core_internet_ms: f64,
    pub edge_internet_ms: f64,
}

impl Default for LoadSection {
    fn default() -> Self {
        let s = LoadScenario::default();
        let l = s.latencies;
        Self {
            ues: s.ues,
            stations: s.stations,
            group_size: s.group_size,
            rates: s.rates,
            core_service_rate: s.core_service_rate,
            service_model: s.service_model,
            horizon_s: s.horizon.as_secs_f64(),
            warmup_s: s.warmup.as_secs_f64(),
            drain_s: s.drain.as_secs_f64(),
            air_ms: l.air.as_millis_f64(),
            edge_ms: l.edge.as_millis_f64(),
            backhaul_ms: l.backhaul.as_millis_f64(),
            core_internet_ms: l.core_internet.as_millis_f64(),
            edge_internet_ms: l.edge_internet.as_millis_f64(),
        }
    }
}

fn ms(v: f64) -> SimTime {
    SimTime::from_secs_f64(v / 1000.0)
}

impl LoadSection {
    pub fn scenario(&self, seed: u64) -> LoadScenario {
        LoadScenario {
            ues: self.ues,
            stations: self.stations,
            group_size: self.group_size,
            rates: self.rates.clone(),
            core_service_rate: self.core_service_rate,
            service_model: self.service_model,
            latencies: LinkLatencies {
                air: ms(self.air_ms),
                edge: ms(self.edge_ms),
                backhaul: ms(self.backhaul_ms),
                core_internet: ms(self.core_internet_ms),
                edge_internet: ms(self.edge_internet_ms),
            },
            horizon: SimTime::from_secs_f64(self.horizon_s),
            warmup: SimTime::from_secs_f64(self.warmup_s),
            drain: SimTime::from_secs_f64(self.drain_s),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MecSection {
    /// 20 x 20 stations.
    pub width: u32,
    pub height: u32,
    /// 8000
    pub ues: u32,
    /// 5 handovers per UE per minute.
    pub rate_per_min: f64,
    /// 10 simulated minutes.
    pub minutes: f64,
    /// 15 messages for a handover under one anchor.
    pub intra: u64,
    /// 50 messages when the anchor changes.
    pub inter: u64,
    /// Anchor counts to sweep; empty means every count that tiles the grid.
    pub densities: Vec<u32>,
}

impl Default for MecSection {
    fn default() -> Self {
        let g = GridNetwork::default();
        let c = MessageCosts::default();
        Self {
            width: g.width,
            height: g.height,
            ues: g.ues,
            rate_per_min: g.rate_per_min,
            minutes: 10.0,
            intra: c.intra,
            inter: c.inter,
            densities: Vec::new(),
        }
    }
}

impl MecSection {
    pub fn grid(&self) -> GridNetwork {
        GridNetwork {
            width: self.width,
            height: self.height,
            ues: self.ues,
            rate_per_min: self.rate_per_min,
        }
    }

    pub fn costs(&self) -> MessageCosts {
        MessageCosts {
            intra: self.intra,
            inter: self.inter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSection {
    /// County, PoP and CDN CSV files. Unset, or `--synthetic`, generates a
    /// dataset from the sizes below.
    pub counties_csv: Option<PathBuf>,
    pub pops_csv: Option<PathBuf>,
    pub cdns_csv: Option<PathBuf>,
    /// 3000 synthetic counties.
    pub counties: usize,
    /// 33 synthetic PoPs.
    pub pops: usize,
    /// 20 synthetic CDN sites.
    pub cdns: usize,
    /// Path-length budgets: 500, 1000, 1500, 2000 km.
    pub budgets_km: Vec<f64>,
    /// Core sites placed, 1 through 10.
    pub max_cores: usize,
    /// $2.75M per core site.
    pub core_site_cost: u64,
    /// $200k per edge border router.
    pub border_router_cost: u64,
}

impl Default for PlacementSection {
    fn default() -> Self {
        let cost = CostModel::default();
        Self {
            counties_csv: None,
            pops_csv: None,
            cdns_csv: None,
            counties: 3000,
            pops: 33,
            cdns: 20,
            budgets_km: vec![500.0, 1000.0, 1500.0, 2000.0],
            max_cores: 10,
            core_site_cost: cost.core_site,
            border_router_cost: cost.border_router,
        }
    }
}

impl PlacementSection {
    pub fn synthetic(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            counties: self.counties,
            pops: self.pops,
            cdns: self.cdns,
        }
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            core_site: self.core_site_cost,
            border_router: self.border_router_cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppsSection {
    /// 20 Mbps bottleneck.
    pub bandwidth_mbps: f64,
    /// 100 MB bulk download.
    pub file_mb: u64,
    /// 60 s of buffered video.
    pub buffered_s: f64,
    /// 20 s of live video.
    pub live_s: f64,
    /// Handovers per run, spread evenly: 0, 1 and 3.
    pub handovers: Vec<u32>,
    /// Recently-moved forwarding at the source iNB.
    pub forwarding: bool,
}

impl Default for AppsSection {
    fn default() -> Self {
        let t = TransportConfig::default();
        Self {
            bandwidth_mbps: t.bandwidth_mbps,
            file_mb: 100,
            buffered_s: BufferedParams::default().duration.as_secs_f64(),
            live_s: LiveParams::default().duration.as_secs_f64(),
            handovers: vec![0, 1, 3],
            forwarding: t.forwarding,
        }
    }
}

impl AppsSection {
    pub fn transport(&self) -> TransportConfig {
        TransportConfig {
            bandwidth_mbps: self.bandwidth_mbps,
            forwarding: self.forwarding,
            ..TransportConfig::default()
        }
    }
}
