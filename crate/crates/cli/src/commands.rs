use std::path::Path;

use encor::experiments::{run_load_sweep, run_message_table, ExperimentError};
use encor::mec::{sweep, MecError};
use encor::message::HandoverMode;
use encor::placement::{cost_compare, county_distance_encor, gen_synthetic, greedy_place, Dataset, PlacementError};
use encor::sim::SimTime;
use encor::transport::{
    live_idle_migration, run_buffered, run_bulk, run_live, BufferedParams, HandoverSchedule, LiveParams,
    MetricsRow, MigrationMode, MigrationPolicy, TransportError,
};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{self, to_csv, write_atomic};
use crate::{Cli, CliError, Command, Common, Format, TableMode, EXIT_CHECK, EXIT_OK};

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Scenario(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MecError> for CliError {
    fn from(e: MecError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PlacementError> for CliError {
    fn from(e: PlacementError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// One named CSV result.
pub struct Output {
    pub name: &'static str,
    pub csv: String,
}

pub fn execute(cli: &Cli) -> Result<i32, CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        cfg.out = Some(out.clone());
    }
    let mut code = EXIT_OK;
    let outputs = match &cli.command {
        Command::Table { mode } => {
            let (out, ok) = table(*mode)?;
            if !ok {
                code = EXIT_CHECK;
            }
            out
        }
        Command::Load => load(&cfg)?,
        Command::Mec { grid } => {
            if let Some(g) = grid {
                let (w, h) = parse_grid(g)?;
                cfg.mec.width = w;
                cfg.mec.height = h;
            }
            mec(&cfg)?
        }
        Command::Place { synthetic } => place(&cfg, *synthetic)?,
        Command::Apps => apps(&cfg)?,
        Command::Gen { counties, pops, cdns } => {
            let mut spec = cfg.placement.synthetic(cfg.seed);
            spec.counties = counties.unwrap_or(spec.counties);
            spec.pops = pops.unwrap_or(spec.pops);
            spec.cdns = cdns.unwrap_or(spec.cdns);
            if spec.counties == 0 || spec.pops == 0 || spec.cdns == 0 {
                return Err(CliError::Usage("gen needs at least one county, PoP and CDN".into()));
            }
            let dir = cfg
                .out
                .clone()
                .ok_or_else(|| CliError::Usage("gen needs --out DIR".into()))?;
            return gen(&dir, &gen_synthetic(spec)).map(|_| EXIT_OK);
        }
    };
    emit(&cli.common, cfg.out.as_deref(), &outputs)?;
    Ok(code)
}

fn emit(common: &Common, dir: Option<&Path>, outputs: &[Output]) -> Result<(), CliError> {
    match dir {
        Some(dir) => {
            for o in outputs {
                write_atomic(&dir.join(format!("{}.csv", o.name)), o.csv.as_bytes())?;
            }
        }
        None => {
            for o in outputs {
                match common.format {
                    Format::Csv => print!("{}", o.csv),
                    Format::Pretty => print!("{}", pretty(&o.csv)),
                }
            }
        }
    }
    Ok(())
}

/// Right-aligned columns under a header rule.
pub fn pretty(csv_text: &str) -> String {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(csv_text.as_bytes());
    let rows: Vec<Vec<String>> = rdr
        .records()
        .filter_map(Result::ok)
        .map(|r| r.iter().map(str::to_string).collect())
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:>w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}

fn parse_grid(s: &str) -> Result<(u32, u32), CliError> {
    let bad = || CliError::Usage(format!("--grid expects WIDTHxHEIGHT, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: u32 = w.trim().parse().map_err(|_| bad())?;
    let h: u32 = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableCsvRow {
    pub procedure: String,
    pub total: usize,
    pub via_core: usize,
    pub messages: String,
    pub matches: bool,
}

fn table(mode: TableMode) -> Result<(Vec<Output>, bool), CliError> {
    let mode = match mode {
        TableMode::CoreAssisted => HandoverMode::CoreAssisted,
        TableMode::Direct => HandoverMode::Direct,
    };
    let t = run_message_table(mode)?;
    let rows: Vec<TableCsvRow> = t
        .rows
        .iter()
        .map(|r| TableCsvRow {
            procedure: r.procedure.clone(),
            total: r.total,
            via_core: r.via_core,
            messages: format!("{}({})", r.total, r.via_core),
            matches: r.matches(),
        })
        .collect();
    Ok((
        vec![Output {
            name: "table",
            csv: to_csv(&rows)?,
        }],
        t.all_match(),
    ))
}

fn load(cfg: &Config) -> Result<Vec<Output>, CliError> {
    let r = run_load_sweep(&cfg.load.scenario(cfg.seed))?;
    Ok(vec![Output {
        name: "load",
        csv: to_csv(&r.rows)?,
    }])
}

fn mec(cfg: &Config) -> Result<Vec<Output>, CliError> {
    let grid = cfg.mec.grid();
    let densities = if cfg.mec.densities.is_empty() {
        grid.valid_anchor_counts()
    } else {
        cfg.mec.densities.clone()
    };
    let rows = sweep(&grid, &densities, cfg.mec.minutes, cfg.seed, cfg.mec.costs())?;
    Ok(vec![Output {
        name: "mec",
        csv: to_csv(&rows)?,
    }])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceRow {
    pub budget_km: f64,
    pub cores: usize,
    /// Cores greedy actually placed; fewer when extra sites add nothing.
    pub placed: usize,
    pub covered_3gpp: u64,
    pub covered_encor: u64,
    pub total_population: u64,
    pub fraction_3gpp: f64,
    pub fraction_encor: f64,
    pub cost_3gpp: u64,
    /// One border router at every PoP.
    pub cost_encor: u64,
}

fn dataset(cfg: &Config, synthetic: bool) -> Result<Dataset, CliError> {
    let p = &cfg.placement;
    if synthetic {
        return Ok(gen_synthetic(p.synthetic(cfg.seed)));
    }
    match (&p.counties_csv, &p.pops_csv, &p.cdns_csv) {
        (Some(c), Some(s), Some(d)) => data::read_dataset(c, s, d),
        (None, None, None) => Ok(gen_synthetic(p.synthetic(cfg.seed))),
        _ => Err(CliError::Config(
            "placement: set all of counties_csv, pops_csv and cdns_csv, or none".into(),
        )),
    }
}

pub fn placement_rows(cfg: &Config, d: &Dataset) -> Result<Vec<PlaceRow>, CliError> {
    let p = &cfg.placement;
    let total = d.total_population();
    let encor: Vec<f64> = d
        .counties
        .iter()
        .map(|c| county_distance_encor(c, &d.pops, &d.cdns))
        .collect::<Result<_, _>>()?;
    let frac = |v: u64| if total == 0 { 0.0 } else { v as f64 / total as f64 };
    let cost = p.cost_model();
    let mut rows = Vec::new();
    for &budget in &p.budgets_km {
        let dep = greedy_place(&d.counties, &d.pops, &d.cdns, p.max_cores, budget)?;
        let covered_encor: u64 = d
            .counties
            .iter()
            .zip(&encor)
            .filter(|(_, &km)| km <= budget)
            .map(|(c, _)| c.population)
            .sum();
        let mut covered = 0;
        for n in 1..=p.max_cores {
            if let Some(step) = dep.steps.get(n - 1) {
                covered += step.marginal_population;
            }
            let costs = cost_compare(cost, n as u64, d.pops.len() as u64);
            rows.push(PlaceRow {
                budget_km: budget,
                cores: n,
                placed: n.min(dep.steps.len()),
                covered_3gpp: covered,
                covered_encor,
                total_population: total,
                fraction_3gpp: frac(covered),
                fraction_encor: frac(covered_encor),
                cost_3gpp: costs.cost_3gpp,
                cost_encor: costs.cost_encor,
            });
        }
    }
    Ok(rows)
}

fn place(cfg: &Config, synthetic: bool) -> Result<Vec<Output>, CliError> {
    let d = dataset(cfg, synthetic)?;
    Ok(vec![Output {
        name: "place",
        csv: to_csv(&placement_rows(cfg, &d)?)?,
    }])
}

fn spread(duration: SimTime, n: u32) -> HandoverSchedule {
    let times: Vec<SimTime> = (1..=n as u64)
        .map(|i| SimTime::from_micros(duration.as_micros() * i / (n as u64 + 1)))
        .collect();
    HandoverSchedule::at(&times)
}

pub fn app_rows(cfg: &Config) -> Result<Vec<MetricsRow>, CliError> {
    let a = &cfg.apps;
    let t = a.transport();
    t.validate()?;
    let file_bytes = a.file_mb * 1_000_000;
    let bulk_time = SimTime::from_secs_f64(file_bytes as f64 * 8.0 / (a.bandwidth_mbps * 1e6));
    let buffered = BufferedParams {
        duration: SimTime::from_secs_f64(a.buffered_s),
        ..BufferedParams::default()
    };
    let live = LiveParams {
        duration: SimTime::from_secs_f64(a.live_s),
        ..LiveParams::default()
    };
    let policies = |frame: Option<SimTime>| {
        let ping = match frame {
            Some(f) => MigrationPolicy::ping_for_frames(f),
            None => MigrationPolicy::ping(SimTime::from_millis(100)),
        };
        [MigrationPolicy::passive(), ping]
    };
    let seed = cfg.seed;
    let mut rows = Vec::new();
    for &h in &a.handovers {
        for policy in policies(None) {
            rows.push(run_bulk(&t, file_bytes, &spread(bulk_time, h), policy, seed)?.row());
        }
        for policy in policies(None) {
            rows.push(run_buffered(&t, &buffered, &spread(buffered.duration, h), policy, seed)?.row());
        }
        for policy in policies(Some(live.frame_interval)) {
            rows.push(run_live(&t, &live, policy, &spread(live.duration, h), seed)?.row());
        }
    }
    // A migration in an idle gap with no forwarding to fall back on.
    for mode in [MigrationMode::PassiveOnly, MigrationMode::PingOnIdle] {
        let mut row = live_idle_migration(&t, &live, mode, seed)?.row();
        row.app = "live-idle".into();
        rows.push(row);
    }
    Ok(rows)
}

fn apps(cfg: &Config) -> Result<Vec<Output>, CliError> {
    Ok(vec![Output {
        name: "apps",
        csv: to_csv(&app_rows(cfg)?)?,
    }])
}

fn gen(dir: &Path, d: &Dataset) -> Result<(), CliError> {
    for (name, text) in data::dataset_files(d)? {
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    Ok(())
}
