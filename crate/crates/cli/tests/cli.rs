use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use encor::experiments::{run_load_sweep, LoadRow};
use encor::mec::{sweep, SweepRow};
use encor::placement::{gen_synthetic, County, SitePoint, SyntheticSpec};
use encor::transport::MetricsRow;
use encor_cli::commands::{app_rows, placement_rows, PlaceRow, TableCsvRow};
use encor_cli::config::Config;
use encor_cli::data::parse_rows;
use tempfile::tempdir;

fn encor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encor")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn rows<T: serde::de::DeserializeOwned>(text: &str) -> Vec<T> {
    parse_rows(text, Path::new("<output>")).unwrap()
}

#[test]
fn table_reports_canonical_counts() {
    let o = encor(&["table"]);
    assert_eq!(o.status.code(), Some(0));
    let t: Vec<TableCsvRow> = rows(&stdout(&o));
    let got: Vec<&str> = t.iter().map(|r| r.messages.as_str()).collect();
    assert_eq!(got, ["15(15)", "7(2)", "8(2)"]);

    let o = encor(&["table", "--mode", "direct"]);
    assert_eq!(o.status.code(), Some(0));
    let t: Vec<TableCsvRow> = rows(&stdout(&o));
    assert_eq!(t[1].procedure, "EnCoR direct");
    assert_eq!((t[1].total, t[1].via_core), (6, 0));

    let pretty = stdout(&encor(&["table", "--format", "pretty"]));
    assert!(pretty.lines().any(|l| l.contains("LTE") && l.contains("15(15)")));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(encor(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(encor(&["mec", "--grid", "twenty"]).status.code(), Some(1));
    assert_eq!(encor(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_names_the_field() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("run.toml");
    fs::write(&p, "seed = 3\n[mec]\nwidht = 20\n").unwrap();
    let o = encor(&["mec", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("widht"), "{}", stderr(&o));

    fs::write(&p, "[load]\nrates = [4.0, 2.0]\n").unwrap();
    let o = encor(&["load", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("load.rates"));
}

#[test]
fn config_file_sets_parameters() {
    let cfg = Config::parse("seed = 9\n[mec]\nwidth = 8\nheight = 8\nues = 100\nminutes = 1.0\n").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.mec.width, 8);
    assert_eq!(cfg.mec.intra, 15);
    assert_eq!(Config::parse("").unwrap(), Config::default());
}

#[test]
fn mec_ratio_reaches_cost_ratio_and_round_trips() {
    let o = encor(&["mec", "--grid", "20x20"]);
    assert_eq!(o.status.code(), Some(0));
    let parsed: Vec<SweepRow> = rows(&stdout(&o));
    let last = parsed.last().unwrap();
    assert_eq!(last.k, 400);
    assert!((last.ratio_vs_k1 - 50.0 / 15.0).abs() < 0.05);

    let cfg = Config::default();
    let grid = cfg.mec.grid();
    let mem = sweep(&grid, &grid.valid_anchor_counts(), cfg.mec.minutes, cfg.seed, cfg.mec.costs()).unwrap();
    assert_eq!(parsed, mem);
}

#[test]
fn place_is_deterministic_and_writes_atomically() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    for d in [&a, &b] {
        let o = encor(&["place", "--synthetic", "--seed", "7", "--out", d.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let fa = fs::read(a.path().join("place.csv")).unwrap();
    assert_eq!(fa, fs::read(b.path().join("place.csv")).unwrap());
    let names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["place.csv"]);

    let parsed: Vec<PlaceRow> = rows(&String::from_utf8(fa).unwrap());
    let cfg = Config {
        seed: 7,
        ..Config::default()
    };
    let mem = placement_rows(&cfg, &gen_synthetic(cfg.placement.synthetic(7))).unwrap();
    assert_eq!(parsed, mem);
    for r in &parsed {
        assert!(r.covered_3gpp <= r.covered_encor);
    }
}

#[test]
fn gen_output_is_reproducible_and_readable() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    for d in [&a, &b] {
        let o = encor(&["gen", "--seed", "5", "--counties", "40", "--pops", "6", "--cdns", "3", "--out", d.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["counties.csv", "pops.csv", "cdns.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let text = fs::read_to_string(a.path().join("counties.csv")).unwrap();
    let counties: Vec<County> = rows(&text);
    let total: u64 = counties.iter().map(|c| c.population).sum();
    assert_eq!(text.lines().next().unwrap(), format!("# total_population={total}"));
    let expected = gen_synthetic(SyntheticSpec {
        seed: 5,
        counties: 40,
        pops: 6,
        cdns: 3,
    });
    assert_eq!(counties, expected.counties);
    let pops: Vec<SitePoint> = rows(&fs::read_to_string(a.path().join("pops.csv")).unwrap());
    assert_eq!(pops, expected.pops);

    // The files feed `place` like a real dataset.
    let cfg = a.path().join("run.toml");
    let p = |f: &str| a.path().join(f).display().to_string();
    fs::write(
        &cfg,
        format!(
            "[placement]\ncounties_csv = {:?}\npops_csv = {:?}\ncdns_csv = {:?}\nmax_cores = 3\n",
            p("counties.csv"),
            p("pops.csv"),
            p("cdns.csv")
        ),
    )
    .unwrap();
    let o = encor(&["place", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn malformed_county_row_cites_its_line() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("c.csv"),
        "# total_population=3\nfips,name,lat,lon,population\n00001,A,40.0,-100.0,1\n00002,B,forty,-90.0,2\n",
    )
    .unwrap();
    fs::write(d.join("s.csv"), "id,lat,lon\npop001,40.0,-100.0\n").unwrap();
    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[placement]\ncounties_csv = {:?}\npops_csv = {:?}\ncdns_csv = {:?}\n",
            d.join("c.csv"),
            d.join("s.csv"),
            d.join("s.csv")
        ),
    )
    .unwrap();
    let o = encor(&["place", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.csv:4:"), "{}", stderr(&o));

    fs::write(d.join("c.csv"), "fips,name,lat,lon,population\n00001,A,95.0,-100.0,1\n").unwrap();
    let o = encor(&["place", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.csv:2:"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_lists_the_path() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[placement]\ncounties_csv = \"/nonexistent/counties.csv\"\npops_csv = \"p.csv\"\ncdns_csv = \"c.csv\"\n",
    )
    .unwrap();
    let o = encor(&["place", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/counties.csv"));
}

#[test]
fn load_output_round_trips() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[load]\nrates = [2.0, 32.0]\nhorizon_s = 5.0\n").unwrap();
    let out = dir.path().join("res");
    let o = encor(&["load", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let parsed: Vec<LoadRow> = rows(&fs::read_to_string(out.join("load.csv")).unwrap());
    let c = Config::load(&cfg).unwrap();
    assert_eq!(parsed, run_load_sweep(&c.load.scenario(c.seed)).unwrap().rows);
}

#[test]
fn apps_output_round_trips() {
    let cfg = Config::parse("[apps]\nfile_mb = 10\nbuffered_s = 10.0\nhandovers = [1]\n").unwrap();
    let mem = app_rows(&cfg).unwrap();
    let parsed: Vec<MetricsRow> = rows(&encor_cli::data::to_csv(&mem).unwrap());
    assert_eq!(parsed, mem);
    assert!(mem.iter().any(|r| r.app == "live-idle" && r.deadlocked));
}
