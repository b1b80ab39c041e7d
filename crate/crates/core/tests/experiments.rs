use encor::control::{EncorConfig, EncorNetwork, LinkLatencies};
use encor::experiments::{
    run_load_point, run_load_sweep, run_message_table, run_path_latency, Architecture, LoadScenario,
    PathTopology,
};
use encor::lte::{LteConfig, LteNetwork};
use encor::message::HandoverMode;
use encor::sim::SimTime;
use proptest::prelude::*;

#[test]
fn message_table_matches_canonical_counts() {
    let t = run_message_table(HandoverMode::CoreAssisted).unwrap();
    let got: Vec<String> = t.rows.iter().map(|r| r.to_string()).collect();
    assert_eq!(got, ["LTE 15(15)", "EnCoR 7(2)", "EnCoR+transport 8(2)"]);
    assert!(t.all_match());

    let d = run_message_table(HandoverMode::Direct).unwrap();
    assert_eq!(d.rows[1].to_string(), "EnCoR direct 6(0)");
    assert!(d.all_match());
}

/// Completion time of one handover on an otherwise idle network.
fn lone_handover_ms(arch: Architecture, rate: Option<f64>) -> f64 {
    let t = match arch {
        Architecture::Encor => {
            let mut net = EncorNetwork::new(EncorConfig {
                inbs: 64,
                core_service_rate: rate,
                ..EncorConfig::default()
            })
            .unwrap();
            net.attach(0, 0).unwrap();
            net.handover_core_assisted(0, 0, 1).unwrap()
        }
        Architecture::Lte => {
            let mut net = LteNetwork::new(LteConfig {
                enbs: 64,
                core_service_rate: rate,
                ..LteConfig::default()
            })
            .unwrap();
            net.attach_lte(0, 0).unwrap();
            net.s1_handover(0, 0, 1).unwrap()
        }
    };
    t.completion_time().unwrap().as_millis_f64()
}

fn short_scenario() -> LoadScenario {
    LoadScenario {
        rates: vec![1.0, 16.0, 48.0, 64.0],
        horizon: SimTime::from_secs(30),
        ..LoadScenario::default()
    }
}

#[test]
fn load_sweep_properties() {
    let s = short_scenario();
    let r = run_load_sweep(&s).unwrap();
    for arch in [Architecture::Encor, Architecture::Lte] {
        let links = lone_handover_ms(arch, None);
        let unloaded = lone_handover_ms(arch, Some(s.core_service_rate));
        let rows: Vec<_> = r.series(arch).collect();
        assert_eq!(rows.len(), s.rates.len());
        for w in rows.windows(2) {
            assert!(w[0].mean_ms <= w[1].mean_ms, "{arch}: mean falls from {:?} to {:?}", w[0], w[1]);
        }
        for row in &rows {
            assert!(row.min_ms >= links, "{arch} at {}: {} < {links}", row.rate_per_s, row.min_ms);
            assert_eq!(row.core_msgs_per_ho, if arch == Architecture::Lte { 15.0 } else { 2.0 });
        }
        // Nearly no queueing at one event per second.
        assert!((rows[0].mean_ms - unloaded).abs() / unloaded < 0.02, "{arch}: {} vs {unloaded}", rows[0].mean_ms);
    }
    for &rate in &s.rates {
        let e = r.at(Architecture::Encor, rate).unwrap();
        let l = r.at(Architecture::Lte, rate).unwrap();
        assert!(e.mean_ms <= l.mean_ms);
    }
    let top = r.at(Architecture::Lte, 64.0).unwrap();
    assert!(top.utilization >= 0.9);
    assert!(top.mean_ms >= 2.0 * r.at(Architecture::Encor, 64.0).unwrap().mean_ms);
}

#[test]
fn overloaded_core_is_flagged_and_still_measured() {
    let s = LoadScenario {
        core_service_rate: 300.0,
        rates: vec![32.0],
        horizon: SimTime::from_secs(10),
        ..LoadScenario::default()
    };
    let row = run_load_point(&s, Architecture::Lte, 32.0).unwrap();
    assert!(row.saturated);
    assert!(row.handovers > 0);
    let e = run_load_point(&s, Architecture::Encor, 32.0).unwrap();
    assert!(!e.saturated);
}

#[test]
fn load_runs_are_deterministic() {
    let s = LoadScenario {
        horizon: SimTime::from_secs(5),
        ..LoadScenario::default()
    };
    let a = run_load_point(&s, Architecture::Lte, 48.0).unwrap();
    let b = run_load_point(&s, Architecture::Lte, 48.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn anchor_on_path_costs_nothing_and_off_path_costs_twice_the_detour() {
    // 0 station, 1 anchor, 2 destination.
    let on_path = PathTopology {
        nodes: 3,
        links: vec![(0, 1, 4.0), (1, 2, 6.0)],
        air_ms: 1.0,
        station: 0,
        anchor: 1,
        destination: 2,
    };
    let p = run_path_latency(&on_path).unwrap();
    assert_eq!(p.lte_rtt_ms, p.encor_rtt_ms);

    let off_path = PathTopology {
        nodes: 3,
        links: vec![(0, 2, 8.0), (0, 1, 5.0), (1, 2, 13.0)],
        ..on_path
    };
    let p = run_path_latency(&off_path).unwrap();
    assert_eq!(p.detour_ms, 10.0);
    assert_eq!(p.lte_rtt_ms - p.encor_rtt_ms, 20.0);

    let lat = LinkLatencies::default();
    let p = run_path_latency(&PathTopology::from_latencies(&lat)).unwrap();
    assert!(p.lte_rtt_ms > p.encor_rtt_ms);
}

/// All-pairs shortest paths by Floyd-Warshall.
fn floyd(n: usize, links: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for &(a, b, w) in links {
        d[a][b] = d[a][b].min(w);
        d[b][a] = d[b][a].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

fn topology() -> impl Strategy<Value = PathTopology> {
    (3usize..9).prop_flat_map(|n| {
        // A spanning chain keeps the graph connected; extra links add shortcuts.
        let extra = prop::collection::vec((0..n, 0..n, 0u32..40), 0..12);
        let chain = prop::collection::vec(1u32..40, n - 1);
        (Just(n), chain, extra, 0..n, 0..n, 0..n, 0u32..5)
    })
    .prop_map(|(n, chain, extra, station, anchor, destination, air)| {
        let mut links: Vec<_> = chain.iter().enumerate().map(|(i, &w)| (i, i + 1, w as f64)).collect();
        links.extend(extra.into_iter().map(|(a, b, w)| (a, b, w as f64)));
        PathTopology {
            nodes: n,
            links,
            air_ms: air as f64,
            station,
            anchor,
            destination,
        }
    })
}

proptest! {
    #[test]
    fn path_latency_matches_all_pairs_oracle(t in topology()) {
        let d = floyd(t.nodes, &t.links);
        let p = run_path_latency(&t).unwrap();
        let direct = d[t.station][t.destination];
        let anchored = d[t.station][t.anchor] + d[t.anchor][t.destination];
        prop_assert!((p.encor_rtt_ms - 2.0 * (t.air_ms + direct)).abs() < 1e-9);
        prop_assert!((p.lte_rtt_ms - 2.0 * (t.air_ms + anchored)).abs() < 1e-9);
        prop_assert!(p.encor_rtt_ms <= p.lte_rtt_ms);
    }
}
