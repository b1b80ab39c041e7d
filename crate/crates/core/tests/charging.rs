use encor::charging::{ChargingConfig, ChargingNetwork, Ledger, UsageEvent};
use encor::sim::SimTime;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KB: u64 = 1_000;

fn cfg(proxies: u32, inbs: u32) -> ChargingConfig {
    ChargingConfig {
        proxies,
        inbs,
        sub_quota: 100 * KB,
        batch: 1_000 * KB,
        ..ChargingConfig::default()
    }
}

fn random_workload(rng: &mut ChaCha8Rng, n: usize, subs: u64, inbs: u32) -> Vec<UsageEvent> {
    (0..n)
        .map(|_| UsageEvent {
            at: SimTime::from_micros(rng.random_range(0..5_000_000)),
            subscriber: rng.random_range(1..=subs),
            inb: rng.random_range(0..inbs),
            bytes: rng.random_range(1..60 * KB),
        })
        .collect()
}

/// Independent tally of the same quantities from the event log.
fn ledger_from_log(net: &ChargingNetwork) -> (u64, u64, u64) {
    let mut ocs = 0;
    let mut cp = 0;
    let mut inb = 0;
    for e in &net.state.log {
        match e.event {
            "credit-grant" => ocs += e.bytes,
            "subquota" => cp += e.bytes,
            "quota-grant" => inb += e.bytes,
            _ => {}
        }
    }
    (ocs, cp, inb)
}

fn check(ledger: &Ledger, net: &ChargingNetwork) {
    assert!(ledger.is_conserved(), "{ledger:?}");
    assert_eq!(ledger_from_log(net), (ledger.ocs_granted, ledger.cp_granted, ledger.inb_granted));
}

#[test]
fn randomized_workloads_conserve_bytes() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ChargingNetwork::new(cfg(2, 4)).unwrap();
        for s in 1..=5 {
            net.state.open_account(s, rng.random_range(0..3_000 * KB));
        }
        let events = random_workload(&mut rng, 1_000, 5, 4);
        let ledger = net.run_workload(&events).unwrap();
        check(&ledger, &net);
        let demanded: u64 = events.iter().map(|e| e.bytes).sum();
        assert_eq!(ledger.delivered + ledger.rejected, demanded);
    }
}

#[test]
fn restarts_never_overcharge() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = ChargingNetwork::new(cfg(2, 4)).unwrap();
    net.state.open_account(1, 5_000 * KB);
    for round in 0..5 {
        let events = random_workload(&mut rng, 200, 1, 4);
        let events: Vec<_> = events
            .into_iter()
            .map(|e| UsageEvent {
                at: net.sim.now() + e.at,
                ..e
            })
            .collect();
        net.run_workload(&events).unwrap();
        let now = net.sim.now();
        net.state.restart_proxy(round % 2, now).unwrap();
    }
    let ledger = net.state.ledger();
    check(&ledger, &net);
}

#[test]
fn batching_bound_holds() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut net = ChargingNetwork::new(cfg(3, 6)).unwrap();
        net.state.open_account(1, rng.random_range(500 * KB..20_000 * KB));
        let events = random_workload(&mut rng, 1_000, 1, 6);
        let ledger = net.run_workload(&events).unwrap();
        let batch = 1_000 * KB;
        let proxies_used = events
            .iter()
            .map(|e| e.inb % 3)
            .collect::<std::collections::BTreeSet<_>>()
            .len() as u64;
        // Proxies prefetch ahead of use, so the bound is on granted bytes.
        let bound = ledger.cp_granted.div_ceil(batch) + proxies_used;
        assert!(
            ledger.ocs_requests <= bound,
            "{} requests > bound {bound}",
            ledger.ocs_requests
        );
    }
}

#[test]
fn cutoff_stops_all_delivery() {
    let mut net = ChargingNetwork::new(cfg(1, 2)).unwrap();
    net.state.open_account(1, 250 * KB);
    let events: Vec<_> = (0..100)
        .map(|k| UsageEvent {
            at: SimTime::from_millis(10 * k),
            subscriber: 1,
            inb: (k % 2) as u32,
            bytes: 10 * KB,
        })
        .collect();
    let ledger = net.run_workload(&events).unwrap();
    assert_eq!(net.state.ocs.accounts[&1].balance, 0);
    assert!(ledger.delivered <= 250 * KB);
    assert!(net.state.log.iter().any(|e| e.event == "cutoff"));
    let delivered = ledger.delivered;
    let late: Vec<_> = (0..20)
        .map(|k| UsageEvent {
            at: net.sim.now() + SimTime::from_millis(10 * k),
            subscriber: 1,
            inb: (k % 2) as u32,
            bytes: 10 * KB,
        })
        .collect();
    let ledger = net.run_workload(&late).unwrap();
    assert_eq!(ledger.delivered, delivered);
}

#[test]
fn event_log_csv_has_header() {
    let mut net = ChargingNetwork::new(cfg(1, 1)).unwrap();
    net.state.open_account(1, 1_000 * KB);
    net.run_workload(&[UsageEvent {
        at: SimTime::ZERO,
        subscriber: 1,
        inb: 0,
        bytes: 10,
    }])
    .unwrap();
    let csv = net.state.log_csv();
    assert!(csv.starts_with("time_us,actor,event,subscriber,bytes\n"));
    assert!(csv.contains(",OCS,credit-grant,1,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conservation_for_arbitrary_interleavings(
        seed in any::<u64>(),
        balance in 0u64..4_000_000,
        proxies in 1u32..4,
        inbs in 1u32..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ChargingNetwork::new(cfg(proxies, inbs)).unwrap();
        net.state.open_account(1, balance);
        let events = random_workload(&mut rng, 300, 1, inbs);
        let ledger = net.run_workload(&events).unwrap();
        prop_assert!(ledger.is_conserved());
        prop_assert!(ledger.delivered <= balance);
    }
}
