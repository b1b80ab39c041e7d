use encor::control::{imsi_of, EncorConfig, EncorNetwork, LinkLatencies};
use encor::lte::{LteConfig, LteError, LteNetwork, LteUeState, PGW_POOL};
use encor::message::{count_messages, Element, TraceOutcome, S1_SEQUENCE};
use encor::sim::SimTime;

fn attached(cfg: LteConfig) -> LteNetwork {
    let mut net = LteNetwork::new(cfg).unwrap();
    for ue in 0..net.control.ue_count() {
        net.attach_lte(ue, 0).unwrap();
    }
    net
}

#[test]
fn attach_installs_both_tunnel_segments() {
    let mut net = LteNetwork::new(LteConfig::default()).unwrap();
    let tunnel = net.attach_lte(0, 2).unwrap();
    assert_eq!(tunnel.s1.downstream, Element::Enb(2));
    assert_eq!(tunnel.s1.upstream, Element::Sgw);
    assert_eq!(tunnel.s5.downstream, Element::Sgw);
    assert_eq!(tunnel.s5.upstream, Element::Pgw);
    assert!(tunnel.s1.teid_down > 0 && tunnel.s1.teid_up > 0);
    assert!(tunnel.s5.teid_down > 0 && tunnel.s5.teid_up > 0);
    let anchor = net.control.anchor(0).unwrap();
    assert_eq!(anchor.public_ip.locator(), PGW_POOL);
    assert_eq!(net.control.ue_state(0), Some(LteUeState::Connected));
}

#[test]
fn teids_are_unique_per_node() {
    let net = attached(LteConfig::default());
    let mut sgw_teids: Vec<u32> = net
        .control
        .anchors
        .values()
        .flat_map(|a| [a.tunnel.s1.teid_up, a.tunnel.s5.teid_down])
        .collect();
    let n = sgw_teids.len();
    sgw_teids.sort_unstable();
    sgw_teids.dedup();
    assert_eq!(sgw_teids.len(), n);
}

#[test]
fn unknown_subscriber_is_rejected() {
    let mut net = LteNetwork::new(LteConfig::default()).unwrap();
    net.control.subdb.remove(&imsi_of(0));
    assert!(matches!(
        net.attach_lte(0, 0),
        Err(LteError::AttachFailed { ue: 0, .. })
    ));
    assert_eq!(net.control.ue_state(0), Some(LteUeState::Detached));
}

#[test]
fn s1_trace_is_fifteen_all_via_core() {
    let mut net = attached(LteConfig::default());
    let before = net.control.anchor(0).unwrap().clone();
    let trace = net.s1_handover(0, 0, 1).unwrap();
    assert_eq!(trace.outcome, TraceOutcome::Completed);
    assert_eq!(trace.kinds(), S1_SEQUENCE.to_vec());
    let counts = count_messages(&trace);
    assert_eq!((counts.total, counts.via_core), (15, 15));
    assert_eq!(counts.per_kind["HoCommand"], 2);
    let after = net.control.anchor(0).unwrap();
    assert_eq!(after.public_ip, before.public_ip);
    assert_ne!(after.tunnel, before.tunnel);
    assert_ne!(after.tunnel.s1.teid_down, before.tunnel.s1.teid_down);
    assert_eq!(after.tunnel.s1.downstream, Element::Enb(1));
    assert_eq!(net.control.serving(0), Some(1));
    assert!(!net.control.enbs[0].contexts.contains_key(&imsi_of(0)));
}

#[test]
fn every_s1_message_is_served_by_the_core_once() {
    let mut net = attached(LteConfig::default());
    let core = net.control.core_node().0;
    let served = |net: &LteNetwork| net.sim.stats().by_node.get(&core).map_or(0, |n| n.served);
    let before = served(&net);
    net.s1_handover(0, 0, 1).unwrap();
    assert_eq!(served(&net) - before, 15);
}

#[test]
fn public_ip_survives_many_handovers() {
    let mut net = attached(LteConfig::default());
    let ip = net.control.anchor(0).unwrap().public_ip;
    let ncc = net.control.ue_keys(0).unwrap().ncc;
    for k in 0..20u32 {
        let src = net.control.serving(0).unwrap();
        let tgt = (src + 1 + k % 3) % 8;
        assert!(net.s1_handover(0, src, tgt).unwrap().is_completed());
        assert_eq!(net.control.anchor(0).unwrap().public_ip, ip);
    }
    assert_eq!(net.control.ue_keys(0).unwrap().ncc, ncc + 20);
}

#[test]
fn downlink_during_handover_is_buffered_without_loss() {
    let mut net = attached(LteConfig::default());
    let p = net.control.start_handover(&mut net.sim, 0, 0, 1).unwrap();
    let mut t = net.sim.now();
    for _ in 0..300 {
        t += SimTime::from_micros(500);
        net.sim.run_until(t, &mut net.control);
        net.control.send_downlink(&mut net.sim, 0, vec![0; 10]).unwrap();
    }
    net.run();
    assert!(net.control.handover_trace(p).unwrap().is_completed());
    let data = &net.control.data;
    assert_eq!(data.sent, 300);
    assert!(data.dropped.is_empty(), "{:?}", data.dropped);
    assert_eq!(data.delivered.len(), 300);
    let end = net.control.handover_trace(p).unwrap().end.unwrap();
    let cmd = net.control.handover_trace(p).unwrap().messages[6].time;
    assert!(
        data.delivered.iter().any(|&(_, at)| at >= end - SimTime::from_millis(40)),
        "some packets were held until the path switched"
    );
    assert!(cmd < end);
}

#[test]
fn capped_buffer_drops_overflow() {
    let cfg = LteConfig {
        buffer_cap: Some(2),
        ..LteConfig::default()
    };
    let mut net = attached(cfg);
    net.control.start_handover(&mut net.sim, 0, 0, 1).unwrap();
    let mut t = net.sim.now();
    for _ in 0..300 {
        t += SimTime::from_micros(500);
        net.sim.run_until(t, &mut net.control);
        net.control.send_downlink(&mut net.sim, 0, vec![0; 10]).unwrap();
    }
    net.run();
    let data = &net.control.data;
    assert!(!data.dropped.is_empty());
    assert_eq!(data.delivered.len() + data.dropped.len(), 300);
}

#[test]
fn admission_refusal_aborts() {
    let cfg = LteConfig {
        admission_cap: Some(1),
        ..LteConfig::default()
    };
    let mut net = LteNetwork::new(cfg).unwrap();
    net.attach_lte(0, 0).unwrap();
    net.attach_lte(1, 1).unwrap();
    let trace = net.s1_handover(0, 0, 1).unwrap();
    assert!(matches!(trace.outcome, TraceOutcome::Failed(_)));
    assert_eq!(net.control.serving(0), Some(0));
    assert!(net.s1_handover(0, 0, 2).unwrap().is_completed());
}

#[test]
fn user_path_detours_through_anchors() {
    let lat = LinkLatencies {
        air: SimTime::from_millis(2),
        edge: SimTime::from_millis(2),
        backhaul: SimTime::from_millis(12),
        core_internet: SimTime::from_millis(7),
        edge_internet: SimTime::from_millis(3),
    };
    let sgw_pgw = SimTime::from_millis(4);
    let lte = attached(LteConfig {
        latencies: lat,
        sgw_pgw,
        ..LteConfig::default()
    });
    let mut encor = EncorNetwork::new(EncorConfig {
        latencies: lat,
        ..EncorConfig::default()
    })
    .unwrap();
    encor.attach(0, 0).unwrap();
    let lte_path = lte.control.route_user_packet(0).unwrap();
    let encor_path = encor.control.user_path(0).unwrap();
    assert!(lte_path.hops.contains(&Element::Pgw));
    assert!(lte_path.traverses_core());
    assert!(!encor_path.traverses_core());
    // Detour: eNB -> S-GW -> P-GW -> Internet instead of iNB -> Internet.
    let detour = SimTime::from_millis(12 + 4 + 7 - 3);
    assert_eq!(lte_path.latency - encor_path.latency, detour);
    // The simulator's own routing agrees with the declared path latency.
    assert_eq!(lte_path.latency, SimTime::from_millis(2 + 12 + 4 + 7));
}

#[test]
fn missing_tunnel_is_an_error() {
    let net = LteNetwork::new(LteConfig::default()).unwrap();
    assert_eq!(net.control.route_user_packet(0).unwrap_err(), LteError::NoTunnel(0));
}
