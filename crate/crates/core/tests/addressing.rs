use encor::addressing::{
    assign_private_addr, nat_downlink, nat_uplink, Addr128, DownlinkDecision, InbPrefix,
    RecentlyMovedTable, UplinkRewrite, DEFAULT_MOVED_TTL, PRIVATE_LOCATOR,
};
use encor::sim::SimTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn round_trip_identity_over_random_addresses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let empty = RecentlyMovedTable::new(DEFAULT_MOVED_TTL);
    for _ in 0..100_000 {
        let id: u64 = rng.random_range(1..=u64::MAX);
        let inb = InbPrefix::for_index(rng.random());
        let private = assign_private_addr(id).unwrap().addr();
        let UplinkRewrite::Translated(public) = nat_uplink(private, inb) else {
            panic!("private source {private} was not translated");
        };
        assert_eq!(public.locator(), inb.locator());
        assert_eq!(public.identifier(), id);
        let back = nat_downlink(public, |i| i == id, &empty, SimTime::ZERO);
        assert_eq!(back, DownlinkDecision::Deliver(private));
    }
}

#[test]
fn moved_ue_is_forwarded_until_ttl() {
    let mut moved = RecentlyMovedTable::new(SimTime::from_secs(2));
    let target = InbPrefix::for_index(9);
    moved.record_move(42, target, SimTime::ZERO);
    let dst = Addr128::from_parts(InbPrefix::for_index(3).locator(), 42);
    let before = nat_downlink(dst, |_| false, &moved, SimTime::from_millis(1999));
    assert_eq!(before, DownlinkDecision::Forward(dst.with_locator(target.locator())));
    let after = nat_downlink(dst, |_| false, &moved, SimTime::from_secs(2));
    assert_eq!(after, DownlinkDecision::Drop);
    assert_ne!(PRIVATE_LOCATOR, target.locator());
}
