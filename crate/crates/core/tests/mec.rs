use encor::mec::{simulate_density, sweep, GridNetwork, MessageCosts};

/// Long-run share of boundary-crossing moves for a walk that picks uniformly
/// among existing neighbours: every directed (station, neighbour) pair is
/// equally likely in the stationary regime, so count them.
fn enumerated_crossing_fraction(w: i32, h: i32, side: i32) -> f64 {
    let mut pairs = 0;
    let mut crossing = 0;
    for y in 0..h {
        for x in 0..w {
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                pairs += 1;
                if (x / side, y / side) != (nx / side, ny / side) {
                    crossing += 1;
                }
            }
        }
    }
    crossing as f64 / pairs as f64
}

#[test]
fn four_by_four_matches_enumeration() {
    let oracle = enumerated_crossing_fraction(4, 4, 2);
    assert!((oracle - 16.0 / 48.0).abs() < 1e-12);
    let grid = GridNetwork {
        width: 4,
        height: 4,
        ues: 2_000,
        rate_per_min: 30.0,
    };
    let p = simulate_density(&grid, 4, 10.0, 11, MessageCosts::default()).unwrap();
    assert!(
        (p.inter_fraction() - oracle).abs() < 0.005,
        "{} vs {oracle}",
        p.inter_fraction()
    );
}

#[test]
fn boundary_cases() {
    let grid = GridNetwork {
        ues: 500,
        ..GridNetwork::default()
    };
    let costs = MessageCosts::default();
    let one = simulate_density(&grid, 1, 5.0, 2, costs).unwrap();
    assert_eq!(one.inter, 0);
    assert_eq!(one.messages, one.handovers * 15);
    let all = simulate_density(&grid, 400, 5.0, 2, costs).unwrap();
    assert_eq!(all.inter, all.handovers);
    assert_eq!(all.handovers, one.handovers);
    assert!(simulate_density(&grid, 8, 5.0, 2, costs).is_err());
}

#[test]
fn handover_total_within_poisson_bounds() {
    let grid = GridNetwork {
        ues: 3_000,
        ..GridNetwork::default()
    };
    let p = simulate_density(&grid, 16, 4.0, 5, MessageCosts::default()).unwrap();
    let mean = 3_000.0 * 5.0 * 4.0;
    assert!((p.handovers as f64 - mean).abs() <= 3.0 * f64::sqrt(mean));
}

#[test]
fn sweep_is_monotone_and_reaches_cost_ratio() {
    let grid = GridNetwork {
        ues: 1_000,
        ..GridNetwork::default()
    };
    let ks = grid.valid_anchor_counts();
    let rows = sweep(&grid, &ks, 5.0, 9, MessageCosts::default()).unwrap();
    assert_eq!(rows[0].ratio_vs_k1, 1.0);
    for w in rows.windows(2) {
        assert!(w[1].ratio_vs_k1 >= w[0].ratio_vs_k1);
        assert!(w[1].inter >= w[0].inter);
    }
    let last = rows.last().unwrap();
    assert!((last.ratio_vs_k1 - 50.0 / 15.0).abs() < 1e-9);
    assert_eq!(last.anchors_per_station, 1.0);
    for r in &rows {
        assert!(r.inter <= r.handovers);
        assert_eq!(r.messages, (r.handovers - r.inter) * 15 + r.inter * 50);
    }
}

#[test]
fn deterministic_under_seed() {
    let grid = GridNetwork {
        ues: 200,
        ..GridNetwork::default()
    };
    let a = simulate_density(&grid, 25, 3.0, 42, MessageCosts::default()).unwrap();
    let b = simulate_density(&grid, 25, 3.0, 42, MessageCosts::default()).unwrap();
    assert_eq!(a, b);
    let c = simulate_density(&grid, 25, 3.0, 43, MessageCosts::default()).unwrap();
    assert_ne!(a, c);
}
