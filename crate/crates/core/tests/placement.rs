use encor::placement::{
    county_distance_3gpp, county_distance_encor, coverage_3gpp, coverage_encor, gen_synthetic,
    greedy_place, haversine, CoverageMatrix, County, SitePoint, SyntheticSpec,
};
use proptest::prelude::*;

fn site(id: &str, lat: f64, lon: f64) -> SitePoint {
    SitePoint {
        id: id.into(),
        lat,
        lon,
    }
}

fn county(i: usize, lat: f64, lon: f64, population: u64) -> County {
    County {
        fips: format!("{i:05}"),
        name: format!("c{i}"),
        lat,
        lon,
        population,
    }
}

fn d(a: (f64, f64), b: (f64, f64)) -> f64 {
    haversine(a, b)
}

/// Every (core, pop, cdn) tuple, no precomputation.
fn brute_3gpp(c: &County, cores: &[SitePoint], pops: &[SitePoint], cdns: &[SitePoint]) -> f64 {
    let mut best = f64::INFINITY;
    for core in cores {
        for pop in pops {
            for cdn in cdns {
                let total = d((c.lat, c.lon), (core.lat, core.lon))
                    + d((core.lat, core.lon), (pop.lat, pop.lon))
                    + d((pop.lat, pop.lon), (cdn.lat, cdn.lon));
                best = best.min(total);
            }
        }
    }
    best
}

fn brute_encor(c: &County, pops: &[SitePoint], cdns: &[SitePoint]) -> f64 {
    let mut best = f64::INFINITY;
    for pop in pops {
        for cdn in cdns {
            best = best.min(d((c.lat, c.lon), (pop.lat, pop.lon)) + d((pop.lat, pop.lon), (cdn.lat, cdn.lon)));
        }
    }
    best
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

fn brute_best(m: &CoverageMatrix, n_pops: usize, k: usize) -> u64 {
    subsets(n_pops, k.min(n_pops))
        .iter()
        .map(|s| m.covered_population(s))
        .max()
        .unwrap_or(0)
}

fn small_instance(seed: u64, counties: usize, pops: usize) -> encor::placement::Dataset {
    gen_synthetic(SyntheticSpec {
        seed,
        counties,
        pops,
        cdns: 3,
    })
}

#[test]
fn colocated_and_single_triple() {
    let c = county(1, 40.0, -100.0, 10);
    let same = [site("a", 40.0, -100.0)];
    assert_eq!(county_distance_3gpp(&c, &same, &same, &same).unwrap(), 0.0);
    let core = [site("core", 41.0, -100.0)];
    let pop = [site("pop", 41.0, -101.0)];
    let cdn = [site("cdn", 42.0, -101.0)];
    let expected = d((40.0, -100.0), (41.0, -100.0))
        + d((41.0, -100.0), (41.0, -101.0))
        + d((41.0, -101.0), (42.0, -101.0));
    let got = county_distance_3gpp(&c, &core, &pop, &cdn).unwrap();
    assert!((got - expected).abs() < 1e-9);
    assert!(county_distance_3gpp(&c, &[], &pop, &cdn).is_err());
    assert!(county_distance_encor(&c, &pop, &[]).is_err());
}

#[test]
fn distances_match_exhaustive_enumeration() {
    let data = small_instance(17, 5, 6);
    let cores = &data.pops[..2];
    for c in &data.counties {
        let a = county_distance_3gpp(c, cores, &data.pops, &data.cdns).unwrap();
        assert!((a - brute_3gpp(c, cores, &data.pops, &data.cdns)).abs() < 1e-9);
        let e = county_distance_encor(c, &data.pops, &data.cdns).unwrap();
        assert!((e - brute_encor(c, &data.pops, &data.cdns)).abs() < 1e-9);
        let all = county_distance_3gpp(c, &data.pops, &data.pops, &data.cdns).unwrap();
        assert!((all - e).abs() < 1e-9);
    }
}

#[test]
fn coverage_limits() {
    let data = small_instance(2, 40, 5);
    let inf = coverage_encor(&data.counties, &data.pops, &data.cdns, f64::INFINITY).unwrap();
    assert_eq!(inf, 1.0);
    let zero = coverage_encor(&data.counties, &data.pops, &data.cdns, 0.0).unwrap();
    assert_eq!(zero, 0.0);
    let mut last = 0.0;
    for b in (0..30).map(|i| i as f64 * 100.0) {
        let cov = coverage_encor(&data.counties, &data.pops, &data.cdns, b).unwrap();
        assert!(cov >= last);
        last = cov;
    }
}

#[test]
fn greedy_on_six_pops_twelve_counties() {
    let data = small_instance(6, 12, 6);
    let budget = 600.0;
    let m = CoverageMatrix::build(&data.counties, &data.pops, &data.cdns, budget).unwrap();
    let opt = brute_best(&m, 6, 3);
    let dep = greedy_place(&data.counties, &data.pops, &data.cdns, 3, budget).unwrap();
    assert_eq!(m.covered_population(&dep.cores), dep.covered_population);
    assert!(dep.covered_population as f64 >= (1.0 - (-1.0f64).exp()) * opt as f64);
    assert_eq!(dep.covered_population, opt);
}

#[test]
fn greedy_against_brute_force_on_random_instances() {
    let mut exact = 0;
    for seed in 0..50u64 {
        let pops = 4 + (seed % 5) as usize;
        let n = 1 + (seed % 4) as usize;
        let data = small_instance(1000 + seed, 30, pops);
        let budget = 400.0 + (seed % 7) as f64 * 150.0;
        let m = CoverageMatrix::build(&data.counties, &data.pops, &data.cdns, budget).unwrap();
        let opt = brute_best(&m, pops, n);
        let dep = greedy_place(&data.counties, &data.pops, &data.cdns, n, budget).unwrap();
        assert!(dep.cores.len() <= n);
        assert!(dep.covered_population <= opt);
        assert!(dep.covered_population as f64 >= (1.0 - (-1.0f64).exp()) * opt as f64 - 1e-9);
        if dep.covered_population == opt {
            exact += 1;
        }
    }
    // Exact agreement is an empirical rate, not a guarantee.
    assert!(exact >= 40, "greedy optimal on {exact}/50");
}

#[test]
fn greedy_sequence_has_diminishing_returns_and_ties_by_id() {
    let data = small_instance(8, 300, 20);
    let dep = greedy_place(&data.counties, &data.pops, &data.cdns, 10, 900.0).unwrap();
    for w in dep.steps.windows(2) {
        assert!(w[1].marginal_population <= w[0].marginal_population);
    }
    for (i, s) in dep.steps.iter().enumerate() {
        assert_eq!(s.rank, i + 1);
        assert!(s.marginal_population > 0);
    }
    // Two identical sites: the smaller id wins.
    let c = [county(1, 40.0, -100.0, 5)];
    let pops = [site("b", 40.0, -100.0), site("a", 40.0, -100.0)];
    let cdns = [site("x", 40.0, -100.0)];
    let dep = greedy_place(&c, &pops, &cdns, 1, 10.0).unwrap();
    assert_eq!(dep.steps[0].pop_id, "a");
    assert!(greedy_place(&c, &pops, &cdns, 0, 10.0).is_err());
}

#[test]
fn all_pops_matches_encor_coverage() {
    let data = small_instance(12, 200, 9);
    for budget in [300.0, 800.0, 1500.0] {
        let dep = greedy_place(&data.counties, &data.pops, &data.cdns, 9, budget).unwrap();
        let greedy = dep.covered_population as f64 / data.total_population() as f64;
        let full = coverage_3gpp(&data.counties, &data.pops, &data.pops, &data.cdns, budget).unwrap();
        let enc = coverage_encor(&data.counties, &data.pops, &data.cdns, budget).unwrap();
        assert_eq!(full, enc);
        assert!((greedy - enc).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encor_distance_dominates(seed in 0u64..10_000, n_cores in 1usize..5) {
        let data = small_instance(seed, 20, 6);
        let cores = &data.pops[..n_cores];
        for c in &data.counties {
            let e = county_distance_encor(c, &data.pops, &data.cdns).unwrap();
            let g = county_distance_3gpp(c, cores, &data.pops, &data.cdns).unwrap();
            prop_assert!(e <= g + 1e-9);
        }
    }

    #[test]
    fn larger_core_budget_never_reduces_coverage(seed in 0u64..10_000) {
        let data = small_instance(seed, 40, 8);
        let mut last = 0;
        for n in 1..=8 {
            let dep = greedy_place(&data.counties, &data.pops, &data.cdns, n, 700.0).unwrap();
            prop_assert!(dep.covered_population >= last);
            last = dep.covered_population;
        }
    }
}
