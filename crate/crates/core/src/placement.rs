//! Core-site placement: great-circle distances, population coverage under a
//! latency budget, greedy site selection, deployment cost, and a seeded
//! synthetic dataset generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("no {0} sites given")]
    EmptySites(&'static str),
    #[error("coordinates ({lat}, {lon}) out of range")]
    BadCoordinates { lat: f64, lon: f64 },
    #[error("core budget must be at least 1")]
    ZeroBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct County {
    pub fips: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub population: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePoint {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

pub fn check_coordinates(lat: f64, lon: f64) -> Result<(), PlacementError> {
    if lat.abs() <= 90.0 && lon.abs() <= 180.0 {
        Ok(())
    } else {
        Err(PlacementError::BadCoordinates { lat, lon })
    }
}

/// Great-circle distance in km.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

fn pos_c(c: &County) -> (f64, f64) {
    (c.lat, c.lon)
}

fn pos_s(s: &SitePoint) -> (f64, f64) {
    (s.lat, s.lon)
}

/// Shortest PoP-to-CDN leg starting from each PoP.
fn egress_legs(pops: &[SitePoint], cdns: &[SitePoint]) -> Vec<f64> {
    pops.iter()
        .map(|p| {
            cdns.iter()
                .map(|c| haversine(pos_s(p), pos_s(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Best remaining path from each core site: core -> PoP -> CDN.
fn core_tails(cores: &[SitePoint], pops: &[SitePoint], egress: &[f64]) -> Vec<f64> {
    cores
        .iter()
        .map(|core| {
            pops.iter()
                .zip(egress)
                .map(|(p, e)| haversine(pos_s(core), pos_s(p)) + e)
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn nonempty(sites: &[SitePoint], what: &'static str) -> Result<(), PlacementError> {
    if sites.is_empty() {
        Err(PlacementError::EmptySites(what))
    } else {
        Ok(())
    }
}

/// County -> core -> PoP -> CDN, minimised over all choices.
pub fn county_distance_3gpp(
    county: &County,
    cores: &[SitePoint],
    pops: &[SitePoint],
    cdns: &[SitePoint],
) -> Result<f64, PlacementError> {
    nonempty(cores, "core")?;
    nonempty(pops, "PoP")?;
    nonempty(cdns, "CDN")?;
    let egress = egress_legs(pops, cdns);
    let tails = core_tails(cores, pops, &egress);
    Ok(cores
        .iter()
        .zip(&tails)
        .map(|(c, t)| haversine(pos_c(county), pos_s(c)) + t)
        .fold(f64::INFINITY, f64::min))
}

/// County -> PoP -> CDN; user traffic leaves at the nearest useful PoP.
pub fn county_distance_encor(
    county: &County,
    pops: &[SitePoint],
    cdns: &[SitePoint],
) -> Result<f64, PlacementError> {
    nonempty(pops, "PoP")?;
    nonempty(cdns, "CDN")?;
    let egress = egress_legs(pops, cdns);
    Ok(pops
        .iter()
        .zip(&egress)
        .map(|(p, e)| haversine(pos_c(county), pos_s(p)) + e)
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of population whose distance is within `budget_km`.
pub fn coverage_fraction(counties: &[County], distances: &[f64], budget_km: f64) -> f64 {
    let total: u64 = counties.iter().map(|c| c.population).sum();
    if total == 0 {
        return 0.0;
    }
    let covered: u64 = counties
        .iter()
        .zip(distances)
        .filter(|(_, &d)| d <= budget_km)
        .map(|(c, _)| c.population)
        .sum();
    covered as f64 / total as f64
}

pub fn coverage_3gpp(
    counties: &[County],
    cores: &[SitePoint],
    pops: &[SitePoint],
    cdns: &[SitePoint],
    budget_km: f64,
) -> Result<f64, PlacementError> {
    let d = counties
        .iter()
        .map(|c| county_distance_3gpp(c, cores, pops, cdns))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(coverage_fraction(counties, &d, budget_km))
}

pub fn coverage_encor(
    counties: &[County],
    pops: &[SitePoint],
    cdns: &[SitePoint],
    budget_km: f64,
) -> Result<f64, PlacementError> {
    let d = counties
        .iter()
        .map(|c| county_distance_encor(c, pops, cdns))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(coverage_fraction(counties, &d, budget_km))
}

/// Which counties each PoP would cover if it hosted a core.
#[derive(Debug, Clone)]
pub struct CoverageMatrix {
    pub covers: Vec<Vec<bool>>,
    pub populations: Vec<u64>,
}

impl CoverageMatrix {
    pub fn build(
        counties: &[County],
        pops: &[SitePoint],
        cdns: &[SitePoint],
        budget_km: f64,
    ) -> Result<Self, PlacementError> {
        nonempty(pops, "PoP")?;
        nonempty(cdns, "CDN")?;
        let egress = egress_legs(pops, cdns);
        let tails = core_tails(pops, pops, &egress);
        let covers = pops
            .iter()
            .zip(&tails)
            .map(|(core, tail)| {
                counties
                    .iter()
                    .map(|c| haversine(pos_c(c), pos_s(core)) + tail <= budget_km)
                    .collect()
            })
            .collect();
        Ok(Self {
            covers,
            populations: counties.iter().map(|c| c.population).collect(),
        })
    }

    pub fn covered_population(&self, chosen: &[usize]) -> u64 {
        (0..self.populations.len())
            .filter(|&j| chosen.iter().any(|&i| self.covers[i][j]))
            .map(|j| self.populations[j])
            .sum()
    }

    pub fn total_population(&self) -> u64 {
        self.populations.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementStep {
    pub rank: usize,
    pub pop_id: String,
    pub marginal_population: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    /// Indices into the PoP list, in the order chosen.
    pub cores: Vec<usize>,
    pub steps: Vec<PlacementStep>,
    pub budget_km: f64,
    pub core_budget: usize,
    pub covered_population: u64,
}

impl Deployment {
    pub fn core_sites(&self, pops: &[SitePoint]) -> Vec<SitePoint> {
        self.cores.iter().map(|&i| pops[i].clone()).collect()
    }
}

/// Repeatedly adds the PoP with the largest newly covered population, ties
/// to the smaller PoP id, until `n` cores are placed or nothing is gained.
pub fn greedy_place(
    counties: &[County],
    pops: &[SitePoint],
    cdns: &[SitePoint],
    n: usize,
    budget_km: f64,
) -> Result<Deployment, PlacementError> {
    if n == 0 {
        return Err(PlacementError::ZeroBudget);
    }
    let m = CoverageMatrix::build(counties, pops, cdns, budget_km)?;
    let mut covered = vec![false; counties.len()];
    let mut cores = Vec::new();
    let mut steps = Vec::new();
    let mut total = 0;
    while cores.len() < n {
        let mut best: Option<(u64, usize)> = None;
        for i in 0..pops.len() {
            if cores.contains(&i) {
                continue;
            }
            let gain: u64 = (0..counties.len())
                .filter(|&j| !covered[j] && m.covers[i][j])
                .map(|j| m.populations[j])
                .sum();
            let better = match best {
                None => true,
                Some((g, b)) => gain > g || (gain == g && pops[i].id < pops[b].id),
            };
            if better {
                best = Some((gain, i));
            }
        }
        let Some((gain, i)) = best else { break };
        if gain == 0 {
            break;
        }
        for (j, c) in covered.iter_mut().enumerate() {
            *c |= m.covers[i][j];
        }
        total += gain;
        cores.push(i);
        steps.push(PlacementStep {
            rank: steps.len() + 1,
            pop_id: pops[i].id.clone(),
            marginal_population: gain,
        });
    }
    Ok(Deployment {
        cores,
        steps,
        budget_km,
        core_budget: n,
        covered_population: total,
    })
}

/// Site costs in whole dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub core_site: u64,
    pub border_router: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            core_site: 2_750_000,
            border_router: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostComparison {
    pub cost_3gpp: u64,
    pub cost_encor: u64,
    pub savings: f64,
}

/// Core sites versus edge border routers.
pub fn cost_compare(model: CostModel, n_cores: u64, n_pops: u64) -> CostComparison {
    let cost_3gpp = n_cores * model.core_site;
    let cost_encor = n_pops * model.border_router;
    let savings = if cost_3gpp == 0 {
        0.0
    } else {
        1.0 - cost_encor as f64 / cost_3gpp as f64
    };
    CostComparison {
        cost_3gpp,
        cost_encor,
        savings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub counties: usize,
    pub pops: usize,
    pub cdns: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub counties: Vec<County>,
    pub pops: Vec<SitePoint>,
    pub cdns: Vec<SitePoint>,
}

impl Dataset {
    pub fn total_population(&self) -> u64 {
        self.counties.iter().map(|c| c.population).sum()
    }
}

const LAT_RANGE: (f64, f64) = (25.0, 49.0);
const LON_RANGE: (f64, f64) = (-124.0, -67.0);

/// Contiguous-US-shaped dataset: counties gather around weighted metro
/// clusters, and PoPs and CDNs sit near the heaviest clusters.
pub fn gen_synthetic(spec: SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clusters = (spec.counties / 20).clamp(3, 60);
    let centers: Vec<(f64, f64, f64)> = (0..clusters)
        .map(|_| {
            let lat = rng.random_range(LAT_RANGE.0 + 2.0..LAT_RANGE.1 - 2.0);
            let lon = rng.random_range(LON_RANGE.0 + 2.0..LON_RANGE.1 - 2.0);
            // Heavy-tailed metro weights.
            let u: f64 = rng.random_range(0.05..1.0);
            (lat, lon, u.powf(-1.2))
        })
        .collect();
    let total_weight: f64 = centers.iter().map(|c| c.2).sum();
    let pick = |rng: &mut ChaCha8Rng| -> usize {
        let mut x = rng.random_range(0.0..total_weight);
        for (i, c) in centers.iter().enumerate() {
            if x < c.2 {
                return i;
            }
            x -= c.2;
        }
        centers.len() - 1
    };
    let spread = Normal::new(0.0, 1.5).expect("valid sigma");
    let jitter = Normal::new(0.0, 0.3).expect("valid sigma");
    let size = LogNormal::new(10.0, 1.2).expect("valid lognormal");
    let clamp = |lat: f64, lon: f64| {
        (
            lat.clamp(LAT_RANGE.0, LAT_RANGE.1),
            lon.clamp(LON_RANGE.0, LON_RANGE.1),
        )
    };
    let counties = (0..spec.counties)
        .map(|i| {
            let c = centers[pick(&mut rng)];
            let (lat, lon) = clamp(c.0 + spread.sample(&mut rng), c.1 + spread.sample(&mut rng));
            let weight = c.2 / total_weight * clusters as f64;
            let population = (size.sample(&mut rng) * weight.sqrt()).round() as u64;
            County {
                fips: format!("{:05}", i + 1),
                name: format!("County {}", i + 1),
                lat,
                lon,
                population,
            }
        })
        .collect();
    let sites = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<SitePoint> {
        (0..n)
            .map(|i| {
                let c = centers[pick(rng)];
                let (lat, lon) = clamp(c.0 + jitter.sample(rng), c.1 + jitter.sample(rng));
                SitePoint {
                    id: format!("{prefix}{:03}", i + 1),
                    lat,
                    lon,
                }
            })
            .collect()
    };
    let pops = sites(spec.pops, "pop", &mut rng);
    let cdns = sites(spec.cdns, "cdn", &mut rng);
    Dataset {
        counties,
        pops,
        cdns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_meridian() {
        let d = haversine((0.0, 0.0), (0.0, 90.0));
        let expected = 2.0 * std::f64::consts::PI * EARTH_RADIUS_KM / 4.0;
        assert!((d - expected).abs() / expected < 1e-3);
        assert!((d - 10_007.5).abs() / 10_007.5 < 1e-3);
    }

    #[test]
    fn haversine_identity_and_symmetry() {
        let a = (40.7, -74.0);
        let b = (34.05, -118.25);
        assert_eq!(haversine(a, a), 0.0);
        assert_eq!(haversine(a, b), haversine(b, a));
    }

    #[test]
    fn cost_figures() {
        let m = CostModel::default();
        assert_eq!(cost_compare(m, 10, 0).cost_3gpp, 27_500_000);
        assert_eq!(cost_compare(m, 0, 33).cost_encor, 6_600_000);
        let c = cost_compare(m, 10, 10);
        assert_eq!(c.cost_encor, 2_000_000);
        assert!((c.savings - 0.927_272_7).abs() < 1e-6);
    }

    #[test]
    fn generator_is_deterministic_and_in_bounds() {
        let spec = SyntheticSpec {
            seed: 3,
            counties: 200,
            pops: 10,
            cdns: 5,
        };
        let a = gen_synthetic(spec);
        assert_eq!(a, gen_synthetic(spec));
        assert_eq!(a.counties.len(), 200);
        for c in &a.counties {
            assert!(check_coordinates(c.lat, c.lon).is_ok());
            assert!((LAT_RANGE.0..=LAT_RANGE.1).contains(&c.lat));
        }
        assert_ne!(a, gen_synthetic(SyntheticSpec { seed: 4, ..spec }));
    }
}
