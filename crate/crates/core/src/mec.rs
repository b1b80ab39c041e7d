//! Grid-mobility Monte Carlo for control-message cost versus the number of
//! user-plane anchors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MecError {
    #[error("{k} anchors cannot tile a {width}x{height} grid with equal square blocks")]
    InvalidTiling { width: u32, height: u32, k: u32 },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNetwork {
    pub width: u32,
    pub height: u32,
    pub ues: u32,
    /// Handovers per UE per minute.
    pub rate_per_min: f64,
}

impl Default for GridNetwork {
    fn default() -> Self {
        Self {
            width: 20,
            height: 20,
            ues: 8_000,
            rate_per_min: 5.0,
        }
    }
}

impl GridNetwork {
    pub fn stations(&self) -> u32 {
        self.width * self.height
    }

    /// Side of the square block each of `k` anchors serves.
    pub fn block_side(&self, k: u32) -> Result<u32, MecError> {
        let err = MecError::InvalidTiling {
            width: self.width,
            height: self.height,
            k,
        };
        if k == 0 || !self.stations().is_multiple_of(k) {
            return Err(err);
        }
        let area = self.stations() / k;
        let side = (area as f64).sqrt().round() as u32;
        if side * side != area || !self.width.is_multiple_of(side) || !self.height.is_multiple_of(side) {
            return Err(err);
        }
        Ok(side)
    }

    /// Every anchor count that tiles the grid, ascending.
    pub fn valid_anchor_counts(&self) -> Vec<u32> {
        (1..=self.stations())
            .filter(|&k| self.block_side(k).is_ok())
            .collect()
    }

    pub fn anchor_of(&self, side: u32, x: u32, y: u32) -> u32 {
        (y / side) * (self.width / side) + x / side
    }

    /// In-grid 4-neighbours of a station.
    pub fn neighbors(&self, x: u32, y: u32) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(4);
        if x > 0 {
            out.push((x - 1, y));
        }
        if x + 1 < self.width {
            out.push((x + 1, y));
        }
        if y > 0 {
            out.push((x, y - 1));
        }
        if y + 1 < self.height {
            out.push((x, y + 1));
        }
        out
    }
}

/// Per-handover message costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageCosts {
    pub intra: u64,
    pub inter: u64,
}

impl Default for MessageCosts {
    fn default() -> Self {
        Self { intra: 15, inter: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: u32,
    pub handovers: u64,
    pub inter: u64,
    pub messages: u64,
}

impl SweepPoint {
    pub fn inter_fraction(&self) -> f64 {
        if self.handovers == 0 {
            0.0
        } else {
            self.inter as f64 / self.handovers as f64
        }
    }
}

/// Runs every UE's random walk for `minutes` and tallies handovers that
/// cross between the `k` anchor blocks. The same seed gives the same walks
/// for every `k`.
pub fn simulate_density(
    grid: &GridNetwork,
    k: u32,
    minutes: f64,
    seed: u64,
    costs: MessageCosts,
) -> Result<SweepPoint, MecError> {
    let side = grid.block_side(k)?;
    let mean = grid.rate_per_min * minutes;
    if !(mean >= 0.0 && mean.is_finite()) {
        return Err(MecError::Invalid(format!("expected handovers per UE {mean}")));
    }
    let per_ue = (mean > 0.0).then(|| Poisson::new(mean).expect("positive finite mean"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut handovers = 0u64;
    let mut inter = 0u64;
    for _ in 0..grid.ues {
        let mut x = rng.random_range(0..grid.width);
        let mut y = rng.random_range(0..grid.height);
        let n = per_ue.as_ref().map_or(0, |d| d.sample(&mut rng) as u64);
        for _ in 0..n {
            let options = grid.neighbors(x, y);
            if options.is_empty() {
                break;
            }
            let (nx, ny) = options[rng.random_range(0..options.len())];
            handovers += 1;
            if grid.anchor_of(side, x, y) != grid.anchor_of(side, nx, ny) {
                inter += 1;
            }
            x = nx;
            y = ny;
        }
    }
    Ok(SweepPoint {
        k,
        handovers,
        inter,
        messages: (handovers - inter) * costs.intra + inter * costs.inter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: u32,
    pub anchors_per_station: f64,
    pub handovers: u64,
    pub inter: u64,
    pub messages: u64,
    pub ratio_vs_k1: f64,
}

/// Simulates each density and normalises message totals to a single anchor.
pub fn sweep(
    grid: &GridNetwork,
    densities: &[u32],
    minutes: f64,
    seed: u64,
    costs: MessageCosts,
) -> Result<Vec<SweepRow>, MecError> {
    let base = simulate_density(grid, 1, minutes, seed, costs)?;
    densities
        .iter()
        .map(|&k| {
            let p = if k == 1 {
                base
            } else {
                simulate_density(grid, k, minutes, seed, costs)?
            };
            let ratio = if base.messages == 0 {
                1.0
            } else {
                p.messages as f64 / base.messages as f64
            };
            Ok(SweepRow {
                k,
                anchors_per_station: k as f64 / grid.stations() as f64,
                handovers: p.handovers,
                inter: p.inter,
                messages: p.messages,
                ratio_vs_k1: ratio,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tilings_of_a_square_grid() {
        let g = GridNetwork::default();
        assert_eq!(g.valid_anchor_counts(), vec![1, 4, 16, 25, 100, 400]);
        assert!(matches!(g.block_side(8), Err(MecError::InvalidTiling { .. })));
        assert!(g.block_side(0).is_err());
    }

    #[test]
    fn rectangular_grid_tiles_with_square_blocks() {
        let g = GridNetwork {
            width: 40,
            height: 20,
            ..GridNetwork::default()
        };
        assert_eq!(g.block_side(2), Ok(20));
        assert_eq!(g.block_side(8), Ok(10));
        assert!(g.block_side(4).is_err());
    }

    #[test]
    fn every_station_maps_to_one_anchor() {
        let g = GridNetwork::default();
        for k in g.valid_anchor_counts() {
            let side = g.block_side(k).unwrap();
            let mut counts = vec![0u32; k as usize];
            for y in 0..g.height {
                for x in 0..g.width {
                    counts[g.anchor_of(side, x, y) as usize] += 1;
                }
            }
            assert!(counts.iter().all(|&c| c == side * side));
        }
    }
}
