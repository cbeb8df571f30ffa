//! Euclidean TSP instances, tours and reference solvers.

mod solvers;
mod tour;

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeedTree;

pub use solvers::{held_karp, nearest_neighbor, two_opt, HELD_KARP_MAX_N};
pub use tour::{tour_length, Tour};

/// Cluster generator: number of centres and Gaussian spread.
pub const CLUSTER_CENTERS: usize = 4;
pub const CLUSTER_SIGMA: f64 = 0.05;
/// Ring generator: annulus radii around the box centre and angular jitter
/// (as a fraction of a full turn).
pub const RING_RADII: (f64, f64) = (0.3, 0.45);
pub const RING_JITTER: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    #[default]
    Uniform,
    Clusters,
    Ring,
}

impl Distribution {
    pub const ALL: [Distribution; 3] = [Distribution::Uniform, Distribution::Clusters, Distribution::Ring];

    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Clusters => "clusters",
            Distribution::Ring => "ring",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Distribution::Uniform => 0,
            Distribution::Clusters => 1,
            Distribution::Ring => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Distribution::ALL.into_iter().find(|d| d.code() == code)
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distribution::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown distribution `{s}`")))
    }
}

/// A set of planar points in the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TspInstance {
    pub n: usize,
    pub distribution: Distribution,
    pub seed: u64,
    pub coords: Vec<[f64; 2]>,
}

impl TspInstance {
    /// Instance from explicit coordinates, validated against the invariants.
    pub fn from_coords(coords: Vec<[f64; 2]>, distribution: Distribution, seed: u64) -> Result<Self> {
        let inst = TspInstance { n: coords.len(), distribution, seed, coords };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Parameter(format!("instances need n >= 3, got {}", self.n)));
        }
        if self.n != self.coords.len() {
            return Err(Error::Format(format!(
                "n = {} but {} coordinates",
                self.n,
                self.coords.len()
            )));
        }
        for (i, &[x, y]) in self.coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Format(format!("node {i} at ({x}, {y}) is outside the unit square")));
            }
        }
        Ok(())
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let [x1, y1] = self.coords[i];
        let [x2, y2] = self.coords[j];
        ((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt()
    }

    /// Full distance matrix, row-major.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let n = self.n;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = self.dist(i, j);
            }
        }
        d
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let inst: TspInstance = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        inst.validate()?;
        Ok(inst)
    }
}

/// Deterministic instance for `(distribution, n, seed)`.
pub fn generate(distribution: Distribution, n: usize, seed: u64) -> Result<TspInstance> {
    if n < 3 {
        return Err(Error::Parameter(format!("instances need n >= 3, got {n}")));
    }
    let mut rng = SeedTree::new(seed).named(distribution.as_str()).rng();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let coords = match distribution {
        Distribution::Uniform => (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect(),
        Distribution::Clusters => {
            let centers: Vec<[f64; 2]> = (0..CLUSTER_CENTERS)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
                .collect();
            let noise = Normal::new(0.0, CLUSTER_SIGMA).expect("valid sigma");
            (0..n)
                .map(|_| {
                    let c = centers[rng.random_range(0..CLUSTER_CENTERS)];
                    [clamp(c[0] + noise.sample(&mut rng)), clamp(c[1] + noise.sample(&mut rng))]
                })
                .collect()
        }
        Distribution::Ring => {
            let jitter = Normal::new(0.0, RING_JITTER * TAU).expect("valid sigma");
            let offset = rng.random::<f64>() * TAU;
            (0..n)
                .map(|i| {
                    let theta = offset + TAU * i as f64 / n as f64 + jitter.sample(&mut rng);
                    let r = rng.random_range(RING_RADII.0..=RING_RADII.1);
                    [clamp(0.5 + r * theta.cos()), clamp(0.5 + r * theta.sin())]
                })
                .collect()
        }
    };
    Ok(TspInstance { n, distribution, seed, coords })
}

/// `count` instances whose seeds are derived from `base_seed`.
pub fn generate_batch(distribution: Distribution, n: usize, base_seed: u64, count: usize) -> Result<Vec<TspInstance>> {
    let root = SeedTree::new(base_seed);
    (0..count)
        .map(|i| generate(distribution, n, root.child(i as u64).seed()))
        .collect()
}
