//! Observable dictionaries: the plant state coordinates followed by Gaussian
//! radial basis functions whose centers come from k-means clustering.
//!
//! The lifted state is ordered `[phi; phi_dot; theta; theta_dot; rbf_1..rbf_M]`
//! so the actuator block leads and the state can be read back from the first
//! [`STATE_DIM`] entries.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arm::{PlantState, StateVector, STATE_DIM};
use crate::error::{Error, Result};

/// Lifted state `z`.
pub type LiftedState = DVector<f64>;

/// State coordinates seen by the RBFs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbfCoordinates {
    /// Every plant state coordinate.
    Full,
    /// Every coordinate except the rotor velocities.
    ExcludeRotorVelocity,
}

impl RbfCoordinates {
    fn mask(self) -> [bool; STATE_DIM] {
        match self {
            RbfCoordinates::Full => [true; STATE_DIM],
            RbfCoordinates::ExcludeRotorVelocity => [true, true, false, false, true, true, true, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    pub num_rbf: usize,
    pub seed: u64,
    pub kmeans_max_iter: usize,
    /// Upper bound on the number of (evenly strided) samples clustered.
    pub kmeans_max_samples: usize,
    /// Width of each RBF is the median distance to this many nearest centers.
    pub width_neighbors: usize,
    pub coordinates: RbfCoordinates,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig {
            num_rbf: 200,
            seed: 7,
            kmeans_max_iter: 100,
            kmeans_max_samples: 20_000,
            width_neighbors: 8,
            coordinates: RbfCoordinates::ExcludeRotorVelocity,
        }
    }
}

impl DictionaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kmeans_max_iter == 0 {
            return Err(Error::invalid("dictionary.kmeans_max_iter", "must be >= 1"));
        }
        if self.num_rbf > 0 && self.kmeans_max_samples < self.num_rbf {
            return Err(Error::invalid("dictionary.kmeans_max_samples", "must be >= num_rbf"));
        }
        if self.width_neighbors == 0 {
            return Err(Error::invalid("dictionary.width_neighbors", "must be >= 1"));
        }
        Ok(())
    }
}

/// A fixed set of observables.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    /// Per-coordinate offset subtracted before the RBF metric is applied.
    pub offset: [f64; STATE_DIM],
    /// Per-coordinate metric weight (`1 / std`, or 0 for ignored coordinates).
    pub weight: [f64; STATE_DIM],
    /// RBF centers in plant-state units.
    pub centers: Vec<StateVector>,
    /// RBF widths in normalised units.
    pub widths: Vec<f64>,
    pub seed: u64,
}

impl Dictionary {
    pub fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub fn num_rbf(&self) -> usize {
        self.centers.len()
    }

    /// Lifted dimension `d = state_dim + M`.
    pub fn dim(&self) -> usize {
        STATE_DIM + self.centers.len()
    }

    /// Dictionary with no RBFs; lifting is the identity on the state.
    pub fn identity() -> Self {
        Dictionary {
            offset: [0.0; STATE_DIM],
            weight: [1.0; STATE_DIM],
            centers: Vec::new(),
            widths: Vec::new(),
            seed: 0,
        }
    }

    /// Clusters the (normalised) training states and derives RBF widths.
    pub fn fit(samples: &[StateVector], cfg: &DictionaryConfig) -> Result<Self> {
        if samples.len() < cfg.num_rbf {
            return Err(Error::InsufficientData {
                needed: cfg.num_rbf,
                got: samples.len(),
            });
        }
        let n = samples.len() as f64;
        let mask = cfg.coordinates.mask();
        let mut offset = [0.0; STATE_DIM];
        let mut weight = [0.0; STATE_DIM];
        for j in 0..STATE_DIM {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n;
            offset[j] = mean;
            let sd = var.sqrt();
            weight[j] = if mask[j] && sd > 0.0 { 1.0 / sd } else { 0.0 };
        }
        let mut dict = Dictionary {
            offset,
            weight,
            centers: Vec::new(),
            widths: Vec::new(),
            seed: cfg.seed,
        };
        if cfg.num_rbf == 0 {
            return Ok(dict);
        }

        let stride = samples.len().div_ceil(cfg.kmeans_max_samples.max(cfg.num_rbf)).max(1);
        let normalised: Vec<Vec<f64>> = samples
            .iter()
            .step_by(stride)
            .map(|s| dict.normalise(s))
            .collect();
        let km = kmeans(&normalised, cfg.num_rbf, cfg.seed, cfg.kmeans_max_iter)?;

        dict.centers = km.centers.iter().map(|c| dict.denormalise(c)).collect();
        dict.widths = median_neighbor_distances(&km.centers, cfg.width_neighbors);
        Ok(dict)
    }

    fn normalise(&self, x: &StateVector) -> Vec<f64> {
        (0..STATE_DIM).map(|j| (x[j] - self.offset[j]) * self.weight[j]).collect()
    }

    fn denormalise(&self, c: &[f64]) -> StateVector {
        StateVector::from_fn(|j, _| {
            if self.weight[j] > 0.0 {
                self.offset[j] + c[j] / self.weight[j]
            } else {
                self.offset[j]
            }
        })
    }

    /// Squared distance under the dictionary metric.
    fn metric_sq(&self, x: &StateVector, c: &StateVector) -> f64 {
        (0..STATE_DIM)
            .map(|j| ((x[j] - c[j]) * self.weight[j]).powi(2))
            .sum()
    }

    pub fn lift(&self, x: &PlantState) -> LiftedState {
        self.lift_vector(&x.to_vector())
    }

    pub fn lift_vector(&self, x: &StateVector) -> LiftedState {
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, STATE_DIM).copy_from(x);
        for (i, (c, w)) in self.centers.iter().zip(&self.widths).enumerate() {
            z[STATE_DIM + i] = gaussian(self.metric_sq(x, c), *w);
        }
        z
    }

    pub fn unlift(&self, z: &LiftedState) -> Result<PlantState> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "lifted state",
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(unlift(z))
    }

    /// SHA-256 over the exact bit patterns of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.offset.iter().chain(&self.weight) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((self.centers.len() as u64).to_le_bytes());
        for c in &self.centers {
            for v in c.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for w in &self.widths {
            h.update(w.to_bits().to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.len() != self.widths.len() {
            return Err(Error::InvalidModel(format!(
                "{} centers but {} widths",
                self.centers.len(),
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidModel("RBF widths must be > 0".into()));
        }
        if self.centers.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidModel("RBF centers must be finite".into()));
        }
        Ok(())
    }
}

/// Reads the plant state from the leading coordinates of a lifted state.
///
/// Panics if `z` is shorter than the plant state; use [`Dictionary::unlift`]
/// for a checked version.
pub fn unlift(z: &LiftedState) -> PlantState {
    PlantState::from_vector(&z.fixed_rows::<STATE_DIM>(0).into_owned())
}

#[inline]
fn gaussian(dist_sq: f64, width: f64) -> f64 {
    (-dist_sq / (2.0 * width * width)).exp()
}

/// Gaussian RBF `exp(-|x - c|^2 / (2 width^2))`.
pub fn rbf_value(x: &[f64], center: &[f64], width: f64) -> f64 {
    gaussian(sq_dist(x, center), width)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_neighbor_distances(centers: &[Vec<f64>], k: usize) -> Vec<f64> {
    let m = centers.len();
    (0..m)
        .map(|i| {
            let mut d: Vec<f64> = (0..m)
                .filter(|&j| j != i)
                .map(|j| sq_dist(&centers[i], &centers[j]).sqrt())
                .collect();
            if d.is_empty() {
                return 1.0;
            }
            d.sort_by(f64::total_cmp);
            d.truncate(k.max(1));
            let mid = d.len() / 2;
            let med = if d.len() % 2 == 1 {
                d[mid]
            } else {
                0.5 * (d[mid - 1] + d[mid])
            };
            if med > 0.0 {
                med
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment pass.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

/// Lloyd's algorithm from a seeded k-means++ initialisation.
///
/// Iterates until the assignment stops changing or `max_iter` passes.
pub fn kmeans(samples: &[Vec<f64>], m: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if samples.len() < m || m == 0 {
        return Err(Error::InsufficientData {
            needed: m.max(1),
            got: samples.len(),
        });
    }
    let dim = samples[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut chosen = vec![false; samples.len()];
    let first = rng.gen_range(0..samples.len());
    chosen[first] = true;
    centers.push(samples[first].clone());
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &v) in d2.iter().enumerate() {
                if v <= 0.0 {
                    continue;
                }
                if target < v {
                    pick = Some(i);
                    break;
                }
                target -= v;
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&v| v > 0.0).unwrap())
        } else {
            chosen.iter().position(|c| !c).unwrap()
        };
        chosen[idx] = true;
        centers.push(samples[idx].clone());
        let c = centers.last().unwrap();
        for (s, d) in samples.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(s, c));
        }
    }

    let mut assignments = vec![usize::MAX; samples.len()];
    let mut inertia = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (s, a) in samples.iter().zip(assignments.iter_mut()) {
            let (best, dist) = nearest(s, &centers);
            total += dist;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            converged = true;
            break;
        }

        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (s, &a) in samples.iter().zip(&assignments) {
            counts[a] += 1;
            for (acc, v) in sums[a].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for j in 0..m {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                centers[j] = sums[j].iter().map(|v| v * inv).collect();
            }
        }
        // An emptied cluster is moved onto the sample worst served by its center.
        for j in 0..m {
            if counts[j] == 0 {
                let worst = samples
                    .iter()
                    .map(|s| nearest(s, &centers).1)
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                centers[j] = samples[worst].clone();
            }
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        inertia,
        converged,
    })
}

/// Convenience wrapper returning only the centers.
pub fn kmeans_centers(samples: &[Vec<f64>], m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(kmeans(samples, m, seed, 100)?.centers)
}

fn nearest(s: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(s, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}
