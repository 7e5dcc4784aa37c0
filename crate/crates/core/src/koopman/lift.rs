use nalgebra::DVector;

use super::{EigenvalueSet, GTable, N_OUTPUTS};
use crate::dataset::Dataset;
use crate::error::{dim, invalid, Result};
use crate::vehicle::VehicleState;

/// Distance below which a query counts as hitting a stored sample.
pub const EXACT_HIT: f64 = 1e-12;
pub const DEFAULT_NEIGHBORS: usize = 8;

/// Every identification sample paired with its lifted vector.
///
/// Samples of one trajectory are stored consecutively; `offsets[j]` is the
/// index of trajectory `j`'s first sample and `offsets[N_T]` the total.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftTable {
    pub points: Vec<[f64; 3]>,
    /// Row-major `points.len() × dim` lifted vectors.
    pub vectors: Vec<f64>,
    pub dim: usize,
    pub offsets: Vec<usize>,
}

impl LiftTable {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn vector(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn n_trajectories(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    /// Largest `|z_{k+1} - Λ z_k|` over all stored consecutive pairs.
    pub fn linear_evolution_defect(&self, lambdas: &EigenvalueSet) -> f64 {
        let lams = lambdas.as_slice();
        let n = lams.len();
        let mut worst = 0.0_f64;
        for w in self.offsets.windows(2) {
            for idx in w[0]..w[1].saturating_sub(1) {
                let (z, z_next) = (self.vector(idx), self.vector(idx + 1));
                for r in 0..self.dim {
                    worst = worst.max((z_next[r] - lams[r % n] * z[r]).abs());
                }
            }
        }
        worst
    }
}

/// Lifts every sample `x_k^j` to `λ^k g(x_0^j)`, computed by repeated
/// multiplication so that consecutive samples differ by exactly `Λ`.
pub fn build_lift_table(d: &Dataset, lambdas: &EigenvalueSet, g: &GTable) -> Result<LiftTable> {
    if g.n_trajectories() != d.len() {
        return Err(dim(format!("g table has {} trajectories, dataset has {}", g.n_trajectories(), d.len())));
    }
    if g.n_lambda != lambdas.len() {
        return Err(dim(format!("g table has {} eigenvalues, set has {}", g.n_lambda, lambdas.len())));
    }
    let lams = lambdas.as_slice();
    let n = lams.len();
    let z_dim = N_OUTPUTS * n;
    let total = d.sample_count();
    let mut points = Vec::with_capacity(total);
    let mut vectors = Vec::with_capacity(total * z_dim);
    let mut offsets = Vec::with_capacity(d.len() + 1);
    for (j, t) in d.trajectories.iter().enumerate() {
        offsets.push(points.len());
        let mut z: Vec<f64> = g.values.column(j).iter().copied().collect();
        for (k, s) in t.states.iter().enumerate() {
            if k > 0 {
                for (r, v) in z.iter_mut().enumerate() {
                    *v *= lams[r % n];
                }
            }
            points.push(s.as_array());
            vectors.extend_from_slice(&z);
        }
    }
    offsets.push(points.len());
    Ok(LiftTable { points, vectors, dim: z_dim, offsets })
}

/// Lifts an arbitrary state by inverse-distance weighting (power 2) of the
/// `k` nearest stored samples. A query within [`EXACT_HIT`] of a sample
/// returns that sample's vector.
pub fn lift(x: &VehicleState, table: &LiftTable, k: usize) -> Result<DVector<f64>> {
    if table.is_empty() {
        return Err(invalid("lift table is empty"));
    }
    if k == 0 {
        return Err(invalid("need at least one neighbor"));
    }
    let q = x.as_array();
    let mut dist: Vec<(f64, usize)> = table
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
        .collect();
    let k = k.min(dist.len());
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, by_distance);
    }
    let nearest = &mut dist[..k];
    nearest.sort_unstable_by(by_distance);

    if nearest[0].0.sqrt() < EXACT_HIT {
        return Ok(DVector::from_column_slice(table.vector(nearest[0].1)));
    }
    let mut z = DVector::zeros(table.dim);
    let mut total = 0.0;
    for (d2, idx) in nearest.iter() {
        let w = 1.0 / d2;
        total += w;
        z += DVector::from_column_slice(table.vector(*idx)) * w;
    }
    Ok(z / total)
}
