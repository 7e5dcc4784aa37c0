use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::EigenvalueSet;
use crate::dataset::Dataset;
use crate::error::{dim, invalid, Error, Result};
use crate::vehicle::VehicleState;

/// Number of outputs; the outputs are the plant states themselves.
pub const N_OUTPUTS: usize = 3;

/// `L[k][i] = λ_i^k` for `k = 0..len`.
pub fn power_matrix(lambdas: &[f64], len: usize) -> DMatrix<f64> {
    DMatrix::from_fn(len, lambdas.len(), |k, i| lambdas[i].powi(k as i32))
}

/// Ridge solution operator `(LᵀL + ζI)⁻¹Lᵀ`, evaluated through the SVD of `L`.
/// With `ζ = 0` this is the pseudo-inverse.
pub(crate) fn ridge_operator(l: &DMatrix<f64>, zeta: f64) -> DMatrix<f64> {
    let svd = l.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let s_max = svd.singular_values.max();
    let cutoff = l.nrows().max(l.ncols()) as f64 * f64::EPSILON * s_max;
    let filter = svd.singular_values.map(|s| {
        if zeta > 0.0 {
            s / (s * s + zeta)
        } else if s > cutoff {
            1.0 / s
        } else {
            0.0
        }
    });
    v_t.transpose() * DMatrix::from_diagonal(&filter) * u.transpose()
}

/// Eigenfunction values at trajectory starts.
///
/// Column `j` holds trajectory `j`'s coefficients ordered output-major, so
/// entry `p * N_Λ + i` is `g[p][i][j]`. A column is also the lifted start
/// state `z_0` of that trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GTable {
    pub values: DMatrix<f64>,
    pub n_lambda: usize,
}

impl GTable {
    pub fn get(&self, output: usize, eig: usize, traj: usize) -> f64 {
        self.values[(output * self.n_lambda + eig, traj)]
    }

    pub fn n_trajectories(&self) -> usize {
        self.values.ncols()
    }

    pub fn start_lift(&self, traj: usize) -> DVector<f64> {
        self.values.column(traj).into_owned()
    }
}

/// Fits `g` per trajectory and output by ridge least squares:
/// `min ‖L g_p − F_p‖² + ζ‖g_p‖²` where `F_p` is output `p` over the samples.
pub fn fit_g(d: &Dataset, lambdas: &EigenvalueSet, zeta: f64) -> Result<GTable> {
    if d.is_empty() {
        return Err(invalid("cannot fit eigenfunctions on an empty dataset"));
    }
    if !(zeta.is_finite() && zeta >= 0.0) {
        return Err(invalid(format!("regularizer must be finite and non-negative, got {zeta}")));
    }
    for (j, t) in d.trajectories.iter().enumerate() {
        if t.states.len() < 2 {
            return Err(invalid(format!("trajectory {j} has fewer than 2 samples")));
        }
        if !t.states.iter().all(VehicleState::is_finite) {
            return Err(Error::Numerical(format!("trajectory {j} contains non-finite samples")));
        }
    }
    let lams = lambdas.as_slice();
    let n_lambda = lams.len();

    let lengths: Vec<usize> = {
        let mut v: Vec<usize> = d.trajectories.iter().map(|t| t.states.len()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let operators: BTreeMap<usize, DMatrix<f64>> = lengths
        .par_iter()
        .map(|len| (*len, ridge_operator(&power_matrix(lams, *len), zeta)))
        .collect();

    let columns: Vec<DVector<f64>> = d
        .trajectories
        .par_iter()
        .map(|t| {
            let op = &operators[&t.states.len()];
            let f = DMatrix::from_fn(t.states.len(), N_OUTPUTS, |k, p| t.states[k].as_array()[p]);
            let g = op * f;
            DVector::from_fn(N_OUTPUTS * n_lambda, |r, _| g[(r % n_lambda, r / n_lambda)])
        })
        .collect();

    let values = DMatrix::from_columns(&columns);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigenfunction fit produced non-finite coefficients".into()));
    }
    Ok(GTable { values, n_lambda })
}

/// Result of the input-matrix fit with conditioning diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BFit {
    /// `(N_y N_Λ) × 4` input matrix.
    pub b: DMatrix<f64>,
    /// Numerical rank of the shared regressor.
    pub rank: usize,
    /// Number of regressor columns (`4 N_Λ`).
    pub columns: usize,
    /// Ratio of the largest to the smallest retained singular value.
    pub condition: f64,
    /// Multi-step objective at the fitted `B`.
    pub objective: f64,
    /// Multi-step objective at `B = 0`.
    pub objective_zero: f64,
}

/// Fits `B` over whole controlled trajectories.
///
/// With diagonal `A` and the block-of-ones `C`, output `p` of the prediction
/// only involves block `p` of `B`, and the regressor
/// `Φ[(j,k), (q,c)] = Σ_{i<k} λ_q^{k-i-1} u_i[c]` is the same for every
/// output. The three blocks are therefore solved together as one
/// minimum-norm least-squares problem with three right-hand sides.
pub fn fit_b<F>(d: &Dataset, lambdas: &EigenvalueSet, lift: F) -> Result<BFit>
where
    F: Fn(&VehicleState) -> DVector<f64> + Sync,
{
    if d.is_empty() {
        return Err(invalid("cannot fit B on an empty dataset"));
    }
    let lams = lambdas.as_slice();
    let n_lambda = lams.len();
    let n_z = N_OUTPUTS * n_lambda;
    let cols = 4 * n_lambda;
    let rows: usize = d.trajectories.iter().map(|t| t.steps()).sum();
    if rows == 0 {
        return Err(invalid("controlled dataset has no steps"));
    }

    let starts: Vec<DVector<f64>> = d.trajectories.par_iter().map(|t| lift(&t.x0())).collect();
    if let Some(z) = starts.iter().find(|z| z.len() != n_z) {
        return Err(dim(format!("lifted state has length {}, expected {n_z}", z.len())));
    }

    let mut phi = DMatrix::zeros(rows, cols);
    let mut target = DMatrix::zeros(rows, N_OUTPUTS);
    let mut row = 0;
    for (t, z0) in d.trajectories.iter().zip(&starts) {
        let mut acc = vec![0.0; cols];
        let mut free = z0.clone();
        for k in 1..=t.steps() {
            let u = t.inputs[k - 1].as_array();
            for q in 0..n_lambda {
                for c in 0..4 {
                    acc[q * 4 + c] = lams[q] * acc[q * 4 + c] + u[c];
                }
                for p in 0..N_OUTPUTS {
                    free[p * n_lambda + q] *= lams[q];
                }
            }
            for (col, v) in acc.iter().enumerate() {
                phi[(row, col)] = *v;
            }
            let x = t.states[k].as_array();
            for p in 0..N_OUTPUTS {
                let free_out: f64 = free.rows(p * n_lambda, n_lambda).sum();
                target[(row, p)] = x[p] - free_out;
            }
            row += 1;
        }
    }

    let svd = phi.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let cutoff = rows.max(cols) as f64 * f64::EPSILON * s_max;
    let kept: Vec<f64> = svd.singular_values.iter().copied().filter(|s| *s > cutoff).collect();
    let rank = kept.len();
    let condition = if rank > 0 { s_max / kept.iter().copied().fold(f64::INFINITY, f64::min) } else { f64::INFINITY };
    let theta = svd
        .solve(&target, cutoff)
        .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))?;

    let mut b = DMatrix::zeros(n_z, 4);
    for p in 0..N_OUTPUTS {
        for q in 0..n_lambda {
            for c in 0..4 {
                b[(p * n_lambda + q, c)] = theta[(q * 4 + c, p)];
            }
        }
    }
    let objective = (&phi * &theta - &target).norm_squared();
    let objective_zero = target.norm_squared();
    if !objective.is_finite() {
        return Err(Error::Numerical("input-matrix fit produced non-finite values".into()));
    }
    Ok(BFit { b, rank, columns: cols, condition, objective, objective_zero })
}
