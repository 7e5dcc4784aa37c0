//! Lifted linear predictor built from eigenfunctions sampled along trajectories.

mod eigen;
mod fit;
mod lift;
mod persist;

use nalgebra::{DMatrix, DVector};

pub use eigen::{
    default_eigenvalues, ridge_objective, select_eigenvalues, EigenvalueSet, GREEDY_CANDIDATES, TAU_MAX, TAU_MIN,
};
pub use fit::{fit_b, fit_g, power_matrix, BFit, GTable, N_OUTPUTS};
pub use lift::{build_lift_table, lift, LiftTable, DEFAULT_NEIGHBORS, EXACT_HIT};
pub use persist::{load_model, read_model, save_model, write_model};

use crate::config::KeyValues;
use crate::dataset::Dataset;
use crate::error::{dim, invalid, Error, Result};
use crate::vehicle::{ControlInput, VehicleState};

/// Diagonal `A` with the eigenvalues repeated per output block, and the
/// ones-block output matrix `C`.
pub fn assemble_ac(lambdas: &EigenvalueSet, n_y: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = lambdas.len();
    let diag = DVector::from_fn(n_y * n, |r, _| lambdas.as_slice()[r % n]);
    let a = DMatrix::from_diagonal(&diag);
    let c = DMatrix::from_fn(n_y, n_y * n, |p, col| if col / n == p { 1.0 } else { 0.0 });
    (a, c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub eigenvalues: EigenvalueSet,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub lift_table: LiftTable,
    pub ts: f64,
    pub k_neighbors: usize,
}

impl KoopmanModel {
    pub fn new(
        eigenvalues: EigenvalueSet,
        b: DMatrix<f64>,
        lift_table: LiftTable,
        ts: f64,
        k_neighbors: usize,
    ) -> Result<Self> {
        let n_z = N_OUTPUTS * eigenvalues.len();
        if b.nrows() != n_z || b.ncols() != 4 {
            return Err(dim(format!("B is {}x{}, expected {n_z}x4", b.nrows(), b.ncols())));
        }
        if lift_table.dim != n_z {
            return Err(dim(format!("lift table dimension {} does not match {n_z}", lift_table.dim)));
        }
        if !(ts.is_finite() && ts > 0.0) {
            return Err(invalid(format!("time step must be positive, got {ts}")));
        }
        if k_neighbors == 0 {
            return Err(invalid("need at least one neighbor"));
        }
        let (a, c) = assemble_ac(&eigenvalues, N_OUTPUTS);
        Ok(Self { eigenvalues, a, b, c, lift_table, ts, k_neighbors })
    }

    pub fn n_lambda(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lifted_dim(&self) -> usize {
        N_OUTPUTS * self.n_lambda()
    }

    pub fn lift(&self, x: &VehicleState) -> Result<DVector<f64>> {
        lift(x, &self.lift_table, self.k_neighbors)
    }

    pub fn output(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.c * z
    }

    /// One step `z⁺ = A z + B u`.
    pub fn advance(&self, z: &DVector<f64>, u: &ControlInput) -> DVector<f64> {
        let lams = self.eigenvalues.as_slice();
        let n = lams.len();
        let bu = &self.b * u.to_vector();
        DVector::from_fn(z.len(), |r, _| lams[r % n] * z[r] + bu[r])
    }
}

/// Iterates the lifted system from `z0` and returns the outputs `y_0..y_K`.
pub fn predict(m: &KoopmanModel, z0: &DVector<f64>, inputs: &[ControlInput]) -> Result<Vec<DVector<f64>>> {
    if z0.len() != m.lifted_dim() {
        return Err(dim(format!("z0 has length {}, expected {}", z0.len(), m.lifted_dim())));
    }
    let mut z = z0.clone();
    let mut ys = Vec::with_capacity(inputs.len() + 1);
    ys.push(m.output(&z));
    for u in inputs {
        z = m.advance(&z, u);
        ys.push(m.output(&z));
    }
    Ok(ys)
}

/// `100 ‖Y_pred − Y_true‖_F / ‖Y_true‖_F`.
pub fn rmse_percent(truth: &[VehicleState], predicted: &[DVector<f64>]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(dim(format!("{} true samples but {} predictions", truth.len(), predicted.len())));
    }
    let mut err = 0.0;
    let mut norm = 0.0;
    for (x, y) in truth.iter().zip(predicted) {
        if y.len() != N_OUTPUTS {
            return Err(dim(format!("prediction has {} outputs, expected {N_OUTPUTS}", y.len())));
        }
        for (p, v) in x.as_array().iter().enumerate() {
            err += (y[p] - v).powi(2);
            norm += v * v;
        }
    }
    if norm == 0.0 {
        return Err(invalid("true trajectory has zero norm"));
    }
    Ok(100.0 * (err / norm).sqrt())
}

/// Prediction error of every trajectory in `d`, lifting each start state and
/// replaying the recorded inputs open loop.
pub fn evaluate(m: &KoopmanModel, d: &Dataset) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    d.trajectories
        .par_iter()
        .map(|t| {
            let z0 = m.lift(&t.x0())?;
            let ys = predict(m, &z0, &t.inputs)?;
            rmse_percent(&t.states, &ys)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyConfig {
    pub n_lambda: usize,
    pub zeta: f64,
    pub greedy: bool,
    pub k_neighbors: usize,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self { n_lambda: 51, zeta: 1e-12, greedy: false, k_neighbors: DEFAULT_NEIGHBORS }
    }
}

impl IdentifyConfig {
    pub const KEYS: [&'static str; 4] = ["n_lambda", "zeta", "greedy_eigenvalues", "k_neighbors"];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            n_lambda: kv.usize_or("n_lambda", d.n_lambda)?,
            zeta: kv.f64_or("zeta", d.zeta)?,
            greedy: kv.parsed_or("greedy_eigenvalues", d.greedy)?,
            k_neighbors: kv.usize_or("k_neighbors", d.k_neighbors)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lambda < 2 {
            return Err(invalid(format!("n_lambda must be at least 2, got {}", self.n_lambda)));
        }
        if !(self.zeta.is_finite() && self.zeta >= 0.0) {
            return Err(invalid(format!("zeta must be finite and non-negative, got {}", self.zeta)));
        }
        if self.k_neighbors == 0 {
            return Err(invalid("k_neighbors must be positive"));
        }
        Ok(())
    }
}

/// Intermediate results of [`identify`] kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub model: KoopmanModel,
    pub g: GTable,
    pub b_fit: BFit,
    pub g_objective: f64,
}

/// Eigenvalues, g fit and lift table from `uncontrolled`, then `B` from `controlled`.
pub fn identify(uncontrolled: &Dataset, controlled: &Dataset, cfg: &IdentifyConfig) -> Result<Identification> {
    cfg.validate()?;
    if uncontrolled.ts != controlled.ts {
        return Err(invalid(format!(
            "datasets disagree on the time step: {} vs {}",
            uncontrolled.ts, controlled.ts
        )));
    }
    let ts = uncontrolled.ts;
    let lambdas = select_eigenvalues(cfg.n_lambda, ts, cfg.greedy.then_some(uncontrolled), cfg.zeta)?;
    let g = fit_g(uncontrolled, &lambdas, cfg.zeta)?;
    let g_objective = ridge_objective(uncontrolled, lambdas.as_slice(), cfg.zeta);
    let table = build_lift_table(uncontrolled, &lambdas, &g)?;
    let b_fit = fit_b(controlled, &lambdas, |x| {
        lift(x, &table, cfg.k_neighbors).expect("lift table is nonempty")
    })?;
    if b_fit.b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("B contains non-finite entries".into()));
    }
    let model = KoopmanModel::new(lambdas, b_fit.b.clone(), table, ts, cfg.k_neighbors)?;
    Ok(Identification { model, g, b_fit, g_objective })
}
