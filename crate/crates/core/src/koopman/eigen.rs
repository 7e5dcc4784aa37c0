use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{invalid, Result};

/// Real eigenvalues in `(0, 1]`, strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenvalueSet {
    lambdas: Vec<f64>,
}

impl EigenvalueSet {
    pub fn new(mut lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(invalid("eigenvalue set is empty"));
        }
        if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0 && **l <= 1.0)) {
            return Err(invalid(format!("eigenvalue {bad} outside (0, 1]")));
        }
        lambdas.sort_by(|a, b| b.total_cmp(a));
        if lambdas.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("eigenvalues must be pairwise distinct"));
        }
        Ok(Self { lambdas })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

pub const TAU_MIN: f64 = 0.02;
pub const TAU_MAX: f64 = 5.0;
pub const GREEDY_CANDIDATES: usize = 500;

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![(lo * hi).sqrt()],
        _ => (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect(),
    }
}

/// `1` plus `n - 1` decay factors `exp(-Ts/τ)` with `τ` log-spaced over
/// `[TAU_MIN, TAU_MAX]`. A single `τ` sits at the geometric midpoint.
pub fn default_eigenvalues(n: usize, ts: f64) -> Result<EigenvalueSet> {
    if n < 2 {
        return Err(invalid(format!("need at least 2 eigenvalues, got {n}")));
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(invalid(format!("time step must be positive, got {ts}")));
    }
    let mut lambdas = vec![1.0];
    lambdas.extend(log_spaced(TAU_MIN, TAU_MAX, n - 1).into_iter().map(|tau| (-ts / tau).exp()));
    EigenvalueSet::new(lambdas)
}

/// Chooses `n` eigenvalues. Without data this is [`default_eigenvalues`].
///
/// With data, candidates `exp(-Ts/τ)` on a 500-point log grid are added
/// greedily to the constant mode, each time picking the one that lowers the
/// ridge objective most. The default set is returned instead if the greedy
/// set ends up with a larger objective.
pub fn select_eigenvalues(n: usize, ts: f64, dataset: Option<&Dataset>, zeta: f64) -> Result<EigenvalueSet> {
    let default = default_eigenvalues(n, ts)?;
    let Some(d) = dataset else {
        return Ok(default);
    };
    let groups = group_outputs(d);
    let candidates: Vec<f64> = log_spaced(TAU_MIN, TAU_MAX, GREEDY_CANDIDATES)
        .into_iter()
        .map(|tau| (-ts / tau).exp())
        .collect();

    let mut chosen = vec![1.0];
    while chosen.len() < n {
        let best = candidates
            .par_iter()
            .filter(|c| !chosen.contains(c))
            .map(|c| {
                let mut trial = chosen.clone();
                trial.push(*c);
                (ridge_objective_grouped(&groups, &trial, zeta), *c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        match best {
            Some((_, c)) => chosen.push(c),
            None => break,
        }
    }
    let greedy = EigenvalueSet::new(chosen)?;
    let greedy_obj = ridge_objective_grouped(&groups, greedy.as_slice(), zeta);
    let default_obj = ridge_objective_grouped(&groups, default.as_slice(), zeta);
    Ok(if greedy_obj <= default_obj { greedy } else { default })
}

/// Output samples grouped by trajectory length: each matrix is `len × (3 N_T)`.
pub(crate) fn group_outputs(d: &Dataset) -> BTreeMap<usize, DMatrix<f64>> {
    let mut by_len: BTreeMap<usize, Vec<&crate::dataset::Trajectory>> = BTreeMap::new();
    for t in &d.trajectories {
        by_len.entry(t.states.len()).or_default().push(t);
    }
    by_len
        .into_iter()
        .map(|(len, trajs)| {
            let mut f = DMatrix::zeros(len, 3 * trajs.len());
            for (j, t) in trajs.iter().enumerate() {
                for (k, s) in t.states.iter().enumerate() {
                    let a = s.as_array();
                    for p in 0..3 {
                        f[(k, 3 * j + p)] = a[p];
                    }
                }
            }
            (len, f)
        })
        .collect()
}

/// Minimum of `Σ ‖L g − F‖² + ζ‖g‖²` summed over all trajectories and outputs.
pub fn ridge_objective(d: &Dataset, lambdas: &[f64], zeta: f64) -> f64 {
    ridge_objective_grouped(&group_outputs(d), lambdas, zeta)
}

fn ridge_objective_grouped(groups: &BTreeMap<usize, DMatrix<f64>>, lambdas: &[f64], zeta: f64) -> f64 {
    groups
        .iter()
        .map(|(len, f)| {
            let l = super::fit::power_matrix(lambdas, *len);
            let svd = l.svd(true, false);
            let u = svd.u.as_ref().expect("requested U");
            let proj = u.transpose() * f;
            let mut obj = f.norm_squared();
            for (i, s) in svd.singular_values.iter().enumerate() {
                let s2 = s * s;
                let shrink = if s2 + zeta > 0.0 { s2 / (s2 + zeta) } else { 0.0 };
                obj -= shrink * proj.row(i).norm_squared();
            }
            obj.max(0.0)
        })
        .sum()
}
