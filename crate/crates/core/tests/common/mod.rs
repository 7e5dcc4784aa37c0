#![allow(dead_code)]

use koopman_mpc::dataset::{Dataset, DatasetKind, Trajectory};
use koopman_mpc::koopman::{fit_b, fit_g, power_matrix, predict, EigenvalueSet, KoopmanModel, LiftTable};
use koopman_mpc::qp::QpProblem;
use koopman_mpc::vehicle::{ControlInput, VehicleState};
use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::{FromPrimitive, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random strictly convex QP with a known feasible point.
pub fn random_qp(r: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let a = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
    let hess = a.transpose() * &a + DMatrix::identity(n, n) * r.gen_range(0.1..1.0);
    let hess = (&hess + hess.transpose()) * 0.5;
    let f = DVector::from_fn(n, |_, _| r.gen_range(-5.0..5.0));
    let g = DMatrix::from_fn(m, n, |_, _| r.gen_range(-1.0..1.0));
    let w0 = DVector::from_fn(n, |_, _| r.gen_range(-0.5..0.5));
    let h = &g * &w0 + DVector::from_fn(m, |_, _| r.gen_range(0.0..1.0));
    QpProblem::new(hess, f, g, h).unwrap()
}

fn subsets(m: usize, size: usize, start: usize, cur: &mut Vec<usize>, out: &mut dyn FnMut(&[usize]) -> bool) -> bool {
    if cur.len() == size {
        return out(cur);
    }
    for i in start..m {
        cur.push(i);
        if subsets(m, size, i + 1, cur, out) {
            return true;
        }
        cur.pop();
    }
    false
}

/// Enumerates active sets by increasing size and returns the first whose
/// equality-constrained solution is feasible with nonnegative multipliers.
pub fn active_set_oracle(p: &QpProblem) -> Option<(DVector<f64>, DVector<f64>)> {
    let (n, m) = (p.n(), p.m());
    let mut found = None;
    for size in 0..=n.min(m) {
        let mut visit = |act: &[usize]| -> bool {
            let k = n + act.len();
            let mut kkt = DMatrix::zeros(k, k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.hess);
            let mut rhs = DVector::zeros(k);
            rhs.rows_mut(0, n).copy_from(&(-&p.f));
            for (r, i) in act.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = p.g[(*i, j)];
                    kkt[(j, n + r)] = p.g[(*i, j)];
                }
                rhs[n + r] = p.h[*i];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { return false };
            let w = sol.rows(0, n).into_owned();
            let mut mu = DVector::zeros(m);
            for (r, i) in act.iter().enumerate() {
                mu[*i] = sol[n + r];
            }
            let feasible = (&p.g * &w - &p.h).iter().all(|v| *v <= 1e-9);
            if feasible && mu.iter().all(|v| *v >= -1e-9) {
                found = Some((w, mu));
                return true;
            }
            false
        };
        if subsets(m, size, 0, &mut Vec::new(), &mut visit) {
            break;
        }
    }
    found
}

pub fn to_rational(v: f64) -> BigRational {
    BigRational::from_f64(v).expect("finite")
}

/// Solves `(LᵀL + ζI) g = LᵀF` exactly in rational arithmetic.
pub fn rational_ridge(l: &DMatrix<f64>, f: &DVector<f64>, zeta: f64) -> Vec<f64> {
    let (k, n) = l.shape();
    let lr: Vec<Vec<BigRational>> = (0..k).map(|r| (0..n).map(|c| to_rational(l[(r, c)])).collect()).collect();
    let fr: Vec<BigRational> = f.iter().map(|v| to_rational(*v)).collect();
    let z = to_rational(zeta);
    let mut a: Vec<Vec<BigRational>> = (0..n)
        .map(|i| {
            let mut row: Vec<BigRational> = (0..n)
                .map(|j| (0..k).fold(BigRational::zero(), |acc, r| acc + &lr[r][i] * &lr[r][j]))
                .collect();
            row[i] += &z;
            row.push((0..k).fold(BigRational::zero(), |acc, r| acc + &lr[r][i] * &fr[r]));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|r| !a[*r][col].is_zero()).expect("normal equations are nonsingular");
        a.swap(col, pivot);
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let factor = &a[r][col] / &a[col][col];
                for c in col..=n {
                    let delta = &factor * &a[col][c];
                    a[r][c] -= delta;
                }
            }
        }
    }
    (0..n).map(|i| (&a[i][n] / &a[i][i]).to_f64().expect("representable")).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

pub fn dataset(kind: DatasetKind, trajectories: Vec<Trajectory>) -> Dataset {
    Dataset { kind, ts: 0.01, trajectories, dropped: 0, snapshot: String::new() }
}

/// Trajectory with arbitrary (not plant-generated) states and inputs.
pub fn synthetic_trajectory(r: &mut ChaCha8Rng, steps: usize) -> Trajectory {
    let states = (0..=steps)
        .map(|_| VehicleState::new(r.gen_range(5.0..25.0), r.gen_range(-5.0..5.0), r.gen_range(-2.0..2.0)))
        .collect();
    let inputs = (0..steps)
        .map(|_| ControlInput::new(0.0, r.gen_range(-1.0..1.0), r.gen_range(-0.5..0.5), 0.0))
        .collect();
    Trajectory { states, inputs, ts: 0.01, truncated: false }
}

/// Least-squares estimate of `B` built generically: each regressor column is
/// the change of the stacked predictions when one entry of `B` is set to one.
pub fn generic_b_oracle(d: &Dataset, lambdas: &EigenvalueSet, starts: &[DVector<f64>]) -> DMatrix<f64> {
    let n_z = 3 * lambdas.len();
    let model_with = |b: DMatrix<f64>| {
        let table = LiftTable { points: vec![[1.0, 0.0, 0.0]], vectors: vec![0.0; n_z], dim: n_z, offsets: vec![0, 1] };
        KoopmanModel::new(lambdas.clone(), b, table, 0.01, 1).unwrap()
    };
    let stacked = |m: &KoopmanModel| -> Vec<f64> {
        let mut out = Vec::new();
        for (t, z0) in d.trajectories.iter().zip(starts) {
            let ys = predict(m, z0, &t.inputs).unwrap();
            for y in &ys[1..] {
                out.extend(y.iter().copied());
            }
        }
        out
    };
    let free = stacked(&model_with(DMatrix::zeros(n_z, 4)));
    let truth: Vec<f64> = d
        .trajectories
        .iter()
        .flat_map(|t| t.states[1..].iter().flat_map(|s| s.as_array()))
        .collect();
    let rows = free.len();
    let mut phi = DMatrix::zeros(rows, n_z * 4);
    for r in 0..n_z {
        for c in 0..4 {
            let mut b = DMatrix::zeros(n_z, 4);
            b[(r, c)] = 1.0;
            let probe = stacked(&model_with(b));
            for k in 0..rows {
                phi[(k, r * 4 + c)] = probe[k] - free[k];
            }
        }
    }
    let target = DVector::from_fn(rows, |k, _| truth[k] - free[k]);
    let theta = phi.pseudo_inverse(1e-10).unwrap() * target;
    DMatrix::from_fn(n_z, 4, |r, c| theta[r * 4 + c])
}

pub fn random_eigenvalues(r: &mut impl Rng, n: usize) -> EigenvalueSet {
    loop {
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..1.0)).collect();
        let mut s = v.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        if s.windows(2).all(|w| w[0] - w[1] > 0.05) {
            return EigenvalueSet::new(v).unwrap();
        }
    }
}

pub fn pseudo_lift(x: &VehicleState, n_z: usize) -> DVector<f64> {
    DVector::from_fn(n_z, |i, _| ((i + 1) as f64 * 0.37 * x.vx + x.vy).sin() + 0.1 * x.yaw_rate)
}

pub fn fit_g_instances(seed: u64, count: usize) -> Vec<f64> {
    let mut r = rng(seed);
    let zetas = [0.0, 1e-12, 1e-6];
    (0..count)
        .map(|i| {
            let n = r.gen_range(1..=10);
            let k = r.gen_range(n.max(2)..=20);
            let zeta = zetas[i % 3];
            let lams = random_eigenvalues(&mut r, n);
            let t = synthetic_trajectory(&mut r, k - 1);
            let d = dataset(DatasetKind::Uncontrolled, vec![t.clone()]);
            let g = fit_g(&d, &lams, zeta).unwrap();
            let l = power_matrix(lams.as_slice(), k);
            let mut got = Vec::new();
            let mut want = Vec::new();
            for p in 0..3 {
                let f = DVector::from_fn(k, |row, _| t.states[row].as_array()[p]);
                want.extend(rational_ridge(&l, &f, zeta));
                got.extend((0..n).map(|q| g.get(p, q, 0)));
            }
            rel_err(&got, &want)
        })
        .collect()
}

pub fn fit_b_instances(seed: u64, count: usize) -> Vec<(f64, f64, f64)> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let n = r.gen_range(1..=3);
            let lams = random_eigenvalues(&mut r, n);
            let n_traj = r.gen_range(1..=5);
            let trajs: Vec<Trajectory> =
                (0..n_traj).map(|_| {
                    let steps = r.gen_range(1..=5);
                    synthetic_trajectory(&mut r, steps)
                }).collect();
            let d = dataset(DatasetKind::Controlled, trajs);
            let n_z = 3 * n;
            let fit = fit_b(&d, &lams, |x| pseudo_lift(x, n_z)).unwrap();
            let starts: Vec<DVector<f64>> = d.trajectories.iter().map(|t| pseudo_lift(&t.x0(), n_z)).collect();
            let oracle = generic_b_oracle(&d, &lams, &starts);
            (rel_err(fit.b.as_slice(), oracle.as_slice()), fit.objective, fit.objective_zero)
        })
        .collect()
}
