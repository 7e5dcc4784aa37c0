//! Dense convex QP `min ½wᵀHw + fᵀw  s.t.  Gw ≤ h`, solved by an
//! alternating-direction operator-splitting iteration.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{dim, invalid, Error, Result};
use crate::io::{BinReader, BinWriter};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hess: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpProblem {
    /// Checks dimensions, symmetry of `H` to 1e-10 and positive
    /// semidefiniteness (smallest eigenvalue ≥ −1e-8‖H‖).
    pub fn new(hess: DMatrix<f64>, f: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let n = f.len();
        if hess.nrows() != n || hess.ncols() != n {
            return Err(dim(format!("H is {}x{}, expected {n}x{n}", hess.nrows(), hess.ncols())));
        }
        if g.ncols() != n || g.nrows() != h.len() {
            return Err(dim(format!("G is {}x{} with {} bounds, expected ?x{n}", g.nrows(), g.ncols(), h.len())));
        }
        if hess.iter().chain(f.iter()).chain(g.iter()).chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("QP data must be finite"));
        }
        let scale = hess.amax().max(1.0);
        if (&hess - hess.transpose()).amax() > 1e-10 * scale {
            return Err(invalid("H is not symmetric"));
        }
        if n > 0 {
            let lo = hess.clone().symmetric_eigenvalues().min();
            if lo < -1e-8 * hess.norm() {
                return Err(invalid(format!("H is not positive semidefinite (eigenvalue {lo:e})")));
            }
        }
        Ok(Self { hess, f, g, h })
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn m(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.hess * w)) + self.f.dot(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIters,
    Infeasible,
}

impl QpStatus {
    pub fn name(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIters => "max_iters",
            QpStatus::Infeasible => "infeasible",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(QpStatus::Optimal),
            "max_iters" => Ok(QpStatus::MaxIters),
            "infeasible" => Ok(QpStatus::Infeasible),
            other => Err(Error::Format(format!("unknown QP status `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: DVector<f64>,
    /// Multipliers of `Gw ≤ h`.
    pub mu: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_interval: usize,
    pub scaling_iters: usize,
    pub eps_infeasible: f64,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iters: 20000,
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_interval: 25,
            scaling_iters: 10,
            eps_infeasible: 1e-5,
            polish: true,
        }
    }
}

/// Starting point for the iteration, typically the previous receding-horizon
/// solution shifted by one step.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub w: DVector<f64>,
    pub mu: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

/// Infinity norms of `max(Gw − h, 0)` and `Hw + f + Gᵀμ`, and `|μᵀ(Gw − h)|`.
pub fn kkt_residuals(p: &QpProblem, w: &DVector<f64>, mu: &DVector<f64>) -> Result<KktResiduals> {
    if w.len() != p.n() || mu.len() != p.m() {
        return Err(dim(format!("w has {} and μ {} entries for an {}x{} problem", w.len(), mu.len(), p.m(), p.n())));
    }
    let slack = &p.g * w - &p.h;
    let primal = slack.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    let dual = (&p.hess * w + &p.f + p.g.transpose() * mu).amax();
    let complementarity = mu.dot(&slack).abs();
    Ok(KktResiduals { primal, dual, complementarity })
}

const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

fn clamp_norm(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

/// Ruiz equilibration `H̄ = c D H D`, `Ḡ = E G D`, computed from `H` and `G` only.
#[derive(Debug, Clone)]
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    hess: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl Scaling {
    fn compute(hess: &DMatrix<f64>, g: &DMatrix<f64>, iters: usize) -> Self {
        let (n, m) = (hess.nrows(), g.nrows());
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut c = 1.0;
        let mut hs = hess.clone();
        let mut gs = g.clone();
        for _ in 0..iters {
            let dd = DVector::from_fn(n, |j, _| {
                let col = hs.column(j).amax().max(if m > 0 { gs.column(j).amax() } else { 0.0 });
                1.0 / clamp_norm(col).sqrt()
            });
            let ee = DVector::from_fn(m, |i, _| 1.0 / clamp_norm(gs.row(i).amax()).sqrt());
            for j in 0..n {
                for i in 0..n {
                    hs[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..m {
                    gs[(i, j)] *= ee[i] * dd[j];
                }
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&ee);
            if n > 0 {
                let mean_col = (0..n).map(|j| hs.column(j).amax()).sum::<f64>() / n as f64;
                let gamma = 1.0 / clamp_norm(mean_col);
                hs *= gamma;
                c *= gamma;
            }
        }
        Self { d, e, c, hess: hs, g: gs }
    }
}

#[derive(Debug, Clone)]
struct Cache {
    hess: DMatrix<f64>,
    g: DMatrix<f64>,
    scaling: Scaling,
    rho: f64,
    sigma: f64,
    scaling_iters: usize,
    chol: Cholesky<f64, Dyn>,
}

/// Reusable solver. The scaling and the factorization at the initial step
/// parameter are cached and reused while `H` and `G` stay the same.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
    cache: Option<Cache>,
}

fn factor(hess: &DMatrix<f64>, g: &DMatrix<f64>, sigma: f64, rho: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = hess.nrows();
    let k = hess + DMatrix::identity(n, n) * sigma + g.transpose() * g * rho;
    Cholesky::new(k).ok_or_else(|| Error::Numerical("QP linear system is not positive definite".into()))
}

fn norm_inf(v: &DVector<f64>) -> f64 {
    v.amax()
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings, cache: None }
    }

    fn validate_settings(&self) -> Result<()> {
        let s = &self.settings;
        let positive = [s.eps_abs, s.rho, s.sigma, s.eps_infeasible];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(s.eps_rel.is_finite() && s.eps_rel >= 0.0) {
            return Err(invalid("QP tolerances and step parameters must be positive"));
        }
        if !(s.alpha > 0.0 && s.alpha < 2.0) {
            return Err(invalid(format!("relaxation must lie in (0, 2), got {}", s.alpha)));
        }
        if s.max_iters == 0 || s.adaptive_interval == 0 {
            return Err(invalid("iteration limits must be positive"));
        }
        Ok(())
    }

    fn prepare(&mut self, p: &QpProblem) -> Result<&Cache> {
        let s = &self.settings;
        let hit = matches!(&self.cache, Some(c) if c.hess == p.hess
            && c.g == p.g
            && c.rho == s.rho
            && c.sigma == s.sigma
            && c.scaling_iters == s.scaling_iters);
        if !hit {
            let scaling = Scaling::compute(&p.hess, &p.g, s.scaling_iters);
            let chol = factor(&scaling.hess, &scaling.g, s.sigma, s.rho)?;
            self.cache = Some(Cache {
                hess: p.hess.clone(),
                g: p.g.clone(),
                scaling,
                rho: s.rho,
                sigma: s.sigma,
                scaling_iters: s.scaling_iters,
                chol,
            });
        }
        Ok(self.cache.as_ref().expect("cache filled above"))
    }

    pub fn solve(&mut self, p: &QpProblem, warm: Option<&WarmStart>) -> Result<QpSolution> {
        self.validate_settings()?;
        if let Some(ws) = warm {
            if ws.w.len() != p.n() || ws.mu.len() != p.m() {
                return Err(dim("warm start does not match the problem dimensions"));
            }
        }
        let s = self.settings.clone();
        let cache = self.prepare(p)?;
        let sc = &cache.scaling;
        let (n, m) = (p.n(), p.m());
        let d_inv = sc.d.map(|v| 1.0 / v);
        let e_inv = sc.e.map(|v| 1.0 / v);
        let q = sc.d.component_mul(&p.f) * sc.c;
        let u = sc.e.component_mul(&p.h);
        let hs = &sc.hess;
        let gs = &sc.g;
        let gs_t = gs.transpose();

        let (mut x, mut z, mut y) = match warm {
            Some(ws) => {
                let x = d_inv.component_mul(&ws.w);
                let z = (gs * &x).zip_map(&u, f64::min);
                let y = e_inv.component_mul(&ws.mu) * sc.c;
                (x, z, y)
            }
            None => (DVector::zeros(n), DVector::zeros(m), DVector::zeros(m)),
        };

        let mut rho = s.rho;
        let mut chol = cache.chol.clone();
        let mut status = QpStatus::MaxIters;
        let mut iterations = s.max_iters;
        let mut r_prim = f64::INFINITY;
        let mut r_dual = f64::INFINITY;

        for it in 1..=s.max_iters {
            let y_prev = y.clone();
            let rhs = &x * s.sigma - &q + &gs_t * (&z * rho - &y);
            let x_tilde = chol.solve(&rhs);
            let z_tilde = gs * &x_tilde;
            let x_next = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_relaxed = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
            let z_next = (&z_relaxed + &y / rho).zip_map(&u, f64::min);
            y += (&z_relaxed - &z_next) * rho;
            x = x_next;
            z = z_next;

            let gx = gs * &x;
            let hx = hs * &x;
            let gty = &gs_t * &y;
            r_prim = if m > 0 { norm_inf(&e_inv.component_mul(&(&gx - &z))) } else { 0.0 };
            r_dual = norm_inf(&d_inv.component_mul(&(&hx + &q + &gty))) / sc.c;
            let prim_scale = if m > 0 {
                norm_inf(&e_inv.component_mul(&gx)).max(norm_inf(&e_inv.component_mul(&z)))
            } else {
                0.0
            };
            let dual_scale = norm_inf(&d_inv.component_mul(&hx))
                .max(norm_inf(&d_inv.component_mul(&gty)))
                .max(norm_inf(&d_inv.component_mul(&q)))
                / sc.c;
            if r_prim <= s.eps_abs + s.eps_rel * prim_scale && r_dual <= s.eps_abs + s.eps_rel * dual_scale {
                status = QpStatus::Optimal;
                iterations = it;
                break;
            }

            if m > 0 {
                let dy = (&y - &y_prev).map(|v| v.max(0.0)).component_mul(&sc.e);
                let dy_norm = norm_inf(&dy);
                if dy_norm > 0.0 {
                    let gtdy = p.g.transpose() * &dy;
                    if norm_inf(&gtdy) <= s.eps_infeasible * dy_norm && p.h.dot(&dy) < -s.eps_infeasible * dy_norm {
                        status = QpStatus::Infeasible;
                        iterations = it;
                        break;
                    }
                }
            }

            if s.polish && m > 0 && it % s.adaptive_interval == 0 {
                let w = sc.d.component_mul(&x);
                let mu = sc.e.component_mul(&y) / sc.c;
                if let Some((pw, pmu)) = active_set_candidate(p, &w, &mu) {
                    if let Some((rp, rd)) = unscaled_check(p, &pw, &pmu, &s) {
                        return Ok(QpSolution {
                            w: pw,
                            mu: pmu,
                            status: QpStatus::Optimal,
                            primal_residual: rp,
                            dual_residual: rd,
                            iterations: it,
                            polished: true,
                        });
                    }
                }
            }

            if s.adaptive_rho && m > 0 && it % s.adaptive_interval == 0 {
                let num = r_prim / (prim_scale + 1e-10);
                let den = r_dual / (dual_scale + 1e-10);
                let proposed = (rho * (num / (den + 1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
                if proposed > 5.0 * rho || proposed < rho / 5.0 {
                    rho = proposed;
                    chol = factor(hs, gs, s.sigma, rho)?;
                }
            }
        }

        let w = sc.d.component_mul(&x);
        let mu = sc.e.component_mul(&y) / sc.c;
        let mut sol = QpSolution {
            w,
            mu,
            status,
            primal_residual: r_prim,
            dual_residual: r_dual,
            iterations,
            polished: false,
        };
        if s.polish && status == QpStatus::Optimal {
            polish(p, &mut sol, &s);
        }
        Ok(sol)
    }
}

/// Solves the equality-constrained problem on the active set guessed from
/// `(w, μ)`. Returns the candidate primal and dual vectors.
fn active_set_candidate(p: &QpProblem, w: &DVector<f64>, mu: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let (n, m) = (p.n(), p.m());
    let slack = &p.h - &p.g * w;
    let active: Vec<usize> = (0..m).filter(|i| slack[*i] < mu[*i]).collect();
    if active.len() > n {
        return None;
    }
    let dim_k = n + active.len();
    let mut kkt = DMatrix::zeros(dim_k, dim_k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.hess);
    let mut rhs = DVector::zeros(dim_k);
    rhs.rows_mut(0, n).copy_from(&(-&p.f));
    for (r, i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = p.g[(*i, j)];
            kkt[(j, n + r)] = p.g[(*i, j)];
        }
        rhs[n + r] = p.h[*i];
    }
    let delta = 1e-9;
    let mut reg = kkt.clone();
    for k in 0..dim_k {
        reg[(k, k)] += if k < n { delta } else { -delta };
    }
    let lu = reg.lu();
    let mut sol_k = lu.solve(&rhs)?;
    for _ in 0..5 {
        let resid = &rhs - &kkt * &sol_k;
        sol_k += lu.solve(&resid)?;
    }
    if sol_k.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let w = sol_k.rows(0, n).into_owned();
    let mut mu = DVector::zeros(m);
    for (r, i) in active.iter().enumerate() {
        mu[*i] = sol_k[n + r];
    }
    Some((w, mu))
}

/// Residuals and tolerance scales of `(w, μ)` on the unscaled problem.
fn unscaled_check(p: &QpProblem, w: &DVector<f64>, mu: &DVector<f64>, s: &QpSettings) -> Option<(f64, f64)> {
    if mu.iter().any(|v| *v < -s.eps_abs * mu.amax().max(1.0)) {
        return None;
    }
    let res = kkt_residuals(p, w, mu).ok()?;
    let gw = &p.g * w;
    let prim_scale = if p.m() > 0 { norm_inf(&gw).max(norm_inf(&p.h)) } else { 0.0 };
    let dual_scale = norm_inf(&(&p.hess * w)).max(norm_inf(&(p.g.transpose() * mu))).max(norm_inf(&p.f));
    (res.primal <= s.eps_abs + s.eps_rel * prim_scale && res.dual <= s.eps_abs + s.eps_rel * dual_scale)
        .then_some((res.primal, res.dual))
}

/// Replaces the ADMM iterate by the active-set solution if that is primal
/// feasible with nonnegative multipliers and no larger residuals.
fn polish(p: &QpProblem, sol: &mut QpSolution, s: &QpSettings) {
    let Some((w, mu)) = active_set_candidate(p, &sol.w, &sol.mu) else { return };
    let Ok(res) = kkt_residuals(p, &w, &mu) else { return };
    let tol = s.eps_abs;
    if mu.iter().any(|v| *v < -tol * mu.amax().max(1.0))
        || res.primal > tol.max(sol.primal_residual)
        || res.dual > tol.max(sol.dual_residual)
    {
        return;
    }
    sol.w = w;
    sol.mu = mu;
    sol.primal_residual = res.primal;
    sol.dual_residual = res.dual;
    sol.polished = true;
}

/// One-shot solve with default settings.
pub fn solve(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    QpSolver::new(settings.clone()).solve(p, None)
}

const QP_MAGIC: &[u8; 8] = b"KMPCQPRB";
const QP_VERSION: u32 = 1;

/// Writes `(H, f, G, h)` in row-major little-endian floats for offline inspection.
pub fn write_qp<W: Write>(p: &QpProblem, out: W) -> Result<W> {
    let mut w = BinWriter::new(out);
    w.bytes(QP_MAGIC)?;
    w.u32(QP_VERSION)?;
    w.u64(p.n() as u64)?;
    w.u64(p.m() as u64)?;
    for mat in [&p.hess, &p.g] {
        for r in 0..mat.nrows() {
            for c in 0..mat.ncols() {
                w.f64(mat[(r, c)])?;
            }
        }
    }
    w.f64s(p.f.as_slice())?;
    w.f64s(p.h.as_slice())?;
    w.finish()
}

pub fn read_qp<R: Read>(input: R) -> Result<QpProblem> {
    let mut r = BinReader::new(input);
    r.expect_magic(QP_MAGIC)?;
    let version = r.u32()?;
    if version != QP_VERSION {
        return Err(Error::Format(format!("unsupported QP dump version {version}")));
    }
    let n = r.count(1 << 14, "variable")?;
    let m = r.count(1 << 16, "constraint")?;
    let hess = DMatrix::from_row_slice(n, n, &r.f64s(n * n)?);
    let g = DMatrix::from_row_slice(m, n, &r.f64s(m * n)?);
    let f = DVector::from_vec(r.f64s(n)?);
    let h = DVector::from_vec(r.f64s(m)?);
    r.expect_eof()?;
    QpProblem::new(hess, f, g, h)
}

pub fn dump_qp(p: &QpProblem, path: &Path) -> Result<()> {
    write_qp(p, std::io::BufWriter::new(std::fs::File::create(path)?))?;
    Ok(())
}
