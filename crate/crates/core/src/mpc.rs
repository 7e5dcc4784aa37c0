//! Receding-horizon control with a linear predictor: the horizon problem is
//! condensed into a dense QP over the free inputs and the output slacks.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};

use crate::config::KeyValues;
use crate::error::{dim, invalid, Error, Result};
use crate::io::{fmt_f64, parse_f64};
use crate::koopman::KoopmanModel;
use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus, WarmStart};
use crate::vehicle::{linearize, step, ControlInput, Linearization, VehicleParams, VehicleState, DEFAULT_FD_STEP};

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub qy: Matrix3<f64>,
    pub r: Matrix4<f64>,
    pub s: Matrix3<f64>,
    pub horizon: usize,
    pub y_min: Vector3<f64>,
    pub y_max: Vector3<f64>,
    pub u_min: Vector4<f64>,
    pub u_max: Vector4<f64>,
    pub du_min: Vector4<f64>,
    pub du_max: Vector4<f64>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            qy: Matrix3::identity(),
            r: Matrix4::from_diagonal(&Vector4::new(0.0, 100.0, 30.0, 0.0)),
            s: Matrix3::identity() * 1e5,
            horizon: 10,
            y_min: -Vector3::new(25.0, 2.0, 2.0),
            y_max: Vector3::new(25.0, 2.0, 2.0),
            u_min: -Vector4::new(0.0, 1.0, 0.45, 0.0),
            u_max: Vector4::new(0.0, 1.0, 0.45, 0.0),
            du_min: -Vector4::new(0.0, 0.1, 0.8, 0.0),
            du_max: Vector4::new(0.0, 0.1, 0.8, 0.0),
        }
    }
}

fn is_psd<const D: usize>(m: &nalgebra::SMatrix<f64, D, D>) -> bool
where
    nalgebra::Const<D>: nalgebra::DimMin<nalgebra::Const<D>, Output = nalgebra::Const<D>> + nalgebra::DimSub<nalgebra::U1>,
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<nalgebra::DimDiff<nalgebra::Const<D>, nalgebra::U1>>,
{
    let sym = (m - m.transpose()).amax() <= 1e-10 * m.amax().max(1.0);
    sym && m.symmetric_eigenvalues().min() >= -1e-10 * m.amax().max(1.0)
}

impl MpcConfig {
    pub const KEYS: [&'static str; 10] =
        ["qy_diag", "r_diag", "s_diag", "horizon", "y_min", "y_max", "u_min", "u_max", "du_min", "du_max"];

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        if !is_psd(&self.qy) || !is_psd(&self.r) || !is_psd(&self.s) {
            return Err(invalid("cost matrices must be symmetric positive semidefinite"));
        }
        if (0..3).any(|i| self.y_min[i].is_nan() || self.y_max[i].is_nan() || self.y_min[i] > self.y_max[i]) {
            return Err(invalid("y_min must not exceed y_max"));
        }
        if (0..4).any(|i| !(self.u_min[i] <= self.u_max[i] && self.du_min[i] <= self.du_max[i])) {
            return Err(invalid("input and rate bounds must satisfy min ≤ max"));
        }
        if (0..4).any(|i| !(self.du_min[i] <= 0.0 && self.du_max[i] >= 0.0)) {
            return Err(invalid("rate bounds must admit holding the input"));
        }
        if self.u_min.iter().chain(self.u_max.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("input bounds must be finite"));
        }
        Ok(())
    }

    /// Slots whose bounds leave room to move; the others are pinned to `u_min`.
    pub fn free_slots(&self) -> Vec<usize> {
        (0..4).filter(|c| self.u_min[*c] < self.u_max[*c]).collect()
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let diag3 = |m: &Matrix3<f64>| [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        let diag4 = |m: &Matrix4<f64>| [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(3, 3)]];
        let cfg = Self {
            qy: Matrix3::from_diagonal(&Vector3::from(kv.array_or("qy_diag", diag3(&d.qy))?)),
            r: Matrix4::from_diagonal(&Vector4::from(kv.array_or("r_diag", diag4(&d.r))?)),
            s: Matrix3::from_diagonal(&Vector3::from(kv.array_or("s_diag", diag3(&d.s))?)),
            horizon: kv.usize_or("horizon", d.horizon)?,
            y_min: Vector3::from(kv.array_or("y_min", d.y_min.into())?),
            y_max: Vector3::from(kv.array_or("y_max", d.y_max.into())?),
            u_min: Vector4::from(kv.array_or("u_min", d.u_min.into())?),
            u_max: Vector4::from(kv.array_or("u_max", d.u_max.into())?),
            du_min: Vector4::from(kv.array_or("du_min", d.du_min.into())?),
            du_max: Vector4::from(kv.array_or("du_max", d.du_max.into())?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Clips `u` into the input bounds and the rate window around `u_prev`.
    pub fn clip_input(&self, u: &ControlInput, u_prev: &ControlInput) -> ControlInput {
        let (u, prev) = (u.as_array(), u_prev.as_array());
        let mut out = [0.0; 4];
        for c in 0..4 {
            let lo = self.u_min[c].max(prev[c] + self.du_min[c]);
            let hi = self.u_max[c].min(prev[c] + self.du_max[c]);
            if lo > hi {
                out[c] = u[c].clamp(self.u_min[c], self.u_max[c]);
                continue;
            }
            let mut v = u[c].clamp(lo, hi);
            while v - prev[c] > self.du_max[c] && v > self.u_min[c] {
                v = v.next_down();
            }
            while v - prev[c] < self.du_min[c] && v < self.u_max[c] {
                v = v.next_up();
            }
            out[c] = v;
        }
        ControlInput::from_slice(&out)
    }

    /// Largest violation of the input bounds or the rate bounds relative to `u_prev`.
    pub fn hard_violation(&self, u: &ControlInput, u_prev: &ControlInput) -> f64 {
        let (u, prev) = (u.as_array(), u_prev.as_array());
        (0..4)
            .map(|c| {
                let du = u[c] - prev[c];
                (self.u_min[c] - u[c])
                    .max(u[c] - self.u_max[c])
                    .max(self.du_min[c] - du)
                    .max(du - self.du_max[c])
                    .max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

/// `z⁺ = A z + B u + offset`, `y = C z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl PredictorModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || b.ncols() != 4 || c.nrows() != 3 || c.ncols() != n || offset.len() != n {
            return Err(dim(format!(
                "predictor dimensions A {}x{}, B {}x{}, C {}x{}, offset {}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                offset.len()
            )));
        }
        Ok(Self { a, b, c, offset })
    }

    pub fn from_koopman(m: &KoopmanModel) -> Self {
        let n = m.lifted_dim();
        Self { a: m.a.clone(), b: m.b.clone(), c: m.c.clone(), offset: DVector::zeros(n) }
    }

    pub fn from_linearization(l: &Linearization) -> Self {
        Self {
            a: DMatrix::from_column_slice(3, 3, l.a.as_slice()),
            b: DMatrix::from_column_slice(3, 4, l.b.as_slice()),
            c: DMatrix::identity(3, 3),
            offset: DVector::from_column_slice(l.c.as_slice()),
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

/// Horizon data that do not depend on the initial state, input or reference.
///
/// Decision vector: `v_0..v_{N−1}` (free input slots), then `s_0..s_{N−1}`.
/// Inequality rows are grouped by step, each group holding the soft output
/// bounds, input bounds, rate bounds and `s ≥ 0` of that step.
#[derive(Debug, Clone)]
pub struct Condenser {
    pub model: PredictorModel,
    pub cfg: MpcConfig,
    free: Vec<usize>,
    fixed: Vector4<f64>,
    /// `C A^m` for `m = 0..=N`.
    out_pow: Vec<DMatrix<f64>>,
    /// Output response to the fixed input slots and the offset, `3(N+1)`.
    forced: DVector<f64>,
    /// Output response to the free inputs, `3(N+1) × N n_f`.
    theta: DMatrix<f64>,
    q_bar: DMatrix<f64>,
    hess: DMatrix<f64>,
    f_input: DVector<f64>,
    g: DMatrix<f64>,
    soft_rows: Vec<(usize, f64)>,
}

impl Condenser {
    pub fn new(model: PredictorModel, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        let n_steps = cfg.horizon;
        let free = cfg.free_slots();
        let nf = free.len();
        let fixed = Vector4::from_fn(|c, _| if free.contains(&c) { 0.0 } else { cfg.u_min[c] });
        let fixed_d = DVector::from_column_slice(fixed.as_slice());
        let selector = DMatrix::from_fn(4, nf, |r, c| if free[c] == r { 1.0 } else { 0.0 });

        let mut out_pow = Vec::with_capacity(n_steps + 1);
        out_pow.push(model.c.clone());
        for m in 0..n_steps {
            let next = &out_pow[m] * &model.a;
            out_pow.push(next);
        }
        let drive = &model.b * &fixed_d + &model.offset;
        let n_out = 3 * (n_steps + 1);
        let mut forced = DVector::zeros(n_out);
        let mut theta = DMatrix::zeros(n_out, n_steps * nf);
        let impulse: Vec<DMatrix<f64>> = out_pow.iter().map(|cp| cp * &model.b * &selector).collect();
        let forced_step: Vec<DVector<f64>> = out_pow.iter().map(|cp| cp * &drive).collect();
        for m in 1..=n_steps {
            for i in 0..m {
                let lag = m - i - 1;
                let mut block = forced.rows_mut(3 * m, 3);
                block += &forced_step[lag];
                theta.view_mut((3 * m, i * nf), (3, nf)).copy_from(&impulse[lag]);
            }
        }

        let mut q_bar = DMatrix::zeros(n_out, n_out);
        for m in 0..=n_steps {
            q_bar.view_mut((3 * m, 3 * m), (3, 3)).copy_from(&cfg.qy);
        }
        let r_free = DMatrix::from_fn(nf, nf, |a, b| cfg.r[(free[a], free[b])]);
        let n_var = n_steps * (nf + 3);
        let s_off = n_steps * nf;
        let mut hess = DMatrix::zeros(n_var, n_var);
        let vv = theta.transpose() * &q_bar * &theta * 2.0;
        hess.view_mut((0, 0), (s_off, s_off)).copy_from(&vv);
        let r_fixed = (selector.transpose() * DMatrix::from_column_slice(4, 4, cfg.r.as_slice()) * &fixed_d) * 2.0;
        let mut f_input = DVector::zeros(n_var);
        for m in 0..n_steps {
            let mut blk = hess.view_mut((m * nf, m * nf), (nf, nf));
            blk += &r_free * 2.0;
            f_input.rows_mut(m * nf, nf).copy_from(&r_fixed);
            hess.view_mut((s_off + 3 * m, s_off + 3 * m), (3, 3)).copy_from(&(cfg.s * 2.0));
        }
        let hess = (&hess + hess.transpose()) * 0.5;

        let mut soft_rows = Vec::new();
        for p in 0..3 {
            if cfg.y_max[p].is_finite() {
                soft_rows.push((p, 1.0));
            }
            if cfg.y_min[p].is_finite() {
                soft_rows.push((p, -1.0));
            }
        }
        let per_step = soft_rows.len() + 4 * nf + 3;
        let mut g = DMatrix::zeros(n_steps * per_step, n_var);
        for m in 0..n_steps {
            let base = m * per_step;
            for (k, (p, sign)) in soft_rows.iter().enumerate() {
                for col in 0..s_off {
                    g[(base + k, col)] = sign * theta[(3 * m + p, col)];
                }
                g[(base + k, s_off + 3 * m + p)] = -1.0;
            }
            let mut row = base + soft_rows.len();
            for j in 0..nf {
                g[(row, m * nf + j)] = 1.0;
                g[(row + 1, m * nf + j)] = -1.0;
                row += 2;
            }
            for j in 0..nf {
                g[(row, m * nf + j)] = 1.0;
                g[(row + 1, m * nf + j)] = -1.0;
                if m > 0 {
                    g[(row, (m - 1) * nf + j)] = -1.0;
                    g[(row + 1, (m - 1) * nf + j)] = 1.0;
                }
                row += 2;
            }
            for p in 0..3 {
                g[(row + p, s_off + 3 * m + p)] = -1.0;
            }
        }
        Ok(Self { model, cfg, free, fixed, out_pow, forced, theta, q_bar, hess, f_input, g, soft_rows })
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn free_slots(&self) -> &[usize] {
        &self.free
    }

    fn rows_per_step(&self) -> usize {
        self.soft_rows.len() + 4 * self.free.len() + 3
    }

    /// Predicted outputs `y_0..y_N` stacked, for the free inputs `v`.
    pub fn predicted_outputs(&self, z0: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.free_response(z0) + &self.theta * v
    }

    fn free_response(&self, z0: &DVector<f64>) -> DVector<f64> {
        let mut y = self.forced.clone();
        for (m, cp) in self.out_pow.iter().enumerate() {
            let mut blk = y.rows_mut(3 * m, 3);
            blk += cp * z0;
        }
        y
    }

    /// QP for initial lifted state `z0`, previous input and references `r_0..r_N`.
    pub fn condense(&self, z0: &DVector<f64>, u_prev: &ControlInput, refs: &[[f64; 3]]) -> Result<QpProblem> {
        let n_steps = self.cfg.horizon;
        if z0.len() != self.model.n() {
            return Err(dim(format!("initial state has length {}, model needs {}", z0.len(), self.model.n())));
        }
        if refs.len() != n_steps + 1 {
            return Err(dim(format!("{} reference rows for a horizon of {n_steps} (need {})", refs.len(), n_steps + 1)));
        }
        let nf = self.free.len();
        let y_free = self.free_response(z0);
        let r_stack = DVector::from_fn(3 * (n_steps + 1), |i, _| refs[i / 3][i % 3]);
        let mut f = self.f_input.clone();
        let track = self.theta.transpose() * (&self.q_bar * (&y_free - &r_stack)) * 2.0;
        let mut fv = f.rows_mut(0, n_steps * nf);
        fv += &track;

        let per_step = self.rows_per_step();
        let prev = u_prev.as_array();
        let mut h = DVector::zeros(n_steps * per_step);
        for m in 0..n_steps {
            let base = m * per_step;
            for (k, (p, sign)) in self.soft_rows.iter().enumerate() {
                let yf = y_free[3 * m + p];
                h[base + k] = if *sign > 0.0 { self.cfg.y_max[*p] - yf } else { yf - self.cfg.y_min[*p] };
            }
            let mut row = base + self.soft_rows.len();
            for c in &self.free {
                h[row] = self.cfg.u_max[*c];
                h[row + 1] = -self.cfg.u_min[*c];
                row += 2;
            }
            for c in &self.free {
                let shift = if m == 0 { prev[*c] } else { 0.0 };
                h[row] = self.cfg.du_max[*c] + shift;
                h[row + 1] = -self.cfg.du_min[*c] - shift;
                row += 2;
            }
        }
        QpProblem::new(self.hess.clone(), f, self.g.clone(), h)
    }

    /// Full input `u_m` from the decision vector.
    pub fn input_at(&self, w: &DVector<f64>, m: usize) -> ControlInput {
        let nf = self.free.len();
        let mut u = self.fixed;
        for (j, c) in self.free.iter().enumerate() {
            u[*c] = w[m * nf + j];
        }
        ControlInput::from_vector(&u)
    }

    pub fn slacks<'a>(&self, w: &'a DVector<f64>) -> nalgebra::DVectorView<'a, f64> {
        let off = self.cfg.horizon * self.free.len();
        w.rows(off, 3 * self.cfg.horizon)
    }

    /// Previous plan advanced by one step, last step repeated.
    fn shifted(&self, ws: &WarmStart) -> WarmStart {
        let n_steps = self.cfg.horizon;
        let nf = self.free.len();
        let s_off = n_steps * nf;
        let mut w = ws.w.clone();
        let mut mu = ws.mu.clone();
        let per_step = self.rows_per_step();
        for m in 0..n_steps {
            let src = (m + 1).min(n_steps - 1);
            for j in 0..nf {
                w[m * nf + j] = ws.w[src * nf + j];
            }
            for p in 0..3 {
                w[s_off + 3 * m + p] = ws.w[s_off + 3 * src + p];
            }
            for k in 0..per_step {
                mu[m * per_step + k] = ws.mu[src * per_step + k];
            }
        }
        WarmStart { w, mu }
    }
}

/// Outcome of one controller invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub input: ControlInput,
    pub status: QpStatus,
    pub iterations: usize,
    pub slack_max: f64,
}

/// Condenser plus solver and warm-start state for one closed-loop run.
#[derive(Debug, Clone)]
pub struct MpcSolver {
    pub condenser: Condenser,
    solver: QpSolver,
    warm: Option<WarmStart>,
    pub warm_start: bool,
}

impl MpcSolver {
    pub fn new(condenser: Condenser, settings: QpSettings) -> Self {
        Self { condenser, solver: QpSolver::new(settings), warm: None, warm_start: true }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Solves the horizon problem and returns the first input clipped into the hard bounds.
    pub fn solve(&mut self, z0: &DVector<f64>, u_prev: &ControlInput, refs: &[[f64; 3]]) -> Result<MpcStep> {
        let qp = self.condenser.condense(z0, u_prev, refs)?;
        let warm = if self.warm_start { self.warm.as_ref().map(|ws| self.condenser.shifted(ws)) } else { None };
        let sol = self.solver.solve(&qp, warm.as_ref())?;
        if sol.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("QP returned non-finite values".into()));
        }
        let raw = self.condenser.input_at(&sol.w, 0);
        let input = self.condenser.cfg.clip_input(&raw, u_prev);
        let slack_max = self.condenser.slacks(&sol.w).iter().fold(0.0_f64, |a, s| a.max(*s));
        self.warm = Some(WarmStart { w: sol.w, mu: sol.mu });
        Ok(MpcStep { input, status: sol.status, iterations: sol.iterations, slack_max })
    }
}

pub trait Controller {
    fn name(&self) -> &str;
    fn config(&self) -> &MpcConfig;
    fn control(&mut self, x: &VehicleState, u_prev: &ControlInput, refs: &[[f64; 3]]) -> Result<MpcStep>;
}

/// Re-lifts the measured state every step and plans in the lifted space.
#[derive(Debug, Clone)]
pub struct KoopmanMpc {
    pub model: KoopmanModel,
    pub mpc: MpcSolver,
}

impl KoopmanMpc {
    pub fn new(model: KoopmanModel, cfg: MpcConfig, settings: QpSettings) -> Result<Self> {
        let condenser = Condenser::new(PredictorModel::from_koopman(&model), cfg)?;
        Ok(Self { model, mpc: MpcSolver::new(condenser, settings) })
    }
}

impl Controller for KoopmanMpc {
    fn name(&self) -> &str {
        "koopman"
    }

    fn config(&self) -> &MpcConfig {
        &self.mpc.condenser.cfg
    }

    fn control(&mut self, x: &VehicleState, u_prev: &ControlInput, refs: &[[f64; 3]]) -> Result<MpcStep> {
        let z0 = self.model.lift(x)?;
        self.mpc.solve(&z0, u_prev, refs)
    }
}

/// Plans with the plant linearized at a trim point. With `relinearize` the
/// model is rebuilt around the current state and previous input every step.
#[derive(Debug, Clone)]
pub struct LinearMpc {
    pub params: VehicleParams,
    pub ts: f64,
    pub relinearize: bool,
    pub linearization: Linearization,
    pub mpc: MpcSolver,
}

impl LinearMpc {
    pub fn new(
        trim: (VehicleState, ControlInput),
        params: VehicleParams,
        ts: f64,
        cfg: MpcConfig,
        settings: QpSettings,
    ) -> Result<Self> {
        let linearization = linearize(&trim.0, &trim.1, &params, ts, DEFAULT_FD_STEP)?;
        let condenser = Condenser::new(PredictorModel::from_linearization(&linearization), cfg)?;
        Ok(Self { params, ts, relinearize: false, linearization, mpc: MpcSolver::new(condenser, settings) })
    }
}

impl Controller for LinearMpc {
    fn name(&self) -> &str {
        "linear"
    }

    fn config(&self) -> &MpcConfig {
        &self.mpc.condenser.cfg
    }

    fn control(&mut self, x: &VehicleState, u_prev: &ControlInput, refs: &[[f64; 3]]) -> Result<MpcStep> {
        if self.relinearize {
            self.linearization = linearize(x, u_prev, &self.params, self.ts, DEFAULT_FD_STEP)?;
            let cfg = self.mpc.condenser.cfg.clone();
            self.mpc.condenser = Condenser::new(PredictorModel::from_linearization(&self.linearization), cfg)?;
        }
        let z0 = DVector::from_column_slice(&x.as_array());
        self.mpc.solve(&z0, u_prev, refs)
    }
}

/// Constant or ramped reference. Outputs marked unreferenced are logged empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub start: [f64; 3],
    pub rate: [f64; 3],
    /// Time after which the ramp holds its value.
    pub ramp_until: f64,
    pub referenced: [bool; 3],
    /// Supply future reference values over the horizon instead of holding the current one.
    pub preview: bool,
}

impl Reference {
    pub fn constant(value: [f64; 3]) -> Self {
        Self { start: value, rate: [0.0; 3], ramp_until: 0.0, referenced: [true; 3], preview: false }
    }

    pub fn value(&self, t: f64) -> [f64; 3] {
        let tau = t.clamp(0.0, self.ramp_until.max(0.0));
        [0, 1, 2].map(|p| self.start[p] + self.rate[p] * tau)
    }

    pub fn logged(&self, t: f64) -> [Option<f64>; 3] {
        let v = self.value(t);
        [0, 1, 2].map(|p| self.referenced[p].then_some(v[p]))
    }

    pub fn horizon(&self, t: f64, ts: f64, n: usize) -> Vec<[f64; 3]> {
        (0..=n).map(|m| self.value(if self.preview { t + m as f64 * ts } else { t })).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: VehicleState,
    /// Input applied from this sample on; absent on the final row.
    pub input: Option<ControlInput>,
    pub reference: [Option<f64>; 3],
    pub slack_max: Option<f64>,
    pub qp_status: Option<QpStatus>,
    pub qp_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub controller: String,
    pub ts: f64,
    pub rows: Vec<LogRow>,
    /// Reason the run stopped before `T_sim`, if it did.
    pub termination: Option<String>,
}

impl ClosedLoopLog {
    pub fn states(&self) -> Vec<VehicleState> {
        self.rows.iter().map(|r| r.state).collect()
    }

    pub fn inputs(&self) -> Vec<ControlInput> {
        self.rows.iter().filter_map(|r| r.input).collect()
    }

    /// Largest absolute difference between the logged states and an
    /// open-loop replay of the logged inputs.
    pub fn replay_mismatch(&self, plant: &VehicleParams) -> Result<f64> {
        let mut x = self.rows.first().ok_or_else(|| invalid("empty log"))?.state;
        let mut worst = 0.0_f64;
        for w in self.rows.windows(2) {
            let u = w[0].input.ok_or_else(|| invalid("log row without input before the end"))?;
            x = step(&x, &u, plant, self.ts)?;
            let (a, b) = (x.as_array(), w[1].state.as_array());
            for i in 0..3 {
                worst = worst.max((a[i] - b[i]).abs());
            }
        }
        Ok(worst)
    }

    /// Largest hard-constraint violation over all applied inputs, starting from a zero input.
    pub fn hard_violation(&self, cfg: &MpcConfig) -> f64 {
        let mut prev = ControlInput::ZERO;
        let mut worst = 0.0_f64;
        for u in self.inputs() {
            worst = worst.max(cfg.hard_violation(&u, &prev));
            prev = u;
        }
        worst
    }
}

/// Alternates controller and plant steps for `t_sim` seconds from `x0`.
/// A plant error ends the run early with the reason recorded.
pub fn simulate_closed_loop(
    plant: &VehicleParams,
    controller: &mut dyn Controller,
    x0: VehicleState,
    reference: &Reference,
    t_sim: f64,
    ts: f64,
) -> Result<ClosedLoopLog> {
    if !(ts.is_finite() && ts > 0.0 && t_sim.is_finite() && t_sim > 0.0) {
        return Err(invalid("simulation time and step must be positive"));
    }
    let steps = (t_sim / ts).round() as usize;
    if ((steps as f64) * ts - t_sim).abs() > 1e-9 * t_sim {
        return Err(invalid(format!("simulation time {t_sim} is not a multiple of the step {ts}")));
    }
    let n = controller.config().horizon;
    let mut rows = Vec::with_capacity(steps + 1);
    let mut x = x0;
    let mut u_prev = ControlInput::ZERO;
    let mut termination = None;
    for k in 0..steps {
        let t = k as f64 * ts;
        let refs = reference.horizon(t, ts, n);
        let out = match controller.control(&x, &u_prev, &refs) {
            Ok(out) => out,
            Err(e) => {
                termination = Some(format!("controller failed at t = {t}: {e}"));
                break;
            }
        };
        let violation = controller.config().hard_violation(&out.input, &u_prev);
        assert!(violation == 0.0, "hard input constraint violated by {violation:e} at t = {t}");
        let next = step(&x, &out.input, plant, ts);
        rows.push(LogRow {
            t,
            state: x,
            input: Some(out.input),
            reference: reference.logged(t),
            slack_max: Some(out.slack_max),
            qp_status: Some(out.status),
            qp_iters: Some(out.iterations),
        });
        match next {
            Ok(s) => {
                x = s;
                u_prev = out.input;
            }
            Err(e) => {
                rows.pop();
                termination = Some(format!("plant stopped at t = {t}: {e}"));
                break;
            }
        }
    }
    let t_end = rows.len() as f64 * ts;
    rows.push(LogRow {
        t: t_end,
        state: x,
        input: None,
        reference: reference.logged(t_end),
        slack_max: None,
        qp_status: None,
        qp_iters: None,
    });
    Ok(ClosedLoopLog { controller: controller.name().to_string(), ts, rows, termination })
}

pub const LOG_CSV_HEADER: &str =
    "t,vx,vy,yaw_rate,kappa_f,kappa_r,delta_f,delta_r,ref_vx,ref_vy,ref_yaw_rate,slack_max,qp_status,qp_iters";

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn format_log_csv(log: &ClosedLoopLog) -> String {
    let mut out = String::from(LOG_CSV_HEADER);
    out.push('\n');
    for r in &log.rows {
        let mut fields = vec![fmt_f64(r.t)];
        fields.extend(r.state.as_array().map(fmt_f64));
        match r.input {
            Some(u) => fields.extend(u.as_array().map(fmt_f64)),
            None => fields.extend(std::iter::repeat_n(String::new(), 4)),
        }
        fields.extend(r.reference.map(opt_f64));
        fields.push(opt_f64(r.slack_max));
        fields.push(r.qp_status.map(|s| s.name().to_string()).unwrap_or_default());
        fields.push(r.qp_iters.map(|i| i.to_string()).unwrap_or_default());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Parses rows written by [`format_log_csv`].
pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_CSV_HEADER) {
        return Err(Error::Format("unexpected closed-loop CSV header".into()));
    }
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { parse_f64(s).map(Some) } };
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(Error::Format(format!("row {}: expected 14 fields, got {}", i + 1, f.len())));
            }
            let input = if f[4..8].iter().all(|s| s.is_empty()) {
                None
            } else {
                let v = f[4..8].iter().map(|s| parse_f64(s)).collect::<Result<Vec<f64>>>()?;
                Some(ControlInput::from_slice(&v))
            };
            Ok(LogRow {
                t: parse_f64(f[0])?,
                state: VehicleState::new(parse_f64(f[1])?, parse_f64(f[2])?, parse_f64(f[3])?),
                input,
                reference: [opt(f[8])?, opt(f[9])?, opt(f[10])?],
                slack_max: opt(f[11])?,
                qp_status: if f[12].is_empty() { None } else { Some(QpStatus::from_name(f[12])?) },
                qp_iters: if f[13].is_empty() {
                    None
                } else {
                    Some(f[13].parse().map_err(|_| Error::Format(format!("row {}: bad iteration count", i + 1)))?)
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::{EigenvalueSet, LiftTable};

    fn scalar_like_model(a: f64, b: f64) -> PredictorModel {
        // Three decoupled copies of x⁺ = a x + b u₂.
        let mut bm = DMatrix::zeros(3, 4);
        for p in 0..3 {
            bm[(p, 1)] = b;
        }
        PredictorModel::new(DMatrix::identity(3, 3) * a, bm, DMatrix::identity(3, 3), DVector::zeros(3)).unwrap()
    }

    fn unconstrained_cfg(horizon: usize) -> MpcConfig {
        MpcConfig {
            horizon,
            y_min: Vector3::repeat(f64::NEG_INFINITY),
            y_max: Vector3::repeat(f64::INFINITY),
            u_min: Vector4::new(0.0, -100.0, 0.0, 0.0),
            u_max: Vector4::new(0.0, 100.0, 0.0, 0.0),
            du_min: Vector4::new(0.0, -100.0, 0.0, 0.0),
            du_max: Vector4::new(0.0, 100.0, 0.0, 0.0),
            ..MpcConfig::default()
        }
    }

    #[test]
    fn default_cost_matrices() {
        let cfg = MpcConfig::default();
        assert_eq!(cfg.r, Matrix4::from_diagonal(&Vector4::new(0.0, 100.0, 30.0, 0.0)));
        assert_eq!(cfg.qy, Matrix3::identity());
        assert_eq!(cfg.s, Matrix3::identity() * 1e5);
        assert_eq!(cfg.free_slots(), vec![1, 2]);
        assert_eq!(cfg.horizon, 10);
    }

    #[test]
    fn one_step_matches_lq_solution() {
        let (a, b, x0, r) = (0.9, 0.5, 2.0, 3.0);
        let model = scalar_like_model(a, b);
        let mut cfg = unconstrained_cfg(1);
        cfg.r = Matrix4::from_diagonal(&Vector4::new(0.0, 0.7, 0.0, 0.0));
        let cond = Condenser::new(model, cfg).unwrap();
        let z0 = DVector::from_element(3, x0);
        let qp = cond.condense(&z0, &ControlInput::ZERO, &[[r; 3], [r; 3]]).unwrap();
        let sol = crate::qp::solve(&qp, &QpSettings::default()).unwrap();
        // min Σ_p (a x0 + b u − r)² + 0.7 u²
        let u_star = 3.0 * b * (r - a * x0) / (3.0 * b * b + 0.7);
        assert!((cond.input_at(&sol.w, 0).kappa_r - u_star).abs() < 1e-6);
    }

    #[test]
    fn free_response_reference_needs_no_input() {
        let model = scalar_like_model(0.95, 1.0);
        let cfg = MpcConfig { u_min: Vector4::new(0.0, -1.0, -0.45, 0.0), ..unconstrained_cfg(10) };
        let cfg = MpcConfig { u_max: Vector4::new(0.0, 1.0, 0.45, 0.0), y_min: -Vector3::repeat(50.0), y_max: Vector3::repeat(50.0), ..cfg };
        let cond = Condenser::new(model.clone(), cfg).unwrap();
        let z0 = DVector::from_vec(vec![10.0, -1.0, 0.5]);
        let refs: Vec<[f64; 3]> = (0..=10).map(|m| [0, 1, 2].map(|p| 0.95f64.powi(m) * z0[p])).collect();
        let qp = cond.condense(&z0, &ControlInput::ZERO, &refs).unwrap();
        let sol = crate::qp::solve(&qp, &QpSettings::default()).unwrap();
        assert!(sol.w.amax() < 1e-6, "{}", sol.w.amax());
    }

    #[test]
    fn condensed_prediction_matches_simulation() {
        let model = PredictorModel::new(
            DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, 0.0, 0.8, 0.2, 0.1, 0.0, 0.7]),
            DMatrix::from_fn(3, 4, |r, c| (r + 2 * c) as f64 * 0.1),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0]),
            DVector::from_vec(vec![0.1, -0.2, 0.05]),
        )
        .unwrap();
        let cond = Condenser::new(model.clone(), MpcConfig { horizon: 4, ..MpcConfig::default() }).unwrap();
        let z0 = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let v = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.1, 0.5, -0.2, 0.0, 0.3]);
        let y = cond.predicted_outputs(&z0, &v);
        let mut z = z0.clone();
        for m in 0..=4 {
            let expect = &model.c * &z;
            assert!((y.rows(3 * m, 3) - &expect).amax() < 1e-12);
            if m < 4 {
                let u = DVector::from_vec(vec![0.0, v[2 * m], v[2 * m + 1], 0.0]);
                z = &model.a * &z + &model.b * u + &model.offset;
            }
        }
    }

    #[test]
    fn slacks_vanish_when_outputs_stay_inside_bounds() {
        let model = scalar_like_model(0.99, 0.1);
        let cond = Condenser::new(model, MpcConfig { y_min: -Vector3::repeat(25.0), y_max: Vector3::repeat(25.0), ..MpcConfig::default() }).unwrap();
        let z0 = DVector::from_element(3, 1.0);
        let qp = cond.condense(&z0, &ControlInput::ZERO, &vec![[1.5; 3]; 11]).unwrap();
        let sol = crate::qp::solve(&qp, &QpSettings::default()).unwrap();
        assert!(cond.slacks(&sol.w).amax() <= 1e-6);
    }

    #[test]
    fn condense_checks_lengths() {
        let cond = Condenser::new(scalar_like_model(0.9, 1.0), MpcConfig::default()).unwrap();
        assert!(cond.condense(&DVector::zeros(3), &ControlInput::ZERO, &[[0.0; 3]; 3]).is_err());
        assert!(cond.condense(&DVector::zeros(4), &ControlInput::ZERO, &[[0.0; 3]; 11]).is_err());
    }

    #[test]
    fn clipping_respects_bounds_and_rates() {
        let cfg = MpcConfig::default();
        let prev = ControlInput::new(0.0, 0.95, -0.2, 0.0);
        let u = cfg.clip_input(&ControlInput::new(0.3, 2.0, -3.0, -0.1), &prev);
        assert_eq!(u.kappa_f, 0.0);
        assert_eq!(u.delta_r, 0.0);
        assert_eq!(u.kappa_r, 1.0);
        assert_eq!(u.delta_f, -0.45);
        assert_eq!(cfg.hard_violation(&u, &prev), 0.0);
        assert!(cfg.hard_violation(&ControlInput::new(0.0, 0.5, 0.0, 0.0), &ControlInput::ZERO) > 0.39);
    }

    #[test]
    fn config_from_keys() {
        let kv = KeyValues::parse("r_diag = 0, 1, 2, 0\nhorizon = 5\n").unwrap();
        let cfg = MpcConfig::from_key_values(&kv).unwrap();
        assert_eq!(cfg.horizon, 5);
        assert_eq!(cfg.r[(2, 2)], 2.0);
        assert!(MpcConfig::from_key_values(&KeyValues::parse("qy_diag = -1, 1, 1").unwrap()).is_err());
        assert!(MpcConfig::from_key_values(&KeyValues::parse("u_min = 0, 2, 0, 0").unwrap()).is_err());
    }

    struct Zero(MpcConfig);

    impl Controller for Zero {
        fn name(&self) -> &str {
            "zero"
        }
        fn config(&self) -> &MpcConfig {
            &self.0
        }
        fn control(&mut self, _: &VehicleState, _: &ControlInput, _: &[[f64; 3]]) -> Result<MpcStep> {
            Ok(MpcStep { input: ControlInput::ZERO, status: QpStatus::Optimal, iterations: 0, slack_max: 0.0 })
        }
    }

    #[test]
    fn zero_controller_gives_straight_deceleration() {
        let p = VehicleParams::default();
        let log = simulate_closed_loop(&p, &mut Zero(MpcConfig::default()), VehicleState::new(20.0, 0.0, 0.0), &Reference::constant([20.0, 0.0, 0.0]), 1.0, 0.01).unwrap();
        assert_eq!(log.rows.len(), 101);
        assert!(log.termination.is_none());
        assert!(log.rows.windows(2).all(|w| w[1].state.vx < w[0].state.vx));
        assert!(log.rows.iter().all(|r| r.state.vy == 0.0 && r.state.yaw_rate == 0.0));
        assert_eq!(log.replay_mismatch(&p).unwrap(), 0.0);
    }

    #[test]
    fn guard_trip_ends_the_run() {
        let p = VehicleParams::default();
        let log = simulate_closed_loop(&p, &mut Zero(MpcConfig::default()), VehicleState::new(0.6, -8.0, 3.0), &Reference::constant([10.0, 0.0, 0.0]), 1.0, 0.01).unwrap();
        assert!(log.termination.is_some());
        assert!(log.rows.len() < 101);
        assert!(log.rows.last().unwrap().input.is_none());
    }

    #[test]
    fn reference_ramp_and_preview() {
        let r = Reference { start: [16.7, 0.0, 0.0], rate: [0.0, 0.0, 0.05], ramp_until: 10.0, referenced: [true, false, true], preview: true };
        assert_eq!(r.logged(0.0), [Some(16.7), None, Some(0.0)]);
        assert!((r.value(20.0)[2] - 0.5).abs() < 1e-15);
        let h = r.horizon(1.0, 0.01, 10);
        assert_eq!(h.len(), 11);
        assert!((h[10][2] - 0.055).abs() < 1e-12);
        let held = Reference { preview: false, ..r };
        assert!(held.horizon(1.0, 0.01, 10).iter().all(|v| v[2] == 0.05));
    }

    #[test]
    fn linear_mpc_at_trim_holds_still() {
        let p = VehicleParams::default();
        let trim = VehicleState::new(16.7, 0.0, 0.0);
        let mut c = LinearMpc::new((trim, ControlInput::ZERO), p.clone(), 0.01, MpcConfig::default(), QpSettings::default()).unwrap();
        let lin = c.linearization.clone();
        let refs: Vec<[f64; 3]> = {
            let mut x = trim.to_vector();
            let mut out = vec![x.into()];
            for _ in 0..10 {
                x = lin.predict(&x, &Vector4::zeros());
                out.push(x.into());
            }
            out
        };
        let out = c.control(&trim, &ControlInput::ZERO, &refs).unwrap();
        assert!(out.input.to_vector().amax() < 1e-4, "{:?}", out.input);
    }

    #[test]
    fn linear_mpc_steers_negative_for_large_negative_lateral_error() {
        let p = VehicleParams::default();
        let trim = VehicleState::new(16.7, 0.0, 0.0);
        let mut c = LinearMpc::new((trim, ControlInput::ZERO), p, 0.01, MpcConfig::default(), QpSettings::default()).unwrap();
        // error r − y = 0 − 10 on the lateral velocity
        let out = c.control(&VehicleState::new(16.7, 10.0, 0.0), &ControlInput::ZERO, &[[16.7, 0.0, 0.0]; 11]).unwrap();
        assert!(out.input.delta_f < 0.0, "{:?}", out.input);
    }

    #[test]
    fn koopman_mpc_respects_default_bounds() {
        let e = EigenvalueSet::new(vec![1.0, 0.9]).unwrap();
        let b = DMatrix::from_fn(6, 4, |r, c| ((r * 4 + c) as f64).sin());
        let table = LiftTable {
            points: vec![[16.7, 0.0, 0.0], [10.0, 3.0, 0.2]],
            vectors: vec![16.7, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0, 1.0, 2.0, 1.0, 0.1, 0.1],
            dim: 6,
            offsets: vec![0, 2],
        };
        let model = KoopmanModel::new(e, b, table, 0.01, 2).unwrap();
        let mut c = KoopmanMpc::new(model, MpcConfig::default(), QpSettings::default()).unwrap();
        let mut prev = ControlInput::ZERO;
        for k in 0..20 {
            let x = VehicleState::new(12.0 + 0.1 * k as f64, 2.0, 0.1);
            let out = c.control(&x, &prev, &[[16.7, 0.0, 0.5]; 11]).unwrap();
            assert_eq!(c.config().hard_violation(&out.input, &prev), 0.0);
            assert_eq!(out.input.kappa_f, 0.0);
            assert_eq!(out.input.delta_r, 0.0);
            prev = out.input;
        }
    }

    #[test]
    fn koopman_mpc_at_stored_point_with_matching_reference_is_idle() {
        let e = EigenvalueSet::new(vec![1.0, 0.9]).unwrap();
        let b = DMatrix::from_fn(6, 4, |r, c| 0.01 * (r + c) as f64);
        let table = LiftTable {
            points: vec![[16.7, 0.5, 0.2], [10.0, 3.0, 0.2]],
            vectors: vec![16.0, 0.7, 0.4, 0.1, 0.15, 0.05, 9.0, 1.0, 2.0, 1.0, 0.1, 0.1],
            dim: 6,
            offsets: vec![0, 2],
        };
        let model = KoopmanModel::new(e, b, table, 0.01, 2).unwrap();
        let x = VehicleState::new(16.7, 0.5, 0.2);
        let z0 = model.lift(&x).unwrap();
        let mut z = z0.clone();
        let mut refs = Vec::new();
        for _ in 0..=10 {
            let y = model.output(&z);
            refs.push([y[0], y[1], y[2]]);
            z = model.advance(&z, &ControlInput::ZERO);
        }
        let mut c = KoopmanMpc::new(model, MpcConfig::default(), QpSettings::default()).unwrap();
        let out = c.control(&x, &ControlInput::ZERO, &refs).unwrap();
        assert!(out.input.to_vector().norm() <= 1e-4, "{:?}", out.input);
        assert!(out.slack_max <= 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn clipped_inputs_satisfy_hard_bounds(
            u in proptest::array::uniform4(-5.0f64..5.0),
            k in -1.0f64..1.0,
            d in -0.45f64..0.45,
        ) {
            let cfg = MpcConfig::default();
            let prev = ControlInput::new(0.0, k, d, 0.0);
            let out = cfg.clip_input(&ControlInput::from_slice(&u), &prev);
            proptest::prop_assert_eq!(cfg.hard_violation(&out, &prev), 0.0);
            proptest::prop_assert_eq!(out.kappa_f, 0.0);
            proptest::prop_assert_eq!(out.delta_r, 0.0);
        }
    }

    #[test]
    fn exact_linear_plant_tracks_constant_reference() {
        // Plant and predictor are both z⁺ = A z + B u with y = C z.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.9, 0.95, 0.8, 0.99, 0.7]));
        let b = DMatrix::from_row_slice(6, 4, &[
            0.0, 0.02, 0.01, 0.0, 0.0, 0.01, 0.0, 0.0,
            0.0, 0.0, 0.05, 0.0, 0.0, 0.01, 0.02, 0.0,
            0.0, 0.03, 0.04, 0.0, 0.0, 0.0, 0.01, 0.0,
        ]);
        let c = DMatrix::from_row_slice(3, 6, &[
            1.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 1.0, 1.0,
        ]);
        let model = PredictorModel::new(a.clone(), b.clone(), c.clone(), DVector::zeros(6)).unwrap();
        let cfg = MpcConfig {
            r: Matrix4::from_diagonal(&Vector4::new(0.0, 1e-3, 1e-3, 0.0)),
            qy: Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)),
            ..MpcConfig::default()
        };
        let cond = Condenser::new(model, cfg).unwrap();
        let mut mpc = MpcSolver::new(cond, QpSettings::default());
        let mut z = DVector::from_vec(vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut prev = ControlInput::ZERO;
        let target = 10.3;
        for _ in 0..3000 {
            let out = mpc.solve(&z, &prev, &[[target, 0.0, 0.0]; 11]).unwrap();
            z = &a * &z + &b * out.input.to_vector();
            prev = out.input;
        }
        let y = &c * &z;
        assert!((y[0] - target).abs() <= 1e-3, "steady-state output {}", y[0]);
    }

    #[test]
    fn warm_and_cold_plans_agree() {
        let p = VehicleParams::default();
        let trim = VehicleState::new(16.7, 0.0, 0.0);
        let mut warm = LinearMpc::new((trim, ControlInput::ZERO), p.clone(), 0.01, MpcConfig::default(), QpSettings::default()).unwrap();
        let mut cold = warm.clone();
        cold.mpc.warm_start = false;
        let mut prev = ControlInput::ZERO;
        let mut x = VehicleState::new(15.0, 1.0, 0.2);
        for _ in 0..30 {
            let a = warm.control(&x, &prev, &[[16.7, 0.0, 0.3]; 11]).unwrap();
            let b = cold.control(&x, &prev, &[[16.7, 0.0, 0.3]; 11]).unwrap();
            assert!((a.input.to_vector() - b.input.to_vector()).amax() < 1e-5);
            x = step(&x, &a.input, &p, 0.01).unwrap();
            prev = a.input;
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = VehicleParams::default();
        let trim = VehicleState::new(16.7, 0.0, 0.0);
        let mut c = LinearMpc::new((trim, ControlInput::ZERO), p.clone(), 0.01, MpcConfig::default(), QpSettings::default()).unwrap();
        let r = Reference { start: [16.7, 0.0, 0.0], rate: [0.0, 0.0, 0.05], ramp_until: 10.0, referenced: [true, false, true], preview: true };
        let log = simulate_closed_loop(&p, &mut c, trim, &r, 0.2, 0.01).unwrap();
        let text = format_log_csv(&log);
        let rows = parse_log_csv(&text).unwrap();
        assert_eq!(rows, log.rows);
        let again = ClosedLoopLog { rows, ..log.clone() };
        assert_eq!(format_log_csv(&again), text);
        assert_eq!(log.replay_mismatch(&p).unwrap(), 0.0);
        assert!(text.lines().nth(1).unwrap().contains(",,"));
    }
}
