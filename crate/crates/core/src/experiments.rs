//! End-to-end pipeline presets, the identification report and the two
//! closed-loop scenarios (drift recovery and spiral tracking).

use crate::config::KeyValues;
use crate::dataset::{
    generate_controlled, generate_uncontrolled, reject_low_speed, sample_gamma, sample_interior, Dataset, DatasetKind,
    DatasetSpec, GammaSet, LOW_SPEED_REJECTION,
};
use crate::error::{invalid, Result};
use crate::koopman::{evaluate, Identification, IdentifyConfig, KoopmanModel};
use crate::mpc::{simulate_closed_loop, ClosedLoopLog, Controller, KoopmanMpc, LinearMpc, MpcConfig, Reference};
use crate::qp::QpSettings;
use crate::vehicle::{ControlInput, VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(invalid(format!("unknown scale `{other}`, expected desk or paper"))),
        }
    }
}

/// Number of start points of the `paper` scale preset.
pub const PAPER_START_COUNT: usize = 1078;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Koopman,
    Linear,
    Both,
}

impl ControllerKind {
    pub fn includes_koopman(self) -> bool {
        matches!(self, ControllerKind::Koopman | ControllerKind::Both)
    }

    pub fn includes_linear(self) -> bool {
        matches!(self, ControllerKind::Linear | ControllerKind::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub x0: VehicleState,
    pub reference: Reference,
    pub t_sim: f64,
    pub controllers: ControllerKind,
    /// Zero the output weight of every unreferenced output.
    pub zero_unreferenced_weight: bool,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_sim.is_finite() && self.t_sim > 0.0) {
            return Err(invalid(format!("scenario {}: T_sim must be positive", self.name)));
        }
        if !self.x0.is_finite() || self.x0.vx.abs() < crate::vehicle::LOW_SPEED_GUARD {
            return Err(invalid(format!("scenario {}: start state fails the low-speed guard", self.name)));
        }
        Ok(())
    }

    /// Controller weights with unreferenced outputs removed from the cost.
    pub fn mpc_config(&self, base: &MpcConfig) -> MpcConfig {
        let mut cfg = base.clone();
        if self.zero_unreferenced_weight {
            for p in (0..3).filter(|p| !self.reference.referenced[*p]) {
                cfg.qy.row_mut(p).fill(0.0);
                cfg.qy.column_mut(p).fill(0.0);
            }
        }
        cfg
    }
}

/// All settings of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub seed: u64,
    pub energy: f64,
    pub n_base: usize,
    pub densify_factor: f64,
    /// Cap on the number of start points, 0 for none.
    pub start_limit: usize,
    pub ts: f64,
    pub horizon_uncontrolled: f64,
    pub horizon_controlled: f64,
    pub vehicle: VehicleParams,
    pub identify: IdentifyConfig,
    pub heldout_count: usize,
    pub rejection_speed: f64,
    pub mpc: MpcConfig,
    pub qp: QpSettings,
    pub trim_state: VehicleState,
    pub drift: ScenarioSpec,
    pub spiral: ScenarioSpec,
}

const EXPERIMENT_KEYS: [&str; 20] = [
    "energy",
    "n_base",
    "densify_factor",
    "start_limit",
    "ts",
    "horizon_uncontrolled",
    "horizon_controlled",
    "heldout_count",
    "rejection_speed",
    "qp_eps_abs",
    "qp_eps_rel",
    "qp_max_iters",
    "trim_state",
    "drift_x0",
    "drift_t_sim",
    "spiral_x0",
    "spiral_vx_ref",
    "spiral_yaw_rate_slope",
    "spiral_t_sim",
    "spiral_zero_vy_weight",
];

fn drift_scenario(x0: [f64; 3], t_sim: f64) -> ScenarioSpec {
    ScenarioSpec {
        name: "drift".into(),
        x0: VehicleState::new(x0[0], x0[1], x0[2]),
        reference: Reference::constant([16.7, 0.0, 0.0]),
        t_sim,
        controllers: ControllerKind::Both,
        zero_unreferenced_weight: true,
    }
}

fn spiral_scenario(x0: [f64; 3], vx_ref: f64, slope: f64, t_sim: f64, zero_vy: bool) -> ScenarioSpec {
    ScenarioSpec {
        name: "spiral".into(),
        x0: VehicleState::new(x0[0], x0[1], x0[2]),
        reference: Reference {
            start: [vx_ref, 0.0, 0.0],
            rate: [0.0, 0.0, slope],
            ramp_until: t_sim,
            referenced: [true, false, true],
            preview: true,
        },
        t_sim,
        controllers: ControllerKind::Both,
        zero_unreferenced_weight: zero_vy,
    }
}

impl ExperimentConfig {
    pub fn preset(scale: Scale, seed: u64) -> Self {
        let mut cfg = Self {
            scale,
            seed,
            energy: 5e5,
            n_base: 200,
            densify_factor: 3.0,
            start_limit: 0,
            ts: 0.01,
            horizon_uncontrolled: 0.5,
            horizon_controlled: 0.1,
            vehicle: VehicleParams::default(),
            identify: IdentifyConfig::default(),
            heldout_count: 300,
            rejection_speed: LOW_SPEED_REJECTION,
            mpc: MpcConfig::default(),
            qp: QpSettings::default(),
            trim_state: VehicleState::new(16.7, 0.0, 0.0),
            drift: drift_scenario([2.0, -27.66, 0.0], 10.0),
            spiral: spiral_scenario([16.7, 0.0, 0.0], 16.7, 0.05, 10.0, true),
        };
        if scale == Scale::Paper {
            cfg.n_base = n_base_for_count(PAPER_START_COUNT, &cfg);
            cfg.start_limit = PAPER_START_COUNT;
        }
        cfg
    }

    /// Preset for `scale` with overrides from a key-value file. `n_base` at
    /// the `paper` scale is re-derived unless given explicitly.
    pub fn from_key_values(scale: Scale, seed: u64, kv: &KeyValues) -> Result<Self> {
        let vehicle_keys = KeyValues::parse(&VehicleParams::default().to_key_values())?;
        let mut known: Vec<&str> = EXPERIMENT_KEYS.to_vec();
        known.extend(IdentifyConfig::KEYS);
        known.extend(MpcConfig::KEYS);
        known.extend(vehicle_keys.keys());
        kv.reject_unknown(&known)?;

        let d = Self::preset(Scale::Desk, seed);
        let mut cfg = Self {
            scale,
            seed,
            energy: kv.f64_or("energy", d.energy)?,
            n_base: kv.usize_or("n_base", d.n_base)?,
            densify_factor: kv.f64_or("densify_factor", d.densify_factor)?,
            start_limit: kv.usize_or("start_limit", d.start_limit)?,
            ts: kv.f64_or("ts", d.ts)?,
            horizon_uncontrolled: kv.f64_or("horizon_uncontrolled", d.horizon_uncontrolled)?,
            horizon_controlled: kv.f64_or("horizon_controlled", d.horizon_controlled)?,
            vehicle: VehicleParams::from_key_values(kv)?,
            identify: IdentifyConfig::from_key_values(kv)?,
            heldout_count: kv.usize_or("heldout_count", d.heldout_count)?,
            rejection_speed: kv.f64_or("rejection_speed", d.rejection_speed)?,
            mpc: MpcConfig::from_key_values(kv)?,
            qp: QpSettings {
                eps_abs: kv.f64_or("qp_eps_abs", d.qp.eps_abs)?,
                eps_rel: kv.f64_or("qp_eps_rel", d.qp.eps_rel)?,
                max_iters: kv.usize_or("qp_max_iters", d.qp.max_iters)?,
                ..d.qp.clone()
            },
            trim_state: VehicleState::from_vector(&kv.array_or("trim_state", d.trim_state.as_array())?.into()),
            drift: drift_scenario(kv.array_or("drift_x0", d.drift.x0.as_array())?, kv.f64_or("drift_t_sim", d.drift.t_sim)?),
            spiral: spiral_scenario(
                kv.array_or("spiral_x0", d.spiral.x0.as_array())?,
                kv.f64_or("spiral_vx_ref", d.spiral.reference.start[0])?,
                kv.f64_or("spiral_yaw_rate_slope", d.spiral.reference.rate[2])?,
                kv.f64_or("spiral_t_sim", d.spiral.t_sim)?,
                kv.parsed_or("spiral_zero_vy_weight", d.spiral.zero_unreferenced_weight)?,
            ),
        };
        if scale == Scale::Paper && kv.get("n_base").is_none() {
            cfg.n_base = n_base_for_count(PAPER_START_COUNT, &cfg);
            if kv.get("start_limit").is_none() {
                cfg.start_limit = PAPER_START_COUNT;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.identify.validate()?;
        self.mpc.validate()?;
        self.drift.validate()?;
        self.spiral.validate()?;
        if self.heldout_count == 0 {
            return Err(invalid("heldout_count must be positive"));
        }
        if !(self.rejection_speed.is_finite() && self.rejection_speed >= 0.0) {
            return Err(invalid("rejection_speed must be non-negative"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self, kind: DatasetKind) -> DatasetSpec {
        DatasetSpec {
            kind,
            energy: self.energy,
            n_base: self.n_base,
            densify_factor: self.densify_factor,
            start_limit: self.start_limit,
            gamma_seed: self.seed,
            input_seed: self.seed.wrapping_add(1),
            ts: self.ts,
            horizon: match kind {
                DatasetKind::Uncontrolled => self.horizon_uncontrolled,
                DatasetKind::Controlled => self.horizon_controlled,
            },
            vehicle: self.vehicle.clone(),
        }
    }

    pub fn gamma(&self) -> Result<GammaSet> {
        let mut g = sample_gamma(self.energy, &self.vehicle, self.n_base, self.densify_factor, self.seed)?;
        if self.start_limit > 0 {
            g.points.truncate(self.start_limit);
        }
        Ok(g)
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        Ok((self.dataset_spec(DatasetKind::Uncontrolled).generate()?, self.dataset_spec(DatasetKind::Controlled).generate()?))
    }

    /// Held-out evaluation sets from fresh random starts inside the energy
    /// surface, with low-speed starts rejected.
    pub fn heldout_interior(&self) -> Result<(Dataset, Dataset)> {
        let g = GammaSet {
            points: sample_interior(self.energy, &self.vehicle, self.heldout_count, self.seed.wrapping_add(2))?,
            energy: self.energy,
        };
        self.heldout_from(&g)
    }

    /// Held-out evaluation sets from a differently seeded lattice on the surface.
    pub fn heldout_surface(&self) -> Result<(Dataset, Dataset)> {
        let mut g = sample_gamma(self.energy, &self.vehicle, self.heldout_count, 1.0, self.seed.wrapping_add(3))?;
        g.points.truncate(self.heldout_count);
        self.heldout_from(&g)
    }

    fn heldout_from(&self, g: &GammaSet) -> Result<(Dataset, Dataset)> {
        let unc = generate_uncontrolled(g, &self.vehicle, self.ts, self.horizon_uncontrolled)?;
        let ctl = generate_controlled(g, &self.vehicle, self.ts, self.horizon_controlled, self.seed.wrapping_add(4))?;
        Ok((reject_low_speed(&unc, self.rejection_speed), reject_low_speed(&ctl, self.rejection_speed)))
    }
}

/// Smallest lattice size whose densified start set reaches `target` points.
pub fn n_base_for_count(target: usize, cfg: &ExperimentConfig) -> usize {
    let count = |n: usize| {
        sample_gamma(cfg.energy, &cfg.vehicle, n, cfg.densify_factor, cfg.seed).map(|g| g.points.len()).unwrap_or(0)
    };
    let (mut lo, mut hi) = (1, target);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if count(mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub max: f64,
}

impl RmseStats {
    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(invalid("no trajectories to summarize"));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if s.len() % 2 == 1 { s[s.len() / 2] } else { 0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2]) };
        Ok(Self { count: v.len(), mean, std, median, max: s[s.len() - 1] })
    }

    fn line(&self, label: &str) -> String {
        format!(
            "{label}: n = {}, mean = {:.3}%, std = {:.3}%, median = {:.3}%, max = {:.3}%\n",
            self.count, self.mean, self.std, self.median, self.max
        )
    }
}

/// Prediction error of a model over the held-out sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub interior_uncontrolled: RmseStats,
    pub interior_controlled: RmseStats,
    pub surface_uncontrolled: RmseStats,
    pub surface_controlled: RmseStats,
}

pub fn evaluate_model(model: &KoopmanModel, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let (iu, ic) = cfg.heldout_interior()?;
    let (su, sc) = cfg.heldout_surface()?;
    Ok(Evaluation {
        interior_uncontrolled: RmseStats::from_values(&evaluate(model, &iu)?)?,
        interior_controlled: RmseStats::from_values(&evaluate(model, &ic)?)?,
        surface_uncontrolled: RmseStats::from_values(&evaluate(model, &su)?)?,
        surface_controlled: RmseStats::from_values(&evaluate(model, &sc)?)?,
    })
}

impl Evaluation {
    pub fn report(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.interior_uncontrolled.line("held-out interior, uncontrolled"));
        s.push_str(&self.interior_controlled.line("held-out interior, controlled"));
        s.push_str(&self.surface_uncontrolled.line("held-out surface, uncontrolled"));
        s.push_str(&self.surface_controlled.line("held-out surface, controlled"));
        s
    }
}

pub fn identify_report(id: &Identification, unc: &Dataset, ctl: &Dataset, eval: &Evaluation) -> String {
    let m = &id.model;
    let l = m.eigenvalues.as_slice();
    let (lmin, lmax) = l.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let mut s = String::new();
    s.push_str(&format!(
        "uncontrolled trajectories: {} ({} truncated, {} dropped)\n",
        unc.len(),
        unc.truncated_count(),
        unc.dropped
    ));
    s.push_str(&format!("controlled trajectories: {} ({} truncated, {} dropped)\n", ctl.len(), ctl.truncated_count(), ctl.dropped));
    s.push_str(&format!("eigenvalues: {} in [{lmin:.6}, {lmax:.6}]\n", l.len()));
    s.push_str(&format!("lifted dimension: {}\n", m.lifted_dim()));
    s.push_str(&format!("lift table samples: {}, neighbors: {}\n", m.lift_table.len(), m.k_neighbors));
    s.push_str(&format!("g fit objective: {:.6e}\n", id.g_objective));
    s.push_str(&format!(
        "B fit: rank {} of {}, condition {:.3e}, objective {:.6e} (B = 0: {:.6e})\n",
        id.b_fit.rank, id.b_fit.columns, id.b_fit.condition, id.b_fit.objective, id.b_fit.objective_zero
    ));
    s.push_str(&eval.report());
    s
}

/// One controller's run of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub controller: String,
    pub outcome: std::result::Result<ClosedLoopLog, String>,
}

pub fn run_scenario(spec: &ScenarioSpec, model: Option<&KoopmanModel>, cfg: &ExperimentConfig) -> Result<Vec<ScenarioRun>> {
    spec.validate()?;
    let mpc = spec.mpc_config(&cfg.mpc);
    let mut runs = Vec::new();
    if spec.controllers.includes_koopman() {
        let model = model.ok_or_else(|| invalid("the Koopman controller needs a model"))?;
        let outcome = KoopmanMpc::new(model.clone(), mpc.clone(), cfg.qp.clone())
            .and_then(|mut c| simulate_closed_loop(&cfg.vehicle, &mut c as &mut dyn Controller, spec.x0, &spec.reference, spec.t_sim, cfg.ts))
            .map_err(|e| e.to_string());
        runs.push(ScenarioRun { controller: "koopman".into(), outcome });
    }
    if spec.controllers.includes_linear() {
        let outcome = LinearMpc::new((cfg.trim_state, ControlInput::ZERO), cfg.vehicle.clone(), cfg.ts, mpc.clone(), cfg.qp.clone())
            .and_then(|mut c| simulate_closed_loop(&cfg.vehicle, &mut c as &mut dyn Controller, spec.x0, &spec.reference, spec.t_sim, cfg.ts))
            .map_err(|e| e.to_string());
        runs.push(ScenarioRun { controller: "linear".into(), outcome });
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftMetrics {
    /// First time with `|vy| ≤ 0.5`.
    pub time_to_vy: Option<f64>,
    /// First time after which `|vy| ≤ 0.5` holds to the end of the run.
    pub settle_vy: Option<f64>,
    /// First time with `|vx − vx_ref| ≤ 1`.
    pub time_to_vx: Option<f64>,
    pub initial_steering: f64,
    pub hard_violation: f64,
    pub termination: Option<String>,
}

pub const DRIFT_VY_BAND: f64 = 0.5;
pub const DRIFT_VX_BAND: f64 = 1.0;

pub fn drift_metrics(log: &ClosedLoopLog, vx_ref: f64, mpc: &MpcConfig) -> DriftMetrics {
    let first = |pred: &dyn Fn(&VehicleState) -> bool| log.rows.iter().find(|r| pred(&r.state)).map(|r| r.t);
    let inside = |s: &VehicleState| s.vy.abs() <= DRIFT_VY_BAND;
    let settle_vy = match log.rows.iter().rposition(|r| !inside(&r.state)) {
        None => log.rows.first().map(|r| r.t),
        Some(i) => log.rows.get(i + 1).map(|r| r.t),
    };
    DriftMetrics {
        time_to_vy: first(&inside),
        settle_vy,
        time_to_vx: first(&|s: &VehicleState| (s.vx - vx_ref).abs() <= DRIFT_VX_BAND),
        initial_steering: log.rows.first().and_then(|r| r.input).map(|u| u.delta_f).unwrap_or(0.0),
        hard_violation: log.hard_violation(mpc),
        termination: log.termination.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingMetrics {
    /// Root-mean-square tracking error per output; `None` for unreferenced outputs.
    pub rmse: [Option<f64>; 3],
    /// Yaw-rate error at the final sample.
    pub final_yaw_rate_error: f64,
    pub hard_violation: f64,
    pub termination: Option<String>,
}

pub fn tracking_metrics(log: &ClosedLoopLog, mpc: &MpcConfig) -> TrackingMetrics {
    let rmse = [0, 1, 2].map(|p| {
        let errs: Vec<f64> =
            log.rows.iter().filter_map(|r| r.reference[p].map(|v| r.state.as_array()[p] - v)).collect();
        (!errs.is_empty()).then(|| (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt())
    });
    let last = log.rows.last();
    TrackingMetrics {
        rmse,
        final_yaw_rate_error: last.and_then(|r| r.reference[2].map(|v| r.state.yaw_rate - v)).unwrap_or(f64::NAN),
        hard_violation: log.hard_violation(mpc),
        termination: log.termination.clone(),
    }
}

fn opt_time(t: Option<f64>) -> String {
    t.map(|v| format!("{v:.2}")).unwrap_or_else(|| "never".into())
}

fn sign_name(v: f64) -> &'static str {
    if v > 0.0 {
        "positive"
    } else if v < 0.0 {
        "negative"
    } else {
        "zero"
    }
}

pub fn drift_report(spec: &ScenarioSpec, runs: &[ScenarioRun], cfg: &ExperimentConfig) -> String {
    let mpc = spec.mpc_config(&cfg.mpc);
    let mut s = format!(
        "scenario: {}\nx0 = ({}, {}, {})\nreference = ({}, {}, {})\nT_sim = {}\n",
        spec.name, spec.x0.vx, spec.x0.vy, spec.x0.yaw_rate, spec.reference.start[0], spec.reference.start[1], spec.reference.start[2], spec.t_sim
    );
    let mut signs = Vec::new();
    for run in runs {
        match &run.outcome {
            Ok(log) => {
                let m = drift_metrics(log, spec.reference.start[0], &mpc);
                signs.push(m.initial_steering);
                s.push_str(&format!(
                    "{}: time to |vy| <= {DRIFT_VY_BAND}: {}, settled: {}, time to |vx - ref| <= {DRIFT_VX_BAND}: {}, initial steering {:.6} ({}), hard violation {:.3e}, termination: {}\n",
                    run.controller,
                    opt_time(m.time_to_vy),
                    opt_time(m.settle_vy),
                    opt_time(m.time_to_vx),
                    m.initial_steering,
                    sign_name(m.initial_steering),
                    m.hard_violation,
                    m.termination.as_deref().unwrap_or("none")
                ));
            }
            Err(e) => s.push_str(&format!("{}: failed: {e}\n", run.controller)),
        }
    }
    if signs.len() == 2 {
        s.push_str(&format!("initial steering opposite: {}\n", signs[0] * signs[1] < 0.0));
    }
    s
}

pub fn spiral_report(spec: &ScenarioSpec, runs: &[ScenarioRun], cfg: &ExperimentConfig) -> String {
    let mpc = spec.mpc_config(&cfg.mpc);
    let mut s = format!(
        "scenario: {}\nx0 = ({}, {}, {})\nvx reference = {}, yaw-rate ramp = {} rad/s^2, T_sim = {}\n",
        spec.name, spec.x0.vx, spec.x0.vy, spec.x0.yaw_rate, spec.reference.start[0], spec.reference.rate[2], spec.t_sim
    );
    let name = ["vx", "vy", "yaw_rate"];
    for run in runs {
        match &run.outcome {
            Ok(log) => {
                let m = tracking_metrics(log, &mpc);
                let parts: Vec<String> =
                    (0..3).filter_map(|p| m.rmse[p].map(|v| format!("{} rmse {v:.6}", name[p]))).collect();
                s.push_str(&format!(
                    "{}: {}, final yaw-rate error {:.6}, hard violation {:.3e}, termination: {}\n",
                    run.controller,
                    parts.join(", "),
                    m.final_yaw_rate_error,
                    m.hard_violation,
                    m.termination.as_deref().unwrap_or("none")
                ));
            }
            Err(e) => s.push_str(&format!("{}: failed: {e}\n", run.controller)),
        }
    }
    s
}
