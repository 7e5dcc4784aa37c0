//! Identification data: start points on a constant-kinetic-energy surface,
//! uncontrolled and randomly-excited rollouts of the plant, and their file
//! formats.
//!
//! The start-point set (Γ) is the forward half (`vx ≥ 0`) of the ellipsoid
//! `½m(vx² + vy²) + ½J ψ̇² = E`. Points are laid out on a Fibonacci lattice
//! over the unit hemisphere and mapped onto the ellipsoid, so the energy
//! constraint holds by construction. The sideways-sliding region
//! `|vy| > |vx|` gets extra random points because trajectories leave it fast.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, parse_f64, BinReader, BinWriter};
use crate::vehicle::{step, ControlInput, VehicleParams, VehicleState};

/// Start points on the constant-energy surface.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSet {
    pub points: Vec<VehicleState>,
    /// Kinetic energy shared by all points (J).
    pub energy: f64,
}

/// Semi-axes `(velocity, yaw rate)` of the energy ellipsoid.
fn ellipsoid_axes(energy: f64, p: &VehicleParams) -> (f64, f64) {
    ((2.0 * energy / p.mass).sqrt(), (2.0 * energy / p.yaw_inertia).sqrt())
}

fn in_sliding_region(ux: f64, uy: f64) -> bool {
    uy.abs() > ux.abs()
}

/// Samples the forward half of the energy surface.
///
/// `n_base` points come from a Fibonacci lattice with a seeded azimuth
/// offset. For every lattice point with `|vy| > |vx|`, `densify_factor - 1`
/// further uniform random points from that region are added (rounded).
pub fn sample_gamma(energy: f64, p: &VehicleParams, n_base: usize, densify_factor: f64, seed: u64) -> Result<GammaSet> {
    if !(energy.is_finite() && energy > 0.0) {
        return Err(invalid(format!("kinetic energy must be positive, got {energy}")));
    }
    if n_base == 0 {
        return Err(invalid("n_base must be at least 1"));
    }
    if !(densify_factor.is_finite() && densify_factor >= 1.0) {
        return Err(invalid(format!("densify_factor must be >= 1, got {densify_factor}")));
    }
    let (a, b) = ellipsoid_axes(energy, p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen::<f64>() * 2.0 * PI;
    let golden = PI * (3.0 - 5.0_f64.sqrt());

    let mut unit = Vec::with_capacity(n_base);
    for i in 0..n_base {
        // Equal-area slices along the vx axis.
        let ux = (i as f64 + 0.5) / n_base as f64;
        let ring = (1.0 - ux * ux).sqrt();
        let phi = offset + golden * i as f64;
        unit.push([ux, ring * phi.cos(), ring * phi.sin()]);
    }

    let in_region = unit.iter().filter(|u| in_sliding_region(u[0], u[1])).count();
    let extra = ((densify_factor - 1.0) * in_region as f64).round() as usize;
    let mut added = 0;
    while added < extra {
        let u = random_unit_hemisphere(&mut rng);
        if in_sliding_region(u[0], u[1]) {
            unit.push(u);
            added += 1;
        }
    }

    let points = unit.iter().map(|u| VehicleState::new(a * u[0], a * u[1], b * u[2])).collect();
    Ok(GammaSet { points, energy })
}

fn random_unit_hemisphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0].abs() / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniform random points inside the forward half of the energy ellipsoid.
pub fn sample_interior(energy: f64, p: &VehicleParams, n: usize, seed: u64) -> Result<Vec<VehicleState>> {
    if !(energy.is_finite() && energy > 0.0) {
        return Err(invalid(format!("kinetic energy must be positive, got {energy}")));
    }
    let (a, b) = ellipsoid_axes(energy, p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            out.push(VehicleState::new(a * v[0], a * v[1], b * v[2]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `K + 1` states; `states[0]` is the start point.
    pub states: Vec<VehicleState>,
    /// `K` inputs, `inputs[k]` held over `[k Ts, (k+1) Ts)`.
    pub inputs: Vec<ControlInput>,
    pub ts: f64,
    /// Set when the rollout stopped early at the low-speed guard.
    pub truncated: bool,
}

impl Trajectory {
    pub fn x0(&self) -> VehicleState {
        self.states[0]
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Largest absolute difference between stored states and a replay through [`step`].
    pub fn replay_mismatch(&self, p: &VehicleParams) -> Result<f64> {
        let mut worst = 0.0_f64;
        for (k, u) in self.inputs.iter().enumerate() {
            let next = step(&self.states[k], u, p, self.ts)?;
            let d = (next.to_vector() - self.states[k + 1].to_vector()).amax();
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

/// Rolls `x0` forward under `inputs`. The rollout stops at the last valid
/// state if the plant trips the low-speed guard or leaves the finite range.
pub fn rollout(x0: VehicleState, inputs: &[ControlInput], p: &VehicleParams, ts: f64) -> Result<Trajectory> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(invalid(format!("time step must be positive, got {ts}")));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0);
    let mut truncated = false;
    for u in inputs {
        match step(states.last().unwrap(), u, p, ts) {
            Ok(next) if next.is_finite() => states.push(next),
            Ok(_) | Err(Error::LowSpeed { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let inputs = inputs[..states.len() - 1].to_vec();
    Ok(Trajectory { states, inputs, ts, truncated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Uncontrolled,
    Controlled,
}

impl DatasetKind {
    fn code(self) -> u32 {
        match self {
            DatasetKind::Uncontrolled => 0,
            DatasetKind::Controlled => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(DatasetKind::Uncontrolled),
            1 => Ok(DatasetKind::Controlled),
            _ => Err(Error::Format(format!("unknown dataset kind {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Uncontrolled => "uncontrolled",
            DatasetKind::Controlled => "controlled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub ts: f64,
    pub trajectories: Vec<Trajectory>,
    /// Start points that could not take a single step.
    pub dropped: usize,
    /// Text form of the [`DatasetSpec`] that produced the data, empty if unknown.
    pub snapshot: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn truncated_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.truncated).count()
    }

    pub fn sample_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.states.len()).sum()
    }
}

fn step_count(ts: f64, horizon: f64) -> Result<usize> {
    if !(ts.is_finite() && ts > 0.0 && horizon.is_finite() && horizon > 0.0) {
        return Err(invalid(format!("need positive Ts and horizon, got {ts} and {horizon}")));
    }
    let k = (horizon / ts).round();
    if k < 1.0 || (k * ts - horizon).abs() > 1e-9 * horizon {
        return Err(invalid(format!("Ts = {ts} does not divide the horizon {horizon}")));
    }
    Ok(k as usize)
}

fn collect_rollouts(kind: DatasetKind, ts: f64, rollouts: Vec<Trajectory>) -> Dataset {
    let before = rollouts.len();
    let trajectories: Vec<_> = rollouts.into_iter().filter(|t| t.states.len() >= 2).collect();
    Dataset { kind, ts, dropped: before - trajectories.len(), trajectories, snapshot: String::new() }
}

/// Zero-input rollouts from every start point.
pub fn generate_uncontrolled(g: &GammaSet, p: &VehicleParams, ts: f64, horizon: f64) -> Result<Dataset> {
    let k = step_count(ts, horizon)?;
    let inputs = vec![ControlInput::ZERO; k];
    let rollouts = g
        .points
        .par_iter()
        .map(|x0| rollout(*x0, &inputs, p, ts))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_rollouts(DatasetKind::Uncontrolled, ts, rollouts))
}

/// Bounds of the random excitation: `κ_r ∈ [-1, 1]`, `δ_f ∈ [-30°, 30°]`.
pub const RANDOM_KAPPA_MAX: f64 = 1.0;
pub const RANDOM_STEER_MAX: f64 = PI / 6.0;

/// Piecewise-constant uniform random inputs drawn for trajectory `index`.
pub fn random_inputs(seed: u64, index: usize, steps: usize) -> Vec<ControlInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..steps)
        .map(|_| {
            let kappa_r = rng.gen_range(-RANDOM_KAPPA_MAX..=RANDOM_KAPPA_MAX);
            let delta_f = rng.gen_range(-RANDOM_STEER_MAX..=RANDOM_STEER_MAX);
            ControlInput::new(0.0, kappa_r, delta_f, 0.0)
        })
        .collect()
}

/// Rollouts under random rear slip and front steering from every start point.
pub fn generate_controlled(g: &GammaSet, p: &VehicleParams, ts: f64, horizon: f64, seed: u64) -> Result<Dataset> {
    let k = step_count(ts, horizon)?;
    let rollouts = g
        .points
        .par_iter()
        .enumerate()
        .map(|(j, x0)| rollout(*x0, &random_inputs(seed, j, k), p, ts))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_rollouts(DatasetKind::Controlled, ts, rollouts))
}

/// Drops trajectories whose start satisfies `‖x0‖₂ < threshold`.
pub fn reject_low_speed(d: &Dataset, threshold: f64) -> Dataset {
    let trajectories = d.trajectories.iter().filter(|t| t.x0().norm() >= threshold).cloned().collect();
    Dataset { trajectories, ..d.clone() }
}

/// Default rejection threshold (m/s), roughly 30 km/h.
pub const LOW_SPEED_REJECTION: f64 = 8.3;

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub energy: f64,
    pub n_base: usize,
    pub densify_factor: f64,
    /// Keep at most this many start points (densified extras go first); 0 keeps all.
    pub start_limit: usize,
    pub gamma_seed: u64,
    /// Seed of the random excitation, unused for uncontrolled data.
    pub input_seed: u64,
    pub ts: f64,
    pub horizon: f64,
    pub vehicle: VehicleParams,
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        let mut g = sample_gamma(self.energy, &self.vehicle, self.n_base, self.densify_factor, self.gamma_seed)?;
        if self.start_limit > 0 {
            g.points.truncate(self.start_limit);
        }
        let mut d = match self.kind {
            DatasetKind::Uncontrolled => generate_uncontrolled(&g, &self.vehicle, self.ts, self.horizon)?,
            DatasetKind::Controlled => generate_controlled(&g, &self.vehicle, self.ts, self.horizon, self.input_seed)?,
        };
        d.snapshot = self.to_text();
        Ok(d)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "kind = {}\nenergy = {:?}\nn_base = {}\ndensify_factor = {:?}\nstart_limit = {}\ngamma_seed = {}\ninput_seed = {}\nts = {:?}\nhorizon = {:?}\n",
            self.kind.name(),
            self.energy,
            self.n_base,
            self.densify_factor,
            self.start_limit,
            self.gamma_seed,
            self.input_seed,
            self.ts,
            self.horizon
        );
        s.push_str(&self.vehicle.to_key_values());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let kind = match kv.get("kind") {
            Some((_, "uncontrolled")) => DatasetKind::Uncontrolled,
            Some((_, "controlled")) => DatasetKind::Controlled,
            Some((line, other)) => return Err(Error::Config { line, msg: format!("unknown dataset kind `{other}`") }),
            None => return Err(Error::Config { line: 0, msg: "missing `kind`".into() }),
        };
        Ok(Self {
            kind,
            energy: kv.f64_or("energy", 5e5)?,
            n_base: kv.usize_or("n_base", 200)?,
            densify_factor: kv.f64_or("densify_factor", 3.0)?,
            start_limit: kv.usize_or("start_limit", 0)?,
            gamma_seed: kv.parsed_or("gamma_seed", 0u64)?,
            input_seed: kv.parsed_or("input_seed", 0u64)?,
            ts: kv.f64_or("ts", 0.01)?,
            horizon: kv.f64_or("horizon", 0.5)?,
            vehicle: VehicleParams::from_key_values(&kv)?,
        })
    }
}

const DATASET_MAGIC: &[u8; 8] = b"KMPCDSET";
const DATASET_VERSION: u32 = 1;

/// Writes the binary container: magic, version, kind, Ts, counts and the
/// config snapshot, followed by each trajectory's state and input floats.
pub fn write_dataset<W: Write>(d: &Dataset, out: W) -> Result<W> {
    let mut w = BinWriter::new(out);
    w.bytes(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    w.u32(d.kind.code())?;
    w.f64(d.ts)?;
    w.u64(d.trajectories.len() as u64)?;
    w.u64(d.dropped as u64)?;
    w.text(&d.snapshot)?;
    for t in &d.trajectories {
        w.u64(t.states.len() as u64)?;
        w.u64(t.truncated as u64)?;
        for s in &t.states {
            w.f64s(&s.as_array())?;
        }
        for u in &t.inputs {
            w.f64s(&u.as_array())?;
        }
    }
    w.finish()
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut r = BinReader::new(input);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let kind = DatasetKind::from_code(r.u32()?)?;
    let ts = r.f64()?;
    let n = r.count(1 << 32, "trajectory")?;
    let dropped = r.u64()? as usize;
    let snapshot = r.text()?;
    let mut trajectories = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.count(1 << 32, "state")?;
        if len == 0 {
            return Err(Error::Format("trajectory without states".into()));
        }
        let truncated = r.u64()? != 0;
        let states = (0..len)
            .map(|_| r.f64s(3).map(|v| VehicleState::new(v[0], v[1], v[2])))
            .collect::<Result<Vec<_>>>()?;
        let inputs = (0..len - 1)
            .map(|_| r.f64s(4).map(|v| ControlInput::from_slice(&v)))
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory { states, inputs, ts, truncated });
    }
    r.expect_eof()?;
    Ok(Dataset { kind, ts, trajectories, dropped, snapshot })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(d, file)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub const DATASET_CSV_HEADER: &str = "t,vx,vy,yaw_rate,kappa_f,kappa_r,delta_f,delta_r,traj_id";

/// One CSV row; the last state of a trajectory has no input.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCsvRow {
    pub t: f64,
    pub state: [f64; 3],
    pub input: Option<[f64; 4]>,
    pub traj_id: usize,
}

pub fn dataset_csv_rows(d: &Dataset) -> Vec<DatasetCsvRow> {
    let mut rows = Vec::with_capacity(d.sample_count());
    for (j, t) in d.trajectories.iter().enumerate() {
        for (k, s) in t.states.iter().enumerate() {
            rows.push(DatasetCsvRow {
                t: k as f64 * t.ts,
                state: s.as_array(),
                input: t.inputs.get(k).map(ControlInput::as_array),
                traj_id: j,
            });
        }
    }
    rows
}

pub fn format_dataset_csv(rows: &[DatasetCsvRow]) -> String {
    let mut out = String::from(DATASET_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let mut fields: Vec<String> = std::iter::once(r.t).chain(r.state).map(fmt_f64).collect();
        match r.input {
            Some(u) => fields.extend(u.iter().map(|v| fmt_f64(*v))),
            None => fields.extend(std::iter::repeat_n(String::new(), 4)),
        }
        fields.push(r.traj_id.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_dataset_csv(text: &str) -> Result<Vec<DatasetCsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(DATASET_CSV_HEADER) {
        return Err(Error::Format("missing or wrong dataset CSV header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Format(format!("row {}: expected 9 fields, got {}", i + 1, f.len())));
            }
            let input = if f[4..8].iter().all(|s| s.is_empty()) {
                None
            } else {
                Some([parse_f64(f[4])?, parse_f64(f[5])?, parse_f64(f[6])?, parse_f64(f[7])?])
            };
            Ok(DatasetCsvRow {
                t: parse_f64(f[0])?,
                state: [parse_f64(f[1])?, parse_f64(f[2])?, parse_f64(f[3])?],
                input,
                traj_id: f[8].parse().map_err(|_| Error::Format(format!("row {}: bad traj_id", i + 1)))?,
            })
        })
        .collect()
}
