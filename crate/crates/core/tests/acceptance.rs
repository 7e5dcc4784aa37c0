//! Acceptance report: one PASS/FAIL line per criterion. Exits nonzero on a
//! failure only when `ACCEPTANCE_STRICT` is set, so the report is always printed.

mod common;

use std::time::Instant;

use koopman_mpc::dataset::{write_dataset, DatasetKind, DatasetSpec};
use koopman_mpc::experiments::{drift_metrics, evaluate_model, run_scenario, ExperimentConfig, Scale, ScenarioRun};
use koopman_mpc::koopman::{identify, write_model, Identification, N_OUTPUTS};
use koopman_mpc::mpc::{format_log_csv, ClosedLoopLog, MpcConfig};
use koopman_mpc::qp::{kkt_residuals, solve, QpSettings, QpStatus};
use koopman_mpc::vehicle::{step, ControlInput, VehicleParams, VehicleState};
use rand::Rng;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String, t0: Instant) {
        if !pass {
            self.failures += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
}

fn structural(id: &Identification) -> (bool, String) {
    let m = &id.model;
    let lams = m.eigenvalues.as_slice();
    let n_l = lams.len();
    let n_z = N_OUTPUTS * n_l;
    let mut off_diag = 0.0_f64;
    let mut diag_ok = true;
    let mut c_ok = m.c.shape() == (N_OUTPUTS, n_z);
    for r in 0..n_z {
        for c in 0..n_z {
            if r == c {
                diag_ok &= m.a[(r, c)] == lams[r % n_l];
            } else {
                off_diag += m.a[(r, c)].abs();
            }
        }
        for p in 0..N_OUTPUTS {
            let want = if r / n_l == p { 1.0 } else { 0.0 };
            c_ok &= m.c[(p, r)] == want;
        }
    }
    (
        off_diag == 0.0 && diag_ok && c_ok,
        format!("A {n_z}x{n_z}, off-diagonal mass {off_diag:e}, diagonal matches: {diag_ok}, C pattern exact: {c_ok}"),
    )
}

fn qp_oracle() -> (bool, String) {
    let mut r = common::rng(2024);
    let mut worst_w = 0.0_f64;
    let mut worst_kkt = 0.0_f64;
    let mut bad_status = 0;
    for _ in 0..100 {
        let n = r.gen_range(1..=10);
        let m = r.gen_range(0..=20);
        let p = common::random_qp(&mut r, n, m);
        let (w_star, _) = common::active_set_oracle(&p).expect("feasible by construction");
        let sol = solve(&p, &QpSettings::default()).unwrap();
        if sol.status != QpStatus::Optimal {
            bad_status += 1;
            continue;
        }
        worst_w = worst_w.max((&sol.w - &w_star).amax());
        let k = kkt_residuals(&p, &sol.w, &sol.mu).unwrap();
        worst_kkt = worst_kkt.max(k.primal).max(k.dual).max(k.complementarity);
    }
    (
        bad_status == 0 && worst_w <= 1e-5 && worst_kkt <= 1e-6,
        format!("100 instances, not optimal {bad_status}, max |w - w*| {worst_w:.2e} (tol 1e-5), max KKT residual {worst_kkt:.2e} (tol 1e-6)"),
    )
}

fn log_bounds(log: &ClosedLoopLog, cfg: &MpcConfig) -> (bool, f64) {
    let mut prev = ControlInput::ZERO;
    let mut ok = true;
    for u in log.inputs() {
        ok &= u.kappa_f == 0.0 && u.delta_r == 0.0;
        ok &= (-1.0..=1.0).contains(&u.kappa_r) && (-0.45..=0.45).contains(&u.delta_f);
        ok &= (u.kappa_r - prev.kappa_r).abs() <= 0.1 + 1e-12 && (u.delta_f - prev.delta_f).abs() <= 0.8 + 1e-12;
        prev = u;
    }
    (ok, log.hard_violation(cfg))
}

fn safety(cfg: &ExperimentConfig, drift: &[ScenarioRun], spiral: &[ScenarioRun]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (spec, runs) in [(&cfg.drift, drift), (&cfg.spiral, spiral)] {
        let mpc = spec.mpc_config(&cfg.mpc);
        for run in runs {
            match &run.outcome {
                Ok(log) => {
                    let (inside, violation) = log_bounds(log, &mpc);
                    ok &= inside && violation == 0.0;
                    parts.push(format!("{}/{}: {} rows, max violation {violation:e}", spec.name, run.controller, log.rows.len()));
                }
                Err(e) => {
                    ok = false;
                    parts.push(format!("{}/{}: no log ({e})", spec.name, run.controller));
                }
            }
        }
    }
    (ok, parts.join("; "))
}

fn drift_check(cfg: &ExperimentConfig, runs: &[ScenarioRun]) -> (bool, String) {
    let mpc = cfg.drift.mpc_config(&cfg.mpc);
    let metrics: Vec<_> = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|log| (r.controller.clone(), drift_metrics(log, cfg.drift.reference.start[0], &mpc))))
        .collect();
    let get = |name: &str| metrics.iter().find(|(n, _)| n == name).map(|(_, m)| m);
    let (Some(k), Some(l)) = (get("koopman"), get("linear")) else {
        return (false, "a controller produced no log".into());
    };
    let opposite = k.initial_steering * l.initial_steering < 0.0;
    let recovered = k.time_to_vy.is_some_and(|t| t <= cfg.drift.t_sim);
    (
        opposite && recovered,
        format!(
            "initial steering koopman {:+.4}, linear {:+.4} (opposite: {opposite}); koopman reaches |vy| <= 0.5 at {}",
            k.initial_steering,
            l.initial_steering,
            k.time_to_vy.map(|t| format!("{t:.2} s")).unwrap_or_else(|| "never".into())
        ),
    )
}

fn integrator_order() -> (bool, String) {
    let p = VehicleParams::default();
    let x0 = VehicleState::new(20.0, 0.5, 0.1);
    let u = ControlInput::new(0.0, 0.05, 0.03, 0.0);
    let run = |h: f64| {
        let n = (1.0 / h).round() as usize;
        (0..n).fold(x0, |x, _| step(&x, &u, &p, h).unwrap())
    };
    let hs = [0.05, 0.025, 0.0125];
    let reference = run(hs[2] / 32.0).to_vector();
    let errs: Vec<f64> = hs.iter().map(|h| (run(*h).to_vector() - reference).norm()).collect();
    let orders: Vec<f64> = errs.windows(2).map(|e| (e[0] / e[1]).log2()).collect();
    (
        orders.iter().all(|o| (3.5..=4.5).contains(o)),
        format!(
            "errors {} at h = {hs:?}, observed orders {orders:.3?}",
            errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn model_bytes(id: &Identification) -> Vec<u8> {
    write_model(&id.model, Vec::new()).unwrap()
}

fn logs_csv(runs: &[ScenarioRun]) -> Vec<String> {
    runs.iter().map(|r| r.outcome.as_ref().map(format_log_csv).unwrap_or_else(|e| e.clone())).collect()
}

fn main() {
    let mut rep = Report { failures: 0 };
    let cfg = ExperimentConfig::preset(Scale::Desk, 0);

    let t0 = Instant::now();
    let (unc, ctl) = cfg.generate().unwrap();
    let id = identify(&unc, &ctl, &cfg.identify).unwrap();
    let pipeline_time = t0.elapsed();

    let t = Instant::now();
    let (ok, detail) = structural(&id);
    rep.line(1, "structural exactness of A and C", ok, detail, t);

    let t = Instant::now();
    let table = &id.model.lift_table;
    let defect = table.linear_evolution_defect(&id.model.eigenvalues);
    let scale = table.vectors.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    rep.line(
        2,
        "lift table evolves linearly",
        defect <= f64::EPSILON * scale,
        format!("{} samples, max |z_k+1 - L z_k| = {defect:e} (max |z| {scale:.3e})", table.len()),
        t,
    );

    let t = Instant::now();
    let errs = common::fit_g_instances(3, 20);
    let worst = errs.iter().copied().fold(0.0, f64::max);
    rep.line(3, "g fit against exact ridge oracle", worst <= 1e-8, format!("20 instances, worst relative error {worst:.2e} (tol 1e-8)"), t);

    let t = Instant::now();
    let inst = common::fit_b_instances(4, 10);
    let worst = inst.iter().map(|i| i.0).fold(0.0, f64::max);
    let obj_ok = inst.iter().all(|i| i.1 <= i.2) && id.b_fit.objective <= id.b_fit.objective_zero;
    rep.line(
        4,
        "B fit against generic least squares",
        worst <= 1e-8 && obj_ok,
        format!(
            "10 instances, worst relative error {worst:.2e} (tol 1e-8); objective at B <= objective at 0 on all sets: {obj_ok} (desk set {:.4e} vs {:.4e})",
            id.b_fit.objective, id.b_fit.objective_zero
        ),
        t,
    );

    let t = Instant::now();
    let (ok, detail) = qp_oracle();
    rep.line(5, "QP solver against active-set oracle", ok && t.elapsed().as_secs() < 60, detail, t);

    let t = Instant::now();
    let eval = evaluate_model(&id.model, &cfg).unwrap();
    let (mu, mc) = (eval.interior_uncontrolled.mean, eval.interior_controlled.mean);
    let total = pipeline_time + t.elapsed();
    rep.line(
        6,
        "held-out prediction error",
        unc.len() >= 200 && id.model.n_lambda() == 51 && mu <= 15.0 && mc <= 10.0 && total.as_secs() <= 600,
        format!(
            "N_T = {}, N_L = {}, uncontrolled mean {mu:.2}% (tol 15%, n = {}), controlled mean {mc:.2}% (tol 10%, n = {}); surface starts for comparison: {:.2}% / {:.2}%",
            unc.len(),
            id.model.n_lambda(),
            eval.interior_uncontrolled.count,
            eval.interior_controlled.count,
            eval.surface_uncontrolled.mean,
            eval.surface_controlled.mean
        ),
        t,
    );

    let t = Instant::now();
    let drift = run_scenario(&cfg.drift, Some(&id.model), &cfg).unwrap();
    let drift_time = t.elapsed();
    let spiral = run_scenario(&cfg.spiral, Some(&id.model), &cfg).unwrap();
    let (ok, detail) = safety(&cfg, &drift, &spiral);
    rep.line(7, "closed-loop input constraints", ok, detail, t);

    let t = Instant::now();
    let (ok, detail) = drift_check(&cfg, &drift);
    rep.line(8, "drift recovery", ok && drift_time.as_secs() < 60, format!("{detail}; scenario runtime {:.1} s", drift_time.as_secs_f64()), t);

    let t = Instant::now();
    let (ok, detail) = integrator_order();
    rep.line(9, "integrator order", ok, detail, t);

    let t = Instant::now();
    let mut same = Vec::new();
    for (d, kind) in [(&unc, DatasetKind::Uncontrolled), (&ctl, DatasetKind::Controlled)] {
        let again = DatasetSpec::from_text(&d.snapshot).unwrap().generate().unwrap();
        same.push(again.kind == kind && write_dataset(&again, Vec::new()).unwrap() == write_dataset(d, Vec::new()).unwrap());
    }
    let (unc2, ctl2) = cfg.generate().unwrap();
    let id2 = identify(&unc2, &ctl2, &cfg.identify).unwrap();
    same.push(model_bytes(&id2) == model_bytes(&id));
    let drift2 = run_scenario(&cfg.drift, Some(&id2.model), &cfg).unwrap();
    let spiral2 = run_scenario(&cfg.spiral, Some(&id2.model), &cfg).unwrap();
    same.push(logs_csv(&drift2) == logs_csv(&drift));
    same.push(logs_csv(&spiral2) == logs_csv(&spiral));
    let replay = drift.iter().chain(&spiral).filter_map(|r| r.outcome.as_ref().ok()).all(|log| log.replay_mismatch(&cfg.vehicle).unwrap() == 0.0);
    rep.line(
        10,
        "bit-exact regeneration",
        same.iter().all(|s| *s) && replay,
        format!("datasets from snapshots {:?}, model {}, drift logs {}, spiral logs {}, log replay exact {replay}", &same[..2], same[2], same[3], same[4]),
        t,
    );

    println!("acceptance: {} of 10 criteria failed", rep.failures);
    if rep.failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
