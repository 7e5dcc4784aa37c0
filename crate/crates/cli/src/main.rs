use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use koopman_mpc::config::KeyValues;
use koopman_mpc::dataset::{format_dataset_csv, dataset_csv_rows, load_dataset, save_dataset, Dataset};
use koopman_mpc::experiments::{
    drift_report, evaluate_model, identify_report, run_scenario, spiral_report, ExperimentConfig, Scale, ScenarioRun,
    ScenarioSpec,
};
use koopman_mpc::io::fmt_f64;
use koopman_mpc::koopman::{evaluate, identify, load_model, save_model, KoopmanModel};
use koopman_mpc::mpc::format_log_csv;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "kmpc", version, about = "Koopman-lifted MPC for a single-track vehicle model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Key-value file overriding preset settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the uncontrolled and controlled identification datasets.
    Generate,
    /// Identify the lifted predictor from the generated datasets.
    Identify,
    /// Held-out prediction error of the identified model.
    Evaluate,
    /// Drift-recovery scenario with both controllers.
    Drift,
    /// Spiral-tracking scenario with both controllers.
    Spiral,
    /// Run every stage in order and print a side-by-side summary.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Identify => "identify",
            Command::Evaluate => "evaluate",
            Command::Drift => "drift",
            Command::Spiral => "spiral",
            Command::Compare => "compare",
        }
    }
}

const UNCONTROLLED: &str = "uncontrolled.bin";
const CONTROLLED: &str = "controlled.bin";
const MODEL: &str = "model.bin";
const MANIFEST: &str = "manifest.txt";

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    config_path: Option<PathBuf>,
}

/// Files read and written by one verb, recorded in the manifest.
#[derive(Default)]
struct Record {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, rec: &mut Record, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        rec.outputs.push(name.to_string());
        Ok(())
    }

    fn need(&self, rec: &mut Record, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("missing input {}; run the earlier stage first", p.display());
        }
        rec.inputs.push(name.to_string());
        Ok(p)
    }

    fn block(&self, verb: &str, rec: &Record) -> Result<String> {
        let mut s = format!("[{verb}]\nseed = {}\nscale = {}\n", self.cfg.seed, self.cfg.scale.name());
        match &self.config_path {
            Some(p) => s.push_str(&format!("config = {} sha256:{}\n", p.display(), sha256_file(p)?)),
            None => s.push_str("config = preset\n"),
        }
        for name in &rec.inputs {
            s.push_str(&format!("input = {name} sha256:{}\n", sha256_file(&self.path(name))?));
        }
        for name in &rec.outputs {
            s.push_str(&format!("output = {name} sha256:{}\n", sha256_file(&self.path(name))?));
        }
        Ok(s)
    }

    /// Replaces this verb's block in the manifest, keeping the others.
    fn update_manifest(&self, verb: &str, rec: &Record) -> Result<()> {
        let path = self.path(MANIFEST);
        let old = fs::read_to_string(&path).unwrap_or_default();
        let mut blocks: Vec<(String, String)> = Vec::new();
        for chunk in old.split("\n\n").filter(|c| !c.trim().is_empty()) {
            let name = chunk.lines().next().unwrap_or("").trim_matches(|c| c == '[' || c == ']').to_string();
            blocks.push((name, format!("{}\n", chunk.trim_end())));
        }
        let new = self.block(verb, rec)?;
        match blocks.iter_mut().find(|(n, _)| n == verb) {
            Some(b) => b.1 = new,
            None => blocks.push((verb.to_string(), new)),
        }
        let text: Vec<String> = blocks.into_iter().map(|(_, b)| b).collect();
        fs::write(&path, text.join("\n")).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn load_datasets(ctx: &Ctx, rec: &mut Record) -> Result<(Dataset, Dataset)> {
    let unc = load_dataset(&ctx.need(rec, UNCONTROLLED)?)?;
    let ctl = load_dataset(&ctx.need(rec, CONTROLLED)?)?;
    Ok((unc, ctl))
}

fn load_checked_model(ctx: &Ctx, rec: &mut Record) -> Result<KoopmanModel> {
    let model = load_model(&ctx.need(rec, MODEL)?)?;
    if model.ts != ctx.cfg.ts {
        bail!("model sample time {} differs from the configured {}", model.ts, ctx.cfg.ts);
    }
    Ok(model)
}

fn cmd_generate(ctx: &Ctx) -> Result<String> {
    let mut rec = Record::default();
    let (unc, ctl) = ctx.cfg.generate()?;
    save_dataset(&unc, &ctx.path(UNCONTROLLED))?;
    rec.outputs.push(UNCONTROLLED.into());
    save_dataset(&ctl, &ctx.path(CONTROLLED))?;
    rec.outputs.push(CONTROLLED.into());
    ctx.write(&mut rec, "uncontrolled.csv", format_dataset_csv(&dataset_csv_rows(&unc)).as_bytes())?;
    ctx.write(&mut rec, "controlled.csv", format_dataset_csv(&dataset_csv_rows(&ctl)).as_bytes())?;
    ctx.update_manifest("generate", &rec)?;
    Ok(format!(
        "uncontrolled: {} trajectories ({} truncated, {} dropped)\ncontrolled: {} trajectories ({} truncated, {} dropped)\n",
        unc.len(),
        unc.truncated_count(),
        unc.dropped,
        ctl.len(),
        ctl.truncated_count(),
        ctl.dropped
    ))
}

fn cmd_identify(ctx: &Ctx) -> Result<String> {
    let mut rec = Record::default();
    let (unc, ctl) = load_datasets(ctx, &mut rec)?;
    let id = identify(&unc, &ctl, &ctx.cfg.identify)?;
    save_model(&id.model, &ctx.path(MODEL))?;
    rec.outputs.push(MODEL.into());
    let eval = evaluate_model(&id.model, &ctx.cfg)?;
    let report = identify_report(&id, &unc, &ctl, &eval);
    ctx.write(&mut rec, "identify_report.txt", report.as_bytes())?;
    ctx.update_manifest("identify", &rec)?;
    Ok(report)
}

fn cmd_evaluate(ctx: &Ctx) -> Result<String> {
    let mut rec = Record::default();
    let model = load_checked_model(ctx, &mut rec)?;
    let (iu, ic) = ctx.cfg.heldout_interior()?;
    let (su, sc) = ctx.cfg.heldout_surface()?;
    let mut csv = String::from("set,index,vx0,vy0,yaw_rate0,rmse_percent\n");
    for (name, d) in [("interior_uncontrolled", &iu), ("interior_controlled", &ic), ("surface_uncontrolled", &su), ("surface_controlled", &sc)] {
        for (j, (t, e)) in d.trajectories.iter().zip(evaluate(&model, d)?).enumerate() {
            let x = t.x0();
            csv.push_str(&format!("{name},{j},{},{},{},{}\n", fmt_f64(x.vx), fmt_f64(x.vy), fmt_f64(x.yaw_rate), fmt_f64(e)));
        }
    }
    ctx.write(&mut rec, "heldout_rmse.csv", csv.as_bytes())?;
    let report = evaluate_model(&model, &ctx.cfg)?.report();
    ctx.write(&mut rec, "evaluate_report.txt", report.as_bytes())?;
    ctx.update_manifest("evaluate", &rec)?;
    Ok(report)
}

fn write_runs(ctx: &Ctx, rec: &mut Record, spec: &ScenarioSpec, runs: &[ScenarioRun]) -> Result<()> {
    for run in runs {
        if let Ok(log) = &run.outcome {
            ctx.write(rec, &format!("{}_{}.csv", spec.name, run.controller), format_log_csv(log).as_bytes())?;
        }
    }
    Ok(())
}

fn scenario(ctx: &Ctx, spec: &ScenarioSpec, report: fn(&ScenarioSpec, &[ScenarioRun], &ExperimentConfig) -> String) -> Result<String> {
    let mut rec = Record::default();
    let model = load_checked_model(ctx, &mut rec)?;
    let runs = run_scenario(spec, Some(&model), &ctx.cfg)?;
    write_runs(ctx, &mut rec, spec, &runs)?;
    let mut reference = String::from("t,ref_vx,ref_vy,ref_yaw_rate\n");
    let steps = (spec.t_sim / ctx.cfg.ts).round() as usize;
    for k in 0..=steps {
        let t = k as f64 * ctx.cfg.ts;
        let r = spec.reference.logged(t);
        let f: Vec<String> = r.iter().map(|v| v.map(fmt_f64).unwrap_or_default()).collect();
        reference.push_str(&format!("{},{}\n", fmt_f64(t), f.join(",")));
    }
    ctx.write(&mut rec, &format!("{}_reference.csv", spec.name), reference.as_bytes())?;
    let text = report(spec, &runs, &ctx.cfg);
    ctx.write(&mut rec, &format!("{}_metrics.txt", spec.name), text.as_bytes())?;
    ctx.update_manifest(&spec.name, &rec)?;
    Ok(text)
}

fn run(cli: &Cli) -> Result<()> {
    let scale = match cli.scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    };
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_key_values(scale, cli.seed, &KeyValues::load(p)?)?,
        None => ExperimentConfig::preset(scale, cli.seed),
    };
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = Ctx { cfg, out: cli.out_dir.clone(), config_path: cli.config.clone() };
    let stages: &[Command] = match cli.command {
        Command::Compare => &[Command::Generate, Command::Identify, Command::Evaluate, Command::Drift, Command::Spiral],
        ref single => std::slice::from_ref(single),
    };
    for stage in stages {
        let t0 = Instant::now();
        let text = match stage {
            Command::Generate => cmd_generate(&ctx)?,
            Command::Identify => cmd_identify(&ctx)?,
            Command::Evaluate => cmd_evaluate(&ctx)?,
            Command::Drift => scenario(&ctx, &ctx.cfg.drift, drift_report)?,
            Command::Spiral => scenario(&ctx, &ctx.cfg.spiral, spiral_report)?,
            Command::Compare => unreachable!("compare expands into stages"),
        };
        println!("== {} ({:.1} s)\n{text}", stage.name(), t0.elapsed().as_secs_f64());
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> (&'static str, Option<usize>) {
    use koopman_mpc::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Config { line, .. }) => ("config", Some(*line)),
        Some(E::Io(_)) => ("io", None),
        Some(E::Format(_)) => ("format", None),
        Some(E::Dimension(_)) => ("dimension", None),
        Some(E::Numerical(_)) => ("numerical", None),
        Some(E::LowSpeed { .. }) => ("low_speed", None),
        Some(E::InvalidArgument(_)) => ("invalid_argument", None),
        None if e.downcast_ref::<std::io::Error>().is_some() => ("io", None),
        None => ("other", None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, line) = error_kind(&e);
            let message = format!("{e:#}").replace('"', "'").replace('\n', " ");
            match line {
                Some(l) => eprintln!("kmpc-error verb={} kind={kind} line={l} message=\"{message}\"", cli.command.name()),
                None => eprintln!("kmpc-error verb={} kind={kind} message=\"{message}\"", cli.command.name()),
            }
            ExitCode::FAILURE
        }
    }
}
