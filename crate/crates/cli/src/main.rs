//! `ccd`: command-line driver for the suspension co-design pipeline.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors (bad flags,
//! bad config, missing inputs), 2 when a computation aborts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ccd_core::config::RunConfig;
use ccd_core::discrepancy::{ErrorDataset, QuantileModel};
use ccd_core::io::{require, write_json};
use ccd_core::pipeline::{
    assemble_generation, build_route, evaluate, generate_road, road, run_all, run_deploy, run_fit, run_step0, run_step1, run_step3, write_route, write_trace,
    GenerationRecord, Metrics, RunDir,
};
use ccd_core::profile::DrivingStyle;
use ccd_core::trainer::Agent;
use ccd_core::{CcdError, Result};

#[derive(Debug, Parser)]
#[command(name = "ccd", version, about = "Digital-twin control co-design of an active suspension")]
struct Cli {
    /// TOML run configuration; missing keys fall back to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration when no file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Directory holding all artifacts of a run.
    #[arg(long, global = true, env = "CCD_RUN_ROOT", default_value = "runs/default")]
    run_root: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate the configuration and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Print per-epoch progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlantKind {
    Real,
    Nominal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the road surface.
    GenRoad {
        /// Output file (default: <run-root>/road/surface.bin).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the elevation grid as CSV next to the binary file.
        #[arg(long)]
        csv: bool,
    },
    /// Build a driver profile and the resulting vehicle path.
    GenProfile {
        #[arg(long)]
        driver: DrivingStyle,
        /// Output directory (default: <run-root>/<driver>/route).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Step 0: gain search and policy pretraining.
    Warmstart,
    /// Step 1: first co-design on the nominal model.
    TrainCcd1,
    /// Step 2: deploy on the physical vehicle, fine-tune, record model errors.
    Deploy {
        #[arg(long)]
        driver: DrivingStyle,
    },
    /// Step 2: fit the quantile discrepancy model on recorded errors.
    FitDiscrepancy {
        #[arg(long)]
        driver: DrivingStyle,
    },
    /// Step 3: second co-design on the corrected model, then evaluate.
    TrainCcd2 {
        #[arg(long)]
        driver: DrivingStyle,
    },
    /// Replay a checkpoint along a driver route and report its metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        driver: DrivingStyle,
        #[arg(long, value_enum, default_value_t = PlantKind::Real)]
        plant: PlantKind,
        /// Trace CSV (default: <run-root>/<driver>/eval_<checkpoint stem>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect before/after metrics of every driver into one CSV.
    Report {
        /// Output file (default: <run-root>/report.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steps 0 to 3 for every configured driver.
    Run,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            require(path)?;
            let base = match cli.preset {
                Preset::Full => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
            };
            // Layer the file over the preset so partial files stay short.
            let mut table = toml::Table::try_from(&base).map_err(CcdError::from)?;
            let file: toml::Table = toml::from_str(&std::fs::read_to_string(path)?)?;
            merge(&mut table, file);
            RunConfig::from_toml(&toml::to_string(&table)?)?
        }
        None => match cli.preset {
            Preset::Full => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn plan(cli: &Cli, cfg: &RunConfig) -> Result<Vec<String>> {
    let dir = RunDir::new(&cli.run_root);
    let mut lines = vec![
        format!("config hash {}", cfg.hash()?),
        format!("master seed {}", cfg.seed),
        format!("run root {}", dir.root.display()),
    ];
    let step = |name: &str, path: PathBuf| format!("{name} -> {}", path.display());
    match &cli.command {
        Command::GenRoad { out, .. } => lines.push(step("gen-road", out.clone().unwrap_or_else(|| dir.surface()))),
        Command::GenProfile { driver, out } => lines.push(step("gen-profile", out.clone().unwrap_or_else(|| dir.driver(*driver).join("route")))),
        Command::Warmstart => lines.push(step("step0", dir.step0())),
        Command::TrainCcd1 => lines.push(step("step1", dir.step1())),
        Command::Deploy { driver } | Command::FitDiscrepancy { driver } => lines.push(step("step2", dir.step2(*driver))),
        Command::TrainCcd2 { driver } => lines.push(step("step3", dir.step3(*driver))),
        Command::Evaluate { checkpoint, driver, .. } => lines.push(format!("evaluate {} on the {driver} route", checkpoint.display())),
        Command::Report { out } => lines.push(step("report", out.clone().unwrap_or_else(|| dir.root.join("report.csv")))),
        Command::Run => {
            lines.push(step("step0", dir.step0()));
            lines.push(step("step1", dir.step1()));
            for d in &cfg.drivers {
                lines.push(step(&format!("{d} steps 2-3"), dir.driver(*d)));
            }
        }
    }
    Ok(lines)
}

fn load_agent(path: &Path) -> Result<Agent> {
    require(path)?;
    Agent::load(path)
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = RunDir::new(&cli.run_root);
    let v = cli.verbose;
    match &cli.command {
        Command::GenRoad { out, csv } => {
            let surface = generate_road(cfg)?;
            let path = out.clone().unwrap_or_else(|| dir.surface());
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            surface.save(&path)?;
            if *csv {
                surface.write_csv(&path.with_extension("csv"))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "path": path,
                    "std_dev": surface.std_dev(),
                    "peak_to_peak": surface.peak_to_peak(),
                    "dims": surface.dims(),
                })
            );
        }
        Command::GenProfile { driver, out } => {
            let surface = road(cfg, &dir)?;
            let route = build_route(cfg, &surface, *driver)?;
            let path = out.clone().unwrap_or_else(|| dir.driver(*driver).join("route"));
            write_route(&route, &path)?;
            let ((x0, x1), (y0, y1)) = route.trajectory.bounds();
            println!(
                "{}",
                serde_json::json!({
                    "path": path,
                    "steps": route.profile.len(),
                    "max_speed": route.trajectory.v.iter().cloned().fold(0.0, f64::max),
                    "x_range": [x0, x1],
                    "y_range": [y0, y1],
                })
            );
        }
        Command::Warmstart => {
            dir.bind(cfg)?;
            let (_, summary) = run_step0(cfg, &dir, v)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::TrainCcd1 => {
            dir.bind(cfg)?;
            let agent = load_agent(&dir.step0().join("agent.ckpt"))?;
            let res = run_step1(cfg, &dir, agent, v)?;
            println!(
                "{}",
                serde_json::json!({ "best_epoch": res.record.best_epoch, "best_return": res.record.best_return, "design": res.best.design, "stop_reason": res.record.stop_reason })
            );
        }
        Command::Deploy { driver } => {
            dir.bind(cfg)?;
            let pi1 = load_agent(&dir.step1().join("pi1.ckpt"))?;
            let surface = road(cfg, &dir)?;
            let route = build_route(cfg, &surface, *driver)?;
            write_route(&route, &dir.driver(*driver).join("route"))?;
            let out = run_deploy(cfg, &dir, &route, &pi1, v)?;
            println!(
                "{}",
                serde_json::json!({ "deployment": Metrics::from_trace(&out.deployment), "error_records": out.errors.records.len(), "error_rms": out.errors.error_rms() })
            );
        }
        Command::FitDiscrepancy { driver } => {
            dir.bind(cfg)?;
            let path = dir.step2(*driver).join("errors.csv");
            require(&path)?;
            let errors = ErrorDataset::read_csv(&path)?;
            let (_, report) = run_fit(cfg, &dir, *driver, &errors)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::TrainCcd2 { driver } => {
            dir.bind(cfg)?;
            let pi1 = load_agent(&dir.step1().join("pi1.ckpt"))?;
            let pi2 = load_agent(&dir.step2(*driver).join("pi2.ckpt"))?;
            let model_path = dir.step2(*driver).join("quantile.ckpt");
            require(&model_path)?;
            let model = QuantileModel::load(&model_path)?;
            let surface = road(cfg, &dir)?;
            let route = build_route(cfg, &surface, *driver)?;
            let (_, report) = run_step3(cfg, &dir, &route, &pi1, &pi2, &model, v)?;
            assemble_generation(cfg, &dir, *driver)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Evaluate { checkpoint, driver, plant, out } => {
            let agent = load_agent(checkpoint)?;
            let surface = road(cfg, &dir)?;
            let route = build_route(cfg, &surface, *driver)?;
            let plant = match plant {
                PlantKind::Real => cfg.real_plant(),
                PlantKind::Nominal => cfg.nominal_plant(),
            };
            let trace = evaluate(&agent, &plant, &route, cfg)?;
            let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "agent".into());
            let path = out.clone().unwrap_or_else(|| dir.driver(*driver).join(format!("eval_{stem}.csv")));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_trace(&path, &trace, cfg.dt)?;
            let m = Metrics::from_trace(&trace);
            write_json(&path.with_extension("json"), &m)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Report { out } => {
            let path = out.clone().unwrap_or_else(|| dir.root.join("report.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["driver", "metric", "before", "after", "improvement_pct"])?;
            for &d in &cfg.drivers {
                let rec = GenerationRecord::load(&dir, d, cfg)?;
                let m = &rec.metrics;
                for (name, b, a, imp) in [
                    ("rms_heave_acc", m.before.rms_heave_acc, m.after.rms_heave_acc, m.rms_heave_acc_improvement),
                    ("mean_abs_u", m.before.mean_abs_u, m.after.mean_abs_u, m.mean_abs_u_improvement),
                ] {
                    w.write_record([d.name().to_string(), name.to_string(), b.to_string(), a.to_string(), imp.to_string()])?;
                    println!("{:<10} {:<14} {:>12.6} {:>12.6} {:>8.2}%", d.name(), name, b, a, imp);
                }
            }
            w.flush()?;
        }
        Command::Run => {
            let summary = run_all(cfg, &dir, v)?;
            for g in &summary.generations {
                println!("{}", serde_json::to_string(&g.metrics)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = load_config(&cli).and_then(|cfg| {
        if cli.dry_run {
            for line in plan(&cli, &cfg)? {
                println!("{line}");
            }
            Ok(())
        } else {
            execute(&cli, &cfg)
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
