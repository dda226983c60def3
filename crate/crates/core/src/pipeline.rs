//! The multi-generation loop and its on-disk layout.
//!
//! ```text
//! <root>/config.toml              snapshot of the run configuration
//! <root>/road/surface.bin         generated road surface
//! <root>/step0/                   gain search log, pretraining summary, agent
//! <root>/step1/                   first co-design history and best agent
//! <root>/<driver>/route/          driver profile and vehicle trajectory
//! <root>/<driver>/step2/          deployment trace, fine-tuned agent, error
//!                                 data and the fitted quantile model
//! <root>/<driver>/step3/          second co-design history, agent, before
//!                                 and after evaluation traces, metrics
//! <root>/<driver>/generation.json GenerationRecord
//! ```
//!
//! Steps 0 and 1 are shared; each driver branch starts at Step 2.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::discrepancy::{collect_errors, fit_quantiles, ErrorDataset, FitReport, QuantileModel};
use crate::error::{CcdError, Result};
use crate::io::{ensure_dir, read_json, require, write_json, write_table};
use crate::profile::{build_profile_from, integrate_trajectory, trajectory_disturbances, DrivingProfile, DrivingStyle, VehicleTrajectory};
use crate::road::{generate_surface, RoadSurface, SpectralConfig};
use crate::seed;
use crate::trainer::env::{simulate_route, RouteTrace};
use crate::trainer::warmstart::{controller_dataset, pretrained_agent, search_gains, GainSearch, PretrainSummary};
use crate::trainer::{train_stage, Agent, EpochRecord, Env, Scenario, StageOutcome, StageSpec, TrainingRecord};
use crate::vehicle::{DrivingCondition, Plant, SuspensionDesign, WheelDisturbance};

/// Paths inside a run root.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn surface(&self) -> PathBuf {
        self.root.join("road").join("surface.bin")
    }

    pub fn step0(&self) -> PathBuf {
        self.root.join("step0")
    }

    pub fn step1(&self) -> PathBuf {
        self.root.join("step1")
    }

    pub fn driver(&self, style: DrivingStyle) -> PathBuf {
        self.root.join(style.name())
    }

    pub fn step2(&self, style: DrivingStyle) -> PathBuf {
        self.driver(style).join("step2")
    }

    pub fn step3(&self, style: DrivingStyle) -> PathBuf {
        self.driver(style).join("step3")
    }

    pub fn generation(&self, style: DrivingStyle) -> PathBuf {
        self.driver(style).join("generation.json")
    }

    /// Write the config snapshot, or check it against an existing one.
    pub fn bind(&self, cfg: &RunConfig) -> Result<String> {
        ensure_dir(&self.root)?;
        let hash = cfg.hash()?;
        let path = self.config();
        if path.exists() {
            let existing = RunConfig::load(&path)?;
            if existing.hash()? != hash {
                return Err(CcdError::HashMismatch(format!("{} was written by a different configuration", path.display())));
            }
        } else {
            cfg.save(&path)?;
        }
        Ok(hash)
    }
}

/// The road configuration with its seed derived from the master seed.
pub fn road_spectral(cfg: &RunConfig) -> SpectralConfig {
    SpectralConfig { seed: seed::derive(cfg.seed, "road"), ..cfg.road.spectral.clone() }
}

pub fn generate_road(cfg: &RunConfig) -> Result<RoadSurface> {
    let surface = generate_surface(&road_spectral(cfg), (cfg.road.extent[0], cfg.road.extent[1]), cfg.road.resolution)?;
    match &cfg.road.hill {
        Some(h) => surface.add_hill(h),
        None => Ok(surface),
    }
}

/// Load the run's surface, generating and saving it on first use.
pub fn road(cfg: &RunConfig, dir: &RunDir) -> Result<RoadSurface> {
    let path = dir.surface();
    if path.exists() {
        let s = RoadSurface::load(&path)?;
        if s.seed() != road_spectral(cfg).seed {
            return Err(CcdError::HashMismatch(format!("{} was generated with a different seed", path.display())));
        }
        return Ok(s);
    }
    let s = generate_road(cfg)?;
    ensure_dir(path.parent().expect("surface path has a parent"))?;
    s.save(&path)?;
    Ok(s)
}

/// A driver's profile, path and per-step plant inputs.
#[derive(Debug, Clone)]
pub struct Route {
    pub style: DrivingStyle,
    pub profile: DrivingProfile,
    pub trajectory: VehicleTrajectory,
    pub drives: Vec<DrivingCondition>,
    pub roads: Vec<WheelDisturbance>,
}

pub fn build_route(cfg: &RunConfig, surface: &RoadSurface, style: DrivingStyle) -> Result<Route> {
    let profile = build_profile_from(style, cfg.profiles.get(style))?;
    let trajectory = integrate_trajectory(&profile, &cfg.vehicle, cfg.profiles.start);
    let roads = trajectory_disturbances(surface, &trajectory, &cfg.vehicle)?;
    let drives = (0..trajectory.len()).map(|k| trajectory.drive(k)).collect();
    Ok(Route { style, profile, trajectory, drives, roads })
}

/// RMS heave acceleration and mean actuator force of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rms_heave_acc: f64,
    pub mean_abs_u: f64,
    pub steps: usize,
    pub diverged: bool,
}

impl Metrics {
    pub fn from_trace(t: &RouteTrace) -> Self {
        Self { rms_heave_acc: t.rms_heave(), mean_abs_u: t.mean_abs_u(), steps: t.u.len(), diverged: t.diverged_at.is_some() }
    }
}

/// `|before - after| / before * 100`.
pub fn improvement(before: f64, after: f64) -> f64 {
    (before - after).abs() / before * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub style: DrivingStyle,
    pub before: Metrics,
    pub after: Metrics,
    pub rms_heave_acc_improvement: f64,
    pub mean_abs_u_improvement: f64,
}

impl MetricReport {
    pub fn new(style: DrivingStyle, before: Metrics, after: Metrics) -> Self {
        Self {
            style,
            before,
            after,
            rms_heave_acc_improvement: improvement(before.rms_heave_acc, after.rms_heave_acc),
            mean_abs_u_improvement: improvement(before.mean_abs_u, after.mean_abs_u),
        }
    }

    /// `metric,before,after,improvement_pct` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "before", "after", "improvement_pct"])?;
        w.write_record([
            "rms_heave_acc".to_string(),
            self.before.rms_heave_acc.to_string(),
            self.after.rms_heave_acc.to_string(),
            self.rms_heave_acc_improvement.to_string(),
        ])?;
        w.write_record([
            "mean_abs_u".to_string(),
            self.before.mean_abs_u.to_string(),
            self.after.mean_abs_u.to_string(),
            self.mean_abs_u_improvement.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Deterministic mean-action replay of `agent` from the zero state.
pub fn evaluate(agent: &Agent, plant: &Plant, route: &Route, cfg: &RunConfig) -> Result<RouteTrace> {
    simulate_route(plant, &agent.design, &route.drives, &route.roads, &cfg.reward, cfg.dt, |y| agent.act(y))
}

pub const TRACE_HEADER: [&str; 8] = ["t", "heave_acc", "u0", "u1", "u2", "u3", "comfort", "reward"];

pub fn write_trace(path: &Path, trace: &RouteTrace, dt: f64) -> Result<()> {
    let rows = (0..trace.u.len()).map(|k| {
        let u = trace.u[k];
        vec![k as f64 * dt, trace.heave_acc[k], u[0], u[1], u[2], u[3], trace.comfort[k], trace.reward[k]]
    });
    write_table(path, &TRACE_HEADER, rows)
}

/// Recompute metrics from a trace written by [`write_trace`].
pub fn metrics_from_csv(path: &Path) -> Result<Metrics> {
    let (_, rows) = crate::io::read_table(path)?;
    let n = rows.len();
    if n == 0 {
        return Ok(Metrics { rms_heave_acc: 0.0, mean_abs_u: 0.0, steps: 0, diverged: false });
    }
    let rms = (rows.iter().map(|r| r[1] * r[1]).sum::<f64>() / n as f64).sqrt();
    let mean_u = rows.iter().map(|r| r[2..6].iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / (4 * n) as f64;
    Ok(Metrics { rms_heave_acc: rms, mean_abs_u: mean_u, steps: n, diverged: false })
}

fn save_stage(dir: &Path, name: &str, out: &StageOutcome) -> Result<()> {
    out.record.write_csv(&dir.join(format!("{name}_history.csv")))?;
    write_json(&dir.join(format!("{name}_record.json")), &out.record)?;
    Ok(())
}

fn log_epoch(stage: &str, verbose: bool) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        if verbose {
            eprintln!(
                "[{stage}] epoch {:4} return {:10.3} best {:10.3} k_s {:9.2} c_s {:8.2} |u| {:7.2}",
                r.epoch, r.avg_return, r.best_return, r.k_s, r.c_s, r.mean_abs_u
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step0Summary {
    pub gains: [f64; 5],
    pub objective: f64,
    pub zero_gain_objective: f64,
    pub evaluations: usize,
    pub pretrain: PretrainSummary,
    /// Steps completed by the pretrained policy on the nominal plant
    /// (10,000 means no divergence).
    pub nominal_check_steps: usize,
}

/// Step 0: gain search, controller dataset, pretraining.
pub fn run_step0(cfg: &RunConfig, dir: &RunDir, verbose: bool) -> Result<(Agent, Step0Summary)> {
    let out = ensure_dir(&dir.step0())?;
    let nominal = cfg.nominal_plant();
    let search: GainSearch = search_gains(&nominal, &cfg.initial_design, &cfg.warmstart, &cfg.reward, cfg.dt, cfg.seed)?;
    if search.objective >= cfg.warmstart.penalty {
        return Err(CcdError::TrainingAborted("every gain evaluation diverged".into()));
    }
    search.write_csv(&out.join("bo_log.csv"))?;
    if verbose {
        eprintln!("[step0] gains {:?} rms comfort {:.5} (zero gains {:.5})", search.gains.0, search.objective, search.zero_gain_objective);
    }
    let mut rng = seed::rng(cfg.seed, "step0/dataset");
    let ws = &cfg.warmstart;
    let data = controller_dataset(&nominal, &search.gains, &cfg.bounds, ws.dataset_episodes, ws.dataset_len, &cfg.reward, cfg.dt, &mut rng)?;
    let mut rng = seed::rng(cfg.seed, "step0/pretrain");
    let (agent, pretrain) = pretrained_agent(&data, &cfg.bounds, cfg.initial_design, &cfg.nets, &ws.pretrain, &mut rng)?;

    let Scenario::Noise { drive, z_std, zdot_std } = Scenario::first_ccd() else { unreachable!() };
    let (drives, roads) = Scenario::sample_noise(drive, z_std, zdot_std, 10_000, &mut seed::rng(cfg.seed, "step0/check"));
    let check = simulate_route(&nominal, &agent.design, &drives, &roads, &cfg.reward, cfg.dt, |y| agent.act(y))?;

    let summary = Step0Summary {
        gains: search.gains.0,
        objective: search.objective,
        zero_gain_objective: search.zero_gain_objective,
        evaluations: search.history.len(),
        pretrain,
        nominal_check_steps: check.diverged_at.unwrap_or(check.u.len()),
    };
    write_json(&out.join("summary.json"), &summary)?;
    agent.save(&out.join("agent.ckpt"))?;
    Ok((agent, summary))
}

/// Step 1: first co-design on the nominal model under random road noise.
pub fn run_step1(cfg: &RunConfig, dir: &RunDir, agent: Agent, verbose: bool) -> Result<StageOutcome> {
    let out = ensure_dir(&dir.step1())?;
    let plant = cfg.nominal_plant();
    let scenario = Scenario::first_ccd();
    let env = Env { plant: &plant, scenario: &scenario, discrepancy: None, weights: cfg.reward, dt: cfg.dt, history: cfg.first_ccd.design_horizon, error_reset: 0 };
    let spec = StageSpec { name: "step1", ppo: &cfg.first_ccd, bounds: cfg.bounds, train_design: true, rescale_value: true };
    let mut rng = seed::rng(cfg.seed ^ cfg.first_ccd.seed, "step1");
    let res = train_stage(agent, &env, &spec, &mut rng, log_epoch("step1", verbose))?;
    save_stage(&out, "step1", &res)?;
    res.best.save(&out.join("pi1.ckpt"))?;
    Ok(res)
}

pub fn write_route(route: &Route, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    route.profile.write_csv(&dir.join("profile.csv"))?;
    route.trajectory.write_csv(&dir.join("trajectory.csv"))
}

#[derive(Debug, Clone)]
pub struct DeployOutput {
    pub deployment: RouteTrace,
    pub fine_tune: StageOutcome,
    pub errors: ErrorDataset,
}

/// Step 2a: deploy the first-generation agent on the physical vehicle,
/// fine-tune it there with the design fixed and record model errors.
pub fn run_deploy(cfg: &RunConfig, dir: &RunDir, route: &Route, pi1: &Agent, verbose: bool) -> Result<DeployOutput> {
    let style = route.style;
    let out = ensure_dir(&dir.step2(style))?;
    let real = cfg.real_plant();
    let nominal = cfg.nominal_plant();
    let deployment = evaluate(pi1, &real, route, cfg)?;
    write_trace(&out.join("deploy_pi1.csv"), &deployment, cfg.dt)?;
    if let Some(k) = deployment.diverged_at {
        return Err(CcdError::Diverged(format!("{style}: first-generation agent diverged on the physical vehicle at step {k}")));
    }
    let scenario = Scenario::route(route.drives.clone(), route.roads.clone())?;
    let env = Env { plant: &real, scenario: &scenario, discrepancy: None, weights: cfg.reward, dt: cfg.dt, history: 0, error_reset: 0 };
    let spec = StageSpec { name: "finetune", ppo: &cfg.fine_tune, bounds: cfg.bounds, train_design: false, rescale_value: true };
    let mut rng = seed::rng(cfg.seed ^ cfg.fine_tune.seed, &format!("{style}/step2/finetune"));
    let tag = format!("{style}/finetune");
    let fine_tune = train_stage(pi1.clone(), &env, &spec, &mut rng, log_epoch(&tag, verbose))?;
    save_stage(&out, "finetune", &fine_tune)?;
    let pi2 = &fine_tune.best;
    pi2.save(&out.join("pi2.ckpt"))?;
    let errors = collect_errors(&real, &nominal, &pi2.policy, &pi2.encoder, &pi2.design, &route.drives, &route.roads, cfg.dt)?;
    if errors.records.is_empty() {
        return Err(CcdError::Diverged(format!("{style}: no error records (the physical vehicle diverged immediately)")));
    }
    errors.write_csv(&out.join("errors.csv"))?;
    Ok(DeployOutput { deployment, fine_tune, errors })
}

/// Step 2b: fit the quantile discrepancy model on recorded errors.
pub fn run_fit(cfg: &RunConfig, dir: &RunDir, style: DrivingStyle, errors: &ErrorDataset) -> Result<(QuantileModel, FitReport)> {
    let out = ensure_dir(&dir.step2(style))?;
    let (train, validation) = errors.split();
    let mut rng = seed::rng(cfg.seed, &format!("{style}/step2/fit"));
    let (model, report) = fit_quantiles(train, validation, &cfg.discrepancy.fit, &mut rng)?;
    model.save(&out.join("quantile.ckpt"))?;
    write_json(&out.join("fit.json"), &report)?;
    Ok((model, report))
}

/// Step 3: second co-design on the corrected model along the driver route,
/// then before/after evaluation on the physical vehicle.
pub fn run_step3(cfg: &RunConfig, dir: &RunDir, route: &Route, pi1: &Agent, pi2: &Agent, model: &QuantileModel, verbose: bool) -> Result<(StageOutcome, MetricReport)> {
    let style = route.style;
    let out = ensure_dir(&dir.step3(style))?;
    let nominal = cfg.nominal_plant();
    let scenario = Scenario::route(route.drives.clone(), route.roads.clone())?;
    let env = Env {
        plant: &nominal,
        scenario: &scenario,
        discrepancy: Some(model),
        weights: cfg.reward,
        dt: cfg.dt,
        history: cfg.second_ccd.design_horizon,
        error_reset: cfg.discrepancy.error_reset,
    };
    let spec = StageSpec { name: "step3", ppo: &cfg.second_ccd, bounds: cfg.bounds, train_design: true, rescale_value: true };
    let mut rng = seed::rng(cfg.seed ^ cfg.second_ccd.seed, &format!("{style}/step3"));
    let tag = format!("{style}/step3");
    let res = train_stage(pi2.clone(), &env, &spec, &mut rng, log_epoch(&tag, verbose))?;
    save_stage(&out, "step3", &res)?;
    res.best.save(&out.join("pi3.ckpt"))?;

    let real = cfg.real_plant();
    let before = evaluate(pi1, &real, route, cfg)?;
    let after = evaluate(&res.best, &real, route, cfg)?;
    write_trace(&out.join("eval_before.csv"), &before, cfg.dt)?;
    write_trace(&out.join("eval_after.csv"), &after, cfg.dt)?;
    let report = MetricReport::new(style, Metrics::from_trace(&before), Metrics::from_trace(&after));
    write_json(&out.join("metrics.json"), &report)?;
    report.write_csv(&out.join("table.csv"))?;
    Ok((res, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSet {
    pub initial: SuspensionDesign,
    pub p1: SuspensionDesign,
    pub p2: SuspensionDesign,
}

/// Index of one driver branch. Paths are relative to the run root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u32,
    pub style: DrivingStyle,
    pub designs: DesignSet,
    pub checkpoints: Vec<(String, String)>,
    pub discrepancy_model: String,
    pub discrepancy_fit: FitReport,
    pub metrics: MetricReport,
    pub step1_best_epoch: usize,
    pub step3_best_epoch: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl GenerationRecord {
    /// Load and check that every artifact exists and the hash matches.
    pub fn load(dir: &RunDir, style: DrivingStyle, cfg: &RunConfig) -> Result<Self> {
        let rec: Self = read_json(&dir.generation(style))?;
        if rec.config_hash != cfg.hash()? {
            return Err(CcdError::HashMismatch(dir.generation(style).display().to_string()));
        }
        for (_, p) in &rec.checkpoints {
            require(&dir.root.join(p))?;
        }
        require(&dir.root.join(&rec.discrepancy_model))?;
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub step0: Step0Summary,
    pub step1: TrainingRecord,
    pub generations: Vec<GenerationRecord>,
}

fn rel(dir: &RunDir, p: &Path) -> String {
    p.strip_prefix(&dir.root).unwrap_or(p).display().to_string()
}

/// Build and write a driver's GenerationRecord from the artifacts on disk.
pub fn assemble_generation(cfg: &RunConfig, dir: &RunDir, style: DrivingStyle) -> Result<GenerationRecord> {
    let checkpoints = vec![
        ("pi0".to_string(), dir.step0().join("agent.ckpt")),
        ("pi1".to_string(), dir.step1().join("pi1.ckpt")),
        ("pi2".to_string(), dir.step2(style).join("pi2.ckpt")),
        ("pi3".to_string(), dir.step3(style).join("pi3.ckpt")),
    ];
    for (_, p) in &checkpoints {
        require(p)?;
    }
    let model = dir.step2(style).join("quantile.ckpt");
    require(&model)?;
    let step1: TrainingRecord = read_json(&dir.step1().join("step1_record.json"))?;
    let step3: TrainingRecord = read_json(&dir.step3(style).join("step3_record.json"))?;
    let pi1 = Agent::load(&checkpoints[1].1)?;
    let pi3 = Agent::load(&checkpoints[3].1)?;
    let record = GenerationRecord {
        generation: 1,
        style,
        designs: DesignSet { initial: cfg.initial_design, p1: pi1.design, p2: pi3.design },
        checkpoints: checkpoints.iter().map(|(k, p)| (k.clone(), rel(dir, p))).collect(),
        discrepancy_model: rel(dir, &model),
        discrepancy_fit: read_json(&dir.step2(style).join("fit.json"))?,
        metrics: read_json(&dir.step3(style).join("metrics.json"))?,
        step1_best_epoch: step1.best_epoch,
        step3_best_epoch: step3.best_epoch,
        config_hash: cfg.hash()?,
        seed: cfg.seed,
    };
    write_json(&dir.generation(style), &record)?;
    Ok(record)
}

/// Steps 0 through 3 for every configured driver.
pub fn run_all(cfg: &RunConfig, dir: &RunDir, verbose: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = dir.bind(cfg)?;
    let surface = road(cfg, dir)?;
    let (agent0, step0) = run_step0(cfg, dir, verbose)?;
    let s1 = run_step1(cfg, dir, agent0, verbose)?;
    let pi1 = s1.best;
    let mut generations = Vec::new();
    for &style in &cfg.drivers {
        let route = build_route(cfg, &surface, style)?;
        write_route(&route, &dir.driver(style).join("route"))?;
        let deploy = run_deploy(cfg, dir, &route, &pi1, verbose)?;
        let (model, _) = run_fit(cfg, dir, style, &deploy.errors)?;
        let pi2 = deploy.fine_tune.best;
        run_step3(cfg, dir, &route, &pi1, &pi2, &model, verbose)?;
        let record = assemble_generation(cfg, dir, style)?;
        generations.push(record);
    }
    let summary = RunSummary { config_hash: hash, step0, step1: s1.record, generations };
    write_json(&dir.root.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_formula() {
        assert!((improvement(260.167, 147.541) - 43.289).abs() < 1e-3);
        assert!((improvement(0.271812, 0.249357) - 8.261).abs() < 1e-3);
    }
}
