//! Structured P-controller warm start: gain search by Bayesian optimization,
//! then supervised pretraining of the policy mean on the tuned controller.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::bo::{self, BoConfig, Evaluation};
use super::env::{simulate_route, Scenario};
use super::{Agent, RewardWeights};
use crate::error::{CcdError, Result};
use crate::nn::{pretrain_mean, uniform, Encoder, GaussianPolicy, PretrainConfig, PretrainReport, ValueFn, INPUT_DIM};
use crate::seed::{self, Rng};
use crate::vehicle::{DesignBounds, DrivingCondition, Observation, Plant, SuspensionDesign, WheelDisturbance, ACT_DIM, OBS_DIM};

/// The five free gains of the structured feedback matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainVector(pub [f64; 5]);

impl GainVector {
    pub const ZERO: GainVector = GainVector([0.0; 5]);
    /// Gains reported for the reference vehicle.
    pub const REFERENCE: GainVector = GainVector([5000.0, 3000.0, 801.3, 10000.0, -1717.9]);
}

/// Expand gains to the 4x11 feedback matrix. Rows are FL, FR, RL, RR;
/// columns follow the observation layout (body rates, wheel
/// displacements, suspension deflections).
pub fn build_k(g: &GainVector) -> [[f64; OBS_DIM]; ACT_DIM] {
    let [k0, k1, k2, k3, k4] = g.0;
    let signs = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];
    std::array::from_fn(|i| {
        let mut row = [0.0; OBS_DIM];
        row[0] = k0;
        row[1] = signs[i].0 * k1;
        row[2] = signs[i].1 * k2;
        row[3 + i] = k3;
        row[7 + i] = k4;
        row
    })
}

/// `u = -K y`.
pub fn control(k: &[[f64; OBS_DIM]; ACT_DIM], y: &Observation) -> [f64; ACT_DIM] {
    std::array::from_fn(|i| -k[i].iter().zip(&y.0).map(|(a, b)| a * b).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    pub bo: BoConfig,
    pub gain_bounds: [[f64; 2]; 5],
    /// Steps in the objective simulation.
    pub episode_len: usize,
    /// RMS comfort assigned to a diverging evaluation.
    pub penalty: f64,
    /// Skip the search and use these gains.
    pub fixed_gains: Option<GainVector>,
    pub dataset_episodes: usize,
    pub dataset_len: usize,
    pub pretrain: PretrainConfig,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            bo: BoConfig::default(),
            gain_bounds: [[0.0, 10000.0], [0.0, 6000.0], [0.0, 2000.0], [0.0, 20000.0], [-5000.0, 5000.0]],
            episode_len: 1000,
            penalty: 1e6,
            fixed_gains: None,
            dataset_episodes: 20,
            dataset_len: 1000,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSearch {
    pub gains: GainVector,
    pub objective: f64,
    pub zero_gain_objective: f64,
    pub history: Vec<Evaluation>,
}

impl GainSearch {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "k0", "k1", "k2", "k3", "k4", "rms_comfort"])?;
        for (i, e) in self.history.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(e.x.iter().map(|v| v.to_string()));
            row.push(e.y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// RMS comfort index of `u = -K y` along the given inputs; `None` when the
/// closed loop diverges.
pub fn closed_loop_comfort(
    plant: &Plant,
    design: &SuspensionDesign,
    gains: &GainVector,
    drives: &[DrivingCondition],
    roads: &[WheelDisturbance],
    weights: &RewardWeights,
    dt: f64,
) -> Result<Option<f64>> {
    let k = build_k(gains);
    let trace = simulate_route(plant, design, drives, roads, weights, dt, |y| control(&k, y))?;
    Ok(if trace.diverged_at.is_some() { None } else { Some(trace.rms_comfort()) })
}

/// Search the gains on the nominal plant under first-stage noise with a
/// fixed disturbance draw. The zero-gain controller is the first point.
pub fn search_gains(plant: &Plant, design: &SuspensionDesign, cfg: &WarmStartConfig, weights: &RewardWeights, dt: f64, master: u64) -> Result<GainSearch> {
    let Scenario::Noise { drive, z_std, zdot_std } = Scenario::first_ccd() else { unreachable!() };
    let (drives, roads) = Scenario::sample_noise(drive, z_std, zdot_std, cfg.episode_len, &mut seed::rng(master, "warmstart/objective"));
    let score = |g: &GainVector| -> f64 {
        match closed_loop_comfort(plant, design, g, &drives, &roads, weights, dt) {
            Ok(Some(v)) if v.is_finite() => v.min(cfg.penalty),
            _ => cfg.penalty,
        }
    };
    let zero_gain_objective = score(&GainVector::ZERO);
    if let Some(g) = cfg.fixed_gains {
        let objective = score(&g);
        return Ok(GainSearch { gains: g, objective, zero_gain_objective, history: vec![Evaluation { x: g.0.to_vec(), y: objective }] });
    }
    let mut rng = seed::rng(master, "warmstart/bo");
    // The surrogate models log(1 + rms) so the penalty does not dominate.
    let res = bo::minimize(&cfg.gain_bounds, &cfg.bo, &[vec![0.0; 5]], &mut rng, |x| {
        score(&GainVector(std::array::from_fn(|i| x[i]))).ln_1p()
    })?;
    let history: Vec<Evaluation> = res.history.into_iter().map(|e| Evaluation { x: e.x, y: e.y.exp_m1() }).collect();
    let gains = GainVector(std::array::from_fn(|i| res.best_x[i]));
    Ok(GainSearch { gains, objective: res.best_y.exp_m1(), zero_gain_objective, history })
}

/// `(design, observation, action)` triples from the P-controller driving
/// random designs under first-stage noise.
#[allow(clippy::too_many_arguments)]
pub fn controller_dataset(
    plant: &Plant,
    gains: &GainVector,
    bounds: &DesignBounds,
    episodes: usize,
    len: usize,
    weights: &RewardWeights,
    dt: f64,
    rng: &mut Rng,
) -> Result<Vec<(SuspensionDesign, Observation, [f64; ACT_DIM])>> {
    let Scenario::Noise { drive, z_std, zdot_std } = Scenario::first_ccd() else { unreachable!() };
    let k = build_k(gains);
    let mut out = Vec::with_capacity(episodes * len);
    for _ in 0..episodes {
        let design = SuspensionDesign::new(uniform(rng, bounds.k_s[0], bounds.k_s[1]), uniform(rng, bounds.c_s[0], bounds.c_s[1]));
        let (drives, roads) = Scenario::sample_noise(drive, z_std, zdot_std, len, rng);
        let mut seen = Vec::with_capacity(len);
        let trace = simulate_route(plant, &design, &drives, &roads, weights, dt, |y| {
            seen.push(*y);
            control(&k, y)
        })?;
        if trace.diverged_at.is_some() {
            continue;
        }
        out.extend(seen.into_iter().zip(trace.u).map(|(y, u)| (design, y, u)));
    }
    if out.is_empty() {
        return Err(CcdError::TrainingAborted("the warm-start controller diverged on every design".into()));
    }
    Ok(out)
}

/// Network sizes and output scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    /// Force (N) corresponding to a unit mean-network output.
    pub action_scale: f64,
    /// Force (N) multiplying the softplus of the std network.
    pub std_scale: f64,
    pub std_bias: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { policy_hidden: vec![256, 256, 256], value_hidden: vec![256, 256, 256], action_scale: 100.0, std_scale: 15.0, std_bias: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub train_mse: f64,
    pub steps: usize,
    pub train_records: usize,
    pub holdout_records: usize,
    /// Held-out RMS error divided by the RMS of the targets.
    pub holdout_relative_rmse: f64,
}

/// Build an agent whose policy mean imitates the dataset. The encoder is fit
/// on the dataset observations; the last 20% is held out.
pub fn pretrained_agent(
    data: &[(SuspensionDesign, Observation, [f64; ACT_DIM])],
    bounds: &DesignBounds,
    design: SuspensionDesign,
    nets: &NetConfig,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<(Agent, PretrainSummary)> {
    if data.len() < 10 {
        return Err(CcdError::invalid("pretraining needs at least 10 records"));
    }
    let obs: Vec<Observation> = data.iter().map(|d| d.1).collect();
    let encoder = Encoder::fit(bounds, &obs)?;
    let inputs = Array2::from_shape_fn((data.len(), INPUT_DIM), |(r, j)| encoder.encode(&data[r].0, &data[r].1)[j]);
    let targets = Array2::from_shape_fn((data.len(), ACT_DIM), |(r, j)| data[r].2[j]);
    let cut = data.len() * 4 / 5;
    let mut policy = GaussianPolicy::new(&nets.policy_hidden, nets.action_scale, nets.std_scale, nets.std_bias, rng);
    let report: PretrainReport = pretrain_mean(
        &mut policy,
        &inputs.slice(ndarray::s![..cut, ..]).to_owned(),
        &targets.slice(ndarray::s![..cut, ..]).to_owned(),
        cfg,
        rng,
    )?;
    let (pred, _) = policy.mean_std(&inputs.slice(ndarray::s![cut.., ..]).to_owned())?;
    let held = targets.slice(ndarray::s![cut.., ..]);
    let err = (&pred - &held).mapv(|v| v * v).mean().unwrap_or(0.0).sqrt();
    let scale = held.mapv(|v| v * v).mean().unwrap_or(0.0).sqrt().max(1e-12);
    let value = ValueFn::new(&nets.value_hidden, 1.0, rng);
    let summary = PretrainSummary {
        train_mse: report.train_mse,
        steps: report.steps,
        train_records: cut,
        holdout_records: data.len() - cut,
        holdout_relative_rmse: err / scale,
    };
    Ok((Agent { policy, value, encoder, design }, summary))
}
