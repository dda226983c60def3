//! Co-design training: the structured P-controller warm start, rollouts,
//! advantage estimation and the clipped-surrogate update over policy, value
//! function and suspension design.

pub mod bo;
pub mod env;
pub mod ppo;
pub mod warmstart;

use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};
use crate::nn::{Adam, AdamConfig, Checkpoint, Encoder, GaussianPolicy, RngState, ValueFn};
use crate::seed::Rng;
use crate::vehicle::{DesignBounds, SuspensionDesign, ACT_DIM, OBS_DIM};

pub use env::{rollout, simulate_route, Env, EpisodeStat, Rollout, RouteTrace, Sample, Scenario};
pub use ppo::{compute_gae, normalize, ppo_loss, ppo_loss_at, ppo_update, surrogate_term, LossGrads, UpdateStats};
pub use warmstart::{build_k, control, GainVector};

/// Reward weights. `lambda_u` only matters when an uncertainty term is
/// supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub lambda_u: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w1: 10.0, w2: 1.0, w3: 0.5, c1: 1.0 / 0.00004, c2: 1.0 / 0.00003, c3: 0.0001, lambda_u: 1.0 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w2, self.w3, self.c1, self.c2, self.c3, self.lambda_u];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CcdError::invalid("reward weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn comfort(&self, acc: &[f64; 3]) -> f64 {
        ((self.w1 * acc[0]).powi(2) + (self.w2 * acc[1]).powi(2) + (self.w3 * acc[2]).powi(2)).sqrt()
    }

    /// Positive cost: comfort plus attitude and effort penalties.
    pub fn cost(&self, acc: &[f64; 3], alpha: f64, beta: f64, u: &[f64; ACT_DIM]) -> f64 {
        self.comfort(acc) + self.c1 * alpha * alpha + self.c2 * beta * beta + self.c3 * u.iter().map(|v| v * v).sum::<f64>()
    }

    /// Uncertainty penalty from quantile widths of the observation error.
    ///
    /// Channels 0..3 of the observation are body velocities; a velocity band
    /// of width `w` over one step spans an acceleration band of `w/dt` and an
    /// angle band of `w·dt`.
    pub fn uncertainty(&self, width: &[f64; OBS_DIM], dt: f64) -> f64 {
        let acc = [width[0] / dt, width[1] / dt, width[2] / dt];
        let d_alpha = width[1] * dt;
        let d_beta = width[2] * dt;
        self.comfort(&acc) + self.c1 * d_alpha * d_alpha + self.c2 * d_beta * d_beta
    }
}

/// Comfort index and reward for one step.
pub fn comfort_and_reward(acc: &[f64; 3], alpha: f64, beta: f64, u: &[f64; ACT_DIM], w: &RewardWeights) -> (f64, f64) {
    (w.comfort(acc), -w.cost(acc, alpha, beta, u))
}

/// Reward including an uncertainty penalty `j_unc`.
pub fn augmented_reward(acc: &[f64; 3], alpha: f64, beta: f64, u: &[f64; ACT_DIM], j_unc: f64, w: &RewardWeights) -> f64 {
    -(w.cost(acc, alpha, beta, u) + w.lambda_u * j_unc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub c_v: f64,
    pub rollout_len: usize,
    /// Steps per episode inside a rollout; episodes are truncated here.
    pub episode_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub design_lr: f64,
    /// Simulation steps re-traced through the dynamics for the design
    /// gradient (0 keeps only the direct input path).
    pub design_horizon: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            c_v: 0.5,
            rollout_len: 1000,
            episode_len: 1000,
            epochs: 10,
            minibatch: 256,
            patience: 100,
            max_epochs: 2000,
            lr: 3e-4,
            design_lr: 1e-3,
            design_horizon: 1,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CcdError::invalid(format!("gamma must be in (0,1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(CcdError::invalid("lambda_gae must be in [0,1]"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(CcdError::invalid(format!("clip_eps must be in (0,1), got {}", self.clip_eps)));
        }
        if self.patience == 0 {
            return Err(CcdError::invalid("patience must be at least 1"));
        }
        if self.rollout_len == 0 || self.episode_len == 0 || self.minibatch == 0 || self.epochs == 0 || self.max_epochs == 0 {
            return Err(CcdError::invalid("rollout, episode, minibatch and epoch counts must be positive"));
        }
        if !(self.c_v >= 0.0 && self.lr > 0.0 && self.design_lr >= 0.0) {
            return Err(CcdError::invalid("c_v and learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// Everything a policy needs at deployment, plus the value function.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: GaussianPolicy,
    pub value: ValueFn,
    pub encoder: Encoder,
    pub design: SuspensionDesign,
}

impl Agent {
    pub fn act(&self, obs: &crate::vehicle::Observation) -> [f64; ACT_DIM] {
        self.policy.deterministic(&self.encoder.encode(&self.design, obs))
    }

    fn checkpoint(&self, kind: &str, extra: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            kind,
            serde_json::json!({
                "policy": self.policy.meta(),
                "value": self.value.meta(),
                "encoder": self.encoder,
                "design": self.design,
                "extra": extra,
            }),
        );
        self.policy.push_tensors("policy", &mut ck.tensors);
        self.value.push_tensors("value", &mut ck.tensors);
        ck
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.checkpoint("agent", serde_json::Value::Null).save(path)
    }

    fn from_ck(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        Ok(Self {
            policy: GaussianPolicy::from_checkpoint(ck, "policy", &m["policy"])?,
            value: ValueFn::from_checkpoint(ck, "value", &m["value"])?,
            encoder: serde_json::from_value(m["encoder"].clone())?,
            design: serde_json::from_value(m["design"].clone())?,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_ck(&Checkpoint::load(path)?)
    }
}

/// Optimizer state for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub policy: Adam,
    pub value: Adam,
    pub design: Adam,
}

impl Optimizers {
    pub fn new(agent: &Agent, cfg: &PpoConfig) -> Self {
        let net = AdamConfig::with_lr(cfg.lr);
        Self {
            policy: Adam::new(net, &agent.policy.shapes()),
            value: Adam::new(net, &agent.value.net.shapes()),
            design: Adam::new(AdamConfig::with_lr(cfg.design_lr), &[(1, 2)]),
        }
    }
}

/// Full resumable training state.
pub fn save_training_state(path: &std::path::Path, agent: &Agent, opt: &Optimizers, rng: &Rng, epoch: usize) -> Result<()> {
    let extra = serde_json::json!({
        "epoch": epoch,
        "rng": RngState::capture(rng),
        "adam_policy": opt.policy.meta(),
        "adam_value": opt.value.meta(),
        "adam_design": opt.design.meta(),
    });
    let mut ck = agent.checkpoint("training-state", extra);
    opt.policy.push_tensors("adam_policy", &mut ck.tensors);
    opt.value.push_tensors("adam_value", &mut ck.tensors);
    opt.design.push_tensors("adam_design", &mut ck.tensors);
    ck.save(path)
}

pub fn load_training_state(path: &std::path::Path) -> Result<(Agent, Optimizers, Rng, usize)> {
    let ck = Checkpoint::load(path)?;
    let agent = Agent::from_ck(&ck)?;
    let extra = &ck.meta["extra"];
    let opt = Optimizers {
        policy: Adam::from_checkpoint(&ck, "adam_policy", &extra["adam_policy"])?,
        value: Adam::from_checkpoint(&ck, "adam_value", &extra["adam_value"])?,
        design: Adam::from_checkpoint(&ck, "adam_design", &extra["adam_design"])?,
    };
    let rng: RngState = serde_json::from_value(extra["rng"].clone())?;
    let epoch = extra["epoch"].as_u64().ok_or_else(|| CcdError::Format { path: path.display().to_string(), reason: "missing epoch".into() })? as usize;
    Ok((agent, opt, rng.restore()?, epoch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub avg_return: f64,
    pub avg_step_reward: f64,
    pub best_return: f64,
    pub k_s: f64,
    pub c_s: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub grad_k_s: f64,
    pub grad_c_s: f64,
    pub mean_std: f64,
    pub mean_abs_u: f64,
    pub episodes: usize,
    pub diverged: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_return: f64,
    pub stop_reason: StopReason,
}

impl TrainingRecord {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The `(k_s, c_s)` trace, one entry per epoch.
    pub fn design_trace(&self) -> Vec<SuspensionDesign> {
        self.epochs.iter().map(|e| SuspensionDesign::new(e.k_s, e.c_s)).collect()
    }
}

/// Stage settings around the PPO loop.
#[derive(Debug, Clone)]
pub struct StageSpec<'a> {
    pub name: &'a str,
    pub ppo: &'a PpoConfig,
    pub bounds: DesignBounds,
    pub train_design: bool,
    /// Epoch at which the value output scale is refit from the first batch.
    pub rescale_value: bool,
}

/// Result of a training stage: the best agent by average return.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub best: Agent,
    pub last: Agent,
    pub record: TrainingRecord,
}

const MAX_CONSECUTIVE_SKIPS: usize = 3;

/// Rollout, GAE, clipped-surrogate update; repeat until `max_epochs` or
/// `patience` epochs without a new best average return.
pub fn train_stage(
    agent: Agent,
    env: &Env,
    spec: &StageSpec,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<StageOutcome> {
    let cfg = spec.ppo;
    cfg.validate()?;
    spec.bounds.validate()?;
    if spec.train_design && env.plant.is_real() {
        return Err(CcdError::invalid("design updates require the nominal model"));
    }
    let mut agent = agent;
    agent.design = spec.bounds.project(agent.design);
    let mut opt = Optimizers::new(&agent, cfg);
    let mut best = agent.clone();
    let mut best_return = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut skips = 0;
    let mut diverged_epochs = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let snapshot = (agent.clone(), opt.clone());
        let batch = rollout(env, &agent, cfg.rollout_len, cfg.episode_len, true, rng)?;
        let episodes = batch.episodes.len();
        let diverged = batch.episodes.iter().filter(|e| e.diverged).count();
        if diverged > 0 {
            diverged_epochs += 1;
        }
        if epoch >= 10 && diverged_epochs * 2 > epoch + 1 {
            return Err(CcdError::TrainingAborted(format!(
                "{}: {} of {} epochs contained a diverging episode (last: {diverged}/{episodes} episodes)",
                spec.name,
                diverged_epochs,
                epoch + 1
            )));
        }
        let avg_return = batch.episodes.iter().map(|e| e.ret).sum::<f64>() / episodes as f64;
        let n = batch.samples.len() as f64;
        let avg_step_reward = batch.samples.iter().map(|s| s.reward).sum::<f64>() / n;
        let mean_abs_u = batch.samples.iter().map(|s| s.action.iter().map(|a| a.abs()).sum::<f64>()).sum::<f64>() / (n * ACT_DIM as f64);

        if avg_return > best_return {
            best_return = avg_return;
            best_epoch = epoch;
            best = agent.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }

        let rewards: Vec<f64> = batch.samples.iter().map(|s| s.reward).collect();
        let dones: Vec<bool> = batch.samples.iter().map(|s| s.done).collect();
        if epoch == 0 && spec.rescale_value {
            let (_, targets) = compute_gae(&rewards, &vec![0.0; rewards.len()], &dones, cfg.gamma, 1.0);
            let scale = targets.iter().map(|t| t.abs()).sum::<f64>() / targets.len() as f64;
            agent.value.rescale(scale.max(1.0));
        }
        let values: Vec<f64> = batch.samples.iter().map(|s| agent.value.value(&s.input)).collect();
        let (adv, targets) = compute_gae(&rewards, &values, &dones, cfg.gamma, cfg.lambda_gae);
        let (adv, adv_std) = normalize(&adv);

        let mut stats = UpdateStats::default();
        let mut count = 0.0f64;
        let mut failed = false;
        'outer: for _ in 0..cfg.epochs {
            for mb in crate::nn::minibatches(batch.samples.len(), cfg.minibatch, rng) {
                match ppo_update(&mut agent, &mut opt, &batch.samples, &mb, &adv, adv_std, &targets, env, spec) {
                    Ok(s) => {
                        stats.accumulate(&s);
                        count += 1.0;
                    }
                    Err(CcdError::TrainingAborted(_)) => {
                        failed = true;
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if failed {
            (agent, opt) = snapshot;
            skips += 1;
            if skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(CcdError::TrainingAborted(format!("{}: non-finite loss in {skips} consecutive epochs", spec.name)));
            }
        } else {
            skips = 0;
        }
        let count = count.max(1.0);
        let rec = EpochRecord {
            epoch,
            avg_return,
            avg_step_reward,
            best_return,
            k_s: agent.design.k_s,
            c_s: agent.design.c_s,
            policy_loss: stats.policy_loss / count,
            value_loss: stats.value_loss / count,
            grad_k_s: stats.grad_design[0] / count,
            grad_c_s: stats.grad_design[1] / count,
            mean_std: batch.mean_std,
            mean_abs_u,
            episodes,
            diverged,
            skipped: failed,
        };
        on_epoch(&rec);
        epochs.push(rec);
        if since_best >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let record = TrainingRecord { stage: spec.name.to_string(), epochs, best_epoch, best_return, stop_reason };
    Ok(StageOutcome { best, last: agent, record })
}
