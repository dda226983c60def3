//! Advantage estimation and the clipped-surrogate update.
//!
//! The design enters the loss through two routes: directly as the first two
//! network inputs, and through the dynamics, by re-integrating the last few
//! simulation steps of each sample with `(k_s, c_s)` on the tape so the
//! observation and the immediate reward become functions of the design.

use ndarray::Array2;

use super::env::Sample;
use super::{Agent, Env, Optimizers, StageSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{CcdError, Result};
use crate::nn::INPUT_DIM;
use crate::vehicle::{observe_generic, rk4, state_derivative, StepInputs, SuspensionDesign, ACT_DIM, OBS_DIM, STATE_DIM};

/// Generalized advantage estimation. `dones[k]` marks the last step of an
/// episode, after which the next value is zero.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for k in (0..n).rev() {
        let last = dones[k] || k + 1 == n;
        let next_value = if last { 0.0 } else { values[k + 1] };
        if last {
            running = 0.0;
        }
        let delta = rewards[k] + gamma * next_value - values[k];
        running = delta + gamma * lambda * running;
        adv[k] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Shift to mean 0 and scale to std 1; also returns the std used.
pub fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    (v.iter().map(|x| (x - mean) / std).collect(), std)
}

/// Scalar clipped-surrogate loss for one sample, `-min(ρA, clip(ρ)A)`.
pub fn surrogate_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    -(ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Traced mean clipped-surrogate loss.
pub fn clipped_surrogate<'t>(ratio: Var<'t>, adv: Var<'t>, eps: f64) -> Var<'t> {
    -(ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv).mean()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Loss gradient with respect to `(k_s, c_s)` in physical units.
    pub grad_design: [f64; 2],
}

impl UpdateStats {
    pub fn accumulate(&mut self, o: &UpdateStats) {
        self.loss += o.loss;
        self.policy_loss += o.policy_loss;
        self.value_loss += o.value_loss;
        self.grad_design[0] += o.grad_design[0];
        self.grad_design[1] += o.grad_design[1];
    }
}

fn column<'t>(tape: &'t Tape, n: usize, f: impl Fn(usize) -> f64) -> Var<'t> {
    tape.leaf(Array2::from_shape_fn((n, 1), |(r, _)| f(r)))
}

fn inputs_var<'t>(tape: &'t Tape, rows: &[Option<&StepInputs<f64>>]) -> StepInputs<Var<'t>> {
    let n = rows.len();
    let get = |f: &dyn Fn(&StepInputs<f64>) -> f64| column(tape, n, |r| rows[r].map_or(0.0, f));
    StepInputs {
        u: std::array::from_fn(|i| get(&|s| s.u[i])),
        z_r: std::array::from_fn(|i| get(&|s| s.z_r[i])),
        zdot_r: std::array::from_fn(|i| get(&|s| s.zdot_r[i])),
        m_alpha: get(&|s| s.m_alpha),
        m_beta: get(&|s| s.m_beta),
    }
}

/// Observation and reward of each sample traced as functions of the design
/// features `p`.
fn traced_obs_reward<'t>(tape: &'t Tape, p: Var<'t>, batch: &[&Sample], agent: &Agent, env: &Env) -> (Var<'t>, Var<'t>) {
    let n = batch.len();
    let params = env.plant.params();
    let k_s = p.col(0) * agent.encoder.design_scale[0];
    let c_s = p.col(1) * agent.encoder.design_scale[1];
    let f = |x: &[Var<'t>; STATE_DIM], inp: &StepInputs<Var<'t>>| state_derivative(x, inp, k_s, c_s, params, None);

    let mut x: [Var<'t>; STATE_DIM] = std::array::from_fn(|i| column(tape, n, |r| batch[r].anchor.0[i]));
    let depth = batch.iter().map(|s| s.past.len()).max().unwrap_or(0);
    for j in (1..=depth).rev() {
        let rows: Vec<Option<&StepInputs<f64>>> = batch.iter().map(|s| if s.past.len() >= j { Some(&s.past[s.past.len() - j]) } else { None }).collect();
        let mask = column(tape, n, |r| if rows[r].is_some() { 1.0 } else { 0.0 });
        let inp = inputs_var(tape, &rows);
        let next = rk4(&x, env.dt, |s| f(s, &inp));
        x = std::array::from_fn(|i| x[i] + (next[i] - x[i]) * mask);
    }

    let offsets = tape.leaf(Array2::from_shape_fn((n, OBS_DIM), |(r, j)| batch[r].obs_offset[j]));
    let obs = Var::concat(&observe_generic(&x)) + offsets;

    let rows: Vec<Option<&StepInputs<f64>>> = batch.iter().map(|s| Some(&s.inputs)).collect();
    let d = f(&x, &inputs_var(tape, &rows));
    let w = &env.weights;
    let acc: [Var<'t>; 3] = std::array::from_fn(|i| d[7 + i] + column(tape, n, |r| batch[r].acc_offset[i]));
    let comfort = ((acc[0] * w.w1).square() + (acc[1] * w.w2).square() + (acc[2] * w.w3).square() + 1e-12).sqrt();
    let fixed = column(tape, n, |r| {
        let s = batch[r];
        w.c3 * s.action.iter().map(|u| u * u).sum::<f64>() + s.extra_cost
    });
    let cost = comfort + x[1].square() * w.c1 + x[2].square() * w.c2 + fixed;
    (obs, -cost)
}

/// Loss gradients of one minibatch, in the parameter layout of each network.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub policy: Vec<Array2<f64>>,
    pub value: Vec<Array2<f64>>,
    /// With respect to the design features.
    pub design: Array2<f64>,
}

/// Minibatch loss and its gradients, without touching the agent.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss(
    agent: &Agent,
    samples: &[Sample],
    idx: &[usize],
    adv: &[f64],
    adv_std: f64,
    targets: &[f64],
    env: &Env,
    spec: &StageSpec,
) -> Result<(UpdateStats, LossGrads)> {
    ppo_loss_at(agent, &agent.design, samples, idx, adv, adv_std, targets, env, spec)
}

/// As [`ppo_loss`], with the traced reward measured against its value at
/// `baseline` instead of the current design. The extra advantage term is
/// `(r(p) - r(baseline)) / adv_std`, so its value vanishes at the baseline
/// while its gradient does not.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss_at(
    agent: &Agent,
    baseline: &SuspensionDesign,
    samples: &[Sample],
    idx: &[usize],
    adv: &[f64],
    adv_std: f64,
    targets: &[f64],
    env: &Env,
    spec: &StageSpec,
) -> Result<(UpdateStats, LossGrads)> {
    if idx.is_empty() {
        return Err(CcdError::invalid("empty minibatch"));
    }
    let cfg = spec.ppo;
    let n = idx.len();
    let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let tape = Tape::new();
    let pol = agent.policy.leaves(&tape);
    let val = agent.value.net.leaves(&tape);
    let features = agent.encoder.design_features(&agent.design);
    let p = tape.leaf(Array2::from_shape_vec((1, 2), features.to_vec()).expect("shape"));
    let adv_col = column(&tape, n, |r| adv[idx[r]]);

    let (input, adv_var) = if spec.train_design {
        let (obs, reward) = traced_obs_reward(&tape, p, &batch, agent, env);
        let fixed = if *baseline == agent.design {
            tape.leaf(reward.value())
        } else {
            let aside = Tape::new();
            let q = aside.leaf(Array2::from_shape_vec((1, 2), agent.encoder.design_features(baseline).to_vec()).expect("shape"));
            tape.leaf(traced_obs_reward(&aside, q, &batch, agent, env).1.value())
        };
        (agent.encoder.encode_var(p, obs), adv_col + (reward - fixed) * (1.0 / adv_std))
    } else {
        (tape.leaf(Array2::from_shape_fn((n, INPUT_DIM), |(r, j)| batch[r].input[j])), adv_col)
    };

    let actions = tape.leaf(Array2::from_shape_fn((n, ACT_DIM), |(r, j)| batch[r].action[j]));
    let old = column(&tape, n, |r| batch[r].log_prob);
    let ratio = (pol.log_prob(input, actions) - old).exp();
    let policy_loss = clipped_surrogate(ratio, adv_var, cfg.clip_eps);
    let scale = agent.value.output_scale;
    let target = column(&tape, n, |r| targets[idx[r]] / scale);
    let value_loss = (val.forward(input) - target).smooth_l1().mean();
    let loss = policy_loss + value_loss * cfg.c_v;

    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(CcdError::TrainingAborted(format!("non-finite loss {loss_value}")));
    }
    let g = tape.backward(loss)?;
    let mut policy = pol.mean.grads(&g);
    policy.extend(pol.std.grads(&g));
    let design = g.wrt(p);
    let stats = UpdateStats {
        loss: loss_value,
        policy_loss: policy_loss.item(),
        value_loss: value_loss.item(),
        grad_design: [design[(0, 0)] / agent.encoder.design_scale[0], design[(0, 1)] / agent.encoder.design_scale[1]],
    };
    Ok((stats, LossGrads { policy, value: val.grads(&g), design }))
}

/// One gradient step on a minibatch. `adv` is normalized with `adv_std`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    agent: &mut Agent,
    opt: &mut Optimizers,
    samples: &[Sample],
    idx: &[usize],
    adv: &[f64],
    adv_std: f64,
    targets: &[f64],
    env: &Env,
    spec: &StageSpec,
) -> Result<UpdateStats> {
    let (stats, g) = ppo_loss(agent, samples, idx, adv, adv_std, targets, env, spec)?;
    // Validate everything before touching any parameter.
    if g.policy.iter().chain(&g.value).chain(std::iter::once(&g.design)).any(|a| a.iter().any(|v| !v.is_finite())) {
        return Err(CcdError::TrainingAborted("non-finite gradient".into()));
    }
    opt.policy.step(&mut agent.policy.params_mut(), &g.policy)?;
    opt.value.step(&mut agent.value.net.params_mut(), &g.value)?;
    if spec.train_design {
        let features = agent.encoder.design_features(&agent.design);
        let mut f = Array2::from_shape_vec((1, 2), features.to_vec()).expect("shape");
        opt.design.step(&mut [&mut f], &[g.design])?;
        agent.design = spec.bounds.project(agent.encoder.design_from_features([f[(0, 0)], f[(0, 1)]]));
    }
    Ok(stats)
}
