//! Training environments and rollout collection.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{Agent, RewardWeights};
use crate::discrepancy::{features, QuantileModel};
use crate::error::{CcdError, Result};
use crate::nn::{gaussian_log_prob, INPUT_DIM};
use crate::seed::Rng;
use crate::vehicle::{observe, DrivingCondition, FullState, Observation, Plant, StepInputs, SuspensionDesign, WheelDisturbance, ACT_DIM, OBS_DIM};

/// Where the exogenous inputs come from.
#[derive(Debug, Clone)]
pub enum Scenario {
    /// Constant driving condition with i.i.d. Gaussian wheel inputs, from the
    /// zero state.
    Noise { drive: DrivingCondition, z_std: f64, zdot_std: f64 },
    /// Segments of a recorded route. Each episode starts at a random index
    /// with the vehicle settled on the road there.
    Route { drives: Vec<DrivingCondition>, roads: Vec<WheelDisturbance> },
}

impl Scenario {
    /// Straight driving at 10 m/s on small random wheel inputs.
    pub fn first_ccd() -> Self {
        Scenario::Noise { drive: DrivingCondition::new(10.0, 0.0, 0.0), z_std: 0.001, zdot_std: 0.1 }
    }

    pub fn route(drives: Vec<DrivingCondition>, roads: Vec<WheelDisturbance>) -> Result<Self> {
        if drives.len() != roads.len() || drives.is_empty() {
            return Err(CcdError::Shape(format!("route needs equal nonempty series, got {} drives and {} roads", drives.len(), roads.len())));
        }
        Ok(Scenario::Route { drives, roads })
    }

    /// Pre-draw `n` steps of a noise scenario so it can be replayed.
    pub fn sample_noise(drive: DrivingCondition, z_std: f64, zdot_std: f64, n: usize, rng: &mut Rng) -> (Vec<DrivingCondition>, Vec<WheelDisturbance>) {
        let roads = (0..n).map(|_| noise_disturbance(z_std, zdot_std, rng)).collect();
        (vec![drive; n], roads)
    }
}

fn noise_disturbance(z_std: f64, zdot_std: f64, rng: &mut Rng) -> WheelDisturbance {
    let mut d = WheelDisturbance::default();
    for i in 0..4 {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        d.z_r[i] = z_std * a;
        d.zdot_r[i] = zdot_std * b;
    }
    d
}

/// A plant, a scenario and the reward definition.
///
/// With `discrepancy` set the state evolves on the nominal plant while the
/// observation carries the predicted median error, and each step pays the
/// uncertainty penalty of the predicted quantile band.
#[derive(Debug, Clone)]
pub struct Env<'a> {
    pub plant: &'a Plant,
    pub scenario: &'a Scenario,
    pub discrepancy: Option<&'a QuantileModel>,
    pub weights: RewardWeights,
    pub dt: f64,
    /// Steps of input history kept per sample for re-tracing the dynamics.
    pub history: usize,
    /// Zero the fed-back error every this many steps (0: never).
    pub error_reset: usize,
}

/// One transition with enough context to rebuild it as a function of the
/// design.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: [f64; INPUT_DIM],
    pub action: [f64; ACT_DIM],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Last step of its episode; the next value is taken as zero.
    pub done: bool,
    pub state: FullState,
    pub inputs: StepInputs<f64>,
    /// State `history.len()` steps back, where re-tracing starts.
    pub anchor: FullState,
    pub past: Vec<StepInputs<f64>>,
    pub obs_offset: [f64; OBS_DIM],
    pub acc_offset: [f64; 3],
    /// Cost that does not depend on the design (the uncertainty penalty).
    pub extra_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStat {
    pub ret: f64,
    pub len: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub samples: Vec<Sample>,
    pub episodes: Vec<EpisodeStat>,
    pub mean_std: f64,
}

/// Collect `len` transitions in episodes of at most `episode_len` steps.
///
/// `stochastic = false` plays the mean action.
pub fn rollout(env: &Env, agent: &Agent, len: usize, episode_len: usize, stochastic: bool, rng: &mut Rng) -> Result<Rollout> {
    if len == 0 || episode_len == 0 {
        return Err(CcdError::invalid("rollout length must be at least 1"));
    }
    let mut out = Rollout { samples: Vec::with_capacity(len), episodes: Vec::new(), mean_std: 0.0 };
    let mut std_sum = 0.0;
    while out.samples.len() < len {
        let budget = episode_len.min(len - out.samples.len());
        let stat = run_episode(env, agent, budget, stochastic, rng, &mut out.samples, &mut std_sum)?;
        out.episodes.push(stat);
    }
    out.mean_std = std_sum / (out.samples.len() * ACT_DIM) as f64;
    Ok(out)
}

fn run_episode(env: &Env, agent: &Agent, budget: usize, stochastic: bool, rng: &mut Rng, samples: &mut Vec<Sample>, std_sum: &mut f64) -> Result<EpisodeStat> {
    let params = env.plant.params();
    let design = agent.design;
    let (mut x, start, steps) = match env.scenario {
        Scenario::Noise { .. } => (FullState::ZERO, 0, budget),
        Scenario::Route { roads, .. } => {
            let steps = budget.min(roads.len());
            let start = if roads.len() > steps { rng.random_range(0..=roads.len() - steps) } else { 0 };
            (FullState::settled_on(&roads[start], params), start, steps)
        }
    };
    let mut err = [0.0; OBS_DIM];
    let mut states = vec![x];
    let mut inputs_hist: Vec<StepInputs<f64>> = Vec::new();
    let mut stat = EpisodeStat { ret: 0.0, len: 0, diverged: false };
    let first = samples.len();
    for k in 0..steps {
        let (drive, road) = match env.scenario {
            Scenario::Noise { drive, z_std, zdot_std } => (*drive, noise_disturbance(*z_std, *zdot_std, rng)),
            Scenario::Route { drives, roads } => (drives[start + k], roads[start + k]),
        };
        if env.error_reset > 0 && k > 0 && k % env.error_reset == 0 {
            err = [0.0; OBS_DIM];
        }
        let y_nom = observe(&x);
        let y = Observation(std::array::from_fn(|i| y_nom.0[i] + err[i]));
        let input = agent.encoder.encode(&design, &y);
        let row = ndarray::Array2::from_shape_vec((1, INPUT_DIM), input.to_vec()).expect("row");
        let (m, s) = agent.policy.mean_std(&row)?;
        let mean: [f64; ACT_DIM] = std::array::from_fn(|i| m[(0, i)]);
        let std: [f64; ACT_DIM] = std::array::from_fn(|i| s[(0, i)]);
        *std_sum += std.iter().sum::<f64>();
        let action: [f64; ACT_DIM] = if stochastic {
            std::array::from_fn(|i| {
                let z: f64 = StandardNormal.sample(rng);
                mean[i] + std[i] * z
            })
        } else {
            mean
        };
        let log_prob = gaussian_log_prob(&mean, &std, &action);
        let value = agent.value.value(&input);

        let (next_err, extra_cost) = match env.discrepancy {
            Some(model) => {
                let q = model.predict(&features(&err, &y, &action, &drive));
                (q.median, env.weights.lambda_u * env.weights.uncertainty(&q.width(), env.dt))
            }
            None => (err, 0.0),
        };
        let acc_offset: [f64; 3] = std::array::from_fn(|i| (next_err[i] - err[i]) / env.dt);
        let acc = env.plant.body_accelerations(&x, &action, &drive, &road, &design);
        let acc = std::array::from_fn(|i| acc[i] + acc_offset[i]);
        let reward = -(env.weights.cost(&acc, x.alpha(), x.beta(), &action) + extra_cost);

        let inputs = StepInputs::new(&env.plant.saturate(&action), &drive, &road, params);
        let next = env.plant.step(&x, &action, &drive, &road, &design, env.dt);
        let h = env.history.min(k);
        samples.push(Sample {
            input,
            action,
            log_prob,
            value,
            reward,
            done: false,
            state: x,
            inputs,
            anchor: states[k - h],
            past: inputs_hist[k - h..].to_vec(),
            obs_offset: err,
            acc_offset,
            extra_cost,
        });
        stat.ret += reward;
        stat.len += 1;
        match next {
            Ok(n) => {
                x = n;
                err = next_err;
                states.push(x);
                inputs_hist.push(inputs);
            }
            Err(_) => {
                stat.diverged = true;
                break;
            }
        }
    }
    if samples.len() > first {
        samples.last_mut().expect("nonempty").done = true;
    }
    Ok(stat)
}

/// A deterministic closed-loop run over a full route.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouteTrace {
    /// Body heave acceleration per step.
    pub heave_acc: Vec<f64>,
    pub u: Vec<[f64; ACT_DIM]>,
    pub comfort: Vec<f64>,
    pub reward: Vec<f64>,
    /// Index of the step that diverged, if any.
    pub diverged_at: Option<usize>,
}

impl RouteTrace {
    pub fn rms_heave(&self) -> f64 {
        rms(&self.heave_acc)
    }

    pub fn rms_comfort(&self) -> f64 {
        rms(&self.comfort)
    }

    /// Mean absolute actuator force over steps and corners.
    pub fn mean_abs_u(&self) -> f64 {
        if self.u.is_empty() {
            return 0.0;
        }
        self.u.iter().flat_map(|u| u.iter()).map(|v| v.abs()).sum::<f64>() / (self.u.len() * ACT_DIM) as f64
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt()
}

/// Run `controller` on `plant` from the zero state along the given inputs.
pub fn simulate_route(
    plant: &Plant,
    design: &SuspensionDesign,
    drives: &[DrivingCondition],
    roads: &[WheelDisturbance],
    weights: &RewardWeights,
    dt: f64,
    mut controller: impl FnMut(&Observation) -> [f64; ACT_DIM],
) -> Result<RouteTrace> {
    if drives.len() != roads.len() {
        return Err(CcdError::Shape(format!("{} drives vs {} roads", drives.len(), roads.len())));
    }
    let mut trace = RouteTrace::default();
    let mut x = FullState::ZERO;
    for (k, (drive, road)) in drives.iter().zip(roads).enumerate() {
        let u = controller(&observe(&x));
        let applied = plant.saturate(&u);
        let acc = plant.body_accelerations(&x, &applied, drive, road, design);
        let (c, r) = super::comfort_and_reward(&acc, x.alpha(), x.beta(), &u, weights);
        trace.heave_acc.push(acc[0]);
        trace.u.push(u);
        trace.comfort.push(c);
        trace.reward.push(r);
        match plant.step(&x, &u, drive, road, design, dt) {
            Ok(n) => x = n,
            Err(_) => {
                trace.diverged_at = Some(k);
                break;
            }
        }
    }
    Ok(trace)
}
