//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use ccd_core::nn::{Encoder, GaussianPolicy, ValueFn};
use ccd_core::road::{generate_surface, RoadSurface, SpectralConfig};
use ccd_core::trainer::*;
use ccd_core::vehicle::*;

/// Full-vehicle derivative assembled in matrix form: corner geometry
/// `T = [1, dx, dy]`, body `M q'' = T^T F + moments`, wheels
/// `m_u z_u'' = F_t - F`.
pub fn oracle_derivative(
    x: &[f64; 14],
    u: &[f64; 4],
    drive: &DrivingCondition,
    road: &WheelDisturbance,
    design: &SuspensionDesign,
    p: &VehicleParams,
    nonlinear: Option<(f64, f64)>,
) -> [f64; 14] {
    let dx = [-p.l_f, -p.l_f, p.l_r, p.l_r];
    let dy = [p.l / 2.0, -p.l / 2.0, p.l / 2.0, -p.l / 2.0];
    let t = DMatrix::from_fn(4, 3, |i, j| match j {
        0 => 1.0,
        1 => dx[i],
        _ => dy[i],
    });
    let q = DVector::from_vec(vec![x[0], x[1], x[2]]);
    let qd = DVector::from_vec(vec![x[7], x[8], x[9]]);
    let zu = DVector::from_fn(4, |i, _| x[3 + i]);
    let zud = DVector::from_fn(4, |i, _| x[10 + i]);
    let rel = &zu - &t * &q;
    let rel_v = &zud - &t * &qd;
    let mut f = DVector::from_fn(4, |i, _| design.k_s * rel[i] + design.c_s * rel_v[i] + u[i]);
    if let Some((knl, cnl)) = nonlinear {
        for i in 0..4 {
            f[i] += knl * rel[i].powi(3) + cnl * rel_v[i] * rel_v[i].abs();
        }
    }
    let m_alpha = p.m_s * p.h_cg * drive.a;
    let m_beta = p.m_s * p.h_cg * drive.v.powi(2) * drive.delta.tan() / (p.l_f + p.l_r);
    let mass = Matrix3::from_diagonal(&Vector3::new(p.m_s, p.i_alpha, p.i_beta));
    let gen = t.transpose() * &f;
    let rhs = Vector3::new(gen[0], gen[1] + m_alpha, gen[2] + m_beta);
    let qdd = mass.lu().solve(&rhs).expect("mass matrix");
    let mut out = [0.0; 14];
    out[..3].copy_from_slice(&[x[7], x[8], x[9]]);
    out[3..7].copy_from_slice(&x[10..14]);
    out[7..10].copy_from_slice(qdd.as_slice());
    for i in 0..4 {
        let tire = p.k_t[i] * (road.z_r[i] - x[3 + i]) + p.c_t * (road.zdot_r[i] - x[10 + i]);
        out[10 + i] = (tire - f[i]) / p.m_u[i];
    }
    out
}

/// System matrix of the nominal model with zero inputs, column by column
/// from the (linear) oracle.
pub fn system_matrix(design: &SuspensionDesign, p: &VehicleParams) -> DMatrix<f64> {
    let drive = DrivingCondition::new(0.0, 0.0, 0.0);
    let road = WheelDisturbance::default();
    let mut a = DMatrix::zeros(14, 14);
    for j in 0..14 {
        let mut e = [0.0; 14];
        e[j] = 1.0;
        let col = oracle_derivative(&e, &[0.0; 4], &drive, &road, design, p, None);
        for i in 0..14 {
            a[(i, j)] = col[i];
        }
    }
    a
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (FullState, [f64; 4], DrivingCondition, WheelDisturbance, SuspensionDesign) {
    let mut x = [0.0; 14];
    for (i, v) in x.iter_mut().enumerate() {
        let scale = if i < 7 { 0.05 } else { 0.5 };
        *v = rng.random_range(-scale..scale);
    }
    let u = std::array::from_fn(|_| rng.random_range(-500.0..500.0));
    let drive = DrivingCondition::new(rng.random_range(0.0..20.0), rng.random_range(-6.0..6.0), rng.random_range(-0.17..0.17));
    let road = WheelDisturbance { z_r: std::array::from_fn(|_| rng.random_range(-0.1..0.1)), zdot_r: std::array::from_fn(|_| rng.random_range(-1.0..1.0)) };
    let design = SuspensionDesign::new(rng.random_range(5000.0..60000.0), rng.random_range(500.0..6000.0));
    (FullState(x), u, drive, road, design)
}

/// Error of RK4 against exp(A t) after `horizon` seconds.
pub fn rk4_error(dt: f64, steps: usize, x0: &[f64; 14]) -> (f64, f64) {
    let p = VehicleParams::default();
    let design = SuspensionDesign::INITIAL;
    let plant = Plant::nominal(p.clone());
    let a = system_matrix(&design, &p);
    let mut x = FullState(*x0);
    let zero = WheelDisturbance::default();
    let drive = DrivingCondition::new(0.0, 0.0, 0.0);
    let mut one_step = 0.0;
    for k in 0..steps {
        x = plant.step(&x, &[0.0; 4], &drive, &zero, &design, dt).unwrap();
        if k == 0 {
            let exact = expm(&(&a * dt)) * DVector::from_row_slice(x0);
            one_step = (DVector::from_row_slice(&x.0) - exact).norm();
        }
    }
    let exact = expm(&(&a * (dt * steps as f64))) * DVector::from_row_slice(x0);
    (one_step, (DVector::from_row_slice(&x.0) - exact).norm())
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Forward 2-D periodogram `|F|^2` of a square grid.
pub fn periodogram(s: &RoadSurface) -> (usize, Vec<f64>) {
    let (nx, ny) = s.dims();
    assert_eq!(nx, ny);
    let mut data: Vec<Complex64> = s.elevations().iter().map(|z| Complex64::new(*z, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nx);
    for row in data.chunks_exact_mut(nx) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); ny];
    for i in 0..nx {
        for j in 0..ny {
            col[j] = data[j * nx + i];
        }
        fft.process(&mut col);
        for j in 0..ny {
            data[j * nx + i] = col[j];
        }
    }
    (nx, data.iter().map(|c| c.norm_sqr()).collect())
}

pub fn signed(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

pub fn desk_surface() -> RoadSurface {
    generate_surface(&SpectralConfig { seed: 42, ..SpectralConfig::default() }, (512.0, 512.0), 1.0).unwrap()
}

pub fn toy_agent(seed: u64) -> Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = DesignBounds::default();
    let mut policy = GaussianPolicy::new(&[4], 100.0, 15.0, 0.01, &mut rng);
    let normal = Normal::new(0.0, 0.3).unwrap();
    for p in policy.params_mut() {
        p.mapv_inplace(|_| normal.sample(&mut rng));
    }
    let value = ValueFn::new(&[4], 50.0, &mut rng);
    let encoder = Encoder::new(&bounds, [0.5, 0.2, 0.5, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01]).unwrap();
    Agent { policy, value, encoder, design: SuspensionDesign::INITIAL }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Slope of the radially averaged periodogram over 0.15..0.45 cycles/m,
/// in 24 log-spaced bins.
pub fn radial_slope(s: &RoadSurface) -> f64 {
    let (n, p) = periodogram(s);
    let bins = 24;
    let (lo, hi) = (0.15f64, 0.45f64);
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for j in 0..n {
        for i in 0..n {
            let f = (signed(i, n).powi(2) + signed(j, n).powi(2)).sqrt() / n as f64;
            if f >= lo && f < hi {
                let b = (((f / lo).ln() / (hi / lo).ln()) * bins as f64) as usize;
                acc[b].0 += f;
                acc[b].1 += p[j * n + i];
                acc[b].2 += 1;
            }
        }
    }
    let pts: Vec<(f64, f64)> = acc.iter().filter(|a| a.2 > 0).map(|a| (a.0 / a.2 as f64, a.1 / a.2 as f64)).collect();
    loglog_slope(&pts)
}

pub struct Batch {
    pub samples: Vec<Sample>,
    pub adv: Vec<f64>,
    pub adv_std: f64,
    pub targets: Vec<f64>,
}

pub fn collect(agent: &Agent, env: &Env, cfg: &PpoConfig, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rollout(env, agent, n, 40, true, &mut rng).unwrap();
    let rewards: Vec<f64> = r.samples.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = r.samples.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = r.samples.iter().map(|s| s.done).collect();
    let (adv, targets) = compute_gae(&rewards, &values, &dones, cfg.gamma, cfg.lambda_gae);
    let (adv, adv_std) = normalize(&adv);
    Batch { samples: r.samples, adv, adv_std, targets }
}

/// Worst relative error between the PPO loss gradient and central
/// differences for policy, value and design parameters of a toy agent.
pub fn ppo_fd_errors() -> [f64; 3] {
    let plant = Plant::nominal(VehicleParams::default());
    let scenario = Scenario::first_ccd();
    let env = Env { plant: &plant, scenario: &scenario, discrepancy: None, weights: RewardWeights::default(), dt: DEFAULT_DT, history: 1, error_reset: 0 };
    let cfg = PpoConfig::default();
    let spec = StageSpec { name: "fd", ppo: &cfg, bounds: DesignBounds::default(), train_design: true, rescale_value: false };
    let collector = toy_agent(1);
    let b = collect(&collector, &env, &cfg, 64, 2);
    let idx: Vec<usize> = (0..b.samples.len()).collect();

    // Evaluate away from the collection parameters so the ratio is not 1.
    let mut agent = collector.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let jitter = Normal::new(0.0, 0.02).unwrap();
    for p in agent.policy.params_mut() {
        p.mapv_inplace(|v| v + jitter.sample(&mut rng));
    }
    agent.design = SuspensionDesign::new(30000.0, 2100.0);
    let base = agent.design;
    let loss = |a: &Agent| ppo_loss_at(a, &base, &b.samples, &idx, &b.adv, b.adv_std, &b.targets, &env, &spec).unwrap().0.loss;
    let (_, g) = ppo_loss_at(&agent, &base, &b.samples, &idx, &b.adv, b.adv_std, &b.targets, &env, &spec).unwrap();
    let h = 1e-5;
    let mut worst = [0.0f64; 3];

    let n_policy = agent.policy.params_mut().len();
    for t in 0..n_policy {
        let shape = g.policy[t].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = agent.clone();
                plus.policy.params_mut()[t][(r, c)] += h;
                let mut minus = agent.clone();
                minus.policy.params_mut()[t][(r, c)] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                worst[0] = worst[0].max(rel_err(g.policy[t][(r, c)], fd));
            }
        }
    }
    let n_value = agent.value.net.params_mut().len();
    for t in 0..n_value {
        let shape = g.value[t].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = agent.clone();
                plus.value.net.params_mut()[t][(r, c)] += h;
                let mut minus = agent.clone();
                minus.value.net.params_mut()[t][(r, c)] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                worst[1] = worst[1].max(rel_err(g.value[t][(r, c)], fd));
            }
        }
    }
    // Design gradients are in feature units: k_s = f0 * scale0, c_s = f1 * scale1.
    let scale = agent.encoder.design_scale;
    for j in 0..2 {
        let shift = |sign: f64| {
            let mut a = agent.clone();
            if j == 0 {
                a.design.k_s += sign * h * scale[0];
            } else {
                a.design.c_s += sign * h * scale[1];
            }
            a
        };
        let fd = (loss(&shift(1.0)) - loss(&shift(-1.0))) / (2.0 * h);
        worst[2] = worst[2].max(rel_err(g.design[(0, j)], fd));
    }
    worst
}
