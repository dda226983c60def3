//! One PASS/FAIL line per acceptance criterion. Criteria 9 and 10 run the
//! desk pipeline twice, which takes most of the runtime.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ccd_core::config::RunConfig;
use ccd_core::discrepancy::{fit_quantiles, ErrorRecord};
use ccd_core::pipeline::{run_all, RunDir, RunSummary};
use ccd_core::profile::*;
use ccd_core::trainer::warmstart::*;
use ccd_core::trainer::{RewardWeights, Scenario};
use ccd_core::vehicle::*;
use common::*;

const DERIVATIVE_TOL: f64 = 1e-12;
const RK4_RATIO: (f64, f64) = (12.0, 20.0);
const EQUILIBRIUM_TOL: f64 = 1e-12;
const GRADIENT_REL_TOL: f64 = 1e-5;
const PSD_SLOPE: f64 = -2.5;
const PSD_SLOPE_TOL: f64 = 0.3;
const ROAD_STD: f64 = 0.045;
const ROAD_STD_REL: f64 = 0.10;
const ROAD_P2P_MIN: f64 = 0.15;
const COVERAGE: f64 = 0.80;
const COVERAGE_TOL: f64 = 0.05;
const Z90: f64 = 1.2815515655446004;
const OFFSET_REL_TOL: f64 = 0.05;

struct Check {
    pass: bool,
    detail: String,
}

fn timed(budget: Option<Duration>, f: impl FnOnce() -> Check) -> Check {
    let t = Instant::now();
    let mut c = f();
    let took = t.elapsed();
    match budget {
        Some(b) => {
            c.detail = format!("{} [{:.2}s, budget {:.0}s]", c.detail, took.as_secs_f64(), b.as_secs_f64());
            c.pass &= took <= b;
        }
        None => c.detail = format!("{} [{:.2}s]", c.detail, took.as_secs_f64()),
    }
    c
}

fn dynamics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let plant = Plant::nominal(VehicleParams::default());
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (x, u, drive, road, design) = random_case(&mut rng);
        let got = plant.derivative(&x, &u, &drive, &road, &design);
        let want = oracle_derivative(&x.0, &u, &drive, &road, &design, plant.params(), None);
        for i in 0..STATE_DIM {
            worst = worst.max((got[i] - want[i]).abs());
        }
    }
    Check { pass: worst <= DERIVATIVE_TOL, detail: format!("max abs diff {worst:.2e} over 100 cases (tol {DERIVATIVE_TOL:.0e})") }
}

fn rk4_order() -> Check {
    let x0 = [0.02, 0.01, -0.01, 0.03, -0.02, 0.01, 0.0, 0.1, -0.05, 0.05, 0.2, -0.1, 0.3, 0.0];
    let (_, g1) = rk4_error(0.02, 50, &x0);
    let (_, g2) = rk4_error(0.01, 100, &x0);
    let (_, g3) = rk4_error(0.005, 200, &x0);
    let ratios = [g1 / g2, g2 / g3];
    let pass = ratios.iter().all(|r| (RK4_RATIO.0..=RK4_RATIO.1).contains(r));
    Check { pass, detail: format!("error ratios at a 1 s horizon {:.2}, {:.2} (want [{}, {}])", ratios[0], ratios[1], RK4_RATIO.0, RK4_RATIO.1) }
}

fn equilibrium() -> Check {
    let plant = Plant::nominal(VehicleParams::default());
    let mut x = FullState::ZERO;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        x = match plant.step(&x, &[0.0; 4], &DrivingCondition::new(0.0, 0.0, 0.0), &WheelDisturbance::default(), &SuspensionDesign::INITIAL, DEFAULT_DT) {
            Ok(next) => next,
            Err(_) => return Check { pass: false, detail: "diverged".into() },
        };
        worst = x.0.iter().fold(worst, |m, v| m.max(v.abs()));
    }
    Check { pass: worst <= EQUILIBRIUM_TOL, detail: format!("max |x| {worst:.2e} over 10000 steps") }
}

fn gradients() -> Check {
    let worst = ppo_fd_errors();
    Check {
        pass: worst.iter().all(|w| *w <= GRADIENT_REL_TOL),
        detail: format!("worst relative error policy {:.2e}, value {:.2e}, design {:.2e} (tol {GRADIENT_REL_TOL:.0e})", worst[0], worst[1], worst[2]),
    }
}

fn road_spectrum() -> Check {
    let s = desk_surface();
    let slope = radial_slope(&s);
    let (std, p2p) = (s.std_dev(), s.peak_to_peak());
    let pass = (slope - PSD_SLOPE).abs() <= PSD_SLOPE_TOL && (std - ROAD_STD).abs() <= ROAD_STD_REL * ROAD_STD && p2p > ROAD_P2P_MIN;
    Check { pass, detail: format!("512x512 slope {slope:.3}, std {std:.4} m, peak-to-peak {p2p:.3} m") }
}

fn driving_profiles() -> Check {
    let p = VehicleParams::default();
    let (mild, aggr) = match (build_driving_profile(DrivingStyle::Mild), build_driving_profile(DrivingStyle::Aggressive)) {
        (Ok(m), Ok(a)) => (m, a),
        _ => return Check { pass: false, detail: "profile construction failed".into() },
    };
    let top = |prof: &DrivingProfile| integrate_trajectory(prof, &p, StartPose::default()).v.iter().cloned().fold(0.0, f64::max);
    let (vm, va) = (top(&mild), top(&aggr));
    let peak = aggr.accel.iter().cloned().fold(0.0, f64::max);
    let pass = (vm - 12.0).abs() <= 0.2 && (va - 20.0).abs() <= 0.3 && (peak - 6.0).abs() <= 0.1 && mild.len() == 120_000 && aggr.len() == 120_000;
    Check { pass, detail: format!("top speed mild {vm:.3}, aggressive {va:.3} m/s; peak accel {peak:.3} m/s^2; lengths {} / {}", mild.len(), aggr.len()) }
}

fn synthetic(n: usize, sigma: impl Fn(f64) -> f64, rng: &mut ChaCha8Rng) -> Vec<ErrorRecord> {
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};
    let unit = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let mut e = [0.0; OBS_DIM];
            e[0] = x;
            let e_next = std::array::from_fn(|_| x + sigma(x) * unit.sample(rng));
            ErrorRecord { e, y: Observation([0.0; OBS_DIM]), u: [0.0; ACT_DIM], drive: DrivingCondition::new(10.0, 0.0, 0.0), e_next }
        })
        .collect()
}

fn quantile_calibration() -> Check {
    let cfg = ccd_core::discrepancy::QuantileFitConfig { hidden: vec![32, 32], epochs: 30, batch: 256, lr: 3e-3, stride: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hetero = |x: f64| 0.02 + 0.08 * (x + 1.0) / 2.0;
    let (train, val) = (synthetic(20_000, hetero, &mut rng), synthetic(5_000, hetero, &mut rng));
    let Ok((_, report)) = fit_quantiles(&train, &val, &cfg, &mut rng) else {
        return Check { pass: false, detail: "heteroscedastic fit failed".into() };
    };
    let (lo, hi) = report.coverage.iter().fold((1.0f64, 0.0f64), |(a, b), c| (a.min(*c), b.max(*c)));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sigma = 0.05;
    let (train, val) = (synthetic(20_000, |_| sigma, &mut rng), synthetic(2_000, |_| sigma, &mut rng));
    let Ok((model, _)) = fit_quantiles(&train, &val, &cfg, &mut rng) else {
        return Check { pass: false, detail: "gaussian fit failed".into() };
    };
    let (mut up, mut down, mut n) = (0.0, 0.0, 0.0);
    for r in &val {
        let q = model.predict_record(r);
        for i in 0..OBS_DIM {
            up += q.upper[i] - q.median[i];
            down += q.median[i] - q.lower[i];
            n += 1.0;
        }
    }
    let (up, down) = (up / n / (Z90 * sigma), down / n / (Z90 * sigma));
    let pass = (lo - COVERAGE).abs() <= COVERAGE_TOL && (hi - COVERAGE).abs() <= COVERAGE_TOL && (up - 1.0).abs() <= OFFSET_REL_TOL && (down - 1.0).abs() <= OFFSET_REL_TOL;
    Check { pass, detail: format!("coverage {lo:.3}..{hi:.3}; offsets +{up:.3} / -{down:.3} of 1.2816 sigma") }
}

fn warm_start() -> Check {
    let cfg = RunConfig::desk();
    let plant = cfg.nominal_plant();
    let Ok(s) = search_gains(&plant, &cfg.initial_design, &cfg.warmstart, &cfg.reward, cfg.dt, cfg.seed) else {
        return Check { pass: false, detail: "gain search failed".into() };
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let Scenario::Noise { drive, z_std, zdot_std } = Scenario::first_ccd() else { unreachable!() };
    let (drives, roads) = Scenario::sample_noise(drive, z_std, zdot_std, 10_000, &mut rng);
    let reference = closed_loop_comfort(&plant, &cfg.initial_design, &GainVector::REFERENCE, &drives, &roads, &RewardWeights::default(), cfg.dt);
    let stable = matches!(reference, Ok(Some(v)) if v.is_finite());
    Check {
        pass: s.objective < s.zero_gain_objective && stable,
        detail: format!("BO rms comfort {:.4} vs zero gain {:.4}; reference gains stable for 10000 steps: {stable}", s.objective, s.zero_gain_objective),
    }
}

fn desk_direction(run: &RunSummary, cfg: &RunConfig, took: Duration) -> Check {
    let e = &run.step1.epochs;
    let monotone = e.windows(2).all(|w| w[1].best_return >= w[0].best_return);
    let improved = e.len() >= 2 && e[e.len() - 1].best_return > e[0].best_return;
    let schedule = cfg.first_ccd.max_epochs >= 100 && cfg.first_ccd.rollout_len == 1000;
    let mut pass = monotone && improved && schedule;
    let mut detail = format!(
        "seed {}; step 1 best-so-far {:.1} -> {:.1} over {} epochs (monotone {monotone})",
        cfg.seed,
        e.first().map_or(f64::NAN, |r| r.best_return),
        e.last().map_or(f64::NAN, |r| r.best_return),
        e.len()
    );
    for g in &run.generations {
        let (b, a) = (g.metrics.before.mean_abs_u, g.metrics.after.mean_abs_u);
        let ok = a < b && !g.metrics.after.diverged;
        pass &= ok;
        detail.push_str(&format!("; {:?} mean |u| {b:.2} -> {a:.2} ({})", g.style, if ok { "lower" } else { "NOT lower" }));
    }
    let per_driver = took / cfg.drivers.len().max(1) as u32;
    pass &= run.generations.len() == 2 && per_driver <= Duration::from_secs(30 * 60);
    detail.push_str(&format!("; {:.0}s per driver", per_driver.as_secs_f64()));
    Check { pass, detail }
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable run dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(a: &Path, b: &Path) -> Check {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Check { pass: false, detail: format!("file sets differ ({} vs {})", fa.len(), fb.len()) };
    }
    let differing: Vec<String> = fa.iter().filter(|p| std::fs::read(a.join(p)).ok() != std::fs::read(b.join(p)).ok()).map(|p| p.display().to_string()).collect();
    Check { pass: differing.is_empty(), detail: format!("{} artifacts compared, {} differ {:?}", fa.len(), differing.len(), differing) }
}

#[test]
fn acceptance() {
    let mut lines: Vec<(u32, &str, Check)> = vec![
        (1, "dynamics oracle equivalence", timed(Some(Duration::from_secs(1)), dynamics_oracle)),
        (2, "RK4 order", timed(Some(Duration::from_secs(5)), rk4_order)),
        (3, "equilibrium", timed(None, equilibrium)),
        (4, "gradient correctness", timed(Some(Duration::from_secs(30)), gradients)),
        (5, "road spectrum", timed(Some(Duration::from_secs(60)), road_spectrum)),
        (6, "driving profiles", timed(None, driving_profiles)),
        (7, "quantile calibration", timed(Some(Duration::from_secs(120)), quantile_calibration)),
        (8, "warm start", timed(None, warm_start)),
    ];
    for (id, name, c) in &lines {
        println!("criterion {id:>2} {}: {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }

    let cfg = RunConfig::desk();
    let first = tempfile::tempdir().expect("tempdir");
    let second = tempfile::tempdir().expect("tempdir");
    let t = Instant::now();
    let run = run_all(&cfg, &RunDir::new(first.path()), false);
    let took = t.elapsed();
    let (nine, ten) = match run {
        Ok(summary) => {
            let nine = desk_direction(&summary, &cfg, took);
            let ten = match run_all(&cfg, &RunDir::new(second.path()), false) {
                Ok(_) => reproducibility(first.path(), second.path()),
                Err(e) => Check { pass: false, detail: format!("second run failed: {e}") },
            };
            (nine, ten)
        }
        Err(e) => (Check { pass: false, detail: format!("desk run failed: {e}") }, Check { pass: false, detail: "no first run".into() }),
    };
    for (id, name, c) in [(9, "desk-scale CCD direction", nine), (10, "reproducibility", ten)] {
        println!("criterion {id:>2} {}: {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
        lines.push((id, name, c));
    }

    let failed: Vec<u32> = lines.iter().filter(|l| !l.2.pass).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
