mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccd_core::vehicle::*;
use common::*;

#[test]
fn nominal_derivative_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let plant = Plant::nominal(VehicleParams::default());
    for _ in 0..100 {
        let (x, u, drive, road, design) = random_case(&mut rng);
        let got = plant.derivative(&x, &u, &drive, &road, &design);
        let want = oracle_derivative(&x.0, &u, &drive, &road, &design, plant.params(), None);
        for i in 0..14 {
            assert!((got[i] - want[i]).abs() <= 1e-12, "component {i}: {} vs {}", got[i], want[i]);
        }
    }
}

#[test]
fn real_derivative_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pert = RealSystemPerturbation::default();
    let plant = Plant::real(&VehicleParams::default(), pert.clone());
    for _ in 0..100 {
        let (x, u, drive, road, design) = random_case(&mut rng);
        let nl = pert.nonlinear_coeffs(&design);
        let got = plant.derivative(&x, &u, &drive, &road, &design);
        let want = oracle_derivative(&x.0, &u, &drive, &road, &design, &pert.apply(&VehicleParams::default()), Some((nl.k_nl, nl.c_nl)));
        for i in 0..14 {
            assert!((got[i] - want[i]).abs() <= 1e-12, "component {i}: {} vs {}", got[i], want[i]);
        }
    }
}

#[test]
fn pitch_only_under_longitudinal_acceleration() {
    let plant = Plant::nominal(VehicleParams::default());
    let d = plant.derivative(&FullState::ZERO, &[0.0; 4], &DrivingCondition::new(0.0, 2.0, 0.0), &WheelDisturbance::default(), &SuspensionDesign::INITIAL);
    for (i, v) in d.iter().enumerate() {
        if i == 8 {
            assert!((v - 0.66).abs() < 1e-12);
        } else {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn rk4_fourth_order_against_matrix_exponential() {
    let x0 = [0.02, 0.01, -0.01, 0.03, -0.02, 0.01, 0.0, 0.1, -0.05, 0.05, 0.2, -0.1, 0.3, 0.0];
    let (s1, g1) = rk4_error(0.02, 50, &x0);
    let (s2, g2) = rk4_error(0.01, 100, &x0);
    let (s3, g3) = rk4_error(0.005, 200, &x0);
    for r in [g1 / g2, g2 / g3] {
        assert!((12.0..=20.0).contains(&r), "global error ratio {r}");
    }
    // Local error is fifth order.
    let c = s3 / 0.005f64.powi(5);
    assert!(s1 <= 2.0 * c * 0.02f64.powi(5) && s2 <= 2.0 * c * 0.01f64.powi(5), "{s1} {s2} {s3}");
}

#[test]
fn zero_state_is_a_fixed_point() {
    let plant = Plant::nominal(VehicleParams::default());
    let mut x = FullState::ZERO;
    let drive = DrivingCondition::new(0.0, 0.0, 0.0);
    for _ in 0..10_000 {
        x = plant.step(&x, &[0.0; 4], &drive, &WheelDisturbance::default(), &SuspensionDesign::INITIAL, DEFAULT_DT).unwrap();
        assert!(x.max_abs() <= 1e-12);
    }
}

#[test]
fn passive_system_is_stable() {
    let a = system_matrix(&SuspensionDesign::INITIAL, &VehicleParams::default());
    let eig = a.complex_eigenvalues();
    assert!(eig.iter().all(|l| l.re <= 1e-9), "{eig}");
}

#[test]
fn observation_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = observation_matrix();
    for _ in 0..20 {
        let x: [f64; 14] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let y = observe(&FullState(x));
        for r in 0..OBS_DIM {
            let want: f64 = (0..14).map(|j| c[r][j] * x[j]).sum();
            assert_eq!(y.0[r], want);
        }
    }
    let mut x = [0.0; 14];
    x[0] = 0.1;
    x[3] = 0.02;
    let y = observe(&FullState(x));
    assert!((y.0[7] - 0.08).abs() < 1e-15);
    assert_eq!(y.0[3], 0.02);
}

fn small_state() -> impl Strategy<Value = [f64; 14]> {
    proptest::array::uniform14(-0.1f64..0.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nominal_model_is_linear_without_steering(x1 in small_state(), x2 in small_state(), u1 in proptest::array::uniform4(-300f64..300.0), u2 in proptest::array::uniform4(-300f64..300.0), z in proptest::array::uniform4(-0.05f64..0.05)) {
        let plant = Plant::nominal(VehicleParams::default());
        let drive = DrivingCondition::new(0.0, 0.0, 0.0);
        let road1 = WheelDisturbance { z_r: z, zdot_r: [0.1, -0.1, 0.2, 0.0] };
        let road2 = WheelDisturbance { z_r: [0.01, 0.0, -0.02, 0.03], zdot_r: z };
        let sum_x = FullState(std::array::from_fn(|i| x1[i] + x2[i]));
        let sum_u: [f64; 4] = std::array::from_fn(|i| u1[i] + u2[i]);
        let sum_r = WheelDisturbance { z_r: std::array::from_fn(|i| road1.z_r[i] + road2.z_r[i]), zdot_r: std::array::from_fn(|i| road1.zdot_r[i] + road2.zdot_r[i]) };
        let d = SuspensionDesign::INITIAL;
        let a = plant.derivative(&FullState(x1), &u1, &drive, &road1, &d);
        let b = plant.derivative(&FullState(x2), &u2, &drive, &road2, &d);
        let s = plant.derivative(&sum_x, &sum_u, &drive, &sum_r, &d);
        for i in 0..14 {
            prop_assert!((s[i] - a[i] - b[i]).abs() <= 1e-10 * (1.0 + s[i].abs()));
        }
    }

    #[test]
    fn observation_commutes_with_integration(x in small_state(), u in proptest::array::uniform4(-300f64..300.0)) {
        let plant = Plant::nominal(VehicleParams::default());
        let next = plant.step(&FullState(x), &u, &DrivingCondition::new(10.0, 0.0, 0.0), &WheelDisturbance::default(), &SuspensionDesign::INITIAL, DEFAULT_DT).unwrap();
        let c = observation_matrix();
        let y = observe(&next);
        for r in 0..OBS_DIM {
            let want: f64 = (0..14).map(|j| c[r][j] * next.0[j]).sum();
            prop_assert_eq!(y.0[r], want);
        }
    }

    #[test]
    fn projection_stays_in_bounds(k in -1e5f64..1e5, c in -1e4f64..1e4) {
        let b = DesignBounds::default();
        prop_assert!(b.contains(&b.project(SuspensionDesign::new(k, c))));
    }
}
