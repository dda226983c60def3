//! Driver profiles, kinematic trajectories and per-wheel road inputs.
//!
//! A profile is a pair of sampled series, longitudinal acceleration and
//! steering angle, built from a three-phase speed plan and a periodic
//! schedule of half-sine steering pulses, then Savitzky-Golay smoothed. The
//! trajectory integrates it with a kinematic bicycle model and the road
//! surface is queried at each contact patch.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};
use crate::road::RoadSurface;
use crate::vehicle::{DrivingCondition, VehicleParams, WheelDisturbance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrivingStyle {
    Mild,
    Aggressive,
}

impl DrivingStyle {
    pub const ALL: [DrivingStyle; 2] = [DrivingStyle::Mild, DrivingStyle::Aggressive];

    pub fn name(self) -> &'static str {
        match self {
            DrivingStyle::Mild => "mild",
            DrivingStyle::Aggressive => "aggressive",
        }
    }
}

impl std::str::FromStr for DrivingStyle {
    type Err = CcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(DrivingStyle::Mild),
            "aggressive" => Ok(DrivingStyle::Aggressive),
            other => Err(CcdError::invalid(format!("unknown driving style `{other}` (expected mild or aggressive)"))),
        }
    }
}

impl std::fmt::Display for DrivingStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One half-sine steering pulse inside a schedule period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringPulse {
    /// Offset from the period start (s).
    pub start: f64,
    pub duration: f64,
    /// Peak steering angle (rad), signed.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub duration: f64,
    pub dt: f64,
    /// Acceleration and braking magnitude (m/s²).
    pub accel: f64,
    pub cruise_speed: f64,
    /// Linear ramp time into and out of each acceleration phase (s).
    pub ramp: f64,
    /// Pulses repeat every `steering_period` seconds once cruising begins.
    pub steering_period: f64,
    pub steering: Vec<SteeringPulse>,
    pub sg_window: usize,
    pub sg_order: usize,
}

impl ProfileConfig {
    pub fn for_style(style: DrivingStyle) -> Self {
        match style {
            DrivingStyle::Mild => Self {
                duration: 1200.0,
                dt: 0.01,
                accel: 2.0,
                cruise_speed: 12.0,
                ramp: 0.3,
                steering_period: 60.0,
                steering: vec![
                    SteeringPulse { start: 10.0, duration: 12.0, amplitude: 0.05 },
                    SteeringPulse { start: 40.0, duration: 6.0, amplitude: -0.02 },
                ],
                sg_window: 51,
                sg_order: 3,
            },
            DrivingStyle::Aggressive => Self {
                duration: 1200.0,
                dt: 0.01,
                accel: 6.0,
                cruise_speed: 20.0,
                ramp: 0.5,
                steering_period: 20.0,
                steering: vec![
                    SteeringPulse { start: 2.0, duration: 2.0, amplitude: 0.17 },
                    SteeringPulse { start: 7.0, duration: 2.0, amplitude: -0.12 },
                    SteeringPulse { start: 13.0, duration: 1.5, amplitude: 0.08 },
                ],
                sg_window: 51,
                sg_order: 3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("duration", self.duration), ("dt", self.dt), ("accel", self.accel), ("cruise_speed", self.cruise_speed), ("steering_period", self.steering_period)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CcdError::invalid(format!("profile.{name} must be positive")));
            }
        }
        if !(self.ramp >= 0.0) {
            return Err(CcdError::invalid("profile.ramp must be non-negative"));
        }
        let phase = self.cruise_speed / self.accel + self.ramp;
        if 2.0 * phase >= self.duration {
            return Err(CcdError::invalid("profile duration too short for the acceleration and braking phases"));
        }
        if self.sg_window.is_multiple_of(2) || self.sg_window <= self.sg_order + 1 {
            return Err(CcdError::invalid("sg_window must be odd and larger than sg_order + 1"));
        }
        for p in &self.steering {
            if !(p.duration > 0.0) || p.start < 0.0 || p.start + p.duration > self.steering_period {
                return Err(CcdError::invalid("steering pulses must have positive duration and fit in one period"));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrivingProfile {
    pub style: DrivingStyle,
    pub dt: f64,
    pub accel: Vec<f64>,
    pub delta: Vec<f64>,
}

impl DrivingProfile {
    pub fn len(&self) -> usize {
        self.accel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accel.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "a", "delta"])?;
        for k in 0..self.len() {
            w.write_record([(k as f64 * self.dt).to_string(), self.accel[k].to_string(), self.delta[k].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Savitzky-Golay smoothing with polynomial edge fits (the first and last
/// half-windows are evaluated on a polynomial fitted to the end windows).
pub fn savitzky_golay(y: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || window <= order {
        return Err(CcdError::invalid(format!("invalid Savitzky-Golay window {window} for order {order}")));
    }
    if y.len() < window {
        return Err(CcdError::invalid(format!("series of length {} shorter than window {window}", y.len())));
    }
    let half = window / 2;
    let a = DMatrix::from_fn(window, order + 1, |i, j| (i as f64 - half as f64).powi(j as i32));
    let pinv = (a.transpose() * &a)
        .try_inverse()
        .ok_or_else(|| CcdError::invalid("singular Savitzky-Golay design"))?
        * a.transpose();
    // hat matrix: row i maps a window to the fitted value at position i
    let hat = &a * pinv;
    let apply = |row: usize, start: usize| (0..window).map(|m| hat[(row, m)] * y[start + m]).sum::<f64>();
    let n = y.len();
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        *o = if k < half {
            apply(k, 0)
        } else if k >= n - half {
            apply(k - (n - window), n - window)
        } else {
            apply(half, k - half)
        };
    }
    Ok(out)
}

fn phase_accel(t: f64, t0: f64, plateau: f64, ramp: f64, magnitude: f64) -> f64 {
    let s = t - t0;
    if s < 0.0 || s > plateau + 2.0 * ramp {
        0.0
    } else if s < ramp {
        magnitude * s / ramp
    } else if s <= ramp + plateau {
        magnitude
    } else {
        magnitude * (plateau + 2.0 * ramp - s) / ramp
    }
}

pub fn build_driving_profile(style: DrivingStyle) -> Result<DrivingProfile> {
    build_profile_from(style, &ProfileConfig::for_style(style))
}

pub fn build_profile_from(style: DrivingStyle, cfg: &ProfileConfig) -> Result<DrivingProfile> {
    cfg.validate()?;
    let n = cfg.steps();
    // a trapezoid with equal ramps has area `accel * (plateau + ramp)`
    let plateau = cfg.cruise_speed / cfg.accel - cfg.ramp;
    if plateau < 0.0 {
        return Err(CcdError::invalid("ramp longer than the acceleration phase"));
    }
    let phase_len = plateau + 2.0 * cfg.ramp;
    let accel_start = 0.5;
    let cruise_start = accel_start + phase_len;
    let brake_start = cfg.duration - 1.0 - phase_len;
    let raw_a: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * cfg.dt;
            phase_accel(t, accel_start, plateau, cfg.ramp, cfg.accel) - phase_accel(t, brake_start, plateau, cfg.ramp, cfg.accel)
        })
        .collect();
    let raw_delta: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * cfg.dt;
            if t < cruise_start || t >= brake_start {
                return 0.0;
            }
            let local = (t - cruise_start) % cfg.steering_period;
            cfg.steering
                .iter()
                .filter(|p| local >= p.start && local < p.start + p.duration)
                .map(|p| p.amplitude * (PI * (local - p.start) / p.duration).sin())
                .sum()
        })
        .collect();
    Ok(DrivingProfile {
        style,
        dt: cfg.dt,
        accel: savitzky_golay(&raw_a, cfg.sg_window, cfg.sg_order)?,
        delta: savitzky_golay(&raw_delta, cfg.sg_window, cfg.sg_order)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl Default for StartPose {
    fn default() -> Self {
        Self { x: 1000.0, y: 500.0, psi: 0.0, v: 0.0 }
    }
}

/// Pose and speed at every step, plus the inputs that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrajectory {
    pub dt: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub psi: Vec<f64>,
    pub psidot: Vec<f64>,
    pub accel: Vec<f64>,
    pub delta: Vec<f64>,
}

impl VehicleTrajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Longitudinal inputs seen by the suspension model at step `k`.
    pub fn drive(&self, k: usize) -> DrivingCondition {
        DrivingCondition::new(self.v[k], self.accel[k], self.delta[k])
    }

    pub fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let mm = |s: &[f64]| s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        (mm(&self.x), mm(&self.y))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x", "y", "v", "psi", "psidot", "a", "delta"])?;
        for k in 0..self.len() {
            let row = [k as f64 * self.dt, self.x[k], self.y[k], self.v[k], self.psi[k], self.psidot[k], self.accel[k], self.delta[k]];
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Kinematic bicycle integration: `v` is clamped at zero, heading advances
/// by `v tan(delta) / wheelbase`, position uses the midpoint heading.
pub fn integrate_trajectory(profile: &DrivingProfile, params: &VehicleParams, start: StartPose) -> VehicleTrajectory {
    let n = profile.len();
    let wb = params.wheelbase();
    let dt = profile.dt;
    let mut t = VehicleTrajectory {
        dt,
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        psi: Vec::with_capacity(n),
        psidot: Vec::with_capacity(n),
        accel: profile.accel.clone(),
        delta: profile.delta.clone(),
    };
    let (mut x, mut y, mut psi, mut v) = (start.x, start.y, start.psi, start.v.max(0.0));
    for k in 0..n {
        let psidot = v * profile.delta[k].tan() / wb;
        t.x.push(x);
        t.y.push(y);
        t.v.push(v);
        t.psi.push(psi);
        t.psidot.push(psidot);
        let mid = psi + 0.5 * psidot * dt;
        x += v * mid.cos() * dt;
        y += v * mid.sin() * dt;
        psi += psidot * dt;
        v = (v + profile.accel[k] * dt).max(0.0);
    }
    t
}

/// Contact-patch positions FL, FR, RL, RR for a CG pose.
pub fn wheel_positions(x: f64, y: f64, psi: f64, params: &VehicleParams) -> [(f64, f64); 4] {
    let half = 0.5 * params.l;
    let offsets = [(params.l_f, -half), (params.l_f, half), (-params.l_r, -half), (-params.l_r, half)];
    let (s, c) = psi.sin_cos();
    offsets.map(|(dx, dy)| (x + c * dx - s * dy, y + s * dx + c * dy))
}

/// Road heights and chain-rule height rates under each wheel.
///
/// Each contact patch moves with the CG velocity plus the yaw-rate term
/// `psidot x r_i`; with `psidot = 0` this is `dZ/dX v cos(psi) + dZ/dY v sin(psi)`.
pub fn wheel_disturbance(surface: &RoadSurface, x: f64, y: f64, psi: f64, v: f64, psidot: f64, params: &VehicleParams) -> Result<WheelDisturbance> {
    let (s, c) = psi.sin_cos();
    let mut out = WheelDisturbance::default();
    for (i, (wx, wy)) in wheel_positions(x, y, psi, params).into_iter().enumerate() {
        let q = surface.sample(wx, wy)?;
        let vx = v * c - psidot * (wy - y);
        let vy = v * s + psidot * (wx - x);
        out.z_r[i] = q.z;
        out.zdot_r[i] = q.dz_dx * vx + q.dz_dy * vy;
    }
    Ok(out)
}

/// Wheel inputs for every step of a trajectory.
pub fn trajectory_disturbances(surface: &RoadSurface, traj: &VehicleTrajectory, params: &VehicleParams) -> Result<Vec<WheelDisturbance>> {
    (0..traj.len()).map(|k| wheel_disturbance(surface, traj.x[k], traj.y[k], traj.psi[k], traj.v[k], traj.psidot[k], params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn constant_profile(n: usize, a: f64, delta: f64) -> DrivingProfile {
        DrivingProfile { style: DrivingStyle::Mild, dt: 0.01, accel: vec![a; n], delta: vec![delta; n] }
    }

    #[test]
    fn sg_reproduces_cubics() {
        let y: Vec<f64> = (0..200).map(|k| {
            let t = k as f64 * 0.1;
            0.3 - 0.2 * t + 0.05 * t * t - 0.001 * t * t * t
        }).collect();
        let s = savitzky_golay(&y, 51, 3).unwrap();
        for (a, b) in y.iter().zip(&s) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn sg_rejects_bad_window() {
        assert!(savitzky_golay(&[0.0; 100], 50, 3).is_err());
        assert!(savitzky_golay(&[0.0; 10], 51, 3).is_err());
    }

    #[test]
    fn straight_line() {
        let p = constant_profile(1001, 0.0, 0.0);
        let t = integrate_trajectory(&p, &VehicleParams::default(), StartPose { x: 0.0, y: 0.0, psi: 0.0, v: 10.0 });
        assert_abs_diff_eq!(t.x[1000], 100.0, epsilon = 1e-9);
        assert_eq!(t.y[1000], 0.0);
        assert_eq!(t.psi[1000], 0.0);
    }

    #[test]
    fn speed_clamped_at_zero() {
        let p = constant_profile(500, -3.0, 0.0);
        let t = integrate_trajectory(&p, &VehicleParams::default(), StartPose { x: 0.0, y: 0.0, psi: 0.0, v: 1.0 });
        assert!(t.v.iter().all(|v| *v >= 0.0));
        assert_eq!(*t.v.last().unwrap(), 0.0);
    }

    #[test]
    fn wheel_positions_rotate() {
        let p = VehicleParams::default();
        let w0 = wheel_positions(1.0, 2.0, 0.0, &p);
        assert_abs_diff_eq!(w0[0].0, 1.0 + p.l_f, epsilon = 1e-15);
        assert_abs_diff_eq!(w0[0].1, 2.0 - p.l / 2.0, epsilon = 1e-15);
        let w = wheel_positions(0.0, 0.0, PI / 2.0, &p);
        // (dx, dy) -> (-dy, dx)
        assert_abs_diff_eq!(w[0].0, p.l / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0].1, p.l_f, epsilon = 1e-12);
        assert_abs_diff_eq!(w[3].0, -p.l / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[3].1, -p.l_r, epsilon = 1e-12);
    }

    #[test]
    fn planar_road_rate() {
        let z = (0..50 * 50).map(|k| 0.01 * (k % 50) as f64).collect();
        let s = RoadSurface::from_grid(50, 50, 1.0, (0.0, 0.0), z, 1.0, 0).unwrap();
        let d = wheel_disturbance(&s, 20.0, 20.0, 0.0, 10.0, 0.0, &VehicleParams::default()).unwrap();
        for r in d.zdot_r {
            assert_abs_diff_eq!(r, 0.1, epsilon = 1e-12);
        }
        let d0 = wheel_disturbance(&s, 20.0, 20.0, 0.3, 0.0, 0.0, &VehicleParams::default()).unwrap();
        assert_eq!(d0.zdot_r, [0.0; 4]);
        assert!(wheel_disturbance(&s, 0.5, 20.0, 0.0, 1.0, 0.0, &VehicleParams::default()).is_err());
    }

    #[test]
    fn style_parsing() {
        assert_eq!("mild".parse::<DrivingStyle>().unwrap(), DrivingStyle::Mild);
        assert!("sporty".parse::<DrivingStyle>().is_err());
    }
}
