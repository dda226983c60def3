//! Seven-degree-of-freedom full-vehicle model with four active suspension
//! corners.
//!
//! State layout (14 entries): heave `z_s`, pitch `alpha`, roll `beta`, the
//! four unsprung heights `z_u1..z_u4`, followed by their time derivatives in
//! the same order. The observation is the 11-vector
//! `[zdot_s, alphadot, betadot, z_u1..z_u4, z_s - z_u1 .. z_s - z_u4]`.
//!
//! The derivative is written once over the [`Real`] scalar trait so the same
//! equations drive the plain `f64` simulator and the batched autodiff tape.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};

pub const STATE_DIM: usize = 14;
pub const OBS_DIM: usize = 11;
pub const ACT_DIM: usize = 4;

/// Magnitude beyond which any state component marks the simulation divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Default integration step (s).
pub const DEFAULT_DT: f64 = 0.01;

/// Scalar arithmetic needed by the vehicle equations.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> + Mul<f64, Output = Self> + Add<f64, Output = Self>
{
    fn abs(self) -> Self;
    /// A constant living in the same context as `self`.
    fn lift(self, value: f64) -> Self;
}

impl Real for f64 {
    fn abs(self) -> Self {
        f64::abs(self)
    }

    fn lift(self, value: f64) -> Self {
        value
    }
}

/// Physical constants of the vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub m_s: f64,
    pub i_alpha: f64,
    pub i_beta: f64,
    pub m_u: [f64; 4],
    pub k_t: [f64; 4],
    pub c_t: f64,
    pub l_f: f64,
    pub l_r: f64,
    /// Track width.
    pub l: f64,
    pub h_cg: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m_s: 1500.0,
            i_alpha: 2500.0,
            i_beta: 500.0,
            m_u: [50.0; 4],
            k_t: [2e5; 4],
            c_t: 150.0,
            l_f: 1.35,
            l_r: 1.35,
            l: 0.75,
            h_cg: 0.55,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("m_s", self.m_s),
            ("i_alpha", self.i_alpha),
            ("i_beta", self.i_beta),
            ("c_t", self.c_t),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("l", self.l),
            ("h_cg", self.h_cg),
        ];
        for (name, v) in scalars {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CcdError::invalid(format!("vehicle.{name} must be positive, got {v}")));
            }
        }
        for i in 0..4 {
            if !(self.m_u[i] > 0.0 && self.k_t[i] > 0.0) {
                return Err(CcdError::invalid(format!("vehicle.m_u/k_t[{i}] must be positive")));
            }
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    /// Longitudinal lever arms `d_x` (front negative).
    pub fn lever_x(&self) -> [f64; 4] {
        [-self.l_f, -self.l_f, self.l_r, self.l_r]
    }

    /// Lateral lever arms `d_y`.
    pub fn lever_y(&self) -> [f64; 4] {
        let h = 0.5 * self.l;
        [h, -h, h, -h]
    }
}

/// The co-designed passive suspension hardware, shared by all four corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuspensionDesign {
    pub k_s: f64,
    pub c_s: f64,
}

impl SuspensionDesign {
    /// Starting hardware before any co-design.
    pub const INITIAL: SuspensionDesign = SuspensionDesign { k_s: 27692.0, c_s: 1906.5 };

    pub fn new(k_s: f64, c_s: f64) -> Self {
        Self { k_s, c_s }
    }
}

impl Default for SuspensionDesign {
    fn default() -> Self {
        Self::INITIAL
    }
}

/// Box constraints on the design variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignBounds {
    pub k_s: [f64; 2],
    pub c_s: [f64; 2],
}

impl Default for DesignBounds {
    fn default() -> Self {
        Self { k_s: [5_000.0, 60_000.0], c_s: [500.0, 6_000.0] }
    }
}

impl DesignBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("k_s", self.k_s), ("c_s", self.c_s)] {
            if !(lo > 0.0 && hi > lo) {
                return Err(CcdError::invalid(format!("bounds.{name} must satisfy 0 < lo < hi")));
            }
        }
        Ok(())
    }

    /// Midpoints used as normalisation scales.
    pub fn midpoint(&self) -> SuspensionDesign {
        SuspensionDesign::new(0.5 * (self.k_s[0] + self.k_s[1]), 0.5 * (self.c_s[0] + self.c_s[1]))
    }

    pub fn contains(&self, d: &SuspensionDesign) -> bool {
        (self.k_s[0]..=self.k_s[1]).contains(&d.k_s) && (self.c_s[0]..=self.c_s[1]).contains(&d.c_s)
    }

    pub fn project(&self, d: SuspensionDesign) -> SuspensionDesign {
        SuspensionDesign::new(d.k_s.clamp(self.k_s[0], self.k_s[1]), d.c_s.clamp(self.c_s[0], self.c_s[1]))
    }

    pub fn normalize(&self, d: &SuspensionDesign) -> [f64; 2] {
        let mid = self.midpoint();
        [d.k_s / mid.k_s, d.c_s / mid.c_s]
    }

    pub fn denormalize(&self, n: [f64; 2]) -> SuspensionDesign {
        let mid = self.midpoint();
        SuspensionDesign::new(n[0] * mid.k_s, n[1] * mid.c_s)
    }

    /// Bounds expressed in normalised units.
    pub fn normalized_box(&self) -> [[f64; 2]; 2] {
        let mid = self.midpoint();
        [[self.k_s[0] / mid.k_s, self.k_s[1] / mid.k_s], [self.c_s[0] / mid.c_s, self.c_s[1] / mid.c_s]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FullState(pub [f64; STATE_DIM]);

impl FullState {
    pub const ZERO: FullState = FullState([0.0; STATE_DIM]);

    pub fn z_s(&self) -> f64 {
        self.0[0]
    }
    pub fn alpha(&self) -> f64 {
        self.0[1]
    }
    pub fn beta(&self) -> f64 {
        self.0[2]
    }
    pub fn z_u(&self, i: usize) -> f64 {
        self.0[3 + i]
    }
    pub fn z_u_rate(&self, i: usize) -> f64 {
        self.0[10 + i]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Wheels resting on the local road with the body on the best-fit plane
    /// through the four contact heights.
    pub fn settled_on(road: &WheelDisturbance, params: &VehicleParams) -> Self {
        let dx = params.lever_x();
        let dy = params.lever_y();
        // Least squares z_u ≈ z_s + dx·alpha + dy·beta. The lever columns are
        // mutually orthogonal for a symmetric layout; solve the 3x3 normal
        // equations in general.
        let rows: Vec<[f64; 3]> = (0..4).map(|i| [1.0, dx[i], dy[i]]).collect();
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut atb = nalgebra::Vector3::<f64>::zeros();
        for (i, r) in rows.iter().enumerate() {
            for a in 0..3 {
                atb[a] += r[a] * road.z_r[i];
                for b in 0..3 {
                    ata[(a, b)] += r[a] * r[b];
                }
            }
        }
        let sol = ata.lu().solve(&atb).unwrap_or_else(nalgebra::Vector3::zeros);
        let mut x = [0.0; STATE_DIM];
        x[0] = sol[0];
        x[1] = sol[1];
        x[2] = sol[2];
        x[3..7].copy_from_slice(&road.z_r);
        x[10..14].copy_from_slice(&road.zdot_r);
        FullState(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

/// Longitudinal speed, acceleration and steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DrivingCondition {
    pub v: f64,
    pub a: f64,
    pub delta: f64,
}

impl DrivingCondition {
    pub fn new(v: f64, a: f64, delta: f64) -> Self {
        Self { v, a, delta }
    }
}

/// Road heights and height rates under the four tyres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelDisturbance {
    pub z_r: [f64; 4],
    pub zdot_r: [f64; 4],
}

/// Deviations that turn the nominal model into the emulated physical vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealSystemPerturbation {
    /// Cubic spring coefficient; `None` means `0.1 * k_s`.
    pub k_nl: Option<f64>,
    /// Quadratic damping coefficient; `None` means `0.1 * c_s`.
    pub c_nl: Option<f64>,
    pub m_u_override: [f64; 4],
    pub h_cg_delta: f64,
    pub k_t_scale: [f64; 4],
    pub mass_inertia_scale: f64,
}

impl Default for RealSystemPerturbation {
    fn default() -> Self {
        Self {
            k_nl: None,
            c_nl: None,
            m_u_override: [60.0, 50.0, 45.0, 50.0],
            h_cg_delta: 0.05,
            k_t_scale: [0.9, 1.2, 1.1, 0.9],
            mass_inertia_scale: 1.1,
        }
    }
}

impl RealSystemPerturbation {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass_inertia_scale > 0.0) || self.k_t_scale.iter().any(|s| !(*s > 0.0)) || self.m_u_override.iter().any(|m| !(*m > 0.0)) {
            return Err(CcdError::invalid("perturbation scales and masses must be positive"));
        }
        Ok(())
    }

    /// Physical parameters of the perturbed vehicle.
    pub fn apply(&self, nominal: &VehicleParams) -> VehicleParams {
        let mut p = nominal.clone();
        p.m_s *= self.mass_inertia_scale;
        p.i_alpha *= self.mass_inertia_scale;
        p.i_beta *= self.mass_inertia_scale;
        p.m_u = self.m_u_override;
        for i in 0..4 {
            p.k_t[i] = nominal.k_t[i] * self.k_t_scale[i];
        }
        p.h_cg = nominal.h_cg + self.h_cg_delta;
        p
    }

    /// Nonlinear coefficients resolved against a design.
    pub fn nonlinear_coeffs(&self, design: &SuspensionDesign) -> NonlinearCoeffs {
        NonlinearCoeffs {
            k_nl: self.k_nl.unwrap_or(0.1 * design.k_s),
            c_nl: self.c_nl.unwrap_or(0.1 * design.c_s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearCoeffs {
    pub k_nl: f64,
    pub c_nl: f64,
}

/// Per-step exogenous inputs in scalar form `S`.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<S> {
    pub u: [S; 4],
    pub z_r: [S; 4],
    pub zdot_r: [S; 4],
    pub m_alpha: S,
    pub m_beta: S,
}

impl StepInputs<f64> {
    pub fn new(u: &[f64; 4], drive: &DrivingCondition, road: &WheelDisturbance, params: &VehicleParams) -> Self {
        let (m_alpha, m_beta) = coupling_moments(params, drive);
        Self { u: *u, z_r: road.z_r, zdot_r: road.zdot_r, m_alpha, m_beta }
    }
}

/// Body displacement at each corner due to pitch and roll, and its rate.
pub fn geometric_offsets(state: &FullState, params: &VehicleParams) -> ([f64; 4], [f64; 4]) {
    let dx = params.lever_x();
    let dy = params.lever_y();
    let x = &state.0;
    let mut delta = [0.0; 4];
    let mut rate = [0.0; 4];
    for i in 0..4 {
        delta[i] = dx[i] * x[1] + dy[i] * x[2];
        rate[i] = dx[i] * x[8] + dy[i] * x[9];
    }
    (delta, rate)
}

/// Spring plus damper force for a corner. The nonlinear terms model the
/// physical vehicle's progressive spring and quadratic damper.
pub fn suspension_force(design: &SuspensionDesign, rel_disp: f64, rel_vel: f64, nonlinear: Option<NonlinearCoeffs>) -> f64 {
    let linear = design.k_s * rel_disp + design.c_s * rel_vel;
    match nonlinear {
        None => linear,
        Some(nl) => linear + nl.k_nl * rel_disp * rel_disp * rel_disp + nl.c_nl * rel_vel.abs() * rel_vel,
    }
}

/// Tyre contact force at `wheel` (0-based).
pub fn tire_force(params: &VehicleParams, wheel: usize, road: &WheelDisturbance, state: &FullState) -> f64 {
    params.k_t[wheel] * (road.z_r[wheel] - state.z_u(wheel)) + params.c_t * (road.zdot_r[wheel] - state.z_u_rate(wheel))
}

/// Pitch and roll moments from longitudinal and lateral load transfer.
pub fn coupling_moments(params: &VehicleParams, drive: &DrivingCondition) -> (f64, f64) {
    let m_alpha = params.m_s * params.h_cg * drive.a;
    let m_beta = params.m_s * params.h_cg * drive.v * drive.v * drive.delta.tan() / params.wheelbase();
    (m_alpha, m_beta)
}

/// Continuous-time state derivative, generic over the scalar type.
///
/// `nonlinear` carries `(k_nl, c_nl)` when the physical-vehicle spring and
/// damper terms are active.
pub fn state_derivative<S: Real>(
    x: &[S; STATE_DIM],
    inputs: &StepInputs<S>,
    k_s: S,
    c_s: S,
    params: &VehicleParams,
    nonlinear: Option<(S, S)>,
) -> [S; STATE_DIM] {
    let dx = params.lever_x();
    let dy = params.lever_y();
    let (z_s, alpha, beta) = (x[0], x[1], x[2]);
    let (v_s, alpha_d, beta_d) = (x[7], x[8], x[9]);

    let mut corner = [x[0]; 4];
    let mut wheel_acc = [x[0]; 4];
    for i in 0..4 {
        let z_u = x[3 + i];
        let v_u = x[10 + i];
        let delta = alpha * dx[i] + beta * dy[i];
        let delta_rate = alpha_d * dx[i] + beta_d * dy[i];
        let rel = z_u - z_s - delta;
        let rel_v = v_u - v_s - delta_rate;
        let mut f_s = rel * k_s + rel_v * c_s;
        if let Some((k_nl, c_nl)) = nonlinear {
            f_s = f_s + rel * rel * rel * k_nl + rel_v.abs() * rel_v * c_nl;
        }
        let f_t = (inputs.z_r[i] - z_u) * params.k_t[i] + (inputs.zdot_r[i] - v_u) * params.c_t;
        corner[i] = f_s + inputs.u[i];
        wheel_acc[i] = (f_t - corner[i]) * (1.0 / params.m_u[i]);
    }

    let total = corner[0] + corner[1] + corner[2] + corner[3];
    let pitch = corner[0] * dx[0] + corner[1] * dx[1] + corner[2] * dx[2] + corner[3] * dx[3] + inputs.m_alpha;
    let roll = corner[0] * dy[0] + corner[1] * dy[1] + corner[2] * dy[2] + corner[3] * dy[3] + inputs.m_beta;

    [
        v_s,
        alpha_d,
        beta_d,
        x[10],
        x[11],
        x[12],
        x[13],
        total * (1.0 / params.m_s),
        pitch * (1.0 / params.i_alpha),
        roll * (1.0 / params.i_beta),
        wheel_acc[0],
        wheel_acc[1],
        wheel_acc[2],
        wheel_acc[3],
    ]
}

/// Classical RK4 with the inputs held constant across the step.
pub fn rk4<S: Real, F>(x: &[S; STATE_DIM], dt: f64, f: F) -> [S; STATE_DIM]
where
    F: Fn(&[S; STATE_DIM]) -> [S; STATE_DIM],
{
    let axpy = |a: &[S; STATE_DIM], k: &[S; STATE_DIM], h: f64| -> [S; STATE_DIM] { std::array::from_fn(|i| a[i] + k[i] * h) };
    let k1 = f(x);
    let k2 = f(&axpy(x, &k1, 0.5 * dt));
    let k3 = f(&axpy(x, &k2, 0.5 * dt));
    let k4 = f(&axpy(x, &k3, dt));
    std::array::from_fn(|i| x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
}

/// The 11x14 output selection/difference matrix.
pub fn observation_matrix() -> [[f64; STATE_DIM]; OBS_DIM] {
    let mut c = [[0.0; STATE_DIM]; OBS_DIM];
    c[0][7] = 1.0;
    c[1][8] = 1.0;
    c[2][9] = 1.0;
    for i in 0..4 {
        c[3 + i][3 + i] = 1.0;
        c[7 + i][0] = 1.0;
        c[7 + i][3 + i] = -1.0;
    }
    c
}

/// Generic form of [`observe`].
pub fn observe_generic<S: Real>(x: &[S; STATE_DIM]) -> [S; OBS_DIM] {
    [x[7], x[8], x[9], x[3], x[4], x[5], x[6], x[0] - x[3], x[0] - x[4], x[0] - x[5], x[0] - x[6]]
}

pub fn observe(state: &FullState) -> Observation {
    Observation(observe_generic(&state.0))
}

/// Which physical model a [`Plant`] represents.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Nominal,
    Real(RealSystemPerturbation),
}

/// A vehicle instance: parameters, model variant and actuator limits.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    params: VehicleParams,
    variant: Variant,
    saturation: Option<f64>,
}

/// Why a simulation step was rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub max_abs: f64,
}

impl Plant {
    pub fn nominal(params: VehicleParams) -> Self {
        Self { params, variant: Variant::Nominal, saturation: None }
    }

    /// The physical vehicle built from nominal parameters and perturbations.
    pub fn real(nominal: &VehicleParams, perturbation: RealSystemPerturbation) -> Self {
        Self { params: perturbation.apply(nominal), variant: Variant::Real(perturbation), saturation: None }
    }

    pub fn with_saturation(mut self, limit: Option<f64>) -> Self {
        self.saturation = limit;
        self
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn is_real(&self) -> bool {
        matches!(self.variant, Variant::Real(_))
    }

    pub fn saturate(&self, u: &[f64; 4]) -> [f64; 4] {
        match self.saturation {
            Some(lim) => u.map(|v| v.clamp(-lim, lim)),
            None => *u,
        }
    }

    fn nonlinear(&self, design: &SuspensionDesign) -> Option<(f64, f64)> {
        match &self.variant {
            Variant::Nominal => None,
            Variant::Real(p) => {
                let nl = p.nonlinear_coeffs(design);
                Some((nl.k_nl, nl.c_nl))
            }
        }
    }

    pub fn derivative(
        &self,
        state: &FullState,
        u: &[f64; 4],
        drive: &DrivingCondition,
        road: &WheelDisturbance,
        design: &SuspensionDesign,
    ) -> [f64; STATE_DIM] {
        let inputs = StepInputs::new(&self.saturate(u), drive, road, &self.params);
        state_derivative(&state.0, &inputs, design.k_s, design.c_s, &self.params, self.nonlinear(design))
    }

    /// Body heave, pitch and roll accelerations at the given state.
    pub fn body_accelerations(
        &self,
        state: &FullState,
        u: &[f64; 4],
        drive: &DrivingCondition,
        road: &WheelDisturbance,
        design: &SuspensionDesign,
    ) -> [f64; 3] {
        let d = self.derivative(state, u, drive, road, design);
        [d[7], d[8], d[9]]
    }

    /// One RK4 step; fails when the result is non-finite or exceeds
    /// [`DIVERGENCE_LIMIT`].
    pub fn step(
        &self,
        state: &FullState,
        u: &[f64; 4],
        drive: &DrivingCondition,
        road: &WheelDisturbance,
        design: &SuspensionDesign,
        dt: f64,
    ) -> std::result::Result<FullState, Divergence> {
        let inputs = StepInputs::new(&self.saturate(u), drive, road, &self.params);
        let nl = self.nonlinear(design);
        let next = rk4(&state.0, dt, |x| state_derivative(x, &inputs, design.k_s, design.c_s, &self.params, nl));
        let next = FullState(next);
        let m = next.max_abs();
        if !next.is_finite() || m > DIVERGENCE_LIMIT {
            return Err(Divergence { max_abs: m });
        }
        Ok(next)
    }
}
