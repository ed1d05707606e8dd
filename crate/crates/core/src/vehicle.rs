//! Dynamic single-track vehicle model with Pacejka lateral tire forces.
//!
//! State layout follows `[x, y, delta, v, psi, psi_dot, beta]`. Inputs are the
//! steering velocity and the longitudinal acceleration; a proportional
//! low-level controller maps (steering, speed) targets onto those inputs.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::SimError;

pub const GRAVITY: f64 = 9.81;

/// Below this body-frame longitudinal speed only the kinematic model is used.
pub const KINEMATIC_SWITCH: f64 = 0.5;
/// Above this speed only the dynamic model is used; in between both are blended.
pub const DYNAMIC_SWITCH: f64 = 1.0;

/// Control period at 40 Hz.
pub const CONTROL_DT: f64 = 0.025;
/// RK4 substeps per control period.
pub const SUBSTEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub mass: f64,
    pub inertia_z: f64,
    pub width: f64,
    pub length: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub h_cg: f64,
    pub delta_max: f64,
    pub sv_max: f64,
    pub a_max: f64,
    pub a_min: f64,
    pub v_max: f64,
    pub v_min: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 3.3,
            inertia_z: 0.0627,
            width: 0.27,
            length: 0.51,
            l_f: 0.1625,
            l_r: 0.1625,
            h_cg: 0.02,
            delta_max: 0.45,
            sv_max: 3.2,
            a_max: 4.9,
            a_min: -3.7,
            v_max: 8.0,
            v_min: 0.0,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("mass", self.mass),
            ("inertia_z", self.inertia_z),
            ("width", self.width),
            ("length", self.length),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("h_cg", self.h_cg),
            ("delta_max", self.delta_max),
            ("sv_max", self.sv_max),
            ("a_max", self.a_max),
            ("v_max", self.v_max),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(SimError::InvalidParameter(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.a_min < 0.0) {
            return Err(SimError::InvalidParameter(format!("a_min must be negative, got {}", self.a_min)));
        }
        if !(self.v_min >= 0.0) || self.v_min >= self.v_max {
            return Err(SimError::InvalidParameter(format!(
                "speed range [{}, {}] is invalid",
                self.v_min, self.v_max
            )));
        }
        if self.wheelbase() >= self.length {
            return Err(SimError::InvalidParameter("l_f + l_r must be shorter than the vehicle".into()));
        }
        Ok(())
    }
}

/// Magic Formula coefficients for both axles plus the road friction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TireParams {
    pub mu: f64,
    pub b_f: f64,
    pub c_f: f64,
    pub d_f: f64,
    pub e_f: f64,
    pub b_r: f64,
    pub c_r: f64,
    pub d_r: f64,
    pub e_r: f64,
}

impl Default for TireParams {
    fn default() -> Self {
        Self {
            mu: 0.5,
            b_f: 5.5,
            c_f: 1.5,
            d_f: 1.0,
            e_f: 0.1,
            b_r: 6.5,
            c_r: 1.5,
            d_r: 1.0,
            e_r: 0.1,
        }
    }
}

impl TireParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let checks = [
            ("mu", self.mu),
            ("b_f", self.b_f),
            ("c_f", self.c_f),
            ("d_f", self.d_f),
            ("b_r", self.b_r),
            ("c_r", self.c_r),
            ("d_r", self.d_r),
        ];
        for (name, value) in checks {
            if !(value > 0.0) {
                return Err(SimError::InvalidParameter(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axle {
    Front,
    Rear,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub delta: f64,
    pub v: f64,
    pub psi: f64,
    pub psi_dot: f64,
    pub beta: f64,
}

impl VehicleState {
    pub fn at_pose(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi: wrap_angle(psi), ..Self::default() }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.delta, self.v, self.psi, self.psi_dot, self.beta]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self { x: a[0], y: a[1], delta: a[2], v: a[3], psi: a[4], psi_dot: a[5], beta: a[6] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Body-frame velocity components at the CG.
    pub fn body_velocity(&self) -> (f64, f64) {
        (self.v * self.beta.cos(), self.v * self.beta.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelInput {
    pub sv: f64,
    pub accel: f64,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Front and rear slip angles. Fails when the body-frame longitudinal speed is
/// below the kinematic switch, where the arctan terms are ill-conditioned.
pub fn slip_angles(state: &VehicleState, params: &VehicleParams) -> Result<(f64, f64), SimError> {
    let (vx, vy) = state.body_velocity();
    if vx < KINEMATIC_SWITCH {
        return Err(SimError::DegenerateSpeed(vx));
    }
    Ok(slip_angles_unchecked(state, params, vx, vy))
}

fn slip_angles_unchecked(state: &VehicleState, params: &VehicleParams, vx: f64, vy: f64) -> (f64, f64) {
    let alpha_f = ((-vy - params.l_f * state.psi_dot) / vx).atan() + state.delta;
    let alpha_r = ((-vy + params.l_r * state.psi_dot) / vx).atan();
    (alpha_f, alpha_r)
}

/// Axle normal loads with longitudinal load transfer. Acceleration is clamped to
/// the admissible range first.
pub fn normal_loads(params: &VehicleParams, accel: f64) -> (f64, f64) {
    let a = accel.clamp(params.a_min, params.a_max);
    let wb = params.wheelbase();
    let f_zf = params.mass * (GRAVITY * params.l_r - params.h_cg * a) / wb;
    let f_zr = params.mass * (GRAVITY * params.l_f + params.h_cg * a) / wb;
    (f_zf, f_zr)
}

/// Pacejka Magic Formula lateral force for one axle.
pub fn lateral_tire_force(alpha: f64, f_z: f64, tires: &TireParams, axle: Axle) -> f64 {
    let (b, c, d, e) = match axle {
        Axle::Front => (tires.b_f, tires.c_f, tires.d_f, tires.e_f),
        Axle::Rear => (tires.b_r, tires.c_r, tires.d_r, tires.e_r),
    };
    let ba = b * alpha;
    tires.mu * d * f_z * (c * (ba - e * (ba - ba.atan())).atan()).sin()
}

/// Applies the rate limit and the state-dependent saturation of both inputs.
fn constrain_input(state: &VehicleState, input: ModelInput, params: &VehicleParams) -> ModelInput {
    let mut sv = input.sv.clamp(-params.sv_max, params.sv_max);
    if (sv > 0.0 && state.delta >= params.delta_max) || (sv < 0.0 && state.delta <= -params.delta_max) {
        sv = 0.0;
    }
    let mut accel = input.accel.clamp(params.a_min, params.a_max);
    if (accel > 0.0 && state.v >= params.v_max) || (accel < 0.0 && state.v <= params.v_min) {
        accel = 0.0;
    }
    ModelInput { sv, accel }
}

fn dynamic_derivative(
    state: &VehicleState,
    input: ModelInput,
    params: &VehicleParams,
    tires: &TireParams,
) -> [f64; 7] {
    let (vx, vy) = state.body_velocity();
    let (alpha_f, alpha_r) = slip_angles_unchecked(state, params, vx, vy);
    let (f_zf, f_zr) = normal_loads(params, input.accel);
    let f_yf = lateral_tire_force(alpha_f, f_zf, tires, Axle::Front);
    let f_yr = lateral_tire_force(alpha_r, f_zr, tires, Axle::Rear);
    let cos_d = state.delta.cos();
    let heading = state.psi + state.beta;
    [
        state.v * heading.cos(),
        state.v * heading.sin(),
        input.sv,
        input.accel,
        state.psi_dot,
        (params.l_f * f_yf * cos_d - params.l_r * f_yr) / params.inertia_z,
        (f_yf * cos_d + f_yr) / (params.mass * state.v) - state.psi_dot,
    ]
}

fn kinematic_derivative(state: &VehicleState, input: ModelInput, params: &VehicleParams) -> [f64; 7] {
    let wb = params.wheelbase();
    let ratio = params.l_r / wb;
    let tan_d = state.delta.tan();
    let cos_d = state.delta.cos();
    let beta = (ratio * tan_d).atan();
    let heading = state.psi + beta;
    let beta_dot = ratio * input.sv / (cos_d * cos_d * (1.0 + (ratio * tan_d).powi(2)));
    let yaw_rate = state.v * beta.cos() * tan_d / wb;
    let yaw_acc = (input.accel * beta.cos() * tan_d - state.v * beta.sin() * tan_d * beta_dot
        + state.v * beta.cos() * input.sv / (cos_d * cos_d))
        / wb;
    [
        state.v * heading.cos(),
        state.v * heading.sin(),
        input.sv,
        input.accel,
        yaw_rate,
        yaw_acc,
        beta_dot,
    ]
}

/// Weight of the dynamic model at body-frame longitudinal speed `vx`.
fn dynamic_weight(vx: f64) -> f64 {
    ((vx - KINEMATIC_SWITCH) / (DYNAMIC_SWITCH - KINEMATIC_SWITCH)).clamp(0.0, 1.0)
}

/// Right-hand side of the single-track ODE. Inputs are saturated against the
/// current state before use; the kinematic model is blended in at low speed.
pub fn state_derivative(
    state: &VehicleState,
    input: ModelInput,
    params: &VehicleParams,
    tires: &TireParams,
) -> VehicleState {
    let input = constrain_input(state, input, params);
    let (vx, _) = state.body_velocity();
    let w = dynamic_weight(vx);
    let d = if w >= 1.0 {
        dynamic_derivative(state, input, params, tires)
    } else if w <= 0.0 {
        kinematic_derivative(state, input, params)
    } else {
        let dyn_d = dynamic_derivative(state, input, params, tires);
        let kin_d = kinematic_derivative(state, input, params);
        std::array::from_fn(|i| w * dyn_d[i] + (1.0 - w) * kin_d[i])
    };
    VehicleState::from_array(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowLevelGains {
    pub k_delta: f64,
    pub k_v: f64,
}

impl Default for LowLevelGains {
    fn default() -> Self {
        Self { k_delta: 1.0 / CONTROL_DT, k_v: 2.0 }
    }
}

/// Proportional steering and speed tracking with actuator saturation.
pub fn low_level_control(
    state: &VehicleState,
    delta_target: f64,
    v_target: f64,
    params: &VehicleParams,
    gains: LowLevelGains,
) -> ModelInput {
    let delta_target = delta_target.clamp(-params.delta_max, params.delta_max);
    let v_target = v_target.clamp(params.v_min, params.v_max);
    ModelInput {
        sv: (gains.k_delta * (delta_target - state.delta)).clamp(-params.sv_max, params.sv_max),
        accel: (gains.k_v * (v_target - state.v)).clamp(params.a_min, params.a_max),
    }
}

fn axpy(y: &[f64; 7], k: &[f64; 7], h: f64) -> VehicleState {
    VehicleState::from_array(std::array::from_fn(|i| y[i] + h * k[i]))
}

/// Integrates the model over `dt` with a zero-order-hold input using
/// `substeps` classical RK4 steps.
pub fn integrate_with_input(
    state: &VehicleState,
    input: ModelInput,
    params: &VehicleParams,
    tires: &TireParams,
    dt: f64,
    substeps: usize,
) -> Result<VehicleState, SimError> {
    let h = dt / substeps as f64;
    let f = |s: &VehicleState| state_derivative(s, input, params, tires).to_array();
    let mut y = *state;
    for _ in 0..substeps {
        let y0 = y.to_array();
        let k1 = f(&y);
        let k2 = f(&axpy(&y0, &k1, 0.5 * h));
        let k3 = f(&axpy(&y0, &k2, 0.5 * h));
        let k4 = f(&axpy(&y0, &k3, h));
        y = VehicleState::from_array(std::array::from_fn(|i| {
            y0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        }));
    }
    if !y.is_finite() {
        return Err(SimError::NonFiniteState);
    }
    y.delta = y.delta.clamp(-params.delta_max, params.delta_max);
    y.v = y.v.clamp(params.v_min, params.v_max);
    y.psi = wrap_angle(y.psi);
    Ok(y)
}

/// One control period: low-level control followed by RK4 integration.
pub fn integrate_step(
    state: &VehicleState,
    delta_target: f64,
    v_target: f64,
    params: &VehicleParams,
    tires: &TireParams,
    dt: f64,
) -> Result<VehicleState, SimError> {
    let input = low_level_control(state, delta_target, v_target, params, LowLevelGains { k_delta: 1.0 / dt, k_v: 2.0 });
    integrate_with_input(state, input, params, tires, dt, SUBSTEPS)
}
