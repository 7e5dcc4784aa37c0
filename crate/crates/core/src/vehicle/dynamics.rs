use nalgebra::Vector3;

use super::{magic_formula_with, ControlInput, VehicleParams, VehicleState, LOW_SPEED_GUARD};
use crate::error::{invalid, Error, Result};

/// Slip quantities of one wheel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelSlip {
    /// Sideslip angle (rad).
    pub alpha: f64,
    /// Longitudinal slip ratio.
    pub kappa: f64,
}

/// Per-wheel forces, wheels ordered front-left, front-right, rear-left, rear-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelForces {
    /// `(F_Rx, F_Ry)` in the wheel frame (N).
    pub wheel_frame: [[f64; 2]; 4],
    /// `(F_x, F_y)` in the body frame (N).
    pub body_frame: [[f64; 2]; 4],
    /// Steering angle of each wheel (rad).
    pub steer: [f64; 4],
}

impl WheelForces {
    /// Longitudinal position of each wheel relative to the center of gravity.
    pub fn positions(p: &VehicleParams) -> [f64; 4] {
        [p.l_front, p.l_front, -p.l_rear, -p.l_rear]
    }

    pub fn total_body_force(&self) -> [f64; 2] {
        self.body_frame.iter().fold([0.0, 0.0], |acc, f| [acc[0] + f[0], acc[1] + f[1]])
    }

    /// z-component of `Σ r_i × F_i` with `r_i = (x_i, 0)`.
    pub fn yaw_moment(&self, p: &VehicleParams) -> f64 {
        Self::positions(p)
            .iter()
            .zip(&self.body_frame)
            .map(|(x, f)| x * f[1])
            .sum()
    }
}

fn check_guard(vx: f64) -> Result<()> {
    if vx.is_finite() && vx.abs() >= LOW_SPEED_GUARD {
        Ok(())
    } else {
        Err(Error::LowSpeed { vx, guard: LOW_SPEED_GUARD })
    }
}

pub fn slip_quantities(s: &VehicleState, u: &ControlInput, p: &VehicleParams) -> Result<[WheelSlip; 4]> {
    check_guard(s.vx)?;
    let front = u.delta_f - ((s.vy + p.l_front * s.yaw_rate) / s.vx).atan();
    let rear = u.delta_r - ((s.vy - p.l_rear * s.yaw_rate) / s.vx).atan();
    Ok([
        WheelSlip { alpha: front, kappa: u.kappa_f },
        WheelSlip { alpha: front, kappa: u.kappa_f },
        WheelSlip { alpha: rear, kappa: u.kappa_r },
        WheelSlip { alpha: rear, kappa: u.kappa_r },
    ])
}

/// Rotates a wheel-frame force pair into the body frame.
pub fn wheel_to_body(f: [f64; 2], delta: f64) -> [f64; 2] {
    let (sin, cos) = delta.sin_cos();
    [cos * f[0] - sin * f[1], sin * f[0] + cos * f[1]]
}

pub fn wheel_forces(s: &VehicleState, u: &ControlInput, p: &VehicleParams) -> Result<WheelForces> {
    let slips = slip_quantities(s, u, p)?;
    let steer = [u.delta_f, u.delta_f, u.delta_r, u.delta_r];
    let tires = [&p.tire_front, &p.tire_front, &p.tire_rear, &p.tire_rear];
    let mut wheel_frame = [[0.0; 2]; 4];
    let mut body_frame = [[0.0; 2]; 4];
    for i in 0..4 {
        let fx = magic_formula_with(p.tire_formula, slips[i].kappa, &tires[i].longitudinal);
        let fy = magic_formula_with(p.tire_formula, slips[i].alpha, &tires[i].lateral);
        wheel_frame[i] = [fx, fy];
        body_frame[i] = wheel_to_body([fx, fy], steer[i]);
    }
    Ok(WheelForces { wheel_frame, body_frame, steer })
}

/// Time derivative `(v̇x, v̇y, ψ̈)` of the rigid-body equations.
pub fn derivatives(s: &VehicleState, u: &ControlInput, p: &VehicleParams) -> Result<Vector3<f64>> {
    let forces = wheel_forces(s, u, p)?;
    let [fx, fy] = forces.total_body_force();
    let drag = p.drag_factor() * (s.vx * s.vx + s.vy * s.vy).sqrt();
    let vx_dot = s.yaw_rate * s.vy + (fx - drag * s.vx) / p.mass;
    let vy_dot = -s.yaw_rate * s.vx + (fy - drag * s.vy) / p.mass;
    let yaw_accel = forces.yaw_moment(p) / p.yaw_inertia;
    Ok(Vector3::new(vx_dot, vy_dot, yaw_accel))
}

/// Advances the state by one classical fourth-order Runge-Kutta step with
/// the input held constant. This map is the discrete-time plant.
pub fn step(s: &VehicleState, u: &ControlInput, p: &VehicleParams, ts: f64) -> Result<VehicleState> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(invalid(format!("time step must be positive, got {ts}")));
    }
    let x = s.to_vector();
    let f = |x: Vector3<f64>| derivatives(&VehicleState::from_vector(&x), u, p);
    let k1 = f(x)?;
    let k2 = f(x + k1 * (0.5 * ts))?;
    let k3 = f(x + k2 * (0.5 * ts))?;
    let k4 = f(x + k3 * ts)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ts / 6.0);
    Ok(VehicleState::from_vector(&next))
}
