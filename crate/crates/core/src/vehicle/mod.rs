//! Single-track vehicle model with four magic-formula tires.
//!
//! The plant state is `(vx, vy, yaw_rate)` in body-fixed coordinates. Slip
//! ratios and steering angles are inputs, so there are no wheel-spin states.
//! Left and right wheels of an axle sit at the same point, which makes every
//! axle force exactly twice the per-wheel force.

mod dynamics;
mod linearize;
mod tire;

pub use dynamics::{derivatives, slip_quantities, step, wheel_forces, wheel_to_body, WheelForces, WheelSlip};
pub use linearize::{linearize, Linearization, DEFAULT_FD_STEP};
pub use tire::{magic_formula, magic_formula_with, TireCoeffs, TireFormula};

use nalgebra::{Vector3, Vector4};

use crate::config::KeyValues;
use crate::error::{invalid, Result};

/// Slip angles are only evaluated for `|vx|` at or above this speed (m/s).
pub const LOW_SPEED_GUARD: f64 = 0.5;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    /// Longitudinal velocity (m/s).
    pub vx: f64,
    /// Lateral velocity (m/s).
    pub vy: f64,
    /// Yaw rate (rad/s).
    pub yaw_rate: f64,
}

impl VehicleState {
    pub const fn new(vx: f64, vy: f64, yaw_rate: f64) -> Self {
        Self { vx, vy, yaw_rate }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.yaw_rate)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.vx, self.vy, self.yaw_rate]
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.yaw_rate.is_finite()
    }

    /// Translational plus rotational kinetic energy (J).
    pub fn kinetic_energy(&self, p: &VehicleParams) -> f64 {
        0.5 * p.mass * (self.vx * self.vx + self.vy * self.vy)
            + 0.5 * p.yaw_inertia * self.yaw_rate * self.yaw_rate
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Four input slots in the order used by every input vector in the crate:
/// front slip ratio, rear slip ratio, front steering, rear steering.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub kappa_f: f64,
    pub kappa_r: f64,
    /// Front steering angle (rad).
    pub delta_f: f64,
    /// Rear steering angle (rad).
    pub delta_r: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { kappa_f: 0.0, kappa_r: 0.0, delta_f: 0.0, delta_r: 0.0 };

    pub const fn new(kappa_f: f64, kappa_r: f64, delta_f: f64, delta_r: f64) -> Self {
        Self { kappa_f, kappa_r, delta_f, delta_r }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.kappa_f, self.kappa_r, self.delta_f, self.delta_r)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.kappa_f, self.kappa_r, self.delta_f, self.delta_r]
    }

    pub fn is_admissible(&self) -> bool {
        let half_pi = std::f64::consts::FRAC_PI_2;
        self.as_array().iter().all(|v| v.is_finite())
            && (-1.0..=1.0).contains(&self.kappa_f)
            && (-1.0..=1.0).contains(&self.kappa_r)
            && self.delta_f.abs() <= half_pi
            && self.delta_r.abs() <= half_pi
    }
}

/// Lateral and longitudinal tire curves for the wheels of one axle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxleTires {
    pub lateral: TireCoeffs,
    pub longitudinal: TireCoeffs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    /// Vehicle mass (kg).
    pub mass: f64,
    /// Yaw inertia (kg m^2).
    pub yaw_inertia: f64,
    /// Distance from the center of gravity to the front axle (m).
    pub l_front: f64,
    /// Distance from the center of gravity to the rear axle (m).
    pub l_rear: f64,
    pub drag_coeff: f64,
    pub air_density: f64,
    pub frontal_area: f64,
    pub tire_front: AxleTires,
    pub tire_rear: AxleTires,
    pub tire_formula: TireFormula,
}

const LAT_B: f64 = 10.0;
const LAT_C: f64 = 1.9;
const LAT_PEAK: f64 = 1.2;
const LAT_E: f64 = 0.97;
const LONG_B: f64 = 12.0;
const LONG_C: f64 = 1.65;
const LONG_PEAK: f64 = 1.1;
const LONG_E: f64 = 0.95;

impl Default for VehicleParams {
    fn default() -> Self {
        Self::with_geometry(1300.0, 1600.0, 1.2, 1.3)
    }
}

impl VehicleParams {
    /// Builds a parameter set whose tire peak forces follow from the static
    /// wheel loads of the given mass distribution.
    pub fn with_geometry(mass: f64, yaw_inertia: f64, l_front: f64, l_rear: f64) -> Self {
        let wheelbase = l_front + l_rear;
        let load_front = mass * GRAVITY * l_rear / (2.0 * wheelbase);
        let load_rear = mass * GRAVITY * l_front / (2.0 * wheelbase);
        let axle = |load: f64| AxleTires {
            lateral: TireCoeffs::new(LAT_B, LAT_C, LAT_PEAK * load, LAT_E),
            longitudinal: TireCoeffs::new(LONG_B, LONG_C, LONG_PEAK * load, LONG_E),
        };
        Self {
            mass,
            yaw_inertia,
            l_front,
            l_rear,
            drag_coeff: 0.35,
            air_density: 1.225,
            frontal_area: 2.0,
            tire_front: axle(load_front),
            tire_rear: axle(load_rear),
            tire_formula: TireFormula::Sine,
        }
    }

    /// Static normal load on one wheel of each axle, `(front, rear)` in N.
    pub fn static_wheel_loads(&self) -> (f64, f64) {
        let wheelbase = self.l_front + self.l_rear;
        (
            self.mass * GRAVITY * self.l_rear / (2.0 * wheelbase),
            self.mass * GRAVITY * self.l_front / (2.0 * wheelbase),
        )
    }

    /// `½ c_w ρ A_w`, the coefficient multiplying `|v| v` in the drag force.
    pub fn drag_factor(&self) -> f64 {
        0.5 * self.drag_coeff * self.air_density * self.frontal_area
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("l_front", self.l_front),
            ("l_rear", self.l_rear),
            ("drag_coeff", self.drag_coeff),
            ("air_density", self.air_density),
            ("frontal_area", self.frontal_area),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be finite and positive, got {v}")));
            }
        }
        for (axle, tires) in [("front", &self.tire_front), ("rear", &self.tire_rear)] {
            tires.lateral.validate().map_err(|e| invalid(format!("{axle} lateral tire: {e}")))?;
            tires.longitudinal.validate().map_err(|e| invalid(format!("{axle} longitudinal tire: {e}")))?;
        }
        Ok(())
    }

    /// Reads overrides from a flat `name = value` table. Peak forces that are
    /// not given explicitly are recomputed from the (possibly overridden)
    /// mass and axle distances.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let mass = kv.f64_or("mass", d.mass)?;
        let yaw_inertia = kv.f64_or("yaw_inertia", d.yaw_inertia)?;
        let l_front = kv.f64_or("l_front", d.l_front)?;
        let l_rear = kv.f64_or("l_rear", d.l_rear)?;
        let mut p = Self::with_geometry(mass, yaw_inertia, l_front, l_rear);
        p.drag_coeff = kv.f64_or("drag_coeff", p.drag_coeff)?;
        p.air_density = kv.f64_or("air_density", p.air_density)?;
        p.frontal_area = kv.f64_or("frontal_area", p.frontal_area)?;
        for (prefix, tires) in [("front", &mut p.tire_front), ("rear", &mut p.tire_rear)] {
            for (kind, c) in [("lat", &mut tires.lateral), ("long", &mut tires.longitudinal)] {
                c.b = kv.f64_or(&format!("{prefix}_{kind}_b"), c.b)?;
                c.c = kv.f64_or(&format!("{prefix}_{kind}_c"), c.c)?;
                c.d = kv.f64_or(&format!("{prefix}_{kind}_d"), c.d)?;
                c.e = kv.f64_or(&format!("{prefix}_{kind}_e"), c.e)?;
            }
        }
        if let Some((line, v)) = kv.get("tire_formula") {
            p.tire_formula = match v {
                "sin" => TireFormula::Sine,
                "cos" => TireFormula::Cosine,
                other => {
                    return Err(crate::Error::Config {
                        line,
                        msg: format!("tire_formula must be `sin` or `cos`, got `{other}`"),
                    })
                }
            };
        }
        p.validate()?;
        Ok(p)
    }

    /// Inverse of [`VehicleParams::from_key_values`]; every field is written.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: f64| out.push_str(&format!("{k} = {v:?}\n"));
        push("mass", self.mass);
        push("yaw_inertia", self.yaw_inertia);
        push("l_front", self.l_front);
        push("l_rear", self.l_rear);
        push("drag_coeff", self.drag_coeff);
        push("air_density", self.air_density);
        push("frontal_area", self.frontal_area);
        for (prefix, tires) in [("front", &self.tire_front), ("rear", &self.tire_rear)] {
            for (kind, c) in [("lat", &tires.lateral), ("long", &tires.longitudinal)] {
                push(&format!("{prefix}_{kind}_b"), c.b);
                push(&format!("{prefix}_{kind}_c"), c.c);
                push(&format!("{prefix}_{kind}_d"), c.d);
                push(&format!("{prefix}_{kind}_e"), c.e);
            }
        }
        let formula = match self.tire_formula {
            TireFormula::Sine => "sin",
            TireFormula::Cosine => "cos",
        };
        out.push_str(&format!("tire_formula = {formula}\n"));
        out
    }
}
