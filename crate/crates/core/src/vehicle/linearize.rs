use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use super::{step, ControlInput, VehicleParams, VehicleState};
use crate::error::{invalid, Result};

/// Default central-difference step, in state and input units.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Affine model `x⁺ ≈ A x + B u + c` of the discrete plant around a trim point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: Matrix3<f64>,
    pub b: Matrix3x4<f64>,
    pub c: Vector3<f64>,
    pub trim_state: VehicleState,
    pub trim_input: ControlInput,
}

impl Linearization {
    pub fn predict(&self, x: &Vector3<f64>, u: &Vector4<f64>) -> Vector3<f64> {
        self.a * x + self.b * u + self.c
    }
}

/// Central-difference Jacobians of [`step`] at `(trim_state, trim_input)`.
pub fn linearize(
    trim_state: &VehicleState,
    trim_input: &ControlInput,
    p: &VehicleParams,
    ts: f64,
    eps: f64,
) -> Result<Linearization> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let x0 = trim_state.to_vector();
    let u0 = trim_input.to_vector();
    let f = |x: Vector3<f64>, u: Vector4<f64>| -> Result<Vector3<f64>> {
        Ok(step(&VehicleState::from_vector(&x), &ControlInput::from_vector(&u), p, ts)?.to_vector())
    };

    let mut a = Matrix3::zeros();
    for j in 0..3 {
        let mut dx = Vector3::zeros();
        dx[j] = eps;
        let col = (f(x0 + dx, u0)? - f(x0 - dx, u0)?) / (2.0 * eps);
        a.set_column(j, &col);
    }
    let mut b = Matrix3x4::zeros();
    for j in 0..4 {
        let mut du = Vector4::zeros();
        du[j] = eps;
        let col = (f(x0, u0 + du)? - f(x0, u0 - du)?) / (2.0 * eps);
        b.set_column(j, &col);
    }
    let c = f(x0, u0)? - a * x0 - b * u0;
    Ok(Linearization { a, b, c, trim_state: *trim_state, trim_input: *trim_input })
}
