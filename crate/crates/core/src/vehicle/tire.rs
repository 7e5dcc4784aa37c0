use crate::error::{invalid, Result};

/// Magic-formula coefficients: stiffness `b`, shape `c`, peak `d` (N) and curvature `e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireCoeffs {
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl TireCoeffs {
    pub const fn new(b: f64, c: f64, d: f64, e: f64) -> Self {
        Self { b, c, d, e }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b.is_finite() && self.b > 0.0) {
            return Err(invalid(format!("B must be positive, got {}", self.b)));
        }
        if !(self.c > 0.0 && self.c < 3.0) {
            return Err(invalid(format!("C must lie in (0, 3), got {}", self.c)));
        }
        if !(self.d.is_finite() && self.d > 0.0) {
            return Err(invalid(format!("D must be positive, got {}", self.d)));
        }
        if !(self.e.is_finite() && self.e <= 1.0) {
            return Err(invalid(format!("E must be at most 1, got {}", self.e)));
        }
        Ok(())
    }
}

/// Outer trigonometric function of the magic formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TireFormula {
    /// `D sin(C atan(...))`: zero force at zero slip.
    #[default]
    Sine,
    /// `D cos(C atan(...))`, kept only for side-by-side comparison.
    Cosine,
}

/// `D sin(C atan(Bx - E(Bx - atan(Bx))))`.
pub fn magic_formula(x: f64, c: &TireCoeffs) -> f64 {
    magic_formula_with(TireFormula::Sine, x, c)
}

pub fn magic_formula_with(formula: TireFormula, x: f64, c: &TireCoeffs) -> f64 {
    let bx = c.b * x;
    let phase = c.c * (bx - c.e * (bx - bx.atan())).atan();
    match formula {
        TireFormula::Sine => c.d * phase.sin(),
        TireFormula::Cosine => c.d * phase.cos(),
    }
}
