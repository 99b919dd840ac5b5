//! Running control costs and their Legendre-Fenchel conjugates.
//!
//! A control cost `C` maps a control level `u >= 0` to a cost rate. Admissible
//! costs are non-increasing, convex, twice differentiable, bounded by a finite
//! `C(0)` and vanish at infinity. The conjugate
//!
//! ```text
//! F(y) = sup_{u >= 0} { u*y - C(u) }
//! ```
//!
//! is finite on `(-inf, 0]`, where it is evaluated through the inverse of `C'`:
//! `F(y) = y*h(y) - C(h(y))` with `h = (C')^{-1}` on `(C'(0), 0)`, `F = -C(0)`
//! below `C'(0)`, and `F(0) = 0`. The derivative is `F'(y) = h(y)` on
//! `(C'(0), 0)` and zero below.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Arguments this close to zero are evaluated as exactly zero by [`legendre_eval`].
pub const ZERO_SNAP: f64 = 1e-12;

/// Absolute tolerance of the bisection used to invert `C'` for custom costs.
pub const INVERSE_TOLERANCE: f64 = 1e-12;

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// User-supplied cost with explicit first and second derivatives.
pub struct CustomCost {
    pub name: String,
    pub value: Box<ScalarFn>,
    pub derivative1: Box<ScalarFn>,
    pub derivative2: Box<ScalarFn>,
}

impl fmt::Debug for CustomCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCost").field("name", &self.name).finish()
    }
}

/// Tag for the built-in cost families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostKind {
    Exponential { beta: f64 },
    ReciprocalShifted,
    /// `1/u`: unbounded at the origin, kept only for conjugate tables.
    Reciprocal,
    Custom,
}

#[derive(Debug, Clone)]
enum Repr {
    Exponential { beta: f64 },
    ReciprocalShifted,
    Reciprocal,
    Custom(Arc<CustomCost>),
}

/// A running control cost `C(u)` on `u >= 0`.
#[derive(Debug, Clone)]
pub struct CostFunction {
    repr: Repr,
}

/// `C(u) = exp(-beta*u)`.
pub fn make_exponential_cost(beta: f64) -> Result<CostFunction> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::param("beta", format!("must be positive and finite, got {beta}")));
    }
    Ok(CostFunction {
        repr: Repr::Exponential { beta },
    })
}

/// `C(u) = 1/(u+1)`.
pub fn make_reciprocal_cost() -> CostFunction {
    CostFunction {
        repr: Repr::ReciprocalShifted,
    }
}

/// `C(u) = 1/u`, whose value at the origin is infinite. The solver rejects it;
/// it exists so conjugate tables can show the unbounded case.
pub fn make_inadmissible_reciprocal_cost() -> CostFunction {
    CostFunction {
        repr: Repr::Reciprocal,
    }
}

impl CostFunction {
    /// Wraps a custom cost. `C(0)` must be finite and positive and `C'(0)` negative.
    pub fn custom(cost: CustomCost) -> Result<Self> {
        let c0 = (cost.value)(0.0);
        let d0 = (cost.derivative1)(0.0);
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(Error::param("cost", format!("C(0) must be finite and positive, got {c0}")));
        }
        if !(d0 < 0.0) {
            return Err(Error::param("cost", format!("C'(0) must be negative, got {d0}")));
        }
        Ok(CostFunction {
            repr: Repr::Custom(Arc::new(cost)),
        })
    }

    pub fn kind(&self) -> CostKind {
        match &self.repr {
            Repr::Exponential { beta } => CostKind::Exponential { beta: *beta },
            Repr::ReciprocalShifted => CostKind::ReciprocalShifted,
            Repr::Reciprocal => CostKind::Reciprocal,
            Repr::Custom(_) => CostKind::Custom,
        }
    }

    pub fn label(&self) -> String {
        match &self.repr {
            Repr::Exponential { beta } => format!("exp(-{beta}u)"),
            Repr::ReciprocalShifted => "1/(u+1)".to_string(),
            Repr::Reciprocal => "1/u".to_string(),
            Repr::Custom(c) => c.name.clone(),
        }
    }

    /// Finite `C(0)`, hence usable by the HJB solver.
    pub fn is_admissible(&self) -> bool {
        !matches!(self.repr, Repr::Reciprocal)
    }

    pub fn evaluate(&self, u: f64) -> f64 {
        match &self.repr {
            Repr::Exponential { beta } => (-beta * u).exp(),
            Repr::ReciprocalShifted => 1.0 / (u + 1.0),
            Repr::Reciprocal => 1.0 / u,
            Repr::Custom(c) => (c.value)(u),
        }
    }

    pub fn derivative1(&self, u: f64) -> f64 {
        match &self.repr {
            Repr::Exponential { beta } => -beta * (-beta * u).exp(),
            Repr::ReciprocalShifted => -1.0 / ((u + 1.0) * (u + 1.0)),
            Repr::Reciprocal => -1.0 / (u * u),
            Repr::Custom(c) => (c.derivative1)(u),
        }
    }

    pub fn derivative2(&self, u: f64) -> f64 {
        match &self.repr {
            Repr::Exponential { beta } => beta * beta * (-beta * u).exp(),
            Repr::ReciprocalShifted => 2.0 / (u + 1.0).powi(3),
            Repr::Reciprocal => 2.0 / (u * u * u),
            Repr::Custom(c) => (c.derivative2)(u),
        }
    }

    pub fn cost_at_zero(&self) -> f64 {
        self.evaluate(0.0)
    }

    /// `C'(0)`, negative infinity for the unbounded reciprocal.
    pub fn slope_at_zero(&self) -> f64 {
        match &self.repr {
            Repr::Reciprocal => f64::NEG_INFINITY,
            _ => self.derivative1(0.0),
        }
    }

    /// `(C')^{-1}(y)` for `C'(0) < y < 0`.
    pub fn inverse_derivative(&self, y: f64) -> f64 {
        match &self.repr {
            Repr::Exponential { beta } => -(-y / beta).ln() / beta,
            Repr::ReciprocalShifted => 1.0 / (-y).sqrt() - 1.0,
            Repr::Reciprocal => 1.0 / (-y).sqrt(),
            Repr::Custom(c) => invert_monotone(&*c.derivative1, y),
        }
    }
}

/// Solves `g(u) = y` for a continuous non-decreasing `g` with `g(0) < y`.
fn invert_monotone(g: &ScalarFn, y: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    while g(hi) < y {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    while hi - lo > INVERSE_TOLERANCE * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if g(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `F(y)` for `y <= 0`.
pub fn legendre_eval(cost: &CostFunction, y: f64) -> Result<f64> {
    if y > ZERO_SNAP || y.is_nan() {
        return Err(Error::Domain {
            y,
            reason: "the conjugate is +inf for positive arguments; use the linear extension",
        });
    }
    if y >= -ZERO_SNAP {
        return Ok(0.0);
    }
    if y <= cost.slope_at_zero() {
        return Ok(-cost.cost_at_zero());
    }
    let u = cost.inverse_derivative(y);
    Ok(y * u - cost.evaluate(u))
}

/// `F'(y)` for `y < 0`.
pub fn legendre_derivative(cost: &CostFunction, y: f64) -> Result<f64> {
    if !(y < 0.0) {
        return Err(Error::Domain {
            y,
            reason: "the conjugate derivative diverges at zero and is undefined above it",
        });
    }
    if y <= cost.slope_at_zero() {
        return Ok(0.0);
    }
    Ok(cost.inverse_derivative(y).max(0.0))
}

/// `F~(y)`: equal to `F` up to `-delta`, affine with slope `F'(-delta)` beyond.
pub fn legendre_extended(cost: &CostFunction, delta: f64, y: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::param("delta", format!("must be positive, got {delta}")));
    }
    ConjugatePair::new(cost.clone(), delta).map(|pair| pair.f_tilde(y))
}

/// The conjugate `F`, its derivative, and the linear extension `F~` past `-delta`.
#[derive(Debug, Clone)]
pub struct ConjugatePair {
    cost: CostFunction,
    delta: f64,
    f_at_junction: f64,
    slope_at_junction: f64,
}

impl ConjugatePair {
    pub fn new(cost: CostFunction, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::param("delta", format!("must be positive, got {delta}")));
        }
        let f_at_junction = legendre_eval(&cost, -delta)?;
        let slope_at_junction = legendre_derivative(&cost, -delta)?;
        Ok(Self {
            cost,
            delta,
            f_at_junction,
            slope_at_junction,
        })
    }

    pub fn cost(&self) -> &CostFunction {
        &self.cost
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn f(&self, y: f64) -> Result<f64> {
        legendre_eval(&self.cost, y)
    }

    pub fn f_prime(&self, y: f64) -> Result<f64> {
        legendre_derivative(&self.cost, y)
    }

    pub fn f_tilde(&self, y: f64) -> f64 {
        if y <= -self.delta {
            // Cannot fail: y is strictly negative here.
            legendre_eval(&self.cost, y).unwrap_or(f64::NAN)
        } else {
            self.slope_at_junction * (y + self.delta) + self.f_at_junction
        }
    }

    /// Slope of `F~`, constant on the extension branch.
    pub fn f_tilde_prime(&self, y: f64) -> f64 {
        if y <= -self.delta {
            legendre_derivative(&self.cost, y).unwrap_or(f64::NAN)
        } else {
            self.slope_at_junction
        }
    }
}
