//! The switching problem instance: parameters, regimes, running reward, the
//! zero-switch value function and the reference regions that localize the
//! free boundaries.
//!
//! Everything is expressed in the normalized state `z = (x - μ)√θ/σ`, whose
//! dynamics are `dZ = -θ Z dt + √θ dW` with generator
//! `L = (θ/2) d²/dz² - θ z d/dz`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specfun::Jet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("parameter {name} must be finite and positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("parameter {name} must be finite, got {value}")]
    NotFinite { name: &'static str, value: f64 },
    #[error("empty reference region for ξ=0 (towards ξ={target}): θ² < 4λδK")]
    EmptyReferenceRegion { target: i8 },
    #[error("reference regions for ξ=0 overlap")]
    OverlappingReferenceRegions,
}

/// Market position: `+1` long A / short B, `-1` long B / short A, `0` flat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Regime {
    Short,
    Flat,
    Long,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Short, Regime::Flat, Regime::Long];

    pub fn xi(self) -> i8 {
        match self {
            Regime::Short => -1,
            Regime::Flat => 0,
            Regime::Long => 1,
        }
    }

    pub fn sign(self) -> f64 {
        f64::from(self.xi())
    }

    /// Position in [`Regime::ALL`].
    pub fn index(self) -> usize {
        (self.xi() + 1) as usize
    }

    pub fn from_xi(xi: i64) -> Option<Regime> {
        match xi {
            -1 => Some(Regime::Short),
            0 => Some(Regime::Flat),
            1 => Some(Regime::Long),
            _ => None,
        }
    }

    pub fn mirror(self) -> Regime {
        match self {
            Regime::Short => Regime::Long,
            Regime::Flat => Regime::Flat,
            Regime::Long => Regime::Short,
        }
    }
}

impl TryFrom<i8> for Regime {
    type Error = String;
    fn try_from(v: i8) -> Result<Self, String> {
        Regime::from_xi(i64::from(v)).ok_or_else(|| format!("regime must be -1, 0 or 1, got {v}"))
    }
}

impl From<Regime> for i8 {
    fn from(r: Regime) -> i8 {
        r.xi()
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.xi())
    }
}

/// Regimes reachable by a single switch from `xi`.
pub fn feasible_set(xi: Regime) -> &'static [Regime] {
    match xi {
        Regime::Flat => &[Regime::Short, Regime::Long],
        Regime::Short | Regime::Long => &[Regime::Flat],
    }
}

/// The six scalars of one problem instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub cost_k: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            mu: 0.0,
            sigma: 1.0,
            lambda: 0.3,
            delta: 0.1,
            cost_k: 0.05,
        }
    }
}

impl ModelParams {
    /// Checks positivity and that the flat regime has two disjoint,
    /// non-empty reference regions.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.mu.is_finite() {
            return Err(ModelError::NotFinite {
                name: "mu",
                value: self.mu,
            });
        }
        for (name, value) in [
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("cost_k", self.cost_k),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::NotPositive { name, value });
            }
        }
        let up = reference_region(self, Regime::Flat, Regime::Long, 1);
        let down = reference_region(self, Regime::Flat, Regime::Short, 1);
        if up.is_empty() {
            return Err(ModelError::EmptyReferenceRegion { target: 1 });
        }
        if down.is_empty() {
            return Err(ModelError::EmptyReferenceRegion { target: -1 });
        }
        if up.iter().any(|a| down.iter().any(|b| a.intersects(b))) {
            return Err(ModelError::OverlappingReferenceRegions);
        }
        Ok(())
    }

    pub(crate) fn drift_scale(&self) -> f64 {
        self.theta.sqrt() * self.sigma
    }

    pub(crate) fn penalty_scale(&self) -> f64 {
        self.lambda * self.sigma * self.sigma / self.theta
    }
}

/// Running reward `f(z, ξ) = -(ξ√θσ z + λ|ξ|(σ²/θ) z²)`.
pub fn reward(params: &ModelParams, z: f64, xi: Regime) -> f64 {
    let s = xi.sign();
    -(s * params.drift_scale() * z + s.abs() * params.penalty_scale() * z * z)
}

/// Constants of the zero-switch value function and the Hermite degree of
/// the homogeneous solutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedConstants {
    pub nu: f64,
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
}

pub fn derived_constants(params: &ModelParams) -> DerivedConstants {
    let ModelParams {
        theta,
        sigma,
        lambda,
        delta,
        ..
    } = *params;
    DerivedConstants {
        nu: -delta / theta,
        k0: lambda * sigma * sigma / (delta * (2.0 * theta + delta)),
        k1: theta.sqrt() * sigma / (delta + theta),
        k2: lambda * sigma * sigma / (theta * (2.0 * theta + delta)),
    }
}

/// Zero-switch value `v̂(z, ξ) = -(k₂|ξ|z² + k₁ξz + k₀|ξ|)` with its first
/// two derivatives.
pub fn v_hat(params: &ModelParams, z: f64, xi: Regime) -> Jet {
    v_hat_with(&derived_constants(params), z, xi)
}

pub fn v_hat_with(c: &DerivedConstants, z: f64, xi: Regime) -> Jet {
    let s = xi.sign();
    let a = s.abs();
    Jet::new(
        -(c.k2 * a * z * z + c.k1 * s * z + c.k0 * a),
        -(2.0 * c.k2 * a * z + c.k1 * s),
        -2.0 * c.k2 * a,
    )
}

/// `δV - LV - f(z, ξ)` at the supplied jet.
pub fn pde_residual(params: &ModelParams, jet: Jet, z: f64, xi: Regime) -> f64 {
    params.delta * jet.value - 0.5 * params.theta * jet.d2 + params.theta * z * jet.d1
        - reward(params, z, xi)
}

pub fn spread_to_state(params: &ModelParams, x: f64) -> f64 {
    (x - params.mu) * params.theta.sqrt() / params.sigma
}

pub fn state_to_spread(params: &ModelParams, z: f64) -> f64 {
    params.mu + z * params.sigma / params.theta.sqrt()
}

/// Closed interval on the extended real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, z: f64) -> bool {
        self.lo <= z && z <= self.hi
    }

    /// Membership with a slack `tol` at finite ends.
    pub fn contains_with(&self, z: f64, tol: f64) -> bool {
        self.lo - tol <= z && z <= self.hi + tol
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn contains_interval(&self, other: &Interval, tol: f64) -> bool {
        self.lo - tol <= other.lo && other.hi <= self.hi + tol
    }

    /// Mirror image under `z -> -z`.
    pub fn mirror(&self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }
}

/// Solution set of `a z² + b z + c >= 0`.
fn quadratic_superlevel(a: f64, b: f64, c: f64) -> Vec<Interval> {
    let inf = f64::INFINITY;
    if a == 0.0 {
        return if b == 0.0 {
            if c >= 0.0 {
                vec![Interval::new(-inf, inf)]
            } else {
                vec![]
            }
        } else if b > 0.0 {
            vec![Interval::new(-c / b, inf)]
        } else {
            vec![Interval::new(-inf, -c / b)]
        };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return if a > 0.0 {
            vec![Interval::new(-inf, inf)]
        } else {
            vec![]
        };
    }
    let sq = disc.sqrt();
    let (r1, r2) = if b == 0.0 {
        let r = (-c / a).max(0.0).sqrt();
        (-r, r)
    } else {
        let q = -0.5 * (b + b.signum() * sq);
        let (x, y) = (q / a, c / q);
        (x.min(y), x.max(y))
    };
    if a < 0.0 {
        vec![Interval::new(r1, r2)]
    } else if disc == 0.0 {
        vec![Interval::new(-inf, inf)]
    } else {
        vec![Interval::new(-inf, r1), Interval::new(r2, inf)]
    }
}

/// Reference region `{z : f(z, ξ̂) - f(z, ξ) >= m δ K}` as ordered disjoint
/// closed intervals (possibly empty).
pub fn reference_region(params: &ModelParams, xi: Regime, xi_hat: Regime, m: u32) -> Vec<Interval> {
    let ds = xi_hat.sign() - xi.sign();
    let da = xi_hat.sign().abs() - xi.sign().abs();
    quadratic_superlevel(
        -params.penalty_scale() * da,
        -params.drift_scale() * ds,
        -f64::from(m) * params.delta * params.cost_k,
    )
}
