//! Piecewise-analytic value functions `v(·, ξ, n)`.
//!
//! Each function tiles the real line with pieces of two kinds. On a
//! continuation piece the value is `c₊ H_ν(z) + c₋ H_ν(-z) + v̂(z, ξ)`; on a
//! switching piece it is `v(z, target, n-1) - K`, so chains of simultaneous
//! switches resolve by recursion into lower levels.
//!
//! Internal boundaries always separate a continuation piece from a
//! switching piece. A point exactly on a boundary belongs to the switching
//! piece (switching sets are closed, continuation sets open).

use thiserror::Error;

use crate::model::{
    derived_constants, feasible_set, v_hat_with, DerivedConstants, ModelParams, Regime,
};
use crate::specfun::{Hermite, HermiteDegree, Jet, SpecialError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("z = {z} outside the evaluation domain |z| <= {z_max}")]
    OutOfDomain { z: f64, z_max: f64 },
    #[error("level n = {n} not present (store holds 0..={n_max})")]
    MissingLevel { n: usize, n_max: usize },
    #[error("obstacle requested at level 0")]
    NoObstacle,
    #[error(transparent)]
    Special(#[from] SpecialError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("xi={xi} n={n}: {reason}")]
    Invalid {
        xi: Regime,
        n: usize,
        reason: String,
    },
}

fn invalid(xi: Regime, n: usize, reason: impl Into<String>) -> StructureError {
    StructureError::Invalid {
        xi,
        n,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PieceKind {
    Continuation { c_plus: f64, c_minus: f64 },
    Switching { target: Regime },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub z_lo: f64,
    pub z_hi: f64,
    pub kind: PieceKind,
}

impl Piece {
    pub fn continuation(z_lo: f64, z_hi: f64, c_plus: f64, c_minus: f64) -> Self {
        Self {
            z_lo,
            z_hi,
            kind: PieceKind::Continuation { c_plus, c_minus },
        }
    }

    pub fn switching(z_lo: f64, z_hi: f64, target: Regime) -> Self {
        Self {
            z_lo,
            z_hi,
            kind: PieceKind::Switching { target },
        }
    }

    pub fn is_switching(&self) -> bool {
        matches!(self.kind, PieceKind::Switching { .. })
    }

    pub fn target(&self) -> Option<Regime> {
        match self.kind {
            PieceKind::Switching { target } => Some(target),
            PieceKind::Continuation { .. } => None,
        }
    }

    /// Midpoint, with infinite ends replaced by `clip`.
    pub fn midpoint(&self, clip: f64) -> f64 {
        0.5 * (self.z_lo.max(-clip) + self.z_hi.min(clip))
    }
}

/// `v(·, ξ, n)` as an ordered tiling of the real line.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseValueFunction {
    pub xi: Regime,
    pub n: usize,
    pub pieces: Vec<Piece>,
}

impl PiecewiseValueFunction {
    /// Validates tiling, ordering, feasibility of targets and that no two
    /// switching pieces touch.
    pub fn new(xi: Regime, n: usize, pieces: Vec<Piece>) -> Result<Self, StructureError> {
        let f = Self { xi, n, pieces };
        f.check_tiling()?;
        Ok(f)
    }

    /// The zero-switch function `v̂(·, ξ)`.
    pub fn zero_switch(xi: Regime) -> Self {
        Self {
            xi,
            n: 0,
            pieces: vec![Piece::continuation(
                f64::NEG_INFINITY,
                f64::INFINITY,
                0.0,
                0.0,
            )],
        }
    }

    pub fn check_tiling(&self) -> Result<(), StructureError> {
        let (xi, n) = (self.xi, self.n);
        let first = self
            .pieces
            .first()
            .ok_or_else(|| invalid(xi, n, "no pieces"))?;
        let last = self.pieces.last().expect("non-empty");
        if first.z_lo != f64::NEG_INFINITY || last.z_hi != f64::INFINITY {
            return Err(invalid(xi, n, "pieces do not cover the real line"));
        }
        for (i, p) in self.pieces.iter().enumerate() {
            if p.z_lo.is_nan() || p.z_hi.is_nan() || p.z_lo >= p.z_hi {
                return Err(invalid(
                    xi,
                    n,
                    format!("piece {i} has an empty or invalid span"),
                ));
            }
            if let PieceKind::Switching { target } = p.kind {
                if n == 0 {
                    return Err(invalid(xi, n, "level 0 cannot switch"));
                }
                if !feasible_set(xi).contains(&target) {
                    return Err(invalid(
                        xi,
                        n,
                        format!("piece {i} targets infeasible regime {target}"),
                    ));
                }
            }
            if let PieceKind::Continuation { c_plus, c_minus } = p.kind {
                if !(c_plus.is_finite() && c_minus.is_finite()) {
                    return Err(invalid(
                        xi,
                        n,
                        format!("piece {i} has non-finite coefficients"),
                    ));
                }
            }
            if let Some(next) = self.pieces.get(i + 1) {
                if next.z_lo != p.z_hi {
                    return Err(invalid(xi, n, format!("gap or overlap after piece {i}")));
                }
                if p.is_switching() && next.is_switching() {
                    return Err(invalid(
                        xi,
                        n,
                        format!("switching pieces {i} and {} touch", i + 1),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Invariants beyond tiling: asymptotic coefficients on unbounded
    /// continuation pieces and the level-0 form. Returns human-readable
    /// violations.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.check_tiling() {
            out.push(e.to_string());
        }
        for (i, p) in self.pieces.iter().enumerate() {
            if let PieceKind::Continuation { c_plus, c_minus } = p.kind {
                // H_ν(z) blows up at -∞ and H_ν(-z) at +∞
                if p.z_lo == f64::NEG_INFINITY && c_plus != 0.0 {
                    out.push(format!(
                        "piece {i}: c_plus = {c_plus:e} on a piece unbounded below"
                    ));
                }
                if p.z_hi == f64::INFINITY && c_minus != 0.0 {
                    out.push(format!(
                        "piece {i}: c_minus = {c_minus:e} on a piece unbounded above"
                    ));
                }
            }
        }
        if self.n == 0 && *self != Self::zero_switch(self.xi) {
            out.push("level 0 must be the single zero-coefficient continuation piece".into());
        }
        out
    }

    /// Internal boundaries, left to right.
    pub fn boundaries(&self) -> Vec<f64> {
        self.pieces.iter().skip(1).map(|p| p.z_lo).collect()
    }

    pub fn continuation_count(&self) -> usize {
        self.pieces.iter().filter(|p| !p.is_switching()).count()
    }

    /// Index of the piece owning `z` (boundary points go to the switching
    /// side).
    pub fn locate(&self, z: f64) -> usize {
        self.locate_side(z, Side::Closed)
    }

    pub fn locate_side(&self, z: f64, side: Side) -> usize {
        let n = self.pieces.len();
        for i in 0..n {
            let p = &self.pieces[i];
            if z < p.z_hi {
                if z > p.z_lo || i == 0 {
                    return i;
                }
                // z == p.z_lo: boundary between i-1 and i
                return match side {
                    Side::Left => i - 1,
                    Side::Right => i,
                    Side::Closed => {
                        if self.pieces[i - 1].is_switching() {
                            i - 1
                        } else {
                            i
                        }
                    }
                };
            }
        }
        n - 1
    }
}

/// Which piece a point on a boundary is assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    /// The switching piece (closed switching sets).
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Continuation,
    Switching(Regime),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub region: Region,
    pub piece_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub value: f64,
    pub argmax: Regime,
    pub tie: bool,
}

/// Relative gap under which two obstacle branches count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// All levels `0..=N` of the recursion for the three regimes.
#[derive(Debug, Clone)]
pub struct SolutionStore {
    params: ModelParams,
    constants: DerivedConstants,
    z_max: f64,
    hermite: Hermite,
    levels: Vec<[PiecewiseValueFunction; 3]>,
}

impl SolutionStore {
    /// Store holding only level 0.
    pub fn new(params: ModelParams, z_max: f64) -> Result<Self, EvalError> {
        let constants = derived_constants(&params);
        let hermite = Hermite::with_domain(HermiteDegree::new(constants.nu)?, z_max)?;
        Ok(Self {
            params,
            constants,
            z_max,
            hermite,
            levels: vec![Regime::ALL.map(PiecewiseValueFunction::zero_switch)],
        })
    }

    /// Appends level `n_max + 1` after checking tiling and level numbers.
    pub fn push_level(&mut self, level: [PiecewiseValueFunction; 3]) -> Result<(), StructureError> {
        let n = self.levels.len();
        for (xi, f) in Regime::ALL.iter().zip(&level) {
            if f.xi != *xi || f.n != n {
                return Err(invalid(*xi, n, "level pushed out of order"));
            }
            f.check_tiling()?;
        }
        self.levels.push(level);
        Ok(())
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn constants(&self) -> &DerivedConstants {
        &self.constants
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn hermite(&self) -> &Hermite {
        &self.hermite
    }

    pub fn n_max(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn function(&self, xi: Regime, n: usize) -> &PiecewiseValueFunction {
        &self.levels[n][xi.index()]
    }

    pub fn level(&self, n: usize) -> &[PiecewiseValueFunction; 3] {
        &self.levels[n]
    }

    /// Mutable access for diagnostics; bypasses every structural check.
    pub fn function_mut(&mut self, xi: Regime, n: usize) -> &mut PiecewiseValueFunction {
        &mut self.levels[n][xi.index()]
    }

    /// Drops levels above `n`.
    pub fn truncate(&mut self, n: usize) {
        self.levels.truncate(n + 1);
    }

    fn check(&self, z: f64, n: usize) -> Result<(), EvalError> {
        if !(z.abs() <= self.z_max) {
            return Err(EvalError::OutOfDomain {
                z,
                z_max: self.z_max,
            });
        }
        if n > self.n_max() {
            return Err(EvalError::MissingLevel {
                n,
                n_max: self.n_max(),
            });
        }
        Ok(())
    }

    /// Jet of the continuation formula `c₊H_ν(z) + c₋H_ν(-z) + v̂(z, ξ)`.
    pub fn continuation_jet(
        &self,
        xi: Regime,
        c_plus: f64,
        c_minus: f64,
        z: f64,
    ) -> Result<Jet, EvalError> {
        let mut jet = v_hat_with(&self.constants, z, xi);
        if c_plus != 0.0 {
            jet = jet + self.hermite.jet(z)?.scale(c_plus);
        }
        if c_minus != 0.0 {
            jet = jet + self.hermite.jet_reflected(z)?.scale(c_minus);
        }
        Ok(jet)
    }

    /// Jet of `v(·, ξ, n)` at `z` using the formula of piece `index`.
    pub fn piece_jet(&self, xi: Regime, n: usize, index: usize, z: f64) -> Result<Jet, EvalError> {
        self.check(z, n)?;
        let piece = &self.function(xi, n).pieces[index];
        match piece.kind {
            PieceKind::Continuation { c_plus, c_minus } => {
                self.continuation_jet(xi, c_plus, c_minus, z)
            }
            PieceKind::Switching { target } => {
                let j = self.jet(z, target, n - 1)?;
                Ok(Jet::new(j.value - self.params.cost_k, j.d1, j.d2))
            }
        }
    }

    /// Value and derivatives of `v(z, ξ, n)`; on a boundary the switching
    /// side is used.
    pub fn jet(&self, z: f64, xi: Regime, n: usize) -> Result<Jet, EvalError> {
        self.jet_side(z, xi, n, Side::Closed)
    }

    pub fn jet_side(&self, z: f64, xi: Regime, n: usize, side: Side) -> Result<Jet, EvalError> {
        self.check(z, n)?;
        let mut cost = 0.0;
        let (mut xi, mut n) = (xi, n);
        loop {
            let f = self.function(xi, n);
            let piece = &f.pieces[f.locate_side(z, side)];
            match piece.kind {
                PieceKind::Continuation { c_plus, c_minus } => {
                    let j = self.continuation_jet(xi, c_plus, c_minus, z)?;
                    return Ok(Jet::new(j.value - cost, j.d1, j.d2));
                }
                PieceKind::Switching { target } => {
                    cost += self.params.cost_k;
                    xi = target;
                    n -= 1;
                }
            }
        }
    }

    pub fn evaluate(&self, z: f64, xi: Regime, n: usize) -> Result<f64, EvalError> {
        Ok(self.jet(z, xi, n)?.value)
    }

    pub fn derivative(&self, z: f64, xi: Regime, n: usize) -> Result<f64, EvalError> {
        Ok(self.jet(z, xi, n)?.d1)
    }

    /// Second derivative; at a boundary the side must be chosen.
    pub fn second_derivative(
        &self,
        z: f64,
        xi: Regime,
        n: usize,
        side: Side,
    ) -> Result<f64, EvalError> {
        Ok(self.jet_side(z, xi, n, side)?.d2)
    }

    /// `max_{ξ̂ ∈ A(ξ)} v(z, ξ̂, n-1) - K` with the attaining regime.
    pub fn obstacle(&self, z: f64, xi: Regime, n: usize) -> Result<Obstacle, EvalError> {
        if n == 0 {
            return Err(EvalError::NoObstacle);
        }
        let mut best: Option<(f64, Regime)> = None;
        let mut tie = false;
        for &t in feasible_set(xi) {
            let v = self.evaluate(z, t, n - 1)? - self.params.cost_k;
            match best {
                None => best = Some((v, t)),
                Some((b, _)) => {
                    if (v - b).abs() <= TIE_TOLERANCE * (1.0 + v.abs().max(b.abs())) {
                        tie = true;
                    }
                    if v > b {
                        best = Some((v, t));
                    }
                }
            }
        }
        let (value, argmax) = best.expect("feasible sets are non-empty");
        Ok(Obstacle { value, argmax, tie })
    }

    pub fn classify(&self, z: f64, xi: Regime, n: usize) -> Result<Classification, EvalError> {
        self.check(z, n)?;
        let f = self.function(xi, n);
        let piece_index = f.locate(z);
        let region = match f.pieces[piece_index].kind {
            PieceKind::Continuation { .. } => Region::Continuation,
            PieceKind::Switching { target } => Region::Switching(target),
        };
        Ok(Classification {
            region,
            piece_index,
        })
    }

    /// Regimes visited by the instantaneous switch chain at `z`, starting
    /// with `ξ` and ending in the regime that continues.
    pub fn chain(&self, z: f64, xi: Regime, n: usize) -> Result<Vec<Regime>, EvalError> {
        self.check(z, n)?;
        let mut out = vec![xi];
        let (mut xi, mut n) = (xi, n);
        loop {
            let f = self.function(xi, n);
            match f.pieces[f.locate(z)].target() {
                Some(t) => {
                    out.push(t);
                    xi = t;
                    n -= 1;
                }
                None => return Ok(out),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::v_hat;

    fn store() -> SolutionStore {
        SolutionStore::new(ModelParams::default(), 8.0).unwrap()
    }

    /// A hand-built level 1 whose long regime switches to flat outside
    /// (-1, 1) and continues with v̂ inside.
    fn with_toy_level(mut s: SolutionStore) -> SolutionStore {
        let inf = f64::INFINITY;
        let long = PiecewiseValueFunction::new(
            Regime::Long,
            1,
            vec![
                Piece::switching(-inf, -1.0, Regime::Flat),
                Piece::continuation(-1.0, 1.0, 0.0, 0.0),
                Piece::switching(1.0, inf, Regime::Flat),
            ],
        )
        .unwrap();
        let flat = PiecewiseValueFunction::new(
            Regime::Flat,
            1,
            vec![Piece::continuation(-inf, inf, 0.0, 0.0)],
        )
        .unwrap();
        let short = PiecewiseValueFunction::new(
            Regime::Short,
            1,
            vec![
                Piece::switching(-inf, -1.0, Regime::Flat),
                Piece::continuation(-1.0, 1.0, 0.0, 0.0),
                Piece::switching(1.0, inf, Regime::Flat),
            ],
        )
        .unwrap();
        s.push_level([short, flat, long]).unwrap();
        s
    }

    #[test]
    fn level_zero_is_v_hat() {
        let s = store();
        let p = ModelParams::default();
        for xi in Regime::ALL {
            for z in [-7.0, -1.2, 0.0, 3.3] {
                let j = s.jet(z, xi, 0).unwrap();
                assert_eq!(j, v_hat(&p, z, xi));
                assert_eq!(s.classify(z, xi, 0).unwrap().region, Region::Continuation);
            }
        }
        let c = s.constants();
        let d1 = s.derivative(0.5, Regime::Long, 0).unwrap();
        assert!((d1 - -(2.0 * c.k2 * 0.5 + c.k1)).abs() < 1e-15);
        assert_eq!(s.derivative(0.5, Regime::Flat, 0).unwrap(), 0.0);
        assert_eq!(
            s.second_derivative(0.5, Regime::Flat, 0, Side::Closed)
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn switching_piece_delegates_down() {
        let s = with_toy_level(store());
        let k = s.params().cost_k;
        assert_eq!(s.evaluate(3.0, Regime::Long, 1).unwrap(), -k);
        assert_eq!(
            s.classify(3.0, Regime::Long, 1).unwrap().region,
            Region::Switching(Regime::Flat)
        );
        // boundary belongs to the switching piece
        let c = s.classify(1.0, Regime::Long, 1).unwrap();
        assert_eq!(c.piece_index, 2);
        assert_eq!(
            s.chain(1.5, Regime::Long, 1).unwrap(),
            vec![Regime::Long, Regime::Flat]
        );
    }

    #[test]
    fn obstacle_argmax_and_tie() {
        let s = store();
        let k = s.params().cost_k;
        let c = *s.constants();
        let o = s.obstacle(0.0, Regime::Flat, 1).unwrap();
        assert!(o.tie);
        assert!((o.value - (-c.k0 - k)).abs() < 1e-15);
        let o = s.obstacle(-1.0, Regime::Flat, 1).unwrap();
        assert!(!o.tie);
        assert_eq!(o.argmax, Regime::Long);
        let o = s.obstacle(2.0, Regime::Long, 1).unwrap();
        assert_eq!(o.argmax, Regime::Flat);
        assert_eq!(s.obstacle(0.0, Regime::Flat, 0), Err(EvalError::NoObstacle));
    }

    #[test]
    fn domain_and_level_errors() {
        let s = store();
        assert!(matches!(
            s.evaluate(8.5, Regime::Flat, 0),
            Err(EvalError::OutOfDomain { .. })
        ));
        assert!(matches!(
            s.evaluate(0.0, Regime::Flat, 1),
            Err(EvalError::MissingLevel { .. })
        ));
    }

    #[test]
    fn tiling_violations_rejected() {
        let inf = f64::INFINITY;
        let gap = PiecewiseValueFunction::new(
            Regime::Long,
            1,
            vec![
                Piece::switching(-inf, -1.0, Regime::Flat),
                Piece::continuation(-0.5, inf, 0.0, 0.0),
            ],
        );
        assert!(gap.is_err());
        let touching = PiecewiseValueFunction::new(
            Regime::Flat,
            1,
            vec![
                Piece::switching(-inf, 0.0, Regime::Long),
                Piece::switching(0.0, inf, Regime::Short),
            ],
        );
        assert!(touching.is_err());
        let bad_target = PiecewiseValueFunction::new(
            Regime::Long,
            1,
            vec![
                Piece::switching(-inf, 0.0, Regime::Short),
                Piece::continuation(0.0, inf, 0.0, 0.0),
            ],
        );
        assert!(bad_target.is_err());
    }

    #[test]
    fn asymptotic_coefficient_violations_reported() {
        let inf = f64::INFINITY;
        let f = PiecewiseValueFunction::new(
            Regime::Flat,
            1,
            vec![Piece::continuation(-inf, inf, 0.1, 0.0)],
        )
        .unwrap();
        let v = f.invariant_violations();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("c_plus"));
    }

    #[test]
    fn side_selection_at_boundary() {
        let s = with_toy_level(store());
        let f = s.function(Regime::Long, 1);
        assert_eq!(f.locate_side(1.0, Side::Left), 1);
        assert_eq!(f.locate_side(1.0, Side::Right), 2);
        assert_eq!(f.locate_side(-1.0, Side::Closed), 0);
        assert_eq!(f.boundaries(), vec![-1.0, 1.0]);
    }
}
