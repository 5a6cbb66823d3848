//! Level-by-level construction of the value functions.
//!
//! For each regime the reference regions of its feasible targets are sorted
//! left to right. Every gap between adjacent regions, and the unbounded gap
//! beyond an outermost bounded region, hosts one continuation interval whose
//! ends are free boundaries lying inside the neighbouring regions. Each such
//! subproblem is solved by smooth pasting: the continuation formula must meet
//! the obstacle with matching value and slope at every finite end.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{feasible_set, reference_region, v_hat_with, Interval, ModelParams, Regime};
use crate::piecewise::{EvalError, Piece, PiecewiseValueFunction, SolutionStore, StructureError};
use crate::specfun::{Jet, SpecialError};

/// Upper bound on the equilibrated condition number of the 2x2 coefficient
/// systems.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Scan points per reference-region component.
    pub bracket_grid: usize,
    /// Root tolerance on boundary locations.
    pub tol_boundary: f64,
    /// Acceptance tolerance for pasting residuals and dominance margins.
    pub tol_check: f64,
    pub z_max: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            bracket_grid: 2001,
            tol_boundary: 1e-12,
            tol_check: 1e-9,
            z_max: 8.0,
            max_iter: 200,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), String> {
        if self.bracket_grid < 16 {
            return Err(format!(
                "bracket_grid must be >= 16, got {}",
                self.bracket_grid
            ));
        }
        for (name, v) in [
            ("tol_boundary", self.tol_boundary),
            ("tol_check", self.tol_check),
            ("z_max", self.z_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.max_iter == 0 {
            return Err("max_iter must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("singular pasting system (condition number {0:.3e})")]
    Singular(f64),
    #[error("obstacle branches tie at candidate boundary z = {0}")]
    ObstacleTie(f64),
    #[error("xi={xi} n={n}: {count} admissible solutions in one subproblem ({detail})")]
    Ambiguous {
        xi: Regime,
        n: usize,
        count: usize,
        detail: String,
    },
    #[error("xi={xi} n={n}: {reason}")]
    Structural {
        xi: Regime,
        n: usize,
        reason: String,
    },
    #[error("xi={xi} n={n}: no admissible arrangement of switching regions")]
    NoAdmissibleConfiguration { xi: Regime, n: usize },
    #[error(
        "xi={xi} n={n}: no admissible arrangement; a boundary may lie outside |z| <= {z_max} \
         (reference region [{lo:.4}, {hi:.4}] for target xi={target})"
    )]
    OutOfDomain {
        xi: Regime,
        n: usize,
        target: Regime,
        lo: f64,
        hi: f64,
        z_max: f64,
    },
    #[error("level {n} requested but the store ends at level {have}")]
    LevelOrder { n: usize, have: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Assembly(#[from] StructureError),
}

impl From<SpecialError> for SolverError {
    fn from(e: SpecialError) -> Self {
        SolverError::Eval(EvalError::from(e))
    }
}

/// A failed [`solve_all`] with the levels completed before the failure.
#[derive(Debug, Error)]
#[error("level {level} failed: {source}")]
pub struct SolveAllError {
    pub level: usize,
    #[source]
    pub source: SolverError,
    /// Levels completed before the failure; absent if the store could not
    /// be created.
    pub partial: Option<Box<SolutionStore>>,
}

/// One connected component of a reference region together with the regime
/// it switches to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub interval: Interval,
    pub target: Regime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubproblemKind {
    Bounded,
    /// Continuation extends to `-∞`; only the right boundary is free.
    LeftInfinite,
    /// Continuation extends to `+∞`; only the left boundary is free.
    RightInfinite,
}

/// One free-boundary problem: a continuation interval whose finite ends must
/// lie in the given brackets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subproblem {
    pub xi: Regime,
    pub n: usize,
    pub kind: SubproblemKind,
    pub left_bracket: Option<Interval>,
    pub right_bracket: Option<Interval>,
    pub left_target: Option<Regime>,
    pub right_target: Option<Regime>,
}

/// Residuals of the pasting system after eliminating the coefficients by
/// value matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PastingEval {
    pub c_plus: f64,
    pub c_minus: f64,
    /// Slope mismatch `u' - g'` at each finite boundary, left first.
    pub residuals: [f64; 2],
    pub residual_count: usize,
    pub condition: f64,
}

impl PastingEval {
    pub fn max_residual(&self) -> f64 {
        self.residuals[..self.residual_count]
            .iter()
            .fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// An admitted continuation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubproblemSolution {
    pub piece: Piece,
    pub eval: PastingEval,
    pub min_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubproblemOutcome {
    Solved(SubproblemSolution),
    /// No admissible root: the neighbouring switching region is empty here.
    NoSwitching,
}

/// Components of the level-1 reference regions of all feasible targets,
/// sorted left to right.
pub fn reference_components(
    params: &ModelParams,
    xi: Regime,
) -> Result<Vec<Component>, SolverError> {
    let mut comps: Vec<Component> = feasible_set(xi)
        .iter()
        .flat_map(|&target| {
            reference_region(params, xi, target, 1)
                .into_iter()
                .map(move |interval| Component { interval, target })
        })
        .collect();
    comps.sort_by(|a, b| a.interval.lo.total_cmp(&b.interval.lo));
    for w in comps.windows(2) {
        if w[0].interval.hi >= w[1].interval.lo {
            return Err(SolverError::Structural {
                xi,
                n: 0,
                reason: "reference regions overlap".into(),
            });
        }
    }
    Ok(comps)
}

fn subproblems_for(xi: Regime, n: usize, comps: &[Component]) -> Vec<Subproblem> {
    let mut out = Vec::new();
    if let Some(first) = comps.first() {
        if first.interval.lo > f64::NEG_INFINITY {
            out.push(Subproblem {
                xi,
                n,
                kind: SubproblemKind::LeftInfinite,
                left_bracket: None,
                right_bracket: Some(first.interval),
                left_target: None,
                right_target: Some(first.target),
            });
        }
    }
    for w in comps.windows(2) {
        out.push(Subproblem {
            xi,
            n,
            kind: SubproblemKind::Bounded,
            left_bracket: Some(w[0].interval),
            right_bracket: Some(w[1].interval),
            left_target: Some(w[0].target),
            right_target: Some(w[1].target),
        });
    }
    if let Some(last) = comps.last() {
        if last.interval.hi < f64::INFINITY {
            out.push(Subproblem {
                xi,
                n,
                kind: SubproblemKind::RightInfinite,
                left_bracket: Some(last.interval),
                right_bracket: None,
                left_target: Some(last.target),
                right_target: None,
            });
        }
    }
    out
}

/// Subproblems of `(ξ, n)` for the full set of reference components.
pub fn enumerate_subproblems(
    store: &SolutionStore,
    xi: Regime,
    n: usize,
) -> Result<Vec<Subproblem>, SolverError> {
    if n == 0 || store.n_max() + 1 < n {
        return Err(SolverError::LevelOrder {
            n,
            have: store.n_max(),
        });
    }
    let comps = reference_components(store.params(), xi)?;
    Ok(subproblems_for(xi, n, &comps))
}

/// Solves a 2x2 system after row and column equilibration. Returns the
/// solution and the condition number of the equilibrated matrix.
fn solve_2x2(m: [[f64; 2]; 2], rhs: [f64; 2]) -> Option<([f64; 2], f64)> {
    let cs = [
        m[0][0].abs().max(m[1][0].abs()),
        m[0][1].abs().max(m[1][1].abs()),
    ];
    if cs[0] == 0.0 || cs[1] == 0.0 {
        return None;
    }
    let mut s = [
        [m[0][0] / cs[0], m[0][1] / cs[1]],
        [m[1][0] / cs[0], m[1][1] / cs[1]],
    ];
    let mut r = rhs;
    for i in 0..2 {
        let rs = s[i][0].abs().max(s[i][1].abs());
        if rs == 0.0 {
            return None;
        }
        s[i][0] /= rs;
        s[i][1] /= rs;
        r[i] /= rs;
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    // singular values of a 2x2 from the invariants of SᵀS
    let fro2 = s.iter().flatten().map(|x| x * x).sum::<f64>();
    let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
    let smax = ((fro2 + disc) / 2.0).sqrt();
    let smin2 = (fro2 - disc) / 2.0;
    let cond = if det == 0.0 || smin2 <= 0.0 {
        f64::INFINITY
    } else {
        smax / (det.abs() / smax)
    };
    if !cond.is_finite() {
        return None;
    }
    let y0 = (r[0] * s[1][1] - r[1] * s[0][1]) / det;
    let y1 = (s[0][0] * r[1] - s[1][0] * r[0]) / det;
    Some(([y0 / cs[0], y1 / cs[1]], cond))
}

/// The obstacle branch `v(·, target, n-1) - K` at `z`.
fn branch_jet(store: &SolutionStore, z: f64, target: Regime, n: usize) -> Result<Jet, EvalError> {
    let j = store.jet(z, target, n - 1)?;
    Ok(Jet::new(j.value - store.params().cost_k, j.d1, j.d2))
}

/// Obstacle jet at a candidate boundary; ties between branches are errors.
fn active_obstacle(
    store: &SolutionStore,
    z: f64,
    xi: Regime,
    n: usize,
) -> Result<(Jet, Regime), SolverError> {
    let o = store.obstacle(z, xi, n)?;
    if o.tie {
        return Err(SolverError::ObstacleTie(z));
    }
    Ok((branch_jet(store, z, o.argmax, n)?, o.argmax))
}

/// Value-matching elimination of the coefficients followed by the slope
/// mismatches at the free boundaries.
///
/// `boundaries` holds `[a, b]` for a bounded subproblem and the single
/// finite boundary otherwise.
pub fn pasting_residual(
    store: &SolutionStore,
    sp: &Subproblem,
    boundaries: &[f64],
) -> Result<PastingEval, SolverError> {
    let (xi, n) = (sp.xi, sp.n);
    let h = store.hermite();
    let consts = *store.constants();
    match sp.kind {
        SubproblemKind::Bounded => {
            let (a, b) = (boundaries[0], boundaries[1]);
            let (ga, _) = active_obstacle(store, a, xi, n)?;
            let (gb, _) = active_obstacle(store, b, xi, n)?;
            let (ha, hra) = (h.jet(a)?, h.jet_reflected(a)?);
            let (hb, hrb) = (h.jet(b)?, h.jet_reflected(b)?);
            let (va, vb) = (v_hat_with(&consts, a, xi), v_hat_with(&consts, b, xi));
            let (c, cond) = solve_2x2(
                [[ha.value, hra.value], [hb.value, hrb.value]],
                [ga.value - va.value, gb.value - vb.value],
            )
            .ok_or(SolverError::Singular(f64::INFINITY))?;
            if cond > MAX_CONDITION {
                return Err(SolverError::Singular(cond));
            }
            let ua = c[0] * ha.d1 + c[1] * hra.d1 + va.d1;
            let ub = c[0] * hb.d1 + c[1] * hrb.d1 + vb.d1;
            Ok(PastingEval {
                c_plus: c[0],
                c_minus: c[1],
                residuals: [ua - ga.d1, ub - gb.d1],
                residual_count: 2,
                condition: cond,
            })
        }
        SubproblemKind::LeftInfinite => {
            let b = boundaries[0];
            let (gb, _) = active_obstacle(store, b, xi, n)?;
            let hr = h.jet_reflected(b)?;
            let vb = v_hat_with(&consts, b, xi);
            let c_minus = (gb.value - vb.value) / hr.value;
            Ok(PastingEval {
                c_plus: 0.0,
                c_minus,
                residuals: [c_minus * hr.d1 + vb.d1 - gb.d1, 0.0],
                residual_count: 1,
                condition: 1.0,
            })
        }
        SubproblemKind::RightInfinite => {
            let a = boundaries[0];
            let (ga, _) = active_obstacle(store, a, xi, n)?;
            let hj = h.jet(a)?;
            let va = v_hat_with(&consts, a, xi);
            let c_plus = (ga.value - va.value) / hj.value;
            Ok(PastingEval {
                c_plus,
                c_minus: 0.0,
                residuals: [c_plus * hj.d1 + va.d1 - ga.d1, 0.0],
                residual_count: 1,
                condition: 1.0,
            })
        }
    }
}

fn clip(iv: &Interval, z_max: f64) -> Option<(f64, f64)> {
    let lo = iv.lo.max(-z_max);
    let hi = iv.hi.min(z_max);
    (lo < hi).then_some((lo, hi))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Bisection on a sign change of `f` in `[lo, hi]`.
fn bisect<F>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Option<f64>, SolverError>
where
    F: FnMut(f64) -> Result<Option<f64>, SolverError>,
{
    let Some(f_lo) = f(lo)? else { return Ok(None) };
    for _ in 0..max_iter {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let Some(fm) = f(mid)? else { return Ok(None) };
        if fm == 0.0 {
            return Ok(Some(mid));
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

struct Context<'a> {
    store: &'a SolutionStore,
    sp: &'a Subproblem,
    settings: &'a SolverSettings,
}

/// Largest `|ψ|` at a bisected sign change still treated as a root.
const SHOOTING_JUMP: f64 = 1e-4;

/// Which local minimum of `u - g` on the far bracket defines the shooting
/// map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scan {
    Inner,
    Outer,
}

/// Far-bracket samples for the shooting map of a bounded subproblem.
struct FarGrid {
    z: Vec<f64>,
    h_plus: Vec<f64>,
    h_minus: Vec<f64>,
    base: Vec<f64>,
}

impl<'a> Context<'a> {
    fn z_max(&self) -> f64 {
        self.settings.z_max.min(self.store.z_max())
    }

    /// Continuation jet `c₊H(z) + c₋H(-z) + v̂(z, ξ)`.
    fn u(&self, c: [f64; 2], z: f64) -> Result<Jet, SolverError> {
        Ok(self.store.continuation_jet(self.sp.xi, c[0], c[1], z)?)
    }

    /// Coefficients making the continuation formula touch the `target`
    /// branch with matching value and slope at `a`.
    fn shoot(&self, a: f64, target: Regime) -> Result<Option<[f64; 2]>, SolverError> {
        let h = self.store.hermite();
        let (hj, hr) = (h.jet(a)?, h.jet_reflected(a)?);
        let v = v_hat_with(self.store.constants(), a, self.sp.xi);
        let g = branch_jet(self.store, a, target, self.sp.n)?;
        Ok(solve_2x2(
            [[hj.value, hr.value], [hj.d1, hr.d1]],
            [g.value - v.value, g.d1 - v.d1],
        )
        .filter(|(_, cond)| *cond <= MAX_CONDITION)
        .map(|(c, _)| c))
    }

    /// Samples of `H(z)`, `H(-z)` and `v̂ - g` over the far bracket, ordered
    /// away from the shooting point.
    fn far_grid(&self, from: f64, to: f64, target: Regime) -> Result<FarGrid, SolverError> {
        let z = linspace(from, to, self.settings.bracket_grid);
        let h = self.store.hermite();
        let mut grid = FarGrid {
            h_plus: Vec::with_capacity(z.len()),
            h_minus: Vec::with_capacity(z.len()),
            base: Vec::with_capacity(z.len()),
            z: Vec::new(),
        };
        for &b in &z {
            grid.h_plus.push(h.value(b)?);
            grid.h_minus.push(h.value(-b)?);
            let v = v_hat_with(self.store.constants(), b, self.sp.xi).value;
            grid.base
                .push(v - branch_jet(self.store, b, target, self.sp.n)?.value);
        }
        grid.z = z;
        Ok(grid)
    }

    /// Value of `u - g` at a local minimum along the far grid (refined
    /// off-grid), with its location.
    ///
    /// `Inner` takes the first minimum past the start of the grid, falling
    /// back to the outer end when `u - g` still falls there. `Outer` takes
    /// the outer end if `u - g` falls into it, else the first minimum met
    /// walking inwards; past the true contact the exploding basis function
    /// makes `u - g` rise, so this picks the contact even when shallower
    /// minima sit further in. Both keep the shooting map continuous as the
    /// contact moves off the bracket.
    fn first_min(
        &self,
        c: [f64; 2],
        grid: &FarGrid,
        target: Regime,
        scan: Scan,
    ) -> Result<Option<(f64, f64)>, SolverError> {
        let phi = |j: usize| c[0] * grid.h_plus[j] + c[1] * grid.h_minus[j] + grid.base[j];
        let last = grid.z.len() - 1;
        let is_min = |j: usize| phi(j) <= phi(j - 1) && phi(j) < phi(j + 1);
        let falls_at_end = phi(last) < phi(last - 1);
        let found = match scan {
            Scan::Inner => (1..last).find(|&j| is_min(j)),
            Scan::Outer if falls_at_end => None,
            Scan::Outer => (1..last)
                .rev()
                .find(|&j| phi(j) < phi(j - 1) && phi(j) <= phi(j + 1)),
        };
        let Some(j) = found else {
            if falls_at_end {
                return Ok(Some((phi(last), grid.z[last])));
            }
            return Ok(None);
        };
        let slope = |b: f64| -> Result<Option<f64>, SolverError> {
            let u = self.u(c, b)?;
            let g = branch_jet(self.store, b, target, self.sp.n)?;
            Ok(Some(u.d1 - g.d1))
        };
        let (lo, hi) = (
            grid.z[j - 1].min(grid.z[j + 1]),
            grid.z[j - 1].max(grid.z[j + 1]),
        );
        let s_lo = slope(lo)?.unwrap_or(0.0);
        let s_hi = slope(hi)?.unwrap_or(0.0);
        let b = if s_lo < 0.0 && s_hi > 0.0 {
            bisect(
                slope,
                lo,
                hi,
                0.1 * self.settings.tol_boundary,
                self.settings.max_iter,
            )?
            .unwrap_or(grid.z[j])
        } else {
            grid.z[j]
        };
        let u = self.u(c, b)?;
        let g = branch_jet(self.store, b, target, self.sp.n)?;
        Ok(Some((u.value - g.value, b)))
    }

    /// Shooting in one direction: C¹ contact with the near branch at each
    /// point of the near bracket, then the first minimum of `u - g` on the
    /// far bracket must vanish. Returns `(near, far)` boundary pairs.
    fn shoot_roots(
        &self,
        near: (f64, f64),
        near_target: Regime,
        far: (f64, f64),
        far_target: Regime,
    ) -> Result<Vec<(f64, f64)>, SolverError> {
        let grid = self.far_grid(far.0, far.1, far_target)?;
        let (lo, hi) = (near.0.min(near.1), near.0.max(near.1));
        let a_grid = linspace(lo, hi, self.settings.bracket_grid);
        let mut roots = Vec::new();
        for mode in [Scan::Inner, Scan::Outer] {
            let psi = |a: f64| -> Result<Option<(f64, f64)>, SolverError> {
                match self.shoot(a, near_target)? {
                    Some(c) => self.first_min(c, &grid, far_target, mode),
                    None => Ok(None),
                }
            };
            let scan: Vec<Option<(f64, f64)>> =
                a_grid.iter().map(|&a| psi(a)).collect::<Result<_, _>>()?;
            for i in 0..a_grid.len() - 1 {
                let (Some((p0, _)), Some((p1, _))) = (scan[i], scan[i + 1]) else {
                    continue;
                };
                if (p0 > 0.0) == (p1 > 0.0) && p0 != 0.0 {
                    continue;
                }
                let a = bisect(
                    |a| Ok(psi(a)?.map(|(p, _)| p)),
                    a_grid[i],
                    a_grid[i + 1],
                    self.settings.tol_boundary,
                    self.settings.max_iter,
                )?;
                let Some(a) = a else { continue };
                let Some((p, b)) = psi(a)? else { continue };
                // a jump of the minimum, not a root; near genuine roots the
                // map can be too steep to resolve below this, and admission
                // re-checks the polished residual anyway
                if p.abs() > SHOOTING_JUMP {
                    continue;
                }
                roots.push((a, b));
            }
        }
        Ok(roots)
    }

    /// Candidate `(a, b)` pairs. Shooting runs from both sides because the
    /// coefficient of the basis function exploding at one end can only be
    /// resolved by contact at that end.
    fn solve_bounded(&self) -> Result<Vec<(f64, f64)>, SolverError> {
        let z_max = self.z_max();
        let (Some(lb), Some(rb)) = (self.sp.left_bracket, self.sp.right_bracket) else {
            return Ok(vec![]);
        };
        let (Some((l_lo, l_hi)), Some((r_lo, r_hi))) = (clip(&lb, z_max), clip(&rb, z_max)) else {
            return Ok(vec![]);
        };
        let lt = self
            .sp
            .left_target
            .expect("bounded subproblems carry targets");
        let rt = self
            .sp
            .right_target
            .expect("bounded subproblems carry targets");
        let mut roots = self.shoot_roots((l_lo, l_hi), lt, (r_lo, r_hi), rt)?;
        roots.extend(
            self.shoot_roots((r_lo, r_hi), rt, (l_hi, l_lo), lt)?
                .into_iter()
                .map(|(b, a)| (a, b)),
        );
        Ok(roots)
    }

    fn solve_single(&self) -> Result<Vec<f64>, SolverError> {
        let bracket = match self.sp.kind {
            SubproblemKind::LeftInfinite => self.sp.right_bracket,
            SubproblemKind::RightInfinite => self.sp.left_bracket,
            SubproblemKind::Bounded => None,
        };
        let Some((lo, hi)) = bracket.and_then(|b| clip(&b, self.z_max())) else {
            return Ok(vec![]);
        };
        let resid = |z: f64| -> Result<Option<f64>, SolverError> {
            match pasting_residual(self.store, self.sp, &[z]) {
                Ok(e) => Ok(Some(e.residuals[0])),
                Err(SolverError::ObstacleTie(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let grid = linspace(lo, hi, self.settings.bracket_grid);
        let vals: Vec<Option<f64>> = grid.iter().map(|&z| resid(z)).collect::<Result<_, _>>()?;
        let mut roots = Vec::new();
        for i in 0..grid.len() - 1 {
            let (Some(r0), Some(r1)) = (vals[i], vals[i + 1]) else {
                continue;
            };
            if (r0 > 0.0) == (r1 > 0.0) && r0 != 0.0 {
                continue;
            }
            if let Some(z) = bisect(
                resid,
                grid[i],
                grid[i + 1],
                self.settings.tol_boundary,
                self.settings.max_iter,
            )? {
                roots.push(z);
            }
        }
        Ok(roots)
    }

    /// Newton iterations on the pasting residual with a finite-difference
    /// Jacobian; a step is kept only if it lowers the residual.
    fn polish(&self, mut x: Vec<f64>) -> Result<(Vec<f64>, PastingEval), SolverError> {
        let mut best = pasting_residual(self.store, self.sp, &x)?;
        for _ in 0..8 {
            if best.max_residual() <= 1e-15 {
                break;
            }
            let dim = x.len();
            let mut jac = [[0.0; 2]; 2];
            for k in 0..dim {
                let step = 1e-7 * (1.0 + x[k].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += step;
                xm[k] -= step;
                let rp = pasting_residual(self.store, self.sp, &xp)?;
                let rm = pasting_residual(self.store, self.sp, &xm)?;
                for i in 0..dim {
                    jac[i][k] = (rp.residuals[i] - rm.residuals[i]) / (2.0 * step);
                }
            }
            let delta = if dim == 1 {
                if jac[0][0] == 0.0 {
                    break;
                }
                vec![best.residuals[0] / jac[0][0]]
            } else {
                match solve_2x2(jac, [best.residuals[0], best.residuals[1]]) {
                    Some((d, _)) => d.to_vec(),
                    None => break,
                }
            };
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a - d).collect();
            match pasting_residual(self.store, self.sp, &trial) {
                Ok(e) if e.max_residual() < best.max_residual() => {
                    x = trial;
                    best = e;
                }
                _ => break,
            }
        }
        Ok((x, best))
    }

    /// Checks that a candidate is admissible and returns its solution.
    fn admit(&self, bounds: Vec<f64>) -> Result<Option<SubproblemSolution>, SolverError> {
        let (bounds, eval) = match self.polish(bounds) {
            Ok(r) => r,
            Err(SolverError::ObstacleTie(_)) | Err(SolverError::Singular(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if eval.max_residual() > self.settings.tol_check {
            return Ok(None);
        }
        let inf = f64::INFINITY;
        let (lo, hi) = match self.sp.kind {
            SubproblemKind::Bounded => (bounds[0], bounds[1]),
            SubproblemKind::LeftInfinite => (-inf, bounds[0]),
            SubproblemKind::RightInfinite => (bounds[0], inf),
        };
        if !(lo < hi) {
            return Ok(None);
        }
        let tol = self.settings.tol_boundary.max(1e-12);
        if lo.is_finite()
            && !self
                .sp
                .left_bracket
                .is_some_and(|b| b.contains_with(lo, tol))
        {
            return Ok(None);
        }
        if hi.is_finite()
            && !self
                .sp
                .right_bracket
                .is_some_and(|b| b.contains_with(hi, tol))
        {
            return Ok(None);
        }
        // the obstacle branch at each end must be the bracket's target
        for (z, target) in [(lo, self.sp.left_target), (hi, self.sp.right_target)] {
            if z.is_finite() {
                let o = self.store.obstacle(z, self.sp.xi, self.sp.n)?;
                if o.tie || Some(o.argmax) != target {
                    return Ok(None);
                }
            }
        }
        let c = [eval.c_plus, eval.c_minus];
        let Some(min_margin) = self.dominance_margin(c, lo, hi)? else {
            return Ok(None);
        };
        let piece = Piece::continuation(lo, hi, eval.c_plus, eval.c_minus);
        Ok(Some(SubproblemSolution {
            piece,
            eval,
            min_margin,
        }))
    }

    /// Minimum of `u - obstacle` on a dense grid over the open interval, or
    /// `None` if it drops below `-tol_check` or is not positive at the
    /// midpoint.
    fn dominance_margin(&self, c: [f64; 2], lo: f64, hi: f64) -> Result<Option<f64>, SolverError> {
        dominance_margin(
            self.store,
            self.sp.xi,
            self.sp.n,
            c,
            lo,
            hi,
            self.z_max(),
            self.settings,
        )
    }
}

/// Minimum of `u - obstacle` over the open interval `(lo, hi)` clipped to
/// `|z| <= z_max`, or `None` when dominance fails.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dominance_margin(
    store: &SolutionStore,
    xi: Regime,
    n: usize,
    c: [f64; 2],
    lo: f64,
    hi: f64,
    z_max: f64,
    settings: &SolverSettings,
) -> Result<Option<f64>, SolverError> {
    let (a, b) = (lo.max(-z_max), hi.min(z_max));
    if a >= b {
        return Ok(Some(f64::INFINITY));
    }
    let m = settings.bracket_grid;
    let mut min_margin = f64::INFINITY;
    for i in 1..m {
        let z = a + (b - a) * i as f64 / m as f64;
        let u = store.continuation_jet(xi, c[0], c[1], z)?.value;
        let g = store.obstacle(z, xi, n)?.value;
        min_margin = min_margin.min(u - g);
        if u - g < -settings.tol_check {
            return Ok(None);
        }
    }
    let mid = 0.5 * (a + b);
    let u = store.continuation_jet(xi, c[0], c[1], mid)?.value;
    if u - store.obstacle(mid, xi, n)?.value <= 0.0 {
        return Ok(None);
    }
    Ok(Some(min_margin))
}

/// Finds the admissible continuation interval of one subproblem.
pub fn solve_subproblem(
    store: &SolutionStore,
    sp: &Subproblem,
    settings: &SolverSettings,
) -> Result<SubproblemOutcome, SolverError> {
    if store.n_max() + 1 != sp.n {
        return Err(SolverError::LevelOrder {
            n: sp.n,
            have: store.n_max(),
        });
    }
    let ctx = Context {
        store,
        sp,
        settings,
    };
    let candidates: Vec<Vec<f64>> = match sp.kind {
        SubproblemKind::Bounded => ctx
            .solve_bounded()?
            .into_iter()
            .map(|(a, b)| vec![a, b])
            .collect(),
        _ => ctx.solve_single()?.into_iter().map(|z| vec![z]).collect(),
    };
    let mut admitted: Vec<SubproblemSolution> = Vec::new();
    for cand in candidates {
        if let Some(sol) = ctx.admit(cand)? {
            let dup = admitted.iter().any(|s| {
                (s.piece.z_lo - sol.piece.z_lo).abs() < 1e-8
                    || (s.piece.z_hi - sol.piece.z_hi).abs() < 1e-8
            });
            if !dup {
                admitted.push(sol);
            }
        }
    }
    match admitted.len() {
        0 => Ok(SubproblemOutcome::NoSwitching),
        1 => Ok(SubproblemOutcome::Solved(admitted[0])),
        count => Err(SolverError::Ambiguous {
            xi: sp.xi,
            n: sp.n,
            count,
            detail: admitted
                .iter()
                .map(|s| format!("({:.12}, {:.12})", s.piece.z_lo, s.piece.z_hi))
                .collect::<Vec<_>>()
                .join(", "),
        }),
    }
}

/// Tries to assemble `v(·, ξ, n)` using exactly the given components as
/// switching regions. `None` when some subproblem has no admissible root or
/// the admitted intervals do not leave a switching region in every
/// component.
fn assemble(
    store: &SolutionStore,
    xi: Regime,
    n: usize,
    comps: &[Component],
    settings: &SolverSettings,
) -> Result<Option<PiecewiseValueFunction>, SolverError> {
    let inf = f64::INFINITY;
    if comps.is_empty() {
        let z_max = settings.z_max.min(store.z_max());
        return Ok(
            dominance_margin(store, xi, n, [0.0, 0.0], -inf, inf, z_max, settings)?.map(|_| {
                PiecewiseValueFunction {
                    xi,
                    n,
                    pieces: vec![Piece::continuation(-inf, inf, 0.0, 0.0)],
                }
            }),
        );
    }
    let mut continuation = Vec::new();
    for sp in subproblems_for(xi, n, comps) {
        match solve_subproblem(store, &sp, settings)? {
            SubproblemOutcome::Solved(sol) => continuation.push(sol.piece),
            SubproblemOutcome::NoSwitching => return Ok(None),
        }
    }
    // interleave: [C] S C S ... [C]
    let mut pieces = Vec::new();
    let mut cont = continuation.into_iter().peekable();
    let mut cursor = -inf;
    if comps[0].interval.lo > -inf {
        let c = cont.next().expect("left-infinite piece");
        cursor = c.z_hi;
        pieces.push(c);
    }
    for comp in comps {
        let next = cont.peek().copied();
        let s_hi = next.map_or(inf, |c| c.z_lo);
        if !(cursor < s_hi) {
            return Ok(None);
        }
        pieces.push(Piece::switching(cursor, s_hi, comp.target));
        if let Some(c) = next {
            cont.next();
            cursor = c.z_hi;
            pieces.push(c);
        }
    }
    match PiecewiseValueFunction::new(xi, n, pieces) {
        Ok(f) => Ok(Some(f)),
        Err(_) => Ok(None),
    }
}

/// Subsets of `0..m` by decreasing size, lexicographic within a size.
fn subsets_by_size(m: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<Vec<usize>> = (0u32..(1u32 << m))
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    all.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    all
}

/// Builds `v(·, ξ, n)`: all reference components are tried as switching
/// regions first; components whose switching region turns out empty are
/// dropped and the remaining ones re-solved.
pub fn solve_function(
    store: &SolutionStore,
    xi: Regime,
    n: usize,
    settings: &SolverSettings,
) -> Result<PiecewiseValueFunction, SolverError> {
    let comps = reference_components(store.params(), xi)?;
    for subset in subsets_by_size(comps.len()) {
        let chosen: Vec<Component> = subset.iter().map(|&i| comps[i]).collect();
        if let Some(f) = assemble(store, xi, n, &chosen, settings)? {
            if f.continuation_count() == 0 {
                return Err(SolverError::Structural {
                    xi,
                    n,
                    reason: "no continuation piece".into(),
                });
            }
            return Ok(f);
        }
    }
    let z_max = settings.z_max.min(store.z_max());
    if let Some(c) = comps
        .iter()
        .find(|c| c.interval.lo < -z_max || c.interval.hi > z_max)
    {
        return Err(SolverError::OutOfDomain {
            xi,
            n,
            target: c.target,
            lo: c.interval.lo,
            hi: c.interval.hi,
            z_max,
        });
    }
    Err(SolverError::NoAdmissibleConfiguration { xi, n })
}

/// Level `n` for all three regimes; the store must end at level `n - 1`.
pub fn solve_level(
    store: &SolutionStore,
    n: usize,
    settings: &SolverSettings,
) -> Result<[PiecewiseValueFunction; 3], SolverError> {
    if n == 0 || store.n_max() + 1 != n {
        return Err(SolverError::LevelOrder {
            n,
            have: store.n_max(),
        });
    }
    let mut out: Vec<PiecewiseValueFunction> = Regime::ALL
        .par_iter()
        .map(|&xi| solve_function(store, xi, n, settings))
        .collect::<Result<_, _>>()?;
    let long = out.pop().expect("three regimes");
    let flat = out.pop().expect("three regimes");
    let short = out.pop().expect("three regimes");
    Ok([short, flat, long])
}

/// Levels `0..=n_max`.
pub fn solve_all(
    params: ModelParams,
    n_max: usize,
    settings: &SolverSettings,
) -> Result<SolutionStore, SolveAllError> {
    let fail = |level: usize, source: SolverError, partial: SolutionStore| SolveAllError {
        level,
        source,
        partial: Some(Box::new(partial)),
    };
    let mut store = SolutionStore::new(params, settings.z_max).map_err(|e| SolveAllError {
        level: 0,
        source: e.into(),
        partial: None,
    })?;
    for n in 1..=n_max {
        match solve_level(&store, n, settings) {
            Ok(level) => {
                if let Err(e) = store.push_level(level) {
                    return Err(fail(n, e.into(), store));
                }
            }
            Err(e) => return Err(fail(n, e, store)),
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::piecewise::PieceKind;

    #[test]
    fn solve_2x2_identity_and_scaling() {
        let (x, cond) = solve_2x2([[1.0, 0.0], [0.0, 1.0]], [3.0, -2.0]).unwrap();
        assert_eq!(x, [3.0, -2.0]);
        assert!((cond - 1.0).abs() < 1e-12);
        // badly scaled columns are equilibrated away
        let (x, cond) = solve_2x2([[1e20, 1.0], [2e20, -1.0]], [2.0, 1.0]).unwrap();
        assert!((x[0] * 1e20 - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        assert!(cond < 10.0);
        assert!(solve_2x2([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0])
            .map_or(true, |(_, c)| c > MAX_CONDITION));
    }

    #[test]
    fn subsets_order() {
        assert_eq!(
            subsets_by_size(2),
            vec![vec![0, 1], vec![0], vec![1], vec![]]
        );
    }

    #[test]
    fn enumeration_counts() {
        let store = SolutionStore::new(ModelParams::default(), 8.0).unwrap();
        let flat = enumerate_subproblems(&store, Regime::Flat, 1).unwrap();
        let kinds: Vec<_> = flat.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                SubproblemKind::LeftInfinite,
                SubproblemKind::Bounded,
                SubproblemKind::RightInfinite
            ]
        );
        let long = enumerate_subproblems(&store, Regime::Long, 1).unwrap();
        assert_eq!(long.len(), 1);
        assert_eq!(long[0].kind, SubproblemKind::Bounded);
        let short = enumerate_subproblems(&store, Regime::Short, 1).unwrap();
        let lb = long[0].left_bracket.unwrap();
        let srb = short[0].right_bracket.unwrap();
        assert!((lb.hi + srb.lo).abs() < 1e-15);
    }

    #[test]
    fn long_level_one_residuals_reduce_to_slopes() {
        let store = SolutionStore::new(ModelParams::default(), 8.0).unwrap();
        let sp = enumerate_subproblems(&store, Regime::Long, 1).unwrap()[0];
        let e = pasting_residual(&store, &sp, &[-4.0, 0.5]).unwrap();
        let k = store.params().cost_k;
        // value matched to -K at both ends, obstacle slope zero
        for z in [-4.0, 0.5] {
            let u = store
                .continuation_jet(Regime::Long, e.c_plus, e.c_minus, z)
                .unwrap();
            assert!((u.value + k).abs() < 1e-12);
        }
        let ua = store
            .continuation_jet(Regime::Long, e.c_plus, e.c_minus, -4.0)
            .unwrap();
        assert!((e.residuals[0] - ua.d1).abs() < 1e-12);
    }

    #[test]
    fn mirrored_flat_candidates_give_mirrored_residuals() {
        let store = SolutionStore::new(ModelParams::default(), 8.0).unwrap();
        let sp = enumerate_subproblems(&store, Regime::Flat, 1).unwrap()[1];
        let e = pasting_residual(&store, &sp, &[-1.2, 1.2]).unwrap();
        assert!((e.residuals[0] + e.residuals[1]).abs() < 1e-12 * (1.0 + e.residuals[0].abs()));
        assert!((e.c_plus - e.c_minus).abs() < 1e-12 * (1.0 + e.c_plus.abs()));
    }

    #[test]
    fn huge_cost_leaves_pure_continuation() {
        // δK = 1 exceeds every reward gain out of the flat regime
        let params = ModelParams {
            cost_k: 10.0,
            ..ModelParams::default()
        };
        let store = SolutionStore::new(params, 8.0).unwrap();
        assert!(enumerate_subproblems(&store, Regime::Flat, 1)
            .unwrap()
            .is_empty());
        let f = solve_function(&store, Regime::Flat, 1, &SolverSettings::default()).unwrap();
        assert_eq!(f.pieces.len(), 1);
        assert_eq!(
            f.pieces[0].kind,
            PieceKind::Continuation {
                c_plus: 0.0,
                c_minus: 0.0
            }
        );
    }

    #[test]
    fn default_level_one_long() {
        let store = SolutionStore::new(ModelParams::default(), 8.0).unwrap();
        let settings = SolverSettings::default();
        let sp = enumerate_subproblems(&store, Regime::Long, 1).unwrap()[0];
        let SubproblemOutcome::Solved(sol) = solve_subproblem(&store, &sp, &settings).unwrap()
        else {
            panic!("no switching found");
        };
        let (a, b) = (sol.piece.z_lo, sol.piece.z_hi);
        assert!(a < 0.0 && 0.0 < b);
        assert!(sol.eval.max_residual() <= 1e-9);
        // value matching is exact: u = -K at both ends
        let k = store.params().cost_k;
        for z in [a, b] {
            let u = store
                .continuation_jet(Regime::Long, sol.eval.c_plus, sol.eval.c_minus, z)
                .unwrap();
            assert!((u.value + k).abs() <= 1e-10);
            assert!(u.d1.abs() <= 1e-9);
        }
    }

    #[test]
    fn default_levels_are_mirror_symmetric_and_deterministic() {
        let settings = SolverSettings::default();
        let s1 = solve_all(ModelParams::default(), 2, &settings).unwrap();
        let s2 = solve_all(ModelParams::default(), 2, &settings).unwrap();
        for n in 1..=2 {
            for xi in Regime::ALL {
                assert_eq!(s1.function(xi, n), s2.function(xi, n));
            }
            let long = s1.function(Regime::Long, n).boundaries();
            let short = s1.function(Regime::Short, n).boundaries();
            for (l, s) in long.iter().zip(short.iter().rev()) {
                assert!((l + s).abs() <= 1e-9);
            }
            let flat = s1.function(Regime::Flat, n).boundaries();
            for (l, r) in flat.iter().zip(flat.iter().rev()) {
                assert!((l + r).abs() <= 1e-9);
            }
        }
        assert_eq!(s1.function(Regime::Long, 1).pieces.len(), 3);
        assert_eq!(s1.function(Regime::Flat, 2).pieces.len(), 5);
    }

    #[test]
    fn level_order_enforced() {
        let store = SolutionStore::new(ModelParams::default(), 8.0).unwrap();
        assert!(matches!(
            solve_level(&store, 2, &SolverSettings::default()),
            Err(SolverError::LevelOrder { .. })
        ));
    }
}
