//! Checks a solved store against the properties a piecewise-classical
//! viscosity solution must have, plus an independent finite-difference
//! solve of the obstacle problems.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{feasible_set, reference_region, reward, v_hat_with, ModelParams, Regime};
use crate::piecewise::{EvalError, PieceKind, SolutionStore};

/// Evaluation grid: uniform nodes plus offsets around every boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub z_min: f64,
    pub z_max: f64,
    pub nodes: usize,
    pub boundary_offsets: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            z_min: -6.0,
            z_max: 6.0,
            nodes: 24001,
            boundary_offsets: vec![1e-7, 1e-5, 1e-3],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.z_min.is_finite() && self.z_max.is_finite() && self.z_min < self.z_max) {
            return Err(format!(
                "grid range [{}, {}] is invalid",
                self.z_min, self.z_max
            ));
        }
        if self.nodes < 2 {
            return Err(format!("grid needs at least 2 nodes, got {}", self.nodes));
        }
        if self
            .boundary_offsets
            .iter()
            .any(|o| !(o.is_finite() && *o > 0.0))
        {
            return Err("boundary offsets must be positive".into());
        }
        Ok(())
    }

    pub fn uniform(&self) -> Vec<f64> {
        let h = (self.z_max - self.z_min) / (self.nodes - 1) as f64;
        (0..self.nodes)
            .map(|i| {
                if i + 1 == self.nodes {
                    self.z_max
                } else {
                    self.z_min + h * i as f64
                }
            })
            .collect()
    }

    /// Uniform nodes plus `b ± offset` for every boundary `b`, restricted to
    /// the grid range, sorted and deduplicated.
    pub fn nodes_with(&self, boundaries: &[f64]) -> Vec<f64> {
        let mut z = self.uniform();
        for &b in boundaries {
            for &o in &self.boundary_offsets {
                for p in [b - o, b + o] {
                    if p >= self.z_min && p <= self.z_max {
                        z.push(p);
                    }
                }
            }
        }
        z.sort_by(f64::total_cmp);
        z.dedup();
        z
    }

    /// Nodes for a store: boundaries of every level and regime included.
    pub fn nodes_for(&self, store: &SolutionStore) -> Vec<f64> {
        self.nodes_with(&all_boundaries(store))
    }
}

fn all_boundaries(store: &SolutionStore) -> Vec<f64> {
    let mut b: Vec<f64> = (0..=store.n_max())
        .flat_map(|n| Regime::ALL.map(|xi| store.function(xi, n).boundaries()))
        .flatten()
        .collect();
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// PDE residual relative to `1 + |f| + δ|u|`.
    pub pde: f64,
    /// Derivative jump at a boundary relative to `1 + |v'|`.
    pub c1: f64,
    /// Value jump at a boundary relative to `1 + |v|`.
    pub continuity: f64,
    pub dominance: f64,
    pub symmetry: f64,
    /// Monotonicity in `n` and the lower bound by `v̂`.
    pub order: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            pde: 1e-7,
            c1: 1e-6,
            continuity: 1e-9,
            dominance: 1e-9,
            symmetry: 1e-9,
            order: 1e-9,
        }
    }
}

/// Pointwise variational-inequality residuals of one `v(·, ξ, n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViReport {
    pub xi: Regime,
    pub n: usize,
    pub continuation_nodes: usize,
    pub switching_nodes: usize,
    /// Max scaled `|δu - Lu - f|` on continuation nodes.
    pub max_pde_residual: f64,
    /// Min scaled `δu - Lu - f` on switching nodes (must be ≥ 0).
    pub min_supersolution: Option<f64>,
    /// Max `|u - obstacle|` on switching nodes.
    pub max_obstacle_gap: Option<f64>,
    /// Min `u - obstacle` on continuation nodes.
    pub min_dominance_margin: Option<f64>,
    /// Min `u - obstacle` over continuation-piece midpoints.
    pub min_midpoint_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryReport {
    pub xi: Regime,
    pub n: usize,
    pub z: f64,
    /// Scaled jump of `v'` across the boundary.
    pub c1_mismatch: f64,
    /// Scaled `|v_C(z) - (v(z, target, n-1) - K)|`.
    pub cost_identity_error: f64,
    /// Regimes visited by the switch chain from the switching side.
    pub chain: Vec<Regime>,
    pub recurrent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    pub xi: Regime,
    pub n: usize,
    pub pieces: usize,
    pub continuation_pieces: usize,
    pub switching_pieces: usize,
    /// Every switching piece lies in the closure of a reference component
    /// of its target.
    pub switching_in_reference: bool,
    /// No two switching pieces touch.
    pub separated: bool,
    /// At most one switching piece per reference component.
    pub one_per_component: bool,
    pub invariant_violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub xi: Regime,
    pub n: usize,
    /// `D` fitted over the grid.
    pub growth_constant: f64,
    pub linear_growth_ok: bool,
    pub min_value: f64,
    /// Min `v - v̂` over the grid.
    pub min_gap_to_v_hat: f64,
    /// `|v - v̂|` strictly decreasing in `|z|` on the outer continuation
    /// pieces; `None` where vacuous.
    pub outer_decay_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalReport {
    pub boundary_symmetry: f64,
    pub value_symmetry: f64,
    /// Min of `v(·,·,n+1) - v(·,·,n)` over grid, regimes and levels.
    pub monotonicity_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub n_max: usize,
    pub grid: GridSpec,
    pub grid_nodes: usize,
    pub tolerances: Tolerances,
    pub variational_inequality: Vec<ViReport>,
    pub pasting: Vec<BoundaryReport>,
    pub structure: Vec<StructureReport>,
    pub bounds: Vec<BoundsReport>,
    pub global: GlobalReport,
    pub failures: Vec<String>,
    pub passed: bool,
}

fn functions(store: &SolutionStore) -> Vec<(Regime, usize)> {
    (0..=store.n_max())
        .flat_map(|n| Regime::ALL.map(|xi| (xi, n)))
        .collect()
}

fn pde_scaled(params: &ModelParams, z: f64, xi: Regime, u: crate::specfun::Jet) -> (f64, f64) {
    let f = reward(params, z, xi);
    let r = params.delta * u.value - 0.5 * params.theta * u.d2 + params.theta * z * u.d1 - f;
    (r, 1.0 + f.abs() + params.delta * u.value.abs())
}

fn vi_one(
    store: &SolutionStore,
    xi: Regime,
    n: usize,
    nodes: &[f64],
) -> Result<ViReport, EvalError> {
    let params = store.params();
    let f = store.function(xi, n);
    let mut rep = ViReport {
        xi,
        n,
        continuation_nodes: 0,
        switching_nodes: 0,
        max_pde_residual: 0.0,
        min_supersolution: None,
        max_obstacle_gap: None,
        min_dominance_margin: None,
        min_midpoint_margin: None,
    };
    let fold_min = |acc: Option<f64>, v: f64| Some(acc.map_or(v, |a: f64| a.min(v)));
    let fold_max = |acc: Option<f64>, v: f64| Some(acc.map_or(v, |a: f64| a.max(v)));
    for &z in nodes {
        let idx = f.locate(z);
        let u = store.piece_jet(xi, n, idx, z)?;
        match f.pieces[idx].kind {
            PieceKind::Continuation { .. } => {
                rep.continuation_nodes += 1;
                let (r, scale) = pde_scaled(params, z, xi, u);
                rep.max_pde_residual = rep.max_pde_residual.max(r.abs() / scale);
                if n > 0 {
                    let g = store.obstacle(z, xi, n)?.value;
                    rep.min_dominance_margin = fold_min(rep.min_dominance_margin, u.value - g);
                }
            }
            PieceKind::Switching { .. } => {
                rep.switching_nodes += 1;
                // δu - Lu - f along the chain ξ → … → e equals
                // f(e) - f(ξ) - mδK exactly, with no kinks to difference
                let chain = store.chain(z, xi, n)?;
                let end = *chain.last().expect("chain starts at ξ");
                let m = (chain.len() - 1) as f64;
                let fx = reward(params, z, xi);
                let r = reward(params, z, end) - fx - m * params.delta * params.cost_k;
                let scale = 1.0 + fx.abs() + params.delta * u.value.abs();
                rep.min_supersolution = fold_min(rep.min_supersolution, r / scale);
                let g = store.obstacle(z, xi, n)?.value;
                rep.max_obstacle_gap = fold_max(rep.max_obstacle_gap, (u.value - g).abs());
            }
        }
    }
    if n > 0 {
        for (i, p) in f.pieces.iter().enumerate() {
            if p.is_switching() {
                continue;
            }
            let mid = p.midpoint(store.z_max());
            let u = store.piece_jet(xi, n, i, mid)?.value;
            let g = store.obstacle(mid, xi, n)?.value;
            rep.min_midpoint_margin = fold_min(rep.min_midpoint_margin, u - g);
        }
    }
    Ok(rep)
}

/// PDE residuals on continuation pieces, the supersolution side and the
/// obstacle equality on switching pieces, and dominance margins.
pub fn check_variational_inequality(
    store: &SolutionStore,
    nodes: &[f64],
) -> Result<Vec<ViReport>, EvalError> {
    functions(store)
        .par_iter()
        .map(|&(xi, n)| vi_one(store, xi, n, nodes))
        .collect()
}

/// One-sided derivatives and the cost identity at every internal boundary.
pub fn check_pasting(store: &SolutionStore) -> Result<Vec<BoundaryReport>, EvalError> {
    let k = store.params().cost_k;
    let mut out = Vec::new();
    for (xi, n) in functions(store) {
        let f = store.function(xi, n);
        for i in 1..f.pieces.len() {
            let (left, right) = (&f.pieces[i - 1], &f.pieces[i]);
            let z = right.z_lo;
            let jl = store.piece_jet(xi, n, i - 1, z)?;
            let jr = store.piece_jet(xi, n, i, z)?;
            let c1_mismatch = (jl.d1 - jr.d1).abs() / (1.0 + jl.d1.abs().max(jr.d1.abs()));
            let (cont, sw) = if left.is_switching() {
                (jr, left)
            } else {
                (jl, right)
            };
            let cost_identity_error = match sw.target() {
                Some(t) => {
                    let post = store.evaluate(z, t, n - 1)?;
                    (cont.value - (post - k)).abs() / (1.0 + cont.value.abs())
                }
                // two continuation pieces meeting: plain continuity
                None => (jl.value - jr.value).abs() / (1.0 + jl.value.abs()),
            };
            let chain = store.chain(z, xi, n)?;
            let mut seen = chain.clone();
            seen.sort_by_key(|r| r.index());
            seen.dedup();
            let recurrent = seen.len() != chain.len();
            out.push(BoundaryReport {
                xi,
                n,
                z,
                c1_mismatch,
                cost_identity_error,
                chain,
                recurrent,
            });
        }
    }
    Ok(out)
}

/// Placement of switching pieces relative to the reference regions.
pub fn check_structure(store: &SolutionStore) -> Vec<StructureReport> {
    const TOL: f64 = 1e-9;
    functions(store)
        .into_iter()
        .map(|(xi, n)| {
            let f = store.function(xi, n);
            let mut in_ref = true;
            let mut one_per = true;
            for &t in feasible_set(xi) {
                let comps = reference_region(store.params(), xi, t, 1);
                let mut counts = vec![0usize; comps.len()];
                for p in f.pieces.iter().filter(|p| p.target() == Some(t)) {
                    let span = crate::model::Interval::new(p.z_lo, p.z_hi);
                    match comps.iter().position(|c| c.contains_interval(&span, TOL)) {
                        Some(j) => counts[j] += 1,
                        None => in_ref = false,
                    }
                }
                one_per &= counts.iter().all(|&c| c <= 1);
            }
            let separated = f
                .pieces
                .windows(2)
                .all(|w| !(w[0].is_switching() && w[1].is_switching()));
            StructureReport {
                xi,
                n,
                pieces: f.pieces.len(),
                continuation_pieces: f.continuation_count(),
                switching_pieces: f.pieces.len() - f.continuation_count(),
                switching_in_reference: in_ref,
                separated,
                one_per_component: one_per,
                invariant_violations: f.invariant_violations(),
            }
        })
        .collect()
}

fn bounds_one(
    store: &SolutionStore,
    xi: Regime,
    n: usize,
    nodes: &[f64],
) -> Result<BoundsReport, EvalError> {
    let consts = store.constants();
    let mut values = Vec::with_capacity(nodes.len());
    for &z in nodes {
        values.push(store.evaluate(z, xi, n)?);
    }
    let growth_constant = nodes
        .iter()
        .zip(&values)
        .fold(0.0f64, |d, (z, v)| d.max(v.max(0.0) / (1.0 + z.abs())));
    // the bound fitted on the grid must hold beyond it
    let reach = nodes.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    let mut linear_growth_ok = true;
    for t in [0.25, 0.5, 1.0] {
        let z = reach + t * (store.z_max() - reach);
        for p in [-z, z] {
            linear_growth_ok &= store.evaluate(p, xi, n)? <= growth_constant * (1.0 + z) + 1e-9;
        }
    }
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    let min_gap_to_v_hat = nodes
        .iter()
        .zip(&values)
        .map(|(&z, v)| v - v_hat_with(consts, z, xi).value)
        .fold(f64::INFINITY, f64::min);

    let f = store.function(xi, n);
    let mut outer_decay_ok = None;
    let samples = [4.0, 5.0, 6.0, 7.0];
    let first = f.pieces.first().expect("non-empty");
    let last = f.pieces.last().expect("non-empty");
    let sides = [
        (
            first,
            -1.0,
            matches!(first.kind, PieceKind::Continuation { c_minus, .. } if c_minus != 0.0),
        ),
        (
            last,
            1.0,
            matches!(last.kind, PieceKind::Continuation { c_plus, .. } if c_plus != 0.0),
        ),
    ];
    for (piece, sign, active) in sides {
        if !active {
            continue;
        }
        let pts: Vec<f64> = samples
            .iter()
            .map(|s| sign * s)
            .filter(|z| piece.z_lo < *z && *z < piece.z_hi && z.abs() <= store.z_max())
            .collect();
        if pts.len() < 2 {
            continue;
        }
        let mut gaps = Vec::new();
        for &z in &pts {
            gaps.push((store.evaluate(z, xi, n)? - v_hat_with(consts, z, xi).value).abs());
        }
        let ok = gaps.windows(2).all(|w| w[1] < w[0]);
        outer_decay_ok = Some(outer_decay_ok.unwrap_or(true) && ok);
    }
    Ok(BoundsReport {
        xi,
        n,
        growth_constant,
        linear_growth_ok,
        min_value,
        min_gap_to_v_hat,
        outer_decay_ok,
    })
}

/// Linear growth, boundedness from below and the far-field decay towards
/// `v̂`.
pub fn check_bounds_and_growth(
    store: &SolutionStore,
    nodes: &[f64],
) -> Result<Vec<BoundsReport>, EvalError> {
    functions(store)
        .par_iter()
        .map(|&(xi, n)| bounds_one(store, xi, n, nodes))
        .collect()
}

/// Mirror symmetry of boundaries and values, and monotonicity in `n`.
pub fn check_global(store: &SolutionStore, nodes: &[f64]) -> Result<GlobalReport, EvalError> {
    let mut boundary_symmetry = 0.0f64;
    let mut value_symmetry = 0.0f64;
    let mut monotonicity_min: Option<f64> = None;
    for n in 0..=store.n_max() {
        for xi in Regime::ALL {
            let b = store.function(xi, n).boundaries();
            let m = store.function(xi.mirror(), n).boundaries();
            if b.len() != m.len() {
                boundary_symmetry = f64::INFINITY;
            } else {
                for (x, y) in b.iter().zip(m.iter().rev()) {
                    boundary_symmetry = boundary_symmetry.max((x + y).abs());
                }
            }
        }
        for &z in nodes {
            for xi in Regime::ALL {
                let v = store.evaluate(z, xi, n)?;
                let w = store.evaluate(-z, xi.mirror(), n)?;
                value_symmetry = value_symmetry.max((v - w).abs() / (1.0 + v.abs()));
                if n < store.n_max() {
                    let up = store.evaluate(z, xi, n + 1)? - v;
                    monotonicity_min = Some(monotonicity_min.map_or(up, |m| m.min(up)));
                }
            }
        }
    }
    Ok(GlobalReport {
        boundary_symmetry,
        value_symmetry,
        monotonicity_min,
    })
}

/// Runs every check and lists the failures.
pub fn verify_store(
    store: &SolutionStore,
    grid: &GridSpec,
    tol: &Tolerances,
) -> Result<VerifyReport, EvalError> {
    let nodes = grid.nodes_for(store);
    let vi = check_variational_inequality(store, &nodes)?;
    let pasting = check_pasting(store)?;
    let structure = check_structure(store);
    let bounds = check_bounds_and_growth(store, &nodes)?;
    let global = check_global(store, &nodes)?;

    let mut failures = Vec::new();
    for r in &vi {
        let at = format!("xi={} n={}", r.xi, r.n);
        if !(r.max_pde_residual <= tol.pde) {
            failures.push(format!("{at}: PDE residual {:.3e}", r.max_pde_residual));
        }
        if let Some(s) = r.min_supersolution {
            if !(s >= -tol.pde) {
                failures.push(format!(
                    "{at}: supersolution violated on switching region ({s:.3e})"
                ));
            }
        }
        if let Some(g) = r.max_obstacle_gap {
            if !(g <= tol.continuity) {
                failures.push(format!(
                    "{at}: switching value misses the obstacle by {g:.3e}"
                ));
            }
        }
        if let Some(m) = r.min_dominance_margin {
            if !(m >= -tol.dominance) {
                failures.push(format!(
                    "{at}: obstacle exceeds continuation value by {:.3e}",
                    -m
                ));
            }
        }
        if let Some(m) = r.min_midpoint_margin {
            if !(m > 0.0) {
                failures.push(format!("{at}: midpoint margin {m:.3e} not positive"));
            }
        }
    }
    for b in &pasting {
        let at = format!("xi={} n={} z={:.12}", b.xi, b.n, b.z);
        if !(b.c1_mismatch <= tol.c1) {
            failures.push(format!("{at}: C1 mismatch {:.3e}", b.c1_mismatch));
        }
        if !(b.cost_identity_error <= tol.continuity) {
            failures.push(format!(
                "{at}: value jump differs from K by {:.3e}",
                b.cost_identity_error
            ));
        }
        if b.recurrent {
            failures.push(format!("{at}: switch chain revisits a regime"));
        }
    }
    for s in &structure {
        let at = format!("xi={} n={}", s.xi, s.n);
        if !s.switching_in_reference {
            failures.push(format!(
                "{at}: switching piece outside its reference region"
            ));
        }
        if !s.separated {
            failures.push(format!("{at}: switching pieces not separated"));
        }
        if !s.one_per_component {
            failures.push(format!(
                "{at}: several switching pieces in one reference component"
            ));
        }
        for v in &s.invariant_violations {
            failures.push(format!("{at}: {v}"));
        }
    }
    for b in &bounds {
        let at = format!("xi={} n={}", b.xi, b.n);
        if !b.linear_growth_ok {
            failures.push(format!("{at}: exceeds linear growth bound"));
        }
        if !b.min_value.is_finite() {
            failures.push(format!("{at}: unbounded below on grid"));
        }
        if !(b.min_gap_to_v_hat >= -tol.order) {
            failures.push(format!("{at}: below v_hat by {:.3e}", -b.min_gap_to_v_hat));
        }
        if b.outer_decay_ok == Some(false) {
            failures.push(format!("{at}: no decay towards v_hat on outer pieces"));
        }
    }
    if !(global.boundary_symmetry <= tol.symmetry) {
        failures.push(format!(
            "boundary mirror asymmetry {:.3e}",
            global.boundary_symmetry
        ));
    }
    if !(global.value_symmetry <= tol.symmetry) {
        failures.push(format!(
            "value mirror asymmetry {:.3e}",
            global.value_symmetry
        ));
    }
    if let Some(m) = global.monotonicity_min {
        if !(m >= -tol.order) {
            failures.push(format!("value decreases with n by {:.3e}", -m));
        }
    }
    Ok(VerifyReport {
        n_max: store.n_max(),
        grid: grid.clone(),
        grid_nodes: nodes.len(),
        tolerances: *tol,
        variational_inequality: vi,
        pasting,
        structure,
        bounds,
        global,
        passed: failures.is_empty(),
        failures,
    })
}

/// A copy of a store with one boundary or coefficient disturbed.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub description: String,
    pub store: SolutionStore,
}

/// Every boundary shifted by `±eps` and every continuation coefficient
/// shifted by `+eps` and scaled by `1 + eps`, one at a time, levels ≥ 1.
pub fn perturbations(store: &SolutionStore, eps: f64) -> Vec<Perturbation> {
    let mut out = Vec::new();
    for n in 1..=store.n_max() {
        for xi in Regime::ALL {
            let f = store.function(xi, n);
            for i in 1..f.pieces.len() {
                for d in [eps, -eps] {
                    let mut s = store.clone();
                    let g = s.function_mut(xi, n);
                    g.pieces[i - 1].z_hi += d;
                    g.pieces[i].z_lo += d;
                    out.push(Perturbation {
                        description: format!("xi={xi} n={n} boundary {i} {d:+e}"),
                        store: s,
                    });
                }
            }
            for (i, p) in f.pieces.iter().enumerate() {
                let PieceKind::Continuation { c_plus, c_minus } = p.kind else {
                    continue;
                };
                for (which, c) in [("c_plus", c_plus), ("c_minus", c_minus)] {
                    let mut variants = vec![("shifted", c + eps)];
                    if c != 0.0 {
                        variants.push(("scaled", c * (1.0 + eps)));
                    }
                    for (how, new) in variants {
                        let mut s = store.clone();
                        if let PieceKind::Continuation { c_plus, c_minus } =
                            &mut s.function_mut(xi, n).pieces[i].kind
                        {
                            *(if which == "c_plus" { c_plus } else { c_minus }) = new;
                        }
                        out.push(Perturbation {
                            description: format!("xi={xi} n={n} piece {i} {which} {how}"),
                            store: s,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle needs at least 201 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("grid too coarse for a monotone scheme: h·z_max = {0} > 1")]
    NotMonotone(f64),
    #[error("far-field series does not converge at z_max = {0}")]
    FarField(f64),
    #[error("policy iteration did not settle after {0} sweeps")]
    NonConvergence(usize),
}

/// Finite-difference solution of the level recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdOracleResult {
    pub z: Vec<f64>,
    /// `values[n][ξ.index()][i]`.
    pub values: Vec<[Vec<f64>; 3]>,
    /// Policy-iteration sweeps per level and regime.
    pub iterations: Vec<[usize; 3]>,
    /// Max complementarity residual per level and regime, in value units.
    pub residuals: Vec<[f64; 3]>,
}

/// `H_ν(z)·(2z)^{-ν}` from the large-`z` asymptotic series; `None` if the
/// smallest term is not negligible.
fn asymptotic_hermite_scaled(nu: f64, z: f64) -> Option<f64> {
    let x = 1.0 / (2.0 * z).powi(2);
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 0..400 {
        let kf = k as f64;
        let next = -term * (-nu + 2.0 * kf) * (-nu + 2.0 * kf + 1.0) * x / (kf + 1.0);
        if next.abs() > term.abs() {
            return None;
        }
        sum += next;
        term = next;
        if term.abs() <= 1e-17 * sum.abs() {
            return Some(sum);
        }
    }
    None
}

/// `H'_ν(z)/H_ν(z)` at large `z` via `H' = 2νH_{ν-1}`.
fn far_field_log_derivative(nu: f64, z: f64) -> Option<f64> {
    let s0 = asymptotic_hermite_scaled(nu, z)?;
    let s1 = asymptotic_hermite_scaled(nu - 1.0, z)?;
    Some(nu / z * s1 / s0)
}

/// Quadratic `p` with `δp - Lp = f(·, ξ)` exactly.
fn particular(params: &ModelParams, xi: Regime, z: f64) -> f64 {
    let (th, d, s, l) = (params.theta, params.delta, params.sigma, params.lambda);
    let x = xi.sign();
    let a = -l * x.abs() * s * s / (th * (d + 2.0 * th));
    let b = -x * th.sqrt() * s / (d + th);
    let c = th * a / d;
    a * z * z + b * z + c
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / m;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

struct Scheme {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
}

impl Scheme {
    /// Central differences for `δV - LV = f` with ghost nodes carrying the
    /// decaying-branch Robin condition on `V - p`.
    fn new(params: &ModelParams, xi: Regime, z: &[f64], h: f64, rho: f64) -> Self {
        let m = z.len();
        let th = params.theta;
        let mut s = Scheme {
            lower: vec![0.0; m],
            diag: vec![params.delta + th / (h * h); m],
            upper: vec![0.0; m],
            rhs: z.iter().map(|&zi| reward(params, zi, xi)).collect(),
        };
        for i in 0..m {
            s.lower[i] = -th / (2.0 * h * h) - th * z[i] / (2.0 * h);
            s.upper[i] = -th / (2.0 * h * h) + th * z[i] / (2.0 * h);
        }
        let p = |x: f64| particular(params, xi, x);
        // right: w_{m} = w_{m-2} + 2hρ w_{m-1}
        let (zl, zr) = (z[0], z[m - 1]);
        let shift_r = p(zr + h) - p(zr - h) - 2.0 * h * rho * p(zr);
        let up = s.upper[m - 1];
        s.lower[m - 1] += up;
        s.diag[m - 1] += up * 2.0 * h * rho;
        s.rhs[m - 1] -= up * shift_r;
        s.upper[m - 1] = 0.0;
        // left: w_{-1} = w_1 + 2hρ w_0 with the mirrored rate -ρ
        let shift_l = p(zl - h) - p(zl + h) - 2.0 * h * rho * p(zl);
        let lo = s.lower[0];
        s.upper[0] += lo;
        s.diag[0] += lo * 2.0 * h * rho;
        s.rhs[0] -= lo * shift_l;
        s.lower[0] = 0.0;
        s
    }

    fn apply(&self, v: &[f64], i: usize) -> f64 {
        let mut r = self.diag[i] * v[i] - self.rhs[i];
        if i > 0 {
            r += self.lower[i] * v[i - 1];
        }
        if i + 1 < v.len() {
            r += self.upper[i] * v[i + 1];
        }
        r
    }

    /// Howard iteration for `min(AV - b, V - g) = 0`, the obstacle branch
    /// scaled by the diagonal.
    fn solve_obstacle(&self, g: Option<&[f64]>) -> Result<(Vec<f64>, usize, f64), OracleError> {
        let m = self.diag.len();
        let mut active = vec![false; m];
        // Howard's iteration terminates within m policy changes
        let max_sweeps = m + 10;
        for sweep in 1..=max_sweeps {
            let (mut lo, mut di, mut up, mut rhs) = (
                self.lower.clone(),
                self.diag.clone(),
                self.upper.clone(),
                self.rhs.clone(),
            );
            if let Some(g) = g {
                for i in (0..m).filter(|&i| active[i]) {
                    lo[i] = 0.0;
                    up[i] = 0.0;
                    rhs[i] = di[i] * g[i];
                }
            }
            let v = thomas(&lo, &di, &up, &rhs);
            let Some(g) = g else {
                let res = (0..m).fold(0.0f64, |r, i| r.max((self.apply(&v, i) / di[i]).abs()));
                return Ok((v, sweep, res));
            };
            di.clone_from(&self.diag);
            let next: Vec<bool> = (0..m)
                .map(|i| di[i] * (v[i] - g[i]) < self.apply(&v, i))
                .collect();
            if next == active {
                let res = (0..m).fold(0.0f64, |r, i| {
                    r.max((self.apply(&v, i) / di[i]).min(v[i] - g[i]).abs())
                });
                return Ok((v, sweep, res));
            }
            active = next;
        }
        Err(OracleError::NonConvergence(max_sweeps))
    }
}

/// Solves levels `0..=n_max` on `nodes` uniform points of `[-z_max, z_max]`.
///
/// Central differences (monotone because `h·z_max ≤ 1`), policy iteration
/// for the complementarity problem, and Robin far-field conditions taken
/// from the decaying Hermite branch instead of clamping to `v̂`.
pub fn fd_oracle(
    params: &ModelParams,
    n_max: usize,
    nodes: usize,
    z_max: f64,
) -> Result<FdOracleResult, OracleError> {
    if nodes < 201 {
        return Err(OracleError::TooFewNodes(nodes));
    }
    let h = 2.0 * z_max / (nodes - 1) as f64;
    if h * z_max > 1.0 {
        return Err(OracleError::NotMonotone(h * z_max));
    }
    let nu = -params.delta / params.theta;
    let rho = far_field_log_derivative(nu, z_max).ok_or(OracleError::FarField(z_max))?;
    let z: Vec<f64> = (0..nodes).map(|i| -z_max + h * i as f64).collect();
    let schemes = Regime::ALL.map(|xi| Scheme::new(params, xi, &z, h, rho));
    let mut out = FdOracleResult {
        z: z.clone(),
        values: Vec::new(),
        iterations: Vec::new(),
        residuals: Vec::new(),
    };
    for n in 0..=n_max {
        let mut vals: Vec<Vec<f64>> = Vec::new();
        let mut its = [0; 3];
        let mut res = [0.0; 3];
        for xi in Regime::ALL {
            let g: Option<Vec<f64>> = (n > 0).then(|| {
                let prev = &out.values[n - 1];
                (0..nodes)
                    .map(|i| {
                        feasible_set(xi)
                            .iter()
                            .map(|t| prev[t.index()][i])
                            .fold(f64::NEG_INFINITY, f64::max)
                            - params.cost_k
                    })
                    .collect()
            });
            let (v, sweeps, r) = schemes[xi.index()].solve_obstacle(g.as_deref())?;
            its[xi.index()] = sweeps;
            res[xi.index()] = r;
            vals.push(v);
        }
        let [a, b, c]: [Vec<f64>; 3] = vals.try_into().expect("three regimes");
        out.values.push([a, b, c]);
        out.iterations.push(its);
        out.residuals.push(res);
    }
    Ok(out)
}

/// Sup-norm gap between the oracle and the store at level `n`, and
/// `sup |v|` over the same nodes.
pub fn oracle_gap(
    store: &SolutionStore,
    oracle: &FdOracleResult,
    n: usize,
) -> Result<(f64, f64), EvalError> {
    let mut gap = 0.0f64;
    let mut sup = 0.0f64;
    for xi in Regime::ALL {
        for (i, &z) in oracle.z.iter().enumerate() {
            let v = store.evaluate(z, xi, n)?;
            gap = gap.max((v - oracle.values[n][xi.index()][i]).abs());
            sup = sup.max(v.abs());
        }
    }
    Ok((gap, sup))
}
