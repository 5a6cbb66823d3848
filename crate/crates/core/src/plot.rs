//! Deterministic SVG figures of the value functions.
//!
//! * `fig1.svg`: `n ∈ {0, 1}` for every regime, with an arrow of class
//!   `switch-arrow` at each level-one free boundary, drawn from the switching
//!   side's value down by the cost `K`.
//! * `fig2.svg`: `n ∈ {0, 1}`, one panel per regime, switching pieces dashed.
//! * `fig3.svg`: every level `0..=n_max`, one panel per regime.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::io::IoError;
use crate::model::Regime;
use crate::piecewise::{EvalError, SolutionStore};

const SAMPLES: usize = 601;
const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 44.0;

fn colour(xi: Regime) -> &'static str {
    match xi {
        Regime::Short => "#1f77b4",
        Regime::Flat => "#2ca02c",
        Regime::Long => "#d62728",
    }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    y0: f64,
    z_lo: f64,
    z_hi: f64,
    v_lo: f64,
    v_hi: f64,
}

impl Frame {
    fn x(&self, z: f64) -> f64 {
        self.x0 + (z - self.z_lo) / (self.z_hi - self.z_lo) * PANEL_W
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + (self.v_hi - v) / (self.v_hi - self.v_lo) * PANEL_H
    }
}

/// Plot window in `z`: wide enough for every level-one boundary.
fn z_window(store: &SolutionStore) -> (f64, f64) {
    let reach = Regime::ALL
        .iter()
        .filter(|_| store.n_max() >= 1)
        .flat_map(|&xi| store.function(xi, 1).boundaries())
        .fold(3.0_f64, |m, b| m.max(b.abs() + 0.5));
    let reach = reach.min(store.z_max());
    (-reach, reach)
}

fn zs(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    (0..SAMPLES).map(move |i| lo + (hi - lo) * i as f64 / (SAMPLES - 1) as f64)
}

/// Value range of the levels `n >= 1` (the unbounded level 0 is clipped).
fn v_window(
    store: &SolutionStore,
    levels: &[usize],
    z: (f64, f64),
) -> Result<(f64, f64), EvalError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &n in levels.iter().filter(|&&n| n >= 1) {
        for xi in Regime::ALL {
            for zz in zs(z.0, z.1) {
                let v = store.evaluate(zz, xi, n)?;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() {
        lo = -1.0;
        hi = 0.1;
    }
    let pad = 0.08 * (hi - lo).max(1e-3);
    Ok((lo - pad, hi + pad))
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
    clips: usize,
}

impl Svg {
    fn new(panels: usize) -> Self {
        Self {
            body: String::new(),
            width: panels as f64 * (PANEL_W + 2.0 * MARGIN),
            height: PANEL_H + 2.0 * MARGIN,
            clips: 0,
        }
    }

    fn panel(
        &mut self,
        index: usize,
        z: (f64, f64),
        v: (f64, f64),
        title: &str,
    ) -> (Frame, String) {
        let f = Frame {
            x0: MARGIN + index as f64 * (PANEL_W + 2.0 * MARGIN),
            y0: MARGIN,
            z_lo: z.0,
            z_hi: z.1,
            v_lo: v.0,
            v_hi: v.1,
        };
        let id = format!("clip{}", self.clips);
        self.clips += 1;
        let b = &mut self.body;
        let _ = writeln!(
            b,
            "<clipPath id=\"{id}\"><rect x=\"{:.3}\" y=\"{:.3}\" width=\"{PANEL_W:.3}\" height=\"{PANEL_H:.3}\"/></clipPath>",
            f.x0, f.y0
        );
        let _ = writeln!(
            b,
            "<rect class=\"frame\" x=\"{:.3}\" y=\"{:.3}\" width=\"{PANEL_W:.3}\" height=\"{PANEL_H:.3}\" fill=\"none\" stroke=\"#444\"/>",
            f.x0, f.y0
        );
        if v.0 < 0.0 && v.1 > 0.0 {
            let _ = writeln!(
                b,
                "<line class=\"axis\" x1=\"{:.3}\" y1=\"{y:.3}\" x2=\"{:.3}\" y2=\"{y:.3}\" stroke=\"#bbb\"/>",
                f.x0,
                f.x0 + PANEL_W,
                y = f.y(0.0)
            );
        }
        if z.0 < 0.0 && z.1 > 0.0 {
            let _ = writeln!(
                b,
                "<line class=\"axis\" x1=\"{x:.3}\" y1=\"{:.3}\" x2=\"{x:.3}\" y2=\"{:.3}\" stroke=\"#bbb\"/>",
                f.y0,
                f.y0 + PANEL_H,
                x = f.x(0.0)
            );
        }
        let _ = writeln!(
            b,
            "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"13\" text-anchor=\"middle\">{title}</text>",
            f.x0 + PANEL_W / 2.0,
            f.y0 - 12.0
        );
        for (zz, anchor) in [(z.0, "start"), (z.1, "end")] {
            let _ = writeln!(
                b,
                "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\" text-anchor=\"{anchor}\">z = {zz:.2}</text>",
                f.x(zz),
                f.y0 + PANEL_H + 16.0
            );
        }
        for (vv, dy) in [(v.0, 0.0), (v.1, 10.0)] {
            let _ = writeln!(
                b,
                "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\" text-anchor=\"end\">{vv:.3}</text>",
                f.x0 - 4.0,
                f.y(vv) + dy
            );
        }
        (f, id)
    }

    /// Polylines of `v(·, ξ, n)`, split at free boundaries; switching pieces
    /// are dashed when `dash_switching` is set.
    fn curve(
        &mut self,
        store: &SolutionStore,
        f: &Frame,
        clip: &str,
        xi: Regime,
        n: usize,
        opacity: f64,
        dash_switching: bool,
    ) -> Result<(), EvalError> {
        let func = store.function(xi, n);
        for (i, piece) in func.pieces.iter().enumerate() {
            let lo = piece.z_lo.max(f.z_lo);
            let hi = piece.z_hi.min(f.z_hi);
            if lo >= hi {
                continue;
            }
            let count = ((hi - lo) / (f.z_hi - f.z_lo) * SAMPLES as f64)
                .ceil()
                .max(2.0) as usize;
            let mut d = String::new();
            for k in 0..=count {
                let z = lo + (hi - lo) * k as f64 / count as f64;
                let v = store.piece_jet(xi, n, i, z)?.value;
                let _ = write!(
                    d,
                    "{}{:.3},{:.3}",
                    if k == 0 { "M" } else { " L" },
                    f.x(z),
                    f.y(v)
                );
            }
            let dash = if dash_switching && piece.is_switching() {
                " stroke-dasharray=\"5,3\""
            } else {
                ""
            };
            let _ = writeln!(
                self.body,
                "<path class=\"curve\" data-xi=\"{}\" data-n=\"{n}\" data-piece=\"{i}\" d=\"{d}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\" stroke-opacity=\"{opacity:.3}\"{dash} clip-path=\"url(#{clip})\"/>",
                xi.xi(),
                colour(xi)
            );
        }
        Ok(())
    }

    fn legend(&mut self, x: f64, y: f64, lines: &[(String, &str)]) {
        for (k, (label, stroke)) in lines.iter().enumerate() {
            let yy = y + 14.0 * k as f64;
            let _ = writeln!(
                self.body,
                "<line x1=\"{x:.3}\" y1=\"{yy:.3}\" x2=\"{:.3}\" y2=\"{yy:.3}\" stroke=\"{stroke}\" stroke-width=\"1.6\"/><text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\">{label}</text>",
                x + 18.0,
                x + 22.0,
                yy + 4.0
            );
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             <defs><marker id=\"arrowhead\" markerWidth=\"8\" markerHeight=\"8\" refX=\"4\" refY=\"4\" orient=\"auto\"><path d=\"M0,0 L8,4 L0,8 z\" fill=\"#000\"/></marker></defs>\n\
             <rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn regime_legend() -> Vec<(String, &'static str)> {
    Regime::ALL
        .iter()
        .map(|&xi| (format!("ξ = {}", xi.xi()), colour(xi)))
        .collect()
}

pub fn figure_switching(store: &SolutionStore) -> Result<String, EvalError> {
    let levels: Vec<usize> = (0..=store.n_max().min(1)).collect();
    let zw = z_window(store);
    let vw = v_window(store, &levels, zw)?;
    let mut svg = Svg::new(1);
    let (f, clip) = svg.panel(
        0,
        zw,
        vw,
        "v(z, ξ, n) for n = 0 (faint) and n = 1, with switches",
    );
    for xi in Regime::ALL {
        for &n in &levels {
            svg.curve(
                store,
                &f,
                &clip,
                xi,
                n,
                if n == 0 { 0.35 } else { 1.0 },
                false,
            )?;
        }
    }
    if store.n_max() >= 1 {
        let k = store.params().cost_k;
        for xi in Regime::ALL {
            let func = store.function(xi, 1);
            for b in func.boundaries() {
                let side = func
                    .pieces
                    .iter()
                    .find(|p| p.is_switching() && (p.z_lo == b || p.z_hi == b));
                let Some(target) = side.and_then(|p| p.target()) else {
                    continue;
                };
                let from = store.evaluate(b, target, 0)?;
                let _ = writeln!(
                    svg.body,
                    "<line class=\"switch-arrow\" data-xi=\"{}\" data-target=\"{}\" data-z=\"{b:.6}\" x1=\"{x:.3}\" y1=\"{:.3}\" x2=\"{x:.3}\" y2=\"{:.3}\" stroke=\"{}\" stroke-width=\"1.2\" marker-end=\"url(#arrowhead)\"/>",
                    xi.xi(),
                    target.xi(),
                    f.y(from),
                    f.y(from - k),
                    colour(xi),
                    x = f.x(b)
                );
            }
        }
    }
    svg.legend(f.x0 + 8.0, f.y0 + 14.0, &regime_legend());
    Ok(svg.finish())
}

pub fn figure_levels_01(store: &SolutionStore) -> Result<String, EvalError> {
    let levels: Vec<usize> = (0..=store.n_max().min(1)).collect();
    let zw = z_window(store);
    let vw = v_window(store, &levels, zw)?;
    let mut svg = Svg::new(3);
    for (i, xi) in Regime::ALL.into_iter().enumerate() {
        let (f, clip) = svg.panel(i, zw, vw, &format!("ξ = {}: n = 0 (faint), n = 1", xi.xi()));
        for &n in &levels {
            svg.curve(
                store,
                &f,
                &clip,
                xi,
                n,
                if n == 0 { 0.35 } else { 1.0 },
                true,
            )?;
        }
    }
    Ok(svg.finish())
}

pub fn figure_all_levels(store: &SolutionStore) -> Result<String, EvalError> {
    let levels: Vec<usize> = (0..=store.n_max()).collect();
    let zw = z_window(store);
    let vw = v_window(store, &levels, zw)?;
    let mut svg = Svg::new(3);
    let top = store.n_max().max(1) as f64;
    for (i, xi) in Regime::ALL.into_iter().enumerate() {
        let (f, clip) = svg.panel(
            i,
            zw,
            vw,
            &format!("ξ = {}: n = 0..{}", xi.xi(), store.n_max()),
        );
        for &n in &levels {
            svg.curve(store, &f, &clip, xi, n, 0.25 + 0.75 * n as f64 / top, true)?;
        }
    }
    Ok(svg.finish())
}

/// Writes `fig1.svg`, `fig2.svg` and `fig3.svg` into `dir`.
pub fn emit_plots(store: &SolutionStore, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (name, svg) in [
        ("fig1.svg", figure_switching(store)?),
        ("fig2.svg", figure_levels_01(store)?),
        ("fig3.svg", figure_all_levels(store)?),
    ] {
        let path = dir.join(name);
        fs::write(&path, svg).map_err(|source| IoError::Io { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::solver::{solve_all, SolverSettings};

    #[test]
    fn arrow_count_matches_level_one_boundaries() {
        let store = solve_all(ModelParams::default(), 2, &SolverSettings::default()).unwrap();
        let svg = figure_switching(&store).unwrap();
        let boundaries: usize = Regime::ALL
            .iter()
            .map(|&xi| store.function(xi, 1).boundaries().len())
            .sum();
        assert_eq!(svg.matches("class=\"switch-arrow\"").count(), boundaries);
        assert_eq!(figure_switching(&store).unwrap(), svg);
    }

    #[test]
    fn every_level_is_drawn() {
        let store = solve_all(ModelParams::default(), 2, &SolverSettings::default()).unwrap();
        let svg = figure_all_levels(&store).unwrap();
        for xi in Regime::ALL {
            for n in 0..=2 {
                assert!(svg.contains(&format!("data-xi=\"{}\" data-n=\"{n}\"", xi.xi())));
            }
        }
    }
}
