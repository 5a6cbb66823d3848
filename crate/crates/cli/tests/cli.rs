use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const PARAMS: &str =
    r#"{"theta": 1.0, "mu": 0.0, "sigma": 1.0, "lambda": 0.3, "delta": 0.1, "cost_k": 0.05}"#;

fn ouswitch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ouswitch"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A level-2 store of the default instance, solved once per test binary.
fn store() -> &'static (tempfile::TempDir, PathBuf) {
    static STORE: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    STORE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("config.json");
        fs::write(&cfg, format!(r#"{{"params": {PARAMS}, "n_max": 2}}"#)).unwrap();
        let out = ouswitch(
            &["solve", "--config", "config.json", "--out", "store.json"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
        let path = dir.path().join("store.json");
        (dir, path)
    })
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ouswitch(&["solve", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn prohibitive_cost_is_rejected_before_solving() {
    let dir = tempfile::tempdir().unwrap();
    let params = PARAMS.replace("\"cost_k\": 0.05", "\"cost_k\": 10.0");
    fs::write(
        dir.path().join("c.json"),
        format!(r#"{{"params": {params}, "n_max": 1}}"#),
    )
    .unwrap();
    let out = ouswitch(
        &["solve", "--config", "c.json", "--out", "s.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("empty reference region for ξ=0"),
        "{}",
        stderr(&out)
    );
    assert!(!dir.path().join("s.json").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        format!(r#"{{"params": {PARAMS}, "n_max": 1, "extra": 1}}"#),
    )
    .unwrap();
    let out = ouswitch(
        &["solve", "--config", "c.json", "--out", "s.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("extra"), "{}", stderr(&out));
}

#[test]
fn truncated_store_fails_the_checksum() {
    let (_, path) = store();
    let dir = tempfile::tempdir().unwrap();
    let bytes = fs::read(path).unwrap();
    fs::write(dir.path().join("cut.json"), &bytes[..bytes.len() * 2 / 3]).unwrap();
    let out = ouswitch(
        &["verify", "--store", "cut.json", "--report", "r.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn verify_passes_on_a_fresh_store() {
    let (_, path) = store();
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.json"), r#"{"nodes": 1201}"#).unwrap();
    let store = path.to_str().unwrap();
    let out = ouswitch(
        &[
            "verify", "--store", store, "--report", "r.json", "--grid", "g.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn grid_has_one_row_per_node_regime_and_level() {
    let (_, path) = store();
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("g.json"),
        r#"{"z_min": -2, "z_max": 2, "nodes": 41, "boundary_offsets": []}"#,
    )
    .unwrap();
    let store = path.to_str().unwrap();
    let out = ouswitch(
        &[
            "grid", "--store", store, "--spec", "g.json", "--out", "g.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("z,xi,n,value,d1,region,piece_index,target")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 41 * 3 * 3);
    assert!(rows.iter().all(|r| r.len() == 8));
    // level 0 of the flat regime is identically zero
    assert!(rows
        .iter()
        .filter(|r| r[1] == "0" && r[2] == "0")
        .all(|r| r[3].parse::<f64>().unwrap() == 0.0));
}

fn attr(n: roxmltree::Node, name: &str) -> f64 {
    n.attribute(name).unwrap().parse().unwrap()
}

fn path_points(d: &str) -> Vec<(f64, f64)> {
    d.split(['M', 'L'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (x, y) = s.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

#[test]
fn figures_are_well_formed_svg() {
    let (_, path) = store();
    let dir = tempfile::tempdir().unwrap();
    let store_arg = path.to_str().unwrap();
    let out = ouswitch(
        &["plot", "--store", store_arg, "--out-dir", "figs"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let store = ouswitch::io::load_store(path).unwrap();
    let level1_boundaries: usize = ouswitch::model::Regime::ALL
        .iter()
        .map(|&xi| store.function(xi, 1).boundaries().len())
        .sum();

    for name in ["fig1.svg", "fig2.svg", "fig3.svg"] {
        let text = fs::read_to_string(dir.path().join("figs").join(name)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let curves: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("curve"))
            .collect();
        let families: BTreeSet<&str> = curves
            .iter()
            .filter_map(|n| n.attribute("data-xi"))
            .collect();
        assert_eq!(families, BTreeSet::from(["-1", "0", "1"]), "{name}");
        for c in &curves {
            assert!(path_points(c.attribute("d").unwrap()).len() >= 2, "{name}");
        }
    }

    let text = fs::read_to_string(dir.path().join("figs/fig1.svg")).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let arrows = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("switch-arrow"))
        .count();
    assert_eq!(arrows, level1_boundaries);

    // the flat level-0 value is zero, so its curve runs along the horizontal axis
    let axis_y: Vec<f64> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("axis") && n.attribute("y1") == n.attribute("y2"))
        .map(|n| attr(n, "y1"))
        .collect();
    let flat0 = doc
        .descendants()
        .find(|n| {
            n.attribute("class") == Some("curve")
                && n.attribute("data-xi") == Some("0")
                && n.attribute("data-n") == Some("0")
        })
        .expect("flat level-0 curve");
    let pts = path_points(flat0.attribute("d").unwrap());
    assert!(axis_y
        .iter()
        .any(|&y| pts.iter().all(|p| (p.1 - y).abs() <= 1e-3)));
}

#[test]
fn simulate_rejects_bad_regime() {
    let (_, path) = store();
    let dir = tempfile::tempdir().unwrap();
    let store = path.to_str().unwrap();
    let out = ouswitch(
        &[
            "simulate", "--store", store, "--z0", "0", "--xi", "2", "--n", "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_reports_a_consistent_estimate() {
    let (_, path) = store();
    let dir = tempfile::tempdir().unwrap();
    let store = path.to_str().unwrap();
    let out = ouswitch(
        &[
            "simulate",
            "--store",
            store,
            "--z0",
            "-1",
            "--xi",
            "0",
            "--n",
            "1",
            "--paths",
            "2000",
            "--horizon",
            "40",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let analytic = s["analytic"].as_f64().unwrap();
    let mean = s["estimate"]["mean"].as_f64().unwrap();
    let stderr_ = s["estimate"]["stderr"].as_f64().unwrap();
    let trunc = s["estimate"]["truncation_bound"].as_f64().unwrap();
    assert!(
        (mean - analytic).abs() <= 5.0 * stderr_ + trunc + 0.01,
        "{s}"
    );
}
