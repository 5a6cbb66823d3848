use ouswitch::io::{emit_grid, load_store, save_store};
use ouswitch::model::{v_hat, ModelParams, Regime};
use ouswitch::piecewise::SolutionStore;
use ouswitch::solver::{solve_all, SolverSettings};
use ouswitch::verify::{verify_store, GridSpec, Tolerances};

#[test]
fn default_store_round_trips_and_reverifies() {
    let store = solve_all(ModelParams::default(), 5, &SolverSettings::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    save_store(&store, &a).unwrap();
    let back = load_store(&a).unwrap();
    save_store(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report = verify_store(&back, &GridSpec::default(), &Tolerances::default()).unwrap();
    assert!(report.passed, "{:?}", report.failures);
}

#[test]
fn level_zero_grid_is_v_hat() {
    let params = ModelParams::default();
    let store = SolutionStore::new(params, 8.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.csv");
    let grid = GridSpec {
        nodes: 301,
        ..GridSpec::default()
    };
    emit_grid(&store, &grid, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("z,xi,n,value,d1,region,piece_index,target")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 301 * 3);
    let mut last = (f64::NEG_INFINITY, -2);
    for r in rows {
        let z: f64 = r[0].parse().unwrap();
        let xi: i64 = r[1].parse().unwrap();
        assert!((z, xi) > last, "row order");
        last = (z, xi);
        let v: f64 = r[3].parse().unwrap();
        let reg = Regime::from_xi(xi).unwrap();
        assert_eq!(v, v_hat(&params, z, reg).value + 0.0);
        assert_eq!((r[2], r[5], r[7]), ("0", "C", ""));
    }
}
