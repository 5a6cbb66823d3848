//! Run configuration, store persistence and grid export.
//!
//! Store files look like
//!
//! ```text
//! {
//!   "schema_version": "ouswitch-store/1",
//!   "checksum": "<sha256 of the payload bytes>",
//!   "payload": { ... }
//! }
//! ```
//!
//! Every float is written with 17 significant digits, so a load returns
//! bit-identical numbers. The checksum is verified on the raw bytes before
//! the payload is parsed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::IgnoredAny;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelError, ModelParams, Regime};
use crate::piecewise::{
    EvalError, Piece, PieceKind, PiecewiseValueFunction, Region, SolutionStore,
};
use crate::simulate::SimConfig;
use crate::solver::SolverSettings;
use crate::verify::{GridSpec, Tolerances};

pub const STORE_SCHEMA: &str = "ouswitch-store/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("store schema {found:?} is not supported (expected {expected:?})")]
    SchemaVersion { found: String, expected: String },
    #[error("store checksum mismatch: recorded {recorded}, computed {computed}")]
    Checksum { recorded: String, computed: String },
    #[error("malformed store: {0}")]
    Malformed(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<ModelError> for IoError {
    fn from(e: ModelError) -> Self {
        IoError::Invalid(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_error(path: &Path, e: serde_json::Error) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub grid: GridSpec,
    pub tolerances: Tolerances,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub store: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub plot_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ModelParams,
    pub n_max: usize,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub simulate: SimConfig,
    #[serde(default)]
    pub output: OutputPaths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        self.params.validate()?;
        self.solver.validate().map_err(IoError::Invalid)?;
        self.verify.grid.validate().map_err(IoError::Invalid)?;
        self.simulate.validate().map_err(IoError::Invalid)?;
        Ok(())
    }
}

/// Parses and validates a run configuration; unknown keys are errors.
pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = read(path)?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a JSON document of type `T` with line-numbered parse errors.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e))
}

/// Float written with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Exact(f64);

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!(
                "non-finite number {}",
                self.0
            )));
        }
        let raw =
            RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Exact)
    }
}

/// A piece bound; infinite ends are `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
struct Bound(Option<Exact>);

impl Bound {
    fn from(z: f64) -> Self {
        Bound(z.is_finite().then_some(Exact(z)))
    }

    fn to(self, infinity: f64) -> f64 {
        self.0.map_or(infinity, |e| e.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
enum StoredPiece {
    Continuation {
        z_lo: Bound,
        z_hi: Bound,
        c_plus: Exact,
        c_minus: Exact,
    },
    Switching {
        z_lo: Bound,
        z_hi: Bound,
        target: Regime,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredFunction {
    xi: Regime,
    n: usize,
    pieces: Vec<StoredPiece>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredParams {
    theta: Exact,
    mu: Exact,
    sigma: Exact,
    lambda: Exact,
    delta: Exact,
    cost_k: Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredPayload {
    params: StoredParams,
    z_max: Exact,
    levels: Vec<Vec<StoredFunction>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredHeader {
    schema_version: String,
    checksum: String,
    #[allow(dead_code)]
    payload: IgnoredAny,
}

fn payload_of(store: &SolutionStore) -> StoredPayload {
    let p = store.params();
    StoredPayload {
        params: StoredParams {
            theta: Exact(p.theta),
            mu: Exact(p.mu),
            sigma: Exact(p.sigma),
            lambda: Exact(p.lambda),
            delta: Exact(p.delta),
            cost_k: Exact(p.cost_k),
        },
        z_max: Exact(store.z_max()),
        levels: (0..=store.n_max())
            .map(|n| {
                store
                    .level(n)
                    .iter()
                    .map(|f| StoredFunction {
                        xi: f.xi,
                        n: f.n,
                        pieces: f
                            .pieces
                            .iter()
                            .map(|p| match p.kind {
                                PieceKind::Continuation { c_plus, c_minus } => {
                                    StoredPiece::Continuation {
                                        z_lo: Bound::from(p.z_lo),
                                        z_hi: Bound::from(p.z_hi),
                                        c_plus: Exact(c_plus),
                                        c_minus: Exact(c_minus),
                                    }
                                }
                                PieceKind::Switching { target } => StoredPiece::Switching {
                                    z_lo: Bound::from(p.z_lo),
                                    z_hi: Bound::from(p.z_hi),
                                    target,
                                },
                            })
                            .collect(),
                    })
                    .collect()
            })
            .collect(),
    }
}

fn store_of(payload: StoredPayload) -> Result<SolutionStore, IoError> {
    let sp = payload.params;
    let params = ModelParams {
        theta: sp.theta.0,
        mu: sp.mu.0,
        sigma: sp.sigma.0,
        lambda: sp.lambda.0,
        delta: sp.delta.0,
        cost_k: sp.cost_k.0,
    };
    params.validate()?;
    let mut store = SolutionStore::new(params, payload.z_max.0)?;
    let malformed = |m: String| IoError::Malformed(m);
    for (n, level) in payload.levels.into_iter().enumerate() {
        let funcs: Vec<PiecewiseValueFunction> = level
            .into_iter()
            .map(|f| PiecewiseValueFunction {
                xi: f.xi,
                n: f.n,
                pieces: f
                    .pieces
                    .into_iter()
                    .map(|p| match p {
                        StoredPiece::Continuation {
                            z_lo,
                            z_hi,
                            c_plus,
                            c_minus,
                        } => Piece::continuation(
                            z_lo.to(f64::NEG_INFINITY),
                            z_hi.to(f64::INFINITY),
                            c_plus.0,
                            c_minus.0,
                        ),
                        StoredPiece::Switching { z_lo, z_hi, target } => Piece::switching(
                            z_lo.to(f64::NEG_INFINITY),
                            z_hi.to(f64::INFINITY),
                            target,
                        ),
                    })
                    .collect(),
            })
            .collect();
        let level: [PiecewiseValueFunction; 3] = funcs
            .try_into()
            .map_err(|_| malformed(format!("level {n} does not hold three functions")))?;
        if n == 0 {
            for (xi, f) in Regime::ALL.iter().zip(&level) {
                if *f != PiecewiseValueFunction::zero_switch(*xi) {
                    return Err(malformed(
                        "level 0 must hold the zero-switch functions".into(),
                    ));
                }
            }
            continue;
        }
        store
            .push_level(level)
            .map_err(|e| malformed(e.to_string()))?;
    }
    Ok(store)
}

const PAYLOAD_KEY: &str = "\"payload\": ";
const TRAILER: &str = "\n}\n";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical file contents for a store.
pub fn store_to_string(store: &SolutionStore) -> String {
    let payload =
        serde_json::to_string_pretty(&payload_of(store)).expect("store payload is finite");
    let header = serde_json::json!({ "schema_version": STORE_SCHEMA });
    let schema = header["schema_version"].to_string();
    format!(
        "{{\n  \"schema_version\": {schema},\n  \"checksum\": \"{}\",\n  {PAYLOAD_KEY}{payload}{TRAILER}",
        sha256_hex(payload.as_bytes())
    )
}

/// Inverse of [`store_to_string`].
pub fn store_from_str(text: &str) -> Result<SolutionStore, IoError> {
    let at = text
        .find(PAYLOAD_KEY)
        .ok_or_else(|| IoError::Malformed("no payload".into()))?
        + PAYLOAD_KEY.len();
    let header: StoredHeader = serde_json::from_str(&format!("{}null}}", &text[..at]))
        .map_err(|e| IoError::Malformed(format!("header: {e}")))?;
    if header.schema_version != STORE_SCHEMA {
        return Err(IoError::SchemaVersion {
            found: header.schema_version,
            expected: STORE_SCHEMA.into(),
        });
    }
    let body = &text[at..];
    let payload = body.strip_suffix(TRAILER).unwrap_or(body);
    let computed = sha256_hex(payload.as_bytes());
    if computed != header.checksum {
        return Err(IoError::Checksum {
            recorded: header.checksum,
            computed,
        });
    }
    let payload: StoredPayload =
        serde_json::from_str(payload).map_err(|e| IoError::Malformed(format!("payload: {e}")))?;
    store_of(payload)
}

pub fn save_store(store: &SolutionStore, path: &Path) -> Result<(), IoError> {
    write(path, &store_to_string(store))
}

pub fn load_store(path: &Path) -> Result<SolutionStore, IoError> {
    store_from_str(&read(path)?)
}

pub fn grid_header() -> &'static str {
    "z,xi,n,value,d1,region,piece_index,target"
}

/// CSV of values and classifications on the grid nodes (including the
/// boundary offsets), ordered by `z`, then `ξ`, then `n`.
pub fn grid_to_string(store: &SolutionStore, grid: &GridSpec) -> Result<String, IoError> {
    let mut out = String::new();
    out.push_str(grid_header());
    out.push('\n');
    for z in grid.nodes_for(store) {
        for xi in Regime::ALL {
            for n in 0..=store.n_max() {
                let jet = store.jet(z, xi, n)?;
                let c = store.classify(z, xi, n)?;
                let (region, target) = match c.region {
                    Region::Continuation => ("C", String::new()),
                    Region::Switching(t) => ("S", t.xi().to_string()),
                };
                let _ = writeln!(
                    out,
                    "{:.16e},{},{},{:.16e},{:.16e},{},{},{}",
                    z,
                    xi.xi(),
                    n,
                    jet.value + 0.0,
                    jet.d1 + 0.0,
                    region,
                    c.piece_index,
                    target
                );
            }
        }
    }
    Ok(out)
}

pub fn emit_grid(store: &SolutionStore, grid: &GridSpec, path: &Path) -> Result<(), IoError> {
    write(path, &grid_to_string(store, grid)?)
}

/// Writes a serializable value as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| IoError::Malformed(e.to_string()))?;
    s.push('\n');
    write(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_all;

    fn solved() -> SolutionStore {
        solve_all(ModelParams::default(), 2, &SolverSettings::default()).unwrap()
    }

    #[test]
    fn exact_floats_round_trip() {
        for x in [
            0.1,
            -1.0 / 3.0,
            1e-300,
            6.02214076e23,
            f64::MIN_POSITIVE,
            3.797440485075599e-18,
        ] {
            let s = serde_json::to_string(&Exact(x)).unwrap();
            let back: Exact = serde_json::from_str(&s).unwrap();
            assert_eq!(back.0.to_bits(), x.to_bits(), "{s}");
        }
        assert!(serde_json::to_string(&Exact(f64::NAN)).is_err());
    }

    #[test]
    fn store_round_trip_is_canonical() {
        let store = solved();
        let a = store_to_string(&store);
        let back = store_from_str(&a).unwrap();
        assert_eq!(store_to_string(&back), a);
        for n in 0..=2 {
            for xi in Regime::ALL {
                assert_eq!(back.function(xi, n), store.function(xi, n));
                for z in [-3.3, -0.2, 0.0, 1.7, 6.0] {
                    assert_eq!(
                        back.evaluate(z, xi, n).unwrap().to_bits(),
                        store.evaluate(z, xi, n).unwrap().to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn truncated_store_fails_checksum() {
        let text = store_to_string(&solved());
        let cut = &text[..text.len() * 2 / 3];
        assert!(matches!(store_from_str(cut), Err(IoError::Checksum { .. })));
        let edited = text.replacen("\"c_plus\": 0.", "\"c_plus\": 1.", 1);
        assert!(matches!(
            store_from_str(&edited),
            Err(IoError::Checksum { .. })
        ));
    }

    #[test]
    fn foreign_schema_rejected() {
        let text = store_to_string(&solved()).replace(STORE_SCHEMA, "ouswitch-store/0");
        assert!(matches!(
            store_from_str(&text),
            Err(IoError::SchemaVersion { .. })
        ));
    }

    #[test]
    fn unknown_payload_field_rejected_even_with_valid_checksum() {
        let text = store_to_string(&solved());
        let at = text.find(PAYLOAD_KEY).unwrap() + PAYLOAD_KEY.len();
        let payload =
            text[at..]
                .strip_suffix(TRAILER)
                .unwrap()
                .replacen("{", "{\n  \"extra\": 1,", 1);
        let forged = format!(
            "{{\n  \"schema_version\": \"{STORE_SCHEMA}\",\n  \"checksum\": \"{}\",\n  {PAYLOAD_KEY}{payload}{TRAILER}",
            sha256_hex(payload.as_bytes())
        );
        assert!(matches!(
            store_from_str(&forged),
            Err(IoError::Malformed(_))
        ));
    }

    #[test]
    fn grid_rows_and_cost_identity() {
        let store = solved();
        let grid = GridSpec {
            nodes: 121,
            ..GridSpec::default()
        };
        let csv = grid_to_string(&store, &grid).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), grid.nodes_for(&store).len() * 3 * 3);
        let k = store.params().cost_k;
        for row in rows {
            let f: Vec<&str> = row.split(',').collect();
            if f[5] == "S" {
                let z: f64 = f[0].parse().unwrap();
                let n: usize = f[2].parse().unwrap();
                let v: f64 = f[3].parse().unwrap();
                let t = Regime::from_xi(f[7].parse().unwrap()).unwrap();
                assert!((v - (store.evaluate(z, t, n - 1).unwrap() - k)).abs() < 1e-15);
            }
        }
    }

    const FULL: &str =
        r#"{"theta": 1.0, "mu": 0.0, "sigma": 1.0, "lambda": 0.3, "delta": 0.1, "cost_k": 0.05}"#;

    #[test]
    fn config_rejects_unknown_keys_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            format!("{{\n \"params\": {FULL},\n \"n_max\": 1,\n \"bogus\": 2\n}}"),
        )
        .unwrap();
        match load_config(&p) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation_names_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            format!(
                r#"{{"params": {}, "n_max": 1}}"#,
                FULL.replace("0.05", "10.0")
            ),
        )
        .unwrap();
        let e = load_config(&p).unwrap_err().to_string();
        assert!(e.contains("empty reference region for ξ=0"), "{e}");
        fs::write(
            &p,
            format!(
                r#"{{"params": {}, "n_max": 1}}"#,
                FULL.replace("\"theta\": 1.0", "\"theta\": -1.0")
            ),
        )
        .unwrap();
        assert!(matches!(load_config(&p), Err(IoError::Invalid(_))));
    }
}
