//! Monte Carlo execution of the solved switching policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::Regime;
use crate::piecewise::{EvalError, SolutionStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub z0: f64,
    pub xi0: Regime,
    /// Switches available.
    pub n: usize,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            z0: 0.0,
            xi0: Regime::Flat,
            n: 1,
            dt: 1e-3,
            horizon: 80.0,
            paths: 100_000,
            seed: 42,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.z0.is_finite() {
            return Err(format!("z0 must be finite, got {}", self.z0));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.paths == 0 {
            return Err("paths must be at least 1".into());
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchEvent {
    pub time: f64,
    pub z: f64,
    pub from: Regime,
    pub to: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationRecord {
    pub switches: Vec<SwitchEvent>,
    /// Discounted running reward `∫ e^{-δt} f(Z_t, ξ_t) dt`.
    pub reward: f64,
    /// Discounted switching costs.
    pub costs: f64,
    pub payoff: f64,
    /// Time at which the path was stopped.
    pub stopped_at: f64,
}

/// Exact OU transition of `dZ = -θZ dt + √θ dW` over `dt`.
pub fn ou_step(theta: f64, z: f64, dt: f64, gaussian: f64) -> f64 {
    let decay = (-theta * dt).exp();
    z * decay + ou_step_sd(theta, dt) * gaussian
}

fn ou_step_sd(theta: f64, dt: f64) -> f64 {
    (-(-2.0 * theta * dt).exp_m1() / 2.0).sqrt()
}

/// [`ou_step`] with the transition constants precomputed.
#[derive(Debug, Clone, Copy)]
struct OuStepper {
    decay: f64,
    sd: f64,
}

impl OuStepper {
    fn new(theta: f64, dt: f64) -> Self {
        Self {
            decay: (-theta * dt).exp(),
            sd: ou_step_sd(theta, dt),
        }
    }

    fn step(&self, z: f64, gaussian: f64) -> f64 {
        z * self.decay + self.sd * gaussian
    }
}

/// Switching intervals of one `(ξ, n)`; boundary points belong to the
/// switching side.
struct Rule {
    switches: Vec<(f64, f64, Regime)>,
    /// Flat with no switching left: it earns nothing from here on, so
    /// stopping the path is exact.
    absorbing: bool,
}

impl Rule {
    fn target(&self, z: f64) -> Option<Regime> {
        self.switches
            .iter()
            .find(|&&(lo, hi, _)| lo <= z && z <= hi)
            .map(|s| s.2)
    }
}

/// The store's switching policy in a form cheap to query per step.
struct Policy {
    z_max: f64,
    cost_k: f64,
    /// `f(z, ξ) = -(ξ·linear·z + |ξ|·quadratic·z²)`.
    linear: f64,
    quadratic: f64,
    rules: Vec<[Rule; 3]>,
}

impl Policy {
    fn new(store: &SolutionStore) -> Self {
        let p = store.params();
        let rules = (0..=store.n_max())
            .map(|n| {
                Regime::ALL.map(|xi| {
                    let f = store.function(xi, n);
                    let switches: Vec<_> = f
                        .pieces
                        .iter()
                        .filter_map(|p| p.target().map(|t| (p.z_lo, p.z_hi, t)))
                        .collect();
                    Rule {
                        absorbing: xi == Regime::Flat && switches.is_empty(),
                        switches,
                    }
                })
            })
            .collect();
        Self {
            z_max: store.z_max(),
            cost_k: p.cost_k,
            linear: p.drift_scale(),
            quadratic: p.penalty_scale(),
            rules,
        }
    }

    fn rule(&self, xi: Regime, n: usize) -> &Rule {
        &self.rules[n][xi.index()]
    }

    fn reward(&self, z: f64, xi: Regime) -> f64 {
        let s = xi.sign();
        -(s * self.linear * z + s.abs() * self.quadratic * z * z)
    }
}

/// The policy state of one path on a fixed time grid.
struct PolicyState {
    xi: Regime,
    remaining: usize,
    discount: f64,
    step_discount: f64,
    dt: f64,
    record: SimulationRecord,
    done: bool,
}

impl PolicyState {
    fn new(cfg: &SimConfig, dt: f64, delta: f64) -> Self {
        Self {
            xi: cfg.xi0,
            remaining: cfg.n,
            discount: 1.0,
            step_discount: (-delta * dt).exp(),
            dt,
            record: SimulationRecord {
                switches: Vec::new(),
                reward: 0.0,
                costs: 0.0,
                payoff: 0.0,
                stopped_at: 0.0,
            },
            done: false,
        }
    }

    /// Switches while the state sits in a switching region, then accrues
    /// the left-endpoint reward over `[t, t + dt)`.
    fn advance(&mut self, policy: &Policy, z: f64, t: f64) -> Result<(), EvalError> {
        if !(z.abs() <= policy.z_max) {
            return Err(EvalError::OutOfDomain {
                z,
                z_max: policy.z_max,
            });
        }
        while self.remaining > 0 {
            match policy.rule(self.xi, self.remaining).target(z) {
                Some(to) => {
                    self.record.switches.push(SwitchEvent {
                        time: t,
                        z,
                        from: self.xi,
                        to,
                    });
                    self.record.costs += self.discount * policy.cost_k;
                    self.xi = to;
                    self.remaining -= 1;
                }
                None => break,
            }
        }
        if policy.rule(self.xi, self.remaining).absorbing {
            self.finish(t);
            return Ok(());
        }
        self.record.reward += self.discount * policy.reward(z, self.xi) * self.dt;
        self.discount *= self.step_discount;
        Ok(())
    }

    fn finish(&mut self, t: f64) {
        self.done = true;
        self.record.stopped_at = t;
        self.record.payoff = self.record.reward - self.record.costs;
    }
}

fn check_level(store: &SolutionStore, cfg: &SimConfig) -> Result<(), EvalError> {
    if cfg.n > store.n_max() {
        return Err(EvalError::MissingLevel {
            n: cfg.n,
            n_max: store.n_max(),
        });
    }
    Ok(())
}

fn path_rng(cfg: &SimConfig, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path_index);
    rng
}

/// One path of the boundary-triggered policy. The generator is derived
/// from `(seed, path_index)` alone.
pub fn run_policy(
    store: &SolutionStore,
    cfg: &SimConfig,
    path_index: u64,
) -> Result<SimulationRecord, EvalError> {
    check_level(store, cfg)?;
    policy_path(store, &Policy::new(store), cfg, path_index)
}

fn policy_path(
    store: &SolutionStore,
    policy: &Policy,
    cfg: &SimConfig,
    path_index: u64,
) -> Result<SimulationRecord, EvalError> {
    let ou = OuStepper::new(store.params().theta, cfg.dt);
    let mut rng = path_rng(cfg, path_index);
    let mut state = PolicyState::new(cfg, cfg.dt, store.params().delta);
    let mut z = cfg.z0;
    let steps = cfg.steps();
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        state.advance(policy, z, t)?;
        if state.done {
            return Ok(state.record);
        }
        z = ou.step(z, StandardNormal.sample(&mut rng));
    }
    state.finish(steps as f64 * cfg.dt);
    Ok(state.record)
}

/// Paired payoffs: the path simulated at `dt/2` and the same path read
/// every other step at `dt` (exact OU transitions compose).
pub fn run_policy_coupled(
    store: &SolutionStore,
    cfg: &SimConfig,
    path_index: u64,
) -> Result<(SimulationRecord, SimulationRecord), EvalError> {
    check_level(store, cfg)?;
    coupled_path(store, &Policy::new(store), cfg, path_index)
}

fn coupled_path(
    store: &SolutionStore,
    policy: &Policy,
    cfg: &SimConfig,
    path_index: u64,
) -> Result<(SimulationRecord, SimulationRecord), EvalError> {
    let delta = store.params().delta;
    let mut rng = path_rng(cfg, path_index);
    let h = 0.5 * cfg.dt;
    let ou = OuStepper::new(store.params().theta, h);
    let mut fine = PolicyState::new(cfg, h, delta);
    let mut coarse = PolicyState::new(cfg, cfg.dt, delta);
    let mut z = cfg.z0;
    let steps = 2 * cfg.steps();
    for k in 0..steps {
        let t = k as f64 * h;
        if !fine.done {
            fine.advance(policy, z, t)?;
        }
        if k % 2 == 0 && !coarse.done {
            coarse.advance(policy, z, t)?;
        }
        if fine.done && coarse.done {
            break;
        }
        z = ou.step(z, StandardNormal.sample(&mut rng));
    }
    let end = steps as f64 * h;
    for s in [&mut fine, &mut coarse] {
        if !s.done {
            s.finish(end);
        }
    }
    Ok((fine.record, coarse.record))
}

/// Neumaier-compensated sum in slice order.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(xs.iter().map(|x| (x - mean).powi(2))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// `e^{-δ·horizon}·sup|v|` over the store's grid.
    pub truncation_bound: f64,
    pub paths: usize,
    pub mean_switches: f64,
}

/// `sup |v(z, ξ, m)|` over a uniform grid, all regimes and `m ≤ n`.
fn sup_value(store: &SolutionStore, n: usize) -> Result<f64, EvalError> {
    let zm = store.z_max();
    let mut sup = 0.0f64;
    for i in 0..=1600 {
        let z = -zm + 2.0 * zm * i as f64 / 1600.0;
        for m in 0..=n {
            for xi in Regime::ALL {
                sup = sup.max(store.evaluate(z, xi, m)?.abs());
            }
        }
    }
    Ok(sup)
}

fn truncation_bound(store: &SolutionStore, cfg: &SimConfig) -> Result<f64, EvalError> {
    Ok((-store.params().delta * cfg.horizon).exp() * sup_value(store, cfg.n)?)
}

/// Sample mean and standard error of the payoff over `cfg.paths` paths.
/// The reduction runs in path order, so the result does not depend on
/// scheduling.
pub fn mc_value(store: &SolutionStore, cfg: &SimConfig) -> Result<McEstimate, EvalError> {
    check_level(store, cfg)?;
    let policy = Policy::new(store);
    let records: Vec<(f64, usize)> = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|i| policy_path(store, &policy, cfg, i).map(|r| (r.payoff, r.switches.len())))
        .collect::<Result<_, _>>()?;
    let payoffs: Vec<f64> = records.iter().map(|r| r.0).collect();
    let (mean, stderr) = mean_stderr(&payoffs);
    let switches = compensated_sum(records.iter().map(|r| r.1 as f64)) / cfg.paths as f64;
    Ok(McEstimate {
        mean,
        stderr,
        truncation_bound: truncation_bound(store, cfg)?,
        paths: cfg.paths,
        mean_switches: switches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DtCalibration {
    pub fine: McEstimate,
    pub coarse: McEstimate,
    /// Mean of coarse minus fine payoff over paired paths.
    pub difference: f64,
    pub difference_stderr: f64,
    /// Bias allowance for a run at `dt`: `2|Δ| + 3·se(Δ)` (first-order bias
    /// at `dt` is twice the coarse-fine difference).
    pub allowance: f64,
}

/// Estimates the time-step bias at `cfg.dt` from one run at `dt/2`.
pub fn dt_calibration(store: &SolutionStore, cfg: &SimConfig) -> Result<DtCalibration, EvalError> {
    check_level(store, cfg)?;
    let policy = Policy::new(store);
    let pairs: Vec<(SimulationRecord, SimulationRecord)> = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|i| coupled_path(store, &policy, cfg, i))
        .collect::<Result<_, _>>()?;
    let bound = truncation_bound(store, cfg)?;
    let est = |pick: &dyn Fn(&(SimulationRecord, SimulationRecord)) -> &SimulationRecord| {
        let xs: Vec<f64> = pairs.iter().map(|p| pick(p).payoff).collect();
        let (mean, stderr) = mean_stderr(&xs);
        let switches =
            compensated_sum(pairs.iter().map(|p| pick(p).switches.len() as f64)) / xs.len() as f64;
        McEstimate {
            mean,
            stderr,
            truncation_bound: bound,
            paths: xs.len(),
            mean_switches: switches,
        }
    };
    let fine = est(&|p| &p.0);
    let coarse = est(&|p| &p.1);
    let diffs: Vec<f64> = pairs.iter().map(|p| p.1.payoff - p.0.payoff).collect();
    let (difference, difference_stderr) = mean_stderr(&diffs);
    Ok(DtCalibration {
        fine,
        coarse,
        difference,
        difference_stderr,
        allowance: 2.0 * difference.abs() + 3.0 * difference_stderr,
    })
}
