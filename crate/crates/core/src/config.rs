//! Run configuration: one TOML document covering world generation, sensor,
//! network, kinematics, MPC, costs, training, controllers and benchmarks.
//!
//! Every section has defaults, unknown keys are rejected, and `key.path=value`
//! overrides are applied to the parsed document before it is checked.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::blo_cost::CostWeights;
use crate::dmpc::{MpcWeights, SolverOptions};
use crate::envsim::{Archetype, GenerationParams, SensorConfig};
use crate::error::{Error, Result};
use crate::kinematics::{ControlBounds, KinematicModel, ModelKind};
use crate::nnplanner::Architecture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub world: GenerationParams,
    pub sensor: SensorConfig,
    pub network: Architecture,
    pub model: ModelConfig,
    pub mpc: MpcConfig,
    pub costs: CostWeights,
    pub train: TrainConfig,
    pub controller: ControllerConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            world: GenerationParams::default(),
            sensor: SensorConfig::default(),
            network: Architecture::default(),
            model: ModelConfig::default(),
            mpc: MpcConfig::default(),
            costs: CostWeights::default(),
            train: TrainConfig::default(),
            controller: ControllerConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Kinematic model used inside the training MPC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dt: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Turn-rate bound for Dubins/unicycle; ignored for the bicycle.
    pub u_max: f64,
    pub wheelbase: f64,
    /// Minimum turning radius of the bicycle.
    pub r_min: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Bicycle,
            dt: 0.1,
            v_min: 0.0,
            v_max: 1.5,
            u_max: 1.0,
            wheelbase: 0.5,
            r_min: 1.48,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<KinematicModel> {
        match self.kind {
            ModelKind::Bicycle => KinematicModel::bicycle(self.dt, self.wheelbase, self.r_min, self.v_min, self.v_max),
            kind => KinematicModel::new(
                kind,
                self.dt,
                ControlBounds {
                    v_min: self.v_min,
                    v_max: self.v_max,
                    u_max: self.u_max,
                },
                self.wheelbase,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Diagonal of the stage state weight, `(x, y, psi)`.
    pub q: [f64; 3],
    pub r: [f64; 2],
    /// Terminal weight as a multiple of `q`.
    pub terminal_scale: f64,
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self {
            q: [1.0, 1.0, 0.25],
            r: [0.1, 0.1],
            terminal_scale: 10.0,
            max_iterations: o.max_iterations,
            rel_tol: o.rel_tol,
            grad_tol: o.grad_tol,
        }
    }
}

impl MpcConfig {
    pub fn weights(&self) -> MpcWeights {
        MpcWeights::diagonal(self.q, self.r, self.terminal_scale)
    }

    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            rel_tol: self.rel_tol,
            grad_tol: self.grad_tol,
            ..SolverOptions::default()
        }
    }

    pub fn state_weight(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.q))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

/// Relative frequency of each archetype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchetypeMix {
    pub forest: f64,
    pub garage: f64,
    pub indoor: f64,
    pub campus: f64,
}

impl Default for ArchetypeMix {
    fn default() -> Self {
        Self {
            forest: 0.25,
            garage: 0.25,
            indoor: 0.25,
            campus: 0.25,
        }
    }
}

impl ArchetypeMix {
    pub fn weight(&self, a: Archetype) -> f64 {
        match a {
            Archetype::Forest => self.forest,
            Archetype::Garage => self.garage,
            Archetype::Indoor => self.indoor,
            Archetype::Campus => self.campus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w: Vec<f64> = Archetype::ALL.iter().map(|a| self.weight(*a)).collect();
        if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("archetype mix must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    /// Splits `n` items over the archetypes by largest remainder, in
    /// archetype order.
    pub fn counts(&self, n: usize) -> Vec<(Archetype, usize)> {
        let raw: Vec<f64> = Archetype::ALL.iter().map(|a| self.weight(*a) * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let mut left = n - counts.iter().sum::<usize>();
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        Archetype::ALL.iter().copied().zip(counts).collect()
    }

    /// Picks an archetype from a uniform draw `u` in `[0, 1)`.
    pub fn pick(&self, u: f64) -> Archetype {
        let mut acc = 0.0;
        for a in Archetype::ALL {
            acc += self.weight(a);
            if u < acc {
                return a;
            }
        }
        *Archetype::ALL
            .iter()
            .rev()
            .find(|a| self.weight(**a) > 0.0)
            .unwrap_or(&Archetype::Campus)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub batch: usize,
    /// MPC and reference horizon `T`.
    pub horizon: usize,
    pub mix: ArchetypeMix,
    /// Geometric ablation: no MPC in the graph and no tracking term.
    pub geometric_only: bool,
    /// 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Abort a step when more than this fraction of the batch fails.
    pub max_failure_rate: f64,
    /// Worlds generated once and reused with fresh start/goal pairs.
    pub pool_worlds: usize,
    /// Size of the held-out evaluation suite.
    pub eval_scenarios: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 2000,
            batch: 16,
            horizon: 50,
            mix: ArchetypeMix::default(),
            geometric_only: false,
            checkpoint_every: 500,
            max_failure_rate: 0.2,
            pool_worlds: 32,
            eval_scenarios: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Simulated robot: bicycle with this radius and wheelbase.
    pub r_min: f64,
    pub wheelbase: f64,
    pub v_max: f64,
    pub dt: f64,
    pub lookahead: f64,
    pub heading_kp: f64,
    pub heading_ki: f64,
    pub heading_kd: f64,
    pub speed_kp: f64,
    /// Floor on the reference speed the trackers follow, m/s.
    pub min_speed: f64,
    pub mpc_horizon: usize,
    pub goal_tolerance: f64,
    /// Seconds of simulated time.
    pub timeout: f64,
    pub replan_period: f64,
    pub deadlock_window: f64,
    pub deadlock_progress: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            r_min: 1.48,
            wheelbase: 0.5,
            v_max: 1.5,
            dt: 0.1,
            lookahead: 0.5,
            heading_kp: 2.0,
            heading_ki: 0.0,
            heading_kd: 0.2,
            speed_kp: 1.0,
            min_speed: 0.3,
            mpc_horizon: 10,
            goal_tolerance: 0.3,
            timeout: 60.0,
            replan_period: 0.4,
            deadlock_window: 5.0,
            deadlock_progress: 0.1,
        }
    }
}

impl ControllerConfig {
    pub fn robot(&self) -> Result<KinematicModel> {
        KinematicModel::bicycle(self.dt, self.wheelbase, self.r_min, 0.0, self.v_max)
    }

    pub fn with_radius(&self, r_min: f64) -> Self {
        Self { r_min, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub tracking_scenarios: usize,
    pub navigation_episodes: usize,
    pub radii: Vec<f64>,
    pub mix: ArchetypeMix,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tracking_scenarios: 200,
            navigation_episodes: 100,
            radii: vec![0.5, 1.0, 1.48, 2.0, 3.0],
            mix: ArchetypeMix::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Parses a document, applies `key.path=value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::parse(&self.to_toml(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.network.validate()?;
        self.costs.validate()?;
        self.model.build()?;
        self.controller.robot()?;
        self.mpc.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.mix.validate()?;
        self.bench.mix.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sensor.beams != self.network.n_beams {
            return bad("sensor.beams must equal network.n_beams");
        }
        if !(self.sensor.max_range > 0.0) || !(self.sensor.fov_deg > 0.0 && self.sensor.fov_deg <= 360.0) {
            return bad("sensor range and field of view must be positive");
        }
        let t = &self.train;
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return bad("train.lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        if t.batch == 0 || t.horizon < 2 || t.pool_worlds == 0 {
            return bad("train.batch, train.pool_worlds must be >= 1 and train.horizon >= 2");
        }
        if !(0.0..=1.0).contains(&t.max_failure_rate) {
            return bad("train.max_failure_rate must lie in [0, 1]");
        }
        let c = &self.controller;
        if !(c.min_speed >= 0.0 && c.min_speed <= c.v_max) {
            return bad("controller.min_speed must lie in [0, v_max]");
        }
        if c.mpc_horizon == 0 || !(c.lookahead > 0.0) || !(c.goal_tolerance > 0.0) || !(c.dt > 0.0) {
            return bad("controller horizon, lookahead, tolerance and dt must be positive");
        }
        if !(c.replan_period >= c.dt) || !(c.timeout > 0.0) || !(c.deadlock_window > 0.0) {
            return bad("controller timing parameters");
        }
        if self.bench.radii.iter().any(|r| !(*r > 0.0)) || self.bench.radii.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bench.radii must be positive and strictly ascending");
        }
        Ok(())
    }

    /// Scales the body-frame goal before it enters the network.
    pub fn goal_scale(&self) -> f64 {
        1.0 / self.sensor.max_range
    }
}

/// Named consumers of the root seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const POOL: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const BENCH: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for item `index` of consumer `stream`.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(root) ^ stream) ^ index)
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {key:?}: {p:?} is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
