//! Self-supervised bi-level training.
//!
//! Per sample: range scan -> network -> reference interpolation -> MPC ->
//! upper-level cost. The gradient w.r.t. the network parameters is
//!
//! ```text
//! dU/dθ = (dU/dμ + dU/dτ* · dτ*/dτ · dτ/dμ + dU/dτ · dτ/dμ) dμ/dθ + dU/dlogit · dlogit/dθ
//! ```
//!
//! where `τ` is the interpolated reference and `τ*` the MPC optimum. No
//! labels enter anywhere: the only inputs are scans, poses and goals.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blo_cost::{self, CostBreakdown, CostWeights};
use crate::config::{derive_seed, stream, Config, Optimizer, TrainConfig};
use crate::dmpc::{MpcProblem, MpcSolution, MpcWeights, SolverOptions};
use crate::envsim::{self, Archetype, OccupancyGrid, Scenario, SensorConfig};
use crate::error::{Error, Result};
use crate::esdf::{EsdfGrid, ProximityCost};
use crate::kinematics::{Control2, KinematicModel};
use crate::nnplanner::{Cache, PlannerParams};
use crate::refpath::{self, ReferenceTrajectory, Waypoints};
use crate::se2::Pose2;

/// A world with its distance field, shared between samples.
#[derive(Clone, Debug)]
pub struct World {
    pub archetype: Archetype,
    pub seed: u64,
    pub grid: Arc<OccupancyGrid>,
    pub esdf: Arc<EsdfGrid>,
}

impl World {
    pub fn generate(archetype: Archetype, seed: u64, cfg: &Config) -> Result<Self> {
        let grid = envsim::generate_world(archetype, seed, &cfg.world)?;
        let esdf = EsdfGrid::build(&grid);
        Ok(Self {
            archetype,
            seed,
            grid: Arc::new(grid),
            esdf: Arc::new(esdf),
        })
    }
}

/// Everything the planner sees for one query, plus the world used to score it.
#[derive(Clone, Debug)]
pub struct PlanningSample {
    pub scenario: Scenario,
    pub esdf: Arc<EsdfGrid>,
    /// Normalized range scan at the start pose.
    pub scan: Vec<f64>,
    /// Goal in the start pose's frame.
    pub goal: Vector2<f64>,
}

impl PlanningSample {
    pub fn new(scenario: Scenario, esdf: Arc<EsdfGrid>, sensor: &SensorConfig) -> Result<Self> {
        Self::at_pose(scenario.start, scenario, esdf, sensor)
    }

    /// Query from an arbitrary pose of the scenario (used when replanning).
    pub fn at_pose(pose: Pose2, mut scenario: Scenario, esdf: Arc<EsdfGrid>, sensor: &SensorConfig) -> Result<Self> {
        let scan = sensor.scan(&scenario.grid, &pose)?.normalized();
        let goal = scenario.goal_in_body(&pose);
        scenario.start = pose;
        Ok(Self {
            scenario,
            esdf,
            scan,
            goal,
        })
    }

    pub fn from_world(world: &World, scenario_seed: u64, cfg: &Config) -> Result<Self> {
        let sc = envsim::sample_scenario(world.grid.clone(), world.archetype, scenario_seed, &cfg.world)?;
        Self::new(sc, world.esdf.clone(), &cfg.sensor)
    }

    pub fn frame(&self) -> &Pose2 {
        &self.scenario.start
    }
}

/// Forward products of one sample.
#[derive(Clone, Debug)]
pub struct SampleEval {
    pub waypoints: Waypoints,
    /// Interpolated reference in the planning frame.
    pub reference: Vec<Pose2>,
    /// MPC optimum (equal to `reference` in the geometric ablation).
    pub optimized: Vec<Pose2>,
    pub controls: Vec<Control2>,
    pub cost: CostBreakdown,
    pub mpc_converged: bool,
}

struct Forward {
    eval: SampleEval,
    cache: Cache,
    reference: ReferenceTrajectory,
    mpc: Option<(MpcProblem, MpcSolution)>,
}

/// Fixed settings of the per-sample computation.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub model: KinematicModel,
    pub mpc_weights: MpcWeights,
    pub solver: SolverOptions,
    pub costs: CostWeights,
    pub prox: ProximityCost,
    pub robot_radius: f64,
    pub horizon: usize,
    pub goal_scale: f64,
    pub geometric_only: bool,
}

impl Pipeline {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut costs = cfg.costs;
        if cfg.train.geometric_only {
            costs.gamma3 = 0.0;
        }
        Ok(Self {
            model: cfg.model.build()?,
            mpc_weights: cfg.mpc.weights(),
            solver: cfg.mpc.options(),
            costs,
            prox: ProximityCost::for_robot(cfg.world.robot_radius),
            robot_radius: cfg.world.robot_radius,
            horizon: cfg.train.horizon,
            goal_scale: cfg.goal_scale(),
            geometric_only: cfg.train.geometric_only,
        })
    }

    /// Waypoints and the interpolated reference, in the planning frame.
    pub fn plan(&self, params: &PlannerParams, sample: &PlanningSample) -> Result<(Waypoints, ReferenceTrajectory)> {
        let (w, _) = params.forward(&sample.scan, &sample.goal, self.goal_scale)?;
        let r = refpath::interpolate(&w, self.horizon)?;
        Ok((w, r))
    }

    fn forward(&self, params: &PlannerParams, sample: &PlanningSample) -> Result<Forward> {
        let (waypoints, cache) = params.forward(&sample.scan, &sample.goal, self.goal_scale)?;
        let reference = refpath::interpolate(&waypoints, self.horizon)?;
        let (optimized, controls, converged, mpc) = if self.geometric_only {
            (reference.states.clone(), Vec::new(), true, None)
        } else {
            let prob = MpcProblem::new(self.model, self.mpc_weights, reference.states.clone())?;
            let sol = prob.solve(&self.solver)?;
            (sol.states.clone(), sol.controls.clone(), sol.converged, Some((prob, sol)))
        };
        let frame = sample.frame();
        let colliding = blo_cost::collision_label(&sample.scenario.grid, frame, &optimized, self.robot_radius);
        let fear = blo_cost::fear_cost(cache.logit, colliding);
        let env = blo_cost::environment_cost(&sample.esdf, &self.prox, frame, &waypoints.points, &optimized);
        let traj = blo_cost::trajectory_cost(&waypoints.points, &sample.goal, &optimized, &reference.states);
        let cost = blo_cost::total(&self.costs, fear, colliding, &env, &traj);
        Ok(Forward {
            eval: SampleEval {
                waypoints,
                reference: reference.states.clone(),
                optimized,
                controls,
                cost,
                mpc_converged: converged,
            },
            cache,
            reference,
            mpc,
        })
    }

    pub fn evaluate(&self, params: &PlannerParams, sample: &PlanningSample) -> Result<SampleEval> {
        Ok(self.forward(params, sample)?.eval)
    }

    /// Cost and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, params: &PlannerParams, sample: &PlanningSample) -> Result<(SampleEval, PlannerParams)> {
        let f = self.forward(params, sample)?;
        let c = &f.eval.cost;
        let mut grad_ref: Vec<Vector3<f64>> = match &f.mpc {
            Some((prob, sol)) => prob.backward(sol, &c.grad_states, &self.solver)?,
            None => c.grad_states.clone(),
        };
        for (g, d) in grad_ref.iter_mut().zip(&c.grad_ref) {
            *g += d;
        }
        let mut grad_points = f.reference.vjp(&grad_ref);
        for (g, d) in grad_points.iter_mut().zip(&c.grad_points) {
            *g += d;
        }
        let mut grads = params.zeros_like();
        params.backward(&f.cache, &grad_points, c.grad_logit, &mut grads)?;
        Ok((f.eval, grads))
    }
}

/// Adam or SGD state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

const OPT_MAGIC: &[u8; 4] = b"KPOS";
const OPT_VERSION: u8 = 1;

impl OptimizerState {
    pub fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn apply(&mut self, params: &mut PlannerParams, grad: &PlannerParams, cfg: &TrainConfig) {
        assert_eq!(params.values.len(), grad.values.len());
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => params.add_scaled(grad, -cfg.lr),
            Optimizer::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                for (i, p) in params.values.iter_mut().enumerate() {
                    let g = grad.values[i];
                    self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                    self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }

    /// `KPOS`, version byte, kind byte, step (u64), length (u64), then `m`
    /// and `v` as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(OPT_MAGIC)?;
        w.write_all(&[OPT_VERSION, matches!(self.kind, Optimizer::Sgd) as u8])?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for x in self.m.iter().chain(&self.v) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("optimizer state: {m}"));
        let mut head = [0u8; 22];
        r.read_exact(&mut head).map_err(|_| fmt("truncated header"))?;
        if &head[..4] != OPT_MAGIC {
            return Err(fmt("bad magic"));
        }
        if head[4] != OPT_VERSION {
            return Err(fmt("unsupported version"));
        }
        let kind = match head[5] {
            0 => Optimizer::Adam,
            1 => Optimizer::Sgd,
            _ => return Err(fmt("unknown optimizer")),
        };
        let step = u64::from_le_bytes(head[6..14].try_into().expect("8 bytes"));
        let n = u64::from_le_bytes(head[14..22].try_into().expect("8 bytes")) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(|_| fmt("unreadable body"))?;
        if body.len() != 16 * n {
            return Err(fmt("length mismatch"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            kind,
            step,
            m: vals[..n].to_vec(),
            v: vals[n..].to_vec(),
        })
    }
}

/// One CSV row per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub iteration: usize,
    pub total: f64,
    pub fear: f64,
    pub environment: f64,
    pub goal: f64,
    pub straightness: f64,
    pub tracking: f64,
    pub mpc_converged: f64,
    pub collision_rate: f64,
    pub grad_norm: f64,
    pub samples: usize,
    pub failed: usize,
    pub clamped: usize,
    pub wall_time: f64,
}

/// Aggregate of a batch or an evaluation suite.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteStats {
    pub total: f64,
    pub fear: f64,
    pub environment: f64,
    pub goal: f64,
    pub straightness: f64,
    pub tracking: f64,
    pub mpc_converged: f64,
    pub collision_rate: f64,
    pub samples: usize,
    pub failed: usize,
    pub clamped: usize,
}

impl SuiteStats {
    fn gather<'a>(evals: impl Iterator<Item = &'a SampleEval>, failed: usize) -> Self {
        let mut s = Self {
            failed,
            ..Self::default()
        };
        for e in evals {
            let c = &e.cost;
            s.total += c.total;
            s.fear += c.fear;
            s.environment += c.environment;
            s.goal += c.trajectory_goal;
            s.straightness += c.trajectory_straightness;
            s.tracking += c.trajectory_tracking;
            s.mpc_converged += e.mpc_converged as u8 as f64;
            s.collision_rate += c.colliding as u8 as f64;
            s.clamped += c.clamped;
            s.samples += 1;
        }
        let n = s.samples.max(1) as f64;
        for x in [
            &mut s.total,
            &mut s.fear,
            &mut s.environment,
            &mut s.goal,
            &mut s.straightness,
            &mut s.tracking,
            &mut s.mpc_converged,
            &mut s.collision_rate,
        ] {
            *x /= n;
        }
        s
    }
}

/// Mean cost and collision rate of `params` over a fixed suite.
pub fn evaluate_suite(pipeline: &Pipeline, params: &PlannerParams, suite: &[PlanningSample]) -> SuiteStats {
    let results: Vec<Result<SampleEval>> = suite.par_iter().map(|s| pipeline.evaluate(params, s)).collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    SuiteStats::gather(results.iter().filter_map(|r| r.as_ref().ok()), failed)
}

/// Training worlds, generated once from the root seed.
#[derive(Clone, Debug)]
pub struct ScenarioPool {
    pub worlds: Vec<World>,
}

impl ScenarioPool {
    pub fn build(cfg: &Config) -> Result<Self> {
        let mut specs = Vec::new();
        for (a, n) in cfg.train.mix.counts(cfg.train.pool_worlds) {
            for _ in 0..n {
                specs.push((a, derive_seed(cfg.seed, stream::POOL, specs.len() as u64)));
            }
        }
        let worlds = specs
            .par_iter()
            .map(|(a, s)| World::generate(*a, *s, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { worlds })
    }

    /// The batch for `iteration`, a pure function of the seed and iteration.
    pub fn batch(&self, cfg: &Config, iteration: usize) -> Vec<PlanningSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::BATCH, iteration as u64));
        let mut out = Vec::with_capacity(cfg.train.batch);
        let mut attempts = 0;
        while out.len() < cfg.train.batch && attempts < 20 * cfg.train.batch {
            attempts += 1;
            let a = cfg.train.mix.pick(rng.random());
            let of_kind: Vec<&World> = self.worlds.iter().filter(|w| w.archetype == a).collect();
            let pick = rng.random::<u64>();
            let world = if of_kind.is_empty() {
                &self.worlds[(pick % self.worlds.len() as u64) as usize]
            } else {
                of_kind[(pick % of_kind.len() as u64) as usize]
            };
            match PlanningSample::from_world(world, rng.random(), cfg) {
                Ok(s) => out.push(s),
                Err(e) => debug!("skipping scenario: {e}"),
            }
        }
        out
    }
}

/// Held-out scenarios on worlds never used for training.
pub fn held_out_suite(cfg: &Config, n: usize) -> Result<Vec<PlanningSample>> {
    let specs: Vec<(Archetype, usize)> = cfg
        .train
        .mix
        .counts(n)
        .into_iter()
        .flat_map(|(a, c)| std::iter::repeat_n(a, c))
        .enumerate()
        .map(|(i, a)| (a, i))
        .collect();
    specs
        .par_iter()
        .map(|(a, i)| {
            let seed = derive_seed(cfg.seed, stream::EVAL, *i as u64);
            let world = World::generate(*a, seed, cfg)?;
            PlanningSample::from_world(&world, seed, cfg)
        })
        .collect()
}

/// Training state: parameters, optimizer and iteration counter.
pub struct Trainer {
    pub cfg: Config,
    pub pipeline: Pipeline,
    pub pool: ScenarioPool,
    pub params: PlannerParams,
    pub optimizer: OptimizerState,
    pub iteration: usize,
}

pub fn checkpoint_paths(dir: &Path, iteration: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("ckpt-{iteration:06}.params")),
        dir.join(format!("ckpt-{iteration:06}.optim")),
    )
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        let pipeline = Pipeline::from_config(&cfg)?;
        let params = PlannerParams::init(cfg.network, derive_seed(cfg.seed, stream::INIT, 0))?;
        let optimizer = OptimizerState::new(cfg.train.optimizer, params.len());
        let pool = ScenarioPool::build(&cfg)?;
        Ok(Self {
            cfg,
            pipeline,
            pool,
            params,
            optimizer,
            iteration: 0,
        })
    }

    /// Restores parameters and optimizer state written by [`Trainer::checkpoint`].
    pub fn resume(cfg: Config, params_path: &Path) -> Result<Self> {
        if !params_path.exists() {
            return Err(Error::MissingCheckpoint(params_path.to_path_buf()));
        }
        let mut t = Self::new(cfg)?;
        let params = PlannerParams::load(params_path)?;
        if params.arch != t.cfg.network {
            return Err(Error::Config("checkpoint architecture differs from [network]".into()));
        }
        let opt_path = params_path.with_extension("optim");
        let f = std::fs::File::open(&opt_path).map_err(|_| Error::MissingCheckpoint(opt_path.clone()))?;
        let opt = OptimizerState::read_from(std::io::BufReader::new(f))?;
        if opt.m.len() != params.len() || opt.kind != t.cfg.train.optimizer {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        t.iteration = opt.step as usize;
        t.params = params;
        t.optimizer = opt;
        Ok(t)
    }

    pub fn checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let (p, o) = checkpoint_paths(dir, self.iteration);
        self.params.save(&p)?;
        let f = std::fs::File::create(&o).map_err(|e| Error::io(&o, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.optimizer.write_to(&mut w).map_err(|e| Error::io(&o, e))?;
        w.flush().map_err(|e| Error::io(&o, e))?;
        Ok(p)
    }

    /// One optimizer step on the batch for the current iteration.
    pub fn step(&mut self) -> Result<TrainingRecord> {
        let started = Instant::now();
        let batch = self.pool.batch(&self.cfg, self.iteration);
        let pipeline = &self.pipeline;
        let params = &self.params;
        let results: Vec<Result<(SampleEval, PlannerParams)>> =
            batch.par_iter().map(|s| pipeline.loss_and_grad(params, s)).collect();
        let mut grad = params.zeros_like();
        let mut kept = Vec::new();
        let mut failed = 0;
        let mut last_err = String::from("empty batch");
        for r in results {
            match r {
                Ok((e, g)) if g.is_finite() && e.cost.total.is_finite() => {
                    grad.add_scaled(&g, 1.0);
                    kept.push(e);
                }
                Ok(_) => {
                    failed += 1;
                    last_err = "non-finite gradient".into();
                    warn!("iteration {}: non-finite gradient, sample skipped", self.iteration);
                }
                Err(e) => {
                    failed += 1;
                    last_err = e.to_string();
                    debug!("iteration {}: sample failed: {e}", self.iteration);
                }
            }
        }
        let total = kept.len() + failed + (self.cfg.train.batch - batch.len());
        failed += self.cfg.train.batch - batch.len();
        if kept.is_empty() {
            return Err(Error::AllSamplesFailed(last_err));
        }
        if failed as f64 > self.cfg.train.max_failure_rate * total as f64 {
            return Err(Error::BatchFailureRate { failed, total });
        }
        let n = kept.len() as f64;
        grad.values.iter_mut().for_each(|g| *g /= n);
        let grad_norm = grad.norm();
        self.optimizer.apply(&mut self.params, &grad, &self.cfg.train);
        let stats = SuiteStats::gather(kept.iter(), failed);
        let record = TrainingRecord {
            iteration: self.iteration,
            total: stats.total,
            fear: stats.fear,
            environment: stats.environment,
            goal: stats.goal,
            straightness: stats.straightness,
            tracking: stats.tracking,
            mpc_converged: stats.mpc_converged,
            collision_rate: stats.collision_rate,
            grad_norm,
            samples: stats.samples,
            failed,
            clamped: stats.clamped,
            wall_time: started.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Runs to `cfg.train.iterations`, appending records to `<dir>/train.csv`
    /// and writing checkpoints at the configured cadence when `dir` is given.
    pub fn run(&mut self, dir: Option<&Path>) -> Result<Vec<TrainingRecord>> {
        let mut writer = match dir {
            Some(d) => {
                let path = d.join("train.csv");
                let append = self.iteration > 0 && path.exists();
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((csv::WriterBuilder::new().has_headers(!append).from_writer(f), path))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < self.cfg.train.iterations {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    if let Some(d) = dir {
                        self.checkpoint(d)?;
                    }
                    return Err(e);
                }
            };
            if rec.iteration % 50 == 0 {
                info!(
                    "iter {:5}  U {:.4}  goal {:.3}  env {:.4}  track {:.4}  coll {:.2}  |g| {:.3e}",
                    rec.iteration, rec.total, rec.goal, rec.environment, rec.tracking, rec.collision_rate, rec.grad_norm
                );
            }
            if let Some((w, path)) = writer.as_mut() {
                w.serialize(&rec).map_err(|e| Error::io(path.as_path(), e.into()))?;
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            records.push(rec);
            let every = self.cfg.train.checkpoint_every;
            if let Some(d) = dir {
                if every > 0 && self.iteration % every == 0 {
                    self.checkpoint(d)?;
                }
            }
        }
        if let Some(d) = dir {
            self.params.save(&d.join("final.params"))?;
        }
        Ok(records)
    }
}

/// Runs `f` on a worker pool of `jobs` threads (0: all cores).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
