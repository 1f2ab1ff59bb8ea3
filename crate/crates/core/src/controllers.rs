//! Tracking controllers and closed-loop navigation on a simulated bicycle.
//!
//! Tracking error is the distance from each executed position to the
//! nearest point of the reference polyline, averaged over executed steps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::config::{ControllerConfig, MpcConfig};
use crate::dmpc::{MpcProblem, MpcWeights, SolverOptions};
use crate::envsim::{OccupancyGrid, Scenario, SensorConfig};
use crate::error::{Error, Result};
use crate::esdf::EsdfGrid;
use crate::kinematics::{Control2, KinematicModel, Trajectory};
use crate::nnplanner::PlannerParams;
use crate::se2::{wrap_angle, Pose2};
use crate::training::{PlanningSample, Pipeline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Reached,
    Collision,
    Deadlock,
    Timeout,
    Infeasible,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Reached => "reached",
            Outcome::Collision => "collision",
            Outcome::Deadlock => "deadlock",
            Outcome::Timeout => "timeout",
            Outcome::Infeasible => "infeasible",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Pid,
    Mpc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 2] = [ControllerKind::Pid, ControllerKind::Mpc];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Pid => "pid",
            ControllerKind::Mpc => "mpc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pid" => Ok(ControllerKind::Pid),
            "mpc" => Ok(ControllerKind::Mpc),
            other => Err(Error::Config(format!("unknown controller {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExecutionResult {
    /// Executed states; `states.len() == controls.len() + 1`.
    pub trajectory: Trajectory,
    /// Tracking error after each executed step.
    pub errors: Vec<f64>,
    pub outcome: Outcome,
    pub wall_time: f64,
    /// Every reference handed to the tracker, in the world frame.
    pub references: Vec<Vec<Pose2>>,
    /// Worst curvature and defect over the tracking MPC's solutions.
    pub mpc_feasibility: Feasibility,
}

/// Running worst case of kinematic checks over a set of trajectories.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Feasibility {
    pub trajectories: usize,
    pub max_curvature: f64,
    pub max_defect: f64,
}

/// Steps shorter than this are skipped by the geometric curvature check.
pub const MIN_CURVATURE_STEP: f64 = 1e-6;

impl Feasibility {
    pub fn record(&mut self, traj: &Trajectory, model: &KinematicModel) {
        let analytic = traj.controls.iter().map(|c| model.curvature(c)).fold(0.0, f64::max);
        let geometric = traj.max_step_curvature(MIN_CURVATURE_STEP);
        self.trajectories += 1;
        self.max_curvature = self.max_curvature.max(analytic).max(geometric);
        self.max_defect = self.max_defect.max(traj.max_defect(model));
    }

    pub fn merge(&mut self, other: &Feasibility) {
        self.trajectories += other.trajectories;
        self.max_curvature = self.max_curvature.max(other.max_curvature);
        self.max_defect = self.max_defect.max(other.max_defect);
    }
}

impl ExecutionResult {
    pub fn mean_error(&self) -> f64 {
        if self.errors.is_empty() {
            0.0
        } else {
            self.errors.iter().sum::<f64>() / self.errors.len() as f64
        }
    }

    pub fn steps(&self) -> usize {
        self.trajectory.controls.len()
    }

    /// CSV with columns `t,x,y,psi,v,delta,error`; row 0 is the start.
    pub fn write_trace<W: Write>(&self, w: W, dt: f64) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Format(format!("trace: {e}"));
        for (i, s) in self.trajectory.states.iter().enumerate() {
            let (v, d, e) = if i == 0 {
                (0.0, 0.0, 0.0)
            } else {
                let c = self.trajectory.controls[i - 1];
                (c.v, c.u, self.errors[i - 1])
            };
            wr.serialize(TraceRow {
                t: i as f64 * dt,
                x: s.x,
                y: s.y,
                psi: s.psi,
                v,
                delta: d,
                error: e,
            })
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Format(format!("trace: {e}")))?;
        Ok(())
    }

    pub fn save_trace(&self, path: &Path, dt: f64) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_trace(std::io::BufWriter::new(f), dt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub delta: f64,
    pub error: f64,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    rd.deserialize()
        .collect::<std::result::Result<Vec<TraceRow>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// A time-indexed reference seen as an arc-length parameterized polyline.
#[derive(Clone, Debug)]
pub struct ReferencePath {
    pub poses: Vec<Pose2>,
    /// Cumulative arc length at each pose.
    pub s: Vec<f64>,
    pub dt: f64,
}

impl ReferencePath {
    pub fn new(poses: Vec<Pose2>, dt: f64) -> Self {
        assert!(!poses.is_empty(), "reference needs at least one pose");
        let mut s = vec![0.0];
        for w in poses.windows(2) {
            let d = (w[1].translation() - w[0].translation()).norm();
            s.push(s.last().expect("non-empty") + d);
        }
        Self { poses, s, dt }
    }

    pub fn length(&self) -> f64 {
        *self.s.last().expect("non-empty")
    }

    pub fn end(&self) -> Vector2<f64> {
        self.poses.last().expect("non-empty").translation()
    }

    /// Distance to the nearest point of the polyline and that point's arc length.
    pub fn nearest(&self, p: &Vector2<f64>) -> (f64, f64) {
        if self.poses.len() == 1 {
            return ((p - self.end()).norm(), 0.0);
        }
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.poses.len() - 1 {
            let a = self.poses[i].translation();
            let b = self.poses[i + 1].translation();
            let d = b - a;
            let l2 = d.norm_squared();
            let t = if l2 > 0.0 { ((p - a).dot(&d) / l2).clamp(0.0, 1.0) } else { 0.0 };
            let dist = (a + t * d - p).norm();
            if dist < best.0 {
                best = (dist, self.s[i] + t * (self.s[i + 1] - self.s[i]));
            }
        }
        best
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.poses.len();
        if n == 1 {
            return 0;
        }
        let i = self.s.partition_point(|x| *x <= s);
        i.saturating_sub(1).min(n - 2)
    }

    /// Pose at arc length `s` (clamped): linear position, segment heading.
    pub fn pose_at(&self, s: f64) -> Pose2 {
        let s = s.clamp(0.0, self.length());
        if self.poses.len() == 1 {
            return self.poses[0];
        }
        let i = self.segment(s);
        let (a, b) = (self.poses[i], self.poses[i + 1]);
        let len = self.s[i + 1] - self.s[i];
        if len <= 1e-9 {
            return b;
        }
        let t = (s - self.s[i]) / len;
        let p = a.translation() + t * (b.translation() - a.translation());
        let d = b.translation() - a.translation();
        Pose2::new(p.x, p.y, d.y.atan2(d.x))
    }

    /// Reference speed on the segment containing `s`.
    pub fn speed_at(&self, s: f64) -> f64 {
        if self.poses.len() == 1 {
            return 0.0;
        }
        let i = self.segment(s.clamp(0.0, self.length()));
        (self.s[i + 1] - self.s[i]) / self.dt
    }
}

/// Closed-loop tracker state.
pub enum Tracker {
    Pid { integral: f64, prev_error: Option<f64> },
    Mpc { warm: Vec<Control2>, feasibility: Feasibility },
}

impl Tracker {
    pub fn new(kind: ControllerKind) -> Self {
        match kind {
            ControllerKind::Pid => Tracker::Pid {
                integral: 0.0,
                prev_error: None,
            },
            ControllerKind::Mpc => Tracker::Mpc {
                warm: Vec::new(),
                feasibility: Feasibility::default(),
            },
        }
    }

    pub fn feasibility(&self) -> Feasibility {
        match self {
            Tracker::Pid { .. } => Feasibility::default(),
            Tracker::Mpc { feasibility, .. } => *feasibility,
        }
    }

    /// Drops state tied to the previous reference.
    pub fn reset(&mut self) {
        match self {
            Tracker::Pid { integral, prev_error } => {
                *integral = 0.0;
                *prev_error = None;
            }
            Tracker::Mpc { warm, .. } => warm.clear(),
        }
    }

    /// Next control. `v_prev` is the speed applied at the previous step.
    pub fn control(
        &mut self,
        pose: &Pose2,
        v_prev: f64,
        path: &ReferencePath,
        robot: &KinematicModel,
        cfg: &ControllerConfig,
        mpc: &MpcSettings,
    ) -> Result<Control2> {
        let p = pose.translation();
        let (_, s_near) = path.nearest(&p);
        match self {
            Tracker::Pid { integral, prev_error } => {
                let target = path.pose_at(s_near + cfg.lookahead).translation();
                let to = target - p;
                let e = if to.norm() < 1e-9 { 0.0 } else { wrap_angle(to.y.atan2(to.x) - pose.psi) };
                *integral += e * cfg.dt;
                let de = prev_error.map_or(0.0, |pe| wrap_angle(e - pe) / cfg.dt);
                *prev_error = Some(e);
                let delta = cfg.heading_kp * e + cfg.heading_ki * *integral + cfg.heading_kd * de;
                let v_ref = if path.length() - s_near <= 1e-9 { 0.0 } else { path.speed_at(s_near).max(cfg.min_speed) };
                let v = v_prev + cfg.speed_kp * (v_ref - v_prev);
                Ok(robot.bounds.clamp(Control2::new(v, delta)))
            }
            Tracker::Mpc { warm, feasibility } => {
                let h = cfg.mpc_horizon;
                let v_ref = path.speed_at(s_near).max(cfg.min_speed);
                let window: Vec<Pose2> = (0..=h).map(|j| path.pose_at(s_near + j as f64 * v_ref * cfg.dt)).collect();
                let prob = MpcProblem::with_start(*robot, mpc.weights, window, *pose)?;
                let mut init: Vec<Control2> = warm.iter().skip(1).copied().collect();
                init.resize(h, init.last().copied().unwrap_or(Control2::new(v_ref.min(robot.bounds.v_max), 0.0)));
                let sol = prob.solve_from(&init, &mpc.options)?;
                if !sol.states.iter().all(|s| s.is_finite()) {
                    return Err(Error::InvalidProblem("non-finite MPC solution".into()));
                }
                feasibility.record(
                    &Trajectory {
                        states: sol.states.clone(),
                        controls: sol.controls.clone(),
                    },
                    robot,
                );
                *warm = sol.controls.clone();
                Ok(sol.controls[0])
            }
        }
    }
}

/// Weights and solver settings of the tracking MPC.
#[derive(Clone, Debug)]
pub struct MpcSettings {
    pub weights: MpcWeights,
    pub options: SolverOptions,
}

impl MpcSettings {
    pub fn from_config(c: &MpcConfig) -> Self {
        Self {
            weights: c.weights(),
            options: c.options(),
        }
    }
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self::from_config(&MpcConfig::default())
    }
}

struct Sim<'a> {
    robot: KinematicModel,
    grid: &'a OccupancyGrid,
    radius: f64,
    states: Vec<Pose2>,
    controls: Vec<Control2>,
    errors: Vec<f64>,
}

impl Sim<'_> {
    fn pose(&self) -> Pose2 {
        *self.states.last().expect("start present")
    }

    fn advance(&mut self, c: Control2, path: &ReferencePath) -> bool {
        let next = self.robot.step(&self.pose(), &c);
        self.states.push(next);
        self.controls.push(c);
        self.errors.push(path.nearest(&next.translation()).0);
        self.grid.in_collision(&next.translation(), self.radius)
    }

    /// True when the position moved less than `min` over the last `steps`.
    fn stalled(&self, steps: usize, min: f64) -> bool {
        let n = self.states.len();
        n > steps && (self.states[n - 1].translation() - self.states[n - 1 - steps].translation()).norm() < min
    }

    fn finish(self, outcome: Outcome, started: Instant, references: Vec<Vec<Pose2>>, tracker: &Tracker) -> ExecutionResult {
        ExecutionResult {
            mpc_feasibility: tracker.feasibility(),
            trajectory: Trajectory {
                states: self.states,
                controls: self.controls,
            },
            errors: self.errors,
            outcome,
            wall_time: started.elapsed().as_secs_f64(),
            references,
        }
    }
}

fn steps_for(seconds: f64, dt: f64) -> usize {
    (seconds / dt).round().max(1.0) as usize
}

/// Tracks a time-indexed world-frame reference from `start` until the end
/// of the reference is reached or another outcome fires. Standing still is
/// not a deadlock here; it runs into the timeout.
pub fn track(
    kind: ControllerKind,
    reference: &[Pose2],
    start: &Pose2,
    grid: &OccupancyGrid,
    robot_radius: f64,
    cfg: &ControllerConfig,
    mpc: &MpcSettings,
) -> Result<ExecutionResult> {
    let started = Instant::now();
    let robot = cfg.robot()?;
    let path = ReferencePath::new(reference.to_vec(), robot.dt);
    let mut sim = Sim {
        robot,
        grid,
        radius: robot_radius,
        states: vec![*start],
        controls: Vec::new(),
        errors: Vec::new(),
    };
    let refs = vec![reference.to_vec()];
    let mut tracker = Tracker::new(kind);
    let max_steps = steps_for(cfg.timeout, cfg.dt);
    let mut v = 0.0;
    loop {
        let p = sim.pose().translation();
        if (p - path.end()).norm() <= cfg.goal_tolerance && path.nearest(&p).1 >= path.length() - cfg.goal_tolerance {
            return Ok(sim.finish(Outcome::Reached, started, refs, &tracker));
        }
        if sim.controls.len() >= max_steps {
            return Ok(sim.finish(Outcome::Timeout, started, refs, &tracker));
        }
        let c = match tracker.control(&sim.pose(), v, &path, &robot, cfg, mpc) {
            Ok(c) => c,
            Err(_) => return Ok(sim.finish(Outcome::Infeasible, started, refs, &tracker)),
        };
        v = c.v;
        if sim.advance(c, &path) {
            return Ok(sim.finish(Outcome::Collision, started, refs, &tracker));
        }
    }
}

/// Maps a planning-frame reference into the world.
pub fn to_world(frame: &Pose2, reference: &[Pose2]) -> Vec<Pose2> {
    reference.iter().map(|r| frame.compose(r)).collect()
}

/// Closed-loop navigation: replan from the current pose every
/// `replan_period` and track the latest reference.
pub fn navigate(
    params: &PlannerParams,
    pipeline: &Pipeline,
    scenario: &Scenario,
    esdf: &Arc<EsdfGrid>,
    sensor: &SensorConfig,
    kind: ControllerKind,
    cfg: &ControllerConfig,
    mpc: &MpcSettings,
) -> Result<ExecutionResult> {
    let started = Instant::now();
    let robot = cfg.robot()?;
    let mut sim = Sim {
        robot,
        grid: &scenario.grid,
        radius: pipeline.robot_radius,
        states: vec![scenario.start],
        controls: Vec::new(),
        errors: Vec::new(),
    };
    let mut refs: Vec<Vec<Pose2>> = Vec::new();
    let mut tracker = Tracker::new(kind);
    let max_steps = steps_for(cfg.timeout, cfg.dt);
    let window = steps_for(cfg.deadlock_window, cfg.dt);
    let replan = steps_for(cfg.replan_period, cfg.dt);
    let mut path: Option<ReferencePath> = None;
    let mut v = 0.0;
    loop {
        let pose = sim.pose();
        if (pose.translation() - scenario.goal).norm() <= cfg.goal_tolerance {
            return Ok(sim.finish(Outcome::Reached, started, refs, &tracker));
        }
        if sim.controls.len() >= max_steps {
            return Ok(sim.finish(Outcome::Timeout, started, refs, &tracker));
        }
        if sim.stalled(window, cfg.deadlock_progress) {
            return Ok(sim.finish(Outcome::Deadlock, started, refs, &tracker));
        }
        if sim.controls.len() % replan == 0 {
            let sample = PlanningSample::at_pose(pose, scenario.clone(), esdf.clone(), sensor)?;
            path = match pipeline.plan(params, &sample) {
                Ok((_, r)) => {
                    let world = to_world(&pose, &r.states);
                    refs.push(world.clone());
                    tracker.reset();
                    Some(ReferencePath::new(world, robot.dt))
                }
                Err(_) => None,
            };
        }
        let c = match &path {
            // No usable plan: stand still until the next replan.
            None => Control2::new(0.0, 0.0),
            Some(p) => match tracker.control(&pose, v, p, &robot, cfg, mpc) {
                Ok(c) => c,
                Err(_) => return Ok(sim.finish(Outcome::Infeasible, started, refs, &tracker)),
            },
        };
        v = c.v;
        let fallback = ReferencePath::new(vec![Pose2::new(scenario.goal.x, scenario.goal.y, 0.0)], robot.dt);
        if sim.advance(c, path.as_ref().unwrap_or(&fallback)) {
            return Ok(sim.finish(Outcome::Collision, started, refs, &tracker));
        }
    }
}
