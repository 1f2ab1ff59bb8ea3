//! Upper-level objective: fear, environment and trajectory terms, with
//! gradients w.r.t. the waypoints, the optimized states and the reference.
//!
//! ```text
//! U = alpha * fear + beta * env + gamma * (g1 * goal + g2 * straight + g3 * track)
//! ```
//!
//! Waypoints and states are in the planning (body) frame; the environment
//! term maps them into the world with the planning pose before sampling the
//! distance field.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dmpc::tracking_error;
use crate::envsim::OccupancyGrid;
use crate::error::{Error, Result};
use crate::esdf::{EsdfGrid, ProximityCost};
use crate::nnplanner::sigmoid;
use crate::se2::Pose2;

/// Added under the square root of smoothed norms.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma: 1.0,
            gamma1: 5.0,
            gamma2: 0.5,
            gamma3: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.gamma1, self.gamma2, self.gamma3];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("cost weights must be finite and non-negative".into()));
        }
        if !all.iter().any(|w| *w > 0.0) {
            return Err(Error::Config("at least one cost weight must be positive".into()));
        }
        Ok(())
    }
}

fn smooth_norm(v: &Vector2<f64>) -> f64 {
    (v.norm_squared() + NORM_EPS).sqrt()
}

/// Binary cross-entropy of the safety score against the label "safe"
/// (`1` when the trajectory is collision-free, `0` otherwise), evaluated
/// from the logit. Returns `(value, d value / d logit)`.
pub fn fear_cost(logit: f64, colliding: bool) -> (f64, f64) {
    let y = if colliding { 0.0 } else { 1.0 };
    // log(1 + e^z) - y z, computed without overflow.
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    (softplus - y * logit, sigmoid(logit) - y)
}

/// True iff any state of `states` (planning frame) collides in the world.
pub fn collision_label(grid: &OccupancyGrid, frame: &Pose2, states: &[Pose2], robot_radius: f64) -> bool {
    states
        .iter()
        .any(|s| grid.in_collision(&frame.transform_point(&s.translation()), robot_radius))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentTerm {
    pub value: f64,
    pub grad_points: Vec<Vector2<f64>>,
    /// Per state, zero heading component; entry 0 is always zero.
    pub grad_states: Vec<Vector3<f64>>,
    /// Number of samples that fell outside the field.
    pub clamped: usize,
}

/// Mean proximity cost over the waypoints plus the mean over states `1..=T`.
pub fn environment_cost(
    esdf: &EsdfGrid,
    prox: &ProximityCost,
    frame: &Pose2,
    points: &[Vector2<f64>],
    states: &[Pose2],
) -> EnvironmentTerm {
    let (s, c) = frame.psi.sin_cos();
    // World gradient back into the planning frame: R' g.
    let to_body = |g: Vector2<f64>| Vector2::new(c * g.x + s * g.y, -s * g.x + c * g.y);
    let mut clamped = 0;
    let mut value = 0.0;
    let k = points.len() as f64;
    let grad_points = points
        .iter()
        .map(|p| {
            let smp = esdf.sample(&frame.transform_point(p), prox);
            clamped += smp.clamped as usize;
            value += smp.cost / k;
            to_body(smp.grad) / k
        })
        .collect();
    let mut grad_states = vec![Vector3::zeros(); states.len()];
    let t_max = states.len().saturating_sub(1);
    for (t, st) in states.iter().enumerate().skip(1) {
        let smp = esdf.sample(&frame.transform_point(&st.translation()), prox);
        clamped += smp.clamped as usize;
        value += smp.cost / t_max as f64;
        let g = to_body(smp.grad) / t_max as f64;
        grad_states[t] = Vector3::new(g.x, g.y, 0.0);
    }
    EnvironmentTerm {
        value,
        grad_points,
        grad_states,
        clamped,
    }
}

/// The three trajectory terms, unweighted, with their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTerms {
    /// `log(|w_k - goal| + 1)`.
    pub goal: f64,
    /// Mean distance of states `2..=T` from the uniform straight line to `w_k`.
    pub straightness: f64,
    /// Mean norm of the tracking error over states `1..=T`.
    pub tracking: f64,
    pub d_goal_last: Vector2<f64>,
    pub d_straight_last: Vector2<f64>,
    pub d_straight_states: Vec<Vector3<f64>>,
    pub d_track_states: Vec<Vector3<f64>>,
    pub d_track_ref: Vec<Vector3<f64>>,
}

pub fn trajectory_cost(points: &[Vector2<f64>], goal: &Vector2<f64>, states: &[Pose2], reference: &[Pose2]) -> TrajectoryTerms {
    assert_eq!(states.len(), reference.len(), "states and reference differ in length");
    let t_max = states.len() - 1;
    assert!(t_max >= 2, "horizon must be at least 2");
    let last = *points.last().expect("at least one waypoint");

    let diff = last - goal;
    let n = diff.norm();
    let goal_term = (n + 1.0).ln();
    let d_goal_last = if n > 0.0 { diff / (n * (n + 1.0)) } else { Vector2::zeros() };

    let tf = t_max as f64;
    let mut straightness = 0.0;
    let mut d_straight_last = Vector2::zeros();
    let mut d_straight_states = vec![Vector3::zeros(); states.len()];
    for (i, st) in states.iter().enumerate().skip(2) {
        let frac = i as f64 / tf;
        let d = frac * last - st.translation();
        let nd = smooth_norm(&d);
        straightness += nd / (tf - 1.0);
        let u = d / (nd * (tf - 1.0));
        d_straight_last += frac * u;
        d_straight_states[i] = Vector3::new(-u.x, -u.y, 0.0);
    }

    let mut tracking = 0.0;
    let mut d_track_states = vec![Vector3::zeros(); states.len()];
    let mut d_track_ref = vec![Vector3::zeros(); states.len()];
    for t in 1..=t_max {
        let te = tracking_error(&states[t], &reference[t]);
        let ne = (te.error.norm_squared() + NORM_EPS).sqrt();
        tracking += ne / tf;
        let u = te.error / (ne * tf);
        d_track_states[t] = te.d_state.transpose() * u;
        d_track_ref[t] = te.d_ref.transpose() * u;
    }

    TrajectoryTerms {
        goal: goal_term,
        straightness,
        tracking,
        d_goal_last,
        d_straight_last,
        d_straight_states,
        d_track_states,
        d_track_ref,
    }
}

/// Weighted total with per-term values and assembled gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct CostBreakdown {
    pub fear: f64,
    pub environment: f64,
    pub trajectory_goal: f64,
    pub trajectory_straightness: f64,
    pub trajectory_tracking: f64,
    pub total: f64,
    /// Direct gradient w.r.t. the waypoints (not through the reference).
    pub grad_points: Vec<Vector2<f64>>,
    /// Gradient w.r.t. the optimized states.
    pub grad_states: Vec<Vector3<f64>>,
    /// Direct gradient w.r.t. the reference poses.
    pub grad_ref: Vec<Vector3<f64>>,
    pub grad_logit: f64,
    pub colliding: bool,
    pub clamped: usize,
}

impl CostBreakdown {
    /// The weighted trajectory part `g1 goal + g2 straight + g3 track`.
    pub fn trajectory(&self, w: &CostWeights) -> f64 {
        w.gamma1 * self.trajectory_goal + w.gamma2 * self.trajectory_straightness + w.gamma3 * self.trajectory_tracking
    }
}

pub fn total(w: &CostWeights, fear: (f64, f64), colliding: bool, env: &EnvironmentTerm, traj: &TrajectoryTerms) -> CostBreakdown {
    let gt = w.gamma;
    let value = w.alpha * fear.0
        + w.beta * env.value
        + gt * (w.gamma1 * traj.goal + w.gamma2 * traj.straightness + w.gamma3 * traj.tracking);
    let mut grad_points: Vec<Vector2<f64>> = env.grad_points.iter().map(|g| w.beta * g).collect();
    if let Some(last) = grad_points.last_mut() {
        *last += gt * (w.gamma1 * traj.d_goal_last + w.gamma2 * traj.d_straight_last);
    }
    let grad_states = env
        .grad_states
        .iter()
        .zip(&traj.d_straight_states)
        .zip(&traj.d_track_states)
        .map(|((e, s), k)| w.beta * e + gt * (w.gamma2 * s + w.gamma3 * k))
        .collect();
    let grad_ref = traj.d_track_ref.iter().map(|r| gt * w.gamma3 * r).collect();
    CostBreakdown {
        fear: fear.0,
        environment: env.value,
        trajectory_goal: traj.goal,
        trajectory_straightness: traj.straightness,
        trajectory_tracking: traj.tracking,
        total: value,
        grad_points,
        grad_states,
        grad_ref,
        grad_logit: w.alpha * fear.1,
        colliding,
        clamped: env.clamped,
    }
}
