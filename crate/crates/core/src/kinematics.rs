//! Discrete-time planar kinematic models.
//!
//! Every model advances the pose along an exact circular arc: the control is
//! mapped to a body twist `(v*dt, 0, turn_rate*dt)` and applied through the
//! SE(2) exponential. The Dubins/unicycle models take the turn rate directly,
//! the bicycle model derives it from the steering angle and wheelbase.

use nalgebra::{Matrix3, Matrix3x2, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{cosc, cosc_derivs, sinc, sinc_derivs, Pose2, Twist2};

/// Control input `(v, u)`: forward speed and turn rate (Dubins, unicycle) or
/// steering angle (bicycle).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Control2 {
    pub v: f64,
    pub u: f64,
}

impl Control2 {
    pub fn new(v: f64, u: f64) -> Self {
        Self { v, u }
    }

    pub fn get(&self, i: usize) -> f64 {
        match i {
            0 => self.v,
            1 => self.u,
            _ => panic!("control index {i} out of range"),
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        match i {
            0 => self.v = value,
            1 => self.u = value,
            _ => panic!("control index {i} out of range"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dubins,
    Bicycle,
    Unicycle,
}

/// Box bounds on the two control channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub v_min: f64,
    pub v_max: f64,
    /// Symmetric bound on the second channel (turn rate or steering angle).
    pub u_max: f64,
}

impl ControlBounds {
    pub fn lower(&self, i: usize) -> f64 {
        if i == 0 {
            self.v_min
        } else {
            -self.u_max
        }
    }

    pub fn upper(&self, i: usize) -> f64 {
        if i == 0 {
            self.v_max
        } else {
            self.u_max
        }
    }

    pub fn clamp(&self, c: Control2) -> Control2 {
        Control2::new(
            c.v.clamp(self.v_min, self.v_max),
            c.u.clamp(-self.u_max, self.u_max),
        )
    }

    pub fn contains(&self, c: &Control2, tol: f64) -> bool {
        c.v >= self.v_min - tol
            && c.v <= self.v_max + tol
            && c.u.abs() <= self.u_max + tol
    }
}

/// Second derivatives of each output coordinate of `step` with respect to
/// the stacked input `(x, y, psi, v, u)`.
pub type StepHessians = [SMatrix<f64, 5, 5>; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicModel {
    pub kind: ModelKind,
    pub dt: f64,
    pub bounds: ControlBounds,
    /// Wheelbase in meters; only used by the bicycle model.
    pub wheelbase: f64,
}

/// Arc length and heading change of one step, with derivatives w.r.t. the
/// control `(v, u)`.
struct ArcTerms {
    s: f64,
    theta: f64,
    ds: [f64; 2],
    dtheta: [f64; 2],
    ddtheta: [[f64; 2]; 2],
}

impl KinematicModel {
    pub fn new(kind: ModelKind, dt: f64, bounds: ControlBounds, wheelbase: f64) -> Result<Self> {
        let m = Self {
            kind,
            dt,
            bounds,
            wheelbase,
        };
        m.validate()?;
        Ok(m)
    }

    /// Dubins car with controlled forward speed in `[0, v_max]` and turn
    /// rate bounded by `u_max`.
    pub fn dubins(dt: f64, v_max: f64, u_max: f64) -> Result<Self> {
        Self::new(
            ModelKind::Dubins,
            dt,
            ControlBounds {
                v_min: 0.0,
                v_max,
                u_max,
            },
            0.0,
        )
    }

    /// Bicycle with wheelbase `wheelbase` whose steering limit realizes the
    /// minimum turning radius `r_min`.
    pub fn bicycle(dt: f64, wheelbase: f64, r_min: f64, v_min: f64, v_max: f64) -> Result<Self> {
        if !(r_min > 0.0) {
            return Err(Error::InvalidModel(format!("r_min must be positive, got {r_min}")));
        }
        Self::new(
            ModelKind::Bicycle,
            dt,
            ControlBounds {
                v_min,
                v_max,
                u_max: (wheelbase / r_min).atan(),
            },
            wheelbase,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidModel(format!("dt must be positive, got {}", self.dt)));
        }
        let b = &self.bounds;
        if !(b.v_min <= b.v_max) || !(b.u_max >= 0.0) || !b.v_max.is_finite() || !b.u_max.is_finite() {
            return Err(Error::InvalidModel(format!("empty control box {b:?}")));
        }
        if self.kind == ModelKind::Bicycle {
            if !(self.wheelbase > 0.0) {
                return Err(Error::InvalidModel("bicycle wheelbase must be positive".into()));
            }
            if !(b.u_max > 0.0 && b.u_max < std::f64::consts::FRAC_PI_2) {
                return Err(Error::InvalidModel(format!(
                    "bicycle steering limit must lie in (0, pi/2), got {}",
                    b.u_max
                )));
            }
        }
        Ok(())
    }

    /// Smallest radius the model can drive. For turn-rate models this is
    /// the radius at top speed and full turn rate.
    pub fn min_turning_radius(&self) -> f64 {
        match self.kind {
            ModelKind::Bicycle => self.wheelbase / self.bounds.u_max.tan(),
            ModelKind::Dubins | ModelKind::Unicycle => {
                if self.bounds.u_max == 0.0 {
                    f64::INFINITY
                } else {
                    self.bounds.v_max / self.bounds.u_max
                }
            }
        }
    }

    /// Heading rate produced by a control.
    pub fn turn_rate(&self, c: &Control2) -> f64 {
        match self.kind {
            ModelKind::Dubins | ModelKind::Unicycle => c.u,
            ModelKind::Bicycle => c.v * c.u.tan() / self.wheelbase,
        }
    }

    fn arc_terms(&self, c: &Control2) -> ArcTerms {
        let dt = self.dt;
        match self.kind {
            ModelKind::Dubins | ModelKind::Unicycle => ArcTerms {
                s: c.v * dt,
                theta: c.u * dt,
                ds: [dt, 0.0],
                dtheta: [0.0, dt],
                ddtheta: [[0.0; 2]; 2],
            },
            ModelKind::Bicycle => {
                let l = self.wheelbase;
                let tan = c.u.tan();
                let sec2 = 1.0 + tan * tan;
                let cross = dt * sec2 / l;
                ArcTerms {
                    s: c.v * dt,
                    theta: c.v * dt * tan / l,
                    ds: [dt, 0.0],
                    dtheta: [dt * tan / l, c.v * dt * sec2 / l],
                    ddtheta: [[0.0, cross], [cross, c.v * dt * 2.0 * sec2 * tan / l]],
                }
            }
        }
    }

    pub fn step(&self, x: &Pose2, c: &Control2) -> Pose2 {
        let arc = self.arc_terms(c);
        x.compose(&Pose2::exp(&Twist2::new(arc.s, 0.0, arc.theta)))
    }

    /// `(A, B) = (d step / d x, d step / d u)` in `(x, y, psi)` coordinates.
    pub fn jacobians(&self, x: &Pose2, c: &Control2) -> (Matrix3<f64>, Matrix3x2<f64>) {
        let arc = self.arc_terms(c);
        let (sn, cs) = x.psi.sin_cos();
        let f1 = sinc(arc.theta);
        let f2 = cosc(arc.theta);
        let (d1, _) = sinc_derivs(arc.theta);
        let (d2, _) = cosc_derivs(arc.theta);
        let g = cs * f1 - sn * f2;
        let h = sn * f1 + cs * f2;
        let g_t = cs * d1 - sn * d2;
        let h_t = sn * d1 + cs * d2;
        let a = Matrix3::new(1.0, 0.0, -arc.s * h, 0.0, 1.0, arc.s * g, 0.0, 0.0, 1.0);
        let mut b = Matrix3x2::zeros();
        for j in 0..2 {
            b[(0, j)] = arc.ds[j] * g + arc.s * g_t * arc.dtheta[j];
            b[(1, j)] = arc.ds[j] * h + arc.s * h_t * arc.dtheta[j];
            b[(2, j)] = arc.dtheta[j];
        }
        (a, b)
    }

    /// Second derivatives of `step` for each output coordinate.
    pub fn hessians(&self, x: &Pose2, c: &Control2) -> StepHessians {
        let arc = self.arc_terms(c);
        let (sn, cs) = x.psi.sin_cos();
        let f1 = sinc(arc.theta);
        let f2 = cosc(arc.theta);
        let (d1, dd1) = sinc_derivs(arc.theta);
        let (d2, dd2) = cosc_derivs(arc.theta);
        let g = cs * f1 - sn * f2;
        let h = sn * f1 + cs * f2;
        let g_t = cs * d1 - sn * d2;
        let h_t = sn * d1 + cs * d2;
        let g_tt = cs * dd1 - sn * dd2;
        let h_tt = sn * dd1 + cs * dd2;

        let mut out = [SMatrix::<f64, 5, 5>::zeros(); 3];
        // Translation outputs: dx = s g(psi, theta), dy = s h(psi, theta),
        // with dg/dpsi = -h and dh/dpsi = g.
        let (s, th) = (arc.s, &arc);
        out[0][(2, 2)] = -s * g;
        out[1][(2, 2)] = -s * h;
        for j in 0..2 {
            let xj = -(th.ds[j] * h + s * h_t * th.dtheta[j]);
            let yj = th.ds[j] * g + s * g_t * th.dtheta[j];
            out[0][(2, 3 + j)] = xj;
            out[0][(3 + j, 2)] = xj;
            out[1][(2, 3 + j)] = yj;
            out[1][(3 + j, 2)] = yj;
            for k in 0..2 {
                let cross_x = th.ds[j] * g_t * th.dtheta[k]
                    + th.ds[k] * g_t * th.dtheta[j]
                    + s * g_tt * th.dtheta[j] * th.dtheta[k]
                    + s * g_t * th.ddtheta[j][k];
                let cross_y = th.ds[j] * h_t * th.dtheta[k]
                    + th.ds[k] * h_t * th.dtheta[j]
                    + s * h_tt * th.dtheta[j] * th.dtheta[k]
                    + s * h_t * th.ddtheta[j][k];
                out[0][(3 + j, 3 + k)] = cross_x;
                out[1][(3 + j, 3 + k)] = cross_y;
                out[2][(3 + j, 3 + k)] = th.ddtheta[j][k];
            }
        }
        out
    }

    /// Unsigned curvature of the arc driven by `c` (zero when stationary).
    pub fn curvature(&self, c: &Control2) -> f64 {
        if c.v == 0.0 {
            0.0
        } else {
            (self.turn_rate(c) / c.v).abs()
        }
    }

    pub fn rollout(&self, x0: &Pose2, controls: &[Control2]) -> Trajectory {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(*x0);
        let mut x = *x0;
        for c in controls {
            x = self.step(&x, c);
            states.push(x);
        }
        Trajectory {
            states,
            controls: controls.to_vec(),
        }
    }
}

/// Time-indexed states and (optionally) the controls that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Pose2>,
    pub controls: Vec<Control2>,
}

impl Trajectory {
    pub fn from_states(states: Vec<Pose2>) -> Self {
        Self {
            states,
            controls: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Total polyline length through the state positions.
    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| (w[1].translation() - w[0].translation()).norm())
            .sum()
    }

    /// Largest per-step defect when re-rolling the controls through `model`.
    pub fn max_defect(&self, model: &KinematicModel) -> f64 {
        self.states
            .windows(2)
            .zip(&self.controls)
            .map(|(w, c)| model.step(&w[0], c).vector_diff(&w[1]).amax())
            .fold(0.0, f64::max)
    }

    /// Largest per-step curvature `|dpsi| / |dp|` over steps that move more
    /// than `min_step` meters.
    pub fn max_step_curvature(&self, min_step: f64) -> f64 {
        self.states
            .windows(2)
            .filter_map(|w| {
                // Arc geometry: chord c = 2 r sin(theta/2), so
                // kappa = 2 sin(|theta|/2) / c.
                let chord = (w[1].translation() - w[0].translation()).norm();
                if chord <= min_step {
                    return None;
                }
                let dpsi = crate::se2::wrap_angle(w[1].psi - w[0].psi).abs();
                Some(2.0 * (dpsi / 2.0).sin() / chord)
            })
            .fold(0.0, f64::max)
    }
}
