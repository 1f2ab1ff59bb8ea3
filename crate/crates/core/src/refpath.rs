//! Waypoints to time-indexed reference trajectory.
//!
//! The polyline `origin -> w_1 -> ... -> w_k` is sampled at `T + 1` uniform
//! arc-length fractions. Each sample takes the heading of the segment it
//! lies on (the mean of both neighbours when it sits exactly on a knot). The
//! analytic Jacobian of every sample w.r.t. every waypoint coordinate is
//! returned alongside, including the dependence of the arc-length split on
//! the waypoints.

use nalgebra::{DMatrix, Matrix2, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::se2::{wrap_angle, Pose2};

/// Consecutive points closer than this are merged.
pub const COLLAPSE_TOL: f64 = 1e-9;
/// Segments shorter than this contribute no heading gradient.
pub const SHORT_SEGMENT: f64 = 1e-6;

/// Network output: key points in the robot body frame and a safety score.
#[derive(Clone, Debug, PartialEq)]
pub struct Waypoints {
    pub points: Vec<Vector2<f64>>,
    pub safety_score: f64,
}

impl Waypoints {
    pub fn new(points: Vec<Vector2<f64>>, safety_score: f64) -> Result<Self> {
        let w = Self { points, safety_score };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::InvalidWaypoints(format!("need k >= 2, got {}", self.points.len())));
        }
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidWaypoints("non-finite coordinate".into()));
        }
        if !(0.0..=1.0).contains(&self.safety_score) {
            return Err(Error::InvalidWaypoints(format!("safety score {}", self.safety_score)));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn last(&self) -> Vector2<f64> {
        *self.points.last().expect("validated non-empty")
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceTrajectory {
    pub states: Vec<Pose2>,
    /// `d states / d waypoints`, shape `(3 (T+1)) x (2 k)`; row `3 t + c` is
    /// coordinate `c` of state `t`, column `2 i + d` coordinate `d` of
    /// waypoint `i`.
    pub jacobian: DMatrix<f64>,
}

impl ReferenceTrajectory {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    /// Pulls a gradient on the states back onto the waypoints.
    pub fn vjp(&self, grad_states: &[Vector3<f64>]) -> Vec<Vector2<f64>> {
        assert_eq!(grad_states.len(), self.states.len());
        let k = self.jacobian.ncols() / 2;
        let mut out = vec![Vector2::zeros(); k];
        for (t, g) in grad_states.iter().enumerate() {
            for c in 0..3 {
                if g[c] == 0.0 {
                    continue;
                }
                let row = self.jacobian.row(3 * t + c);
                for (i, o) in out.iter_mut().enumerate() {
                    o.x += g[c] * row[2 * i];
                    o.y += g[c] * row[2 * i + 1];
                }
            }
        }
        out
    }
}

struct Segment {
    /// Indices into the kept-point list (0 is the origin).
    from: usize,
    len: f64,
    dir: Vector2<f64>,
    heading: f64,
}

pub fn interpolate(w: &Waypoints, horizon: usize) -> Result<ReferenceTrajectory> {
    w.validate()?;
    let k = w.k();
    if horizon < k {
        return Err(Error::InvalidWaypoints(format!("horizon {horizon} shorter than k = {k}")));
    }
    // Kept points: (position, waypoint index or None for the origin).
    let mut kept: Vec<(Vector2<f64>, Option<usize>)> = vec![(Vector2::zeros(), None)];
    for (i, p) in w.points.iter().enumerate() {
        let last = kept.last().expect("origin present").0;
        if (p - last).norm() > COLLAPSE_TOL {
            kept.push((*p, Some(i)));
        }
    }
    if kept.len() < 2 {
        return Err(Error::DegenerateWaypoints);
    }
    let segs: Vec<Segment> = kept
        .windows(2)
        .enumerate()
        .map(|(m, pair)| {
            let d = pair[1].0 - pair[0].0;
            let len = d.norm();
            Segment {
                from: m,
                len,
                dir: d / len,
                heading: d.y.atan2(d.x),
            }
        })
        .collect();
    let mut starts = Vec::with_capacity(segs.len());
    let mut total = 0.0;
    for s in &segs {
        starts.push(total);
        total += s.len;
    }

    let n_kept = kept.len();
    // d len_m / d Q_n as row vectors, only for moving points (n >= 1).
    let dlen = |m: usize, n: usize| -> Vector2<f64> {
        let s = &segs[m];
        if n == s.from + 1 {
            s.dir
        } else if n == s.from {
            -s.dir
        } else {
            Vector2::zeros()
        }
    };
    let dtotal: Vec<Vector2<f64>> = (0..n_kept).map(|n| (0..segs.len()).map(|m| dlen(m, n)).sum()).collect();

    let knot_tol = 1e-12 * total.max(1.0);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut jac = DMatrix::zeros(3 * (horizon + 1), 2 * k);
    let mut m = 0usize;
    for j in 0..=horizon {
        let frac = j as f64 / horizon as f64;
        let s_j = frac * total;
        while m + 1 < segs.len() && s_j > starts[m] + segs[m].len {
            m += 1;
        }
        let seg = &segs[m];
        let r = s_j - starts[m];
        let lam_pos = kept[seg.from].0 + r * seg.dir;
        let p = if j == horizon { kept[n_kept - 1].0 } else { lam_pos };

        // Heading, averaged with the previous segment on an interior knot.
        let knot = if m + 1 < segs.len() && (s_j - starts[m + 1]).abs() <= knot_tol {
            Some((m, m + 1))
        } else if m > 0 && (s_j - starts[m]).abs() <= knot_tol {
            Some((m - 1, m))
        } else {
            None
        };
        let heading = match knot {
            Some((a, b)) => {
                let ha = segs[a].heading;
                ha + 0.5 * wrap_angle(segs[b].heading - ha)
            }
            None => seg.heading,
        };
        states.push(Pose2::new(p.x, p.y, heading));

        // Position Jacobian: p = Q_m + r e_m, r = frac L - S_m.
        let proj = (Matrix2::identity() - seg.dir * seg.dir.transpose()) / seg.len;
        for n in 1..n_kept {
            let Some(wi) = kept[n].1 else { continue };
            let mut ds = Vector2::zeros();
            for mm in 0..m {
                ds += dlen(mm, n);
            }
            let dr = frac * dtotal[n] - ds;
            let mut block = seg.dir * dr.transpose();
            if n == seg.from {
                block += Matrix2::identity() - r * proj;
            } else if n == seg.from + 1 {
                block += r * proj;
            }
            if j == horizon {
                block = if n == n_kept - 1 { Matrix2::identity() } else { Matrix2::zeros() };
            }
            for a in 0..2 {
                for b in 0..2 {
                    jac[(3 * j + a, 2 * wi + b)] = block[(a, b)];
                }
            }
        }
        // Heading Jacobian.
        let mut add_heading = |sg: &Segment, weight: f64| {
            if sg.len < SHORT_SEGMENT {
                return;
            }
            let perp = Vector2::new(-sg.dir.y, sg.dir.x) / sg.len;
            for (n, sign) in [(sg.from + 1, 1.0), (sg.from, -1.0)] {
                if let Some(wi) = kept[n].1 {
                    jac[(3 * j + 2, 2 * wi)] += weight * sign * perp.x;
                    jac[(3 * j + 2, 2 * wi + 1)] += weight * sign * perp.y;
                }
            }
        };
        match knot {
            Some((a, b)) => {
                add_heading(&segs[a], 0.5);
                add_heading(&segs[b], 0.5);
            }
            None => add_heading(seg, 1.0),
        }
    }
    Ok(ReferenceTrajectory { states, jacobian: jac })
}
