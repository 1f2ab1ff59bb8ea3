//! Planar rigid motions, SE(2).
//!
//! Poses are stored as `(x, y, psi)` with the heading wrapped to `(-pi, pi]`.
//! Tangent vectors ([`Twist2`]) are `(vx, vy, omega)` expressed in the body
//! frame, so `exp` of a twist is the pose reached by following a constant
//! body-frame velocity for unit time.
//!
//! All Jacobians are with respect to the plain vector coordinates
//! `(x, y, psi)` / `(vx, vy, omega)`; the heading coordinate is treated as
//! unwrapped, so the derivative of the wrap is one.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Vector2, Vector3};

/// Below this magnitude `exp`/`log` use their series branch.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Below this magnitude the derivative helpers switch to series expansions
/// (the closed forms lose digits to cancellation well before `SMALL_ANGLE`).
const SERIES_ANGLE: f64 = 1e-2;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// `sin(t) / t`.
pub(crate) fn sinc(t: f64) -> f64 {
    if t.abs() < SMALL_ANGLE {
        1.0 - t * t / 6.0
    } else {
        t.sin() / t
    }
}

/// `(1 - cos(t)) / t`.
pub(crate) fn cosc(t: f64) -> f64 {
    if t.abs() < SMALL_ANGLE {
        t / 2.0 - t * t * t / 24.0
    } else {
        let s = (t / 2.0).sin();
        2.0 * s * s / t
    }
}

/// First and second derivatives of [`sinc`].
pub(crate) fn sinc_derivs(t: f64) -> (f64, f64) {
    if t.abs() < SERIES_ANGLE {
        let t2 = t * t;
        (
            t * (-1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0),
            -1.0 / 3.0 + t2 / 10.0 - t2 * t2 / 168.0,
        )
    } else {
        let (s, c) = t.sin_cos();
        let t2 = t * t;
        ((t * c - s) / t2, (-t2 * s - 2.0 * t * c + 2.0 * s) / (t2 * t))
    }
}

/// First and second derivatives of [`cosc`].
pub(crate) fn cosc_derivs(t: f64) -> (f64, f64) {
    if t.abs() < SERIES_ANGLE {
        let t2 = t * t;
        (
            0.5 - t2 / 8.0 + t2 * t2 / 144.0 - t2 * t2 * t2 / 5760.0,
            t * (-0.25 + t2 / 36.0 - t2 * t2 / 960.0),
        )
    } else {
        let (s, c) = t.sin_cos();
        let t2 = t * t;
        let omc = 2.0 * (t / 2.0).sin().powi(2);
        ((t * s - omc) / t2, (t2 * c - 2.0 * t * s + 2.0 * omc) / (t2 * t))
    }
}

/// Diagonal entry of the inverse left Jacobian, `(w/2) cot(w/2)`, with its
/// first and second derivatives.
pub(crate) fn half_cot(w: f64) -> (f64, f64, f64) {
    if w.abs() < SERIES_ANGLE {
        let w2 = w * w;
        (
            1.0 - w2 / 12.0 - w2 * w2 / 720.0 - w2 * w2 * w2 / 30240.0,
            w * (-1.0 / 6.0 - w2 / 180.0 - w2 * w2 / 5040.0),
            -1.0 / 6.0 - w2 / 60.0 - w2 * w2 / 1008.0,
        )
    } else {
        let h = w / 2.0;
        let (s, c) = h.sin_cos();
        let cot = c / s;
        let csc2 = 1.0 / (s * s);
        let a = h * cot;
        (a, 0.5 * (cot - h * csc2), 0.5 * csc2 * (a - 1.0))
    }
}

/// Rigid planar pose.
#[derive(Clone, Copy, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl fmt::Debug for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pose2({:.6}, {:.6}, {:.6})", self.x, self.y, self.psi)
    }
}

/// Body-frame velocity, an element of the Lie algebra se(2).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist2 {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl Twist2 {
    pub fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.omega)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.omega.is_finite()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.psi)
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Group product `self * other`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.psi.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.psi + other.psi,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.psi.sin_cos();
        Pose2::new(-c * self.x - s * self.y, s * self.x - c * self.y, -self.psi)
    }

    /// `self^-1 * other`, the pose of `other` seen from `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    /// Maps a point from this pose's body frame into the parent frame.
    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.psi.sin_cos();
        Vector2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Maps a point from the parent frame into this pose's body frame.
    pub fn inverse_transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.psi.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Vector2::new(c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn exp(t: &Twist2) -> Pose2 {
        let a = sinc(t.omega);
        let b = cosc(t.omega);
        Pose2::new(a * t.vx - b * t.vy, b * t.vx + a * t.vy, t.omega)
    }

    pub fn log(&self) -> Twist2 {
        let w = self.psi;
        let a = if w.abs() < SMALL_ANGLE {
            1.0 - w * w / 12.0
        } else {
            half_cot(w).0
        };
        let b = w / 2.0;
        Twist2::new(a * self.x + b * self.y, -b * self.x + a * self.y, w)
    }

    /// `(d compose / d self, d compose / d other)`.
    pub fn compose_jacobians(&self, other: &Pose2) -> (Matrix3<f64>, Matrix3<f64>) {
        let (s, c) = self.psi.sin_cos();
        let ja = Matrix3::new(
            1.0,
            0.0,
            -s * other.x - c * other.y,
            0.0,
            1.0,
            c * other.x - s * other.y,
            0.0,
            0.0,
            1.0,
        );
        let jb = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        (ja, jb)
    }

    pub fn inverse_jacobian(&self) -> Matrix3<f64> {
        let (s, c) = self.psi.sin_cos();
        Matrix3::new(
            -c,
            -s,
            s * self.x - c * self.y,
            s,
            -c,
            c * self.x + s * self.y,
            0.0,
            0.0,
            -1.0,
        )
    }

    /// `d exp(t) / d t`.
    pub fn exp_jacobian(t: &Twist2) -> Matrix3<f64> {
        let a = sinc(t.omega);
        let b = cosc(t.omega);
        let (da, _) = sinc_derivs(t.omega);
        let (db, _) = cosc_derivs(t.omega);
        Matrix3::new(
            a,
            -b,
            da * t.vx - db * t.vy,
            b,
            a,
            db * t.vx + da * t.vy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `d log(p) / d p`.
    pub fn log_jacobian(&self) -> Matrix3<f64> {
        let (a, da, _) = half_cot(self.psi);
        let b = 0.5 * self.psi;
        Matrix3::new(
            a,
            b,
            da * self.x + 0.5 * self.y,
            -b,
            a,
            -0.5 * self.x + da * self.y,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Vector difference `self - other` with the heading difference wrapped.
    pub fn vector_diff(&self, other: &Pose2) -> Vector3<f64> {
        Vector3::new(
            self.x - other.x,
            self.y - other.y,
            wrap_angle(self.psi - other.psi),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
        a.vector_diff(b).amax() < tol
    }

    #[test]
    fn compose_examples() {
        let p = Pose2::new(0.3, -1.2, 0.7);
        assert_eq!(Pose2::identity().compose(&p), p);
        let t = Pose2::new(1.0, 0.0, 0.0);
        assert_eq!(t.compose(&t), Pose2::new(2.0, 0.0, 0.0));
        let r = Pose2::new(0.0, 0.0, FRAC_PI_2).compose(&t);
        assert!(close(&r, &Pose2::new(0.0, 1.0, FRAC_PI_2), 1e-15));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
        let p = Pose2::new(0.0, 0.0, 7.0);
        assert!(p.psi > -PI && p.psi <= PI);
    }

    #[test]
    fn exp_log_trivial_cases() {
        assert_eq!(Pose2::exp(&Twist2::default()), Pose2::identity());
        assert_eq!(Pose2::exp(&Twist2::new(2.5, 0.0, 0.0)), Pose2::new(2.5, 0.0, 0.0));
        assert_eq!(Pose2::identity().log(), Twist2::default());
        assert_eq!(Pose2::new(2.5, 0.0, 0.0).log(), Twist2::new(2.5, 0.0, 0.0));
    }

    #[test]
    fn exp_quarter_circle_matches_integration() {
        // Integrate the body-velocity ODE with many small Euler-free steps
        // (each step is a tiny straight segment at the midpoint heading).
        let (v, w) = (1.0, FRAC_PI_2);
        let n = 200_000;
        let h = 1.0 / n as f64;
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..n {
            let mid = th + 0.5 * w * h;
            x += v * h * mid.cos();
            y += v * h * mid.sin();
            th += w * h;
        }
        let r = 2.0 / PI;
        assert!((x - r).abs() < 1e-9 && (y - r).abs() < 1e-9);
        let p = Pose2::exp(&Twist2::new(v, 0.0, w));
        assert!(close(&p, &Pose2::new(x, y, th), 1e-9));
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for &w in &[1e-9, 5e-9, 2e-8, 1e-6] {
            let t = Twist2::new(0.7, -0.2, w);
            let p = Pose2::exp(&t);
            let back = p.log();
            assert!((back.vx - t.vx).abs() < 1e-14);
            assert!((back.vy - t.vy).abs() < 1e-14);
        }
    }

    #[test]
    fn series_helpers_agree_with_closed_forms_at_switch() {
        let below = SERIES_ANGLE * (1.0 - 1e-9);
        let above = SERIES_ANGLE * (1.0 + 1e-9);
        let (a1, a2) = sinc_derivs(below);
        let (b1, b2) = sinc_derivs(above);
        assert!((a1 - b1).abs() < 1e-9 && (a2 - b2).abs() < 1e-9);
        let (a1, a2) = cosc_derivs(below);
        let (b1, b2) = cosc_derivs(above);
        assert!((a1 - b1).abs() < 1e-9 && (a2 - b2).abs() < 1e-9);
        let a = half_cot(below);
        let b = half_cot(above);
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
    }

    #[test]
    fn compose_jacobian_at_identity() {
        let (ja, jb) = Pose2::identity().compose_jacobians(&Pose2::identity());
        assert_eq!(ja, Matrix3::identity());
        assert_eq!(jb, Matrix3::identity());
    }

    #[test]
    fn inverse_is_involution() {
        let p = Pose2::new(1.5, -2.0, 2.9);
        assert!(close(&p.inverse().inverse(), &p, 1e-14));
    }
}
