//! Kinematics-aware learned local planning.
//!
//! A small perception/planning network maps a range scan and a goal to a
//! handful of waypoints. During training the waypoints are interpolated into
//! a reference, tracked by a box-constrained iLQR over the robot kinematics,
//! and the network is updated with gradients that flow back through the
//! optimizer's fixed point. The crate also carries the simulation, tracking
//! controllers and benchmark harness used to evaluate the result.

pub mod bench;
pub mod blo_cost;
pub mod config;
pub mod controllers;
pub mod dmpc;
pub mod envsim;
pub mod error;
pub mod esdf;
pub mod kinematics;
pub mod nnplanner;
pub mod refpath;
pub mod se2;
pub mod svg;
pub mod training;

pub use error::{Error, Result};
pub use kinematics::{Control2, ControlBounds, KinematicModel, ModelKind, Trajectory};
pub use se2::{wrap_angle, Pose2, Twist2};
