//! Fixtures shared by the criterion benchmarks in `benches/`.

use kinoplan::config::Config;
use kinoplan::envsim::{self, Archetype, OccupancyGrid};
use kinoplan::training::{PlanningSample, World};
use kinoplan::Pose2;

/// Gentle left arc sampled at the MPC step, starting at the origin.
pub fn arc_reference(horizon: usize, speed: f64, curvature: f64, dt: f64) -> Vec<Pose2> {
    (0..=horizon)
        .map(|t| {
            let th = speed * dt * t as f64 * curvature;
            Pose2::new(th.sin() / curvature, (1.0 - th.cos()) / curvature, th)
        })
        .collect()
}

/// A default-size world of the given archetype.
pub fn world(archetype: Archetype, seed: u64) -> OccupancyGrid {
    envsim::generate_world(archetype, seed, &Config::default().world).expect("default params are valid")
}

/// One planning query with the default configuration.
pub fn sample(seed: u64) -> PlanningSample {
    let cfg = Config::default();
    let w = World::generate(Archetype::Forest, seed, &cfg).expect("world");
    PlanningSample::from_world(&w, seed, &cfg).expect("sample")
}
