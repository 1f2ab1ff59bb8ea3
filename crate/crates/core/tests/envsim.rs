use kinoplan::envsim::{generate, generate_world, Archetype, GenerationParams, OccupancyGrid};
use kinoplan::esdf::EsdfGrid;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum distance from `p` to any occupied cell centre, by full scan.
fn clearance(g: &OccupancyGrid, p: &Vector2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for j in 0..g.height {
        for i in 0..g.width {
            if g.get(i, j) {
                best = best.min((g.cell_center(i, j) - p).norm());
            }
        }
    }
    best
}

#[test]
fn scenarios_keep_clearance_over_many_seeds() {
    let params = GenerationParams::default();
    for seed in 0..1000u64 {
        let arch = Archetype::ALL[seed as usize % 4];
        let s = generate(arch, seed, &params).unwrap();
        let g = &s.grid;
        let start = s.start.translation();
        assert!(clearance(g, &start) > params.robot_radius, "start, seed {seed}");
        assert!(clearance(g, &s.goal) > params.robot_radius, "goal, seed {seed}");
        let d = (s.goal - start).norm();
        assert!(d <= 10.0 && d >= params.goal_min_dist - 1e-12, "goal distance {d}");
        assert!(s.start.psi > -std::f64::consts::PI && s.start.psi <= std::f64::consts::PI);
        let g_body = s.goal_in_body(&s.start);
        let bearing = g_body.y.atan2(g_body.x).to_degrees().abs();
        assert!(bearing <= params.goal_bearing_max_deg + 1e-9, "bearing {bearing}, seed {seed}");
    }
}

#[test]
fn goal_bearing_bound_is_configurable() {
    let params = GenerationParams {
        goal_bearing_max_deg: 180.0,
        ..GenerationParams::default()
    };
    let behind = (0..200u64)
        .map(|seed| generate(Archetype::Forest, seed, &params).unwrap())
        .filter(|s| s.goal_in_body(&s.start).x < 0.0)
        .count();
    assert!(behind > 50, "{behind}");
    let bad = GenerationParams {
        goal_bearing_max_deg: 181.0,
        ..GenerationParams::default()
    };
    assert!(generate(Archetype::Forest, 0, &bad).is_err());
}

#[test]
fn worlds_are_closed_and_deterministic() {
    let params = GenerationParams::default();
    for arch in Archetype::ALL {
        let a = generate_world(arch, 42, &params).unwrap();
        let b = generate_world(arch, 42, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.validate().is_ok());
        assert!(a.cells.iter().any(|c| !c), "{arch}");
        let c = generate_world(arch, 43, &params).unwrap();
        assert_ne!(a.cells, c.cells, "{arch}");
    }
}

#[test]
fn collision_agrees_with_esdf_at_cell_centres() {
    let g = generate_world(Archetype::Campus, 3, &GenerationParams::default()).unwrap();
    let e = EsdfGrid::build(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // A radius that no centre-to-centre distance can equal exactly.
    let r = 0.351234;
    for _ in 0..2000 {
        let i = rng.random_range(0..g.width);
        let j = rng.random_range(0..g.height);
        let p = g.cell_center(i, j);
        assert_eq!(g.in_collision(&p, r), e.at(i, j) < r, "({i},{j})");
    }
}

#[test]
fn grid_text_round_trip_through_file() {
    let g = generate_world(Archetype::Garage, 9, &GenerationParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.grid");
    g.save(&path).unwrap();
    assert_eq!(OccupancyGrid::load(&path).unwrap(), g);
    let e = EsdfGrid::build(&g);
    let csv = dir.path().join("esdf.csv");
    e.save_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), g.height);
    assert_eq!(text.lines().next().unwrap().split(',').count(), g.width);
}
