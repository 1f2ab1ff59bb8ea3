mod common;

use common::{fd_reference_gradient, random_dubins_problem, rel_err, LinearQuadratic};
use kinoplan::dmpc::{solve_ilqr, tracking_error, MpcProblem, MpcWeights, SolverOptions};
use kinoplan::{Control2, KinematicModel, Pose2, Trajectory};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dubins() -> KinematicModel {
    KinematicModel::dubins(0.1, 1.5, 1.0).unwrap()
}

#[test]
fn origin_reference_is_already_optimal() {
    let p = MpcProblem::new(dubins(), MpcWeights::default(), vec![Pose2::identity(); 11]).unwrap();
    let s = p.solve(&SolverOptions::default()).unwrap();
    assert!(s.converged);
    assert_eq!(s.objective, 0.0);
    assert!(s.controls.iter().all(|c| *c == Control2::default()));
    assert!(s.states.iter().all(|x| *x == Pose2::identity()));
}

#[test]
fn linear_quadratic_matches_kkt_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let t = rng.random_range(1..=15);
        let lq = LinearQuadratic::random(&mut rng, t);
        let (xs, us) = lq.kkt_solution();
        let r = solve_ilqr(&lq, &vec![Vector2::zeros(); t], &SolverOptions::default()).unwrap();
        assert!(r.converged);
        for (a, b) in r.controls.iter().zip(&us) {
            assert!((a - b).amax() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in r.states.iter().zip(&xs) {
            assert!((a - b).amax() < 1e-6);
        }
    }
}

/// The straight-line optimum reduces to a scalar LQ problem in the speeds:
/// `x_{t+1} = x_t + dt v_t` with costs `q (x_t - r_t)^2 + rv v_t^2`.
fn straight_line_optimum(refs: &[f64], dt: f64, q: f64, qt: f64, rv: f64) -> Vec<f64> {
    let t_max = refs.len() - 1;
    // x_t = dt * sum_{s<t} v_s; minimize a quadratic in v directly.
    let mut h = DMatrix::zeros(t_max, t_max);
    let mut g = DVector::zeros(t_max);
    for t in 1..=t_max {
        let w = if t == t_max { qt } else { q };
        for a in 0..t {
            g[a] -= 2.0 * w * dt * refs[t];
            for b in 0..t {
                h[(a, b)] += 2.0 * w * dt * dt;
            }
        }
    }
    for a in 0..t_max {
        h[(a, a)] += 2.0 * rv;
    }
    let v = h.cholesky().unwrap().solve(&(-g));
    v.iter().copied().collect()
}

#[test]
fn straight_line_tracking() {
    let refs: Vec<f64> = (0..=30).map(|t| 0.1 * t as f64).collect();
    let reference: Vec<Pose2> = refs.iter().map(|&x| Pose2::new(x, 0.0, 0.0)).collect();
    let w = MpcWeights::default();
    let p = MpcProblem::new(dubins(), w, reference.clone()).unwrap();
    let s = p.solve(&SolverOptions::default()).unwrap();
    let v = straight_line_optimum(&refs, 0.1, w.q[(0, 0)], w.q_terminal[(0, 0)], w.r[(0, 0)]);
    for (c, vt) in s.controls.iter().zip(&v) {
        assert!((c.v - vt).abs() < 1e-6, "{} vs {vt}", c.v);
        assert!(c.u.abs() < 1e-9);
    }
    // With a light control weight the terminal pose lands on the reference.
    let light = MpcWeights::diagonal([1.0, 1.0, 0.25], [1e-4, 1e-4], 10.0);
    let p = MpcProblem::new(dubins(), light, reference).unwrap();
    let s = p.solve(&SolverOptions::default()).unwrap();
    let end = s.states.last().unwrap();
    assert!((end.translation() - Vector2::new(3.0, 0.0)).norm() < 1e-3, "{end:?}");
}

#[test]
fn tracking_objective_examples() {
    let r = vec![Pose2::identity(); 2];
    let w = MpcWeights::diagonal([1.0, 1.0, 1.0], [1.0, 1.0], 0.0);
    let p = MpcProblem::new(dubins(), w, r.clone()).unwrap();
    let zero = [Control2::default()];
    assert_eq!(p.tracking_objective(&r, &zero), 0.0);
    let states = [Pose2::new(1.0, 0.0, 0.0), Pose2::identity()];
    assert!((p.tracking_objective(&states, &zero) - 1.0).abs() < 1e-15);

    // Independent recomputation through the group logarithm.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_dubins_problem(&mut rng, 8);
    let controls: Vec<Control2> = (0..8).map(|_| Control2::new(rng.random_range(0.0..1.5), rng.random_range(-1.0..1.0))).collect();
    let states = p.model.rollout(&Pose2::identity(), &controls).states;
    let mut expect = 0.0;
    for t in 0..=8 {
        let e = p.reference[t].between(&states[t]).log().to_vector();
        let q = if t == 8 { p.weights.q_terminal } else { p.weights.q };
        expect += e.dot(&(q * e));
        if t < 8 {
            let u = Vector2::new(controls[t].v, controls[t].u);
            expect += u.dot(&(p.weights.r * u));
        }
        let te = tracking_error(&states[t], &p.reference[t]).error;
        assert!((te - e).amax() < 1e-12);
    }
    assert!((p.tracking_objective(&states, &controls) - expect).abs() < 1e-10);
}

#[test]
fn zero_upstream_gradient_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_dubins_problem(&mut rng, 6);
    let s = p.solve(&SolverOptions::default()).unwrap();
    let g = p.backward(&s, &vec![Vector3::zeros(); 7], &SolverOptions::default()).unwrap();
    assert!(g.iter().all(|v| *v == Vector3::zeros()));
}

#[test]
fn backward_matches_finite_differences_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let p = random_dubins_problem(&mut rng, 5);
        let opts = SolverOptions::tight();
        let s = p.solve(&opts).unwrap();
        assert!(s.converged);
        let g: Vec<Vector3<f64>> = (0..6).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let analytic = p.backward(&s, &g, &opts).unwrap();
        let fd = fd_reference_gradient(&p, &g, &s.controls, 1e-5);
        let err = rel_err(&analytic, &fd, 1e-8);
        assert!(err < 1e-3, "rel err {err}\n{analytic:?}\n{fd:?}");
        assert_eq!(analytic[0], Vector3::zeros());
    }
}

#[test]
fn saturated_controls_leave_only_the_direct_term() {
    // Reference races ahead and to the left: speed and turn rate saturate.
    let reference: Vec<Pose2> = (0..=8)
        .map(|t| Pose2::new(2.0 * t as f64, 2.0 * t as f64, if t == 0 { 0.0 } else { 1.5 }))
        .collect();
    let p = MpcProblem::new(dubins(), MpcWeights::default(), reference).unwrap();
    let opts = SolverOptions::tight();
    let s = p.solve(&opts).unwrap();
    assert!(s.active_set.iter().all(|a| a[0] && a[1]), "{:?}", s.active_set);
    // Loss = tracking objective at the optimum; its total derivative is the
    // partial w.r.t. the reference because the states cannot move.
    let t_max = p.t();
    let h = 1e-6;
    for t in 1..=t_max {
        for c in 0..3 {
            let eval = |d: f64| {
                let mut q = p.clone();
                let mut v = q.reference[t].to_vector();
                v[c] += d;
                q.reference[t] = Pose2::from_vector(&v);
                let sq = q.solve_from(&s.controls, &opts).unwrap();
                (q.tracking_objective(&sq.states, &sq.controls), sq.states)
            };
            let (lp, sp) = eval(h);
            let (lm, sm) = eval(-h);
            let total = (lp - lm) / (2.0 * h);
            let mut q = p.clone();
            let direct = {
                let mut v = q.reference[t].to_vector();
                v[c] += h;
                q.reference[t] = Pose2::from_vector(&v);
                let a = q.tracking_objective(&s.states, &s.controls);
                v[c] -= 2.0 * h;
                q.reference[t] = Pose2::from_vector(&v);
                (a - q.tracking_objective(&s.states, &s.controls)) / (2.0 * h)
            };
            assert!((total - direct).abs() <= 1e-6 * (1.0 + direct.abs()), "t={t} c={c}");
            assert!(sp.iter().zip(&sm).all(|(a, b)| a.vector_diff(b).amax() < 1e-12));
        }
    }
    // The indirect (through-the-optimum) term vanishes.
    let g: Vec<Vector3<f64>> = (0..=t_max).map(|_| Vector3::new(1.0, -1.0, 0.5)).collect();
    let indirect = p.backward(&s, &g, &opts).unwrap();
    assert!(indirect.iter().all(|v| v.amax() < 1e-12));
}

#[test]
fn solutions_descend_and_are_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let t = rng.random_range(5..=30);
        let p = random_dubins_problem(&mut rng, t);
        let s = p.solve(&SolverOptions::default()).unwrap();
        assert!(s.history.windows(2).all(|w| w[1] <= w[0]));
        let traj = Trajectory {
            states: s.states.clone(),
            controls: s.controls.clone(),
        };
        assert!(traj.max_defect(&p.model) < 1e-10);
        assert!(s.controls.iter().all(|c| p.model.bounds.contains(c, 0.0)));
    }
}

#[test]
fn bicycle_solutions_respect_turning_radius() {
    let model = KinematicModel::bicycle(0.1, 0.5, 1.48, 0.0, 1.5).unwrap();
    // A reference that turns far tighter than the robot can.
    let reference: Vec<Pose2> = (0..=40)
        .map(|t| {
            let a = 0.1 * t as f64;
            Pose2::new(0.5 * a.sin(), 0.5 * (1.0 - a.cos()), a)
        })
        .collect();
    let p = MpcProblem::new(model, MpcWeights::default(), reference).unwrap();
    let s = p.solve(&SolverOptions::default()).unwrap();
    let traj = Trajectory {
        states: s.states.clone(),
        controls: s.controls.clone(),
    };
    assert!(traj.max_step_curvature(1e-9) <= 1.0 / 1.48 + 1e-9);
    assert!(s.controls.iter().all(|c| model.curvature(c) <= 1.0 / 1.48 + 1e-9));
}

#[test]
fn rejects_bad_problems() {
    let bad = MpcWeights::diagonal([1.0, -1.0, 1.0], [1.0, 1.0], 1.0);
    assert!(MpcProblem::new(dubins(), bad, vec![Pose2::identity(); 3]).is_err());
    let bad = MpcWeights::diagonal([1.0, 1.0, 1.0], [0.0, 1.0], 1.0);
    assert!(MpcProblem::new(dubins(), bad, vec![Pose2::identity(); 3]).is_err());
    assert!(MpcProblem::new(dubins(), MpcWeights::default(), vec![Pose2::identity()]).is_err());
    let p = MpcProblem::new(dubins(), MpcWeights::default(), vec![Pose2::identity(); 3]).unwrap();
    assert!(p.solve_from(&[Control2::default()], &SolverOptions::default()).is_err());
}
