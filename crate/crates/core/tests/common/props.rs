//! Property checks shared by the proptest suites and the acceptance run.
//! Each returns `Err(description)` on the first violated tolerance.

use kinoplan::esdf::{EsdfGrid, ProximityCost};
use kinoplan::envsim::OccupancyGrid;
use kinoplan::refpath::{interpolate, Waypoints};
use kinoplan::{wrap_angle, Control2, KinematicModel, Pose2, Twist2};
use nalgebra::{Vector2, Vector3};

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn pose_close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
    a.vector_diff(b).amax() <= tol
}

/// Central-difference Jacobian of `f` at `x` (step 1e-6).
pub fn fd_jacobian<const N: usize>(f: impl Fn(&nalgebra::SVector<f64, N>) -> Vector3<f64>, x: &nalgebra::SVector<f64, N>) -> nalgebra::SMatrix<f64, 3, N> {
    let h = 1e-6;
    let mut j = nalgebra::SMatrix::<f64, 3, N>::zeros();
    for k in 0..N {
        let mut xp = *x;
        let mut xm = *x;
        xp[k] += h;
        xm[k] -= h;
        let mut d = f(&xp) - f(&xm);
        d[2] = wrap_angle(d[2]);
        j.set_column(k, &(d / (2.0 * h)));
    }
    j
}

fn jac_close<const N: usize>(a: &nalgebra::SMatrix<f64, 3, N>, fd: &nalgebra::SMatrix<f64, 3, N>, rel: f64) -> bool {
    let scale = fd.amax().max(1.0);
    (a - fd).amax() <= rel * scale
}

pub fn group_axioms(a: &Pose2, b: &Pose2, c: &Pose2) -> Check {
    let lhs = a.compose(b).compose(c);
    let rhs = a.compose(&b.compose(c));
    ensure(pose_close(&lhs, &rhs, 1e-12), || format!("associativity {lhs:?} vs {rhs:?}"))?;
    let id = Pose2::identity();
    ensure(pose_close(&id.compose(a), a, 0.0) && pose_close(&a.compose(&id), a, 1e-15), || "identity".into())?;
    ensure(pose_close(&a.compose(&a.inverse()), &id, 1e-12), || format!("right inverse of {a:?}"))?;
    ensure(pose_close(&a.inverse().compose(a), &id, 1e-12), || format!("left inverse of {a:?}"))?;
    ensure(pose_close(&a.inverse().inverse(), a, 1e-12), || "involution".into())?;
    let p = a.compose(b);
    ensure(p.psi > -std::f64::consts::PI && p.psi <= std::f64::consts::PI, || "heading not wrapped".into())
}

pub fn exp_log_round_trip(t: &Twist2, p: &Pose2) -> Check {
    let back = Pose2::exp(t).log();
    ensure((back.to_vector() - t.to_vector()).amax() <= 1e-9, || format!("log(exp({t:?})) = {back:?}"))?;
    let again = Pose2::exp(&p.log());
    ensure(pose_close(&again, p, 1e-9), || format!("exp(log({p:?})) = {again:?}"))
}

pub fn group_jacobians(a: &Pose2, b: &Pose2, t: &Twist2) -> Check {
    let (ja, jb) = a.compose_jacobians(b);
    let bv = b.to_vector();
    let av = a.to_vector();
    let fa = fd_jacobian(|v| Pose2::from_vector(v).compose(b).to_vector(), &av);
    let fb = fd_jacobian(|v| a.compose(&Pose2::from_vector(v)).to_vector(), &bv);
    ensure(jac_close(&ja, &fa, 1e-5) && jac_close(&jb, &fb, 1e-5), || "compose jacobian".into())?;
    let fi = fd_jacobian(|v| Pose2::from_vector(v).inverse().to_vector(), &av);
    ensure(jac_close(&a.inverse_jacobian(), &fi, 1e-5), || "inverse jacobian".into())?;
    let fe = fd_jacobian(|v| Pose2::exp(&Twist2::from_vector(v)).to_vector(), &t.to_vector());
    ensure(jac_close(&Pose2::exp_jacobian(t), &fe, 1e-5), || "exp jacobian".into())?;
    let fl = fd_jacobian(|v| Pose2::from_vector(v).log().to_vector(), &av);
    ensure(jac_close(&a.log_jacobian(), &fl, 1e-5), || format!("log jacobian at {a:?}"))
}

/// Exact-arc stepping: displacement |v| dt, heading change = turn rate * dt.
pub fn step_invariants(m: &KinematicModel, x: &Pose2, c: &Control2) -> Check {
    let y = m.step(x, c);
    let disp = (y.translation() - x.translation()).norm();
    let theta = m.turn_rate(c) * m.dt;
    // A full-turn arc has zero chord; the chord of an arc is 2 sin(theta/2) / kappa.
    let chord = if theta.abs() < 1e-12 {
        c.v.abs() * m.dt
    } else {
        (c.v * m.dt * 2.0 * (theta / 2.0).sin() / theta).abs()
    };
    ensure((disp - chord).abs() <= 1e-9, || format!("chord {disp} vs {chord}"))?;
    ensure((wrap_angle(y.psi - x.psi - theta)).abs() <= 1e-12, || "heading change".into())?;
    let (a, b) = m.jacobians(x, c);
    let fa = fd_jacobian(|v| m.step(&Pose2::from_vector(v), c).to_vector(), &x.to_vector());
    let cv = Vector2::new(c.v, c.u);
    let fb = fd_jacobian(|v| m.step(x, &Control2::new(v[0], v[1])).to_vector(), &cv);
    ensure(jac_close(&a, &fa, 1e-5), || format!("A {a} vs {fa}"))?;
    ensure(jac_close(&b, &fb, 1e-5), || format!("B {b} vs {fb}"))
}

/// Constant speed: the rollout arc length equals sum |v| dt, and the
/// rollout is the step-by-step composition.
pub fn rollout_invariants(m: &KinematicModel, controls: &[Control2]) -> Check {
    let traj = m.rollout(&Pose2::identity(), controls);
    let mut x = Pose2::identity();
    let mut arc = 0.0;
    for (c, s) in controls.iter().zip(&traj.states[1..]) {
        x = m.step(&x, c);
        ensure(x == *s, || "rollout differs from repeated steps".into())?;
        arc += c.v.abs() * m.dt;
    }
    // Recover each step's arc length from its chord and heading change.
    let measured: f64 = traj
        .states
        .windows(2)
        .map(|w| {
            let chord = (w[1].translation() - w[0].translation()).norm();
            let half = wrap_angle(w[1].psi - w[0].psi) / 2.0;
            if half.abs() < 1e-9 {
                chord
            } else {
                chord * half / half.sin()
            }
        })
        .sum();
    ensure((arc - measured).abs() <= 1e-9, || format!("arc length {measured} vs {arc}"))?;
    if m.kind == kinoplan::ModelKind::Bicycle {
        let k = traj.max_step_curvature(1e-9);
        let r = m.min_turning_radius();
        ensure(k <= 1.0 / r + 1e-9, || format!("curvature {k} above 1/{r}"))?;
    }
    Ok(())
}

/// `n` steps at turn rate `2 pi / (n dt)` close a full circle.
pub fn circle_closure(n: usize, v: f64, dt: f64) -> Check {
    let omega = 2.0 * std::f64::consts::PI / (n as f64 * dt);
    let m = KinematicModel::dubins(dt, v.max(1.0), omega.abs().max(1.0)).map_err(|e| e.to_string())?;
    let start = Pose2::new(0.3, -0.2, 0.7);
    let traj = m.rollout(&start, &vec![Control2::new(v, omega); n]);
    let end = traj.states.last().unwrap();
    ensure(pose_close(end, &start, 1e-9), || format!("circle of {n} steps ends at {end:?}"))?;
    // Every state lies on the circle of radius v / omega.
    let r = v / omega;
    let centre = start.transform_point(&Vector2::new(0.0, r));
    for s in &traj.states {
        ensure(((s.translation() - centre).norm() - r).abs() <= 1e-9, || "off the circle".into())?;
    }
    Ok(())
}

/// Reference interpolation: endpoint, uniform arc-length spacing and the
/// analytic Jacobian against finite differences.
pub fn refpath_invariants(points: &[Vector2<f64>], horizon: usize) -> Check {
    let w = Waypoints::new(points.to_vec(), 0.5).map_err(|e| e.to_string())?;
    let r = interpolate(&w, horizon).map_err(|e| e.to_string())?;
    ensure(r.states[horizon].translation() == w.last(), || "endpoint".into())?;
    ensure(r.states[0].translation() == Vector2::zeros(), || "origin".into())?;
    for pair in r.states.windows(2) {
        ensure(wrap_angle(pair[1].psi - pair[0].psi).abs() < std::f64::consts::PI, || "heading jump".into())?;
    }
    // Arc-length coordinate of each sample along the polyline.
    let mut poly = vec![Vector2::zeros()];
    poly.extend_from_slice(points);
    let total: f64 = poly.windows(2).map(|s| (s[1] - s[0]).norm()).sum();
    let arc_of = |p: &Vector2<f64>| {
        let mut acc = 0.0;
        let mut best = (f64::INFINITY, 0.0);
        for s in poly.windows(2) {
            let d = s[1] - s[0];
            let len = d.norm();
            if len > 0.0 {
                let tt = ((p - s[0]).dot(&d) / (len * len)).clamp(0.0, 1.0);
                let dist = (s[0] + tt * d - p).norm();
                if dist < best.0 - 1e-12 {
                    best = (dist, acc + tt * len);
                }
            }
            acc += len;
        }
        best.1
    };
    for (t, s) in r.states.iter().enumerate() {
        let expect = total * t as f64 / horizon as f64;
        let got = arc_of(&s.translation());
        ensure((got - expect).abs() <= 1e-9 * total.max(1.0), || format!("sample {t} at arc {got}, expected {expect}"))?;
    }
    // Jacobian vs central differences.
    let h = 1e-7;
    let k = points.len();
    for i in 0..k {
        for d in 0..2 {
            let shifted = |delta: f64| {
                let mut p = points.to_vec();
                p[i][d] += delta;
                interpolate(&Waypoints::new(p, 0.5).unwrap(), horizon).unwrap().states
            };
            let sp = shifted(h);
            let sm = shifted(-h);
            for t in 0..=horizon {
                let fd = sp[t].vector_diff(&sm[t]) / (2.0 * h);
                for c in 0..3 {
                    let a = r.jacobian[(3 * t + c, 2 * i + d)];
                    ensure((a - fd[c]).abs() <= 1e-4 * fd[c].abs().max(1.0), || {
                        format!("d state[{t}][{c}] / d w[{i}][{d}]: {a} vs {}", fd[c])
                    })?;
                }
            }
        }
    }
    Ok(())
}

/// Brute-force signed distance between cell centres.
pub fn brute_force_esdf(g: &OccupancyGrid, cap: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.cells.len());
    for j in 0..g.height {
        for i in 0..g.width {
            let me = g.get(i, j);
            let mut best = f64::INFINITY;
            for jj in 0..g.height {
                for ii in 0..g.width {
                    if g.get(ii, jj) != me {
                        let di = ii as f64 - i as f64;
                        let dj = jj as f64 - j as f64;
                        best = best.min(di * di + dj * dj);
                    }
                }
            }
            let d = (best.sqrt() * g.resolution).min(cap);
            out.push(if me { -d } else { d });
        }
    }
    out
}

pub fn esdf_matches_brute_force(g: &OccupancyGrid) -> Check {
    let e = EsdfGrid::build(g);
    let b = brute_force_esdf(g, e.max_distance);
    for (k, (x, y)) in e.distance.iter().zip(&b).enumerate() {
        ensure((x - y).abs() <= 1e-9, || format!("cell {k}: {x} vs {y}"))?;
        ensure((*x < 0.0) == g.cells[k], || format!("sign at cell {k}"))?;
    }
    // 1-Lipschitz among cells of the same class; across the boundary the
    // centre-to-centre convention jumps by at most two cells.
    for j in 0..g.height {
        for i in 0..g.width {
            for (ii, jj) in [(i + 1, j), (i, j + 1)] {
                if ii >= g.width || jj >= g.height {
                    continue;
                }
                let jump = (e.at(i, j) - e.at(ii, jj)).abs();
                let bound = if g.get(i, j) == g.get(ii, jj) { 1.0 } else { 2.0 } * g.resolution;
                ensure(jump <= bound + 1e-12, || format!("jump {jump} at ({i},{j})"))?;
            }
        }
    }
    Ok(())
}

/// Gradient of the sampled proximity cost against central differences at a
/// point at least `margin` cells away from interpolation cell lines.
pub fn esdf_gradient(e: &EsdfGrid, cost: &ProximityCost, p: &Vector2<f64>) -> Check {
    let s = e.sample(p, cost);
    let h = 1e-7;
    let f = |q: Vector2<f64>| e.sample(&q, cost).cost;
    let fd = Vector2::new(
        (f(p + Vector2::new(h, 0.0)) - f(p - Vector2::new(h, 0.0))) / (2.0 * h),
        (f(p + Vector2::new(0.0, h)) - f(p - Vector2::new(0.0, h))) / (2.0 * h),
    );
    ensure((s.grad - fd).amax() <= 1e-4 * fd.amax().max(1.0), || format!("grad {} vs {fd} at {p}", s.grad))
}

/// In-collision agrees with a scan over every cell centre.
pub fn collision_matches_brute_force(g: &OccupancyGrid, p: &Vector2<f64>, radius: f64) -> Check {
    let mut brute = !g.contains(p);
    for j in 0..g.height {
        for i in 0..g.width {
            if g.get(i, j) && (g.cell_center(i, j) - p).norm() <= radius {
                brute = true;
            }
        }
    }
    let fast = g.in_collision(p, radius);
    ensure(fast == brute, || format!("in_collision({p}, {radius}) = {fast}, brute {brute}"))
}
