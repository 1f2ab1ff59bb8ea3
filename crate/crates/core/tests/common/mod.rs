//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod props;

use kinoplan::dmpc::{ControlProblem, CostDerivs};
use kinoplan::kinematics::StepHessians;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x2, SMatrix, Vector2, Vector3};
use rand::Rng;

/// Linear dynamics with a quadratic tracking cost.
pub struct LinearQuadratic {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub x0: Vector3<f64>,
    pub refs: Vec<Vector3<f64>>,
    pub q: Matrix3<f64>,
    pub r: Matrix2<f64>,
    pub qt: Matrix3<f64>,
    pub lo: Vector2<f64>,
    pub hi: Vector2<f64>,
}

fn random_spd3<R: Rng>(rng: &mut R, floor: f64) -> Matrix3<f64> {
    let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    m * m.transpose() + Matrix3::identity() * floor
}

impl LinearQuadratic {
    pub fn random<R: Rng>(rng: &mut R, horizon: usize) -> Self {
        let a = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.2..0.2));
        let b = Matrix3x2::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let refs = (0..=horizon)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let rm = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
        Self {
            a,
            b,
            x0: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            refs,
            q: random_spd3(rng, 0.0),
            r: rm * rm.transpose() + Matrix2::identity() * 0.1,
            qt: random_spd3(rng, 0.1),
            lo: Vector2::repeat(-1e6),
            hi: Vector2::repeat(1e6),
        }
    }

    /// Solves the equality-constrained QP over `(u_0..u_{T-1}, x_1..x_T)`
    /// by factorizing the full KKT matrix.
    pub fn kkt_solution(&self) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let t_max = self.refs.len() - 1;
        let nu = 2 * t_max;
        let nz = nu + 3 * t_max;
        let nc = 3 * t_max;
        let mut kkt = DMatrix::zeros(nz + nc, nz + nc);
        let mut rhs = DVector::zeros(nz + nc);
        let xi = |t: usize| nu + 3 * (t - 1);
        for t in 0..t_max {
            for i in 0..2 {
                for j in 0..2 {
                    kkt[(2 * t + i, 2 * t + j)] = 2.0 * self.r[(i, j)];
                }
            }
        }
        for t in 1..=t_max {
            let w = if t == t_max { &self.qt } else { &self.q };
            let lin = -2.0 * w * self.refs[t];
            for i in 0..3 {
                rhs[xi(t) + i] = -lin[i];
                for j in 0..3 {
                    kkt[(xi(t) + i, xi(t) + j)] = 2.0 * w[(i, j)];
                }
            }
        }
        // x_{t+1} - A_t x_t - B_t u_t = (A_0 x_0 when t = 0).
        for t in 0..t_max {
            let row = nz + 3 * t;
            let mut put = |r: usize, c: usize, v: f64| {
                kkt[(r, c)] = v;
                kkt[(c, r)] = v;
            };
            for i in 0..3 {
                put(row + i, xi(t + 1) + i, 1.0);
                for j in 0..2 {
                    put(row + i, 2 * t + j, -self.b[(i, j)]);
                }
                if t > 0 {
                    for j in 0..3 {
                        put(row + i, xi(t) + j, -self.a[(i, j)]);
                    }
                }
            }
            if t == 0 {
                let c = self.a * self.x0;
                for i in 0..3 {
                    rhs[row + i] = c[i];
                }
            }
        }
        let sol = kkt.lu().solve(&rhs).expect("non-singular KKT system");
        let us = (0..t_max).map(|t| Vector2::new(sol[2 * t], sol[2 * t + 1])).collect();
        let mut xs = vec![self.x0];
        xs.extend((1..=t_max).map(|t| Vector3::new(sol[xi(t)], sol[xi(t) + 1], sol[xi(t) + 2])));
        (xs, us)
    }
}

impl ControlProblem for LinearQuadratic {
    fn horizon(&self) -> usize {
        self.refs.len() - 1
    }
    fn initial_state(&self) -> Vector3<f64> {
        self.x0
    }
    fn bounds(&self) -> (Vector2<f64>, Vector2<f64>) {
        (self.lo, self.hi)
    }
    fn step(&self, x: &Vector3<f64>, u: &Vector2<f64>) -> Vector3<f64> {
        self.a * x + self.b * u
    }
    fn linearize(&self, _x: &Vector3<f64>, _u: &Vector2<f64>) -> (Matrix3<f64>, Matrix3x2<f64>) {
        (self.a, self.b)
    }
    fn dynamics_hessians(&self, _x: &Vector3<f64>, _u: &Vector2<f64>) -> StepHessians {
        [SMatrix::zeros(); 3]
    }
    fn stage(&self, t: usize, x: &Vector3<f64>, u: &Vector2<f64>, _exact: bool) -> CostDerivs {
        let e = x - self.refs[t];
        CostDerivs {
            value: e.dot(&(self.q * e)) + u.dot(&(self.r * u)),
            lx: 2.0 * self.q * e,
            lu: 2.0 * self.r * u,
            lxx: 2.0 * self.q,
            luu: 2.0 * self.r,
            lux: Matrix2x3::zeros(),
        }
    }
    fn terminal(&self, x: &Vector3<f64>, _exact: bool) -> CostDerivs {
        let e = x - self.refs[self.refs.len() - 1];
        CostDerivs {
            value: e.dot(&(self.qt * e)),
            lx: 2.0 * self.qt * e,
            lxx: 2.0 * self.qt,
            ..Default::default()
        }
    }
}

use kinoplan::dmpc::{MpcProblem, MpcWeights, SolverOptions};
use kinoplan::{Control2, KinematicModel, Pose2};

/// Dubins tracking problem around a perturbed feasible rollout, so the
/// optimum is mostly interior.
pub fn random_dubins_problem<R: Rng>(rng: &mut R, horizon: usize) -> MpcProblem {
    let model = KinematicModel::dubins(0.1, 1.5, 1.0).unwrap();
    let mut controls = Vec::with_capacity(horizon);
    let mut v: f64 = rng.random_range(0.4..1.2);
    let mut u: f64 = rng.random_range(-0.6..0.6);
    for _ in 0..horizon {
        v = (v + rng.random_range(-0.1..0.1)).clamp(0.3, 1.3);
        u = (u + rng.random_range(-0.2..0.2)).clamp(-0.8, 0.8);
        controls.push(Control2::new(v, u));
    }
    let base = model.rollout(&Pose2::identity(), &controls);
    let mut reference = vec![Pose2::identity()];
    for p in &base.states[1..] {
        reference.push(Pose2::new(
            p.x + rng.random_range(-0.05..0.05),
            p.y + rng.random_range(-0.05..0.05),
            p.psi + rng.random_range(-0.1..0.1),
        ));
    }
    MpcProblem::new(model, MpcWeights::default(), reference).unwrap()
}

/// Linear probe loss `sum_t g_t . x*_t` on the optimized states.
pub fn probe_loss(states: &[Pose2], g: &[Vector3<f64>]) -> f64 {
    states.iter().zip(g).map(|(s, gt)| s.to_vector().dot(gt)).sum()
}

/// Central differences of the probe loss through `solve` w.r.t. every
/// reference coordinate, warm-started from `init`.
pub fn fd_reference_gradient(p: &MpcProblem, g: &[Vector3<f64>], init: &[Control2], h: f64) -> Vec<Vector3<f64>> {
    let opts = SolverOptions::tight();
    let mut out = vec![Vector3::zeros(); p.reference.len()];
    for t in 0..p.reference.len() {
        for c in 0..3 {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let mut v = q.reference[t].to_vector();
                v[c] += delta;
                q.reference[t] = Pose2::from_vector(&v);
                let s = q.solve_from(init, &opts).unwrap();
                probe_loss(&s.states, g)
            };
            out[t][c] = (eval(h) - eval(-h)) / (2.0 * h);
        }
    }
    out
}

/// `max |a - b| / max(max |b|, floor)` over stacked vectors.
pub fn rel_err(a: &[Vector3<f64>], b: &[Vector3<f64>], floor: f64) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.amax()).fold(floor, f64::max);
    num / den
}

use kinoplan::config::Config;
use kinoplan::envsim::Archetype;
use kinoplan::nnplanner::{Architecture, PlannerParams};
use kinoplan::training::{Pipeline, PlanningSample, World};

/// Micro setup for end-to-end gradient checks: 8 beams, 2 waypoints, T = 5.
pub fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.network = Architecture::micro();
    cfg.sensor.beams = 8;
    cfg.train.horizon = 5;
    cfg
}

/// Relative error `|g - fd| / |fd|` (2-norms) between the analytic
/// parameter gradient of the total cost and central differences, for one
/// random parameter draw and scenario.
pub fn micro_chain_error(seed: u64) -> f64 {
    let cfg = micro_config();
    let mut pipeline = Pipeline::from_config(&cfg).unwrap();
    pipeline.solver = SolverOptions::tight();
    let archetype = [Archetype::Forest, Archetype::Campus][(seed % 2) as usize];
    let world = World::generate(archetype, 1000 + seed, &cfg).unwrap();
    let sample = PlanningSample::from_world(&world, 2000 + seed, &cfg).unwrap();
    let params = PlannerParams::init(cfg.network, seed).unwrap();
    let (_, grad) = pipeline.loss_and_grad(&params, &sample).unwrap();
    let loss = |p: &PlannerParams| pipeline.evaluate(p, &sample).unwrap().cost.total;
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..params.len() {
        let mut a = params.clone();
        a.values[i] += h;
        let mut b = params.clone();
        b.values[i] -= h;
        let fd = (loss(&a) - loss(&b)) / (2.0 * h);
        num += (grad.values[i] - fd).powi(2);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt().max(1e-9)
}
