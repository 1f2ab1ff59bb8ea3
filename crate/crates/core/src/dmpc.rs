//! Box-constrained iLQR tracking MPC with an implicit-differentiation
//! backward pass.
//!
//! The solver is generic over [`ControlProblem`] (three states, two
//! controls). [`MpcProblem`] is the SE(2) tracking instance: the error state
//! is the Lie logarithm of the pose relative to its reference, and the
//! objective is
//!
//! ```text
//! sum_{t<T} (e_t' Q e_t + u_t' R u_t) + e_T' Q_T e_T.
//! ```
//!
//! Forward iterations use a Gauss-Newton model of the objective, control
//! bounds are handled inside the backward pass by solving the small box QP
//! exactly and dropping clamped directions from the feedback gain.
//!
//! The backward pass freezes the problem at the returned optimum and solves
//! one auxiliary LQR built from the exact Lagrangian Hessian (cost curvature
//! plus costate-weighted dynamics curvature) with `dL/dtau*` as its linear
//! term. Controls sitting on a bound are held fixed in that LQR.

use log::{debug, warn};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, SymmetricEigen, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{Control2, KinematicModel, StepHessians};
use crate::se2::{half_cot, wrap_angle, Pose2};

/// Value, gradient and Hessian of one stage of the objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct CostDerivs {
    pub value: f64,
    pub lx: Vector3<f64>,
    pub lu: Vector2<f64>,
    pub lxx: Matrix3<f64>,
    pub luu: Matrix2<f64>,
    pub lux: Matrix2x3<f64>,
}

/// Discrete-time optimal control problem with 3 states and 2 box-bounded
/// controls. `t` runs over `0..horizon()`; the terminal cost sits at `T`.
pub trait ControlProblem {
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> Vector3<f64>;
    /// `(lower, upper)` control bounds.
    fn bounds(&self) -> (Vector2<f64>, Vector2<f64>);
    fn step(&self, x: &Vector3<f64>, u: &Vector2<f64>) -> Vector3<f64>;
    fn linearize(&self, x: &Vector3<f64>, u: &Vector2<f64>) -> (Matrix3<f64>, Matrix3x2<f64>);
    /// Hessians of each output of `step` w.r.t. the stacked `(x, u)`.
    fn dynamics_hessians(&self, x: &Vector3<f64>, u: &Vector2<f64>) -> StepHessians;
    /// Difference used for feedback, `a - b` in the state chart.
    fn state_diff(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
        a - b
    }
    /// Stage derivatives; `exact` asks for the true Hessian instead of the
    /// Gauss-Newton one.
    fn stage(&self, t: usize, x: &Vector3<f64>, u: &Vector2<f64>, exact: bool) -> CostDerivs;
    fn terminal(&self, x: &Vector3<f64>, exact: bool) -> CostDerivs;
    fn stage_value(&self, t: usize, x: &Vector3<f64>, u: &Vector2<f64>) -> f64 {
        self.stage(t, x, u, false).value
    }
    fn terminal_value(&self, x: &Vector3<f64>) -> f64 {
        self.terminal(x, false).value
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when the relative objective decrease of an accepted step falls below this.
    pub rel_tol: f64,
    /// Stop when the projected gradient (max-norm) falls below this.
    pub grad_tol: f64,
    pub reg_init: f64,
    pub reg_factor: f64,
    pub reg_max: f64,
    pub max_line_search: usize,
    /// Use the exact Hessian (full DDP) in forward iterations when it is
    /// positive definite, falling back to Gauss-Newton otherwise.
    pub exact_hessian: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            rel_tol: 1e-8,
            grad_tol: 1e-8,
            reg_init: 1e-6,
            reg_factor: 10.0,
            reg_max: 1e4,
            max_line_search: 20,
            exact_hessian: false,
        }
    }
}

impl SolverOptions {
    /// Settings for reference solutions in tests and gradient checks.
    pub fn tight() -> Self {
        Self {
            max_iterations: 500,
            rel_tol: 0.0,
            grad_tol: 1e-11,
            exact_hessian: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct IlqrResult {
    pub states: Vec<Vector3<f64>>,
    pub controls: Vec<Vector2<f64>>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Projected gradient max-norm at the returned iterate.
    pub grad_norm: f64,
    /// Per control component: sitting on a bound.
    pub active: Vec<[bool; 2]>,
    /// Objective after every accepted iteration, starting with the initial guess.
    pub history: Vec<f64>,
}

fn clamp_u(u: &Vector2<f64>, lo: &Vector2<f64>, hi: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(u[0].clamp(lo[0], hi[0]), u[1].clamp(lo[1], hi[1]))
}

pub fn rollout<P: ControlProblem>(p: &P, controls: &[Vector2<f64>]) -> Vec<Vector3<f64>> {
    let mut xs = Vec::with_capacity(controls.len() + 1);
    let mut x = p.initial_state();
    xs.push(x);
    for u in controls {
        x = p.step(&x, u);
        xs.push(x);
    }
    xs
}

pub fn objective<P: ControlProblem>(p: &P, xs: &[Vector3<f64>], us: &[Vector2<f64>]) -> f64 {
    let t_max = us.len();
    let stages: f64 = (0..t_max).map(|t| p.stage_value(t, &xs[t], &us[t])).sum();
    stages + p.terminal_value(&xs[t_max])
}

/// Exact objective gradient w.r.t. the controls via the adjoint recursion.
pub fn control_gradient<P: ControlProblem>(p: &P, xs: &[Vector3<f64>], us: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let t_max = us.len();
    let mut lam = p.terminal(&xs[t_max], false).lx;
    let mut g = vec![Vector2::zeros(); t_max];
    for t in (0..t_max).rev() {
        let (a, b) = p.linearize(&xs[t], &us[t]);
        let c = p.stage(t, &xs[t], &us[t], false);
        g[t] = c.lu + b.transpose() * lam;
        lam = c.lx + a.transpose() * lam;
    }
    g
}

const BOUND_EPS: f64 = 1e-10;

fn at_bounds(u: &Vector2<f64>, lo: &Vector2<f64>, hi: &Vector2<f64>) -> [bool; 2] {
    [0, 1].map(|i| u[i] <= lo[i] + BOUND_EPS || u[i] >= hi[i] - BOUND_EPS)
}

fn projected_norm(g: &[Vector2<f64>], us: &[Vector2<f64>], lo: &Vector2<f64>, hi: &Vector2<f64>) -> f64 {
    let mut n: f64 = 0.0;
    for (gt, u) in g.iter().zip(us) {
        for i in 0..2 {
            let blocked = (u[i] <= lo[i] + BOUND_EPS && gt[i] > 0.0) || (u[i] >= hi[i] - BOUND_EPS && gt[i] < 0.0);
            if !blocked {
                n = n.max(gt[i].abs());
            }
        }
    }
    n
}

/// Minimizes `0.5 d'H d + g'd` over `lo <= d <= hi` for a 2x2 positive
/// definite `H` by checking the interior stationary point and the optimum on
/// each edge. Returns the minimizer and which components are clamped.
fn box_qp_2d(h: &Matrix2<f64>, g: &Vector2<f64>, lo: &Vector2<f64>, hi: &Vector2<f64>) -> Option<(Vector2<f64>, [bool; 2])> {
    let chol = h.cholesky()?;
    let f = |d: &Vector2<f64>| 0.5 * d.dot(&(h * d)) + g.dot(d);
    let inside = |d: &Vector2<f64>| (0..2).all(|i| d[i] >= lo[i] && d[i] <= hi[i]);
    let free = -chol.solve(g);
    if inside(&free) {
        return Some((free, [false, false]));
    }
    let mut best: Option<(f64, Vector2<f64>, [bool; 2])> = None;
    for i in 0..2 {
        let j = 1 - i;
        for b in [lo[i], hi[i]] {
            let mut d = Vector2::zeros();
            d[i] = b;
            let dj = -(g[j] + h[(j, i)] * b) / h[(j, j)];
            d[j] = dj.clamp(lo[j], hi[j]);
            let mut clamped = [false; 2];
            clamped[i] = true;
            clamped[j] = d[j] != dj;
            let v = f(&d);
            if best.as_ref().map_or(true, |(bv, _, _)| v < *bv) {
                best = Some((v, d, clamped));
            }
        }
    }
    best.map(|(_, d, c)| (d, c))
}

struct Gains {
    k: Vec<Vector2<f64>>,
    big_k: Vec<Matrix2x3<f64>>,
}

struct Linearization {
    a: Vec<Matrix3<f64>>,
    b: Vec<Matrix3x2<f64>>,
    stage: Vec<CostDerivs>,
    terminal: CostDerivs,
    hess: Option<Vec<StepHessians>>,
}

fn linearize_all<P: ControlProblem>(p: &P, xs: &[Vector3<f64>], us: &[Vector2<f64>], exact: bool) -> Linearization {
    let t_max = us.len();
    let mut a = Vec::with_capacity(t_max);
    let mut b = Vec::with_capacity(t_max);
    let mut stage = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let (at, bt) = p.linearize(&xs[t], &us[t]);
        a.push(at);
        b.push(bt);
        stage.push(p.stage(t, &xs[t], &us[t], exact));
    }
    let hess = exact.then(|| (0..t_max).map(|t| p.dynamics_hessians(&xs[t], &us[t])).collect());
    Linearization {
        a,
        b,
        stage,
        terminal: p.terminal(&xs[t_max], exact),
        hess,
    }
}

/// Adds `sum_i w_i * hess_i` split into state/control blocks.
fn add_curvature(
    w: &Vector3<f64>,
    hess: &StepHessians,
    qxx: &mut Matrix3<f64>,
    quu: &mut Matrix2<f64>,
    qux: &mut Matrix2x3<f64>,
) {
    for (i, h) in hess.iter().enumerate() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        *qxx += wi * h.fixed_view::<3, 3>(0, 0);
        *quu += wi * h.fixed_view::<2, 2>(3, 3);
        *qux += wi * h.fixed_view::<2, 3>(3, 0);
    }
}

fn backward_pass(
    lin: &Linearization,
    us: &[Vector2<f64>],
    lo: &Vector2<f64>,
    hi: &Vector2<f64>,
    reg: f64,
) -> Option<Gains> {
    let t_max = us.len();
    let mut vx = lin.terminal.lx;
    let mut vxx = lin.terminal.lxx;
    let mut k = vec![Vector2::zeros(); t_max];
    let mut big_k = vec![Matrix2x3::zeros(); t_max];
    for t in (0..t_max).rev() {
        let (a, b, c) = (&lin.a[t], &lin.b[t], &lin.stage[t]);
        let qx = c.lx + a.transpose() * vx;
        let qu = c.lu + b.transpose() * vx;
        let mut qxx = c.lxx + a.transpose() * vxx * a;
        let mut quu = c.luu + b.transpose() * vxx * b;
        let mut qux = c.lux + b.transpose() * vxx * a;
        if let Some(h) = &lin.hess {
            add_curvature(&vx, &h[t], &mut qxx, &mut quu, &mut qux);
        }
        let quu_reg = quu + Matrix2::identity() * reg;
        let (kt, clamped) = box_qp_2d(&quu_reg, &qu, &(lo - us[t]), &(hi - us[t]))?;
        let mut kk = Matrix2x3::zeros();
        match clamped {
            [false, false] => {
                let inv = quu_reg.try_inverse()?;
                kk = -inv * qux;
            }
            [true, true] => {}
            [c0, _] => {
                let f = if c0 { 1 } else { 0 };
                let d = quu_reg[(f, f)];
                if d <= 0.0 {
                    return None;
                }
                let row = -qux.row(f) / d;
                kk.set_row(f, &row);
            }
        }
        vx = qx + kk.transpose() * quu * kt + kk.transpose() * qu + qux.transpose() * kt;
        vxx = qxx + kk.transpose() * quu * kk + kk.transpose() * qux + qux.transpose() * kk;
        vxx = 0.5 * (vxx + vxx.transpose());
        k[t] = kt;
        big_k[t] = kk;
    }
    Some(Gains { k, big_k })
}

fn forward_pass<P: ControlProblem>(
    p: &P,
    xs: &[Vector3<f64>],
    us: &[Vector2<f64>],
    gains: &Gains,
    alpha: f64,
    lo: &Vector2<f64>,
    hi: &Vector2<f64>,
) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
    let t_max = us.len();
    let mut xn = Vec::with_capacity(t_max + 1);
    let mut un = Vec::with_capacity(t_max);
    let mut x = p.initial_state();
    xn.push(x);
    for t in 0..t_max {
        let dx = p.state_diff(&x, &xs[t]);
        let u = clamp_u(&(us[t] + alpha * gains.k[t] + gains.big_k[t] * dx), lo, hi);
        x = p.step(&x, &u);
        un.push(u);
        xn.push(x);
    }
    (xn, un)
}

/// Runs box-constrained iLQR from `init` (clamped into the bounds).
pub fn solve_ilqr<P: ControlProblem>(p: &P, init: &[Vector2<f64>], opts: &SolverOptions) -> Result<IlqrResult> {
    let t_max = p.horizon();
    if init.len() != t_max {
        return Err(Error::InvalidProblem(format!(
            "initial guess has {} controls for horizon {t_max}",
            init.len()
        )));
    }
    let (lo, hi) = p.bounds();
    let mut us: Vec<Vector2<f64>> = init.iter().map(|u| clamp_u(u, &lo, &hi)).collect();
    let mut xs = rollout(p, &us);
    let mut j = objective(p, &xs, &us);
    let mut history = vec![j];
    let mut reg = opts.reg_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    while iterations < opts.max_iterations {
        let grad = control_gradient(p, &xs, &us);
        grad_norm = projected_norm(&grad, &us, &lo, &hi);
        if grad_norm < opts.grad_tol {
            converged = true;
            break;
        }
        let mut lin = linearize_all(p, &xs, &us, opts.exact_hessian);
        let gains = loop {
            match backward_pass(&lin, &us, &lo, &hi, reg) {
                Some(g) => break Some(g),
                None if lin.hess.is_some() => {
                    // Exact curvature is indefinite here; fall back to Gauss-Newton.
                    lin = linearize_all(p, &xs, &us, false);
                }
                None => {
                    reg *= opts.reg_factor;
                    if reg > opts.reg_max {
                        break None;
                    }
                }
            }
        };
        let Some(gains) = gains else {
            return Err(Error::IllConditioned(reg));
        };

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_line_search {
            let (xn, un) = forward_pass(p, &xs, &us, &gains, alpha, &lo, &hi);
            let jn = objective(p, &xn, &un);
            if jn < j {
                accepted = Some((xn, un, jn));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((xn, un, jn)) => {
                let rel = (j - jn) / j.abs().max(f64::MIN_POSITIVE);
                xs = xn;
                us = un;
                j = jn;
                history.push(j);
                iterations += 1;
                reg = (reg / opts.reg_factor).max(opts.reg_init);
                if rel < opts.rel_tol {
                    converged = true;
                    grad_norm = projected_norm(&control_gradient(p, &xs, &us), &us, &lo, &hi);
                    break;
                }
            }
            None => {
                reg *= opts.reg_factor;
                if reg > opts.reg_max {
                    debug!("iLQR line search exhausted (grad {grad_norm:.3e})");
                    break;
                }
            }
        }
    }
    if !converged && iterations >= opts.max_iterations {
        grad_norm = projected_norm(&control_gradient(p, &xs, &us), &us, &lo, &hi);
        converged = grad_norm < opts.grad_tol;
    }
    let active = us.iter().map(|u| at_bounds(u, &lo, &hi)).collect();
    Ok(IlqrResult {
        states: xs,
        controls: us,
        objective: j,
        converged,
        iterations,
        grad_norm,
        active,
        history,
    })
}

/// Solves the auxiliary LQR at a fixed point. Returns the state
/// perturbations `dx_t` of the minimizer of
/// `sum 0.5 dz' H_t dz + grad_states_t' dx_t` under the linearized dynamics
/// with `dx_0 = 0` and active control components frozen, where `H_t` is the
/// exact Lagrangian Hessian. For a gradient `g = dL/dx*`, `dx` is minus the
/// solution of `K w = g`.
pub fn implicit_state_sensitivity<P: ControlProblem>(
    p: &P,
    sol: &IlqrResult,
    grad_states: &[Vector3<f64>],
    opts: &SolverOptions,
) -> Result<Vec<Vector3<f64>>> {
    let t_max = sol.controls.len();
    if grad_states.len() != t_max + 1 {
        return Err(Error::InvalidProblem(format!(
            "gradient has {} states, expected {}",
            grad_states.len(),
            t_max + 1
        )));
    }
    let xs = &sol.states;
    let us = &sol.controls;
    let lin = linearize_all(p, xs, us, true);
    let hess = lin.hess.as_ref().expect("exact linearization");

    // Costates of the exact problem: lam_{t} multiplies x_{t} = F(x_{t-1}, u_{t-1}).
    let mut lam = vec![Vector3::zeros(); t_max + 1];
    lam[t_max] = lin.terminal.lx;
    for t in (1..t_max).rev() {
        lam[t] = lin.stage[t].lx + lin.a[t].transpose() * lam[t + 1];
    }

    let mut reg = 0.0;
    loop {
        if let Some(dx) = aux_riccati(&lin, hess, &lam, &sol.active, grad_states, reg) {
            return Ok(dx);
        }
        reg = if reg == 0.0 { opts.reg_init } else { reg * opts.reg_factor };
        if reg > opts.reg_max {
            return Err(Error::SingularFeedback(reg));
        }
    }
}

fn aux_riccati(
    lin: &Linearization,
    hess: &[StepHessians],
    lam: &[Vector3<f64>],
    active: &[[bool; 2]],
    g: &[Vector3<f64>],
    reg: f64,
) -> Option<Vec<Vector3<f64>>> {
    let t_max = lin.a.len();
    let mut vxx = lin.terminal.lxx;
    let mut vx = g[t_max];
    let mut k = vec![Vector2::zeros(); t_max];
    let mut big_k = vec![Matrix2x3::zeros(); t_max];
    for t in (0..t_max).rev() {
        let (a, b, c) = (&lin.a[t], &lin.b[t], &lin.stage[t]);
        let mut hxx = c.lxx;
        let mut huu = c.luu;
        let mut hux = c.lux;
        add_curvature(&lam[t + 1], &hess[t], &mut hxx, &mut huu, &mut hux);
        let qxx = hxx + a.transpose() * vxx * a;
        let quu = huu + b.transpose() * vxx * b + Matrix2::identity() * reg;
        let qux = hux + b.transpose() * vxx * a;
        let qx = g[t] + a.transpose() * vx;
        let qu = b.transpose() * vx;
        let free: Vec<usize> = (0..2).filter(|&i| !active[t][i]).collect();
        let (kt, kk) = match free.len() {
            2 => {
                let chol = quu.cholesky()?;
                (-chol.solve(&qu), -chol.solve(&qux))
            }
            1 => {
                let f = free[0];
                let d = quu[(f, f)];
                if !(d > 0.0) {
                    return None;
                }
                let mut kt = Vector2::zeros();
                kt[f] = -qu[f] / d;
                let mut kk = Matrix2x3::zeros();
                kk.set_row(f, &(-qux.row(f) / d));
                (kt, kk)
            }
            _ => (Vector2::zeros(), Matrix2x3::zeros()),
        };
        vx = qx + kk.transpose() * quu * kt + kk.transpose() * qu + qux.transpose() * kt;
        vxx = qxx + kk.transpose() * quu * kk + kk.transpose() * qux + qux.transpose() * kk;
        vxx = 0.5 * (vxx + vxx.transpose());
        k[t] = kt;
        big_k[t] = kk;
    }
    let mut dx = vec![Vector3::zeros(); t_max + 1];
    for t in 0..t_max {
        let du = k[t] + big_k[t] * dx[t];
        dx[t + 1] = lin.a[t] * dx[t] + lin.b[t] * du;
    }
    dx.iter().all(|v| v.iter().all(|c| c.is_finite())).then_some(dx)
}

// ---------------------------------------------------------------------------
// SE(2) tracking instance.

/// Error state `log(ref^-1 x)` with its Jacobians w.r.t. the state and the
/// reference (both in `(x, y, psi)` coordinates).
#[derive(Clone, Copy, Debug)]
pub struct TrackingError {
    pub error: Vector3<f64>,
    pub d_state: Matrix3<f64>,
    pub d_ref: Matrix3<f64>,
}

/// Everything needed for first and second derivatives of the error state.
struct ErrorGeometry {
    /// Relative pose coordinates `(dp_x, dp_y, dpsi)`.
    e: Vector3<f64>,
    /// `d e / d x`.
    m: Matrix3<f64>,
    /// `d e / d ref`.
    er: Matrix3<f64>,
    /// `d err / d e`.
    je: Matrix3<f64>,
    err: Vector3<f64>,
    da: f64,
    dda: f64,
    ref_psi: f64,
}

fn error_geometry(x: &Vector3<f64>, r: &Pose2) -> ErrorGeometry {
    let (s, c) = r.psi.sin_cos();
    let dx = x[0] - r.x;
    let dy = x[1] - r.y;
    let e = Vector3::new(c * dx + s * dy, -s * dx + c * dy, wrap_angle(x[2] - r.psi));
    let m = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
    let er = Matrix3::new(-c, -s, e[1], s, -c, -e[0], 0.0, 0.0, -1.0);
    let w = e[2];
    let (a, da, dda) = half_cot(w);
    let b = 0.5 * w;
    let err = Vector3::new(a * e[0] + b * e[1], -b * e[0] + a * e[1], w);
    let je = Matrix3::new(
        a,
        b,
        da * e[0] + 0.5 * e[1],
        -b,
        a,
        -0.5 * e[0] + da * e[1],
        0.0,
        0.0,
        1.0,
    );
    ErrorGeometry {
        e,
        m,
        er,
        je,
        err,
        da,
        dda,
        ref_psi: r.psi,
    }
}

pub fn tracking_error(x: &Pose2, r: &Pose2) -> TrackingError {
    let g = error_geometry(&x.to_vector(), r);
    TrackingError {
        error: g.err,
        d_state: g.je * g.m,
        d_ref: g.je * g.er,
    }
}

/// Derivatives of `err' W err` for a symmetric weight `W`.
struct QuadErrorDerivs {
    value: f64,
    grad_x: Vector3<f64>,
    hess_x: Matrix3<f64>,
    /// `d^2 / (dx dref)`, rows state, columns reference.
    hess_xr: Matrix3<f64>,
}

fn quad_error_derivs(x: &Vector3<f64>, r: &Pose2, w: &Matrix3<f64>, exact: bool) -> QuadErrorDerivs {
    let g = error_geometry(x, r);
    let we = w * g.err;
    let value = g.err.dot(&we);
    let grad_e = 2.0 * g.je.transpose() * we;
    let mut hess_e = 2.0 * g.je.transpose() * w * g.je;
    if exact {
        // Second derivatives of the two translational error components.
        let h1 = Matrix3::new(0.0, 0.0, g.da, 0.0, 0.0, 0.5, g.da, 0.5, g.dda * g.e[0]);
        let h2 = Matrix3::new(0.0, 0.0, -0.5, 0.0, 0.0, g.da, -0.5, g.da, g.dda * g.e[1]);
        hess_e += 2.0 * (we[0] * h1 + we[1] * h2);
    }
    let grad_x = g.m.transpose() * grad_e;
    let hess_x = g.m.transpose() * hess_e * g.m;
    let mut hess_xr = g.m.transpose() * hess_e * g.er;
    // d(M')/d ref_psi applied to grad_e.
    let (s, c) = g.ref_psi.sin_cos();
    hess_xr[(0, 2)] += -s * grad_e[0] - c * grad_e[1];
    hess_xr[(1, 2)] += c * grad_e[0] - s * grad_e[1];
    QuadErrorDerivs {
        value,
        grad_x,
        hess_x,
        hess_xr,
    }
}

/// Weights of the tracking objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpcWeights {
    pub q: Matrix3<f64>,
    pub r: Matrix2<f64>,
    pub q_terminal: Matrix3<f64>,
}

impl Default for MpcWeights {
    fn default() -> Self {
        let q = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.25));
        Self {
            q,
            r: Matrix2::from_diagonal(&Vector2::new(0.1, 0.1)),
            q_terminal: 10.0 * q,
        }
    }
}

impl MpcWeights {
    pub fn diagonal(q: [f64; 3], r: [f64; 2], terminal_scale: f64) -> Self {
        let q = Matrix3::from_diagonal(&Vector3::from(q));
        Self {
            q,
            r: Matrix2::from_diagonal(&Vector2::from(r)),
            q_terminal: terminal_scale * q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sym3 = |m: &Matrix3<f64>| (m - m.transpose()).amax() < 1e-12;
        if !sym3(&self.q) || !sym3(&self.q_terminal) || (self.r - self.r.transpose()).amax() >= 1e-12 {
            return Err(Error::InvalidProblem("weights must be symmetric".into()));
        }
        let min_q = SymmetricEigen::new(self.q).eigenvalues.min();
        let min_qt = SymmetricEigen::new(self.q_terminal).eigenvalues.min();
        let min_r = SymmetricEigen::new(self.r).eigenvalues.min();
        if min_q < -1e-12 || min_qt < -1e-12 {
            return Err(Error::InvalidProblem("state weights must be PSD".into()));
        }
        if min_r <= 0.0 {
            return Err(Error::InvalidProblem("control weight must be PD".into()));
        }
        Ok(())
    }
}

/// Tracking MPC over SE(2) kinematics.
#[derive(Clone, Debug)]
pub struct MpcProblem {
    pub model: KinematicModel,
    pub weights: MpcWeights,
    /// `T + 1` reference poses, index 0 paired with the initial state.
    pub reference: Vec<Pose2>,
    pub x0: Pose2,
}

#[derive(Clone, Debug)]
pub struct MpcSolution {
    pub states: Vec<Pose2>,
    pub controls: Vec<Control2>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub active_set: Vec<[bool; 2]>,
    pub history: Vec<f64>,
    raw: IlqrResult,
}

impl MpcSolution {
    pub fn raw(&self) -> &IlqrResult {
        &self.raw
    }
}

fn to_u(c: &Control2) -> Vector2<f64> {
    Vector2::new(c.v, c.u)
}

fn to_c(u: &Vector2<f64>) -> Control2 {
    Control2::new(u[0], u[1])
}

impl MpcProblem {
    /// Problem starting at the origin, as used for planning in the body frame.
    pub fn new(model: KinematicModel, weights: MpcWeights, reference: Vec<Pose2>) -> Result<Self> {
        Self::with_start(model, weights, reference, Pose2::identity())
    }

    pub fn with_start(model: KinematicModel, weights: MpcWeights, reference: Vec<Pose2>, x0: Pose2) -> Result<Self> {
        model.validate()?;
        weights.validate()?;
        if reference.len() < 2 {
            return Err(Error::InvalidProblem(format!(
                "reference needs at least 2 poses, got {}",
                reference.len()
            )));
        }
        if reference.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidProblem("non-finite reference".into()));
        }
        Ok(Self {
            model,
            weights,
            reference,
            x0,
        })
    }

    pub fn t(&self) -> usize {
        self.reference.len() - 1
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<MpcSolution> {
        self.solve_from(&vec![Control2::default(); self.t()], opts)
    }

    /// Solves from a given control guess (e.g. a shifted previous solution).
    pub fn solve_from(&self, init: &[Control2], opts: &SolverOptions) -> Result<MpcSolution> {
        let init: Vec<Vector2<f64>> = init.iter().map(to_u).collect();
        let raw = solve_ilqr(self, &init, opts)?;
        Ok(MpcSolution {
            states: raw.states.iter().map(Pose2::from_vector).collect(),
            controls: raw.controls.iter().map(to_c).collect(),
            objective: raw.objective,
            converged: raw.converged,
            iterations: raw.iterations,
            grad_norm: raw.grad_norm,
            active_set: raw.active.clone(),
            history: raw.history.clone(),
            raw,
        })
    }

    /// Gradient of a loss on the optimized states w.r.t. the reference
    /// poses, through the optimum. `grad_out[t]` is `dL/dx*_t` in
    /// `(x, y, psi)` coordinates; the result has the same layout over the
    /// reference. Entry 0 is always zero: the initial state is fixed.
    pub fn backward(&self, sol: &MpcSolution, grad_out: &[Vector3<f64>], opts: &SolverOptions) -> Result<Vec<Vector3<f64>>> {
        if !sol.converged {
            warn!("differentiating a non-converged MPC solution (grad {:.3e})", sol.grad_norm);
        }
        let t_max = self.t();
        if grad_out.iter().all(|g| *g == Vector3::zeros()) {
            return Ok(vec![Vector3::zeros(); t_max + 1]);
        }
        let dx = implicit_state_sensitivity(self, &sol.raw, grad_out, opts)?;
        let mut grad_ref = vec![Vector3::zeros(); t_max + 1];
        for t in 1..=t_max {
            let w = if t == t_max { &self.weights.q_terminal } else { &self.weights.q };
            let d = quad_error_derivs(&sol.raw.states[t], &self.reference[t], w, true);
            grad_ref[t] = d.hess_xr.transpose() * dx[t];
        }
        Ok(grad_ref)
    }

    /// The tracking objective evaluated on an arbitrary state/control sequence.
    pub fn tracking_objective(&self, states: &[Pose2], controls: &[Control2]) -> f64 {
        let t_max = self.t();
        assert_eq!(states.len(), t_max + 1, "state count");
        assert_eq!(controls.len(), t_max, "control count");
        let mut total = 0.0;
        for t in 0..t_max {
            let e = tracking_error(&states[t], &self.reference[t]).error;
            let u = to_u(&controls[t]);
            total += e.dot(&(self.weights.q * e)) + u.dot(&(self.weights.r * u));
        }
        let e = tracking_error(&states[t_max], &self.reference[t_max]).error;
        total + e.dot(&(self.weights.q_terminal * e))
    }
}

impl ControlProblem for MpcProblem {
    fn horizon(&self) -> usize {
        self.t()
    }

    fn initial_state(&self) -> Vector3<f64> {
        self.x0.to_vector()
    }

    fn bounds(&self) -> (Vector2<f64>, Vector2<f64>) {
        let b = &self.model.bounds;
        (Vector2::new(b.v_min, -b.u_max), Vector2::new(b.v_max, b.u_max))
    }

    fn step(&self, x: &Vector3<f64>, u: &Vector2<f64>) -> Vector3<f64> {
        self.model.step(&Pose2::from_vector(x), &to_c(u)).to_vector()
    }

    fn linearize(&self, x: &Vector3<f64>, u: &Vector2<f64>) -> (Matrix3<f64>, Matrix3x2<f64>) {
        self.model.jacobians(&Pose2::from_vector(x), &to_c(u))
    }

    fn dynamics_hessians(&self, x: &Vector3<f64>, u: &Vector2<f64>) -> StepHessians {
        self.model.hessians(&Pose2::from_vector(x), &to_c(u))
    }

    fn state_diff(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(a[0] - b[0], a[1] - b[1], wrap_angle(a[2] - b[2]))
    }

    fn stage(&self, t: usize, x: &Vector3<f64>, u: &Vector2<f64>, exact: bool) -> CostDerivs {
        let q = quad_error_derivs(x, &self.reference[t], &self.weights.q, exact);
        let r = &self.weights.r;
        CostDerivs {
            value: q.value + u.dot(&(r * u)),
            lx: q.grad_x,
            lu: 2.0 * r * u,
            lxx: q.hess_x,
            luu: 2.0 * r,
            lux: Matrix2x3::zeros(),
        }
    }

    fn terminal(&self, x: &Vector3<f64>, exact: bool) -> CostDerivs {
        let q = quad_error_derivs(x, &self.reference[self.t()], &self.weights.q_terminal, exact);
        CostDerivs {
            value: q.value,
            lx: q.grad_x,
            lxx: q.hess_x,
            ..Default::default()
        }
    }
}
