//! Corridor-constrained minimum-jerk trajectory optimization.
//!
//! Decision variables are the `N` per-interval jerks (3N scalars). Every
//! knot state is an affine function of them, so dynamics and terminal
//! conditions become linear rows. Interval `n` may be assigned to
//! polyhedron `p`, which activates containment rows for its four Bézier
//! control points. Assignments are searched by branch and bound over
//! per-interval polyhedron choices, with each node solved as a QP.

pub mod qp;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::corridor::{Corridor, Polyhedron};
use crate::trajectory::{FullState, Trajectory};
use crate::Point3;

use qp::{solve_qp, QpError};

/// Containment tolerance used when re-checking solutions.
pub const FEAS_TOL: f64 = 1e-7;
/// Required KKT accuracy of accepted QP solutions.
pub const KKT_TOL: f64 = 1e-7;
/// Smallest interval duration handed to the solver.
pub const MIN_DT: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("QP solver failed numerically")]
    NumericalFailure,
    #[error("search budget exhausted")]
    TimeBudgetExceeded,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Per-axis bounds on velocity, acceleration and jerk.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DynamicLimits {
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
}

impl DynamicLimits {
    pub fn new(v_max: f64, a_max: f64, j_max: f64) -> Result<Self, SolveError> {
        if [v_max, a_max, j_max].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(Self { v_max, a_max, j_max })
        } else {
            Err(SolveError::InvalidProblem(format!(
                "limits must be positive, got ({v_max}, {a_max}, {j_max})"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Terminal {
    /// Reach exactly this state.
    Fixed(FullState),
    /// Stop (zero velocity and acceleration) anywhere inside the corridor.
    FreePositionRest,
}

#[derive(Clone, Debug)]
pub struct MiqpProblem {
    pub n_intervals: usize,
    pub corridor: Corridor,
    pub x_init: FullState,
    pub terminal: Terminal,
    pub dt: f64,
    pub limits: DynamicLimits,
}

impl MiqpProblem {
    pub fn new(
        n_intervals: usize,
        corridor: Corridor,
        x_init: FullState,
        terminal: Terminal,
        dt: f64,
        limits: DynamicLimits,
    ) -> Result<Self, SolveError> {
        let p = Self { n_intervals, corridor, x_init, terminal, dt, limits };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), SolveError> {
        if self.n_intervals == 0 {
            return Err(SolveError::InvalidProblem("need at least one interval".into()));
        }
        if self.corridor.is_empty() {
            return Err(SolveError::InvalidProblem("corridor has no polyhedra".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SolveError::InvalidProblem(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.x_init.is_finite() {
            return Err(SolveError::InvalidProblem("initial state is not finite".into()));
        }
        Ok(())
    }

    pub fn num_polyhedra(&self) -> usize {
        self.corridor.len()
    }

    /// Plain-text listing of the instance.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let v = |p: &Point3| format!("{} {} {}", p.x, p.y, p.z);
        let _ = writeln!(s, "N {}", self.n_intervals);
        let _ = writeln!(s, "dt {}", self.dt);
        let _ = writeln!(s, "limits {} {} {}", self.limits.v_max, self.limits.a_max, self.limits.j_max);
        let _ = writeln!(s, "init {} | {} | {}", v(&self.x_init.pos), v(&self.x_init.vel), v(&self.x_init.acc));
        match &self.terminal {
            Terminal::Fixed(x) => {
                let _ = writeln!(s, "terminal fixed {} | {} | {}", v(&x.pos), v(&x.vel), v(&x.acc));
            }
            Terminal::FreePositionRest => {
                let _ = writeln!(s, "terminal free-rest");
            }
        }
        s.push_str(&self.corridor.to_text());
        s
    }
}

/// Affine scalar `Σ coef[m]·j_m[axis] + constant[axis]`, identical in
/// structure for the three axes.
#[derive(Clone, Debug)]
struct Affine {
    coef: Vec<f64>,
    constant: Point3,
}

impl Affine {
    fn combine(terms: &[(f64, &Affine)]) -> Affine {
        let n = terms[0].1.coef.len();
        let mut coef = vec![0.0; n];
        let mut constant = Point3::zeros();
        for (w, a) in terms {
            for (c, ac) in coef.iter_mut().zip(&a.coef) {
                *c += w * ac;
            }
            constant += a.constant * *w;
        }
        Affine { coef, constant }
    }

    #[cfg(test)]
    fn eval(&self, jerks: &[Point3]) -> Point3 {
        self.coef.iter().zip(jerks).fold(self.constant, |acc, (c, j)| acc + j * *c)
    }
}

/// Knot states and control points as affine functions of the jerks.
struct Model {
    pos: Vec<Affine>,
    vel: Vec<Affine>,
    acc: Vec<Affine>,
    dt: f64,
}

impl Model {
    fn new(x0: &FullState, n: usize, dt: f64) -> Self {
        let constant = |c: Point3| Affine { coef: vec![0.0; n], constant: c };
        let mut pos = vec![constant(x0.pos)];
        let mut vel = vec![constant(x0.vel)];
        let mut acc = vec![constant(x0.acc)];
        for k in 0..n {
            let mut jerk = constant(Point3::zeros());
            jerk.coef[k] = 1.0;
            let (p, v, a) = (&pos[k], &vel[k], &acc[k]);
            let na = Affine::combine(&[(1.0, a), (dt, &jerk)]);
            let nv = Affine::combine(&[(1.0, v), (dt, a), (dt * dt / 2.0, &jerk)]);
            let np = Affine::combine(&[(1.0, p), (dt, v), (dt * dt / 2.0, a), (dt * dt * dt / 6.0, &jerk)]);
            pos.push(np);
            vel.push(nv);
            acc.push(na);
        }
        Self { pos, vel, acc, dt }
    }

    /// Control point `k` of interval `n`.
    fn control_point(&self, n: usize, k: usize) -> Affine {
        let dt = self.dt;
        match k {
            0 => self.pos[n].clone(),
            1 => Affine::combine(&[(1.0, &self.pos[n]), (dt / 3.0, &self.vel[n])]),
            2 => Affine::combine(&[
                (1.0, &self.pos[n]),
                (2.0 * dt / 3.0, &self.vel[n]),
                (dt * dt / 6.0, &self.acc[n]),
            ]),
            _ => self.pos[n + 1].clone(),
        }
    }
}

/// Linear rows accumulated in `A x ≤ b` / `A x = b` form.
struct Rows {
    nvar: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn new(nvar: usize) -> Self {
        Self { nvar, a: Vec::new(), b: Vec::new() }
    }

    /// `h · P ≤ c` for an affine point `P`.
    fn push_dot(&mut self, h: &Point3, p: &Affine, c: f64) {
        let start = self.a.len();
        self.a.resize(start + self.nvar, 0.0);
        for (m, coef) in p.coef.iter().enumerate() {
            for k in 0..3 {
                self.a[start + 3 * m + k] = h[k] * coef;
            }
        }
        self.b.push(c - h.dot(&p.constant));
    }

    fn push_jerk_axis(&mut self, m: usize, axis: usize, sign: f64, c: f64) {
        let start = self.a.len();
        self.a.resize(start + self.nvar, 0.0);
        self.a[start + 3 * m + axis] = sign;
        self.b.push(c);
    }

    fn matrices(&self) -> (DMatrix<f64>, DVector<f64>) {
        (
            DMatrix::from_row_slice(self.b.len(), self.nvar, &self.a),
            DVector::from_column_slice(&self.b),
        )
    }
}

fn unit(axis: usize) -> Point3 {
    let mut v = Point3::zeros();
    v[axis] = 1.0;
    v
}

/// Solution of the QP for one fixed assignment.
#[derive(Clone, Debug)]
pub struct QpResult {
    pub jerks: Vec<Point3>,
    pub cost: f64,
    pub trajectory: Trajectory,
    pub kkt_residual: f64,
}

/// Solves the jerk QP with the given containment sets (`containment[n]`
/// lists the polyhedra interval `n` must lie in; empty means unconstrained).
fn solve_with_containment(problem: &MiqpProblem, containment: &[Vec<usize>]) -> Result<QpResult, SolveError> {
    let n = problem.n_intervals;
    let nvar = 3 * n;
    let model = Model::new(&problem.x_init, n, problem.dt);
    let lim = &problem.limits;

    let mut eq = Rows::new(nvar);
    let target = match &problem.terminal {
        Terminal::Fixed(x) => Some(*x),
        Terminal::FreePositionRest => None,
    };
    for axis in 0..3 {
        let e = unit(axis);
        if let Some(x) = target {
            eq.push_dot(&e, &model.pos[n], x.pos[axis]);
            eq.push_dot(&e, &model.vel[n], x.vel[axis]);
            eq.push_dot(&e, &model.acc[n], x.acc[axis]);
        } else {
            eq.push_dot(&e, &model.vel[n], 0.0);
            eq.push_dot(&e, &model.acc[n], 0.0);
        }
    }

    let mut ineq = Rows::new(nvar);
    // Knot 0 is the given initial state, so its bounds constrain nothing.
    for knot in 1..=n {
        for axis in 0..3 {
            let e = unit(axis);
            for s in [1.0, -1.0] {
                ineq.push_dot(&(e * s), &model.vel[knot], lim.v_max);
                ineq.push_dot(&(e * s), &model.acc[knot], lim.a_max);
            }
        }
    }
    for m in 0..n {
        for axis in 0..3 {
            ineq.push_jerk_axis(m, axis, 1.0, lim.j_max);
            ineq.push_jerk_axis(m, axis, -1.0, lim.j_max);
        }
    }
    // Shared knots appear as the last control point of one interval and the
    // first of the next; each (point, polyhedron) pair is emitted once.
    let mut seen = BTreeSet::new();
    for (iv, polys) in containment.iter().enumerate() {
        for &p in polys {
            for k in 0..4 {
                let key = match k {
                    0 => (0, iv, p),
                    3 => (0, iv + 1, p),
                    _ => (k, iv, p),
                };
                if !seen.insert(key) {
                    continue;
                }
                let cp = model.control_point(iv, k);
                let poly = &problem.corridor.polyhedra()[p];
                for (h, c) in poly.normals().iter().zip(poly.offsets()) {
                    ineq.push_dot(h, &cp, *c);
                }
            }
        }
    }

    let h = DMatrix::identity(nvar, nvar) * 2.0;
    let g = DVector::zeros(nvar);
    let (ea, eb) = eq.matrices();
    let (ca, cb) = ineq.matrices();
    let sol = solve_qp(&h, &g, &ea, &eb, &ca, &cb).map_err(|e| match e {
        QpError::Infeasible => SolveError::Infeasible,
        QpError::NotConvex | QpError::IterationLimit => SolveError::NumericalFailure,
    })?;
    if sol.kkt_residual > KKT_TOL {
        return Err(SolveError::NumericalFailure);
    }
    let jerks: Vec<Point3> = (0..n).map(|m| Point3::new(sol.x[3 * m], sol.x[3 * m + 1], sol.x[3 * m + 2])).collect();
    let trajectory = Trajectory::from_jerk_sequence(&problem.x_init, &jerks, problem.dt, 0.0)
        .map_err(|_| SolveError::NumericalFailure)?;
    let cost = jerks.iter().map(|j| j.norm_squared()).sum();
    Ok(QpResult { jerks, cost, trajectory, kkt_residual: sol.kkt_residual })
}

/// Solves the QP for a fixed `N × P` binary assignment.
pub fn solve_fixed_binaries(problem: &MiqpProblem, binaries: &[Vec<bool>]) -> Result<QpResult, SolveError> {
    problem.validate()?;
    if binaries.len() != problem.n_intervals
        || binaries.iter().any(|row| row.len() != problem.num_polyhedra() || !row.iter().any(|&b| b))
    {
        return Err(SolveError::InvalidProblem("every interval needs at least one polyhedron".into()));
    }
    let containment: Vec<Vec<usize>> = binaries
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &b)| b).map(|(p, _)| p).collect())
        .collect();
    solve_with_containment(problem, &containment)
}

#[derive(Clone, Debug)]
pub struct MiqpSolution {
    pub jerks: Vec<Point3>,
    pub binaries: Vec<Vec<bool>>,
    pub cost: f64,
    /// Starts at time zero; callers shift it as needed.
    pub trajectory: Trajectory,
    pub nodes_explored: usize,
    /// False when the search budget ran out and the best incumbent was
    /// returned instead.
    pub optimal: bool,
}

#[derive(Clone, Debug)]
pub struct MiqpOptions {
    pub feas_tol: f64,
    /// Deterministic cap on branch-and-bound nodes.
    pub max_nodes: usize,
    /// Optional wall-clock cap.
    pub time_budget: Option<Duration>,
    /// Return the incumbent instead of failing when a budget runs out.
    pub allow_suboptimal: bool,
}

impl Default for MiqpOptions {
    fn default() -> Self {
        Self { feas_tol: FEAS_TOL, max_nodes: 10_000, time_budget: None, allow_suboptimal: false }
    }
}

/// Largest row violation of any of the four control points.
fn hull_violation(poly: &Polyhedron, cps: &[Point3; 4]) -> f64 {
    cps.iter().map(|c| poly.max_violation(c)).fold(f64::NEG_INFINITY, f64::max)
}

/// Global optimum over all polyhedron assignments by depth-first branch
/// and bound. The root drops all containment rows; each branch pins one
/// interval to one polyhedron.
pub fn solve_miqp(problem: &MiqpProblem, options: &MiqpOptions) -> Result<MiqpSolution, SolveError> {
    problem.validate()?;
    let n = problem.n_intervals;
    let np = problem.num_polyhedra();
    let started = Instant::now();

    if np == 1 {
        let res = solve_with_containment(problem, &vec![vec![0]; n])?;
        return Ok(MiqpSolution {
            jerks: res.jerks,
            binaries: vec![vec![true]; n],
            cost: res.cost,
            trajectory: res.trajectory,
            nodes_explored: 1,
            optimal: true,
        });
    }

    let mut best: Option<(QpResult, Vec<Vec<bool>>)> = None;
    let mut stack: Vec<Vec<Option<usize>>> = vec![vec![None; n]];
    let mut nodes = 0usize;
    let mut numerical_failure = false;
    let mut budget_hit = false;

    while let Some(assign) = stack.pop() {
        if nodes >= options.max_nodes || options.time_budget.is_some_and(|b| started.elapsed() > b) {
            budget_hit = true;
            break;
        }
        nodes += 1;
        let containment: Vec<Vec<usize>> = assign.iter().map(|a| a.map_or_else(Vec::new, |p| vec![p])).collect();
        let res = match solve_with_containment(problem, &containment) {
            Ok(r) => r,
            Err(SolveError::Infeasible) => continue,
            Err(SolveError::NumericalFailure) => {
                numerical_failure = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some((inc, _)) = &best {
            if res.cost >= inc.cost - 1e-12 * inc.cost.max(1.0) {
                continue;
            }
        }

        // Violation of each unassigned interval against each polyhedron.
        let mut branch: Option<(usize, f64)> = None;
        let mut binaries = vec![vec![false; np]; n];
        let mut violations = vec![vec![0.0; np]; n];
        for iv in 0..n {
            if let Some(p) = assign[iv] {
                binaries[iv][p] = true;
                continue;
            }
            let cps = res.trajectory.intervals()[iv].control_points();
            for p in 0..np {
                let v = hull_violation(&problem.corridor.polyhedra()[p], &cps);
                violations[iv][p] = v;
                binaries[iv][p] = v <= options.feas_tol;
            }
            let min_v = violations[iv].iter().cloned().fold(f64::INFINITY, f64::min);
            if min_v > options.feas_tol && branch.map_or(true, |(_, bv)| min_v > bv) {
                branch = Some((iv, min_v));
            }
        }

        match branch {
            None => best = Some((res, binaries)),
            Some((iv, _)) => {
                let mut order: Vec<usize> = (0..np).collect();
                order.sort_by(|&a, &b| violations[iv][a].total_cmp(&violations[iv][b]).then(a.cmp(&b)));
                for &p in order.iter().rev() {
                    let mut child = assign.clone();
                    child[iv] = Some(p);
                    stack.push(child);
                }
            }
        }
    }

    match best {
        Some((res, binaries)) if !budget_hit || options.allow_suboptimal => Ok(MiqpSolution {
            jerks: res.jerks,
            binaries,
            cost: res.cost,
            trajectory: res.trajectory,
            nodes_explored: nodes,
            optimal: !budget_hit,
        }),
        _ if budget_hit => Err(SolveError::TimeBudgetExceeded),
        None if numerical_failure => Err(SolveError::NumericalFailure),
        _ => Err(SolveError::Infeasible),
    }
}

/// Interval duration from constant-input motion times along each axis.
pub fn compute_dt_heuristic(x_init: &FullState, x_target: &Point3, limits: &DynamicLimits, n: usize, f: f64) -> f64 {
    let mut t_max: f64 = 0.0;
    for axis in 0..3 {
        let delta = (x_target[axis] - x_init.pos[axis]).abs();
        let t_v = delta / limits.v_max;
        let t_a = (2.0 * delta / limits.a_max).sqrt();
        let t_j = (6.0 * delta / limits.j_max).cbrt();
        t_max = t_max.max(t_v).max(t_a).max(t_j);
    }
    f * t_max / n as f64
}

/// Candidate factors `max(1, f_prev − γ), … , f_prev + γ'` in steps.
pub fn factor_grid(f_prev: f64, gamma: f64, gamma_prime: f64, step: f64) -> Vec<f64> {
    let lo = (f_prev - gamma).max(1.0);
    let hi = f_prev + gamma_prime;
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=count).map(|k| ((lo + k as f64 * step) * 1e9).round() / 1e9).collect()
}

/// A problem without its interval duration.
#[derive(Clone, Debug)]
pub struct MiqpTemplate {
    pub n_intervals: usize,
    pub corridor: Corridor,
    pub x_init: FullState,
    pub terminal: Terminal,
    pub limits: DynamicLimits,
}

impl MiqpTemplate {
    pub fn with_dt(&self, dt: f64) -> Result<MiqpProblem, SolveError> {
        MiqpProblem::new(self.n_intervals, self.corridor.clone(), self.x_init, self.terminal.clone(), dt, self.limits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorSearch {
    pub f_prev: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub step: f64,
}

impl Default for FactorSearch {
    fn default() -> Self {
        Self { f_prev: 1.0, gamma: 0.5, gamma_prime: 2.0, step: 0.1 }
    }
}

/// Tries increasing factors and returns the first solvable one.
pub fn factor_line_search(
    template: &MiqpTemplate,
    x_target: &Point3,
    search: &FactorSearch,
    options: &MiqpOptions,
) -> Result<(MiqpSolution, f64), SolveError> {
    for f in factor_grid(search.f_prev, search.gamma, search.gamma_prime, search.step) {
        let dt = compute_dt_heuristic(&template.x_init, x_target, &template.limits, template.n_intervals, f).max(MIN_DT);
        let problem = template.with_dt(dt)?;
        if let Ok(sol) = solve_miqp(&problem, options) {
            return Ok((sol, f));
        }
    }
    Err(SolveError::Infeasible)
}

/// Independent re-check of every constraint of a solution. Returns a
/// description of the first violation found.
pub fn verify_solution(problem: &MiqpProblem, sol: &MiqpSolution, feas_tol: f64) -> Result<(), String> {
    let n = problem.n_intervals;
    let lim = &problem.limits;
    if sol.jerks.len() != n || sol.binaries.len() != n {
        return Err("wrong interval count".into());
    }
    let traj = Trajectory::from_jerk_sequence(&problem.x_init, &sol.jerks, problem.dt, 0.0).map_err(|e| e.to_string())?;
    if traj.max_knot_discontinuity() > 1e-9 {
        return Err("knot discontinuity".into());
    }
    let bound_tol = feas_tol * 10.0;
    for (iv, interval) in traj.intervals().iter().enumerate() {
        if !sol.binaries[iv].iter().any(|&b| b) {
            return Err(format!("interval {iv} has no polyhedron"));
        }
        let cps = interval.control_points();
        for (p, &b) in sol.binaries[iv].iter().enumerate() {
            if b {
                for c in &cps {
                    if !problem.corridor.polyhedra()[p].contains(c, feas_tol) {
                        return Err(format!("interval {iv} control point outside polyhedron {p}"));
                    }
                }
            }
        }
        if interval.jerk().amax() > lim.j_max + bound_tol {
            return Err(format!("jerk bound violated on interval {iv}"));
        }
        let end = interval.end_state();
        if end.vel.amax() > lim.v_max + bound_tol || end.acc.amax() > lim.a_max + bound_tol {
            return Err(format!("velocity/acceleration bound violated at knot {}", iv + 1));
        }
    }
    let end = traj.end_state();
    let ok = match &problem.terminal {
        Terminal::Fixed(x) => end.max_abs_diff(x) <= 1e-6,
        Terminal::FreePositionRest => end.vel.amax() <= 1e-6 && end.acc.amax() <= 1e-6,
    };
    if !ok {
        return Err("terminal condition violated".into());
    }
    let cost: f64 = sol.jerks.iter().map(|j| j.norm_squared()).sum();
    if (cost - sol.cost).abs() > 1e-9 * cost.max(1.0) {
        return Err("reported cost does not match jerks".into());
    }
    Ok(())
}
