//! Receding-horizon replanning with a committed/whole/safe trajectory split.
//!
//! Each replan picks a start point A on the committed trajectory, plans a
//! fast Whole trajectory through free and unknown space toward the goal,
//! plans a Safe braking trajectory inside free-known space from a point R
//! on the Whole trajectory, and commits `A→R` of the Whole followed by the
//! Safe trajectory. Nothing is committed unless every check passes.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{decompose, Corridor, CorridorError, DEFAULT_BBOX_HALFWIDTHS};
use crate::global_planner::{
    allowed_prefix, clip_to_sphere, jps, remaining_length, repair_path, shortcut, sphere_exit_info, split_and_truncate,
    PiecewiseLinearPath, PlanError,
};
use crate::opt::{
    compute_dt_heuristic, factor_line_search, DynamicLimits, FactorSearch, MiqpOptions, MiqpProblem, MiqpSolution,
    MiqpTemplate, SolveError, Terminal, MIN_DT,
};
use crate::trajectory::{CubicInterval, FullState, Trajectory};
use crate::voxel_map::{InflatedGrid, StateSet, VoxelMap, VoxelState};
use crate::Point3;

/// Speed below which the vehicle counts as stopped at the goal.
pub const GOAL_SPEED_TOL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerMode {
    /// Whole trajectory may cross unknown space.
    Faster,
    /// Whole trajectory restricted to free-known space.
    Conservative,
}

impl std::str::FromStr for PlannerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "faster" => Ok(Self::Faster),
            "conservative" => Ok(Self::Conservative),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// How the duration of a replan is measured for the commit deadline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BudgetMode {
    /// Every replan is deemed to take exactly this many seconds.
    Virtual(f64),
    WallClock,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid planner configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
pub struct PlannerConfig {
    /// Multiplier on the previous replan duration giving the offset of A.
    pub alpha: f64,
    /// Multiplier giving the offset of R from A.
    pub beta: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub factor_step: f64,
    /// Planning sphere radius around A.
    pub sphere_radius: f64,
    pub l_max: f64,
    pub p_max: usize,
    pub n_whole: usize,
    pub n_safe: usize,
    pub limits: DynamicLimits,
    pub goal: Point3,
    pub mode: PlannerMode,
    pub budget: BudgetMode,
    pub bbox_halfwidths: Point3,
    pub miqp: MiqpOptions,
}

impl PlannerConfig {
    pub fn new(goal: Point3, limits: DynamicLimits) -> Self {
        Self {
            alpha: 1.25,
            beta: 2.0,
            gamma: 0.5,
            gamma_prime: 2.0,
            factor_step: 0.1,
            sphere_radius: 4.0,
            l_max: 2.0,
            p_max: 2,
            n_whole: 10,
            n_safe: 7,
            limits,
            goal,
            mode: PlannerMode::Faster,
            budget: BudgetMode::Virtual(0.05),
            bbox_halfwidths: Point3::from(DEFAULT_BBOX_HALFWIDTHS),
            miqp: MiqpOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.alpha >= 1.0) || !(self.beta >= 1.0) {
            return bad(format!("alpha and beta must be at least 1, got {} and {}", self.alpha, self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma_prime >= 0.0 && self.factor_step > 0.0) {
            return bad("factor window must be non-negative with a positive step".into());
        }
        if !(self.sphere_radius > 0.0 && self.l_max > 0.0) {
            return bad("sphere radius and l_max must be positive".into());
        }
        if self.p_max == 0 || self.n_whole == 0 || self.n_safe == 0 {
            return bad("p_max, n_whole and n_safe must be positive".into());
        }
        if let BudgetMode::Virtual(d) = self.budget {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("virtual replan time must be non-negative, got {d}"));
            }
        }
        Ok(())
    }

    /// Cells the Whole trajectory's guide path may cross.
    fn guide_traversable(&self) -> StateSet {
        StateSet::FREE_UNKNOWN
    }

    /// Cells the Whole trajectory must avoid.
    fn whole_excluded(&self) -> StateSet {
        match self.mode {
            PlannerMode::Faster => StateSet::OCCUPIED,
            PlannerMode::Conservative => StateSet::OCCUPIED_UNKNOWN,
        }
    }

    fn search(&self, f_prev: f64) -> FactorSearch {
        FactorSearch { f_prev, gamma: self.gamma, gamma_prime: self.gamma_prime, step: self.factor_step }
    }
}

#[derive(Clone, Debug)]
pub struct PlannerState {
    pub k: u64,
    pub committed: Trajectory,
    pub jps_prev: Option<PiecewiseLinearPath>,
    pub f_whole: f64,
    pub f_safe: f64,
    /// Duration of the previous replan in seconds.
    pub dt_prev: f64,
}

impl PlannerState {
    /// Starts at rest at `pos` with nothing planned yet.
    pub fn new(pos: Point3, t0: f64) -> Self {
        Self {
            k: 0,
            committed: Trajectory::rest(pos, t0, 0.1),
            jps_prev: None,
            f_whole: 1.0,
            f_safe: 1.0,
            dt_prev: 0.0,
        }
    }
}

/// State of the committed trajectory `alpha * dt_prev` after `t_now` and
/// that time. Past the trajectory's end the terminal rest state is used.
pub fn select_point_a(state: &PlannerState, t_now: f64, alpha: f64) -> (FullState, f64) {
    let t_a = t_now + alpha * state.dt_prev;
    (state.committed.eval_clamped(t_a).state, t_a)
}

/// The goal itself when inside the map, else the point where the segment
/// from `a` to the goal leaves the map, moved back one voxel toward `a`.
pub fn project_goal(map: &VoxelMap, goal: &Point3, a: &Point3) -> Point3 {
    if map.contains_point(goal) {
        return *goal;
    }
    let (lo, hi) = map.bounds();
    let d = goal - a;
    let mut s_exit: f64 = 1.0;
    for k in 0..3 {
        if d[k] > 0.0 {
            s_exit = s_exit.min((hi[k] - a[k]) / d[k]);
        } else if d[k] < 0.0 {
            s_exit = s_exit.min((lo[k] - a[k]) / d[k]);
        }
    }
    let len = d.norm();
    let back = map.resolution() / len;
    a + d * (s_exit - back).max(0.0)
}

/// A projected goal that lands in blocked space slides further toward `a`
/// until it reaches a traversable point.
pub fn retreat_goal(grid: &InflatedGrid, goal: &Point3, a: &Point3, traversable: StateSet) -> Point3 {
    let d = a - goal;
    let steps = (d.norm() / grid.resolution()).ceil() as usize;
    (0..=steps)
        .map(|i| goal + d * (i as f64 / steps.max(1) as f64))
        .find(|p| traversable.contains(grid.point_class(p)))
        .unwrap_or(*goal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Fresh search from A.
    A,
    /// Repaired previous path.
    B,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::A => "a",
            Direction::B => "b",
        })
    }
}

#[derive(Clone, Debug)]
pub struct DirectionChoice {
    pub path: PiecewiseLinearPath,
    pub which: Direction,
    pub j_a: f64,
    pub j_b: Option<f64>,
}

/// Estimated time to reach the end of `path`: `n * dt` to the sphere exit
/// at the lowest factor, then the rest of the path at full speed.
pub fn cost_to_go(path: &PiecewiseLinearPath, a: &FullState, radius: f64, limits: &DynamicLimits, n: usize) -> f64 {
    let exit = sphere_exit_info(path, &a.pos, radius);
    let dt = compute_dt_heuristic(a, &exit.point, limits, n, 1.0);
    n as f64 * dt + remaining_length(path, exit.arc_length) / limits.v_max
}

/// The previous path re-anchored at `a`, extended to `goal` and repaired
/// around newly blocked cells.
fn previous_path_from(
    grid: &InflatedGrid,
    prev: &PiecewiseLinearPath,
    a: &Point3,
    goal: &Point3,
    traversable: StateSet,
) -> Result<PiecewiseLinearPath, PlanError> {
    let (seg, closest) = closest_on_path(prev, a);
    let mut v = vec![*a, closest];
    v.extend_from_slice(&prev.vertices()[seg + 1..]);
    let mut path = PiecewiseLinearPath::new(v)?;
    if (path.end() - goal).norm() > 1e-9 {
        path = path.concat(&jps(grid, &path.end(), goal, traversable)?);
    }
    let path = repair_path(grid, &path, traversable)?;
    if path.segments().all(|(p, q)| grid.segment_clear(&p, &q, traversable)) {
        Ok(path)
    } else {
        Err(PlanError::NoPath)
    }
}

/// Segment index and point of `path` nearest to `p`.
fn closest_on_path(path: &PiecewiseLinearPath, p: &Point3) -> (usize, Point3) {
    let mut best = (0, path.start(), f64::INFINITY);
    for (i, (a, b)) in path.segments().enumerate() {
        let e = b - a;
        let s = if e.norm_squared() > 0.0 { ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
        let q = a + e * s;
        let d = (q - p).norm();
        if d < best.2 {
            best = (i, q, d);
        }
    }
    (best.0, best.1)
}

/// Picks between a fresh search and the repaired previous path by
/// estimated cost-to-go. Ties and any failure of the previous path favor
/// the fresh search.
#[allow(clippy::too_many_arguments)]
pub fn choose_direction(
    grid: &InflatedGrid,
    a: &FullState,
    goal: &Point3,
    jps_prev: Option<&PiecewiseLinearPath>,
    traversable: StateSet,
    radius: f64,
    limits: &DynamicLimits,
    n: usize,
) -> Result<DirectionChoice, PlanError> {
    let fresh = jps(grid, &a.pos, goal, traversable)?;
    let fresh = shortcut(grid, &fresh, traversable);
    let j_a = cost_to_go(&fresh, a, radius, limits, n);
    let previous = jps_prev.and_then(|p| previous_path_from(grid, p, &a.pos, goal, traversable).ok());
    let Some(previous) = previous else {
        return Ok(DirectionChoice { path: fresh, which: Direction::A, j_a, j_b: None });
    };
    let j_b = cost_to_go(&previous, a, radius, limits, n);
    if j_a <= j_b {
        Ok(DirectionChoice { path: fresh, which: Direction::A, j_a, j_b: Some(j_b) })
    } else {
        Ok(DirectionChoice { path: previous, which: Direction::B, j_a, j_b: Some(j_b) })
    }
}

/// Why a replan did not produce a trajectory.
#[derive(Clone, Debug, Error, PartialEq)]
pub enum ReplanFailure {
    #[error("global search failed: {0}")]
    Search(#[from] PlanError),
    #[error("corridor construction failed: {0}")]
    Corridor(#[from] CorridorError),
    #[error("whole trajectory: {0}")]
    Whole(SolveError),
    #[error("safe trajectory: {0}")]
    Safe(SolveError),
    #[error("no free-known point to brake from")]
    RNotInFree,
    #[error("A to R crosses unknown space")]
    UnknownBetweenAR,
    #[error("replan exceeded its deadline")]
    OverBudget,
    #[error("trajectory splice failed")]
    Splice,
}

impl ReplanFailure {
    /// Short tag for logs.
    pub fn tag(&self) -> &'static str {
        match self {
            ReplanFailure::Search(_) => "no_path",
            ReplanFailure::Corridor(_) => "corridor",
            ReplanFailure::Whole(_) => "whole_infeasible",
            ReplanFailure::Safe(_) => "safe_infeasible",
            ReplanFailure::RNotInFree => "r_not_free",
            ReplanFailure::UnknownBetweenAR => "unknown_a_r",
            ReplanFailure::OverBudget => "over_budget",
            ReplanFailure::Splice => "splice",
        }
    }
}

#[derive(Clone, Debug)]
pub struct WholePlan {
    /// Starts at the time of A.
    pub trajectory: Trajectory,
    pub factor: f64,
    /// Guide path inside the planning sphere.
    pub jps_in: PiecewiseLinearPath,
    pub problem: MiqpProblem,
    pub solution: MiqpSolution,
    /// Seconds spent building the corridor.
    pub decomposition_time: f64,
}

/// Whole trajectory from `a` (at time `t_a`) to rest at the end of the
/// part of `path` inside the planning sphere.
pub fn build_whole(
    grid: &InflatedGrid,
    path: &PiecewiseLinearPath,
    a: &FullState,
    t_a: f64,
    f_prev: f64,
    cfg: &PlannerConfig,
) -> Result<WholePlan, ReplanFailure> {
    let clipped = clip_to_sphere(path, &a.pos, cfg.sphere_radius);
    let clipped = match cfg.mode {
        PlannerMode::Faster => clipped,
        PlannerMode::Conservative => {
            allowed_prefix(grid, &clipped, StateSet::FREE).ok_or(ReplanFailure::Search(PlanError::InvalidStart))?
        }
    };
    let jps_in = split_and_truncate(&clipped, cfg.l_max, cfg.p_max);
    let clock = Instant::now();
    let corridor = decompose(grid, &jps_in, cfg.whole_excluded(), cfg.bbox_halfwidths)?;
    let decomposition_time = clock.elapsed().as_secs_f64();
    let target = jps_in.end();
    let template = MiqpTemplate {
        n_intervals: cfg.n_whole,
        corridor,
        x_init: *a,
        terminal: Terminal::Fixed(FullState::rest(target)),
        limits: cfg.limits,
    };
    solve_shifted(&template, &target, &cfg.search(f_prev), &cfg.miqp, t_a)
        .map(|(trajectory, factor, problem, solution)| WholePlan {
            trajectory,
            factor,
            jps_in,
            problem,
            solution,
            decomposition_time,
        })
        .map_err(ReplanFailure::Whole)
}

fn solve_shifted(
    template: &MiqpTemplate,
    target: &Point3,
    search: &FactorSearch,
    options: &MiqpOptions,
    t0: f64,
) -> Result<(Trajectory, f64, MiqpProblem, MiqpSolution), SolveError> {
    let (solution, factor) = factor_line_search(template, target, search, options)?;
    let dt = compute_dt_heuristic(&template.x_init, target, &template.limits, template.n_intervals, factor).max(MIN_DT);
    let problem = template.with_dt(dt)?;
    let trajectory = Trajectory::new(t0, solution.trajectory.intervals().to_vec()).expect("solver output is valid");
    Ok((trajectory, factor, problem, solution))
}

#[derive(Clone, Debug)]
pub struct SafePlan {
    /// Starts at the time of R.
    pub trajectory: Trajectory,
    pub t_r: f64,
    pub factor: f64,
    pub guide: PiecewiseLinearPath,
    pub corridor: Corridor,
    pub problem: MiqpProblem,
    pub solution: MiqpSolution,
    /// Seconds spent building the corridor.
    pub decomposition_time: f64,
}

/// Time step for walking a trajectory with at most a quarter cell between
/// consecutive samples.
fn sample_step(grid: &InflatedGrid, limits: &DynamicLimits) -> f64 {
    grid.resolution() / (4.0 * 3f64.sqrt() * limits.v_max)
}

/// Latest time in `[t_a, t_target]` up to which every sample of `whole`
/// classifies Free, or `None` when A itself does not.
pub fn free_horizon(grid: &InflatedGrid, whole: &Trajectory, t_a: f64, t_target: f64, limits: &DynamicLimits) -> Option<f64> {
    let free = |t: f64| grid.point_class(&whole.eval_clamped(t).state.pos) == VoxelState::Free;
    if !free(t_a) {
        return None;
    }
    let h = sample_step(grid, limits);
    let mut t = t_a;
    while t < t_target {
        let next = (t + h).min(t_target);
        if !free(next) {
            return Some(t);
        }
        t = next;
    }
    Some(t_target)
}

/// Guide for the braking trajectory: from `r` onto the nearest point of
/// `jps_in` and along it, cut at the first cell that is not Free.
pub fn safe_guide(grid: &InflatedGrid, jps_in: &PiecewiseLinearPath, r: &Point3, cfg: &PlannerConfig) -> Option<PiecewiseLinearPath> {
    let (seg, closest) = closest_on_path(jps_in, r);
    let mut v = vec![*r];
    if grid.segment_clear(r, &closest, StateSet::FREE) {
        v.push(closest);
        v.extend_from_slice(&jps_in.vertices()[seg + 1..]);
    }
    let path = PiecewiseLinearPath::new(v).ok()?;
    let prefix = allowed_prefix(grid, &path, StateSet::FREE)?;
    Some(split_and_truncate(&prefix, cfg.l_max, cfg.p_max))
}

/// Safe braking trajectory from the point R of `whole` that lies
/// `beta * dt_prev` after A, pulled back to stay in free-known space.
pub fn build_safe(
    grid: &InflatedGrid,
    whole: &Trajectory,
    jps_in: &PiecewiseLinearPath,
    t_a: f64,
    dt_prev: f64,
    f_prev: f64,
    cfg: &PlannerConfig,
) -> Result<SafePlan, ReplanFailure> {
    let t_target = (t_a + cfg.beta * dt_prev).min(whole.t_end());
    let t_r = free_horizon(grid, whole, t_a, t_target, &cfg.limits).ok_or(ReplanFailure::RNotInFree)?;
    let r = whole.eval_clamped(t_r).state;
    let guide = safe_guide(grid, jps_in, &r.pos, cfg).ok_or(ReplanFailure::RNotInFree)?;
    let clock = Instant::now();
    let corridor = decompose(grid, &guide, StateSet::OCCUPIED_UNKNOWN, cfg.bbox_halfwidths)?;
    let decomposition_time = clock.elapsed().as_secs_f64();
    build_safe_in(&corridor, &guide, &r, t_r, f_prev, cfg).map(|(trajectory, factor, problem, solution)| SafePlan {
        trajectory,
        t_r,
        factor,
        guide,
        corridor,
        problem,
        solution,
        decomposition_time,
    })
}

/// The braking solve alone, for a given corridor.
pub fn build_safe_in(
    corridor: &Corridor,
    guide: &PiecewiseLinearPath,
    r: &FullState,
    t_r: f64,
    f_prev: f64,
    cfg: &PlannerConfig,
) -> Result<(Trajectory, f64, MiqpProblem, MiqpSolution), ReplanFailure> {
    let template = MiqpTemplate {
        n_intervals: cfg.n_safe,
        corridor: corridor.clone(),
        x_init: *r,
        terminal: Terminal::FreePositionRest,
        limits: cfg.limits,
    };
    solve_shifted(&template, &guide.end(), &cfg.search(f_prev), &cfg.miqp, t_r).map_err(ReplanFailure::Safe)
}

/// Wall-clock seconds per replan stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub jps: f64,
    pub decomposition: f64,
    pub miqp_whole: f64,
    pub miqp_safe: f64,
    pub total: f64,
}

/// Everything the checks of a commit need.
#[derive(Clone, Debug)]
pub struct CommitRecord {
    pub t_a: f64,
    pub t_r: f64,
    pub whole: WholePlan,
    pub safe: SafePlan,
}

/// Outcome of one replan, one row of the event log.
#[derive(Clone, Debug)]
pub struct ReplanReport {
    pub k: u64,
    pub t: f64,
    /// Offset of A after the replan start.
    pub delta_t: f64,
    pub direction: Option<Direction>,
    pub j_a: Option<f64>,
    pub j_b: Option<f64>,
    pub f_whole: Option<f64>,
    pub f_safe: Option<f64>,
    pub committed: bool,
    pub reason: String,
    pub timings: StageTimings,
    pub commit: Option<CommitRecord>,
}

impl ReplanReport {
    pub const CSV_HEADER: &'static str = "k,t,delta_t,direction,j_a,j_b,f_whole,f_safe,committed,reason";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.t,
            self.delta_t,
            self.direction.map_or(String::new(), |d| d.to_string()),
            opt(self.j_a),
            opt(self.j_b),
            opt(self.f_whole),
            opt(self.f_safe),
            u8::from(self.committed),
            self.reason
        )
    }
}

/// Whether the vehicle is stopped within tolerance of the goal.
pub fn at_goal(state: &FullState, goal: &Point3, resolution: f64) -> bool {
    (state.pos - goal).norm() <= 2.0 * resolution && state.vel.norm() < GOAL_SPEED_TOL
}

struct Attempt {
    direction: Option<Direction>,
    j_a: Option<f64>,
    j_b: Option<f64>,
    whole: Option<WholePlan>,
    safe: Option<SafePlan>,
    path: Option<PiecewiseLinearPath>,
}

fn attempt(
    state: &PlannerState,
    grid: &InflatedGrid,
    map: &VoxelMap,
    a: &FullState,
    t_a: f64,
    cfg: &PlannerConfig,
    timings: &mut StageTimings,
) -> (Attempt, Result<(), ReplanFailure>) {
    let mut out = Attempt { direction: None, j_a: None, j_b: None, whole: None, safe: None, path: None };
    let clock = Instant::now();
    let mut goal = project_goal(map, &cfg.goal, &a.pos);
    if goal != cfg.goal {
        goal = retreat_goal(grid, &goal, &a.pos, cfg.guide_traversable());
    }
    let choice = choose_direction(
        grid,
        a,
        &goal,
        state.jps_prev.as_ref(),
        cfg.guide_traversable(),
        cfg.sphere_radius,
        &cfg.limits,
        cfg.n_whole,
    );
    timings.jps = clock.elapsed().as_secs_f64();
    let choice = match choice {
        Ok(c) => c,
        Err(e) => return (out, Err(e.into())),
    };
    out.direction = Some(choice.which);
    out.j_a = Some(choice.j_a);
    out.j_b = choice.j_b;
    out.path = Some(choice.path.clone());

    let clock = Instant::now();
    let whole = build_whole(grid, &choice.path, a, t_a, state.f_whole, cfg);
    let elapsed = clock.elapsed().as_secs_f64();
    let whole = match whole {
        Ok(w) => w,
        Err(e) => {
            timings.miqp_whole = elapsed;
            return (out, Err(e));
        }
    };
    timings.decomposition = whole.decomposition_time;
    timings.miqp_whole = elapsed - whole.decomposition_time;

    let clock = Instant::now();
    let safe = build_safe(grid, &whole.trajectory, &whole.jps_in, t_a, state.dt_prev, state.f_safe, cfg);
    let elapsed = clock.elapsed().as_secs_f64();
    timings.miqp_safe = elapsed - safe.as_ref().map_or(0.0, |s| s.decomposition_time);
    timings.decomposition += safe.as_ref().map_or(0.0, |s| s.decomposition_time);
    out.whole = Some(whole);
    match safe {
        Ok(s) => {
            out.safe = Some(s);
            (out, Ok(()))
        }
        Err(e) => (out, Err(e)),
    }
}

/// Runs one replanning step against a map snapshot at time `t_now`.
/// `state.committed` changes only when both solves succeed, the `A→R`
/// piece avoids unknown space and the replan met its deadline.
pub fn replan(state: &mut PlannerState, map: &VoxelMap, t_now: f64, cfg: &PlannerConfig) -> ReplanReport {
    let started = Instant::now();
    let k = state.k;
    state.k += 1;
    let (a, t_a) = select_point_a(state, t_now, cfg.alpha);
    let delta_t = t_a - t_now;
    let mut report = ReplanReport {
        k,
        t: t_now,
        delta_t,
        direction: None,
        j_a: None,
        j_b: None,
        f_whole: None,
        f_safe: None,
        committed: false,
        reason: String::new(),
        timings: StageTimings::default(),
        commit: None,
    };

    let here = state.committed.eval_clamped(t_now).state;
    let done = at_goal(&here, &cfg.goal, map.resolution())
        && state.committed.end_state().vel.norm() < GOAL_SPEED_TOL
        && (state.committed.end_state().pos - cfg.goal).norm() <= 2.0 * map.resolution();
    if done {
        report.reason = "at_goal".into();
        finish(state, &mut report, started, cfg);
        return report;
    }

    let grid = map.inflated_grid();
    let mut timings = StageTimings::default();
    let (att, result) = attempt(state, &grid, map, &a, t_a, cfg, &mut timings);
    report.direction = att.direction;
    report.j_a = att.j_a;
    report.j_b = att.j_b;
    report.f_whole = att.whole.as_ref().map(|w| w.factor);
    report.f_safe = att.safe.as_ref().map(|s| s.factor);
    report.timings = timings;

    // Factors remembered for the next window; a failed search keeps the
    // last factor that worked.
    if let Some(w) = &att.whole {
        state.f_whole = w.factor;
    }
    if let Some(s) = &att.safe {
        state.f_safe = s.factor;
    }
    if let Some(p) = att.path {
        state.jps_prev = Some(p);
    }

    let outcome = result.and_then(|()| {
        let whole = att.whole.expect("whole exists on success");
        let safe = att.safe.expect("safe exists on success");
        if !segment_free(&grid, &whole.trajectory, t_a, safe.t_r, &cfg.limits) {
            return Err(ReplanFailure::UnknownBetweenAR);
        }
        let candidate = Trajectory::splice(&whole.trajectory, safe.t_r, &safe.trajectory).map_err(|_| ReplanFailure::Splice)?;
        let full = join_committed(&state.committed, t_now, t_a, &candidate)?;
        Ok((full, CommitRecord { t_a, t_r: safe.t_r, whole, safe }))
    });

    let duration = match cfg.budget {
        BudgetMode::Virtual(d) => d,
        BudgetMode::WallClock => started.elapsed().as_secs_f64(),
    };
    let outcome = outcome.and_then(|c| if duration <= delta_t { Ok(c) } else { Err(ReplanFailure::OverBudget) });
    match outcome {
        Ok((full, record)) => {
            state.committed = full;
            report.committed = true;
            report.reason = "ok".into();
            report.commit = Some(record);
        }
        Err(e) => report.reason = e.tag().into(),
    }
    finish(state, &mut report, started, cfg);
    report
}

fn finish(state: &mut PlannerState, report: &mut ReplanReport, started: Instant, cfg: &PlannerConfig) {
    report.timings.total = started.elapsed().as_secs_f64();
    state.dt_prev = match cfg.budget {
        BudgetMode::Virtual(d) => d,
        BudgetMode::WallClock => report.timings.total,
    };
}

/// Whether every sample of `traj` on `[t0, t1]` classifies Free.
pub fn segment_free(grid: &InflatedGrid, traj: &Trajectory, t0: f64, t1: f64, limits: &DynamicLimits) -> bool {
    let h = sample_step(grid, limits);
    let steps = ((t1 - t0) / h).ceil().max(0.0) as usize;
    (0..=steps).all(|i| {
        let t = (t0 + i as f64 * h).min(t1);
        grid.point_class(&traj.eval_clamped(t).state.pos) == VoxelState::Free
    })
}

/// The committed trajectory from `t_now` to `t_a` (held at rest past its
/// end) followed by `candidate`.
fn join_committed(old: &Trajectory, t_now: f64, t_a: f64, candidate: &Trajectory) -> Result<Trajectory, ReplanFailure> {
    if t_a - t_now <= 1e-9 {
        return Ok(candidate.clone());
    }
    let head = old.restrict(t_now, old.t_end());
    let head = if head.is_empty() {
        Trajectory::rest(old.end_state().pos, t_now, t_a - t_now)
    } else if t_a - head.t_end() > 1e-9 {
        let hold = CubicInterval::from_state(&FullState::rest(old.end_state().pos), Point3::zeros(), t_a - head.t_end());
        let mut intervals = head.intervals().to_vec();
        intervals.push(hold);
        Trajectory::new(head.t0(), intervals).map_err(|_| ReplanFailure::Splice)?
    } else {
        head
    };
    Trajectory::splice(&head, t_a, candidate).map_err(|_| ReplanFailure::Splice)
}

#[cfg(test)]
mod tests;
