use super::*;
use crate::opt::{solve_miqp, verify_solution, FEAS_TOL};
use crate::voxel_map::VoxelState;

fn limits() -> DynamicLimits {
    DynamicLimits::new(5.0, 5.0, 8.0).unwrap()
}

/// A map whose cells are Free except where `occupied` or `unknown` say so.
fn map_with(dims: [usize; 3], center: Point3, occupied: impl Fn(&Point3) -> bool, unknown: impl Fn(&Point3) -> bool) -> VoxelMap {
    let mut map = VoxelMap::new(center, dims, 0.25, 0.3).unwrap();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let c = map.voxel_center([x, y, z]);
                let s = if occupied(&c) {
                    VoxelState::Occupied
                } else if unknown(&c) {
                    VoxelState::Unknown
                } else {
                    VoxelState::Free
                };
                map.set_state([x, y, z], s);
            }
        }
    }
    map
}

fn free_map() -> VoxelMap {
    map_with([64, 64, 16], Point3::zeros(), |_| false, |_| false)
}

fn config(goal: Point3) -> PlannerConfig {
    PlannerConfig::new(goal, limits())
}

#[test]
fn point_a_offset_uses_previous_duration() {
    let mut st = PlannerState::new(Point3::zeros(), 0.0);
    st.committed = Trajectory::from_jerk_sequence(&FullState::rest(Point3::zeros()), &[Point3::new(1.0, 0.0, 0.0); 10], 0.1, 0.0).unwrap();
    st.dt_prev = 0.08;
    let (a, t_a) = select_point_a(&st, 0.3, 1.25);
    assert!((t_a - 0.4).abs() < 1e-12);
    assert_eq!(a, st.committed.eval(t_a).unwrap().state);

    let (a, t_a) = select_point_a(&st, 5.0, 1.25);
    assert!((t_a - 5.1).abs() < 1e-12);
    assert!(a.max_abs_diff(&st.committed.end_state()) < 1e-12);

    st.dt_prev = 0.0;
    let (a, t_a) = select_point_a(&st, 0.3, 1.25);
    assert_eq!(t_a, 0.3);
    assert_eq!(a, st.committed.eval(0.3).unwrap().state);
}

#[test]
fn goal_projection_hits_the_map_face() {
    let map = VoxelMap::new(Point3::zeros(), [80, 80, 80], 0.25, 0.3).unwrap();
    let g = project_goal(&map, &Point3::new(40.0, 0.0, 0.0), &Point3::zeros());
    assert!((g - Point3::new(10.0 - 0.25, 0.0, 0.0)).norm() < 1e-12);
    let inside = Point3::new(3.0, -2.0, 1.0);
    assert_eq!(project_goal(&map, &inside, &Point3::zeros()), inside);
    let a = Point3::new(1.0, 1.0, 1.0);
    assert_eq!(project_goal(&map, &a, &a), a);
    // Diagonal: exits through the nearer face.
    let g = project_goal(&map, &Point3::new(40.0, 20.0, 0.0), &Point3::zeros());
    assert!(map.contains_point(&g));
    assert!((g.x - (10.0 - 0.25 * 2.0 / 5f64.sqrt())).abs() < 1e-9, "{g:?}");
}

#[test]
fn cost_to_go_example() {
    // dt = 0.2 for a 10 m leg with limits (5, 5, 8), then 20 m at 5 m/s.
    let path = PiecewiseLinearPath::new(vec![Point3::zeros(), Point3::new(30.0, 0.0, 0.0)]).unwrap();
    let j = cost_to_go(&path, &FullState::rest(Point3::zeros()), 10.0, &limits(), 10);
    assert!((j - 6.0).abs() < 1e-12, "{j}");
    // Positive scaling of both costs keeps their order.
    let longer = PiecewiseLinearPath::new(vec![Point3::zeros(), Point3::new(0.0, 10.0, 0.0), Point3::new(30.0, 10.0, 0.0)]).unwrap();
    let jb = cost_to_go(&longer, &FullState::rest(Point3::zeros()), 10.0, &limits(), 10);
    assert!(jb > j && 3.0 * jb > 3.0 * j);
}

#[test]
fn identical_paths_tie_toward_fresh_search() {
    let map = free_map();
    let grid = map.inflated_grid();
    let a = FullState::rest(Point3::new(-4.0, 0.0, 0.0));
    let goal = Point3::new(4.0, 0.0, 0.0);
    let first = choose_direction(&grid, &a, &goal, None, StateSet::FREE_UNKNOWN, 3.0, &limits(), 10).unwrap();
    assert_eq!(first.which, Direction::A);
    assert!(first.j_b.is_none());
    let again = choose_direction(&grid, &a, &goal, Some(&first.path), StateSet::FREE_UNKNOWN, 3.0, &limits(), 10).unwrap();
    assert_eq!(again.which, Direction::A);
    assert_eq!(again.j_b, Some(again.j_a));
}

#[test]
fn blocked_previous_path_loses_to_short_fresh_path() {
    // The previous path went over a wall that now blocks it; the fresh search
    // goes straight. Compute both costs by hand and compare.
    let wall = |p: &Point3| (p.y - 2.0).abs() < 0.3 && p.x > -6.0 && p.x < 6.0;
    let map = map_with([64, 64, 16], Point3::zeros(), wall, |_| false);
    let grid = map.inflated_grid();
    let a = FullState::rest(Point3::new(0.0, 0.0, 0.0));
    let goal = Point3::new(5.0, 0.0, 0.0);
    let prev = PiecewiseLinearPath::new(vec![a.pos, Point3::new(0.0, 4.0, 0.0), Point3::new(5.0, 4.0, 0.0), goal]).unwrap();
    let choice = choose_direction(&grid, &a, &goal, Some(&prev), StateSet::FREE_UNKNOWN, 3.0, &limits(), 10).unwrap();
    assert_eq!(choice.which, Direction::A);
    let j_a = cost_to_go(&choice.path, &a, 3.0, &limits(), 10);
    assert!((choice.j_a - j_a).abs() < 1e-12);
    assert!(choice.j_b.unwrap() > choice.j_a);
    // By hand: the straight 5 m path exits the 3 m sphere at (3, 0, 0).
    let dt = compute_dt_heuristic(&a, &Point3::new(3.0, 0.0, 0.0), &limits(), 10, 1.0);
    assert!((choice.j_a - (10.0 * dt + 2.0 / 5.0)).abs() < 1e-9);
}

#[test]
fn previous_path_failure_falls_back_to_fresh() {
    let map = free_map();
    let grid = map.inflated_grid();
    let a = FullState::rest(Point3::zeros());
    let goal = Point3::new(3.0, 0.0, 0.0);
    // A previous path ending outside the grid cannot be repaired.
    let prev = PiecewiseLinearPath::new(vec![a.pos, Point3::new(50.0, 0.0, 0.0)]).unwrap();
    let choice = choose_direction(&grid, &a, &goal, Some(&prev), StateSet::FREE_UNKNOWN, 3.0, &limits(), 10).unwrap();
    assert_eq!(choice.which, Direction::A);
}

#[test]
fn whole_in_empty_map_is_a_straight_rest_to_rest_move() {
    let map = free_map();
    let grid = map.inflated_grid();
    let cfg = config(Point3::new(6.0, 0.0, 0.0));
    let a = FullState::rest(Point3::new(-2.0, 0.0, 0.0));
    let path = PiecewiseLinearPath::new(vec![a.pos, cfg.goal]).unwrap();
    let whole = build_whole(&grid, &path, &a, 1.5, 1.0, &cfg).unwrap();
    assert_eq!(whole.trajectory.t0(), 1.5);
    let end = whole.trajectory.end_state();
    assert!((end.pos - Point3::new(2.0, 0.0, 0.0)).norm() < 1e-6, "{:?}", end.pos);
    assert!(end.vel.norm() < 1e-6 && end.acc.norm() < 1e-6);
    verify_solution(&whole.problem, &whole.solution, FEAS_TOL).unwrap();
    for iv in whole.trajectory.intervals() {
        for c in iv.control_points() {
            assert!(c.y.abs() < 1e-6 && c.z.abs() < 1e-6);
        }
    }
}

#[test]
fn whole_at_goal_costs_nothing() {
    let map = free_map();
    let grid = map.inflated_grid();
    let g = Point3::new(1.0, 1.0, 0.0);
    let cfg = config(g);
    let path = PiecewiseLinearPath::new(vec![g, g]).unwrap();
    let whole = build_whole(&grid, &path, &FullState::rest(g), 0.0, 1.0, &cfg).unwrap();
    assert!(whole.solution.cost < 1e-16);
}

#[test]
fn whole_infeasible_when_momentum_carries_into_a_wall() {
    // Moving at 5 m/s toward a wall 1 m ahead while the path turns away:
    // braking needs about 2.5 m.
    let wall = |p: &Point3| p.x > 1.2;
    let map = map_with([64, 64, 16], Point3::zeros(), wall, |_| false);
    let grid = map.inflated_grid();
    let cfg = config(Point3::new(0.0, 5.0, 0.0));
    let a = FullState::new(Point3::zeros(), Point3::new(5.0, 0.0, 0.0), Point3::zeros());
    let path = PiecewiseLinearPath::new(vec![a.pos, cfg.goal]).unwrap();
    let err = build_whole(&grid, &path, &a, 0.0, 1.0, &cfg).unwrap_err();
    assert_eq!(err, ReplanFailure::Whole(SolveError::Infeasible));
}

#[test]
fn safe_trajectory_stops_inside_free_space() {
    let map = free_map();
    let grid = map.inflated_grid();
    let cfg = config(Point3::new(6.0, 0.0, 0.0));
    let a = FullState::new(Point3::new(-2.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0), Point3::zeros());
    let path = PiecewiseLinearPath::new(vec![a.pos, cfg.goal]).unwrap();
    let whole = build_whole(&grid, &path, &a, 0.0, 1.0, &cfg).unwrap();
    let safe = build_safe(&grid, &whole.trajectory, &whole.jps_in, 0.0, 0.1, 1.0, &cfg).unwrap();
    assert!((safe.t_r - 0.2).abs() < 1e-12);
    let end = safe.trajectory.end_state();
    assert!(end.vel.norm() < 1e-7 && end.acc.norm() < 1e-7);
    assert!(safe.trajectory.start_state().max_abs_diff(&whole.trajectory.eval(safe.t_r).unwrap().state) < 1e-12);
    verify_solution(&safe.problem, &safe.solution, FEAS_TOL).unwrap();
}

#[test]
fn safe_from_rest_costs_nothing() {
    let map = free_map();
    let grid = map.inflated_grid();
    let cfg = config(Point3::new(1.0, 0.0, 0.0));
    let whole = Trajectory::rest(Point3::new(1.0, 0.0, 0.0), 0.0, 0.5);
    let jps_in = PiecewiseLinearPath::new(vec![Point3::new(1.0, 0.0, 0.0); 2]).unwrap();
    let safe = build_safe(&grid, &whole, &jps_in, 0.0, 0.1, 1.0, &cfg).unwrap();
    assert!(safe.solution.cost < 1e-16);
}

#[test]
fn safe_infeasible_when_free_space_is_shorter_than_stopping_distance() {
    // Free-known space is a 1.5 m cube around R; stopping from 5 m/s at
    // a_max = 5 needs at least v²/(2 a_max) = 2.5 m.
    let unknown = |p: &Point3| p.x.abs() > 0.75 || p.y.abs() > 0.75 || p.z.abs() > 0.75;
    let map = map_with([64, 64, 16], Point3::zeros(), |_| false, unknown);
    let grid = map.inflated_grid();
    let cfg = config(Point3::new(6.0, 0.0, 0.0));
    let r = FullState::new(Point3::zeros(), Point3::new(5.0, 0.0, 0.0), Point3::zeros());
    let whole = Trajectory::from_jerk_sequence(&r, &[Point3::zeros(); 4], 0.2, 0.0).unwrap();
    let jps_in = PiecewiseLinearPath::new(vec![r.pos, Point3::new(4.0, 0.0, 0.0)]).unwrap();
    let err = build_safe(&grid, &whole, &jps_in, 0.0, 0.0, 1.0, &cfg).unwrap_err();
    assert_eq!(err, ReplanFailure::Safe(SolveError::Infeasible));
    assert!(5.0f64.powi(2) / (2.0 * 5.0) > 0.75);
}

#[test]
fn safe_solve_does_not_touch_the_a_to_r_piece() {
    let map = free_map();
    let grid = map.inflated_grid();
    let cfg = config(Point3::new(6.0, 0.0, 0.0));
    let a = FullState::new(Point3::new(-2.0, 0.0, 0.0), Point3::new(1.5, 0.0, 0.0), Point3::zeros());
    let path = PiecewiseLinearPath::new(vec![a.pos, cfg.goal]).unwrap();
    let whole = build_whole(&grid, &path, &a, 0.0, 1.0, &cfg).unwrap();
    let safe = build_safe(&grid, &whole.trajectory, &whole.jps_in, 0.0, 0.1, 1.0, &cfg).unwrap();
    let r = whole.trajectory.eval(safe.t_r).unwrap().state;
    // A box that cuts the original stopping point short.
    let reach = safe.trajectory.end_state().pos.x - r.pos.x;
    let tighter = Corridor::new(vec![crate::corridor::Polyhedron::axis_box(
        r.pos - Point3::repeat(1.0),
        r.pos + Point3::new(0.95 * reach, 1.0, 1.0),
    )]);
    let (other, ..) = build_safe_in(&tighter, &safe.guide, &r, safe.t_r, 1.0, &cfg).unwrap_or_else(|e| panic!("{e} reach {reach}"));
    let c1 = Trajectory::splice(&whole.trajectory, safe.t_r, &safe.trajectory).unwrap();
    let c2 = Trajectory::splice(&whole.trajectory, safe.t_r, &other).unwrap();
    assert_ne!(safe.trajectory, other);
    for i in 0..=50 {
        let t = safe.t_r * i as f64 / 50.0;
        assert_eq!(c1.eval(t).unwrap().state, c2.eval(t).unwrap().state);
    }
}

#[test]
fn first_replan_waits_then_commits_toward_goal() {
    let map = free_map();
    let cfg = config(Point3::new(6.0, 0.0, 0.0));
    let mut st = PlannerState::new(Point3::new(-2.0, 0.0, 0.0), 0.0);
    let r0 = replan(&mut st, &map, 0.0, &cfg);
    assert!(!r0.committed);
    assert_eq!(r0.reason, "over_budget");
    let r1 = replan(&mut st, &map, 0.1, &cfg);
    assert!(r1.committed, "{}", r1.reason);
    assert_eq!(st.k, 2);
    let end = st.committed.end_state();
    assert!(end.vel.norm() < 1e-7 && end.acc.norm() < 1e-7);
    assert!(st.committed.eval_clamped(1.0).state.vel.x > 0.0);
    let grid = map.inflated_grid();
    assert!(segment_free(&grid, &st.committed, 0.1, st.committed.t_end(), &cfg.limits));
}

#[test]
fn failed_replan_leaves_commitment_untouched() {
    // Goal sealed inside an occupied shell: no path, nothing committed.
    let goal = Point3::new(4.0, 0.0, 0.0);
    let shell = move |p: &Point3| {
        let d = (p - goal).amax();
        (0.75..1.5).contains(&d)
    };
    let map = map_with([64, 64, 16], Point3::zeros(), shell, |_| false);
    let cfg = config(goal);
    let mut st = PlannerState::new(Point3::new(-2.0, 0.0, 0.0), 0.0);
    st.dt_prev = 0.05;
    let before = st.committed.clone();
    let rep = replan(&mut st, &map, 0.0, &cfg);
    assert!(!rep.committed);
    assert_eq!(rep.reason, "no_path");
    assert_eq!(st.committed, before);
    assert_eq!(st.k, 1);
}

#[test]
fn over_budget_replan_does_not_commit() {
    let map = free_map();
    let mut cfg = config(Point3::new(6.0, 0.0, 0.0));
    cfg.budget = BudgetMode::Virtual(0.2);
    let mut st = PlannerState::new(Point3::new(-2.0, 0.0, 0.0), 0.0);
    st.dt_prev = 0.1;
    let before = st.committed.clone();
    let rep = replan(&mut st, &map, 0.0, &cfg);
    assert_eq!(rep.reason, "over_budget");
    assert_eq!(st.committed, before);
    assert_eq!(st.dt_prev, 0.2);
}

#[test]
fn stopped_at_goal_keeps_the_rest_trajectory() {
    let map = free_map();
    let g = Point3::new(1.0, 0.0, 0.0);
    let cfg = config(g);
    let mut st = PlannerState::new(g + Point3::new(0.1, 0.0, 0.0), 0.0);
    let before = st.committed.clone();
    let rep = replan(&mut st, &map, 0.0, &cfg);
    assert_eq!(rep.reason, "at_goal");
    assert_eq!(st.committed, before);
}

#[test]
fn conservative_whole_stays_in_known_space() {
    let unknown = |p: &Point3| p.x > 1.0;
    let map = map_with([64, 64, 16], Point3::zeros(), |_| false, unknown);
    let grid = map.inflated_grid();
    let mut cfg = config(Point3::new(6.0, 0.0, 0.0));
    cfg.mode = PlannerMode::Conservative;
    let a = FullState::rest(Point3::new(-2.0, 0.0, 0.0));
    let path = PiecewiseLinearPath::new(vec![a.pos, cfg.goal]).unwrap();
    let whole = build_whole(&grid, &path, &a, 0.0, 1.0, &cfg).unwrap();
    assert!(segment_free(&grid, &whole.trajectory, 0.0, whole.trajectory.t_end(), &cfg.limits));
    cfg.mode = PlannerMode::Faster;
    let fast = build_whole(&grid, &path, &a, 0.0, 1.0, &cfg).unwrap();
    assert!(fast.trajectory.end_state().pos.x > whole.trajectory.end_state().pos.x + 1.0);
}

#[test]
fn miqp_of_commit_rechecks_cleanly() {
    let map = free_map();
    let cfg = config(Point3::new(6.0, 2.0, 0.0));
    let mut st = PlannerState::new(Point3::new(-2.0, 0.0, 0.0), 0.0);
    st.dt_prev = 0.05;
    let rep = replan(&mut st, &map, 0.0, &cfg);
    let c = rep.commit.expect("committed");
    verify_solution(&c.whole.problem, &c.whole.solution, FEAS_TOL).unwrap();
    verify_solution(&c.safe.problem, &c.safe.solution, FEAS_TOL).unwrap();
    let again = solve_miqp(&c.whole.problem, &cfg.miqp).unwrap();
    assert!((again.cost - c.whole.solution.cost).abs() <= 1e-9 * again.cost.max(1.0));
}
