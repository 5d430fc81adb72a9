//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhplan_core::corridor::{Corridor, Polyhedron};
use rhplan_core::opt::{
    compute_dt_heuristic, solve_fixed_binaries, solve_miqp, DynamicLimits, MiqpOptions, MiqpProblem, MiqpSolution,
    SolveError, Terminal,
};
use rhplan_core::planner::{BudgetMode, PlannerConfig, PlannerMode};
use rhplan_core::sim::{generate_bugtrap, generate_forest, run_mission, RunOutput, SimConfig, Termination, World};
use rhplan_core::trajectory::{de_casteljau, CubicInterval, FullState};
use rhplan_core::Point3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn forest_limits() -> DynamicLimits {
    DynamicLimits::new(5.0, 5.0, 8.0).unwrap()
}

struct Flight {
    out: RunOutput,
    wall: Duration,
}

fn fly(world: &World, limits: DynamicLimits, mode: PlannerMode, budget: BudgetMode) -> Flight {
    let mut cfg = PlannerConfig::new(world.goal_point(), limits);
    cfg.mode = mode;
    cfg.budget = budget;
    let started = Instant::now();
    let out = run_mission(world, &cfg, &SimConfig::default()).expect("mission setup");
    Flight { out, wall: started.elapsed() }
}

fn forest(seed: u64) -> World {
    generate_forest(20.0, 0.1, seed).unwrap()
}

fn virtual_budget() -> BudgetMode {
    PlannerConfig::new(Point3::zeros(), forest_limits()).budget
}

fn trajectory_csv(out: &RunOutput) -> Vec<u8> {
    let mut buf = Vec::new();
    out.write_trajectory_csv(&mut buf).unwrap();
    buf
}

/// Largest amount by which `p` leaves `poly`, from the raw rows.
fn row_violation(poly: &Polyhedron, p: &Point3) -> f64 {
    poly.normals().iter().zip(poly.offsets()).map(|(n, c)| n.dot(p) - c).fold(f64::NEG_INFINITY, f64::max)
}

/// Position on a constant-jerk piece from its starting state.
fn integrate(start: &FullState, jerk: &Point3, t: f64) -> Point3 {
    start.pos + start.vel * t + start.acc * (t * t / 2.0) + jerk * (t * t * t / 6.0)
}

/// Worst containment violation over 50 samples per interval, against every
/// polyhedron the interval is assigned to.
fn sampled_hull_violation(corridor: &Corridor, sol: &MiqpSolution) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (iv, row) in sol.trajectory.intervals().iter().zip(&sol.binaries) {
        let start = iv.start_state();
        for k in 0..50 {
            let p = integrate(&start, &iv.jerk(), iv.dt * k as f64 / 49.0);
            for (poly, _) in corridor.polyhedra().iter().zip(row).filter(|(_, &b)| b) {
                worst = worst.max(row_violation(poly, &p));
            }
        }
    }
    worst
}

fn random_point(rng: &mut ChaCha8Rng, scale: f64) -> Point3 {
    Point3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

fn random_box(rng: &mut ChaCha8Rng, center: Point3) -> Polyhedron {
    let half = Point3::new(rng.random_range(0.3..2.0), rng.random_range(0.3..2.0), rng.random_range(0.3..1.0));
    let mut normals = Polyhedron::axis_box(center - half, center + half).normals().to_vec();
    let mut offsets = Polyhedron::axis_box(center - half, center + half).offsets().to_vec();
    if rng.random_bool(0.5) {
        // An extra tilted face that still keeps the center inside.
        let n = random_point(rng, 1.0).normalize();
        offsets.push(n.dot(&center) + rng.random_range(0.2..1.5));
        normals.push(n);
    }
    Polyhedron::new(normals, offsets)
}

fn random_instance(rng: &mut ChaCha8Rng) -> MiqpProblem {
    let n = rng.random_range(1..=4);
    let first_center = Point3::zeros();
    let mut polys = vec![random_box(rng, first_center)];
    if rng.random_bool(0.6) {
        let second_center = Point3::new(rng.random_range(0.5..4.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5));
        polys.push(random_box(rng, second_center));
    }
    let goal = if polys.len() == 2 {
        let w = rng.random_range(0.0..1.0);
        Point3::new(w * 4.0, rng.random_range(-1.0..1.0), 0.0)
    } else {
        random_point(rng, 0.8)
    };
    let x_init = FullState::new(random_point(rng, 0.2), random_point(rng, 0.8), random_point(rng, 0.5));
    let terminal = if rng.random_bool(0.5) { Terminal::Fixed(FullState::rest(goal)) } else { Terminal::FreePositionRest };
    let dt = rng.random_range(0.4..1.6);
    MiqpProblem::new(n, Corridor::new(polys), x_init, terminal, dt, forest_limits()).unwrap()
}

/// Lowest cost over every assignment where each interval uses a nonempty
/// subset of the polyhedra.
fn enumerate_best(problem: &MiqpProblem) -> Option<f64> {
    let p = problem.num_polyhedra();
    let subsets: Vec<Vec<bool>> = (1u32..(1 << p)).map(|m| (0..p).map(|k| m & (1 << k) != 0).collect()).collect();
    let total = subsets.len().pow(problem.n_intervals as u32);
    (0..total)
        .filter_map(|mut code| {
            let rows: Vec<Vec<bool>> = (0..problem.n_intervals)
                .map(|_| {
                    let s = subsets[code % subsets.len()].clone();
                    code /= subsets.len();
                    s
                })
                .collect();
            solve_fixed_binaries(problem, &rows).ok().map(|r| r.cost)
        })
        .min_by(f64::total_cmp)
}

fn dt_example() -> Verdict {
    let dt = compute_dt_heuristic(&FullState::rest(Point3::zeros()), &Point3::new(10.0, 0.0, 0.0), &forest_limits(), 10, 1.0);
    verdict((dt - 0.2).abs() <= 1e-12, format!("dt = {dt}"))
}

fn miqp_oracle(solutions: &mut Vec<(Corridor, MiqpSolution)>) -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut feasible, mut infeasible, mut mismatches) = (0, 0, Vec::new());
    let mut worst_rel: f64 = 0.0;
    for i in 0..100 {
        let prob = random_instance(&mut rng);
        match (solve_miqp(&prob, &MiqpOptions::default()), enumerate_best(&prob)) {
            (Ok(sol), Some(best)) => {
                feasible += 1;
                let rel = (sol.cost - best).abs() / best.abs().max(1e-9);
                worst_rel = worst_rel.max(rel);
                if rel > 1e-6 {
                    mismatches.push(format!("#{i}: {} vs {best}", sol.cost));
                }
                solutions.push((prob.corridor.clone(), sol));
            }
            (Err(SolveError::Infeasible), None) => infeasible += 1,
            (got, want) => mismatches.push(format!("#{i}: {:?} vs {want:?}", got.map(|s| s.cost))),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        mismatches.is_empty() && secs < 60.0,
        format!(
            "{feasible} feasible, {infeasible} infeasible, worst relative gap {worst_rel:.1e}, {secs:.1} s{}",
            if mismatches.is_empty() { String::new() } else { format!(", mismatches: {}", mismatches.join("; ")) }
        ),
    )
}

fn bezier_fidelity(solutions: &[(Corridor, MiqpSolution)]) -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_eval: f64 = 0.0;
    for _ in 0..1000 {
        let start = FullState::new(random_point(&mut rng, 10.0), random_point(&mut rng, 5.0), random_point(&mut rng, 5.0));
        let jerk = random_point(&mut rng, 8.0);
        let dt = rng.random_range(0.01..1.0);
        let iv = CubicInterval::from_state(&start, jerk, dt);
        let cps = iv.control_points();
        for k in 0..=10 {
            let s = if k < 10 { k as f64 / 9.0 } else { rng.random_range(0.0..1.0) };
            worst_eval = worst_eval.max((de_casteljau(&cps, s) - integrate(&start, &jerk, s * dt)).amax());
        }
    }
    let worst_hull = solutions.iter().map(|(c, s)| sampled_hull_violation(c, s)).fold(f64::NEG_INFINITY, f64::max);
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst_eval < 1e-12 && worst_hull <= 1e-7 && !solutions.is_empty() && secs < 30.0,
        format!(
            "max eval gap {worst_eval:.1e}; {} solutions, worst sampled hull violation {worst_hull:.1e}, {secs:.1} s",
            solutions.len()
        ),
    )
}

fn mission_solutions(out: &RunOutput) -> Vec<(Corridor, MiqpSolution)> {
    out.events
        .iter()
        .filter_map(|e| e.commit.as_ref())
        .flat_map(|c| {
            [
                (c.whole.problem.corridor.clone(), c.whole.solution.clone()),
                (c.safe.problem.corridor.clone(), c.safe.solution.clone()),
            ]
        })
        .collect()
}

fn safety(flights: &HashMap<u64, Flight>) -> Verdict {
    let mut bad = Vec::new();
    let (mut successes, mut commits) = (0, 0);
    let mut wall = 0.0;
    for seed in 0..20 {
        let m = &flights[&seed].out.metrics;
        wall += flights[&seed].wall.as_secs_f64();
        successes += m.success as usize;
        commits += m.commit_count;
        if m.collisions > 0 || m.committed_violations > 0 || m.snapshot_violations > 0 || m.termination == Termination::Collision {
            bad.push(format!(
                "seed {seed}: {} collisions, {} committed, {} snapshot",
                m.collisions, m.committed_violations, m.snapshot_violations
            ));
        }
    }
    verdict(
        bad.is_empty() && wall < 300.0,
        format!(
            "20 runs, {successes} reached the goal, {commits} commits re-checked, {wall:.0} s{}",
            if bad.is_empty() { String::new() } else { format!(", violations: {}", bad.join("; ")) }
        ),
    )
}

fn mode_comparison(faster: &HashMap<u64, Flight>) -> Verdict {
    let mut wall = 0.0;
    let (mut t_fast, mut t_cons, mut ok_fast, mut ok_cons) = (0.0, 0.0, 0, 0);
    for seed in 0..10 {
        let f = &faster[&seed];
        let c = fly(&forest(seed), forest_limits(), PlannerMode::Conservative, virtual_budget());
        wall += f.wall.as_secs_f64() + c.wall.as_secs_f64();
        t_fast += f.out.metrics.total_time;
        t_cons += c.out.metrics.total_time;
        ok_fast += f.out.metrics.success as usize;
        ok_cons += c.out.metrics.success as usize;
    }
    let (mean_fast, mean_cons) = (t_fast / 10.0, t_cons / 10.0);
    let gain = 1.0 - mean_fast / mean_cons;
    verdict(
        ok_fast == 10 && ok_cons == 10 && gain >= 0.15 && wall < 600.0,
        format!(
            "mean time {mean_fast:.2} s vs {mean_cons:.2} s ({:.1}% lower), success {ok_fast}/10 and {ok_cons}/10, {wall:.0} s",
            100.0 * gain
        ),
    )
}

fn bugtrap() -> Verdict {
    let world = generate_bugtrap(2.0, 8.0).unwrap();
    let limits = DynamicLimits::new(10.0, 10.0, 40.0).unwrap();
    let started = Instant::now();
    let f = fly(&world, limits, PlannerMode::Faster, virtual_budget()).out.metrics;
    let c = fly(&world, limits, PlannerMode::Conservative, virtual_budget()).out.metrics;
    let secs = started.elapsed().as_secs_f64();
    let safe = |m: &rhplan_core::sim::RunMetrics| m.collisions == 0 && m.committed_violations == 0 && m.snapshot_violations == 0;
    verdict(
        f.success && c.success && safe(&f) && safe(&c) && f.total_time <= c.total_time && secs < 120.0,
        format!(
            "faster {:?} in {:.2} s, conservative {:?} in {:.2} s, {secs:.0} s",
            f.termination, f.total_time, c.termination, c.total_time
        ),
    )
}

fn latency() -> Verdict {
    let flight = fly(&forest(0), forest_limits(), PlannerMode::Faster, BudgetMode::WallClock);
    let mut totals: Vec<f64> = flight.out.events.iter().map(|e| e.timings.total).collect();
    totals.sort_by(f64::total_cmp);
    let p75 = totals[(0.75 * (totals.len() - 1) as f64).ceil() as usize];
    let max = totals.last().copied().unwrap_or(0.0);
    verdict(
        p75 < 0.1,
        format!("{} replans, p75 {:.1} ms, max {:.1} ms", totals.len(), 1e3 * p75, 1e3 * max),
    )
}

fn determinism(first: &Flight) -> Verdict {
    let again = fly(&forest(0), forest_limits(), PlannerMode::Faster, virtual_budget());
    let same_metrics = first.out.metrics_json() == again.out.metrics_json();
    let same_traj = trajectory_csv(&first.out) == trajectory_csv(&again.out);
    verdict(same_metrics && same_traj, format!("metrics.json equal: {same_metrics}, trajectory.csv equal: {same_traj}"))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("[{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };

    report("4 dt heuristic example", dt_example());
    let mut solutions = Vec::new();
    report("2 MIQP matches enumeration", miqp_oracle(&mut solutions));
    report("7 replan latency p75 < 100 ms", latency());

    let flights: HashMap<u64, Flight> =
        (0..20).map(|s| (s, fly(&forest(s), forest_limits(), PlannerMode::Faster, virtual_budget()))).collect();
    solutions.extend(mission_solutions(&flights[&0].out));
    report("3 Bezier evaluation and hull containment", bezier_fidelity(&solutions));
    report("1 forest safety", safety(&flights));
    report("5 faster beats conservative", mode_comparison(&flights));
    report("6 bugtrap", bugtrap());
    report("8 determinism", determinism(&flights[&0]));

    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
