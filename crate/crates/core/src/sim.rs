//! Closed-loop simulation: analytic worlds, an omnidirectional range
//! sensor, lock-step execution of committed trajectories and run outputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opt::{verify_solution, FEAS_TOL};
use crate::planner::{at_goal, replan, segment_free, PlannerConfig, PlannerState, ReplanReport, StageTimings};
use crate::trajectory::{write_sample_row, Sample};
use crate::voxel_map::{InflatedGrid, VoxelMap};
use crate::Point3;

/// Radius of the obstacle-free disks around start and goal.
pub const CLEAR_RADIUS: f64 = 1.5;
/// Height of generated worlds; cylinders span the full height.
pub const WORLD_HEIGHT: f64 = 4.0;
/// Flight altitude of generated start and goal points.
pub const FLIGHT_ALTITUDE: f64 = 1.0;
const SLAB: f64 = 1.0;
const WALL_THICKNESS: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("world file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Vertical cylinder spanning `z_min..z_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderObstacle {
    pub center: [f64; 2],
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
    #[serde(default)]
    pub boxes: Vec<BoxObstacle>,
    #[serde(default)]
    pub cylinders: Vec<CylinderObstacle>,
    pub start: [f64; 3],
    pub goal: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn p3(a: [f64; 3]) -> Point3 {
    Point3::new(a[0], a[1], a[2])
}

/// Ray parameter range `[t0, t1]` inside an axis-aligned box.
fn ray_box(o: &Point3, d: &Point3, lo: &Point3, hi: &Point3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - o[k]) / d[k];
        let b = (hi[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

impl BoxObstacle {
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    fn ray_entry(&self, o: &Point3, d: &Point3) -> Option<f64> {
        let (t0, t1) = ray_box(o, d, &p3(self.min), &p3(self.max))?;
        (t1 >= 0.0).then_some(t0.max(0.0))
    }
}

impl CylinderObstacle {
    pub fn contains(&self, p: &Point3) -> bool {
        let dx = p.x - self.center[0];
        let dy = p.y - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius && p.z >= self.z_min && p.z <= self.z_max
    }

    fn ray_entry(&self, o: &Point3, d: &Point3) -> Option<f64> {
        // Interval inside the infinite cylinder, intersected with the slab.
        let ox = o.x - self.center[0];
        let oy = o.y - self.center[1];
        let a = d.x * d.x + d.y * d.y;
        let (mut t0, mut t1) = if a == 0.0 {
            if ox * ox + oy * oy > self.radius * self.radius {
                return None;
            }
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            let b = 2.0 * (ox * d.x + oy * d.y);
            let c = ox * ox + oy * oy - self.radius * self.radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a))
        };
        if d.z == 0.0 {
            if o.z < self.z_min || o.z > self.z_max {
                return None;
            }
        } else {
            let a = (self.z_min - o.z) / d.z;
            let b = (self.z_max - o.z) / d.z;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t1 >= 0.0).then_some(t0.max(0.0))
    }
}

impl World {
    pub fn start_point(&self) -> Point3 {
        p3(self.start)
    }

    pub fn goal_point(&self) -> Point3 {
        p3(self.goal)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for k in 0..3 {
            if !(self.extent_min[k] < self.extent_max[k]) {
                return Err(SimError::InvalidWorld("extent_min must be below extent_max".into()));
            }
        }
        if self.cylinders.iter().any(|c| !(c.radius > 0.0)) {
            return Err(SimError::InvalidWorld("cylinder radius must be positive".into()));
        }
        if self.contains(&self.start_point()) {
            return Err(SimError::InvalidWorld("start lies inside an obstacle".into()));
        }
        Ok(())
    }

    /// Whether `p` lies inside any obstacle (ground truth).
    pub fn contains(&self, p: &Point3) -> bool {
        self.boxes.iter().any(|b| b.contains(p)) || self.cylinders.iter().any(|c| c.contains(p))
    }

    /// Distance along the unit direction `d` to the first obstacle surface,
    /// if within `max_range`.
    pub fn ray_hit(&self, o: &Point3, d: &Point3, max_range: f64) -> Option<f64> {
        let boxes = self.boxes.iter().filter_map(|b| b.ray_entry(o, d));
        let cyls = self.cylinders.iter().filter_map(|c| c.ray_entry(o, d));
        boxes.chain(cyls).filter(|&t| t <= max_range).min_by(f64::total_cmp)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let w: World = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    /// Floor below `z = 0` and ceiling above the world height, spanning the
    /// extent with a margin.
    fn add_floor_and_ceiling(&mut self, margin: f64) {
        let lo = [self.extent_min[0] - margin, self.extent_min[1] - margin];
        let hi = [self.extent_max[0] + margin, self.extent_max[1] + margin];
        let z0 = self.extent_min[2];
        let z1 = self.extent_max[2];
        self.boxes.push(BoxObstacle { min: [lo[0], lo[1], z0 - SLAB], max: [hi[0], hi[1], z0] });
        self.boxes.push(BoxObstacle { min: [lo[0], lo[1], z1], max: [hi[0], hi[1], z1 + SLAB] });
    }
}

/// Square forest of side `extent` with `⌊density · extent²⌋` vertical
/// cylinders of radius U[0.2, 0.5] placed uniformly, none touching the
/// cleared disks around start and goal.
pub fn generate_forest(extent: f64, density: f64, seed: u64) -> Result<World, SimError> {
    if !(density >= 0.0) || !(extent > 2.0 * CLEAR_RADIUS) {
        return Err(SimError::InvalidConfig(format!("bad forest parameters: extent {extent}, density {density}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = [1.0, extent / 2.0, FLIGHT_ALTITUDE];
    let goal = [extent - 1.0, extent / 2.0, FLIGHT_ALTITUDE];
    let count = (density * extent * extent).floor() as usize;
    let mut cylinders = Vec::with_capacity(count);
    while cylinders.len() < count {
        let cx = rng.random_range(0.0..extent);
        let cy = rng.random_range(0.0..extent);
        let r = rng.random_range(0.2..0.5);
        let near = |p: [f64; 3]| (cx - p[0]).hypot(cy - p[1]) < CLEAR_RADIUS + r;
        if near(start) || near(goal) {
            continue;
        }
        cylinders.push(CylinderObstacle { center: [cx, cy], radius: r, z_min: 0.0, z_max: WORLD_HEIGHT });
    }
    let mut world = World {
        extent_min: [0.0, 0.0, 0.0],
        extent_max: [extent, extent, WORLD_HEIGHT],
        boxes: Vec::new(),
        cylinders,
        start,
        goal,
        seed,
    };
    world.add_floor_and_ceiling(15.0);
    Ok(world)
}

/// A square trap of side `trap_size` open toward the start: a back wall,
/// two side walls and a front wall with a centered gap of `opening_width`.
/// Start, trap mouth, back wall and goal lie on one line. When the gap is
/// as wide as the trap the front wall disappears.
pub fn generate_bugtrap(opening_width: f64, trap_size: f64) -> Result<World, SimError> {
    if !(opening_width > 0.0 && trap_size > 0.0) {
        return Err(SimError::InvalidConfig("bugtrap sizes must be positive".into()));
    }
    let x0 = 3.0;
    let x1 = x0 + trap_size;
    let h = trap_size / 2.0;
    let t = WALL_THICKNESS;
    let z = [0.0, WORLD_HEIGHT];
    let wall = |xa: f64, ya: f64, xb: f64, yb: f64| BoxObstacle { min: [xa, ya, z[0]], max: [xb, yb, z[1]] };
    let mut boxes = vec![
        wall(x1 - t, -h, x1, h),
        wall(x0, h - t, x1, h),
        wall(x0, -h, x1, -h + t),
    ];
    let gap = opening_width / 2.0;
    if gap < h - t {
        boxes.push(wall(x0, gap, x0 + t, h));
        boxes.push(wall(x0, -h, x0 + t, -gap));
    }
    let goal_x = x1 + 4.0;
    let mut world = World {
        extent_min: [-2.0, -h - 5.0, 0.0],
        extent_max: [goal_x + 2.0, h + 5.0, WORLD_HEIGHT],
        boxes,
        cylinders: Vec::new(),
        start: [0.0, 0.0, FLIGHT_ALTITUDE],
        goal: [goal_x, 0.0, FLIGHT_ALTITUDE],
        seed: 0,
    };
    world.add_floor_and_ceiling(15.0);
    Ok(world)
}

/// `n` nearly uniform unit directions on the sphere (Fibonacci lattice).
pub fn fibonacci_directions(n: usize) -> Vec<Point3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Point3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Casts every ray in `directions` from `pose` and fuses the returns.
/// A hit marks the cell just behind the surface Occupied.
pub fn sense_with(world: &World, map: &mut VoxelMap, pose: &Point3, sensor_radius: f64, directions: &[Point3]) {
    if !map.contains_point(pose) {
        return;
    }
    for d in directions {
        let (end, hit) = match world.ray_hit(pose, d, sensor_radius) {
            Some(s) => (pose + d * (s + 1e-6), true),
            None => (pose + d * sensor_radius, false),
        };
        map.raycast_update(pose, &end, hit).expect("pose is inside the map");
    }
}

/// [`sense_with`] using `rays` Fibonacci directions.
pub fn sense(world: &World, map: &mut VoxelMap, pose: &Point3, sensor_radius: f64, rays: usize) {
    sense_with(world, map, pose, sensor_radius, &fibonacci_directions(rays));
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub tick: f64,
    pub sensor_radius: f64,
    pub rays: usize,
    pub replan_period: f64,
    pub timeout: f64,
    pub map_dims: [usize; 3],
    pub resolution: f64,
    pub inflation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick: 0.05,
            sensor_radius: 5.0,
            rays: 1500,
            replan_period: 0.1,
            timeout: 60.0,
            map_dims: [80, 80, 16],
            resolution: 0.25,
            inflation: 0.3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.tick > 0.0 && self.replan_period > 0.0 && self.timeout > 0.0 && self.sensor_radius > 0.0) {
            return Err(SimError::InvalidConfig("tick, replan period, timeout and sensor radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Timeout,
    Collision,
}

/// Quantiles of per-replan stage times in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageQuantiles {
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TimingSummary {
    pub jps: StageQuantiles,
    pub decomposition: StageQuantiles,
    pub miqp_whole: StageQuantiles,
    pub miqp_safe: StageQuantiles,
    pub total: StageQuantiles,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub success: bool,
    pub termination: Termination,
    pub total_distance: f64,
    pub total_time: f64,
    pub straight_line_distance: f64,
    pub replan_count: usize,
    pub commit_count: usize,
    /// Ticks with the vehicle inside a true obstacle.
    pub collisions: usize,
    /// Commits whose solutions failed an independent re-check.
    pub committed_violations: usize,
    /// Ticks where the vehicle was outside free space of the snapshot its
    /// trajectory was committed against.
    pub snapshot_violations: usize,
    pub final_position: [f64; 3],
    pub final_speed: f64,
    /// Wall-clock data; kept out of `metrics.json` so runs compare bitwise.
    #[serde(skip)]
    pub timing: TimingSummary,
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    /// Executed states, one per tick.
    pub samples: Vec<(f64, Sample)>,
    pub events: Vec<ReplanReport>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn stage_quantiles(values: impl Iterator<Item = f64>) -> StageQuantiles {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    StageQuantiles { p50: quantile(&v, 0.5), p75: quantile(&v, 0.75), max: v.last().copied().unwrap_or(0.0) }
}

pub fn summarize_timings(timings: &[StageTimings]) -> TimingSummary {
    TimingSummary {
        jps: stage_quantiles(timings.iter().map(|t| t.jps)),
        decomposition: stage_quantiles(timings.iter().map(|t| t.decomposition)),
        miqp_whole: stage_quantiles(timings.iter().map(|t| t.miqp_whole)),
        miqp_safe: stage_quantiles(timings.iter().map(|t| t.miqp_safe)),
        total: stage_quantiles(timings.iter().map(|t| t.total)),
    }
}

/// Independent checks of a fresh commit: both solutions re-verified, the
/// new part of the committed trajectory Free in the snapshot, and a
/// stopped terminal state.
fn commit_violates(report: &ReplanReport, state: &PlannerState, grid: &InflatedGrid, cfg: &PlannerConfig) -> bool {
    let Some(c) = &report.commit else { return false };
    let end = state.committed.end_state();
    verify_solution(&c.whole.problem, &c.whole.solution, FEAS_TOL).is_err()
        || verify_solution(&c.safe.problem, &c.safe.solution, FEAS_TOL).is_err()
        || !segment_free(grid, &state.committed, c.t_a, state.committed.t_end(), &cfg.limits)
        || end.vel.norm() >= 1e-7
        || end.acc.norm() >= 1e-7
}

/// Flies one mission in lock step: each tick senses, checks the vehicle
/// against ground truth and the goal, replans on schedule and advances
/// along the committed trajectory.
pub fn run_mission(world: &World, cfg: &PlannerConfig, sim: &SimConfig) -> Result<RunOutput, SimError> {
    world.validate()?;
    sim.validate()?;
    cfg.validate().map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let start = world.start_point();
    let mut map = VoxelMap::new(start, sim.map_dims, sim.resolution, sim.inflation)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let directions = fibonacci_directions(sim.rays);
    let mut state = PlannerState::new(start, 0.0);
    let mut events = Vec::new();
    let mut samples = Vec::new();
    // Snapshot grids of the last two commits with their switch-over times.
    let mut grids: Vec<(f64, InflatedGrid)> = Vec::new();

    let mut metrics = RunMetrics {
        success: false,
        termination: Termination::Timeout,
        total_distance: 0.0,
        total_time: 0.0,
        straight_line_distance: (world.goal_point() - start).norm(),
        replan_count: 0,
        commit_count: 0,
        collisions: 0,
        committed_violations: 0,
        snapshot_violations: 0,
        final_position: world.start,
        final_speed: 0.0,
        timing: TimingSummary::default(),
    };

    let replan_every = (sim.replan_period / sim.tick).round().max(1.0) as u64;
    let max_ticks = (sim.timeout / sim.tick).ceil() as u64;
    let mut prev_pos = start;
    for tick in 0..=max_ticks {
        let t = tick as f64 * sim.tick;
        let sample = state.committed.eval_clamped(t);
        let pos = sample.state.pos;
        metrics.total_distance += (pos - prev_pos).norm();
        prev_pos = pos;
        samples.push((t, sample));
        metrics.total_time = t;
        metrics.final_position = [pos.x, pos.y, pos.z];
        metrics.final_speed = sample.state.vel.norm();

        if world.contains(&pos) {
            metrics.collisions += 1;
            metrics.termination = Termination::Collision;
            break;
        }
        if let Some((_, g)) = grids.iter().rev().find(|(ts, _)| *ts <= t) {
            if g.point_class(&pos) != crate::voxel_map::VoxelState::Free {
                metrics.snapshot_violations += 1;
            }
        }
        if at_goal(&sample.state, &cfg.goal, sim.resolution) {
            metrics.success = true;
            metrics.termination = Termination::Goal;
            break;
        }

        map.recenter(&pos);
        sense_with(world, &mut map, &pos, sim.sensor_radius, &directions);

        if tick % replan_every == 0 {
            let report = replan(&mut state, &map, t, cfg);
            metrics.replan_count += 1;
            if report.committed {
                metrics.commit_count += 1;
                let grid = map.inflated_grid();
                if commit_violates(&report, &state, &grid, cfg) {
                    metrics.committed_violations += 1;
                }
                let t_a = report.commit.as_ref().map_or(t, |c| c.t_a);
                grids.push((t_a, grid));
                if grids.len() > 2 {
                    grids.remove(0);
                }
            }
            events.push(report);
        }
    }
    metrics.timing = summarize_timings(&events.iter().map(|e| e.timings).collect::<Vec<_>>());
    Ok(RunOutput { metrics, samples, events })
}

impl RunOutput {
    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize")
    }

    pub fn write_trajectory_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,y,z,vx,vy,vz,ax,ay,az,jx,jy,jz")?;
        for (t, s) in &self.samples {
            write_sample_row(&mut out, *t, s)?;
        }
        Ok(())
    }

    pub fn write_events_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", ReplanReport::CSV_HEADER)?;
        for e in &self.events {
            writeln!(out, "{}", e.csv_row())?;
        }
        Ok(())
    }

    pub fn write_timings_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,jps,decomposition,miqp_whole,miqp_safe,total")?;
        for e in &self.events {
            let s = e.timings;
            writeln!(out, "{},{},{},{},{},{}", e.k, s.jps, s.decomposition, s.miqp_whole, s.miqp_safe, s.total)?;
        }
        Ok(())
    }

    /// Top-down plot data: one row per obstacle footprint, then start, goal
    /// and the flown path.
    pub fn write_plot_csv<W: Write>(&self, world: &World, mut out: W) -> std::io::Result<()> {
        writeln!(out, "kind,a,b,c,d")?;
        for b in &world.boxes {
            // Floor and ceiling slabs are not obstacles in the plane.
            if b.min[2] >= world.extent_max[2] || b.max[2] <= world.extent_min[2] {
                continue;
            }
            writeln!(out, "box,{},{},{},{}", b.min[0], b.min[1], b.max[0], b.max[1])?;
        }
        for c in &world.cylinders {
            writeln!(out, "cylinder,{},{},{},", c.center[0], c.center[1], c.radius)?;
        }
        writeln!(out, "start,{},{},,", world.start[0], world.start[1])?;
        writeln!(out, "goal,{},{},,", world.goal[0], world.goal[1])?;
        for (_, s) in &self.samples {
            writeln!(out, "path,{},{},,", s.state.pos.x, s.state.pos.y)?;
        }
        Ok(())
    }

    /// Writes `metrics.json`, `trajectory.csv`, `events.csv`,
    /// `timings.csv` and `plot.csv` into `dir`.
    pub fn write_all(&self, world: &World, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), self.metrics_json() + "\n")?;
        let file = |name: &str| -> std::io::Result<BufWriter<fs::File>> { Ok(BufWriter::new(fs::File::create(dir.join(name))?)) };
        self.write_trajectory_csv(file("trajectory.csv")?)?;
        self.write_events_csv(file("events.csv")?)?;
        self.write_timings_csv(file("timings.csv")?)?;
        self.write_plot_csv(world, file("plot.csv")?)?;
        Ok(())
    }
}
