//! Python bindings: occupancy mapping, grid search, corridor decomposition,
//! the jerk-optimal MIQP and closed-loop missions.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use rhplan_core::corridor::{decompose as core_decompose, DEFAULT_BBOX_HALFWIDTHS};
use rhplan_core::global_planner::jps as core_jps;
use rhplan_core::opt::{solve_miqp as core_solve_miqp, MiqpOptions};
use rhplan_core::planner::{BudgetMode, PlannerMode};
use rhplan_core::sim;
use rhplan_core::{
    Corridor, DynamicLimits, FullState, MiqpProblem, PiecewiseLinearPath, PlannerConfig, Point3, Polyhedron, StateSet,
    Terminal, VoxelState,
};

type Vec3 = [f64; 3];

fn p3(v: Vec3) -> Point3 {
    Point3::new(v[0], v[1], v[2])
}

fn arr(p: &Point3) -> Vec3 {
    [p.x, p.y, p.z]
}

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn state_name(s: VoxelState) -> &'static str {
    match s {
        VoxelState::Free => "free",
        VoxelState::Unknown => "unknown",
        VoxelState::Occupied => "occupied",
    }
}

fn parse_state(s: &str) -> PyResult<VoxelState> {
    match s {
        "free" => Ok(VoxelState::Free),
        "unknown" => Ok(VoxelState::Unknown),
        "occupied" => Ok(VoxelState::Occupied),
        other => Err(PyValueError::new_err(format!("unknown voxel state '{other}'"))),
    }
}

fn parse_states(names: Vec<String>) -> PyResult<StateSet> {
    let states = names.iter().map(|n| parse_state(n)).collect::<PyResult<Vec<_>>>()?;
    Ok(StateSet::of(&states))
}

fn path_from(points: Vec<Vec3>) -> PyResult<PiecewiseLinearPath> {
    PiecewiseLinearPath::new(points.into_iter().map(p3).collect()).map_err(err)
}

/// Robot-centered occupancy grid with inflated queries.
#[pyclass(name = "VoxelMap", from_py_object)]
#[derive(Clone)]
struct PyVoxelMap {
    inner: rhplan_core::VoxelMap,
}

#[pymethods]
impl PyVoxelMap {
    #[new]
    #[pyo3(signature = (center, dims=[80, 80, 16], resolution=0.25, inflation=0.3))]
    fn new(center: Vec3, dims: [usize; 3], resolution: f64, inflation: f64) -> PyResult<Self> {
        let inner = rhplan_core::VoxelMap::new(p3(center), dims, resolution, inflation).map_err(err)?;
        Ok(Self { inner })
    }

    /// Raw state of the voxel holding `p`, `"unknown"` outside the map.
    fn classify(&self, p: Vec3) -> &'static str {
        state_name(self.inner.classify(&p3(p)))
    }

    /// State after inflating occupied and unknown voxels.
    fn classify_inflated(&self, p: Vec3) -> &'static str {
        state_name(self.inner.classify_inflated(&p3(p)))
    }

    fn set_state(&mut self, p: Vec3, state: &str) -> PyResult<()> {
        let idx = self.inner.world_to_voxel(&p3(p)).ok_or_else(|| PyValueError::new_err("point outside the map"))?;
        self.inner.set_state(idx, parse_state(state)?);
        Ok(())
    }

    /// Marks cells along the ray free, and the endpoint occupied on a hit.
    fn raycast_update(&mut self, origin: Vec3, endpoint: Vec3, hit: bool) -> PyResult<()> {
        self.inner.raycast_update(&p3(origin), &p3(endpoint), hit).map_err(err)
    }

    fn recenter(&mut self, center: Vec3) {
        self.inner.recenter(&p3(center));
    }

    #[getter]
    fn center(&self) -> Vec3 {
        arr(&self.inner.center())
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.inner.resolution()
    }

    /// Counts of free, unknown and occupied voxels.
    fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for (_, s) in self.inner.iter() {
            match s {
                VoxelState::Free => c.0 += 1,
                VoxelState::Unknown => c.1 += 1,
                VoxelState::Occupied => c.2 += 1,
            }
        }
        c
    }
}

/// Any-angle grid path over the inflated map through the given states.
#[pyfunction]
#[pyo3(signature = (map, start, goal, traversable=vec!["free".to_string(), "unknown".to_string()]))]
fn jps(map: &PyVoxelMap, start: Vec3, goal: Vec3, traversable: Vec<String>) -> PyResult<Vec<Vec3>> {
    let grid = map.inner.inflated_grid();
    let path = core_jps(&grid, &p3(start), &p3(goal), parse_states(traversable)?).map_err(err)?;
    Ok(path.vertices().iter().map(arr).collect())
}

/// One polyhedron `(normals, offsets)` per path segment, each row meaning
/// `n·x ≤ c`, excluding every cell whose state is listed.
#[pyfunction]
#[pyo3(signature = (map, path, excluded=vec!["occupied".to_string()], halfwidths=DEFAULT_BBOX_HALFWIDTHS))]
fn decompose(
    map: &PyVoxelMap,
    path: Vec<Vec3>,
    excluded: Vec<String>,
    halfwidths: Vec3,
) -> PyResult<Vec<(Vec<Vec3>, Vec<f64>)>> {
    let grid = map.inner.inflated_grid();
    let corridor = core_decompose(&grid, &path_from(path)?, parse_states(excluded)?, p3(halfwidths)).map_err(err)?;
    Ok(corridor.polyhedra().iter().map(|p| (p.normals().iter().map(arr).collect(), p.offsets().to_vec())).collect())
}

/// Piecewise-cubic trajectory returned by the solver.
#[pyclass(name = "Trajectory", from_py_object)]
#[derive(Clone)]
struct PyTrajectory {
    inner: rhplan_core::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn t0(&self) -> f64 {
        self.inner.t0()
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end()
    }

    /// `(pos, vel, acc, jerk)` at `t`, clamped to the time range.
    fn eval(&self, t: f64) -> (Vec3, Vec3, Vec3, Vec3) {
        let s = self.inner.eval_clamped(t);
        (arr(&s.state.pos), arr(&s.state.vel), arr(&s.state.acc), arr(&s.jerk))
    }

    /// Four Bézier control points per interval.
    fn control_points(&self) -> Vec<[Vec3; 4]> {
        self.inner.intervals().iter().map(|iv| iv.control_points().map(|c| arr(&c))).collect()
    }

    fn jerks(&self) -> Vec<Vec3> {
        self.inner.jerks().iter().map(arr).collect()
    }
}

/// Result of the corridor-constrained jerk minimization.
#[pyclass(name = "MiqpSolution", get_all)]
struct PyMiqpSolution {
    cost: f64,
    /// Polyhedron index assigned to each interval.
    assignment: Vec<usize>,
    optimal: bool,
    nodes_explored: usize,
    trajectory: PyTrajectory,
}

/// Minimum squared-jerk trajectory of `n` intervals of length `dt` whose
/// Bézier control points stay inside the given polyhedra. Omitting
/// `final_state` asks for a stop anywhere in the corridor.
#[pyfunction]
#[pyo3(signature = (polyhedra, x_init, n, dt, limits, final_state=None, max_nodes=10_000))]
fn solve_miqp(
    polyhedra: Vec<(Vec<Vec3>, Vec<f64>)>,
    x_init: (Vec3, Vec3, Vec3),
    n: usize,
    dt: f64,
    limits: Vec3,
    final_state: Option<(Vec3, Vec3, Vec3)>,
    max_nodes: usize,
) -> PyResult<PyMiqpSolution> {
    let corridor = Corridor::new(
        polyhedra.into_iter().map(|(ns, cs)| Polyhedron::new(ns.into_iter().map(p3).collect(), cs)).collect(),
    );
    let state = |s: (Vec3, Vec3, Vec3)| FullState::new(p3(s.0), p3(s.1), p3(s.2));
    let terminal = final_state.map_or(Terminal::FreePositionRest, |s| Terminal::Fixed(state(s)));
    let limits = DynamicLimits::new(limits[0], limits[1], limits[2]).map_err(err)?;
    let problem = MiqpProblem::new(n, corridor, state(x_init), terminal, dt, limits).map_err(err)?;
    let options = MiqpOptions { max_nodes, ..MiqpOptions::default() };
    let sol = core_solve_miqp(&problem, &options).map_err(err)?;
    Ok(PyMiqpSolution {
        cost: sol.cost,
        assignment: sol.binaries.iter().map(|b| b.iter().position(|&x| x).unwrap_or(0)).collect(),
        optimal: sol.optimal,
        nodes_explored: sol.nodes_explored,
        trajectory: PyTrajectory { inner: sol.trajectory },
    })
}

/// Obstacle world with start and goal.
#[pyclass(name = "World", from_py_object)]
#[derive(Clone)]
struct PyWorld {
    inner: sim::World,
}

#[pymethods]
impl PyWorld {
    #[staticmethod]
    #[pyo3(signature = (extent=20.0, density=0.1, seed=0))]
    fn forest(extent: f64, density: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: sim::generate_forest(extent, density, seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (opening=2.0, size=8.0))]
    fn bugtrap(opening: f64, size: f64) -> PyResult<Self> {
        Ok(Self { inner: sim::generate_bugtrap(opening, size).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: sim::World::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn contains(&self, p: Vec3) -> bool {
        self.inner.contains(&p3(p))
    }

    #[getter]
    fn start(&self) -> Vec3 {
        self.inner.start
    }

    #[getter]
    fn goal(&self) -> Vec3 {
        self.inner.goal
    }

    fn num_obstacles(&self) -> usize {
        self.inner.boxes.len() + self.inner.cylinders.len()
    }
}

/// Logs of one closed-loop mission.
#[pyclass(name = "Mission")]
struct PyMission {
    world: sim::World,
    inner: sim::RunOutput,
}

#[pymethods]
impl PyMission {
    #[getter]
    fn success(&self) -> bool {
        self.inner.metrics.success
    }

    #[getter]
    fn total_time(&self) -> f64 {
        self.inner.metrics.total_time
    }

    #[getter]
    fn total_distance(&self) -> f64 {
        self.inner.metrics.total_distance
    }

    #[getter]
    fn collisions(&self) -> usize {
        self.inner.metrics.collisions
    }

    fn metrics_json(&self) -> String {
        self.inner.metrics_json()
    }

    /// Executed `(t, position)` pairs, one per tick.
    fn positions(&self) -> Vec<(f64, Vec3)> {
        self.inner.samples.iter().map(|(t, s)| (*t, arr(&s.state.pos))).collect()
    }

    /// Writes the metrics and CSV logs into `dir`.
    fn write_all(&self, dir: std::path::PathBuf) -> PyResult<()> {
        self.inner.write_all(&self.world, &dir).map_err(err)
    }
}

/// Flies a mission through `world` and returns its logs.
#[pyfunction]
#[pyo3(signature = (world, limits=[5.0, 5.0, 8.0], mode="faster", timeout=60.0, rays=1500, wall_clock=false))]
fn run_mission(
    py: Python<'_>,
    world: &PyWorld,
    limits: Vec3,
    mode: &str,
    timeout: f64,
    rays: usize,
    wall_clock: bool,
) -> PyResult<PyMission> {
    let limits = DynamicLimits::new(limits[0], limits[1], limits[2]).map_err(err)?;
    let mut cfg = PlannerConfig::new(world.inner.goal_point(), limits);
    cfg.mode = mode.parse::<PlannerMode>().map_err(err)?;
    if wall_clock {
        cfg.budget = BudgetMode::WallClock;
    }
    let sim_cfg = sim::SimConfig { timeout, rays, ..sim::SimConfig::default() };
    let w = world.inner.clone();
    let out = py.detach(|| sim::run_mission(&w, &cfg, &sim_cfg)).map_err(err)?;
    Ok(PyMission { world: w, inner: out })
}

#[pymodule]
fn rhplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVoxelMap>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyMiqpSolution>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyMission>()?;
    m.add_function(wrap_pyfunction!(jps, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(solve_miqp, m)?)?;
    m.add_function(wrap_pyfunction!(run_mission, m)?)?;
    Ok(())
}
