//! Grid search and piecewise linear path utilities.
//!
//! Searches run on an [`InflatedGrid`] snapshot with 26-connected moves of
//! cost 1, √2 and √3 cells. A move may not cut corners: every cell spanned by
//! its nonzero sub-moves must be traversable too. Jump point search is the
//! main planner; plain A* on the same graph serves as fallback and oracle.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use thiserror::Error;

use crate::voxel_map::{segment_samples, InflatedGrid, StateSet};
use crate::Point3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("goal unreachable")]
    NoPath,
    #[error("start point is not traversable")]
    InvalidStart,
    #[error("a path needs at least two vertices")]
    TooFewVertices,
}

/// Polyline with at least two vertices and no repeated consecutive vertex.
/// The single exception is a zero-length path `[p, p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinearPath {
    vertices: Vec<Point3>,
}

impl PiecewiseLinearPath {
    pub fn new(vertices: Vec<Point3>) -> Result<Self, PlanError> {
        if vertices.len() < 2 {
            return Err(PlanError::TooFewVertices);
        }
        let mut out: Vec<Point3> = Vec::with_capacity(vertices.len());
        for v in &vertices {
            if out.last().map_or(true, |l| l != v) {
                out.push(*v);
            }
        }
        if out.len() == 1 {
            out.push(out[0]);
        }
        Ok(Self { vertices: out })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn start(&self) -> Point3 {
        self.vertices[0]
    }

    pub fn end(&self) -> Point3 {
        self.vertices[self.vertices.len() - 1]
    }

    pub fn num_segments(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point3, Point3)> + '_ {
        self.vertices.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| (b - a).norm()).sum()
    }

    /// Appends `other`, merging the joint vertex when it repeats.
    pub fn concat(&self, other: &PiecewiseLinearPath) -> PiecewiseLinearPath {
        let mut v = self.vertices.clone();
        v.extend_from_slice(&other.vertices);
        PiecewiseLinearPath::new(v).expect("two or more vertices")
    }
}

/// Cells of a grid path and its length in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    pub cells: Vec<[i64; 3]>,
    pub cost: f64,
}

fn add(c: [i64; 3], d: [i64; 3]) -> [i64; 3] {
    [c[0] + d[0], c[1] + d[1], c[2] + d[2]]
}

fn move_len(d: [i64; 3]) -> f64 {
    match d.iter().filter(|&&x| x != 0).count() {
        1 => 1.0,
        2 => std::f64::consts::SQRT_2,
        _ => 3f64.sqrt(),
    }
}

/// The 26 unit moves in a fixed order.
fn unit_moves() -> [[i64; 3]; 26] {
    let mut out = [[0; 3]; 26];
    let mut k = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out[k] = [dx, dy, dz];
                    k += 1;
                }
            }
        }
    }
    out
}

fn move_index(d: [i64; 3]) -> usize {
    let i = ((d[2] + 1) * 9 + (d[1] + 1) * 3 + (d[0] + 1)) as usize;
    if i > 13 {
        i - 1
    } else {
        i
    }
}

/// Nonzero sub-moves of `d` (including `d` itself).
fn sub_moves(d: [i64; 3]) -> Vec<[i64; 3]> {
    let axes: Vec<usize> = (0..3).filter(|&a| d[a] != 0).collect();
    (1u32..(1 << axes.len()))
        .map(|mask| {
            let mut s = [0; 3];
            for (bit, &a) in axes.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    s[a] = d[a];
                }
            }
            s
        })
        .collect()
}

/// Octile distance in cells, an admissible and consistent heuristic.
fn octile(a: [i64; 3], b: [i64; 3]) -> f64 {
    let mut d = [(a[0] - b[0]).abs(), (a[1] - b[1]).abs(), (a[2] - b[2]).abs()];
    d.sort_unstable();
    let (lo, mid, hi) = (d[0] as f64, d[1] as f64, d[2] as f64);
    3f64.sqrt() * lo + std::f64::consts::SQRT_2 * (mid - lo) + (hi - mid)
}

#[derive(Clone, Copy, Debug)]
struct OpenEntry {
    f: f64,
    g: f64,
    seq: u64,
    cell: [i64; 3],
}

impl PartialEq for OpenEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OpenEntry {}
impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OpenEntry {
    // Max-heap: smaller f first, then larger g, then earlier insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
            .then(other.seq.cmp(&self.seq))
    }
}

struct NodeInfo {
    g: f64,
    parent: Option<[i64; 3]>,
    dir: Option<[i64; 3]>,
    closed: bool,
}

/// Shared move legality for both searches.
struct GridGraph<'a> {
    grid: &'a InflatedGrid,
    allowed: StateSet,
    moves: [[i64; 3]; 26],
}

impl<'a> GridGraph<'a> {
    fn new(grid: &'a InflatedGrid, allowed: StateSet) -> Self {
        Self { grid, allowed, moves: unit_moves() }
    }

    fn passable(&self, c: [i64; 3]) -> bool {
        self.grid.in_bounds(c) && self.allowed.contains(self.grid.class(c))
    }

    fn can_move(&self, c: [i64; 3], d: [i64; 3]) -> bool {
        sub_moves(d).into_iter().all(|s| self.passable(add(c, s)))
    }

    /// Bit `i` set iff the neighbour in direction `moves[i]` is passable.
    fn neighbour_mask(&self, c: [i64; 3]) -> u32 {
        let mut mask = 0;
        for (i, d) in self.moves.iter().enumerate() {
            if self.passable(add(c, *d)) {
                mask |= 1 << i;
            }
        }
        mask
    }
}

fn reconstruct(nodes: &HashMap<[i64; 3], NodeInfo>, goal: [i64; 3]) -> Vec<[i64; 3]> {
    let mut cells = vec![goal];
    let mut cur = goal;
    while let Some(p) = nodes[&cur].parent {
        cells.push(p);
        cur = p;
    }
    cells.reverse();
    cells
}

/// Plain A* between two cells.
pub fn astar_cells(grid: &InflatedGrid, start: [i64; 3], goal: [i64; 3], allowed: StateSet) -> Option<GridPath> {
    let graph = GridGraph::new(grid, allowed);
    if !graph.passable(start) || !graph.passable(goal) {
        return None;
    }
    let mut nodes: HashMap<[i64; 3], NodeInfo> = HashMap::new();
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    nodes.insert(start, NodeInfo { g: 0.0, parent: None, dir: None, closed: false });
    open.push(OpenEntry { f: octile(start, goal), g: 0.0, seq, cell: start });
    while let Some(e) = open.pop() {
        let info = nodes.get_mut(&e.cell).expect("pushed nodes are recorded");
        if info.closed || e.g > info.g {
            continue;
        }
        info.closed = true;
        if e.cell == goal {
            return Some(GridPath { cells: reconstruct(&nodes, goal), cost: e.g * grid.resolution() });
        }
        for d in graph.moves {
            let n = add(e.cell, d);
            if !graph.can_move(e.cell, d) {
                continue;
            }
            let ng = e.g + move_len(d);
            let entry = nodes.entry(n).or_insert(NodeInfo { g: f64::INFINITY, parent: None, dir: None, closed: false });
            if entry.closed || ng >= entry.g {
                continue;
            }
            entry.g = ng;
            entry.parent = Some(e.cell);
            seq += 1;
            open.push(OpenEntry { f: ng + octile(n, goal), g: ng, seq, cell: n });
        }
    }
    None
}

/// Local neighbour pruning for jump point search.
///
/// For a node reached by move `d`, a neighbour is pruned when some path from
/// the parent to it that avoids the node is no longer than going through the
/// node (strictly shorter when `d` is diagonal). The rule is evaluated by a
/// tiny Dijkstra on the 3x3x3 block and cached per occupancy pattern.
struct Pruner {
    moves: [[i64; 3]; 26],
    cache: RefCell<HashMap<(u32, usize), u32>>,
    natural: Vec<u32>,
}

impl Pruner {
    fn new() -> Self {
        let moves = unit_moves();
        let mut p = Self { moves, cache: RefCell::new(HashMap::new()), natural: Vec::new() };
        let full = (1u32 << 26) - 1;
        p.natural = (0..26).map(|i| p.compute(full, i)).collect();
        p
    }

    fn kept(&self, mask: u32, dir: usize) -> u32 {
        if let Some(&k) = self.cache.borrow().get(&(mask, dir)) {
            return k;
        }
        let k = self.compute(mask, dir);
        self.cache.borrow_mut().insert((mask, dir), k);
        k
    }

    fn has_forced(&self, mask: u32, dir: usize) -> bool {
        self.kept(mask, dir) & !self.natural[dir] != 0
    }

    fn compute(&self, mask: u32, dir: usize) -> u32 {
        // Local block indexed by offset in [-1, 1]^3; the center is passable.
        let local = |o: [i64; 3]| ((o[2] + 1) * 9 + (o[1] + 1) * 3 + (o[0] + 1)) as usize;
        let mut open_cell = [false; 27];
        open_cell[13] = true;
        for (i, d) in self.moves.iter().enumerate() {
            open_cell[local(*d)] = mask & (1 << i) != 0;
        }
        let inside = |o: [i64; 3]| o.iter().all(|&v| (-1..=1).contains(&v));
        let legal = |from: [i64; 3], d: [i64; 3]| {
            sub_moves(d).into_iter().all(|s| {
                let c = add(from, s);
                inside(c) && open_cell[local(c)]
            })
        };

        let d = self.moves[dir];
        let parent = [-d[0], -d[1], -d[2]];
        let mut dist = [f64::INFINITY; 27];
        let mut done = [false; 27];
        dist[local(parent)] = 0.0;
        loop {
            let mut best = None;
            for i in 0..27 {
                if !done[i] && dist[i].is_finite() && best.map_or(true, |b: usize| dist[i] < dist[b]) {
                    best = Some(i);
                }
            }
            let Some(u) = best else { break };
            done[u] = true;
            let uo = [(u % 3) as i64 - 1, ((u / 3) % 3) as i64 - 1, (u / 9) as i64 - 1];
            for m in &self.moves {
                let v = add(uo, *m);
                if !inside(v) || local(v) == 13 || !open_cell[local(v)] || !legal(uo, *m) {
                    continue;
                }
                let nd = dist[u] + move_len(*m);
                if nd < dist[local(v)] {
                    dist[local(v)] = nd;
                }
            }
        }

        let straight = d.iter().filter(|&&x| x != 0).count() == 1;
        let mut kept = 0u32;
        for (i, o) in self.moves.iter().enumerate() {
            if !legal([0, 0, 0], *o) {
                continue;
            }
            let via = move_len(d) + move_len(*o);
            let alt = dist[local(*o)];
            let prune = if straight { alt <= via + 1e-9 } else { alt < via - 1e-9 };
            if !prune {
                kept |= 1 << i;
            }
        }
        kept
    }
}

struct JumpSearch<'a> {
    graph: GridGraph<'a>,
    pruner: Pruner,
    goal: [i64; 3],
}

impl JumpSearch<'_> {
    fn jump(&self, from: [i64; 3], d: [i64; 3]) -> Option<([i64; 3], u32)> {
        let dir = move_index(d);
        let diagonal = d.iter().filter(|&&x| x != 0).count() > 1;
        let subs: Vec<[i64; 3]> = if diagonal {
            sub_moves(d).into_iter().filter(|s| *s != d).collect()
        } else {
            Vec::new()
        };
        let mut cur = from;
        let mut steps = 0u32;
        loop {
            if !self.graph.can_move(cur, d) {
                return None;
            }
            cur = add(cur, d);
            steps += 1;
            if cur == self.goal {
                return Some((cur, steps));
            }
            let mask = self.graph.neighbour_mask(cur);
            if self.pruner.has_forced(mask, dir) {
                return Some((cur, steps));
            }
            if subs.iter().any(|s| self.jump(cur, *s).is_some()) {
                return Some((cur, steps));
            }
        }
    }
}

/// Jump point search between two cells. Returned cells are the jump points;
/// consecutive ones are joined by straight runs of identical moves.
pub fn jps_cells(grid: &InflatedGrid, start: [i64; 3], goal: [i64; 3], allowed: StateSet) -> Option<GridPath> {
    let search = JumpSearch { graph: GridGraph::new(grid, allowed), pruner: Pruner::new(), goal };
    if !search.graph.passable(start) || !search.graph.passable(goal) {
        return None;
    }
    let moves = unit_moves();
    let mut nodes: HashMap<[i64; 3], NodeInfo> = HashMap::new();
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    nodes.insert(start, NodeInfo { g: 0.0, parent: None, dir: None, closed: false });
    open.push(OpenEntry { f: octile(start, goal), g: 0.0, seq, cell: start });
    while let Some(e) = open.pop() {
        let info = nodes.get_mut(&e.cell).expect("pushed nodes are recorded");
        if info.closed || e.g > info.g {
            continue;
        }
        info.closed = true;
        let dir_in = info.dir;
        if e.cell == goal {
            return Some(GridPath { cells: reconstruct(&nodes, goal), cost: e.g * grid.resolution() });
        }
        let candidates: u32 = match dir_in {
            None => (1 << 26) - 1,
            Some(d) => search.pruner.kept(search.graph.neighbour_mask(e.cell), move_index(d)),
        };
        for (i, d) in moves.iter().enumerate() {
            if candidates & (1 << i) == 0 {
                continue;
            }
            let Some((n, steps)) = search.jump(e.cell, *d) else { continue };
            let ng = e.g + steps as f64 * move_len(*d);
            let entry = nodes.entry(n).or_insert(NodeInfo { g: f64::INFINITY, parent: None, dir: None, closed: false });
            if entry.closed || ng >= entry.g {
                continue;
            }
            entry.g = ng;
            entry.parent = Some(e.cell);
            entry.dir = Some(*d);
            seq += 1;
            open.push(OpenEntry { f: ng + octile(n, goal), g: ng, seq, cell: n });
        }
    }
    None
}

/// Resolves world endpoints to search cells. The goal falls back to the
/// nearest traversable cell center within two cells; the returned flag says
/// whether the goal point itself can terminate the path.
fn resolve_endpoints(
    grid: &InflatedGrid,
    start: &Point3,
    goal: &Point3,
    allowed: StateSet,
) -> Result<([i64; 3], [i64; 3], bool), PlanError> {
    let graph = GridGraph::new(grid, allowed);
    let start_cell = grid
        .cells_containing(start)
        .into_iter()
        .find(|c| graph.passable(*c))
        .ok_or(PlanError::InvalidStart)?;
    if let Some(c) = grid.cells_containing(goal).into_iter().find(|c| graph.passable(*c)) {
        return Ok((start_cell, c, true));
    }
    let base = grid.cell_of(goal);
    let reach = 2.0 * grid.resolution() + 1e-12;
    let mut best: Option<([i64; 3], f64)> = None;
    for dz in -2..=2 {
        for dy in -2..=2 {
            for dx in -2..=2 {
                let c = add(base, [dx, dy, dz]);
                if !graph.passable(c) {
                    continue;
                }
                let dist = (grid.cell_center(c) - goal).norm();
                if dist <= reach && best.map_or(true, |(_, b)| dist < b) {
                    best = Some((c, dist));
                }
            }
        }
    }
    best.map(|(c, _)| (start_cell, c, false)).ok_or(PlanError::NoPath)
}

fn path_from_cells(grid: &InflatedGrid, start: &Point3, goal: &Point3, cells: &[[i64; 3]], goal_ok: bool) -> PiecewiseLinearPath {
    let mut v = vec![*start];
    if cells.len() > 1 {
        v.extend(cells.iter().map(|c| grid.cell_center(*c)));
    } else if !goal_ok {
        v.push(grid.cell_center(cells[0]));
    }
    if goal_ok {
        v.push(*goal);
    }
    PiecewiseLinearPath::new(v).expect("at least two vertices")
}

fn grid_search(
    grid: &InflatedGrid,
    start: &Point3,
    goal: &Point3,
    allowed: StateSet,
    search: fn(&InflatedGrid, [i64; 3], [i64; 3], StateSet) -> Option<GridPath>,
) -> Result<PiecewiseLinearPath, PlanError> {
    let (s, g, goal_ok) = resolve_endpoints(grid, start, goal, allowed)?;
    let found = search(grid, s, g, allowed).ok_or(PlanError::NoPath)?;
    Ok(path_from_cells(grid, start, goal, &found.cells, goal_ok))
}

/// Shortest 26-connected path from `start` to `goal` through cells whose
/// class is in `traversable`, as `[start, jump point centers.., goal]`.
pub fn jps(grid: &InflatedGrid, start: &Point3, goal: &Point3, traversable: StateSet) -> Result<PiecewiseLinearPath, PlanError> {
    grid_search(grid, start, goal, traversable, jps_cells)
}

/// Same contract as [`jps`], using plain A*.
pub fn astar(grid: &InflatedGrid, start: &Point3, goal: &Point3, traversable: StateSet) -> Result<PiecewiseLinearPath, PlanError> {
    grid_search(grid, start, goal, traversable, astar_cells)
}

/// Samples along the whole path at spacing at most `step`.
fn path_samples(path: &PiecewiseLinearPath, step: f64) -> Vec<Point3> {
    let mut out = vec![path.start()];
    for (a, b) in path.segments() {
        out.extend(segment_samples(&a, &b, step).skip(1));
    }
    out
}

/// Reroutes `old_path` around cells that stopped being traversable.
///
/// The blocked stretch spans from the first to the last non-traversable
/// sample; the path is rebuilt as searches from the start to the last good
/// sample before it, across it, and on to the old terminal vertex.
pub fn repair_path(
    grid: &InflatedGrid,
    old_path: &PiecewiseLinearPath,
    traversable: StateSet,
) -> Result<PiecewiseLinearPath, PlanError> {
    let samples = path_samples(old_path, grid.resolution() / 2.0);
    let ok: Vec<bool> = samples.iter().map(|p| traversable.contains(grid.point_class(p))).collect();
    let Some(first_bad) = ok.iter().position(|&o| !o) else {
        return Ok(old_path.clone());
    };
    let last_bad = ok.iter().rposition(|&o| !o).expect("a bad sample exists");
    if first_bad == 0 {
        return Err(PlanError::InvalidStart);
    }
    let before = samples[first_bad - 1];
    let start = old_path.start();
    let goal = old_path.end();
    let mut path = jps(grid, &start, &before, traversable)?;
    if last_bad + 1 < samples.len() {
        let after = samples[last_bad + 1];
        path = path.concat(&jps(grid, &before, &after, traversable)?);
        path = path.concat(&jps(grid, &after, &goal, traversable)?);
    } else {
        path = path.concat(&jps(grid, &before, &goal, traversable)?);
    }
    Ok(path)
}

/// Where a path first reaches a sphere, plus the arc length walked so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereExit {
    pub point: Point3,
    /// Index of the segment holding the point (the last one when the path
    /// never leaves the sphere).
    pub segment: usize,
    pub arc_length: f64,
    pub inside: bool,
}

pub fn sphere_exit_info(path: &PiecewiseLinearPath, center: &Point3, radius: f64) -> SphereExit {
    let mut arc = 0.0;
    for (i, (p, q)) in path.segments().enumerate() {
        let e = q - p;
        let w = p - center;
        let a = e.dot(&e);
        let len = a.sqrt();
        if a > 0.0 {
            let b = 2.0 * w.dot(&e);
            let c = w.dot(&w) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let roots = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)];
                if let Some(s) = roots.into_iter().find(|s| (0.0..=1.0).contains(s)) {
                    return SphereExit { point: p + e * s, segment: i, arc_length: arc + s * len, inside: false };
                }
            }
        }
        arc += len;
    }
    SphereExit { point: path.end(), segment: path.num_segments() - 1, arc_length: arc, inside: true }
}

/// First point along the path at distance `radius` from `center`, or the
/// terminal vertex when the path stays inside the sphere.
pub fn sphere_exit(path: &PiecewiseLinearPath, center: &Point3, radius: f64) -> Point3 {
    sphere_exit_info(path, center, radius).point
}

/// The path up to its first sphere crossing.
pub fn clip_to_sphere(path: &PiecewiseLinearPath, center: &Point3, radius: f64) -> PiecewiseLinearPath {
    let exit = sphere_exit_info(path, center, radius);
    if exit.inside {
        return path.clone();
    }
    let mut v = path.vertices()[..=exit.segment].to_vec();
    v.push(exit.point);
    PiecewiseLinearPath::new(v).expect("at least two vertices")
}

/// Subdivides segments longer than `l_max` evenly and keeps at most
/// `p_max` segments.
pub fn split_and_truncate(path: &PiecewiseLinearPath, l_max: f64, p_max: usize) -> PiecewiseLinearPath {
    let mut v = vec![path.start()];
    'outer: for (a, b) in path.segments() {
        let len = (b - a).norm();
        let pieces = ((len / l_max - 1e-9).ceil() as usize).max(1);
        for k in 1..=pieces {
            if v.len() > p_max {
                break 'outer;
            }
            v.push(if k == pieces { b } else { a + (b - a) * (k as f64 / pieces as f64) });
        }
    }
    PiecewiseLinearPath::new(v).expect("at least two vertices")
}

/// Longest prefix of the path whose cells are all in `allowed`, or `None`
/// when even the start is excluded.
pub fn allowed_prefix(grid: &InflatedGrid, path: &PiecewiseLinearPath, allowed: StateSet) -> Option<PiecewiseLinearPath> {
    if !allowed.contains(grid.point_class(&path.start())) {
        return None;
    }
    let mut v = vec![path.start()];
    for (a, b) in path.segments() {
        if grid.segment_clear(&a, &b, allowed) {
            v.push(b);
            continue;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if grid.segment_clear(&a, &(a + (b - a) * mid), allowed) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        v.push(a + (b - a) * lo);
        break;
    }
    Some(PiecewiseLinearPath::new(v).expect("at least two vertices"))
}

/// Greedy line-of-sight shortening: from each kept vertex, jumps to the
/// farthest later vertex reachable by a straight segment inside `allowed`.
pub fn shortcut(grid: &InflatedGrid, path: &PiecewiseLinearPath, allowed: StateSet) -> PiecewiseLinearPath {
    let v = path.vertices();
    let mut out = vec![v[0]];
    let mut i = 0;
    while i + 1 < v.len() {
        let j = (i + 2..v.len())
            .rev()
            .find(|&j| grid.segment_clear(&v[i], &v[j], allowed))
            .unwrap_or(i + 1);
        out.push(v[j]);
        i = j;
    }
    PiecewiseLinearPath::new(out).expect("at least two vertices")
}

/// Length of the path from an arc-length position to its end.
pub fn remaining_length(path: &PiecewiseLinearPath, arc_length: f64) -> f64 {
    (path.length() - arc_length).max(0.0)
}
