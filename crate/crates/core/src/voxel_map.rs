//! Sliding occupancy grid centered on the vehicle.
//!
//! Cells are Free, Occupied or Unknown. Depth rays are fused with an exact
//! voxel traversal of the ray segment; obstacle and unknown space are
//! inflated at query time by the vehicle radius.

use std::fmt::Write as _;

use thiserror::Error;

use crate::Point3;

/// Distance within which a point counts as touching a cell, matching the
/// slack the trajectory optimizer allows on corridor constraints.
pub const BOUNDARY_TOL: f64 = 1e-6;

/// Occupancy of a single cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum VoxelState {
    Free,
    Occupied,
    Unknown,
}

impl VoxelState {
    /// Severity used when several classes compete: Occupied > Unknown > Free.
    pub fn severity(self) -> u8 {
        match self {
            VoxelState::Free => 0,
            VoxelState::Unknown => 1,
            VoxelState::Occupied => 2,
        }
    }

    /// Character used by the text slice dump.
    pub fn symbol(self) -> char {
        match self {
            VoxelState::Free => '.',
            VoxelState::Occupied => '#',
            VoxelState::Unknown => '?',
        }
    }

    fn bit(self) -> u8 {
        1 << self.severity()
    }
}

/// A subset of {Free, Occupied, Unknown}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StateSet(u8);

impl StateSet {
    pub const EMPTY: StateSet = StateSet(0);
    pub const FREE: StateSet = StateSet(1);
    pub const UNKNOWN: StateSet = StateSet(2);
    pub const OCCUPIED: StateSet = StateSet(4);
    pub const FREE_UNKNOWN: StateSet = StateSet(1 | 2);
    pub const OCCUPIED_UNKNOWN: StateSet = StateSet(2 | 4);
    pub const ALL: StateSet = StateSet(7);

    pub fn of(states: &[VoxelState]) -> Self {
        StateSet(states.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn contains(self, state: VoxelState) -> bool {
        self.0 & state.bit() != 0
    }

    pub fn union(self, other: StateSet) -> StateSet {
        StateSet(self.0 | other.0)
    }

    pub fn complement(self) -> StateSet {
        StateSet(!self.0 & 7)
    }
}

/// In-bounds integer cell coordinates.
pub type VoxelIndex = [usize; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("ray origin ({0}, {1}, {2}) lies outside the map")]
    OriginOutOfBounds(f64, f64, f64),
    #[error("invalid map configuration: {0}")]
    InvalidConfig(String),
}

/// Default edge length of the cubic sliding map in meters.
pub const DEFAULT_MAP_SIZE: f64 = 20.0;
pub const DEFAULT_RESOLUTION: f64 = 0.25;
pub const DEFAULT_INFLATION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    center: Point3,
    origin: Point3,
    dims: [usize; 3],
    resolution: f64,
    inflation_radius: f64,
    cells: Vec<VoxelState>,
    ball: Vec<[i64; 3]>,
}

impl VoxelMap {
    /// Creates an all-Unknown map. `center` is the middle of the grid; cell
    /// boundaries lie at `center - dims * resolution / 2 + k * resolution`.
    pub fn new(
        center: Point3,
        dims: [usize; 3],
        resolution: f64,
        inflation_radius: f64,
    ) -> Result<Self, MapError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(MapError::InvalidConfig(format!("dims must be positive, got {dims:?}")));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(MapError::InvalidConfig(format!("resolution must be positive, got {resolution}")));
        }
        if !(inflation_radius >= 0.0 && inflation_radius.is_finite()) {
            return Err(MapError::InvalidConfig(format!(
                "inflation radius must be non-negative, got {inflation_radius}"
            )));
        }
        let half = Point3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * (resolution / 2.0);
        Ok(Self {
            center,
            origin: center - half,
            dims,
            resolution,
            inflation_radius,
            cells: vec![VoxelState::Unknown; dims[0] * dims[1] * dims[2]],
            ball: inflation_offsets(inflation_radius, resolution),
        })
    }

    /// A 20 m cube with 0.25 m cells and 0.3 m inflation.
    pub fn with_defaults(center: Point3) -> Self {
        let n = (DEFAULT_MAP_SIZE / DEFAULT_RESOLUTION).round() as usize;
        Self::new(center, [n, n, n], DEFAULT_RESOLUTION, DEFAULT_INFLATION)
            .expect("default map configuration is valid")
    }

    pub fn center(&self) -> Point3 {
        self.center
    }

    /// Minimum corner of the grid.
    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn inflation_radius(&self) -> f64 {
        self.inflation_radius
    }

    /// Axis-aligned extent of the map as (min corner, max corner).
    pub fn bounds(&self) -> (Point3, Point3) {
        let size = Point3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64)
            * self.resolution;
        (self.origin, self.origin + size)
    }

    pub fn contains_point(&self, p: &Point3) -> bool {
        self.world_to_voxel(p).is_some()
    }

    fn linear(&self, idx: VoxelIndex) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    fn in_bounds(&self, c: [i64; 3]) -> Option<VoxelIndex> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            if c[a] < 0 || c[a] >= self.dims[a] as i64 {
                return None;
            }
            out[a] = c[a] as usize;
        }
        Some(out)
    }

    /// Cell coordinates of `p` without bounds checking.
    pub fn signed_cell(&self, p: &Point3) -> [i64; 3] {
        let rel = (p - self.origin) / self.resolution;
        [rel.x.floor() as i64, rel.y.floor() as i64, rel.z.floor() as i64]
    }

    /// Cell containing `p`, or `None` when `p` is outside the map.
    pub fn world_to_voxel(&self, p: &Point3) -> Option<VoxelIndex> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return None;
        }
        self.in_bounds(self.signed_cell(p))
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> Point3 {
        self.origin
            + Point3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5)
                * self.resolution
    }

    pub fn state(&self, idx: VoxelIndex) -> VoxelState {
        self.cells[self.linear(idx)]
    }

    fn state_signed(&self, c: [i64; 3]) -> Option<VoxelState> {
        self.in_bounds(c).map(|idx| self.state(idx))
    }

    pub fn set_state(&mut self, idx: VoxelIndex, state: VoxelState) {
        let i = self.linear(idx);
        self.cells[i] = state;
    }

    /// Iterates over every cell with its state.
    pub fn iter(&self) -> impl Iterator<Item = (VoxelIndex, VoxelState)> + '_ {
        let [nx, ny, _] = self.dims;
        self.cells.iter().enumerate().map(move |(i, &s)| {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            ([x, y, z], s)
        })
    }

    /// Raw (uninflated) state at `p`; outside the map is Unknown.
    pub fn classify(&self, p: &Point3) -> VoxelState {
        self.world_to_voxel(p).map_or(VoxelState::Unknown, |idx| self.state(idx))
    }

    /// Cells crossed by the segment `origin -> endpoint`, in order, clipped
    /// to the map. A cell is listed iff the segment passes through it (cells
    /// touched only at a shared corner or edge of a tie are skipped).
    pub fn ray_cells(&self, origin: &Point3, endpoint: &Point3) -> Result<Vec<VoxelIndex>, MapError> {
        let start = self
            .world_to_voxel(origin)
            .ok_or(MapError::OriginOutOfBounds(origin.x, origin.y, origin.z))?;
        let rel = (origin - self.origin) / self.resolution;
        let dir = (endpoint - origin) / self.resolution;
        let mut cell = [start[0] as i64, start[1] as i64, start[2] as i64];
        let mut out = vec![start];

        let next_crossing = |cell: &[i64; 3], a: usize| -> f64 {
            if dir[a] > 0.0 {
                (cell[a] as f64 + 1.0 - rel[a]) / dir[a]
            } else if dir[a] < 0.0 {
                (cell[a] as f64 - rel[a]) / dir[a]
            } else {
                f64::INFINITY
            }
        };

        loop {
            let t = [
                next_crossing(&cell, 0),
                next_crossing(&cell, 1),
                next_crossing(&cell, 2),
            ];
            let t_next = t[0].min(t[1]).min(t[2]);
            if !(t_next <= 1.0) {
                break;
            }
            for a in 0..3 {
                if t[a] == t_next {
                    cell[a] += if dir[a] > 0.0 { 1 } else { -1 };
                }
            }
            match self.in_bounds(cell) {
                Some(idx) => out.push(idx),
                None => break,
            }
        }
        Ok(out)
    }

    /// Fuses one depth ray. Cells before the endpoint become Free, the
    /// endpoint cell becomes Occupied on a hit. Occupied cells are never
    /// cleared by a passing ray.
    pub fn raycast_update(&mut self, origin: &Point3, endpoint: &Point3, hit: bool) -> Result<(), MapError> {
        let cells = self.ray_cells(origin, endpoint)?;
        let endpoint_inside = self.world_to_voxel(endpoint).is_some();
        let last = cells.len() - 1;
        for (i, idx) in cells.into_iter().enumerate() {
            let k = self.linear(idx);
            if i == last && endpoint_inside && hit {
                self.cells[k] = VoxelState::Occupied;
            } else if self.cells[k] != VoxelState::Occupied {
                self.cells[k] = VoxelState::Free;
            }
        }
        Ok(())
    }

    /// Slides the grid by a whole number of cells so its center is as close
    /// as possible to `new_center`. Cells leaving the grid are dropped and
    /// newly exposed ones are Unknown.
    pub fn recenter(&mut self, new_center: &Point3) {
        let delta = (new_center - self.center) / self.resolution;
        let shift = [delta.x.round() as i64, delta.y.round() as i64, delta.z.round() as i64];
        if shift == [0, 0, 0] {
            return;
        }
        let [nx, ny, nz] = self.dims;
        let mut cells = vec![VoxelState::Unknown; self.cells.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let old = [x as i64 + shift[0], y as i64 + shift[1], z as i64 + shift[2]];
                    if let Some(o) = self.in_bounds(old) {
                        cells[(z * ny + y) * nx + x] = self.cells[self.linear(o)];
                    }
                }
            }
        }
        self.cells = cells;
        let offset = Point3::new(shift[0] as f64, shift[1] as f64, shift[2] as f64) * self.resolution;
        self.center += offset;
        self.origin += offset;
    }

    fn box_distance2(&self, p: &Point3, cell: [i64; 3]) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let lo = self.origin[a] + cell[a] as f64 * self.resolution;
            let hi = lo + self.resolution;
            let d = if p[a] < lo {
                lo - p[a]
            } else if p[a] > hi {
                p[a] - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    /// Class of `p` after inflating Occupied and Unknown cells by the
    /// inflation radius. A cell counts when its box is strictly closer than
    /// the radius or contains `p`; cells outside the map count as Unknown.
    pub fn classify_inflated(&self, p: &Point3) -> VoxelState {
        let base = self.signed_cell(p);
        let r2 = self.inflation_radius * self.inflation_radius;
        let mut unknown = false;
        for off in &self.ball {
            let c = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
            let d2 = self.box_distance2(p, c);
            if !(d2 < r2 || d2 == 0.0) {
                continue;
            }
            match self.state_signed(c) {
                Some(VoxelState::Occupied) => return VoxelState::Occupied,
                Some(VoxelState::Unknown) | None => unknown = true,
                Some(VoxelState::Free) => {}
            }
        }
        if unknown || !self.contains_point(p) {
            VoxelState::Unknown
        } else {
            VoxelState::Free
        }
    }

    /// Whether any sample of `[p0, p1]` (spacing at most half a cell)
    /// classifies, inflated, into `states`.
    pub fn segment_classify(&self, p0: &Point3, p1: &Point3, states: StateSet) -> bool {
        segment_samples(p0, p1, self.resolution / 2.0)
            .any(|p| states.contains(self.classify_inflated(&p)))
    }

    /// Per-snapshot cell classification used by grid search and corridor
    /// construction; see [`InflatedGrid`].
    pub fn inflated_grid(&self) -> InflatedGrid {
        InflatedGrid::build(self)
    }

    /// Text dump of every z-slice: a `z=<k>` header followed by one line
    /// per y row (increasing y), one character per cell (increasing x).
    pub fn dump_slices(&self) -> String {
        let [nx, ny, nz] = self.dims;
        let mut out = String::with_capacity(nz * (ny * (nx + 1) + 8));
        for z in 0..nz {
            let _ = writeln!(out, "z={z}");
            for y in 0..ny {
                for x in 0..nx {
                    out.push(self.state([x, y, z]).symbol());
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Evenly spaced points on `[p0, p1]`, endpoints included, with spacing at
/// most `max_step`.
pub fn segment_samples(p0: &Point3, p1: &Point3, max_step: f64) -> impl Iterator<Item = Point3> {
    let (p0, p1) = (*p0, *p1);
    let len = (p1 - p0).norm();
    let n = ((len / max_step).ceil() as usize).max(1);
    (0..=n).map(move |i| p0 + (p1 - p0) * (i as f64 / n as f64))
}

/// Cell offsets whose box can lie within `radius` of a point in the
/// central cell (all 26 neighbours are always included).
fn inflation_offsets(radius: f64, resolution: f64) -> Vec<[i64; 3]> {
    let k = ((radius / resolution).ceil() as i64).max(1);
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dz in -k..=k {
        for dy in -k..=k {
            for dx in -k..=k {
                if offset_within(dx, dy, dz, resolution, r2) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn offset_within(dx: i64, dy: i64, dz: i64, resolution: f64, r2: f64) -> bool {
    let gap = |d: i64| (d.abs() - 1).max(0) as f64 * resolution;
    let near = dx.abs() <= 1 && dy.abs() <= 1 && dz.abs() <= 1;
    near || gap(dx).powi(2) + gap(dy).powi(2) + gap(dz).powi(2) < r2
}

/// Conservative per-cell classes for one map snapshot.
///
/// A cell's class is the most severe state among all cells whose box lies
/// strictly closer than the inflation radius to its own box (neighbours
/// sharing a face, edge or corner always count; outside the map counts as
/// Unknown). Consequently every point of a cell's closed box classifies,
/// through [`VoxelMap::classify_inflated`], no worse than the cell.
#[derive(Clone, Debug)]
pub struct InflatedGrid {
    origin: Point3,
    dims: [usize; 3],
    resolution: f64,
    classes: Vec<VoxelState>,
}

impl InflatedGrid {
    pub fn build(map: &VoxelMap) -> Self {
        let [nx, ny, nz] = map.dims;
        let r2 = map.inflation_radius * map.inflation_radius;
        let k = ((map.inflation_radius / map.resolution).ceil() as i64).max(1);

        // (dx, dy, max |dz|) columns of the inflation neighbourhood.
        let mut columns = Vec::new();
        for dy in -k..=k {
            for dx in -k..=k {
                let kz = (0..=k).rev().find(|&dz| offset_within(dx, dy, dz, map.resolution, r2));
                if let Some(kz) = kz {
                    columns.push((dx, dy, kz));
                }
            }
        }

        // Prefix counts along z for Occupied and Unknown cells.
        let stride = nz + 1;
        let mut occ = vec![0u32; nx * ny * stride];
        let mut unk = vec![0u32; nx * ny * stride];
        for y in 0..ny {
            for x in 0..nx {
                let base = (y * nx + x) * stride;
                for z in 0..nz {
                    let s = map.cells[(z * ny + y) * nx + x];
                    occ[base + z + 1] = occ[base + z] + (s == VoxelState::Occupied) as u32;
                    unk[base + z + 1] = unk[base + z] + (s == VoxelState::Unknown) as u32;
                }
            }
        }

        let mut classes = vec![VoxelState::Unknown; map.cells.len()];
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let mut unknown = false;
                    let mut occupied = false;
                    for &(dx, dy, kz) in &columns {
                        let (cx, cy) = (x + dx, y + dy);
                        if cx < 0 || cy < 0 || cx >= nx as i64 || cy >= ny as i64 {
                            unknown = true;
                            continue;
                        }
                        let (mut z0, mut z1) = (z - kz, z + kz);
                        if z0 < 0 {
                            z0 = 0;
                            unknown = true;
                        }
                        if z1 >= nz as i64 {
                            z1 = nz as i64 - 1;
                            unknown = true;
                        }
                        let base = (cy as usize * nx + cx as usize) * stride;
                        let (a, b) = (base + z0 as usize, base + z1 as usize + 1);
                        if occ[b] > occ[a] {
                            occupied = true;
                            break;
                        }
                        if unk[b] > unk[a] {
                            unknown = true;
                        }
                    }
                    let i = ((z as usize) * ny + y as usize) * nx + x as usize;
                    classes[i] = if occupied {
                        VoxelState::Occupied
                    } else if unknown {
                        VoxelState::Unknown
                    } else {
                        VoxelState::Free
                    };
                }
            }
        }

        Self {
            origin: map.origin,
            dims: map.dims,
            resolution: map.resolution,
            classes,
        }
    }

    /// Grid with explicitly given classes, laid out x-fastest then y then z.
    pub fn from_classes(
        origin: Point3,
        dims: [usize; 3],
        resolution: f64,
        classes: Vec<VoxelState>,
    ) -> Result<Self, MapError> {
        if classes.len() != dims[0] * dims[1] * dims[2] {
            return Err(MapError::InvalidConfig("class count does not match dims".into()));
        }
        if !(resolution > 0.0) {
            return Err(MapError::InvalidConfig("resolution must be positive".into()));
        }
        Ok(Self { origin, dims, resolution, classes })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn bounds(&self) -> (Point3, Point3) {
        let size = Point3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64)
            * self.resolution;
        (self.origin, self.origin + size)
    }

    pub fn in_bounds(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && c[a] < self.dims[a] as i64)
    }

    /// Class of a cell; outside the grid is Unknown.
    pub fn class(&self, c: [i64; 3]) -> VoxelState {
        if !self.in_bounds(c) {
            return VoxelState::Unknown;
        }
        let [nx, ny, _] = self.dims;
        self.classes[(c[2] as usize * ny + c[1] as usize) * nx + c[0] as usize]
    }

    pub fn cell_of(&self, p: &Point3) -> [i64; 3] {
        let rel = (p - self.origin) / self.resolution;
        [rel.x.floor() as i64, rel.y.floor() as i64, rel.z.floor() as i64]
    }

    pub fn cell_center(&self, c: [i64; 3]) -> Point3 {
        self.origin
            + Point3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * self.resolution
    }

    /// Cell min/max corners.
    pub fn cell_box(&self, c: [i64; 3]) -> (Point3, Point3) {
        let lo = self.origin + Point3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.resolution;
        (lo, lo + Point3::repeat(self.resolution))
    }

    /// All cells whose closed box, grown by [`BOUNDARY_TOL`], contains `p`
    /// (one cell in general, up to eight near shared corners).
    pub fn cells_containing(&self, p: &Point3) -> Vec<[i64; 3]> {
        let rel = (p - self.origin) / self.resolution;
        let tol = BOUNDARY_TOL / self.resolution;
        let mut options: [[i64; 2]; 3] = [[0; 2]; 3];
        let mut counts = [1usize; 3];
        for a in 0..3 {
            let f = rel[a].floor();
            options[a][0] = f as i64;
            if rel[a] - f <= tol {
                options[a][1] = f as i64 - 1;
                counts[a] = 2;
            } else if f + 1.0 - rel[a] <= tol {
                options[a][1] = f as i64 + 1;
                counts[a] = 2;
            }
        }
        let mut out = Vec::with_capacity(8);
        for i in 0..counts[0] {
            for j in 0..counts[1] {
                for k in 0..counts[2] {
                    out.push([options[0][i], options[1][j], options[2][k]]);
                }
            }
        }
        out
    }

    /// Least severe class among [`Self::cells_containing`].
    pub fn point_class(&self, p: &Point3) -> VoxelState {
        self.cells_containing(p)
            .into_iter()
            .map(|c| self.class(c))
            .min_by_key(|s| s.severity())
            .unwrap_or(VoxelState::Unknown)
    }

    /// Whether every sample of the segment lies in a cell of class in `allowed`.
    pub fn segment_within(&self, p0: &Point3, p1: &Point3, allowed: StateSet) -> bool {
        segment_samples(p0, p1, self.resolution / 4.0).all(|p| allowed.contains(self.point_class(&p)))
    }

    /// Exact version of [`Self::segment_within`]: walks every cell the
    /// segment passes through. Cells touched only where the segment crosses
    /// an edge or corner exactly are skipped, as are cells entered only at
    /// `p1` itself. A start on or near a cell face may begin in any cell of
    /// [`Self::cells_containing`] the segment heads into.
    pub fn segment_clear(&self, p0: &Point3, p1: &Point3, allowed: StateSet) -> bool {
        if !allowed.contains(self.point_class(p0)) {
            return false;
        }
        let rel = (p0 - self.origin) / self.resolution;
        let dir = (p1 - p0) / self.resolution;
        let base = self.cell_of(p0);
        self.cells_containing(p0)
            .into_iter()
            .filter(|c| (0..3).all(|a| (c[a] >= base[a] || dir[a] <= 0.0) && (c[a] <= base[a] || dir[a] >= 0.0)))
            .any(|c| self.walk_clear(&rel, &dir, c, allowed))
    }

    fn walk_clear(&self, rel: &Point3, dir: &Point3, mut cell: [i64; 3], allowed: StateSet) -> bool {
        let next_crossing = |cell: &[i64; 3], a: usize| -> f64 {
            if dir[a] > 0.0 {
                (cell[a] as f64 + 1.0 - rel[a]) / dir[a]
            } else if dir[a] < 0.0 {
                (cell[a] as f64 - rel[a]) / dir[a]
            } else {
                f64::INFINITY
            }
        };
        if !allowed.contains(self.class(cell)) {
            return false;
        }
        loop {
            let t = [next_crossing(&cell, 0), next_crossing(&cell, 1), next_crossing(&cell, 2)];
            let t_next = t[0].min(t[1]).min(t[2]);
            if !(t_next < 1.0) {
                return true;
            }
            for a in 0..3 {
                if t[a] == t_next {
                    cell[a] += if dir[a] > 0.0 { 1 } else { -1 };
                }
            }
            if !allowed.contains(self.class(cell)) {
                return false;
            }
        }
    }
}
