//! Convex corridors around piecewise linear paths.
//!
//! Each path segment gets one polyhedron: the segment-aligned bounding box
//! intersected with one separating halfspace per excluded cell that meets
//! the box. A cell's halfspace depends only on that cell and the segment,
//! so adding obstacles can only add rows. Rows that end up redundant are
//! pruned by clipping the explicit polytope.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3};
use thiserror::Error;

use crate::global_planner::PiecewiseLinearPath;
use crate::opt::qp::solve_qp;
use crate::voxel_map::{InflatedGrid, StateSet};
use crate::Point3;

/// Default half-widths of the segment bounding box: along the segment
/// (added to half its length), sideways, and vertical.
pub const DEFAULT_BBOX_HALFWIDTHS: [f64; 3] = [2.0, 2.0, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorridorError {
    #[error("segment {segment} passes through excluded space")]
    DecompositionFailed { segment: usize },
    #[error("malformed corridor text: {0}")]
    Parse(String),
}

/// `{x : normals[i]·x ≤ offsets[i] ∀i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyhedron {
    normals: Vec<Point3>,
    offsets: Vec<f64>,
}

impl Polyhedron {
    pub fn new(normals: Vec<Point3>, offsets: Vec<f64>) -> Self {
        assert_eq!(normals.len(), offsets.len(), "one offset per normal");
        Self { normals, offsets }
    }

    /// Axis-aligned box `[lo, hi]`.
    pub fn axis_box(lo: Point3, hi: Point3) -> Self {
        let mut normals = Vec::new();
        let mut offsets = Vec::new();
        for a in 0..3 {
            let mut e = Point3::zeros();
            e[a] = 1.0;
            normals.push(e);
            offsets.push(hi[a]);
            normals.push(-e);
            offsets.push(-lo[a]);
        }
        Self { normals, offsets }
    }

    pub fn normals(&self) -> &[Point3] {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn num_rows(&self) -> usize {
        self.normals.len()
    }

    /// Largest `normal·p − offset` over all rows.
    pub fn max_violation(&self, p: &Point3) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, c)| n.dot(p) - c)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, p: &Point3, tol: f64) -> bool {
        self.normals.iter().zip(&self.offsets).all(|(n, c)| n.dot(p) <= c + tol)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corridor {
    polyhedra: Vec<Polyhedron>,
}

impl Corridor {
    pub fn new(polyhedra: Vec<Polyhedron>) -> Self {
        Self { polyhedra }
    }

    pub fn polyhedra(&self) -> &[Polyhedron] {
        &self.polyhedra
    }

    pub fn len(&self) -> usize {
        self.polyhedra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polyhedra.is_empty()
    }

    /// One `polyhedron <i>` header per polyhedron followed by `nx ny nz c`
    /// rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.polyhedra.iter().enumerate() {
            let _ = writeln!(s, "polyhedron {i}");
            for (n, c) in p.normals.iter().zip(&p.offsets) {
                let _ = writeln!(s, "{} {} {} {}", n.x, n.y, n.z, c);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorridorError> {
        let mut polyhedra: Vec<Polyhedron> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.starts_with("polyhedron") {
                polyhedra.push(Polyhedron::new(Vec::new(), Vec::new()));
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| CorridorError::Parse(format!("{line}: {e}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != 4 {
                return Err(CorridorError::Parse(format!("expected 4 numbers: {line}")));
            }
            let poly = polyhedra
                .last_mut()
                .ok_or_else(|| CorridorError::Parse("row before any polyhedron header".into()))?;
            poly.normals.push(Point3::new(vals[0], vals[1], vals[2]));
            poly.offsets.push(vals[3]);
        }
        Ok(Self { polyhedra })
    }
}

/// Segment-aligned frame: `u` along the segment, `v` horizontal, `w = u×v`.
fn segment_frame(p0: &Point3, p1: &Point3) -> Matrix3<f64> {
    let d = p1 - p0;
    let u = if d.norm() > 1e-9 { d.normalize() } else { Point3::x() };
    let mut v = Point3::z().cross(&u);
    if v.norm() < 1e-9 {
        v = Point3::x().cross(&u);
    }
    let v = v.normalize();
    let w = u.cross(&v);
    Matrix3::from_columns(&[u, v, w])
}

/// Minimum of `n·x` over an axis-aligned box.
fn box_support_min(n: &Point3, lo: &Point3, hi: &Point3) -> f64 {
    (0..3).map(|a| if n[a] >= 0.0 { n[a] * lo[a] } else { n[a] * hi[a] }).sum()
}

/// Closest pair between a box and the segment under metric `q`, as
/// `(box point, segment point)`.
fn metric_closest_pair(q: &Matrix3<f64>, p0: &Point3, p1: &Point3, lo: &Point3, hi: &Point3) -> (Point3, Point3) {
    // Variables (x, t): minimize (x − p0 − t e)ᵀ Q (x − p0 − t e). The tiny
    // ridge makes the Hessian definite without moving the minimizer much.
    let e = p1 - p0;
    let qe = q * e;
    let mut h = DMatrix::zeros(4, 4);
    for i in 0..3 {
        for j in 0..3 {
            h[(i, j)] = 2.0 * q[(i, j)];
        }
        h[(i, 3)] = -2.0 * qe[i];
        h[(3, i)] = -2.0 * qe[i];
    }
    h[(3, 3)] = 2.0 * e.dot(&qe);
    let scale = h.diagonal().amax().max(1e-12);
    for i in 0..4 {
        h[(i, i)] += 1e-10 * scale;
    }
    let qp0 = q * p0;
    let g = DVector::from_vec(vec![-2.0 * qp0[0], -2.0 * qp0[1], -2.0 * qp0[2], 2.0 * qe.dot(p0)]);
    let mut ca = DMatrix::zeros(8, 4);
    let mut cb = DVector::zeros(8);
    for a in 0..3 {
        ca[(2 * a, a)] = 1.0;
        cb[2 * a] = hi[a];
        ca[(2 * a + 1, a)] = -1.0;
        cb[2 * a + 1] = -lo[a];
    }
    ca[(6, 3)] = 1.0;
    cb[6] = 1.0;
    ca[(7, 3)] = -1.0;
    cb[7] = 0.0;
    let empty = DMatrix::zeros(0, 4);
    let empty_b = DVector::zeros(0);
    match solve_qp(&h, &g, &empty, &empty_b, &ca, &cb) {
        Ok(s) => {
            let x = Point3::new(s.x[0].clamp(lo.x, hi.x), s.x[1].clamp(lo.y, hi.y), s.x[2].clamp(lo.z, hi.z));
            let t = s.x[3].clamp(0.0, 1.0);
            (x, p0 + e * t)
        }
        Err(_) => {
            let c = (lo + hi) / 2.0;
            (c, p0 + e * 0.5)
        }
    }
}

/// Halfspace `(n, c)` with the whole box on the far side and the segment
/// on the near side, if one was found.
fn separating_plane(q: &Matrix3<f64>, p0: &Point3, p1: &Point3, lo: &Point3, hi: &Point3, res: f64) -> Option<(Point3, f64)> {
    let e = p1 - p0;
    let eqe = e.dot(&(q * e));
    let accept = |n: Point3, c: f64| -> Option<(Point3, f64)> {
        let len = n.norm();
        if !(len > 0.0) {
            return None;
        }
        let (n, c) = (n / len, c / len);
        (n.dot(p0) <= c && n.dot(p1) <= c).then_some((n, c))
    };

    // Fast path: metric direction from the nearest segment point to the
    // box center, pushed back to the box support.
    let center = (lo + hi) / 2.0;
    let t = if eqe > 0.0 { ((center - p0).dot(&(q * e)) / eqe).clamp(0.0, 1.0) } else { 0.0 };
    let n = q * (center - (p0 + e * t));
    if let Some(pl) = accept(n, box_support_min(&n, lo, hi)) {
        return Some(pl);
    }

    // Exact metric-closest pair; a box touching the segment is shrunk
    // slightly so that only its interior is cut away.
    let mut slack = Vec::new();
    for shrink in [0.0, 1e-6 * res] {
        let (blo, bhi) = (lo + Point3::repeat(shrink), hi - Point3::repeat(shrink));
        let (x, s) = metric_closest_pair(q, p0, p1, &blo, &bhi);
        let n = q * (x - s);
        if n.norm() <= 1e-12 {
            continue;
        }
        let c = box_support_min(&n, &blo, &bhi).min(n.dot(&x));
        if let Some(pl) = accept(n, c) {
            return Some(pl);
        }
        slack.push((n, c));
    }

    // A face plane of the box separates exactly when the segment only
    // touches it; the widest such plane is kept.
    let mut best: Option<((Point3, f64), f64)> = None;
    for a in 0..3 {
        for (sign, off) in [(1.0, lo[a]), (-1.0, -hi[a])] {
            let mut n = Point3::zeros();
            n[a] = sign;
            if let Some(pl) = accept(n, off) {
                let gap = off - n.dot(p0).min(n.dot(p1));
                if best.map_or(true, |(_, g)| gap > g) {
                    best = Some((pl, gap));
                }
            }
        }
    }
    if let Some((pl, _)) = best {
        return Some(pl);
    }

    // Numerical slack: keep the segment, cut as much of the box as possible.
    slack.into_iter().find_map(|(n, c)| accept(n, n.dot(p0).max(n.dot(p1)).max(c)))
}

/// Convex polytope kept as planar faces, used to drop redundant rows.
struct Polytope {
    faces: Vec<(usize, Vec<Point3>)>,
}

impl Polytope {
    /// Oriented box; face ids 0..6 follow `rows`.
    fn oriented_box(mid: &Point3, frame: &Matrix3<f64>, he: &Point3) -> Self {
        let corner = |s: [f64; 3]| mid + frame * Point3::new(s[0] * he.x, s[1] * he.y, s[2] * he.z);
        let mut faces = Vec::new();
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut quad = Vec::new();
                for (sb, sc) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    let mut s = [0.0; 3];
                    s[a] = sign;
                    s[b] = sb;
                    s[c] = sc * sign;
                    quad.push(corner(s));
                }
                faces.push((2 * a + k, quad));
            }
        }
        Self { faces }
    }

    /// Clips by `n·x ≤ c`; returns whether anything was removed.
    fn clip(&mut self, n: &Point3, c: f64, id: usize, eps: f64) -> bool {
        let cuts = self.faces.iter().any(|(_, f)| f.iter().any(|v| n.dot(v) - c > eps));
        if !cuts {
            return false;
        }
        let mut cap: Vec<Point3> = Vec::new();
        let mut faces = Vec::with_capacity(self.faces.len() + 1);
        for (fid, poly) in &self.faces {
            let mut out = Vec::with_capacity(poly.len() + 1);
            for i in 0..poly.len() {
                let a = poly[i];
                let b = poly[(i + 1) % poly.len()];
                let da = n.dot(&a) - c;
                let db = n.dot(&b) - c;
                if da <= eps {
                    out.push(a);
                    if da >= -eps {
                        cap.push(a);
                    }
                }
                if (da < -eps && db > eps) || (da > eps && db < -eps) {
                    let p = a + (b - a) * (da / (da - db));
                    out.push(p);
                    cap.push(p);
                }
            }
            if out.len() >= 3 {
                faces.push((*fid, out));
            }
        }
        // Order the cap polygon around its centroid.
        let mut uniq: Vec<Point3> = Vec::new();
        for p in cap {
            if uniq.iter().all(|u| (u - p).norm() > 1e-9) {
                uniq.push(p);
            }
        }
        if uniq.len() >= 3 {
            let centroid = uniq.iter().sum::<Point3>() / uniq.len() as f64;
            let e1 = (uniq[0] - centroid).normalize();
            let e2 = n.normalize().cross(&e1);
            uniq.sort_by(|a, b| {
                let (da, db) = (a - centroid, b - centroid);
                da.dot(&e2).atan2(da.dot(&e1)).total_cmp(&db.dot(&e2).atan2(db.dot(&e1)))
            });
            faces.push((id, uniq));
        }
        self.faces = faces;
        true
    }

    fn face_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.faces.iter().map(|(i, _)| *i).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn decompose_segment(
    grid: &InflatedGrid,
    p0: &Point3,
    p1: &Point3,
    excluded: StateSet,
    hw: &Point3,
) -> Polyhedron {
    let res = grid.resolution();
    let frame = segment_frame(p0, p1);
    let len = (p1 - p0).norm();
    let he = Point3::new(len / 2.0 + hw.x, hw.y, hw.z);
    let mid = (p0 + p1) / 2.0;

    let mut normals = Vec::new();
    let mut offsets = Vec::new();
    for a in 0..3 {
        let axis = frame.column(a).into_owned();
        normals.push(axis);
        offsets.push(axis.dot(&mid) + he[a]);
        normals.push(-axis);
        offsets.push(-axis.dot(&mid) + he[a]);
    }

    if excluded.contains(crate::voxel_map::VoxelState::Unknown) {
        let (lo, hi) = grid.bounds();
        let b = Polyhedron::axis_box(lo, hi);
        normals.extend_from_slice(b.normals());
        offsets.extend_from_slice(b.offsets());
    }

    // Capsule metric: unit distance at the bounding half-widths.
    let q = frame * Matrix3::from_diagonal(&Point3::new(1.0 / (hw.x * hw.x), 1.0 / (hw.y * hw.y), 1.0 / (hw.z * hw.z)))
        * frame.transpose();

    let reach = frame.abs() * he;
    let lo_cell = grid.cell_of(&(mid - reach));
    let hi_cell = grid.cell_of(&(mid + reach));
    let dims = grid.dims();
    for z in lo_cell[2].max(0)..=hi_cell[2].min(dims[2] as i64 - 1) {
        for y in lo_cell[1].max(0)..=hi_cell[1].min(dims[1] as i64 - 1) {
            for x in lo_cell[0].max(0)..=hi_cell[0].min(dims[0] as i64 - 1) {
                let c = [x, y, z];
                if !excluded.contains(grid.class(c)) {
                    continue;
                }
                let (blo, bhi) = grid.cell_box(c);
                if let Some((n, off)) = separating_plane(&q, p0, p1, &blo, &bhi, res) {
                    normals.push(n);
                    offsets.push(off);
                }
            }
        }
    }

    // Keep only rows that bound the final polytope.
    let mut poly = Polytope::oriented_box(&mid, &frame, &he);
    let eps = 1e-10 * (1.0 + mid.norm() + he.norm());
    for i in 6..normals.len() {
        poly.clip(&normals[i], offsets[i], i, eps);
    }
    let keep = poly.face_ids();
    // Row pruning only holds for a full-dimensional polytope; a flat one
    // keeps every row.
    let flat = keep.is_empty()
        || keep.iter().any(|&i| {
            let lowest = poly.faces.iter().flat_map(|(_, f)| f.iter()).map(|v| normals[i].dot(v)).fold(f64::INFINITY, f64::min);
            offsets[i] - lowest < 1e-6 * res
        });
    if flat {
        return Polyhedron::new(normals, offsets);
    }
    Polyhedron::new(keep.iter().map(|&i| normals[i]).collect(), keep.iter().map(|&i| offsets[i]).collect())
}

/// One polyhedron per non-degenerate path segment, each excluding every
/// cell whose class is in `excluded` and that meets the segment's bounding
/// box.
pub fn decompose(
    grid: &InflatedGrid,
    path: &PiecewiseLinearPath,
    excluded: StateSet,
    bbox_halfwidths: Point3,
) -> Result<Corridor, CorridorError> {
    let allowed = excluded.complement();
    let mut polyhedra = Vec::new();
    for (i, (p0, p1)) in path.segments().enumerate() {
        if (p1 - p0).norm() < 1e-9 {
            continue;
        }
        if !grid.segment_clear(&p0, &p1, allowed) {
            return Err(CorridorError::DecompositionFailed { segment: i });
        }
        polyhedra.push(decompose_segment(grid, &p0, &p1, excluded, &bbox_halfwidths));
    }
    if polyhedra.is_empty() {
        // Zero-length path: a box around the point.
        let p = path.start();
        if !allowed.contains(grid.point_class(&p)) {
            return Err(CorridorError::DecompositionFailed { segment: 0 });
        }
        polyhedra.push(decompose_segment(grid, &p, &p, excluded, &bbox_halfwidths));
    }
    Ok(Corridor::new(polyhedra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_map::VoxelState;

    fn grid_from(dims: [usize; 3], res: f64, class: impl Fn([usize; 3]) -> VoxelState) -> InflatedGrid {
        let mut classes = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    classes.push(class([x, y, z]));
                }
            }
        }
        InflatedGrid::from_classes(Point3::zeros(), dims, res, classes).unwrap()
    }

    fn hw() -> Point3 {
        Point3::from(DEFAULT_BBOX_HALFWIDTHS)
    }

    #[test]
    fn unit_box_contains() {
        let b = Polyhedron::axis_box(Point3::repeat(-1.0), Point3::repeat(1.0));
        assert!(b.contains(&Point3::zeros(), 0.0));
        assert!(!b.contains(&Point3::new(1.0 + 1e-6, 0.0, 0.0), 0.0));
        assert!(b.contains(&Point3::new(1.0, 1.0, 1.0), 0.0));
    }

    #[test]
    fn free_map_gives_bounding_box() {
        let g = grid_from([40, 40, 16], 0.25, |_| VoxelState::Free);
        let p0 = Point3::new(3.0, 5.0, 2.0);
        let p1 = Point3::new(7.0, 5.0, 2.0);
        let path = PiecewiseLinearPath::new(vec![p0, p1]).unwrap();
        let c = decompose(&g, &path, StateSet::OCCUPIED, hw()).unwrap();
        assert_eq!(c.len(), 1);
        let poly = &c.polyhedra()[0];
        assert_eq!(poly.num_rows(), 6);
        for p in [p0, p1, (p0 + p1) / 2.0] {
            assert!(poly.contains(&p, 1e-9));
        }
        assert!(poly.contains(&Point3::new(1.0 + 1e-9, 3.0 + 1e-9, 1.0 + 1e-9), 1e-9));
        assert!(!poly.contains(&Point3::new(0.9, 5.0, 2.0), 1e-9));
    }

    #[test]
    fn occupied_cell_beside_segment_is_cut() {
        let g = grid_from([40, 40, 16], 0.25, |c| if c == [20, 24, 8] { VoxelState::Occupied } else { VoxelState::Free });
        let p0 = Point3::new(3.0, 5.0, 2.0);
        let p1 = Point3::new(7.0, 5.0, 2.0);
        let path = PiecewiseLinearPath::new(vec![p0, p1]).unwrap();
        let c = decompose(&g, &path, StateSet::OCCUPIED, hw()).unwrap();
        let poly = &c.polyhedra()[0];
        assert!(!poly.contains(&g.cell_center([20, 24, 8]), 1e-9));
        assert!(poly.contains(&p0, 1e-9) && poly.contains(&p1, 1e-9));
    }

    #[test]
    fn segment_ending_on_a_cell_face_excludes_the_whole_cell() {
        // Free for x < 3.5, Unknown beyond; the segment ends on the face at
        // an angle so a tilted plane through its end would keep a sliver.
        let g = grid_from([40, 40, 16], 0.25, |c| if c[0] >= 14 { VoxelState::Unknown } else { VoxelState::Free });
        let p0 = Point3::new(1.82, 4.93, 2.0);
        let p1 = Point3::new(3.5 - 1e-13, 4.95, 2.0);
        let path = PiecewiseLinearPath::new(vec![p0, p1]).unwrap();
        let c = decompose(&g, &path, StateSet::OCCUPIED_UNKNOWN, hw()).unwrap();
        let poly = &c.polyhedra()[0];
        assert!(poly.contains(&p0, 1e-9) && poly.contains(&p1, 1e-9));
        for i in 0..=40 {
            for j in 0..=40 {
                let q = Point3::new(3.5 + 1e-6, 3.0 + i as f64 * 0.1, 1.0 + j as f64 * 0.05);
                assert!(!poly.contains(&q, 0.0), "{q:?}");
            }
        }
    }

    #[test]
    fn segment_along_a_cell_edge_stays_bounded() {
        // Unknown cells touch the segment along its length from both sides,
        // squeezing the corridor flat.
        let g = grid_from([40, 40, 16], 0.25, |c| {
            let beside = (c[1] == 19 && c[2] == 8) || (c[1] == 20 && c[2] == 7);
            if c[0] >= 14 || beside {
                VoxelState::Unknown
            } else {
                VoxelState::Free
            }
        });
        let p0 = Point3::new(1.4, 5.0, 2.0);
        let p1 = Point3::new(3.5 - 1e-12, 5.0, 2.0);
        let path = PiecewiseLinearPath::new(vec![p0, p1]).unwrap();
        let c = decompose(&g, &path, StateSet::OCCUPIED_UNKNOWN, hw()).unwrap();
        let poly = &c.polyhedra()[0];
        assert!(poly.contains(&p0, 1e-9) && poly.contains(&p1, 1e-9));
        assert!(!poly.contains(&Point3::new(3.5 + 1e-3, 5.0, 2.0), 1e-9));
        assert!(!poly.contains(&Point3::new(-50.0, 5.0, 2.0), 1e-9));
    }

    fn lcg(seed: &mut u64) -> u64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *seed >> 33
    }

    #[test]
    fn random_obstacles_excluded_and_seeds_kept() {
        let mut seed = 42u64;
        let dims = [40, 40, 12];
        for trial in 0..20 {
            let blocked: Vec<bool> = (0..dims[0] * dims[1] * dims[2]).map(|_| lcg(&mut seed) % 100 < 4).collect();
            let g = grid_from(dims, 0.25, |c| {
                if blocked[(c[2] * dims[1] + c[1]) * dims[0] + c[0]] {
                    VoxelState::Occupied
                } else {
                    VoxelState::Free
                }
            });
            let start = Point3::new(1.1, 1.2 + (trial as f64) * 0.3, 1.4);
            let goal = Point3::new(8.7, 8.9 - (trial as f64) * 0.2, 1.6);
            let Ok(path) = crate::global_planner::jps(&g, &start, &goal, StateSet::FREE) else { continue };
            let path = crate::global_planner::split_and_truncate(&path, 3.0, 4);
            let c = decompose(&g, &path, StateSet::OCCUPIED, hw()).unwrap();
            for (i, (a, b)) in path.segments().enumerate() {
                let poly = &c.polyhedra()[i];
                assert!(poly.contains(&a, 1e-9) && poly.contains(&b, 1e-9), "trial {trial} seg {i}");
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            let cell = [x as i64, y as i64, z as i64];
                            if g.class(cell) == VoxelState::Occupied {
                                assert!(!poly.contains(&g.cell_center(cell), 1e-9), "trial {trial} cell {cell:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shared_vertex_in_both() {
        let g = grid_from([40, 40, 16], 0.25, |_| VoxelState::Free);
        let v = [Point3::new(2.0, 2.0, 2.0), Point3::new(5.0, 2.0, 2.0), Point3::new(5.0, 6.0, 2.5)];
        let path = PiecewiseLinearPath::new(v.to_vec()).unwrap();
        let c = decompose(&g, &path, StateSet::OCCUPIED, hw()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.polyhedra()[0].contains(&v[1], 1e-9) && c.polyhedra()[1].contains(&v[1], 1e-9));
    }

    #[test]
    fn blocked_segment_fails() {
        let g = grid_from([40, 40, 16], 0.25, |c| if c[0] == 20 { VoxelState::Occupied } else { VoxelState::Free });
        let path = PiecewiseLinearPath::new(vec![Point3::new(3.0, 5.0, 2.0), Point3::new(7.0, 5.0, 2.0)]).unwrap();
        assert_eq!(
            decompose(&g, &path, StateSet::OCCUPIED, hw()),
            Err(CorridorError::DecompositionFailed { segment: 0 })
        );
    }

    #[test]
    fn text_round_trip() {
        let c = Corridor::new(vec![
            Polyhedron::axis_box(Point3::repeat(-1.0), Point3::repeat(1.5)),
            Polyhedron::new(vec![Point3::new(0.6, 0.8, 0.0)], vec![0.1 + 0.2]),
        ]);
        assert_eq!(Corridor::from_text(&c.to_text()).unwrap(), c);
    }
}
