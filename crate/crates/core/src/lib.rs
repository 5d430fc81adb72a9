//! Receding-horizon trajectory planning for a jerk-controlled vehicle flying
//! through partially known 3D voxel worlds.
//!
//! Every replanning step produces two decoupled trajectories: a fast *whole*
//! trajectory allowed to cross unknown space, and a braking *safe* trajectory
//! confined to free-known space. The vehicle only ever executes the spliced
//! *committed* trajectory (the first piece of the whole trajectory followed
//! by the safe one), so it always has a stopping maneuver inside known-free
//! space.
//!
//! Modules, bottom-up:
//!
//! - [`voxel_map`]: sliding occupancy grid with ray-traced updates and
//!   inflated free/occupied/unknown classification.
//! - [`global_planner`]: 3D jump point search plus path repair, sphere
//!   clipping and segment splitting.
//! - [`corridor`]: convex decomposition of space around a path.
//! - [`trajectory`]: piecewise cubic (constant jerk) trajectories and their
//!   Bézier control points.
//! - [`opt`]: the corridor-constrained minimum-jerk MIQP, its inner QP
//!   solver and the time-allocation heuristic.
//! - [`planner`]: the replanning loop with commit logic.
//! - [`sim`]: worlds, sensing, closed-loop missions and their outputs.

pub mod corridor;
pub mod global_planner;
pub mod opt;
pub mod planner;
pub mod sim;
pub mod trajectory;
pub mod voxel_map;

/// A point or vector in world coordinates (meters).
pub type Point3 = nalgebra::Vector3<f64>;

pub use corridor::{Corridor, Polyhedron};
pub use global_planner::PiecewiseLinearPath;
pub use opt::{DynamicLimits, MiqpProblem, MiqpSolution, Terminal};
pub use planner::{PlannerConfig, PlannerState};
pub use trajectory::{CubicInterval, FullState, Trajectory};
pub use voxel_map::{StateSet, VoxelMap, VoxelState};
