//! Two-layer time-optimal trajectory generation.
//!
//! The planner iterates short fixed-horizon planning cycles. Each cycle runs a
//! trajectory search (vortex potential field or dynamic window) to obtain a
//! collision-free nominal trajectory, solves a relaxed convex problem without
//! obstacle constraints, extracts per-knot collision-free convex regions that
//! interpolate between the two, and solves a strict convex problem inside those
//! regions. The applied prefixes of the cycle solutions are concatenated into
//! the final control sequence.
//!
//! Module map:
//! - [`scenario`]: obstacle maps, seeded generation and validation.
//! - [`dynamics`]: control-affine models, Euler discretization, linearization.
//! - [`search`]: the CVAPF and CDWA trajectory searches.
//! - [`convex`]: dense convex program representation and interior point solver.
//! - [`cycle`]: one planning cycle (relaxed problem, regions, strict problem).
//! - [`planner`]: the outer replanning loop.
//! - [`sim`]: closed-loop simulation, metrics and batch benchmarks.
//! - [`io`]: file formats shared with the command line tool.

pub mod convex;
pub mod cycle;
pub mod dynamics;
pub mod geometry;
pub mod io;
pub mod planner;
pub mod rng;
pub mod scenario;
pub mod search;
pub mod sim;
pub mod trajectory;

pub use convex::{ConvexProgram, Solution, SolveStatus};
pub use dynamics::{DiscreteDynamics, VehicleModel};
pub use planner::{PlannerConfig, RunResult};

pub use scenario::{Obstacle, ObstacleMotion, Scenario};
pub use trajectory::Trajectory;
