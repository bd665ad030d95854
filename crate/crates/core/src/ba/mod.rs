//! Bundle adjustment with semantic constraints.

pub mod linear;
pub mod normal;
pub mod problem;
pub mod residuals;
pub mod sampling;
pub mod sketch;
pub mod solver;

pub use problem::{
    BaProblem, BodyBlock, ConstraintSet, FamilyCosts, Huber, NormalVariant, Observation, PointRef, SolverConfig,
    TrajectoryVariant,
};
pub use residuals::{BoxVariant, Family};
pub use solver::{solve, SolveReport, Termination};
