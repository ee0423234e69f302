//! Numerical checks of first- and second-order necessary conditions for weak
//! Pareto optimality in multi-objective optimal control on Riemannian
//! manifolds.

pub mod exprlang;
pub mod geometry;
pub mod grid;
pub mod dynamics;
pub mod cones;
pub mod conditions;
pub mod exec;
pub mod scenario;
pub mod pipeline;
pub mod report;
