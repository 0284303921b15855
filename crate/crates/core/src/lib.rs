//! Constraint-qualification analysis for nonsmooth systems with
//! complementarity constraints and abstract set constraints.

pub mod bilevel;
pub mod config;
pub mod cq;
pub mod errorbound;
pub mod expr;
pub mod linalg;
pub mod stationarity;
pub mod system;
pub mod vcalc;
