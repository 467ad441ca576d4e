//! Geometrically exact Kirchhoff rod solver with spline and nodal director discretizations.

pub mod assembly;
pub mod constraints;
pub mod diagnostics;
pub mod rodcore;
pub mod scenarios;
pub mod solvers;
pub mod sparse;
pub mod splinekit;
