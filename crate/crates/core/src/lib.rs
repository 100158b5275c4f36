//! Ideal Scherk graphs in H×R: hyperbolic kernel, polygon admissibility,
//! the quadrilateral extension engine, truncated-domain meshing, a discrete
//! minimal surface solver, flux audits and intrinsic graph analysis.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hypgeo;
pub mod polygon;
pub mod extend;
pub mod meshing;
pub mod solver;
pub mod analysis;
pub mod flux;

pub use error::{Error, Result};
