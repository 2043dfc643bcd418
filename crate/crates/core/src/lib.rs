//! Direct sampling and deep direct sampling methods for electrical
//! impedance tomography.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity)]

pub mod cnn;
pub mod container;
pub mod dsm;
pub mod error;
pub mod experiment;
pub mod field;
pub mod fnn;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod solver;
pub mod spectral;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use field::{gradient_field, BoundaryLoop, BoundaryTrace, ScalarField, VectorField};
pub use grid::{CartesianGrid, ConductivitySample, IndexField, Point, Scenario, Shape};
pub use solver::{Domain, Operator, SolverConfig, SquareDomain};
