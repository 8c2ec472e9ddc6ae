//! Shape reconstruction for electrical impedance tomography.
//!
//! The unknown inclusion is the negative set of a level-set function on the
//! unit square. Each optimization step solves the state and adjoint problems
//! with P1 finite elements, assembles the volume (tensor) form of the shape
//! derivative, turns it into a smooth descent field by an H1 solve, and
//! transports the level set along that field with a Local Lax-Friedrichs
//! scheme.
//!
//! Module map:
//! - [`mesh`]: structured triangulation of the unit square
//! - [`fem`]: P1 assembly, state and adjoint solves
//! - [`levelset`]: implicit interface, conductivity sampling, transport
//! - [`shapederiv`]: tensor form of the shape derivative
//! - [`descent`]: H1 descent direction
//! - [`eit`]: measurements, cost functional and the reconstruction loop
//! - [`verify`]: closed-form checks of the tensor calculus

pub mod descent;
pub mod eit;
pub mod error;
pub mod fem;
pub mod levelset;
pub mod mesh;
pub mod multigrid;
pub mod shapederiv;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
pub use fem::{ElementCoefficient, ScalarField, SidePair, SideValues};
pub use levelset::{LevelSet, Primitive, ShapeSpec};
pub use mesh::{Side, StructuredMesh};
pub use shapederiv::{TensorRep, VectorField2};
