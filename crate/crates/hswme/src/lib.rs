//! Solvers for the 1-D hyperbolic shallow water moment equations (HSWME)
//! with two mass-conservative model-order-reduction backends.
//!
//! The state is split into a macroscopic block (height and momentum) that is
//! always evolved by the full path-conservative scheme, and a microscopic
//! moment block that can be evolved
//!
//! * in full ([`fom`]),
//! * in a fixed POD subspace trained offline ([`pod`]), or
//! * on a rank-r manifold updated online by a basis-update & Galerkin
//!   integrator ([`dlra`]).
//!
//! Because the macroscopic update never goes through a reduction, total mass
//! is conserved to machine precision by every backend. Each time step applies
//! first-order operator splitting: macro transport, micro transport, macro
//! friction (implicit), micro friction (implicit).

pub mod dlra;
pub mod error;
pub mod fom;
pub mod friction;
pub mod linalg;
pub mod model;
pub mod pod;
pub mod transport;

pub use error::SolverError;
pub use model::{
    BoundaryKind, Grid, MacroState, MicroState, ModelParams, TestCase,
};
