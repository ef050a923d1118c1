//! Time-domain reconstruction of permittivity and conductivity from
//! backscattered electric-field traces.
//!
//! The forward model is the stabilized second-order Maxwell system solved on a
//! hybrid domain: explicit finite differences on a structured outer grid and
//! P1 finite elements on a tetrahedral inner mesh. Coefficients are recovered
//! by minimizing a Tikhonov functional with a conjugate-gradient method whose
//! gradient comes from the discrete adjoint, optionally wrapped in adaptive
//! local mesh refinement.

pub mod datagen;
pub mod error;
pub mod inversion;
pub mod io;
pub mod mesh;
pub mod objective;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use scalar::{Real, Vec3};

/// Double-precision instances of the generic types.
pub type Domain = mesh::HybridDomain<f64>;
pub type Mesh = mesh::TetraMesh<f64>;
pub type Material = solver::MaterialField<f64>;
pub type Observations = objective::ObservationSet<f64>;
pub type Trace = solver::TraceRecord<f64>;

/// Single-precision instances of the generic types.
pub type Domain32 = mesh::HybridDomain<f32>;
pub type Mesh32 = mesh::TetraMesh<f32>;
pub type Material32 = solver::MaterialField<f32>;
pub type Observations32 = objective::ObservationSet<f32>;
pub type Trace32 = solver::TraceRecord<f32>;
