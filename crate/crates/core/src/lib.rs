//! Hybrid data-driven computational mechanics with contact.
//!
//! The crate assembles the discrete static problem of a geometrically exact
//! beam whose constitutive behavior is given implicitly by a smooth manifold
//! `g(e, s) = 0` in strain-stress space, formulates the resulting contact
//! problem as a mathematical program with complementarity constraints, and
//! solves it with a four-stage quick-shot heuristic on top of an elastic
//! active-set SQP method.
//!
//! Module map:
//! - [`numerics`]: dense rank estimation, orthonormal nullspaces, FD Jacobians
//! - [`beam`]: the director-based beam model (constraints, strains, forces)
//! - [`materials`]: Voigt packing and the two benchmark constitutive laws
//! - [`nlp`]: assembly of the stage NLPs, robust variants, MPCC verification
//! - [`sqp`]: the elastic active-set SQP solver
//! - [`quickshot`]: stage orchestration with warm starts and early exits
//! - [`rod`]: two single-element rod problems used as analytic oracles
//! - [`benchmarks`]: the built-in obstacle/force registry and experiment runner

pub mod beam;
pub mod benchmarks;
pub mod materials;
pub mod nlp;
pub mod numerics;
pub mod quickshot;
pub mod rod;
pub mod sqp;

pub use beam::{Beam, BeamGeometry, Configuration, ContactSpec, ForceProfile};
pub use materials::{MaterialKind, MaterialLaw, SystemLaw};
pub use numerics::{DMat, DVec, RankReport};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite values in input")]
    NonFiniteInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate constraints: {0}")]
    DegenerateConstraints(String),
    #[error("tangent basis unavailable: {0}")]
    TangentBasis(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("logic error: {0}")]
    Logic(String),
    #[error("reproduction mismatch: {0}")]
    Inconsistency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
