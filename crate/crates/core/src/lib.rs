//! Time-domain full-waveform inversion with extended sources.
//!
//! Classic FWI, wavefield reconstruction inversion (WRI) and extended source
//! inversion (ESI) share one adjoint-state machinery here: a 2D acoustic
//! time stepper with an exactly transposed adjoint, matrix-free normal
//! operators solved by conjugate gradients, storage-lean alternatives
//! (data-space and frequency-reduced solves, fixed-point recursions), and an
//! L-BFGS outer loop over squared slowness.

pub mod alt;
pub mod cg;
pub mod dense;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod inversion;
pub mod io;
pub mod linops;
pub mod propagator;
pub mod selftest;
pub mod store;
pub mod vecops;

pub use error::{Error, ErrorClass, Result};
pub use grid::{Geometry, GridDims, ModelGrid, Position, ShotGather};
pub use linops::{Annihilator, AnnihilatorKind, FreqField, Frequencies, LinearMap};
pub use propagator::{Propagator, SourceTerm, Wavefield};
pub use store::{StoreBackend, WavefieldStore};
