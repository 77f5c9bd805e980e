//! Path-integral dephasing of a qubit probe under Gaussian noise that need not
//! be stationary.
//!
//! The noise is described by its kernel operator 𝔻 ([`KernelSpec`]); the
//! correlation 𝔾 = 𝔻⁻¹ is computed on a uniform grid ([`gridops`]) and the
//! attenuation of a control `f` is `χ = ½(f|𝔾|f)`, evaluated in the time,
//! eigenmode or frequency basis ([`dephasing`]).

pub mod analytic;
pub mod control;
pub mod dephasing;
pub mod eigenmodes;
pub mod error;
pub mod grid;
pub mod gridops;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod markov;
pub mod modulation;
pub mod sampler;
pub mod spectroscopy;
pub mod types;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use gridops::{BoundaryCondition, CorrelationMatrix, KernelMatrix};
pub use eigenmodes::{Bispectrum, EigenmodeDecomposition, Mode};
pub use kernel::{KernelSpec, LocalKernel, PolynomialKernel, Profile, ValidationReport};
pub use modulation::{ControlKind, ControlModulation};
pub use types::{Basis, DephasingResult, FieldPath};
pub use sampler::{CovarianceFactor, SampleEstimate};
pub use spectroscopy::{FilterBank, MeasurementSet, SpectrumEstimate};
pub use markov::{FieldBoundary, GeneralizedState, PropagatorGaussian};
pub use control::{OptimizedPulses, OptimizerOptions};
