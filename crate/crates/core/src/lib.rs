//! Controlled SDEs with a default time, adjoint BSDEs with a single jump, and
//! numerical checks of the sufficient and equivalence maximum principles.

pub mod acceptance;
pub mod bsde;
pub mod config;
pub mod error;
pub mod logutility;
pub mod paths;
pub mod regression;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod sde;
pub mod smp;
pub mod stats;
pub mod timefn;

pub use error::{Error, Result};
pub use scalar::{Interval, Scalar};

pub use regression::RegressionBasis;
pub use stats::Estimate;

/// f64 instantiations of the generic types.
pub type TimeFnF64 = timefn::TimeFn<f64>;
pub type IntensityF64 = paths::IntensitySpec<f64>;
pub type TimeGridF64 = paths::TimeGrid<f64>;
pub type PathF64 = paths::FiltrationPath<f64>;
pub type CoefficientsF64 = sde::CoefficientSet<f64>;
pub type ControlF64 = sde::ControlProcess<f64>;
pub type SdePathF64 = sde::SdePath<f64>;
pub type LinearBsdeF64 = bsde::LinearBsdeSpec<f64>;
pub type GeneralBsdeF64 = bsde::GeneralBsdeSpec<f64>;
pub type BsdeSolutionF64 = bsde::BsdeSolution<f64>;
pub type ControlProblemF64 = smp::ControlProblem<f64>;
pub type WealthModelF64 = logutility::WealthModel<f64>;
