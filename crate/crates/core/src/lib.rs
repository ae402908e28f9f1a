//! Analytic credit portfolio risk engine.
//!
//! Portfolio values are modeled on a multi-factor Gaussian driver; each
//! facility's conditional expected value is expanded in probabilists' Hermite
//! polynomials, portfolio structure is collected into low-order symmetric
//! tensors, and tail risk at a given confidence level is read off from a
//! single-factor backbone plus analytic second/third order corrections for
//! residual systematic and idiosyncratic dispersion. A counter-based Monte
//! Carlo engine provides the reference estimates the analytic stack is
//! benchmarked against.

pub mod analyze;
pub mod coeffs;
pub mod error;
pub mod expansion;
pub mod gaussian;
pub mod hermite;
pub mod idio;
pub mod mc;
pub mod portfolio;
pub mod quadrature;
pub mod risk;
pub mod rng;
pub mod rotation;
pub mod synth;
pub mod tensor;

pub use analyze::{analyze, analyze_full, analyze_with_rotation, Analysis};
pub use error::{CriskError, Result, Violation};
pub use expansion::{ConditionalMoments, ExpansionConfig, TailCoefficients};
pub use idio::{GaCaps, IdioMoments};
pub use mc::{FacilityEstimate, SimConfig, SimMode, SimResult};
pub use risk::{RiskConfig, RiskReport};
pub use portfolio::{Facility, FactorModel, Portfolio, ValueSpec};
pub use quadrature::QuadratureRule;
pub use rotation::Rotation;
pub use tensor::SymmetricTensor;
