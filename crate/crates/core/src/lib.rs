//! Sketched least squares with exact projector algebra and Monte-Carlo
//! uncertainty quantification.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod model;
pub mod projector;
pub mod rng;
pub mod sketch;
pub mod uq;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
pub mod readme {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/projectors.md")]
pub mod projectors_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/sketching.md")]
pub mod sketching_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/uncertainty.md")]
pub mod uncertainty_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli_guide {}
