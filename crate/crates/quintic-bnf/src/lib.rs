//! Birkhoff normal forms for Galerkin-truncated quintic NLS on the circle, with the
//! numerical experiments that exercise them.

pub mod budget;
pub mod cli;
pub mod dynamics;
pub mod error;
mod flow;
pub mod nf;
pub mod plot;
pub mod poly;
pub mod resonance;
pub mod spectral;
pub mod sturm;

pub use error::{Error, Result};
pub use flow::MidpointOptions;
pub use poly::{build_p6, build_z2, HomPoly, ModeSet, MonomialKey, State};
pub use spectral::{FrequencySet, NormEnclosure, SupNormOptions};
