//! Simulation lab for benign overfitting in interpolating CATE learners.
//!
//! The crate generates Gaussian designs with prescribed covariance spectra,
//! fits minimum-norm interpolators (T-learner and IPW-learner), measures
//! their excess risk exactly, decomposes it term by term, and evaluates the
//! population quantities (effective ranks, group-covariance deviation,
//! theorem bounds) that govern it.

pub mod config;
pub mod error;
pub mod interp;
pub mod lab;
pub mod io;
pub mod linalg;
pub mod plot;
pub mod risk;
pub mod seed;
pub mod spectra;
pub mod stats;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};

/// Version string recorded in manifests.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/spectra.md")]
    mod spectra {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/interp.md")]
    mod interp {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/deviation.md")]
    mod deviation {}
    #[doc = include_str!("../../../book/src/lab.md")]
    mod lab {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
