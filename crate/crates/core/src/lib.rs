//! Rate-equation simulation and parameter estimation for the photoexcitation
//! dynamics of negatively charged boron vacancies in hexagonal boron nitride.
//!
//! The crate is organised bottom-up:
//!
//! - [`kinetics`]: level graphs, the 7-level and 9-level presets, generator
//!   assembly and steady states.
//! - [`propagation`]: matrix-exponential evolution under laser-power profiles
//!   with a finite rise time.
//! - [`sequences`]: pulse pairs, dark times, waits and thermal resets.
//! - [`signal`]: PL traces, shot noise, peak heights and recovery curves.
//! - [`inference`]: singlet-lifetime fits and joint multi-dataset rate fits.
//! - [`synthetic`]: simulated measurement campaigns with shot noise.
//!
//! Units are ns, MHz and mW everywhere.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod kinetics;
pub mod propagation;
pub mod sequences;
pub mod signal;
pub mod inference;
pub mod synthetic;

pub use error::{Error, Result};
pub use exec::Execution;
