//! Proportional principal stratum hazards (PPSH) estimation for the first
//! non-fatal event when death is a competing risk.
//!
//! The pipeline estimates, for every at-risk subject at every non-fatal event
//! time, the probability of belonging to the "always survivor" stratum (alive
//! at that time under either arm). Those probabilities weight a Cox-type
//! partial likelihood whose treatment coefficient is the log principal
//! stratum hazard ratio. Membership probabilities come either from a shared
//! gamma frailty ([`frailty_ps`]) or from a nested Clayton copula
//! ([`copula`]).

pub mod copula;
pub mod error;
pub mod estimators;
pub mod frailty_ps;
pub mod numeric;
pub mod ppsh;
pub mod schoenfeld;
pub mod simgen;
pub mod survdata;

pub use error::{Error, Result};
