// SPDX-License-Identifier: Apache-2.0

//! Coherence simulator for an NV⁻-like S = 1 central spin in a nuclear spin bath.
//!
//! The crate is organised bottom-up:
//!
//! * [`spin`]: spin operators, Hamiltonian assembly, eigendecomposition, propagation
//! * [`bath`]: diamond-lattice and surface-termination baths, hyperfine and dipolar tensors
//! * [`cce`]: generalized cluster correlation expansion and the exact oracle
//! * [`pulse`]: Ramsey / Hahn-echo protocols and decay-time extraction
//! * [`field`]: level diagrams, clock transitions, ODMR, field sweeps
//! * [`config`] / [`run`]: JSON run configurations and the `simulate` driver

pub mod bath;
pub mod cce;
pub mod config;
pub mod constants;
pub mod error;
pub mod field;
pub mod io;
pub mod linalg;
pub mod pulse;
pub mod run;
pub mod spin;

pub use error::{Error, Result};
