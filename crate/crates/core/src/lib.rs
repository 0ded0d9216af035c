//! Index theory for operators twisted by Hilbert module bundles over
//! finite-dimensional C*-algebras, computed on discretized tori.

pub mod acceptance;
pub mod algebra;
pub mod bundle;
pub mod chern;
pub mod cover;
pub mod error;
pub mod forms;
pub mod gns;
pub mod hilbert_module;
pub mod linalg;
pub mod spectral;

pub use error::{Error, Result};
