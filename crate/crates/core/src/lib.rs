//! Numerical stability toolkit for radiative shock profiles of
//! hyperbolic-elliptic systems.

pub mod error;
pub mod evans;
pub mod evolution;
pub mod expr;
pub mod hypotheses;
pub mod linalg;
pub mod model;
pub mod profile;
pub mod radau;
pub mod resolvent;
pub mod spectral_ode;

pub use error::{Error, Result};
