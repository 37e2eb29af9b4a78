//! Differential-algebraic model of a microbial electrolysis cell (MEC).
//!
//! The model couples substrate, three microbial populations and an
//! intracellular mediator to the cell current through an implicit
//! electrochemical balance, giving a semi-explicit index-1 DAE.

pub mod calibrate;
pub mod continuation;
pub mod dae;
pub mod eigen;
pub mod equilibria;
pub mod error;
pub mod io;
pub mod model;
pub mod params;
pub mod scenario;
pub mod sensitivity;

pub use error::{Error, Result};
pub use model::{MecModel, StateVector};
pub use params::{ParamId, ParameterSet};
