//! Semi-explicit index-1 DAEs, `y' = f(t, y, z)`, `0 = g(t, y, z)`.

mod bdf;
mod init;

pub use bdf::integrate;
pub use init::{consistent_initialize, InitOptions};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A semi-explicit DAE. The unknown vector is laid out in `blocks()` copies
/// of `[y (n_diff) ; z (n_alg)]`. The Newton matrix is assumed
/// block-diagonal with identical blocks, so `jacobian` only fills the first
/// `(n_diff + n_alg)` square; augmented systems (sensitivities) exploit this.
pub trait DaeSystem {
    fn n_diff(&self) -> usize;
    fn n_alg(&self) -> usize;

    fn blocks(&self) -> usize {
        1
    }

    fn block_dim(&self) -> usize {
        self.n_diff() + self.n_alg()
    }

    fn dim(&self) -> usize {
        self.blocks() * self.block_dim()
    }

    /// Writes `f` into the differential rows and `g` into the algebraic rows
    /// of every block.
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Jacobian of the first block's `(f, g)` with respect to its own unknowns.
    fn jacobian(&self, t: f64, x: &[f64], jac: &mut DMatrix<f64>) -> Result<()>;

    /// Whether a Newton iterate may be accepted. `atol` is the absolute
    /// tolerance of the first block, available as a slack.
    fn admissible(&self, _x: &[f64], _atol: &[f64]) -> bool {
        true
    }

    fn is_algebraic(&self, i: usize) -> bool {
        i % self.block_dim() >= self.n_diff()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rtol: f64,
    /// Per component of the full unknown vector; a single entry is broadcast.
    pub atol: Vec<f64>,
    pub max_order: usize,
    pub first_step: Option<f64>,
    pub max_step: f64,
    pub max_newton_iter: usize,
    pub max_steps: usize,
    /// Keep the accepted step sequence in [`Trajectory::mesh`].
    pub record_mesh: bool,
    /// Retrace a recorded step sequence instead of choosing steps.
    pub replay: Option<Vec<MeshStep>>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rtol: 1e-8,
            atol: vec![1e-10],
            max_order: 5,
            first_step: None,
            max_step: f64::INFINITY,
            max_newton_iter: 4,
            max_steps: 200_000,
            record_mesh: false,
            replay: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rtol: f64, atol: Vec<f64>) -> Self {
        IntegratorConfig {
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(self.rtol > 0.0) || self.atol.is_empty() || self.atol.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Invalid("tolerances must be positive".into()));
        }
        if !(1..=5).contains(&self.max_order) {
            return Err(Error::Invalid("max order must lie in 1..=5".into()));
        }
        if self.max_newton_iter == 0 {
            return Err(Error::Invalid("at least one Newton iteration is required".into()));
        }
        Ok(())
    }

    pub(crate) fn atol_vec(&self, dim: usize) -> Vec<f64> {
        if self.atol.len() == dim {
            self.atol.clone()
        } else {
            (0..dim).map(|i| self.atol[i % self.atol.len()]).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub steps: usize,
    pub rejected_steps: usize,
    pub newton_iterations: usize,
    pub newton_failures: usize,
    pub rhs_evaluations: usize,
    pub jacobian_evaluations: usize,
    pub factorizations: usize,
}

/// End time and BDF order of one accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshStep {
    pub t: f64,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: SolverStats,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mesh: Vec<MeshStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[i]).collect()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.states.last().map(|v| v.as_slice())
    }
}
