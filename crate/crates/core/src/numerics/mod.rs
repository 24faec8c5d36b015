//! Small dense linear algebra and reverse-mode differentiation.
//!
//! Everything here is sized for residual blocks acting on low-dimensional
//! point clouds (d up to about 16): eigenvalues of Jacobians, spectral norms
//! of weight matrices, LU solves for the resolvent `(I - θJ)⁻¹`, stochastic
//! trace estimation, and a tape for parameter gradients.

mod eigen;
mod fd;
mod hutchinson;
mod lu;
mod matrix;
mod power;
pub mod tape;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eigen::{eigenvalues, eigenvalues_with_vectors, EigenDecomposition};
pub use fd::finite_difference_gradient;
pub use hutchinson::{frobenius_sq_exact, hutchinson_frobenius_sq};
pub use lu::{lu_solve, Lu};
pub use matrix::{dot, norm, DenseMatrix};
pub use power::{spectral_norm, spectral_norm_warm, PowerIterate};
pub use tape::{backward, theta_resolvent, Gradients, NodeId, Tape};

/// Complex scalar used for eigenvalues and stability-function arguments.
pub type ComplexScalar = num_complex::Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix must be nonempty")]
    Empty,
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("singular matrix: pivot {pivot:e} at column {column} is below {threshold:e}")]
    Singular {
        column: usize,
        pivot: f64,
        threshold: f64,
    },
    #[error("I - θJ is singular at point {row}")]
    SingularRow { row: usize },
    #[error("eigenvalue iteration did not converge after {iterations} sweeps")]
    NoConvergence { iterations: usize },
    #[error("backward pass needs a scalar output, node has shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
}

/// Which iterative method produced a [`SolveReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    FixedPoint,
    Newton,
    PowerIteration,
    /// No iteration was needed (explicit update).
    Direct,
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub method: SolveMethod,
}

impl SolveReport {
    pub fn direct() -> Self {
        Self {
            iterations: 0,
            residual: 0.0,
            converged: true,
            method: SolveMethod::Direct,
        }
    }

    /// Folds per-point reports into a batch summary: max iterations, max
    /// residual, all-converged, and the most expensive method used.
    pub fn merge(self, other: Self) -> Self {
        fn rank(m: SolveMethod) -> u8 {
            match m {
                SolveMethod::Direct => 0,
                SolveMethod::PowerIteration => 1,
                SolveMethod::FixedPoint => 2,
                SolveMethod::Newton => 3,
            }
        }
        Self {
            iterations: self.iterations.max(other.iterations),
            residual: self.residual.max(other.residual),
            converged: self.converged && other.converged,
            method: if rank(other.method) > rank(self.method) {
                other.method
            } else {
                self.method
            },
        }
    }
}
