//! Minimal solvers: P3P for 2D-3D matches, five-point relative pose, and the
//! semi-generalized E5+1 solver for 2D-2D matches to two posed images.

mod e5p1;
mod five_point;
mod p3p;

use thiserror::Error;

pub use e5p1::{decompose_essential, solve_e5p1, E5p1Solution, E5p1SolutionSet};
pub use five_point::solve_five_point;
pub use p3p::{p3p_bearings, solve_p3p, P3PSolutionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("degenerate minimal sample")]
    DegenerateSample,
    #[error("no decomposition places enough points in front of both cameras")]
    CheiralityAmbiguous,
    #[error("translation scale is not observable from the sample")]
    ScaleUnobservable,
}

/// Degeneracy thresholds shared by the minimal solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverTolerances {
    /// Sine of the angle below which world points count as collinear and
    /// bearings as coincident.
    pub collinearity: f64,
    /// Smallest admissible magnitude of the λ coefficient in the E5+1
    /// coplanarity equation.
    pub scale_coefficient: f64,
    /// Smallest sine of the angle between the two rays of the sixth match.
    pub min_parallax: f64,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self { collinearity: 1e-8, scale_coefficient: 1e-12, min_parallax: 1e-8 }
    }
}
