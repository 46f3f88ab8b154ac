//! Log-barrier smoothed model predictive control.
//!
//! A linear MPC problem is condensed into a multiparametric QP in the stacked
//! input sequence. The exact solution is a piecewise-affine map of the initial
//! state; replacing the hard constraints by a scaled logarithmic barrier gives
//! a smooth policy whose Jacobian is a convex combination of the affine gains.
//! Randomized smoothing of the exact policy is provided for comparison.

pub mod barrier;
pub mod condense;
pub mod error;
pub mod explicit;
pub mod grid;
pub mod linalg;
pub mod lp;
pub mod par;
pub mod qp;
pub mod rollout;
pub mod smoothing;
pub mod verify;

pub use condense::{
    build_prediction_matrices, condense, geometry, residuals, CondensedQp, LinearSystem, MpcSpec,
    Polytope, QpGeometry,
};
pub use error::{Error, Result};
pub use explicit::{
    enumerate_pieces, eval_explicit, kkt_residual, piece_gains, solve_qp, AffinePiece, PieceCache,
    PieceCensus, QpSolution,
};
pub use grid::{logspace, StateGrid};
pub use linalg::{ActiveSet, Matrix, Vector};
