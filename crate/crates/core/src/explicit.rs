//! Exact MPC: reference QP solves, affine gains of each active set, and
//! sampling-based piece enumeration.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use crate::condense::CondensedQp;
use crate::error::{Error, Result};
use crate::grid::StateGrid;
use crate::linalg::{self, ActiveSet, Matrix, Vector};
use crate::par::*;
use crate::qp::{self, ActiveSetOptions};

/// Tolerance of the region membership test used by cache lookups.
pub const REGION_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub u_star: Vector,
    /// Working set at termination.
    pub sigma: ActiveSet,
    /// Multipliers, zero off `sigma`.
    pub lambda: Vector,
    pub iterations: usize,
    pub objective: f64,
}

/// Solves the condensed QP at `x0` with a primal active-set method.
pub fn solve_qp(qp: &CondensedQp, x0: &Vector) -> Result<QpSolution> {
    solve_qp_from(qp, x0, None)
}

/// As [`solve_qp`], starting from `warm` when it is feasible.
pub fn solve_qp_from(qp: &CondensedQp, x0: &Vector, warm: Option<&Vector>) -> Result<QpSolution> {
    if x0.len() != qp.state_dim() {
        return Err(Error::Dimension(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            qp.state_dim()
        )));
    }
    let c = qp.linear_term(x0);
    let b = qp.rhs(x0);
    let res = qp::solve_active_set(qp.h(), &c, qp.g(), &b, warm, &ActiveSetOptions::default())?;
    Ok(QpSolution {
        sigma: ActiveSet::from_indices(qp.m(), &res.working)?,
        u_star: res.u,
        lambda: res.multipliers,
        iterations: res.iterations,
        objective: res.objective,
    })
}

/// Largest violation of each KKT condition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residual(qp: &CondensedQp, x0: &Vector, u: &Vector, lambda: &Vector) -> KktResidual {
    let grad = qp.h() * u - qp.linear_term(x0) + qp.g().transpose() * lambda;
    let phi = qp.rhs(x0) - qp.g() * u;
    KktResidual {
        stationarity: grad.amax(),
        primal: phi.iter().fold(0.0, |a, &p| a.max(-p)),
        dual: lambda.iter().fold(0.0, |a, &l| a.max(-l)),
        complementarity: phi
            .iter()
            .zip(lambda.iter())
            .fold(0.0, |a, (p, l)| a.max((p * l).abs())),
    }
}

/// `u = K x₀ + k` together with the affine multiplier and residual maps that
/// describe its critical region.
#[derive(Clone, Debug)]
pub struct AffinePiece {
    pub sigma: ActiveSet,
    pub gain: Matrix,
    pub offset: Vector,
    lambda_gain: Matrix,
    lambda_offset: Vector,
    residual_gain: Matrix,
    residual_offset: Vector,
}

impl AffinePiece {
    pub fn eval(&self, x0: &Vector) -> Vector {
        &self.gain * x0 + &self.offset
    }

    /// Multipliers at `x0`, zero off `sigma`.
    pub fn multipliers(&self, x0: &Vector) -> Vector {
        &self.lambda_gain * x0 + &self.lambda_offset
    }

    /// Whether `x0` satisfies primal feasibility and dual nonnegativity.
    pub fn contains(&self, x0: &Vector, tol: f64) -> bool {
        let phi = &self.residual_gain * x0 + &self.residual_offset;
        if phi.iter().any(|&p| p < -tol) {
            return false;
        }
        let lam = self.multipliers(x0);
        self.sigma.indices().all(|i| lam[i] >= -tol)
    }
}

/// Gains `K_σ, k_σ` of the affine law with active set `sigma`.
pub fn piece_gains(qp: &CondensedQp, sigma: &ActiveSet) -> Result<AffinePiece> {
    if sigma.len() != qp.m() {
        return Err(Error::Dimension(format!(
            "active set has length {}, QP has {} rows",
            sigma.len(),
            qp.m()
        )));
    }
    let sub = linalg::principal_submatrix(qp.ghg(), sigma)?;
    if linalg::psd_det_is_zero(linalg::det(&sub)?, &sub) {
        return Err(Error::DegenerateActiveSet(sigma.to_string()));
    }
    let m_inv = linalg::padded_inverse(qp.ghg(), sigma)?;
    let s = qp.sensitivity_rhs();
    let h_inv = qp.h_inv();
    let gt = qp.g().transpose();
    let lambda_gain = &m_inv * &s;
    let lambda_offset = -(&m_inv * qp.w());
    let gain = h_inv * (qp.f().transpose() - &gt * &lambda_gain);
    let offset = h_inv * (&gt * (&m_inv * qp.w()));
    let residual_gain = qp.p() - qp.g() * &gain;
    let residual_offset = qp.w() - qp.g() * &offset;
    Ok(AffinePiece {
        sigma: sigma.clone(),
        gain,
        offset,
        lambda_gain,
        lambda_offset,
        residual_gain,
        residual_offset,
    })
}

/// Affine pieces discovered so far. Lookups take a shared lock; insertion
/// takes the exclusive one.
#[derive(Debug, Default)]
pub struct PieceCache {
    pieces: RwLock<Vec<Arc<AffinePiece>>>,
}

impl PieceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pieces(pieces: impl IntoIterator<Item = AffinePiece>) -> Self {
        Self {
            pieces: RwLock::new(pieces.into_iter().map(Arc::new).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.read().expect("piece cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First cached piece whose region contains `x0`.
    pub fn lookup(&self, x0: &Vector) -> Option<Arc<AffinePiece>> {
        let pieces = self.pieces.read().expect("piece cache lock");
        pieces.iter().find(|p| p.contains(x0, REGION_TOL)).cloned()
    }

    /// Inserts unless a piece with the same active set is present.
    pub fn insert(&self, piece: AffinePiece) -> Arc<AffinePiece> {
        let mut pieces = self.pieces.write().expect("piece cache lock");
        if let Some(p) = pieces.iter().find(|p| p.sigma == piece.sigma) {
            return p.clone();
        }
        let piece = Arc::new(piece);
        pieces.push(piece.clone());
        piece
    }

    pub fn pieces(&self) -> Vec<Arc<AffinePiece>> {
        self.pieces.read().expect("piece cache lock").clone()
    }
}

#[derive(Clone, Debug)]
pub struct ExplicitEval {
    pub u: Vector,
    pub sigma: ActiveSet,
    /// QP iterations spent; zero on a cache hit.
    pub iterations: usize,
    pub cache_hit: bool,
}

/// Evaluates the explicit law at `x0`, solving and caching on a miss.
pub fn eval_explicit(qp: &CondensedQp, x0: &Vector, cache: &PieceCache) -> Result<ExplicitEval> {
    if let Some(piece) = cache.lookup(x0) {
        return Ok(ExplicitEval {
            u: piece.eval(x0),
            sigma: piece.sigma.clone(),
            iterations: 0,
            cache_hit: true,
        });
    }
    let sol = solve_qp(qp, x0)?;
    if let Ok(piece) = piece_gains(qp, &sol.sigma) {
        cache.insert(piece);
    }
    Ok(ExplicitEval {
        u: sol.u_star,
        sigma: sol.sigma,
        iterations: sol.iterations,
        cache_hit: false,
    })
}

/// Distinct optimal active sets found over a state grid.
#[derive(Clone, Debug, Default)]
pub struct PieceCensus {
    pub counts: BTreeMap<ActiveSet, usize>,
    /// Grid points with no feasible input sequence.
    pub infeasible: usize,
    /// Grid points where the solver failed for another reason.
    pub failures: usize,
    pub grid_points: usize,
}

impl PieceCensus {
    pub fn n_pieces(&self) -> usize {
        self.counts.len()
    }

    pub fn sigmas(&self) -> impl Iterator<Item = &ActiveSet> {
        self.counts.keys()
    }
}

enum GridOutcome {
    Piece(ActiveSet),
    Infeasible,
    Failure,
}

/// Solves the QP at every grid point. Each line of the grid along the last
/// axis is warm-started from its previous point.
pub fn enumerate_pieces(qp: &CondensedQp, grid: &StateGrid) -> PieceCensus {
    let line = *grid.counts.last().expect("grid has an axis");
    let n_lines = grid.len() / line;
    let outcomes: Vec<Vec<GridOutcome>> = (0..n_lines)
        .into_par_iter()
        .map(|l| {
            let mut warm: Option<Vector> = None;
            (0..line)
                .map(|k| {
                    let x0 = grid.point(l * line + k);
                    match solve_qp_from(qp, &x0, warm.as_ref()) {
                        Ok(sol) => {
                            let sigma = sol.sigma.clone();
                            warm = Some(sol.u_star);
                            GridOutcome::Piece(sigma)
                        }
                        Err(Error::Infeasible(_)) => GridOutcome::Infeasible,
                        Err(_) => GridOutcome::Failure,
                    }
                })
                .collect()
        })
        .collect();
    let mut census = PieceCensus {
        grid_points: grid.len(),
        ..Default::default()
    };
    for o in outcomes.into_iter().flatten() {
        match o {
            GridOutcome::Piece(s) => *census.counts.entry(s).or_insert(0) += 1,
            GridOutcome::Infeasible => census.infeasible += 1,
            GridOutcome::Failure => census.failures += 1,
        }
    }
    census
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::{condense, MpcSpec};
    use nalgebra::{dmatrix, dvector};

    fn box_qp_1d() -> CondensedQp {
        CondensedQp::from_parts(
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0; -1.0],
            dmatrix![0.0; 0.0],
            dvector![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_interior_and_clipped() {
        let qp = box_qp_1d();
        let s = solve_qp(&qp, &dvector![0.5]).unwrap();
        assert!((s.u_star[0] - 0.5).abs() < 1e-14);
        assert_eq!(s.sigma.count(), 0);
        let s = solve_qp(&qp, &dvector![2.0]).unwrap();
        assert!((s.u_star[0] - 1.0).abs() < 1e-14);
        assert_eq!(s.sigma.indices().collect::<Vec<_>>(), vec![0]);
        assert!(kkt_residual(&qp, &dvector![2.0], &s.u_star, &s.lambda).max() < 1e-12);
    }

    #[test]
    fn scalar_gains() {
        let qp = box_qp_1d();
        let free = piece_gains(&qp, &ActiveSet::empty(2)).unwrap();
        assert_eq!(free.gain, dmatrix![1.0]);
        assert_eq!(free.offset, dvector![0.0]);
        let upper = piece_gains(&qp, &ActiveSet::from_indices(2, &[0]).unwrap()).unwrap();
        assert!(upper.gain[(0, 0)].abs() < 1e-15);
        assert!((upper.offset[0] - 1.0).abs() < 1e-15);
        assert!(upper.contains(&dvector![3.0], 0.0));
        assert!(!upper.contains(&dvector![0.5], 0.0));
        assert!(matches!(
            piece_gains(&qp, &ActiveSet::full(2)),
            Err(Error::DegenerateActiveSet(_))
        ));
    }

    #[test]
    fn scalar_census_has_three_pieces() {
        let qp = box_qp_1d();
        let grid = StateGrid::new(vec![-2.0], vec![2.0], vec![41]).unwrap();
        let census = enumerate_pieces(&qp, &grid);
        assert_eq!(census.n_pieces(), 3);
        assert_eq!(census.infeasible, 0);
        assert_eq!(census.counts.values().sum::<usize>(), 41);
    }

    #[test]
    fn loose_bounds_single_piece() {
        let spec = MpcSpec::double_integrator_with(4, None, 1e3);
        let qp = condense(&spec).unwrap();
        let grid = StateGrid::square(2, 0.5, 11).unwrap();
        let census = enumerate_pieces(&qp, &grid);
        assert_eq!(census.n_pieces(), 1);
        assert_eq!(census.sigmas().next().unwrap().count(), 0);
    }

    #[test]
    fn cache_hit_after_miss() {
        let qp = condense(&MpcSpec::double_integrator()).unwrap();
        let cache = PieceCache::new();
        let x0 = dvector![-6.0, 2.0];
        let first = eval_explicit(&qp, &x0, &cache).unwrap();
        assert!(!first.cache_hit);
        let second = eval_explicit(&qp, &x0, &cache).unwrap();
        assert!(second.cache_hit);
        assert_eq!(second.iterations, 0);
        assert!((first.u - second.u).amax() < 1e-9);
    }

    #[test]
    fn infeasible_state_is_reported() {
        let qp = condense(&MpcSpec::double_integrator()).unwrap();
        assert!(matches!(solve_qp(&qp, &dvector![10.0, 10.0]), Err(Error::Infeasible(_))));
    }
}
