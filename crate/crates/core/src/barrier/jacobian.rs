//! Sensitivity of the barrier solution to the initial state.

use std::collections::BTreeMap;

use crate::condense::{residuals, CondensedQp};
use crate::error::{Error, Result};
use crate::linalg::{self, ActiveSet, Matrix, TermKind, Vector};

/// Rows that depend on `u`, with their residuals at `(x₀, u)`.
fn decision_data(qp: &CondensedQp, x0: &Vector, u: &Vector) -> Result<(Vec<usize>, Vector)> {
    let phi = residuals(qp, x0, u)?;
    let rows: Vec<usize> = (0..qp.m()).filter(|&i| qp.decision_rows()[i]).collect();
    let phi_d = Vector::from_iterator(rows.len(), rows.iter().map(|&i| phi[i]));
    let min = phi_d.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || min.is_nan() {
        return Err(Error::OutsideDomain { min_residual: min });
    }
    Ok((rows, phi_d))
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    Ok(())
}

/// `(H + ηGᵀΦ⁻²G)⁻¹(Fᵀ + ηGᵀΦ⁻²P)`.
pub fn policy_jacobian(qp: &CondensedQp, eta: f64, x0: &Vector, u_eta: &Vector) -> Result<Matrix> {
    check_eta(eta)?;
    let (rows, phi) = decision_data(qp, x0, u_eta)?;
    let mut gs = qp.g().select_rows(&rows);
    let mut ps = qp.p().select_rows(&rows);
    for (k, &p) in phi.iter().enumerate() {
        gs.row_mut(k).unscale_mut(p);
        ps.row_mut(k).unscale_mut(p);
    }
    let lhs = qp.h() + gs.transpose() * &gs * eta;
    let rhs = qp.f().transpose() + gs.transpose() * &ps * eta;
    let chol = lhs
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("barrier Hessian"))?;
    Ok(chol.solve(&rhs))
}

/// `H⁻¹[Fᵀ − Gᵀ(GH⁻¹Gᵀ + Λ)⁻¹(GH⁻¹Fᵀ − P)]` with `Λ = Φ²/η`.
pub fn policy_jacobian_woodbury(qp: &CondensedQp, eta: f64, x0: &Vector, u_eta: &Vector) -> Result<Matrix> {
    check_eta(eta)?;
    let (rows, phi) = decision_data(qp, x0, u_eta)?;
    let g = qp.g().select_rows(&rows);
    let s = qp.sensitivity_rhs().select_rows(&rows);
    let mut m = qp.ghg().select_rows(&rows).select_columns(&rows);
    for (k, &p) in phi.iter().enumerate() {
        m[(k, k)] += p * p / eta;
    }
    let inner = m
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("GH⁻¹Gᵀ + Λ"))?
        .solve(&s);
    Ok(qp.h_inv() * (qp.f().transpose() - g.transpose() * inner))
}

/// The barrier Jacobian expanded over active sets of the rows that depend on
/// `u`. Sets are reported against the full row index.
#[derive(Clone, Debug)]
pub struct ConvexCombination {
    pub jacobian: Matrix,
    /// `h_σ / h` for every set with nonsingular `[GH⁻¹Gᵀ]_σ`.
    pub weights: BTreeMap<ActiveSet, f64>,
    pub gains: BTreeMap<ActiveSet, Matrix>,
}

/// `Σ_σ (h_σ/h) K_σ` with `h_σ = det([GH⁻¹Gᵀ]_σ) Π_{i∉σ} φᵢ²/η`.
pub fn convex_combination_jacobian(
    qp: &CondensedQp,
    eta: f64,
    x0: &Vector,
    u_eta: &Vector,
) -> Result<ConvexCombination> {
    check_eta(eta)?;
    let (rows, phi) = decision_data(qp, x0, u_eta)?;
    let lambda = phi.map(|p| p * p / eta);
    let m = qp.ghg().select_rows(&rows).select_columns(&rows);
    let decomposition = linalg::decompose_inverse_plus_diagonal(&m, &lambda)?;
    let g = qp.g().select_rows(&rows);
    let s = qp.sensitivity_rhs().select_rows(&rows);
    let ft = qp.f().transpose();
    let mut jacobian = Matrix::zeros(qp.n(), qp.state_dim());
    let mut weights = BTreeMap::new();
    let mut gains = BTreeMap::new();
    for term in decomposition.terms {
        if term.kind != TermKind::Inverse {
            continue;
        }
        let k = qp.h_inv() * (&ft - g.transpose() * (&term.matrix * &s));
        jacobian += &k * term.weight;
        let full: Vec<usize> = term.sigma.indices().map(|j| rows[j]).collect();
        let sigma = ActiveSet::from_indices(qp.m(), &full)?;
        weights.insert(sigma.clone(), term.weight);
        gains.insert(sigma, k);
    }
    Ok(ConvexCombination {
        jacobian,
        weights,
        gains,
    })
}
