//! Recentered log-barrier MPC.
//!
//! ```text
//! V^η(x₀, u) = ½uᵀHu − x₀ᵀFu − η (Σᵢ log φᵢ(x₀, u) − dᵀu)
//! ```
//!
//! The sum runs over rows that depend on `u`; the remaining rows only restrict
//! `x₀` and are checked before solving. The recentering vector `d` makes
//! `u = 0` the minimizer at `x₀ = 0`.

mod bounds;
mod jacobian;

pub use bounds::*;
pub use jacobian::*;

use crate::condense::{decision_polytope, CondensedQp};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::lp;

/// Slack tolerated on rows that do not depend on `u`.
const STATE_ROW_TOL: f64 = 1e-9;

/// Decrement accepted when Newton stalls at machine precision.
const STALL_DECREMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierConfig {
    pub eta: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Smallest residual accepted for a start point.
    pub feasibility_margin: f64,
}

impl BarrierConfig {
    pub fn new(eta: f64) -> Result<Self> {
        let cfg = Self {
            eta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.newton_tol > 0.0 && self.newton_tol <= 0.25) {
            return Err(Error::InvalidArgument(format!(
                "newton_tol must lie in (0, 1/4], got {}",
                self.newton_tol
            )));
        }
        if self.max_newton_iters == 0 {
            return Err(Error::InvalidArgument("max_newton_iters must be positive".into()));
        }
        if !(self.feasibility_margin > 0.0) {
            return Err(Error::InvalidArgument("feasibility_margin must be positive".into()));
        }
        Ok(())
    }
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            newton_tol: 1e-10,
            max_newton_iters: 200,
            feasibility_margin: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BarrierSolution {
    pub u_eta: Vector,
    /// Residuals of every row at `(x₀, u_eta)`.
    pub phi: Vector,
    /// `∂u_η/∂x₀`.
    pub jacobian: Matrix,
    pub newton_iters: usize,
    /// Newton decrement of `V^η/η` at `u_eta`.
    pub decrement: f64,
    pub converged: bool,
    /// `V^η` at the start point and after every Newton step.
    pub value_trace: Vec<f64>,
}

impl BarrierSolution {
    /// Smallest residual over rows that depend on `u`.
    pub fn min_residual(&self, qp: &CondensedQp) -> f64 {
        decision_residuals(qp, &self.phi).fold(f64::INFINITY, f64::min)
    }

    /// First input block `u₀`.
    pub fn first_input(&self, qp: &CondensedQp) -> Vector {
        self.u_eta.rows(0, qp.input_dim()).into_owned()
    }
}

pub(crate) fn decision_residuals<'a>(qp: &'a CondensedQp, phi: &'a Vector) -> impl Iterator<Item = f64> + 'a {
    qp.decision_rows()
        .iter()
        .zip(phi.iter())
        .filter(|(d, _)| **d)
        .map(|(_, &p)| p)
}

/// `d = −Σᵢ gᵢ / wᵢ`, the barrier gradient at `u = 0, x₀ = 0`.
pub fn recentering_vector(qp: &CondensedQp) -> Result<Vector> {
    let mut d = Vector::zeros(qp.n());
    for i in 0..qp.m() {
        if !qp.decision_rows()[i] {
            continue;
        }
        let wi = qp.w()[i];
        if wi <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "origin is not interior: w[{i}] = {wi:e}"
            )));
        }
        d -= qp.g().row(i).transpose() / wi;
    }
    Ok(d)
}

#[derive(Clone, Debug)]
pub struct BarrierEval {
    pub value: f64,
    pub gradient: Vector,
    pub hessian: Matrix,
}

fn check_interior(qp: &CondensedQp, phi: &Vector) -> Result<()> {
    let min = decision_residuals(qp, phi).fold(f64::INFINITY, f64::min);
    if min <= 0.0 || min.is_nan() {
        return Err(Error::OutsideDomain { min_residual: min });
    }
    Ok(())
}

fn evaluate(qp: &CondensedQp, eta: f64, d: &Vector, c: &Vector, u: &Vector, phi: &Vector) -> BarrierEval {
    let hu = qp.h() * u;
    let mut log_sum = 0.0;
    let mut grad = &hu - c + d * eta;
    let mut hess = qp.h().clone();
    let g = qp.g();
    for i in 0..qp.m() {
        if !qp.decision_rows()[i] {
            continue;
        }
        let gi = g.row(i);
        log_sum += phi[i].ln();
        grad += gi.transpose() * (eta / phi[i]);
        hess.ger(eta / (phi[i] * phi[i]), &gi.transpose(), &gi.transpose(), 1.0);
    }
    let value = 0.5 * u.dot(&hu) - c.dot(u) - eta * (log_sum - d.dot(u));
    BarrierEval {
        value,
        gradient: grad,
        hessian: hess,
    }
}

fn value_at(qp: &CondensedQp, eta: f64, d: &Vector, c: &Vector, u: &Vector, phi: &Vector) -> f64 {
    let log_sum: f64 = decision_residuals(qp, phi).map(f64::ln).sum();
    0.5 * u.dot(&(qp.h() * u)) - c.dot(u) - eta * (log_sum - d.dot(u))
}

/// Value, gradient and Hessian of `V^η(x₀, ·)` at `u`.
pub fn barrier_objective(qp: &CondensedQp, eta: f64, x0: &Vector, u: &Vector) -> Result<BarrierEval> {
    let phi = crate::condense::residuals(qp, x0, u)?;
    check_interior(qp, &phi)?;
    let d = recentering_vector(qp)?;
    Ok(evaluate(qp, eta, &d, &qp.linear_term(x0), u, &phi))
}

fn min_decision_residual(qp: &CondensedQp, x0: &Vector, u: &Vector) -> f64 {
    let phi = qp.rhs(x0) - qp.g() * u;
    decision_residuals(qp, &phi).fold(f64::INFINITY, f64::min)
}

/// Strictly feasible start: the warm start, then `u = 0`, then the Chebyshev
/// center of the decision polytope.
fn interior_start(qp: &CondensedQp, cfg: &BarrierConfig, x0: &Vector, warm: Option<&Vector>) -> Result<Vector> {
    let (a, b) = decision_polytope(qp, x0)?;
    if let Some(w) = warm.filter(|w| w.len() == qp.n()) {
        if min_decision_residual(qp, x0, w) >= cfg.feasibility_margin {
            return Ok(w.clone());
        }
    }
    let zero = Vector::zeros(qp.n());
    if min_decision_residual(qp, x0, &zero) >= cfg.feasibility_margin {
        return Ok(zero);
    }
    let (center, r) = lp::chebyshev_center(&a, &b)?;
    if r < cfg.feasibility_margin {
        return Err(Error::Infeasible(format!(
            "no input sequence with residual margin {:e} (largest inscribed radius {r:e})",
            cfg.feasibility_margin
        )));
    }
    Ok(center)
}

/// Minimizes `V^η(x₀, ·)` by damped Newton.
pub fn solve_barrier(
    qp: &CondensedQp,
    cfg: &BarrierConfig,
    x0: &Vector,
    warm_start: Option<&Vector>,
) -> Result<BarrierSolution> {
    cfg.validate()?;
    if x0.len() != qp.state_dim() {
        return Err(Error::Dimension(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            qp.state_dim()
        )));
    }
    let rhs = qp.rhs(x0);
    for i in 0..qp.m() {
        if !qp.decision_rows()[i] && rhs[i] < -STATE_ROW_TOL {
            return Err(Error::Infeasible(format!(
                "state-only constraint {i} violated by {:e}",
                -rhs[i]
            )));
        }
    }
    let eta = cfg.eta;
    let d = recentering_vector(qp)?;
    let c = qp.linear_term(x0);
    let mut u = interior_start(qp, cfg, x0, warm_start)?;
    let mut phi = &rhs - qp.g() * &u;
    let mut ev = evaluate(qp, eta, &d, &c, &u, &phi);
    let mut trace = vec![ev.value];
    let mut decrement = f64::INFINITY;
    let mut iters = 0;
    let mut converged = false;

    while iters < cfg.max_newton_iters {
        let chol = ev
            .hessian
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("barrier Hessian"))?;
        let step = chol.solve(&(-&ev.gradient));
        decrement = (-ev.gradient.dot(&step) / eta).max(0.0).sqrt();
        if decrement <= cfg.newton_tol {
            converged = true;
            // one more full step costs little and reaches machine precision
            let cand = &u + &step;
            let cand_phi = &rhs - qp.g() * &cand;
            if decision_residuals(qp, &cand_phi).all(|p| p > 0.0) {
                u = cand;
                phi = cand_phi;
                ev = evaluate(qp, eta, &d, &c, &u, &phi);
                trace.push(ev.value);
            }
            break;
        }
        iters += 1;
        let damped = if decrement <= 0.25 { 1.0 } else { 1.0 / (1.0 + decrement) };
        let mut accepted = None;
        let mut t = damped;
        for _ in 0..60 {
            let cand = &u + &step * t;
            let cand_phi = &rhs - qp.g() * &cand;
            if decision_residuals(qp, &cand_phi).all(|p| p > 0.0) {
                let v = value_at(qp, eta, &d, &c, &cand, &cand_phi);
                accepted = Some((cand, cand_phi, v));
                break;
            }
            t *= 0.5;
        }
        let Some((mut cand, mut cand_phi, damped_value)) = accepted else {
            break;
        };
        if decrement > 0.25 {
            // longer steps are taken only when they beat the damped step
            let mut t = 1.0;
            while t > damped {
                let long = &u + &step * t;
                let long_phi = &rhs - qp.g() * &long;
                if decision_residuals(qp, &long_phi).all(|p| p > 0.0)
                    && value_at(qp, eta, &d, &c, &long, &long_phi) <= damped_value
                {
                    cand = long;
                    cand_phi = long_phi;
                    break;
                }
                t *= 0.5;
            }
        }
        let moved = (&cand - &u).amax();
        u = cand;
        phi = cand_phi;
        ev = evaluate(qp, eta, &d, &c, &u, &phi);
        trace.push(ev.value);
        if moved <= f64::EPSILON * (1.0 + u.amax()) {
            break;
        }
    }
    if !converged && iters > 0 {
        // refresh the decrement at the final iterate
        if let Some(chol) = ev.hessian.clone().cholesky() {
            let step = chol.solve(&(-&ev.gradient));
            decrement = (-ev.gradient.dot(&step) / eta).max(0.0).sqrt();
            converged = decrement <= cfg.newton_tol;
        }
    }
    if !converged && decrement <= STALL_DECREMENT {
        converged = true;
    }
    let jacobian = policy_jacobian(qp, eta, x0, &u)?;
    Ok(BarrierSolution {
        u_eta: u,
        phi,
        jacobian,
        newton_iters: iters,
        decrement,
        converged,
        value_trace: trace,
    })
}

/// First input block of the barrier solution at `x0`.
pub fn policy(qp: &CondensedQp, cfg: &BarrierConfig, x0: &Vector) -> Result<Vector> {
    let sol = solve_barrier(qp, cfg, x0, None)?;
    Ok(sol.first_input(qp))
}
