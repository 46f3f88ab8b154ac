//! Primal active-set method for small dense convex QPs
//! `min ½uᵀHu − cᵀu  s.t.  G u ≤ b` with `H ≻ 0`.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::lp;

/// Slack below which a row counts as violated when checking a start point.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct ActiveSetOptions {
    /// Zero selects `20 (m + n) + 100`.
    pub max_iters: usize,
    pub feasibility_tol: f64,
    /// Record the objective after every iteration.
    pub trace: bool,
}

impl Default for ActiveSetOptions {
    fn default() -> Self {
        Self {
            max_iters: 0,
            feasibility_tol: FEASIBILITY_TOL,
            trace: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ActiveSetResult {
    pub u: Vector,
    /// Working set at termination, ascending.
    pub working: Vec<usize>,
    /// Multipliers for every row, zero off the working set.
    pub multipliers: Vector,
    pub iterations: usize,
    pub objective: f64,
    pub trace: Vec<f64>,
}

fn objective(h: &Matrix, c: &Vector, u: &Vector) -> f64 {
    0.5 * u.dot(&(h * u)) - c.dot(u)
}

fn kkt_matrix(h: &Matrix, g: &Matrix, working: &[usize]) -> Matrix {
    let n = h.nrows();
    let k = working.len();
    let mut kkt = Matrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for (r, &i) in working.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = g[(i, j)];
            kkt[(j, n + r)] = g[(i, j)];
        }
    }
    kkt
}

fn split_solution(sol: Vector, n: usize) -> Option<(Vector, Vector)> {
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let k = sol.len() - n;
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

/// Solves the equality-constrained step `min ½pᵀHp + gradᵀp  s.t. G_W p = 0`.
fn eqp_step(h: &Matrix, g: &Matrix, working: &[usize], grad: &Vector) -> Option<(Vector, Vector)> {
    let n = h.nrows();
    let mut rhs = Vector::zeros(n + working.len());
    rhs.rows_mut(0, n).copy_from(&(-grad));
    split_solution(kkt_matrix(h, g, working).lu().solve(&rhs)?, n)
}

/// Minimizer on the face `G_W u = b_W`, solved from scratch so the working
/// rows hold to rounding rather than to accumulated step error.
fn face_minimizer(h: &Matrix, c: &Vector, g: &Matrix, b: &Vector, working: &[usize]) -> Option<(Vector, Vector)> {
    let n = h.nrows();
    let mut rhs = Vector::zeros(n + working.len());
    rhs.rows_mut(0, n).copy_from(c);
    for (r, &i) in working.iter().enumerate() {
        rhs[n + r] = b[i];
    }
    split_solution(kkt_matrix(h, g, working).lu().solve(&rhs)?, n)
}

/// Interior start: the origin if feasible, otherwise the Chebyshev center of
/// the rows that depend on `u`.
pub fn feasible_start(g: &Matrix, b: &Vector, tol: f64) -> Result<Vector> {
    let n = g.ncols();
    let norms: Vec<f64> = g.row_iter().map(|r| r.norm()).collect();
    for (i, &nrm) in norms.iter().enumerate() {
        if nrm == 0.0 && b[i] < -tol {
            return Err(Error::Infeasible(format!(
                "row {i} does not depend on the decision and has residual {:e}",
                b[i]
            )));
        }
    }
    if b.iter().zip(&norms).all(|(&bi, &nrm)| nrm == 0.0 || bi >= -tol) {
        return Ok(Vector::zeros(n));
    }
    let rows: Vec<usize> = (0..g.nrows()).filter(|&i| norms[i] > 0.0).collect();
    let sub_g = g.select_rows(&rows);
    let sub_b = Vector::from_iterator(rows.len(), rows.iter().map(|&i| b[i]));
    let (center, radius) = lp::chebyshev_center(&sub_g, &sub_b)?;
    if radius < -tol {
        return Err(Error::Infeasible(format!(
            "largest achievable minimum slack is {radius:e}"
        )));
    }
    Ok(center)
}

pub fn solve_active_set(
    h: &Matrix,
    c: &Vector,
    g: &Matrix,
    b: &Vector,
    start: Option<&Vector>,
    opts: &ActiveSetOptions,
) -> Result<ActiveSetResult> {
    let n = h.nrows();
    let m = g.nrows();
    if h.ncols() != n || c.len() != n || g.ncols() != n || b.len() != m {
        return Err(Error::Dimension("active-set QP shapes".into()));
    }
    let tol = opts.feasibility_tol;
    let max_iters = if opts.max_iters == 0 {
        20 * (m + n) + 100
    } else {
        opts.max_iters
    };
    let row_norms: Vec<f64> = g.row_iter().map(|r| r.norm()).collect();

    let mut u = match start {
        Some(s) if (b - g * s).iter().all(|&r| r >= -tol) => s.clone(),
        _ => feasible_start(g, b, tol)?,
    };

    // insertion order is kept so a degenerate KKT system drops the newest row
    let mut working: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    if opts.trace {
        trace.push(objective(h, c, &u));
    }
    let scale = 1.0 + c.amax();

    for iter in 1..=max_iters {
        let grad = h * &u - c;
        let mut sorted = working.clone();
        sorted.sort_unstable();
        let Some((p, mu)) = eqp_step(h, g, &sorted, &grad) else {
            if working.pop().is_none() {
                return Err(Error::Singular("active-set KKT system with empty working set"));
            }
            continue;
        };

        if p.amax() <= 1e-12 * (1.0 + u.amax()) {
            let dual_tol = 1e-10 * (scale + grad.amax());
            // most negative multiplier, smallest index on ties
            let mut leave: Option<(usize, f64)> = None;
            for (r, &i) in sorted.iter().enumerate() {
                if mu[r] < -dual_tol && leave.is_none_or(|(_, best)| mu[r] < best) {
                    leave = Some((i, mu[r]));
                }
            }
            match leave {
                None => {
                    let mut mu = mu;
                    if let Some((u_face, mu_face)) = face_minimizer(h, c, g, b, &sorted) {
                        let close = (&u_face - &u).amax() <= 1e-8 * (1.0 + u.amax());
                        let dual_ok = mu_face.iter().all(|&v| v >= -dual_tol);
                        let primal_ok = (b - g * &u_face).iter().all(|&r| r >= -tol);
                        if close && dual_ok && primal_ok {
                            u = u_face;
                            mu = mu_face;
                        }
                    }
                    let mut multipliers = Vector::zeros(m);
                    for (r, &i) in sorted.iter().enumerate() {
                        multipliers[i] = mu[r].max(0.0);
                    }
                    let obj = objective(h, c, &u);
                    return Ok(ActiveSetResult {
                        u,
                        working: sorted,
                        multipliers,
                        iterations: iter,
                        objective: obj,
                        trace,
                    });
                }
                Some((i, _)) => working.retain(|&w| w != i),
            }
        } else {
            let p_norm = p.norm();
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in 0..m {
                if row_norms[i] == 0.0 || working.contains(&i) {
                    continue;
                }
                let gp = g.row(i).dot(&p.transpose());
                if gp > 1e-12 * row_norms[i] * p_norm {
                    let slack = (b[i] - g.row(i).dot(&u.transpose())).max(0.0);
                    let step = slack / gp;
                    if step < alpha {
                        alpha = step;
                        blocking = Some(i);
                    }
                }
            }
            u += &p * alpha;
            if let Some(i) = blocking {
                working.push(i);
            }
        }
        if opts.trace {
            trace.push(objective(h, c, &u));
        }
    }
    Err(Error::CyclingGuard(max_iters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn box_clipping() {
        let h = dmatrix![1.0];
        let g = dmatrix![1.0; -1.0];
        let b = dvector![1.0, 1.0];
        let r = solve_active_set(&h, &dvector![0.5], &g, &b, None, &Default::default()).unwrap();
        assert!((r.u[0] - 0.5).abs() < 1e-14);
        assert!(r.working.is_empty());
        let r = solve_active_set(&h, &dvector![2.0], &g, &b, None, &Default::default()).unwrap();
        assert!((r.u[0] - 1.0).abs() < 1e-14);
        assert_eq!(r.working, vec![0]);
        assert!((r.multipliers[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_start_uses_phase_one() {
        // u ≥ 2 and u ≤ 3, minimize ½u²
        let h = dmatrix![1.0];
        let g = dmatrix![-1.0; 1.0];
        let b = dvector![-2.0, 3.0];
        let r = solve_active_set(&h, &dvector![0.0], &g, &b, None, &Default::default()).unwrap();
        assert!((r.u[0] - 2.0).abs() < 1e-12);
        let empty = dvector![-4.0, 3.0];
        assert!(matches!(
            solve_active_set(&h, &dvector![0.0], &g, &empty, None, &Default::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn decision_free_rows_are_feasibility_checks() {
        let h = dmatrix![1.0];
        let g = dmatrix![0.0; 1.0];
        assert!(matches!(
            solve_active_set(&h, &dvector![0.0], &g, &dvector![-1.0, 1.0], None, &Default::default()),
            Err(Error::Infeasible(_))
        ));
        let r = solve_active_set(&h, &dvector![5.0], &g, &dvector![0.0, 1.0], None, &Default::default())
            .unwrap();
        assert!((r.u[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn objective_trace_is_monotone() {
        let h = dmatrix![2.0, 0.5; 0.5, 1.0];
        let g = dmatrix![1.0, 1.0; -1.0, 0.0; 0.0, -1.0; 1.0, -2.0];
        let b = dvector![1.0, 0.0, 0.0, 0.5];
        let opts = ActiveSetOptions {
            trace: true,
            ..Default::default()
        };
        let r = solve_active_set(&h, &dvector![3.0, 4.0], &g, &b, None, &opts).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let grad = &h * &r.u - dvector![3.0, 4.0] + g.transpose() * &r.multipliers;
        assert!(grad.amax() < 1e-10);
    }
}
