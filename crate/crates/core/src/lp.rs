//! Small dense linear programs over `{u : A u ≤ b}` backed by `microlp`.

use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Cap on the inscribed radius so the Chebyshev LP stays bounded for
/// unbounded polyhedra.
pub const RADIUS_CAP: f64 = 1e6;

fn lp_error(e: microlp::Error) -> Error {
    match e {
        microlp::Error::Infeasible => Error::Infeasible("linear program has no feasible point".into()),
        microlp::Error::Unbounded => Error::Unbounded("linear program objective is unbounded".into()),
        other => Error::Lp(other.to_string()),
    }
}

fn add_rows(problem: &mut Problem, vars: &[Variable], a: &Matrix, b: &Vector, slack: Option<(Variable, &[f64])>) {
    for i in 0..a.nrows() {
        let mut expr: Vec<(Variable, f64)> = vars
            .iter()
            .enumerate()
            .filter(|&(j, _)| a[(i, j)] != 0.0)
            .map(|(j, &v)| (v, a[(i, j)]))
            .collect();
        if let Some((t, norms)) = slack {
            expr.push((t, norms[i]));
        }
        problem.add_constraint(expr.as_slice(), ComparisonOp::Le, b[i]);
    }
}

/// Center and radius of the largest ball inside `{u : A u ≤ b}`.
///
/// Solves `max t s.t. a_iᵀu + ‖a_i‖ t ≤ b_i` with `t` free, so a negative
/// radius is the smallest achievable worst-case violation and certifies
/// emptiness. The radius is capped at [`RADIUS_CAP`].
pub fn chebyshev_center(a: &Matrix, b: &Vector) -> Result<(Vector, f64)> {
    let n = a.ncols();
    if a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "constraint matrix has {} rows, rhs has {}",
            a.nrows(),
            b.len()
        )));
    }
    let norms: Vec<f64> = a.row_iter().map(|r| r.norm()).collect();
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<Variable> = (0..n)
        .map(|_| problem.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let t = problem.add_var(1.0, (f64::NEG_INFINITY, RADIUS_CAP));
    add_rows(&mut problem, &vars, a, b, Some((t, &norms)));
    let solution = problem
        .solve()
        .map_err(lp_error)?
        .into_solution()
        .map_err(|_| Error::Lp("solve interrupted".into()))?;
    let center = Vector::from_iterator(n, vars.iter().map(|&v| solution.var_value(v)));
    Ok((center, solution.var_value(t)))
}

/// `max cᵀu s.t. A u ≤ b`; returns the maximizer and optimal value.
pub fn maximize(c: &Vector, a: &Matrix, b: &Vector) -> Result<(Vector, f64)> {
    let n = a.ncols();
    if c.len() != n || a.nrows() != b.len() {
        return Err(Error::Dimension("linear program shapes".into()));
    }
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<Variable> = (0..n)
        .map(|j| problem.add_var(c[j], (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    add_rows(&mut problem, &vars, a, b, None);
    let solution = problem
        .solve()
        .map_err(lp_error)?
        .into_solution()
        .map_err(|_| Error::Lp("solve interrupted".into()))?;
    let u = Vector::from_iterator(n, vars.iter().map(|&v| solution.var_value(v)));
    Ok((u, solution.objective()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn chebyshev_of_square() {
        let a = dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0];
        let b = dvector![1.0, 1.0, 2.0, 2.0];
        let (c, r) = chebyshev_center(&a, &b).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
        assert!(c[0].abs() < 1e-9);
        assert!(c[1].abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn chebyshev_certifies_empty() {
        let a = dmatrix![1.0; -1.0];
        let b = dvector![-1.0, -1.0];
        let (_, r) = chebyshev_center(&a, &b).unwrap();
        assert!(r < 0.0);
        assert!((r + 1.0).abs() < 1e-9);
    }

    #[test]
    fn maximize_over_triangle() {
        let a = dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 1.0];
        let b = dvector![0.0, 0.0, 1.0];
        let (u, v) = maximize(&dvector![2.0, 1.0], &a, &b).unwrap();
        assert!((v - 2.0).abs() < 1e-9);
        assert!((u[0] - 1.0).abs() < 1e-9);
        assert!(matches!(
            maximize(&dvector![-1.0, -1.0], &a, &b).map(|_| ()),
            Ok(())
        ));
        let open = dmatrix![-1.0, 0.0];
        assert!(matches!(
            maximize(&dvector![1.0, 0.0], &open, &dvector![0.0]),
            Err(Error::Unbounded(_))
        ));
    }
}
