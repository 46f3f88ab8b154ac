//! Condensed multiparametric QP for linear MPC.
//!
//! States are eliminated through the prediction matrices so the problem is
//! posed in the stacked input sequence `u = (u_0, …, u_{T-1})` alone:
//!
//! ```text
//! minimize ½uᵀHu − x₀ᵀFu   subject to   G u ≤ w + P x₀
//! ```
//!
//! Constraint rows are stacked per step `t` as the input rows for `u_t`
//! followed by the state rows for `x_{t+1}`, and every row that depends on `u`
//! is scaled to unit ℓ₂ norm (with `w` and `P` scaled alike).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::lp;

/// Rows whose decision coefficients are below this (relative) norm are
/// treated as independent of `u`.
const DECISION_ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!(
                "state map must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "input map must be {}xd_u with d_u ≥ 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("system matrices must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }
}

/// `{x : A x ≤ b}` with unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    a: Matrix,
    b: Vector,
}

impl Polytope {
    /// Normalizes rows and certifies nonemptiness with a Chebyshev LP.
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.nrows() != b.len() || a.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "polytope has {}x{} matrix and {} offsets",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        let mut a = a;
        let mut b = b;
        for i in 0..a.nrows() {
            let norm = a.row(i).norm();
            if norm == 0.0 || !norm.is_finite() || !b[i].is_finite() {
                return Err(Error::InvalidArgument(format!("polytope row {i} is zero or non-finite")));
            }
            a.row_mut(i).unscale_mut(norm);
            b[i] /= norm;
        }
        let (_, radius) = lp::chebyshev_center(&a, &b)?;
        if radius < -qp_tol() {
            return Err(Error::Empty("polytope"));
        }
        Ok(Self { a, b })
    }

    /// Axis-aligned box `lo ≤ x ≤ hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("box bounds differ in length".into()));
        }
        let d = lo.len();
        let mut a = Matrix::zeros(2 * d, d);
        let mut b = Vector::zeros(2 * d);
        for i in 0..d {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = hi[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo[i];
        }
        Self::new(a, b)
    }

    /// The whole space, with no rows.
    pub fn unconstrained(dim: usize) -> Result<Self> {
        Self::new(Matrix::zeros(0, dim), Vector::zeros(0))
    }

    /// `‖x‖_∞ ≤ radius`.
    pub fn inf_ball(dim: usize, radius: f64) -> Result<Self> {
        Self::from_box(&vec![-radius; dim], &vec![radius; dim])
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    /// `b − A x`.
    pub fn residuals(&self, x: &Vector) -> Vector {
        &self.b - &self.a * x
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        self.residuals(x).iter().all(|&r| r >= -tol)
    }

    /// Per-coordinate interval enclosure `(lo, hi)`.
    pub fn bounding_box(&self) -> Result<(Vector, Vector)> {
        let d = self.dim();
        let mut lo = Vector::zeros(d);
        let mut hi = Vector::zeros(d);
        for i in 0..d {
            let mut e = Vector::zeros(d);
            e[i] = 1.0;
            hi[i] = lp::maximize(&e, &self.a, &self.b)?.1;
            lo[i] = -lp::maximize(&(-e), &self.a, &self.b)?.1;
        }
        Ok((lo, hi))
    }
}

fn qp_tol() -> f64 {
    crate::qp::FEASIBILITY_TOL
}

fn check_spd(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Config(format!("{what} is not square")));
    }
    let scale = m.amax().max(1.0);
    if linalg::max_abs_diff(m, &m.transpose()) > 1e-12 * scale {
        return Err(Error::Config(format!("{what} is not symmetric")));
    }
    let min = linalg::sym_min_eigenvalue(m)?;
    if min <= 0.0 {
        return Err(Error::Config(format!(
            "{what} is not positive definite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// System, horizon, stage costs and constraint sets of a linear MPC.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcSpec {
    pub sys: LinearSystem,
    pub horizon: usize,
    /// `Q_1 … Q_T`.
    pub q: Vec<Matrix>,
    /// `R_0 … R_{T-1}`.
    pub r: Vec<Matrix>,
    pub x_set: Polytope,
    pub u_set: Polytope,
}

impl MpcSpec {
    pub fn new(
        sys: LinearSystem,
        horizon: usize,
        q: Vec<Matrix>,
        r: Vec<Matrix>,
        x_set: Polytope,
        u_set: Polytope,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let (dx, du) = (sys.state_dim(), sys.input_dim());
        if q.len() != horizon || r.len() != horizon {
            return Err(Error::Config(format!(
                "expected {horizon} stage costs, got {} state and {} input",
                q.len(),
                r.len()
            )));
        }
        for (t, qt) in q.iter().enumerate() {
            if qt.shape() != (dx, dx) {
                return Err(Error::Config(format!("Q[{t}] must be {dx}x{dx}")));
            }
            check_spd(qt, &format!("Q[{t}]"))?;
        }
        for (t, rt) in r.iter().enumerate() {
            if rt.shape() != (du, du) {
                return Err(Error::Config(format!("R[{t}] must be {du}x{du}")));
            }
            check_spd(rt, &format!("R[{t}]"))?;
        }
        if x_set.dim() != dx || u_set.dim() != du {
            return Err(Error::Config("constraint set dimensions do not match the system".into()));
        }
        Ok(Self {
            sys,
            horizon,
            q,
            r,
            x_set,
            u_set,
        })
    }

    /// Time-invariant costs broadcast over the horizon.
    pub fn time_invariant(
        sys: LinearSystem,
        horizon: usize,
        q: Matrix,
        r: Matrix,
        x_set: Polytope,
        u_set: Polytope,
    ) -> Result<Self> {
        Self::new(sys, horizon, vec![q; horizon], vec![r; horizon], x_set, u_set)
    }

    /// The double integrator `A = [[1,1],[0,1]]`, `B = [0;1]`, `Q = I`,
    /// `R = 0.01`, `T = 10`, `‖x‖_∞ ≤ 10`, `|u| ≤ 1`.
    pub fn double_integrator() -> Self {
        Self::double_integrator_with(10, Some(10.0), 1.0)
    }

    /// Double integrator with a chosen horizon, optional `‖x‖_∞` bound (no
    /// state constraints otherwise) and input bound.
    pub fn double_integrator_with(horizon: usize, state_bound: Option<f64>, input_bound: f64) -> Self {
        let sys = LinearSystem::new(
            Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .expect("valid system");
        let x_set = match state_bound {
            Some(b) => Polytope::inf_ball(2, b),
            None => Polytope::unconstrained(2),
        }
        .expect("valid state set");
        let u_set = Polytope::inf_ball(1, input_bound).expect("valid box");
        Self::time_invariant(
            sys,
            horizon,
            Matrix::identity(2, 2),
            Matrix::from_element(1, 1, 0.01),
            x_set,
            u_set,
        )
        .expect("valid spec")
    }

    pub fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.sys.input_dim()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(s)?;
        file.into_spec()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemFile::from_spec(self))?)
    }

    /// Direct evaluation of `Σ_{t=1}^T x_tᵀQ_t x_t + Σ_{t=0}^{T-1} u_tᵀR_t u_t`.
    pub fn stage_cost(&self, x0: &Vector, u: &Vector) -> f64 {
        let du = self.input_dim();
        let mut x = x0.clone();
        let mut cost = 0.0;
        for t in 0..self.horizon {
            let ut = u.rows(t * du, du).into_owned();
            cost += ut.dot(&(&self.r[t] * &ut));
            x = self.sys.step(&x, &ut);
            cost += x.dot(&(&self.q[t] * &x));
        }
        cost
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CostEntry {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
    Stages(Vec<Vec<Vec<f64>>>),
}

#[derive(Serialize, Deserialize)]
struct PolytopeFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: CostEntry,
    #[serde(rename = "R")]
    r: CostEntry,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "X")]
    x: PolytopeFile,
    #[serde(rename = "U")]
    u: PolytopeFile,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{what} must be a nonempty rectangular matrix")));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn expand_cost(entry: &CostEntry, horizon: usize, dim: usize, what: &str) -> Result<Vec<Matrix>> {
    match entry {
        CostEntry::Scalar(s) => Ok(vec![Matrix::identity(dim, dim) * *s; horizon]),
        CostEntry::Matrix(rows) => Ok(vec![matrix_from_rows(rows, what)?; horizon]),
        CostEntry::Stages(stages) => {
            if stages.len() != horizon {
                return Err(Error::Config(format!(
                    "{what} lists {} stages for horizon {horizon}",
                    stages.len()
                )));
            }
            stages.iter().map(|s| matrix_from_rows(s, what)).collect()
        }
    }
}

impl ProblemFile {
    fn into_spec(self) -> Result<MpcSpec> {
        let sys = LinearSystem::new(matrix_from_rows(&self.a, "A")?, matrix_from_rows(&self.b, "B")?)
            .map_err(|e| Error::Config(e.to_string()))?;
        let q = expand_cost(&self.q, self.t, sys.state_dim(), "Q")?;
        let r = expand_cost(&self.r, self.t, sys.input_dim(), "R")?;
        let poly = |p: &PolytopeFile, what: &str| -> Result<Polytope> {
            Polytope::new(matrix_from_rows(&p.a, what)?, Vector::from_vec(p.b.clone()))
                .map_err(|e| Error::Config(format!("{what}: {e}")))
        };
        let x_set = poly(&self.x, "X")?;
        let u_set = poly(&self.u, "U")?;
        MpcSpec::new(sys, self.t, q, r, x_set, u_set)
    }

    fn from_spec(spec: &MpcSpec) -> Self {
        let stages = |ms: &[Matrix]| {
            if ms.windows(2).all(|w| w[0] == w[1]) {
                CostEntry::Matrix(rows_from_matrix(&ms[0]))
            } else {
                CostEntry::Stages(ms.iter().map(rows_from_matrix).collect())
            }
        };
        Self {
            a: rows_from_matrix(&spec.sys.a),
            b: rows_from_matrix(&spec.sys.b),
            q: stages(&spec.q),
            r: stages(&spec.r),
            t: spec.horizon,
            x: PolytopeFile {
                a: rows_from_matrix(spec.x_set.a()),
                b: spec.x_set.b().iter().copied().collect(),
            },
            u: PolytopeFile {
                a: rows_from_matrix(spec.u_set.a()),
                b: spec.u_set.b().iter().copied().collect(),
            },
        }
    }
}

/// `(Â, B̂)` with `x_{1:T} = Â x₀ + B̂ u`.
pub fn build_prediction_matrices(sys: &LinearSystem, horizon: usize) -> Result<(Matrix, Matrix)> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let (dx, du) = (sys.state_dim(), sys.input_dim());
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(Matrix::identity(dx, dx));
    for k in 1..=horizon {
        powers.push(&sys.a * &powers[k - 1]);
    }
    let mut ahat = Matrix::zeros(horizon * dx, dx);
    let mut bhat = Matrix::zeros(horizon * dx, horizon * du);
    for i in 0..horizon {
        ahat.view_mut((i * dx, 0), (dx, dx)).copy_from(&powers[i + 1]);
        for j in 0..=i {
            let block = &powers[i - j] * &sys.b;
            bhat.view_mut((i * dx, j * du), (dx, du)).copy_from(&block);
        }
    }
    Ok((ahat, bhat))
}

fn block_diag(blocks: &[Matrix]) -> Matrix {
    let n: usize = blocks.iter().map(Matrix::nrows).sum();
    let mut out = Matrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), b.shape()).copy_from(b);
        off += b.nrows();
    }
    out
}

/// The multiparametric QP `min ½uᵀHu − x₀ᵀFu  s.t.  G u ≤ w + P x₀`.
#[derive(Clone, Debug)]
pub struct CondensedQp {
    h: Matrix,
    f: Matrix,
    g: Matrix,
    p: Matrix,
    w: Vector,
    prediction: Option<(Matrix, Matrix)>,
    input_dim: usize,
    h_inv: Matrix,
    ghg: Matrix,
    decision_rows: Vec<bool>,
}

impl CondensedQp {
    /// Assembles a QP from raw data; rows depending on `u` are normalized.
    pub fn from_parts(h: Matrix, f: Matrix, g: Matrix, p: Matrix, w: Vector) -> Result<Self> {
        Self::assemble(h, f, g, p, w, None, None)
    }

    fn assemble(
        h: Matrix,
        f: Matrix,
        mut g: Matrix,
        mut p: Matrix,
        mut w: Vector,
        prediction: Option<(Matrix, Matrix)>,
        input_dim: Option<usize>,
    ) -> Result<Self> {
        let n = h.nrows();
        let m = g.nrows();
        if h.ncols() != n || f.ncols() != n || g.ncols() != n || p.nrows() != m || w.len() != m {
            return Err(Error::Dimension(format!(
                "QP shapes: H {:?}, F {:?}, G {:?}, P {:?}, w {}",
                h.shape(),
                f.shape(),
                g.shape(),
                p.shape(),
                w.len()
            )));
        }
        if p.ncols() != f.nrows() {
            return Err(Error::Dimension("P and F disagree on the state dimension".into()));
        }
        let h = (&h + h.transpose()) * 0.5;
        let h_inv = linalg::spd_inverse(&h)?;
        let mut decision_rows = vec![false; m];
        for i in 0..m {
            let norm = g.row(i).norm();
            let scale = 1.0 + p.row(i).norm() + w[i].abs();
            if norm > DECISION_ROW_TOL * scale {
                decision_rows[i] = true;
                g.row_mut(i).unscale_mut(norm);
                p.row_mut(i).unscale_mut(norm);
                w[i] /= norm;
            } else {
                g.row_mut(i).fill(0.0);
            }
        }
        let ghg = &g * &h_inv * g.transpose();
        let ghg = (&ghg + ghg.transpose()) * 0.5;
        Ok(Self {
            input_dim: input_dim.unwrap_or(n),
            h,
            f,
            g,
            p,
            w,
            prediction,
            h_inv,
            ghg,
            decision_rows,
        })
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }
    pub fn f(&self) -> &Matrix {
        &self.f
    }
    pub fn g(&self) -> &Matrix {
        &self.g
    }
    pub fn p(&self) -> &Matrix {
        &self.p
    }
    pub fn w(&self) -> &Vector {
        &self.w
    }
    pub fn h_inv(&self) -> &Matrix {
        &self.h_inv
    }
    /// `G H⁻¹ Gᵀ`.
    pub fn ghg(&self) -> &Matrix {
        &self.ghg
    }
    /// `(Â, B̂)` when built by [`condense`].
    pub fn prediction(&self) -> Option<&(Matrix, Matrix)> {
        self.prediction.as_ref()
    }

    /// Number of constraint rows `m`.
    pub fn m(&self) -> usize {
        self.g.nrows()
    }
    /// Decision dimension `T·d_u`.
    pub fn n(&self) -> usize {
        self.h.nrows()
    }
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    /// Width of the first input block (the whole decision for raw QPs).
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Rows whose residual depends on `u`. The others only restrict `x₀`.
    pub fn decision_rows(&self) -> &[bool] {
        &self.decision_rows
    }

    pub fn n_decision_rows(&self) -> usize {
        self.decision_rows.iter().filter(|&&d| d).count()
    }

    /// `w + P x₀`.
    pub fn rhs(&self, x0: &Vector) -> Vector {
        &self.w + &self.p * x0
    }

    /// `½uᵀHu − x₀ᵀFu`.
    pub fn objective(&self, x0: &Vector, u: &Vector) -> f64 {
        0.5 * u.dot(&(&self.h * u)) - x0.dot(&(&self.f * u))
    }

    /// Linear term `Fᵀx₀`.
    pub fn linear_term(&self, x0: &Vector) -> Vector {
        self.f.transpose() * x0
    }

    /// `G H⁻¹ Fᵀ − P`.
    pub fn sensitivity_rhs(&self) -> Matrix {
        &self.g * &self.h_inv * self.f.transpose() - &self.p
    }

    fn check_dims(&self, x0: &Vector, u: &Vector) -> Result<()> {
        if x0.len() != self.state_dim() || u.len() != self.n() {
            return Err(Error::Dimension(format!(
                "expected x0 of length {} and u of length {}, got {} and {}",
                self.state_dim(),
                self.n(),
                x0.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

/// Builds the condensed QP of an MPC problem.
pub fn condense(spec: &MpcSpec) -> Result<CondensedQp> {
    let t_h = spec.horizon;
    let (dx, du) = (spec.state_dim(), spec.input_dim());
    let (ahat, bhat) = build_prediction_matrices(&spec.sys, t_h)?;
    let qbar = block_diag(&spec.q);
    let rbar = block_diag(&spec.r);
    let qb = &qbar * &bhat;
    let h = (&rbar + bhat.transpose() * &qb) * 2.0;
    let f = ahat.transpose() * &qb * -2.0;

    let (au, bu) = (spec.u_set.a(), spec.u_set.b());
    let (ax, bx) = (spec.x_set.a(), spec.x_set.b());
    let (ku, kx) = (au.nrows(), ax.nrows());
    let m = t_h * (ku + kx);
    let n = t_h * du;
    let mut g = Matrix::zeros(m, n);
    let mut p = Matrix::zeros(m, dx);
    let mut w = Vector::zeros(m);
    for t in 0..t_h {
        let base = t * (ku + kx);
        g.view_mut((base, t * du), (ku, du)).copy_from(au);
        w.rows_mut(base, ku).copy_from(bu);
        let brows = bhat.rows(t * dx, dx);
        let arows = ahat.rows(t * dx, dx);
        g.view_mut((base + ku, 0), (kx, n)).copy_from(&(ax * brows));
        p.view_mut((base + ku, 0), (kx, dx)).copy_from(&(-(ax * arows)));
        w.rows_mut(base + ku, kx).copy_from(bx);
    }
    CondensedQp::assemble(h, f, g, p, w, Some((ahat, bhat)), Some(du))
}

/// Constraint residuals `φ(x₀, u) = w + P x₀ − G u`, negative when violated.
pub fn residuals(qp: &CondensedQp, x0: &Vector, u: &Vector) -> Result<Vector> {
    qp.check_dims(x0, u)?;
    Ok(qp.rhs(x0) - &qp.g * u)
}

/// Geometry of the feasible polytope `{u : G u ≤ w + P x₀}` at a given `x₀`.
#[derive(Clone, Debug)]
pub struct QpGeometry {
    /// Radius of the largest inscribed ball.
    pub r: f64,
    /// Radius of an origin-centered ball containing the polytope.
    pub r_out: f64,
    /// Lipschitz constant of the objective over the polytope.
    pub l_v: f64,
    /// Strong convexity parameter `λ_min(H)`.
    pub alpha: f64,
    /// Chebyshev center.
    pub center: Vector,
    pub lower: Vector,
    pub upper: Vector,
}

/// Rows of the decision polytope at `x₀`, after checking the rows that do not
/// depend on `u`.
pub(crate) fn decision_polytope(qp: &CondensedQp, x0: &Vector) -> Result<(Matrix, Vector)> {
    if x0.len() != qp.state_dim() {
        return Err(Error::Dimension(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            qp.state_dim()
        )));
    }
    let rhs = qp.rhs(x0);
    let mut rows = Vec::new();
    for i in 0..qp.m() {
        if qp.decision_rows[i] {
            rows.push(i);
        } else if rhs[i] < -qp_tol() {
            return Err(Error::Infeasible(format!(
                "state-only constraint {i} violated by {:e}",
                -rhs[i]
            )));
        }
    }
    let a = qp.g.select_rows(&rows);
    let b = Vector::from_iterator(rows.len(), rows.iter().map(|&i| rhs[i]));
    Ok((a, b))
}

pub fn geometry(qp: &CondensedQp, x0: &Vector) -> Result<QpGeometry> {
    let (a, b) = decision_polytope(qp, x0)?;
    let (center, r) = lp::chebyshev_center(&a, &b)?;
    if r < -qp_tol() {
        return Err(Error::Infeasible(format!("x0 admits no feasible input sequence (slack {r:e})")));
    }
    if r <= 0.0 {
        return Err(Error::Infeasible("feasible input polytope has empty interior".into()));
    }
    if r >= lp::RADIUS_CAP {
        return Err(Error::Unbounded("feasible input polytope is unbounded".into()));
    }
    let n = qp.n();
    let mut lower = Vector::zeros(n);
    let mut upper = Vector::zeros(n);
    for i in 0..n {
        let mut e = Vector::zeros(n);
        e[i] = 1.0;
        upper[i] = lp::maximize(&e, &a, &b)?.1;
        lower[i] = -lp::maximize(&(-e), &a, &b)?.1;
    }
    let r_out = lower
        .iter()
        .zip(upper.iter())
        .map(|(l, u)| l.abs().max(u.abs()).powi(2))
        .sum::<f64>()
        .sqrt();
    let l_v = linalg::spectral_norm(&qp.h) * r_out + linalg::spectral_norm(&qp.f) * x0.norm();
    let alpha = qp.h.symmetric_eigenvalues().min();
    Ok(QpGeometry {
        r,
        r_out,
        l_v,
        alpha,
        center,
        lower,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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
    fn prediction_identity_system() {
        let sys = LinearSystem::new(Matrix::identity(2, 2), Matrix::identity(2, 2)).unwrap();
        let (ahat, bhat) = build_prediction_matrices(&sys, 2).unwrap();
        let i = Matrix::identity(2, 2);
        let z = Matrix::zeros(2, 2);
        let mut want_a = Matrix::zeros(4, 2);
        want_a.rows_mut(0, 2).copy_from(&i);
        want_a.rows_mut(2, 2).copy_from(&i);
        assert_eq!(ahat, want_a);
        let mut want_b = Matrix::zeros(4, 4);
        want_b.view_mut((0, 0), (2, 2)).copy_from(&i);
        want_b.view_mut((0, 2), (2, 2)).copy_from(&z);
        want_b.view_mut((2, 0), (2, 2)).copy_from(&i);
        want_b.view_mut((2, 2), (2, 2)).copy_from(&i);
        assert_eq!(bhat, want_b);
    }

    #[test]
    fn prediction_horizon_one() {
        let spec = MpcSpec::double_integrator();
        let (ahat, bhat) = build_prediction_matrices(&spec.sys, 1).unwrap();
        assert_eq!(ahat, spec.sys.a);
        assert_eq!(bhat, spec.sys.b);
    }

    #[test]
    fn prediction_matches_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (dx, du, t) = (3, 2, 3);
        let sys = LinearSystem::new(
            Matrix::from_fn(dx, dx, |_, _| rng.random_range(-1.0..1.0)),
            Matrix::from_fn(dx, du, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let (ahat, bhat) = build_prediction_matrices(&sys, t).unwrap();
        let x0 = Vector::from_fn(dx, |_, _| rng.random_range(-1.0..1.0));
        let u = Vector::from_fn(t * du, |_, _| rng.random_range(-1.0..1.0));
        let stacked = &ahat * &x0 + &bhat * &u;
        let mut x = x0.clone();
        for k in 0..t {
            x = sys.step(&x, &u.rows(k * du, du).into_owned());
            let err = (&x - stacked.rows(k * dx, dx)).amax();
            assert!(err <= 1e-12, "step {k}: {err}");
        }
    }

    #[test]
    fn double_integrator_has_sixty_rows() {
        let qp = condense(&MpcSpec::double_integrator()).unwrap();
        assert_eq!(qp.m(), 60);
        assert_eq!(qp.n(), 10);
        // x₁'s position does not depend on u₀
        assert_eq!(qp.n_decision_rows(), 58);
        assert!(qp.h.symmetric_eigenvalues().min() >= 2.0 * 0.01 - 1e-12);
    }

    #[test]
    fn horizon_one_residuals_at_origin() {
        let spec = MpcSpec::double_integrator_with(1, Some(10.0), 1.0);
        let qp = condense(&spec).unwrap();
        let phi = residuals(&qp, &Vector::zeros(2), &Vector::zeros(1)).unwrap();
        let mut want: Vec<f64> = spec.u_set.b().iter().copied().collect();
        want.extend(spec.x_set.b().iter());
        assert_eq!(phi.as_slice(), want.as_slice());
    }

    #[test]
    fn residuals_simple_box() {
        let qp = box_qp_1d();
        let phi = residuals(&qp, &dvector![0.0], &dvector![0.5]).unwrap();
        assert_eq!(phi.as_slice(), &[0.5, 1.5]);
        assert_eq!(residuals(&qp, &dvector![0.0], &dvector![0.0]).unwrap(), *qp.w());
        assert!(residuals(&qp, &dvector![0.0, 1.0], &dvector![0.0]).is_err());
    }

    #[test]
    fn boundary_residual_hand_rollout() {
        // x₀ = (10, 0); u₀ = 0 keeps x₁ = (10, 0), so x₁'s position row is tight.
        let spec = MpcSpec::double_integrator();
        let qp = condense(&spec).unwrap();
        let x0 = dvector![10.0, 0.0];
        let phi = residuals(&qp, &x0, &Vector::zeros(10)).unwrap();
        // step 0 rows: [u ≤ 1, −u ≤ 1, x₁ ≤ 10, −x₁ ≤ 10, v₁ ≤ 10, −v₁ ≤ 10]
        assert!(phi[2].abs() < 1e-12);
        assert!((phi[3] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn condensed_cost_matches_stage_cost() {
        let spec = MpcSpec::double_integrator();
        let qp = condense(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x0 = Vector::from_fn(2, |_, _| rng.random_range(-10.0..10.0));
            let u1 = Vector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let u2 = Vector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let d1 = qp.objective(&x0, &u1) - spec.stage_cost(&x0, &u1);
            let d2 = qp.objective(&x0, &u2) - spec.stage_cost(&x0, &u2);
            let scale = spec.stage_cost(&x0, &u1).abs().max(1.0);
            assert!((d1 - d2).abs() <= 1e-10 * scale, "{d1} vs {d2}");
        }
    }

    #[test]
    fn constraint_membership_matches_rollout() {
        let spec = MpcSpec::double_integrator();
        let qp = condense(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x0 = Vector::from_fn(2, |_, _| rng.random_range(-11.0..11.0));
            let u = Vector::from_fn(10, |_, _| rng.random_range(-1.2..1.2));
            let condensed_ok = residuals(&qp, &x0, &u).unwrap().iter().all(|&r| r >= -1e-12);
            let mut x = x0.clone();
            let mut rolled_ok = true;
            for t in 0..10 {
                let ut = u.rows(t, 1).into_owned();
                rolled_ok &= spec.u_set.contains(&ut, 1e-12);
                x = spec.sys.step(&x, &ut);
                rolled_ok &= spec.x_set.contains(&x, 1e-12);
            }
            assert_eq!(condensed_ok, rolled_ok);
        }
    }

    #[test]
    fn input_only_constraints() {
        let qp = condense(&MpcSpec::double_integrator_with(2, None, 1.0)).unwrap();
        assert_eq!(qp.m(), 4);
        assert_eq!(qp.p().amax(), 0.0);
        assert!(Polytope::unconstrained(2).unwrap().contains(&dvector![1e9, -1e9], 0.0));
    }

    #[test]
    fn normalization_preserves_feasible_set() {
        let raw = CondensedQp::from_parts(
            dmatrix![1.0, 0.0; 0.0, 1.0],
            dmatrix![1.0, 0.0],
            dmatrix![3.0, 4.0; 0.0, -2.0],
            dmatrix![5.0; 0.0],
            dvector![10.0, 4.0],
        )
        .unwrap();
        assert!((raw.g.row(0).norm() - 1.0).abs() < 1e-15);
        assert_eq!(raw.w.as_slice(), &[2.0, 2.0]);
        assert_eq!(raw.p[(0, 0)], 1.0);
    }

    #[test]
    fn geometry_of_boxes() {
        let g = geometry(&box_qp_1d(), &dvector![0.0]).unwrap();
        assert!((g.r - 1.0).abs() < 1e-9);
        assert!((g.r_out - 1.0).abs() < 1e-9);

        let square = CondensedQp::from_parts(
            Matrix::identity(2, 2),
            Matrix::zeros(1, 2),
            dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0],
            Matrix::zeros(4, 1),
            dvector![1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let g = geometry(&square, &dvector![0.0]).unwrap();
        assert!((g.r - 1.0).abs() < 1e-9);
        assert!((g.r_out - 2f64.sqrt()).abs() < 1e-9);
        assert!((g.alpha - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometry_rejects_infeasible_state() {
        let qp = condense(&MpcSpec::double_integrator()).unwrap();
        assert!(matches!(geometry(&qp, &dvector![10.0, 10.0]), Err(Error::Infeasible(_))));
    }

    #[test]
    fn json_round_trip() {
        let spec = MpcSpec::double_integrator();
        let text = spec.to_json_string().unwrap();
        let back = MpcSpec::from_json_str(&text).unwrap();
        assert_eq!(back, spec);

        let scalar_cost = r#"{"A":[[1,1],[0,1]],"B":[[0],[1]],"Q":[[1,0],[0,1]],"R":0.01,"T":10,
            "X":{"A":[[1,0],[-1,0],[0,1],[0,-1]],"b":[10,10,10,10]},"U":{"A":[[1],[-1]],"b":[1,1]}}"#;
        assert_eq!(MpcSpec::from_json_str(scalar_cost).unwrap(), spec);
    }

    #[test]
    fn json_rejects_bad_costs() {
        let bad = r#"{"A":[[1]],"B":[[1]],"Q":[[-1]],"R":[[1]],"T":2,
            "X":{"A":[[1],[-1]],"b":[1,1]},"U":{"A":[[1],[-1]],"b":[1,1]}}"#;
        assert!(matches!(MpcSpec::from_json_str(bad), Err(Error::Config(_))));
        let zero_horizon = bad.replace("\"T\":2", "\"T\":0").replace("[[-1]]", "[[1]]");
        assert!(MpcSpec::from_json_str(&zero_horizon).is_err());
    }
}
