//! Closed-loop simulation, empirical stability and smoothness estimates, and
//! dataset export.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::barrier::{solve_barrier, BarrierConfig};
use crate::condense::{CondensedQp, MpcSpec, Polytope};
use crate::error::{Error, Result};
use crate::explicit::{piece_gains, solve_qp, PieceCache};
use crate::grid::StateGrid;
use crate::linalg::{self, Matrix, Vector};
use crate::lp;
use crate::par::*;
use crate::smoothing::{randomized_policy, smoothed_jacobian, SmoothingSpec};

/// Slack allowed when flagging constraint violations along a trajectory.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Action {
    /// First input `u₀`.
    pub u: Vector,
    /// `∂u₀/∂x`, when the policy provides it.
    pub jacobian: Option<Matrix>,
    /// Full input sequence, used to warm-start the next step.
    pub plan: Option<Vector>,
}

pub trait Policy: Sync {
    fn tag(&self) -> String;

    fn act(&self, x: &Vector, warm: Option<&Vector>) -> Result<Action>;

    fn jacobian(&self, x: &Vector, warm: Option<&Vector>) -> Result<Matrix> {
        self.act(x, warm)?
            .jacobian
            .ok_or_else(|| Error::InvalidArgument(format!("policy {} has no Jacobian here", self.tag())))
    }
}

pub struct BarrierPolicy<'a> {
    pub qp: &'a CondensedQp,
    pub cfg: BarrierConfig,
}

impl Policy for BarrierPolicy<'_> {
    fn tag(&self) -> String {
        format!("barrier(eta={:e})", self.cfg.eta)
    }

    fn act(&self, x: &Vector, warm: Option<&Vector>) -> Result<Action> {
        let sol = solve_barrier(self.qp, &self.cfg, x, warm)?;
        if !sol.converged {
            return Err(Error::NotConverged {
                iterations: sol.newton_iters,
                decrement: sol.decrement,
            });
        }
        let du = self.qp.input_dim();
        Ok(Action {
            u: sol.first_input(self.qp),
            jacobian: Some(sol.jacobian.rows(0, du).into_owned()),
            plan: Some(sol.u_eta),
        })
    }
}

/// The exact MPC law, optionally served from a read-only piece cache.
pub struct ExplicitPolicy<'a> {
    pub qp: &'a CondensedQp,
    pub cache: Option<&'a PieceCache>,
}

impl Policy for ExplicitPolicy<'_> {
    fn tag(&self) -> String {
        "explicit".into()
    }

    fn act(&self, x: &Vector, _warm: Option<&Vector>) -> Result<Action> {
        let du = self.qp.input_dim();
        if let Some(piece) = self.cache.and_then(|c| c.lookup(x)) {
            let plan = piece.eval(x);
            return Ok(Action {
                u: plan.rows(0, du).into_owned(),
                jacobian: Some(piece.gain.rows(0, du).into_owned()),
                plan: Some(plan),
            });
        }
        let sol = solve_qp(self.qp, x)?;
        let jacobian = piece_gains(self.qp, &sol.sigma)
            .ok()
            .map(|p| p.gain.rows(0, du).into_owned());
        Ok(Action {
            u: sol.u_star.rows(0, du).into_owned(),
            jacobian,
            plan: Some(sol.u_star),
        })
    }
}

pub struct RandomizedPolicy<'a> {
    pub qp: &'a CondensedQp,
    pub x_set: &'a Polytope,
    pub spec: SmoothingSpec,
    pub cache: Option<&'a PieceCache>,
    /// Finite-difference step of the Jacobian estimate.
    pub step: f64,
    /// Estimate the Jacobian on every action.
    pub with_jacobian: bool,
}

impl Policy for RandomizedPolicy<'_> {
    fn tag(&self) -> String {
        format!("randomized({}, eps={:e})", self.spec.distribution, self.spec.epsilon)
    }

    fn act(&self, x: &Vector, _warm: Option<&Vector>) -> Result<Action> {
        let est = randomized_policy(self.qp, self.x_set, &self.spec, x, self.cache)?;
        let jacobian = if self.with_jacobian {
            Some(self.jacobian(x, None)?)
        } else {
            None
        };
        Ok(Action {
            u: est.mean,
            jacobian,
            plan: None,
        })
    }

    fn jacobian(&self, x: &Vector, _warm: Option<&Vector>) -> Result<Matrix> {
        smoothed_jacobian(self.qp, self.x_set, &self.spec, x, self.step, self.cache)
    }
}

/// `u = K x`.
pub struct LinearPolicy {
    pub gain: Matrix,
}

impl Policy for LinearPolicy {
    fn tag(&self) -> String {
        "linear".into()
    }

    fn act(&self, x: &Vector, _warm: Option<&Vector>) -> Result<Action> {
        Ok(Action {
            u: &self.gain * x,
            jacobian: Some(self.gain.clone()),
            plan: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `x_0 … x_K`.
    pub states: Vec<Vector>,
    /// `u_0 … u_{K-1}`.
    pub inputs: Vec<Vector>,
    pub jacobians: Vec<Option<Matrix>>,
    /// Whether `u_t ∈ U` and `x_{t+1} ∈ X`.
    pub feasible: Vec<bool>,
    pub policy_tag: String,
    /// The rollout stopped early because the state left `X`.
    pub exited: bool,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn violations(&self) -> usize {
        self.feasible.iter().filter(|f| !**f).count()
    }

    /// Largest deviation between recorded states and a replay of the inputs.
    pub fn replay_error(&self, spec: &MpcSpec) -> f64 {
        let mut x = self.states[0].clone();
        let mut worst: f64 = 0.0;
        for (t, u) in self.inputs.iter().enumerate() {
            x = spec.sys.step(&x, u);
            worst = worst.max((&x - &self.states[t + 1]).amax());
        }
        worst
    }
}

/// Shifts a plan by one stage, repeating the last block.
pub fn shift_plan(plan: &Vector, du: usize) -> Vector {
    let n = plan.len();
    let mut out = Vector::zeros(n);
    if n <= du {
        return plan.clone();
    }
    out.rows_mut(0, n - du).copy_from(&plan.rows(du, n - du));
    out.rows_mut(n - du, du).copy_from(&plan.rows(n - du, du));
    out
}

/// Runs the closed loop `x_{t+1} = A x_t + B π(x_t)` for `steps` steps.
pub fn closed_loop(spec: &MpcSpec, policy: &dyn Policy, x0: &Vector, steps: usize) -> Result<Trajectory> {
    if !spec.x_set.contains(x0, VIOLATION_TOL) {
        return Err(Error::InvalidArgument("initial state lies outside the state set".into()));
    }
    let du = spec.input_dim();
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(steps),
        jacobians: Vec::with_capacity(steps),
        feasible: Vec::with_capacity(steps),
        policy_tag: policy.tag(),
        exited: false,
    };
    let mut warm: Option<Vector> = None;
    let mut x = x0.clone();
    for t in 0..steps {
        let action = policy.act(&x, warm.as_ref()).map_err(|e| Error::Policy {
            step: t,
            source: Box::new(e),
        })?;
        let next = spec.sys.step(&x, &action.u);
        let ok = spec.u_set.contains(&action.u, VIOLATION_TOL) && spec.x_set.contains(&next, VIOLATION_TOL);
        warm = action.plan.as_ref().map(|p| shift_plan(p, du));
        traj.inputs.push(action.u);
        traj.jacobians.push(action.jacobian);
        traj.feasible.push(ok);
        traj.states.push(next.clone());
        x = next;
        if !spec.x_set.contains(&x, VIOLATION_TOL) {
            traj.exited = true;
            break;
        }
    }
    Ok(traj)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let v = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Empirical incremental gain `max_t ‖x_t − x̄_t‖ / max_{k<t} ‖Δ_k‖` under
/// additive state disturbances of norm `level`.
pub fn iss_estimate(
    spec: &MpcSpec,
    policy: &dyn Policy,
    x0: &Vector,
    level: f64,
    n_rollouts: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if level == 0.0 || n_rollouts == 0 || steps == 0 {
        return Ok(0.0);
    }
    if !(level > 0.0) {
        return Err(Error::InvalidArgument("perturbation level must be nonnegative".into()));
    }
    let nominal = closed_loop(spec, policy, x0, steps)?;
    if nominal.exited {
        return Err(Error::Infeasible("nominal rollout left the state set".into()));
    }
    let du = spec.input_dim();
    let gains: Vec<Result<f64>> = (0..n_rollouts)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut x = x0.clone();
            let mut warm: Option<Vector> = None;
            let mut worst: f64 = 0.0;
            for t in 0..steps {
                let action = policy.act(&x, warm.as_ref()).map_err(|e| Error::Policy {
                    step: t,
                    source: Box::new(e),
                })?;
                warm = action.plan.as_ref().map(|p| shift_plan(p, du));
                let delta = random_unit(&mut rng, x.len()) * level;
                x = spec.sys.step(&x, &action.u) + delta;
                worst = worst.max((&x - &nominal.states[t + 1]).norm() / level);
            }
            Ok(worst)
        })
        .collect();
    let mut gamma: f64 = 0.0;
    for g in gains {
        gamma = gamma.max(g?);
    }
    Ok(gamma)
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothnessEstimate {
    pub parameter: f64,
    /// Largest Jacobian norm over the states.
    pub l0: f64,
    /// Largest directional Jacobian difference quotient over the states.
    pub l1: f64,
    pub n_failures: usize,
    pub n_states: usize,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    /// Random unit directions per state for the Jacobian difference.
    pub directions: usize,
    /// Difference step.
    pub step: f64,
    pub seed: u64,
}

impl SweepOptions {
    /// Step `1e-4` times the grid extent.
    pub fn for_grid(grid: &StateGrid, directions: usize, seed: u64) -> Self {
        Self {
            directions,
            step: 1e-4 * grid.extent(),
            seed,
        }
    }
}

/// Grid points whose input polytope has an inscribed ball of at least
/// `margin` and whose state-only rows have at least that much slack.
pub fn feasible_states(qp: &CondensedQp, grid: &StateGrid, margin: f64) -> Vec<Vector> {
    with_margin(qp, (0..grid.len()).map(|i| grid.point(i)).collect(), margin)
}

fn with_margin(qp: &CondensedQp, states: Vec<Vector>, margin: f64) -> Vec<Vector> {
    let keep: Vec<Option<Vector>> = states
        .into_par_iter()
        .map(|x| {
            let rhs = qp.rhs(&x);
            let state_slack = (0..qp.m())
                .filter(|&i| !qp.decision_rows()[i])
                .map(|i| rhs[i])
                .fold(f64::INFINITY, f64::min);
            if state_slack < margin {
                return None;
            }
            let (a, b) = crate::condense::decision_polytope(qp, &x).ok()?;
            let (_, r) = lp::chebyshev_center(&a, &b).ok()?;
            (r >= margin).then_some(x)
        })
        .collect();
    keep.into_iter().flatten().collect()
}

/// Feasible grid points plus piece-boundary points, all with inner radius at
/// least `margin`. Curvature of the smoothed laws concentrates near piece
/// boundaries, which a plain grid rarely hits.
pub fn sweep_states(qp: &CondensedQp, grid: &StateGrid, margin: f64) -> Vec<Vector> {
    let mut states = feasible_states(qp, grid, margin);
    states.extend(with_margin(qp, boundary_states(qp, grid, BISECTIONS), margin));
    states
}

/// Bisection steps used to place piece-boundary points.
pub const BISECTIONS: usize = 40;

/// Points where the explicit law switches pieces, found by bisecting every
/// grid edge whose endpoints are feasible and carry different active sets.
pub fn boundary_states(qp: &CondensedQp, grid: &StateGrid, bisections: usize) -> Vec<Vector> {
    let sigmas: Vec<Option<crate::linalg::ActiveSet>> = (0..grid.len())
        .into_par_iter()
        .map(|i| solve_qp(qp, &grid.point(i)).ok().map(|s| s.sigma))
        .collect();
    let dim = grid.dim();
    let mut edges = Vec::new();
    let mut stride = 1;
    for axis in (0..dim).rev() {
        let n = grid.counts[axis];
        for i in 0..grid.len() {
            if (i / stride) % n + 1 == n {
                continue;
            }
            let j = i + stride;
            if let (Some(a), Some(b)) = (&sigmas[i], &sigmas[j]) {
                if a != b {
                    edges.push((i, j));
                }
            }
        }
        stride *= n;
    }
    let found: Vec<Option<Vector>> = edges
        .par_iter()
        .map(|&(i, j)| {
            let (mut lo, mut hi) = (grid.point(i), grid.point(j));
            let at_lo = sigmas[i].clone()?;
            for _ in 0..bisections {
                let mid = (&lo + &hi) * 0.5;
                match solve_qp(qp, &mid) {
                    Ok(s) if s.sigma == at_lo => lo = mid,
                    Ok(_) => hi = mid,
                    Err(_) => return None,
                }
            }
            Some((lo + hi) * 0.5)
        })
        .collect();
    found.into_iter().flatten().collect()
}

struct PointSmoothness {
    l0: f64,
    l1: f64,
}

fn point_smoothness(policy: &dyn Policy, x: &Vector, index: usize, opts: &SweepOptions) -> Result<PointSmoothness> {
    let action = policy.act(x, None)?;
    let j0 = match action.jacobian {
        Some(j) => j,
        None => policy.jacobian(x, None)?,
    };
    let warm = action.plan.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let mut l1: f64 = 0.0;
    for _ in 0..opts.directions {
        let y = random_unit(&mut rng, x.len());
        let plus = policy.jacobian(&(x + &y * opts.step), warm)?;
        let minus = policy.jacobian(&(x - &y * opts.step), warm)?;
        l1 = l1.max(linalg::spectral_norm(&(plus - minus)) / (2.0 * opts.step));
    }
    Ok(PointSmoothness {
        l0: linalg::spectral_norm(&j0),
        l1,
    })
}

/// `L₀` and `L₁` estimates of one policy over a set of states.
pub fn smoothness_at(parameter: f64, policy: &dyn Policy, states: &[Vector], opts: &SweepOptions) -> SmoothnessEstimate {
    let results: Vec<Result<PointSmoothness>> = (0..states.len())
        .into_par_iter()
        .map(|i| point_smoothness(policy, &states[i], i, opts))
        .collect();
    let mut est = SmoothnessEstimate {
        parameter,
        l0: 0.0,
        l1: 0.0,
        n_failures: 0,
        n_states: states.len(),
        step: opts.step,
    };
    for r in results {
        match r {
            Ok(p) => {
                est.l0 = est.l0.max(p.l0);
                est.l1 = est.l1.max(p.l1);
            }
            Err(_) => est.n_failures += 1,
        }
    }
    est
}

/// Smoothness estimates across a family of policies indexed by a parameter.
pub fn smoothness_sweep<P: Policy>(
    parameters: &[f64],
    make: impl Fn(f64) -> Result<P>,
    states: &[Vector],
    opts: &SweepOptions,
) -> Result<Vec<SmoothnessEstimate>> {
    if parameters.is_empty() || states.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    parameters
        .iter()
        .map(|&p| Ok(smoothness_at(p, &make(p)?, states, opts)))
        .collect()
}

/// `parameter,L0,L1,n_failures`.
pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SmoothnessEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "L0", "L1", "n_failures"])?;
    for r in rows {
        w.write_record([fmt_f64(r.parameter), fmt_f64(r.l0), fmt_f64(r.l1), r.n_failures.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn jacobian_column(i: usize, j: usize, du: usize, dx: usize) -> String {
    if du <= 10 && dx <= 10 {
        format!("J_{i}{j}")
    } else {
        format!("J_{i}_{j}")
    }
}

pub fn dataset_header(dx: usize, du: usize) -> Vec<String> {
    let mut h = vec!["traj_id".to_string(), "t".to_string()];
    h.extend((0..dx).map(|i| format!("x_{i}")));
    h.extend((0..du).map(|i| format!("u_{i}")));
    for i in 0..du {
        for j in 0..dx {
            h.push(jacobian_column(i, j, du, dx));
        }
    }
    h
}

/// One row per step: `traj_id, t, x, u, J` with `J` row-major and `NaN`
/// where the policy gave no Jacobian.
pub fn export_dataset(trajectories: &[Trajectory], path: impl AsRef<Path>) -> Result<usize> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trajectories to export".into()))?;
    let dx = first.states[0].len();
    let du = first
        .inputs
        .first()
        .map(|u| u.len())
        .ok_or_else(|| Error::InvalidArgument("trajectory has no steps".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset_header(dx, du))?;
    let mut rows = 0;
    for (id, traj) in trajectories.iter().enumerate() {
        for (t, u) in traj.inputs.iter().enumerate() {
            let x = &traj.states[t];
            if x.len() != dx || u.len() != du {
                return Err(Error::Dimension(format!("trajectory {id} step {t} has inconsistent sizes")));
            }
            let mut rec = vec![id.to_string(), t.to_string()];
            rec.extend(x.iter().map(|v| fmt_f64(*v)));
            rec.extend(u.iter().map(|v| fmt_f64(*v)));
            match &traj.jacobians[t] {
                Some(j) if j.shape() == (du, dx) => {
                    for i in 0..du {
                        for k in 0..dx {
                            rec.push(fmt_f64(j[(i, k)]));
                        }
                    }
                }
                Some(_) => {
                    return Err(Error::Dimension(format!("trajectory {id} step {t} has a misshapen Jacobian")))
                }
                None => rec.extend(std::iter::repeat_n(fmt_f64(f64::NAN), du * dx)),
            }
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRow {
    pub traj_id: usize,
    pub t: usize,
    pub x: Vector,
    pub u: Vector,
    pub jacobian: Matrix,
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let dx = header.iter().filter(|h| h.starts_with("x_")).count();
    let du = header.iter().filter(|h| h.starts_with("u_")).count();
    if header.len() != 2 + dx + du + dx * du || dx == 0 || du == 0 {
        return Err(Error::Dataset(format!("unexpected header with {} columns", header.len())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| Error::Dataset(format!("column {k}: {e}")))
        };
        let int = |k: usize| -> Result<usize> {
            rec[k]
                .parse::<usize>()
                .map_err(|e| Error::Dataset(format!("column {k}: {e}")))
        };
        let x = Vector::from_iterator(dx, (0..dx).map(|i| num(2 + i)).collect::<Result<Vec<_>>>()?);
        let u = Vector::from_iterator(du, (0..du).map(|i| num(2 + dx + i)).collect::<Result<Vec<_>>>()?);
        let base = 2 + dx + du;
        let vals = (0..du * dx).map(|k| num(base + k)).collect::<Result<Vec<_>>>()?;
        rows.push(DatasetRow {
            traj_id: int(0)?,
            t: int(1)?,
            x,
            u,
            jacobian: Matrix::from_row_slice(du, dx, &vals),
        });
    }
    Ok(rows)
}

pub fn write_metadata(path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

/// Uniform draws from `scale · bbox(X)` kept when they lie in `X` and pass
/// `accept`.
pub fn sample_initial_states(
    x_set: &Polytope,
    n: usize,
    scale: f64,
    seed: u64,
    accept: impl Fn(&Vector) -> bool,
) -> Result<Vec<Vector>> {
    let (lo, hi) = x_set.bounding_box()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let max_tries = 1000 * n.max(1);
    for _ in 0..max_tries {
        if out.len() == n {
            break;
        }
        let x = Vector::from_fn(lo.len(), |i, _| scale * rng.random_range(lo[i]..=hi[i]));
        if x_set.contains(&x, 0.0) && accept(&x) {
            out.push(x);
        }
    }
    if out.len() < n {
        return Err(Error::Infeasible(format!(
            "only {} of {n} initial states accepted",
            out.len()
        )));
    }
    Ok(out)
}
