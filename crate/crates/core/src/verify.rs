//! Invariant suite run by `verify`: every check reports how many inputs it
//! evaluated, the worst observed value against its threshold, and the first
//! violating input.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::barrier::{
    barrier_hessian_floor_check, bounds_report, convex_combination_jacobian, inner_product_check, sampled_sigmas,
    self_concordance_parameter, solve_barrier, BarrierConfig,
};
use crate::condense::{build_prediction_matrices, condense, geometry, residuals, CondensedQp, MpcSpec};
use crate::error::{Error, Result};
use crate::explicit::{enumerate_pieces, kkt_residual, piece_gains, solve_qp};
use crate::grid::StateGrid;
use crate::linalg::{self, Matrix, Vector};
use crate::rollout::{closed_loop, feasible_states, BarrierPolicy};
use crate::smoothing::{randomized_policy, NoiseDistribution, SmoothingSpec};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub evaluated: usize,
    pub skipped: usize,
    /// Worst observed value of the checked quantity; for pass/fail checks
    /// the signed distance past the limit, negative when it holds.
    pub worst: f64,
    pub threshold: f64,
    /// First violating input, or the reason the check did not run.
    pub witness: Option<String>,
}

impl Check {
    fn new(name: &'static str, threshold: f64) -> Self {
        Self {
            name,
            passed: true,
            evaluated: 0,
            skipped: 0,
            worst: f64::NEG_INFINITY,
            threshold,
            witness: None,
        }
    }

    /// Records `value`, which must not exceed the threshold.
    fn at_most(&mut self, value: f64, witness: impl FnOnce() -> String) {
        self.evaluated += 1;
        if value.is_nan() || value > self.worst {
            self.worst = value;
        }
        if !(value <= self.threshold) {
            self.fail(witness);
        }
    }

    /// Records a pass/fail outcome with an explicit margin.
    fn holds(&mut self, ok: bool, margin: f64, witness: impl FnOnce() -> String) {
        self.evaluated += 1;
        self.worst = self.worst.max(margin);
        if !ok {
            self.fail(witness);
        }
    }

    fn fail(&mut self, witness: impl FnOnce() -> String) {
        if self.passed {
            self.witness = Some(witness());
        }
        self.passed = false;
    }

    fn skip(&mut self, reason: impl FnOnce() -> String) {
        self.skipped += 1;
        if self.witness.is_none() && self.passed {
            self.witness = Some(reason());
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = if self.evaluated == 0 {
            "-".to_string()
        } else {
            format!("{:.4e}", self.worst)
        };
        write!(
            f,
            "{:<4} {:<40} n={:<5} skipped={:<4} worst={:<12} limit={:.4e}",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.evaluated,
            self.skipped,
            worst,
            self.threshold
        )?;
        if let Some(w) = &self.witness {
            write!(f, "  [{w}]")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub etas: Vec<f64>,
    /// Points per axis of the state grid over the bounding box of `X`.
    pub grid: usize,
    /// Points per axis of the grid used to sample active sets.
    pub census_grid: usize,
    pub random_instances: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            etas: vec![1e-3, 1e-1, 10.0],
            grid: 8,
            census_grid: 100,
            random_instances: 50,
            samples: 200,
            seed: 0,
        }
    }
}

fn fmt_vec(v: &Vector) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let rank = rng.random_range(1..=n);
    let b = Matrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose()
}

fn linalg_checks(opts: &VerifyOptions, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adj = Check::new("linalg.adjugate_identity", 1e-9);
    let mut det = Check::new("linalg.det_plus_diagonal", 1e-9);
    let mut inv = Check::new("linalg.inverse_decomposition", 1e-9);
    for k in 0..opts.random_instances {
        let n = rng.random_range(1..=6);
        let m = random_matrix(&mut rng, n);
        let d = linalg::det(&m)?;
        let lhs = linalg::adjugate(&m)? * &m;
        let err = linalg::max_abs_diff(&lhs, &(Matrix::identity(n, n) * d)) / (1.0 + d.abs());
        adj.at_most(err, || format!("instance {k}, n={n}"));

        let a = random_psd(&mut rng, n);
        let lambda = Vector::from_fn(n, |_, _| rng.random_range(0.1..2.0));
        let direct = &a + Matrix::from_diagonal(&lambda);
        let want = linalg::det(&direct)?;
        let got = linalg::det_plus_diagonal(&a, &lambda)?;
        det.at_most((got - want).abs() / want.abs().max(1e-300), || format!("instance {k}, n={n}"));

        let rec = linalg::decompose_inverse_plus_diagonal(&a, &lambda)?.reconstruct();
        let want = linalg::inverse(&direct)?;
        inv.at_most(
            linalg::max_abs_diff(&rec, &want) / want.amax().max(1e-300),
            || format!("instance {k}, n={n}"),
        );
    }
    out.extend([adj, det, inv]);
    Ok(())
}

fn condense_checks(spec: &MpcSpec, qp: &CondensedQp, opts: &VerifyOptions, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 1);
    let (a_hat, b_hat) = build_prediction_matrices(&spec.sys, spec.horizon)?;
    let (dx, du) = (spec.state_dim(), spec.input_dim());
    let mut pred = Check::new("condense.prediction_matches_simulation", 1e-12);
    for k in 0..opts.random_instances.min(20) {
        let x0 = Vector::from_fn(dx, |_, _| rng.random_range(-1.0..1.0));
        let u = Vector::from_fn(du * spec.horizon, |_, _| rng.random_range(-1.0..1.0));
        let stacked = &a_hat * &x0 + &b_hat * &u;
        let mut x = x0.clone();
        let mut err: f64 = 0.0;
        for t in 0..spec.horizon {
            x = spec.sys.step(&x, &u.rows(t * du, du).into_owned());
            err = err.max((&x - stacked.rows(t * dx, dx)).amax() / (1.0 + x.amax()));
        }
        pred.at_most(err, || format!("instance {k}"));
    }
    let mut origin = Check::new("condense.origin_strictly_feasible", 0.0);
    let phi = residuals(qp, &Vector::zeros(dx), &Vector::zeros(qp.n()))?;
    let min = phi.min();
    origin.holds(min > 0.0, -min, || format!("min residual {min:e}"));
    out.extend([pred, origin]);
    Ok(())
}

fn explicit_checks(qp: &CondensedQp, states: &[Vector], out: &mut Vec<Check>) -> Result<()> {
    let mut kkt = Check::new("explicit.kkt_residual", 1e-9);
    let mut affine = Check::new("explicit.piece_reproduces_solution", 1e-9);
    for x in states {
        let sol = solve_qp(qp, x)?;
        let scale = 1.0 + sol.u_star.amax();
        kkt.at_most(kkt_residual(qp, x, &sol.u_star, &sol.lambda).max() / scale, || {
            format!("x0={}", fmt_vec(x))
        });
        match piece_gains(qp, &sol.sigma) {
            Ok(piece) => affine.at_most((piece.eval(x) - &sol.u_star).amax() / scale, || {
                format!("x0={} sigma={}", fmt_vec(x), sol.sigma)
            }),
            Err(_) => affine.skip(|| "degenerate active sets skipped".into()),
        }
    }
    out.extend([kkt, affine]);
    Ok(())
}

fn fd_jacobian(qp: &CondensedQp, cfg: &BarrierConfig, x: &Vector, warm: &Vector, h: f64) -> Result<Matrix> {
    let dim = x.len();
    let mut fd = Matrix::zeros(qp.n(), dim);
    for j in 0..dim {
        let mut e = Vector::zeros(dim);
        e[j] = h;
        let plus = solve_barrier(qp, cfg, &(x + &e), Some(warm))?;
        let minus = solve_barrier(qp, cfg, &(x - &e), Some(warm))?;
        fd.set_column(j, &((plus.u_eta - minus.u_eta) / (2.0 * h)));
    }
    Ok(fd)
}

/// Central differences over decade steps `1e-3 … 1e-9`, keeping the
/// estimate at which consecutive steps agree best.
fn stable_fd_jacobian(qp: &CondensedQp, cfg: &BarrierConfig, x: &Vector, warm: &Vector) -> Result<Matrix> {
    let estimates: Vec<Matrix> = (3..=9)
        .filter_map(|k| fd_jacobian(qp, cfg, x, warm, 10f64.powi(-k)).ok())
        .collect();
    let best = estimates
        .windows(2)
        .min_by(|a, b| (&a[0] - &a[1]).norm().total_cmp(&(&b[0] - &b[1]).norm()))
        .map(|w| w[1].clone());
    best.ok_or_else(|| Error::Infeasible("finite-difference neighbours left the feasible set".into()))
}

fn barrier_checks(qp: &CondensedQp, states: &[Vector], opts: &VerifyOptions, out: &mut Vec<Check>) -> Result<()> {
    let census = enumerate_pieces(qp, &bounding_grid(qp, states, opts.census_grid)?);
    let sigmas = sampled_sigmas(qp, census.sigmas());
    let small = qp.n_decision_rows() <= linalg::ADJUGATE_LIMIT;

    let mut strict = Check::new("barrier.strict_feasibility", 0.0);
    let mut descent = Check::new("barrier.monotone_descent", 0.0);
    let mut jac = Check::new("barrier.jacobian_vs_finite_diff", 1e-4);
    let mut convex = Check::new("barrier.convex_combination", 1e-8);
    let mut floor = Check::new("barrier.residual_floor", 0.0);
    let mut hull = Check::new("barrier.jacobian_hull_bound", 0.0);
    let mut subopt = Check::new("barrier.suboptimality_bound", 0.0);
    let mut hess = Check::new("barrier.hessian_bound", 0.0);
    for &eta in &opts.etas {
        let cfg = BarrierConfig::new(eta)?;
        for (k, x) in states.iter().enumerate() {
            let at = || format!("eta={eta:e} x0={}", fmt_vec(x));
            let sol = solve_barrier(qp, &cfg, x, None)?;
            let min_res = sol.min_residual(qp);
            strict.holds(min_res > 0.0, -min_res, at);
            let rise = sol
                .value_trace
                .windows(2)
                .map(|w| (w[1] - w[0]) / (1.0 + w[0].abs()))
                .fold(0.0, f64::max);
            descent.holds(rise <= 1e-12, rise, at);

            let fd = stable_fd_jacobian(qp, &cfg, x, &sol.u_eta)?;
            let rel = (&fd - &sol.jacobian).norm() / sol.jacobian.norm().max(1e-12);
            jac.at_most(rel, at);

            if small {
                let cc = convex_combination_jacobian(qp, eta, x, &sol.u_eta)?;
                let err = (&cc.jacobian - &sol.jacobian).amax() / (1.0 + sol.jacobian.amax());
                let sum: f64 = cc.weights.values().sum();
                let bad_weight = cc.weights.values().any(|w| !(0.0..=1.0).contains(w));
                convex.at_most(err.max(if bad_weight { f64::INFINITY } else { (sum - 1.0).abs() }), at);
            } else {
                convex.skip(|| format!("{} decision rows exceed the subset limit", qp.n_decision_rows()));
            }

            let report = bounds_report(qp, &cfg, x, &sigmas, opts.seed.wrapping_add(k as u64))?;
            floor.holds(report.min_residual >= report.res_lb, report.res_lb - report.min_residual, at);
            hull.holds(
                report.jacobian_norm <= report.l + 1e-9,
                report.jacobian_norm - report.l,
                at,
            );
            let half = 0.5 * report.alpha * report.gap_actual * report.gap_actual;
            subopt.holds(half <= eta * report.nu, half - eta * report.nu, at);
            hess.holds(report.hess_actual <= report.hess_ub, report.hess_actual - report.hess_ub, at);
        }
    }

    let x0 = Vector::zeros(qp.state_dim());
    let geom = geometry(qp, &x0)?;
    let nu = self_concordance_parameter(qp, geom.r_out)?;
    let mut hfloor = Check::new("barrier.hessian_floor_sampled", 0.0);
    let c = barrier_hessian_floor_check(qp, &x0, geom.r_out, opts.samples, opts.seed)?;
    hfloor.evaluated = c.samples;
    hfloor.worst = c.threshold - c.extreme;
    if !c.passed() {
        hfloor.fail(|| format!("{} of {} samples below 1/(9R²)", c.violations, c.samples));
    }
    let mut inner = Check::new("barrier.inner_product_sampled", 0.0);
    let c = inner_product_check(qp, &x0, nu, opts.samples, opts.seed)?;
    inner.evaluated = c.samples;
    inner.worst = c.extreme - c.threshold;
    if !c.passed() {
        inner.fail(|| format!("{} of {} samples above nu", c.violations, c.samples));
    }
    out.extend([strict, descent, jac, convex, floor, hull, subopt, hess, hfloor, inner]);
    Ok(())
}

fn bounding_grid(qp: &CondensedQp, states: &[Vector], n: usize) -> Result<StateGrid> {
    let dim = qp.state_dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for x in states {
        for i in 0..dim {
            lo[i] = lo[i].min(x[i]);
            hi[i] = hi[i].max(x[i]);
        }
    }
    StateGrid::new(lo, hi, vec![n; dim])
}

fn smoothing_checks(spec: &MpcSpec, qp: &CondensedQp, states: &[Vector], opts: &VerifyOptions, out: &mut Vec<Check>) -> Result<()> {
    let mut det = Check::new("smoothing.deterministic", 0.0);
    let rs = SmoothingSpec::new(NoiseDistribution::Gaussian, 0.5, 64, opts.seed)?;
    for x in states.iter().take(5) {
        let a = randomized_policy(qp, &spec.x_set, &rs, x, None)?;
        let b = randomized_policy(qp, &spec.x_set, &rs, x, None)?;
        let diff = (&a.mean - &b.mean).amax();
        det.holds(a.mean == b.mean, diff, || format!("x0={}", fmt_vec(x)));
    }
    out.push(det);
    Ok(())
}

fn rollout_checks(spec: &MpcSpec, qp: &CondensedQp, states: &[Vector], opts: &VerifyOptions, out: &mut Vec<Check>) -> Result<()> {
    let mut replay = Check::new("rollout.replay_exact", 1e-12);
    let mut feasible = Check::new("rollout.barrier_no_violations", 0.0);
    let eta = opts.etas.first().copied().unwrap_or(1e-2);
    let policy = BarrierPolicy {
        qp,
        cfg: BarrierConfig::new(eta)?,
    };
    let mut nearest: Vec<&Vector> = states.iter().collect();
    nearest.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    for x in nearest.into_iter().take(10) {
        let traj = match closed_loop(spec, &policy, x, 20) {
            Ok(t) => t,
            Err(Error::Policy { step, source }) if matches!(*source, Error::Infeasible(_)) => {
                replay.skip(|| format!("problem lost feasibility at step {step} from x0={}", fmt_vec(x)));
                feasible.skip(|| format!("problem lost feasibility at step {step} from x0={}", fmt_vec(x)));
                continue;
            }
            Err(e) => return Err(e),
        };
        let scale = 1.0 + traj.states.iter().map(|s| s.amax()).fold(0.0, f64::max);
        replay.at_most(traj.replay_error(spec) / scale, || format!("x0={}", fmt_vec(x)));
        let v = traj.violations() + traj.exited as usize;
        feasible.holds(v == 0, v as f64, || format!("x0={}", fmt_vec(x)));
    }
    out.extend([replay, feasible]);
    Ok(())
}

/// Runs every check on `spec`. Errors are reserved for failures to evaluate
/// a check at all; violated invariants are reported in the returned list.
pub fn run_suite(spec: &MpcSpec, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let qp = condense(spec)?;
    let (lo, hi) = spec.x_set.bounding_box()?;
    let dim = spec.state_dim();
    let grid = StateGrid::new(lo.iter().copied().collect(), hi.iter().copied().collect(), vec![opts.grid; dim])?;
    let states = feasible_states(&qp, &grid, 1e-6);
    if states.is_empty() {
        return Err(Error::Empty("feasible grid states"));
    }
    let mut out = Vec::new();
    linalg_checks(opts, &mut out)?;
    condense_checks(spec, &qp, opts, &mut out)?;
    explicit_checks(&qp, &states, &mut out)?;
    barrier_checks(&qp, &states, opts, &mut out)?;
    smoothing_checks(spec, &qp, &states, opts, &mut out)?;
    rollout_checks(spec, &qp, &states, opts, &mut out)?;
    Ok(out)
}
