//! Quantitative bounds on the barrier solution and sampling checks of the
//! barrier properties they rest on.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{decision_residuals, recentering_vector, solve_barrier, BarrierConfig, BarrierSolution};
use crate::condense::{decision_polytope, geometry, CondensedQp, QpGeometry};
use crate::error::{Error, Result};
use crate::explicit::{piece_gains, solve_qp};
use crate::linalg::{self, ActiveSet, Matrix, Vector};
use crate::lp;

/// Directions used to estimate the Hessian tensor norm.
pub const HESSIAN_DIRECTIONS: usize = 32;
/// Finite-difference step of the Hessian estimate.
pub const HESSIAN_STEP: f64 = 1e-5;

/// Enumerated pieces together with every set of at most two rows that
/// depend on `u` and have nonsingular `[GH⁻¹Gᵀ]_σ`.
pub fn sampled_sigmas<'a>(qp: &CondensedQp, pieces: impl IntoIterator<Item = &'a ActiveSet>) -> Vec<ActiveSet> {
    let rows: Vec<usize> = (0..qp.m()).filter(|&i| qp.decision_rows()[i]).collect();
    let mut out: BTreeSet<ActiveSet> = pieces.into_iter().cloned().collect();
    out.insert(ActiveSet::empty(qp.m()));
    let ghg = qp.ghg();
    for (a, &i) in rows.iter().enumerate() {
        if ghg[(i, i)] > 0.0 {
            out.insert(ActiveSet::from_indices(qp.m(), &[i]).expect("row in range"));
        }
        for &j in &rows[a + 1..] {
            let sub = linalg::principal_submatrix(ghg, &ActiveSet::from_indices(qp.m(), &[i, j]).expect("rows in range"))
                .expect("matching length");
            let det = sub[(0, 0)] * sub[(1, 1)] - sub[(0, 1)] * sub[(1, 0)];
            if !linalg::psd_det_is_zero(det, &sub) {
                out.insert(ActiveSet::from_indices(qp.m(), &[i, j]).expect("rows in range"));
            }
        }
    }
    out.into_iter().collect()
}

/// Largest gain norms over a set of active sets.
#[derive(Clone, Debug)]
pub struct GainBounds {
    /// `max_σ ‖K_σ‖₂`.
    pub l: f64,
    /// `max_σ ‖2H⁻¹Gᵀ[GH⁻¹Gᵀ]_σ⁻¹‖₂`.
    pub c: f64,
    pub l_argmax: ActiveSet,
    /// Sets skipped because `[GH⁻¹Gᵀ]_σ` is singular.
    pub degenerate: usize,
}

pub fn gain_bounds(qp: &CondensedQp, sigmas: &[ActiveSet]) -> Result<GainBounds> {
    if sigmas.is_empty() {
        return Err(Error::Empty("active-set sample"));
    }
    let two_hinv_gt = qp.h_inv() * qp.g().transpose() * 2.0;
    let mut best: Option<GainBounds> = None;
    let mut degenerate = 0;
    for sigma in sigmas {
        let piece = match piece_gains(qp, sigma) {
            Ok(p) => p,
            Err(Error::DegenerateActiveSet(_)) => {
                degenerate += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let l = linalg::spectral_norm(&piece.gain);
        let c = linalg::spectral_norm(&(&two_hinv_gt * linalg::padded_inverse(qp.ghg(), sigma)?));
        match &mut best {
            None => {
                best = Some(GainBounds {
                    l,
                    c,
                    l_argmax: sigma.clone(),
                    degenerate: 0,
                })
            }
            Some(b) => {
                if l > b.l {
                    b.l = l;
                    b.l_argmax = sigma.clone();
                }
                b.c = b.c.max(c);
            }
        }
    }
    let mut best = best.ok_or(Error::Empty("nondegenerate active set"))?;
    best.degenerate = degenerate;
    Ok(best)
}

/// `L = max_σ ‖K_σ‖₂` over the given sets.
pub fn jacobian_norm_bound(qp: &CondensedQp, sigmas: &[ActiveSet]) -> Result<f64> {
    Ok(gain_bounds(qp, sigmas)?.l)
}

/// `ν = 20 (m + R²‖d‖²)` with `m` the number of barrier terms.
pub fn self_concordance_parameter(qp: &CondensedQp, r_out: f64) -> Result<f64> {
    let d = recentering_vector(qp)?;
    Ok(20.0 * (qp.n_decision_rows() as f64 + r_out * r_out * d.norm_squared()))
}

/// `min{η/2, rη²/(150(νη² + R²(L_V² + 1)))}`.
pub fn residual_floor(eta: f64, geom: &QpGeometry, nu: f64) -> f64 {
    let second = geom.r * eta * eta
        / (150.0 * (nu * eta * eta + geom.r_out * geom.r_out * (geom.l_v * geom.l_v + 1.0)));
    (eta / 2.0).min(second)
}

/// Lower bound on every residual of the barrier solution at the state the
/// geometry was computed for.
pub fn residual_lower_bound(qp: &CondensedQp, eta: f64, geom: &QpGeometry) -> Result<f64> {
    let nu = self_concordance_parameter(qp, geom.r_out)?;
    Ok(residual_floor(eta, geom, nu))
}

#[derive(Clone, Debug)]
pub struct SuboptimalityReport {
    /// `‖u_η − u*‖`.
    pub gap_actual: f64,
    /// `√(2ην/α)`.
    pub gap_bound: f64,
    /// `½α‖u_η − u*‖²`.
    pub half_alpha_gap_sq: f64,
    /// `ην`.
    pub eta_nu: f64,
}

impl SuboptimalityReport {
    pub fn holds(&self) -> bool {
        self.half_alpha_gap_sq <= self.eta_nu && self.gap_actual <= self.gap_bound
    }
}

pub fn suboptimality_from(eta: f64, nu: f64, alpha: f64, u_eta: &Vector, u_star: &Vector) -> SuboptimalityReport {
    let gap = (u_eta - u_star).norm();
    SuboptimalityReport {
        gap_actual: gap,
        gap_bound: (2.0 * eta * nu / alpha).sqrt(),
        half_alpha_gap_sq: 0.5 * alpha * gap * gap,
        eta_nu: eta * nu,
    }
}

pub fn suboptimality_report(qp: &CondensedQp, cfg: &BarrierConfig, x0: &Vector) -> Result<SuboptimalityReport> {
    let geom = geometry(qp, x0)?;
    let nu = self_concordance_parameter(qp, geom.r_out)?;
    let sol = solve_barrier(qp, cfg, x0, None)?;
    let star = solve_qp(qp, x0)?;
    Ok(suboptimality_from(cfg.eta, nu, geom.alpha, &sol.u_eta, &star.u_star))
}

/// Largest `‖DJ(x₀)[y]‖₂` over unit directions, by central differences of the
/// analytic Jacobian.
pub fn hessian_tensor_estimate(
    qp: &CondensedQp,
    cfg: &BarrierConfig,
    x0: &Vector,
    center: &BarrierSolution,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = x0.len();
    let mut worst: f64 = 0.0;
    for _ in 0..HESSIAN_DIRECTIONS {
        let y = random_unit(&mut rng, dim);
        let plus = solve_barrier(qp, cfg, &(x0 + &y * HESSIAN_STEP), Some(&center.u_eta))?;
        let minus = solve_barrier(qp, cfg, &(x0 - &y * HESSIAN_STEP), Some(&center.u_eta))?;
        let dj = (&plus.jacobian - &minus.jacobian) / (2.0 * HESSIAN_STEP);
        worst = worst.max(linalg::spectral_norm(&dj));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct HessianReport {
    pub hess_actual: f64,
    /// `C/res_lb · (‖P‖ + ‖G‖L)²`.
    pub hess_bound: f64,
    pub c: f64,
    pub l: f64,
    pub res_lb: f64,
}

pub fn hessian_bound(qp: &CondensedQp, gains: &GainBounds, res_lb: f64) -> f64 {
    let lever = linalg::spectral_norm(qp.p()) + linalg::spectral_norm(qp.g()) * gains.l;
    gains.c / res_lb * lever * lever
}

pub fn hessian_norm_report(
    qp: &CondensedQp,
    cfg: &BarrierConfig,
    x0: &Vector,
    sigmas: &[ActiveSet],
    seed: u64,
) -> Result<HessianReport> {
    let geom = geometry(qp, x0)?;
    let res_lb = residual_lower_bound(qp, cfg.eta, &geom)?;
    let gains = gain_bounds(qp, sigmas)?;
    let center = solve_barrier(qp, cfg, x0, None)?;
    Ok(HessianReport {
        hess_actual: hessian_tensor_estimate(qp, cfg, x0, &center, seed)?,
        hess_bound: hessian_bound(qp, &gains, res_lb),
        c: gains.c,
        l: gains.l,
        res_lb,
    })
}

/// Outcome of a sampled inequality check.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingCheck {
    pub samples: usize,
    pub violations: usize,
    /// Largest sampled left-hand side for upper-bound checks, smallest for
    /// lower-bound checks.
    pub extreme: f64,
    pub threshold: f64,
}

impl SamplingCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
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

/// Step interval `[lo, hi]` keeping `a(u + t·dir) ≤ b`.
fn chord(a: &Matrix, b: &Vector, u: &Vector, dir: &Vector) -> (f64, f64) {
    let slack = b - a * u;
    let rate = a * dir;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (s, r) in slack.iter().zip(rate.iter()) {
        if *r > 0.0 {
            hi = hi.min(s / r);
        } else if *r < 0.0 {
            lo = lo.max(s / r);
        }
    }
    (lo, hi)
}

/// Hit-and-run samples from the interior of `{u : a u ≤ b}`, started at the
/// Chebyshev center.
pub fn hit_and_run(a: &Matrix, b: &Vector, n: usize, seed: u64) -> Result<Vec<Vector>> {
    let (mut u, r) = lp::chebyshev_center(a, b)?;
    if r <= 0.0 {
        return Err(Error::Infeasible("polytope has empty interior".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thin = 5;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        for _ in 0..thin {
            let dir = random_unit(&mut rng, u.len());
            let (lo, hi) = chord(a, b, &u, &dir);
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::Unbounded("polytope is unbounded".into()));
            }
            let t = lo + (hi - lo) * rng.random_range(1e-9..1.0 - 1e-9);
            u += dir * t;
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// Checks `∇F(u)ᵀ(y − u) ≤ ν` for the recentered barrier
/// `F(u) = −Σ log φᵢ + dᵀu` at interior `u` and boundary points `y`.
pub fn inner_product_check(qp: &CondensedQp, x0: &Vector, nu: f64, n: usize, seed: u64) -> Result<SamplingCheck> {
    let (a, b) = decision_polytope(qp, x0)?;
    let d = recentering_vector(qp)?;
    let points = hit_and_run(&a, &b, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut check = SamplingCheck {
        samples: n,
        violations: 0,
        extreme: f64::NEG_INFINITY,
        threshold: nu,
    };
    for u in points {
        let slack = &b - &a * &u;
        let grad = a.tr_mul(&slack.map(|s| 1.0 / s)) + &d;
        let dir = random_unit(&mut rng, u.len());
        let (_, hi) = chord(&a, &b, &u, &dir);
        let y = &u + dir * hi;
        let value = grad.dot(&(y - &u));
        check.extreme = check.extreme.max(value);
        if value > nu {
            check.violations += 1;
        }
    }
    Ok(check)
}

/// Checks `λ_min(Σ gᵢgᵢᵀ/φᵢ²) ≥ 1/(9R²)` at interior sample points.
pub fn barrier_hessian_floor_check(
    qp: &CondensedQp,
    x0: &Vector,
    r_out: f64,
    n: usize,
    seed: u64,
) -> Result<SamplingCheck> {
    let (a, b) = decision_polytope(qp, x0)?;
    let floor = 1.0 / (9.0 * r_out * r_out);
    let mut check = SamplingCheck {
        samples: n,
        violations: 0,
        extreme: f64::INFINITY,
        threshold: floor,
    };
    for u in hit_and_run(&a, &b, n, seed)? {
        let slack = &b - &a * &u;
        let mut scaled = a.clone();
        for (k, s) in slack.iter().enumerate() {
            scaled.row_mut(k).unscale_mut(*s);
        }
        let min = (scaled.transpose() * &scaled).symmetric_eigenvalues().min();
        check.extreme = check.extreme.min(min);
        if min < floor {
            check.violations += 1;
        }
    }
    Ok(check)
}

#[derive(Clone, Debug)]
pub struct BoundsReport {
    pub eta: f64,
    pub r: f64,
    pub r_out: f64,
    pub l_v: f64,
    pub alpha: f64,
    pub nu: f64,
    pub res_lb: f64,
    pub subopt_ub: f64,
    pub l: f64,
    pub c: f64,
    pub hess_ub: f64,
    pub min_residual: f64,
    pub gap_actual: f64,
    pub jacobian_norm: f64,
    pub hess_actual: f64,
}

impl BoundsReport {
    /// `(key, value)` pairs in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("eta", self.eta),
            ("r", self.r),
            ("R_out", self.r_out),
            ("L_V", self.l_v),
            ("alpha", self.alpha),
            ("nu", self.nu),
            ("res_lb", self.res_lb),
            ("subopt_ub", self.subopt_ub),
            ("L", self.l),
            ("C", self.c),
            ("hess_ub", self.hess_ub),
            ("min_residual", self.min_residual),
            ("gap_actual", self.gap_actual),
            ("jacobian_norm", self.jacobian_norm),
            ("hess_actual", self.hess_actual),
        ]
    }

    /// Names of the bounds the observed values violate.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.min_residual < self.res_lb {
            out.push("residual floor");
        }
        if self.gap_actual > self.subopt_ub {
            out.push("suboptimality");
        }
        if self.jacobian_norm > self.l + 1e-9 {
            out.push("jacobian hull");
        }
        if self.hess_actual > self.hess_ub {
            out.push("hessian");
        }
        out
    }
}

/// Evaluates every bound at `(η, x₀)` alongside the observed quantities.
pub fn bounds_report(
    qp: &CondensedQp,
    cfg: &BarrierConfig,
    x0: &Vector,
    sigmas: &[ActiveSet],
    seed: u64,
) -> Result<BoundsReport> {
    let geom = geometry(qp, x0)?;
    let nu = self_concordance_parameter(qp, geom.r_out)?;
    let res_lb = residual_floor(cfg.eta, &geom, nu);
    let gains = gain_bounds(qp, sigmas)?;
    let sol = solve_barrier(qp, cfg, x0, None)?;
    let star = solve_qp(qp, x0)?;
    let sub = suboptimality_from(cfg.eta, nu, geom.alpha, &sol.u_eta, &star.u_star);
    Ok(BoundsReport {
        eta: cfg.eta,
        r: geom.r,
        r_out: geom.r_out,
        l_v: geom.l_v,
        alpha: geom.alpha,
        nu,
        res_lb,
        subopt_ub: sub.gap_bound,
        l: gains.l,
        c: gains.c,
        hess_ub: hessian_bound(qp, &gains, res_lb),
        min_residual: decision_residuals(qp, &sol.phi).fold(f64::INFINITY, f64::min),
        gap_actual: sub.gap_actual,
        jacobian_norm: linalg::spectral_norm(&sol.jacobian),
        hess_actual: hessian_tensor_estimate(qp, cfg, x0, &sol, seed)?,
    })
}
