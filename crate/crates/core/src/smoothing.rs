//! Randomized smoothing of the exact MPC law,
//! `π_rs(x) = E_w[π_mpc(x + εw)]`, estimated by Monte Carlo.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condense::{CondensedQp, Polytope};
use crate::error::{Error, Result};
use crate::explicit::{solve_qp, PieceCache};
use crate::linalg::{Matrix, Vector};
use crate::par::*;
use crate::qp::{self, ActiveSetOptions};

/// Input weight of the projection QP, small enough to leave the state
/// projection unaffected while keeping the problem strictly convex.
const PROJECTION_INPUT_WEIGHT: f64 = 1e-8;
/// Projected states are pulled this fraction toward the origin.
const PROJECTION_SHRINK: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDistribution {
    Gaussian,
    UniformBox,
    UniformBall,
}

impl NoiseDistribution {
    /// One draw at unit scale.
    pub fn sample(&self, rng: &mut ChaCha8Rng, dim: usize) -> Vector {
        match self {
            Self::Gaussian => Vector::from_fn(dim, |_, _| rng.sample(StandardNormal)),
            Self::UniformBox => Vector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0)),
            Self::UniformBall => loop {
                let v = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let n = v.norm();
                if n > 0.0 {
                    let radius = rng.random::<f64>().powf(1.0 / dim as f64);
                    break v * (radius / n);
                }
            },
        }
    }

    /// Per-coordinate standard deviation at unit scale.
    pub fn coordinate_std(&self, dim: usize) -> f64 {
        match self {
            Self::Gaussian => 1.0,
            Self::UniformBox => (1.0f64 / 3.0).sqrt(),
            Self::UniformBall => (1.0 / (dim as f64 + 2.0)).sqrt(),
        }
    }
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::UniformBox => "uniform-box",
            Self::UniformBall => "uniform-ball",
        })
    }
}

impl FromStr for NoiseDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform-box" => Ok(Self::UniformBox),
            "uniform-ball" => Ok(Self::UniformBall),
            other => Err(Error::InvalidArgument(format!(
                "unknown distribution {other:?} (expected gaussian, uniform-box or uniform-ball)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub distribution: NoiseDistribution,
    pub epsilon: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl SmoothingSpec {
    pub fn new(distribution: NoiseDistribution, epsilon: f64, n_samples: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            distribution,
            epsilon,
            n_samples,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Noise of sample `index`. The stream depends on the seed and the index
    /// only, so evaluations at nearby states share their draws.
    pub fn noise(&self, index: usize, dim: usize) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        self.distribution.sample(&mut rng, dim) * self.epsilon
    }
}

#[derive(Clone, Debug)]
pub struct RandomizedEstimate {
    /// Monte Carlo mean of the first input.
    pub mean: Vector,
    /// Standard error of `mean`, per coordinate.
    pub stderr: Vector,
    /// Fraction of perturbed states outside the state set.
    pub outside_fraction: f64,
    /// Fraction of perturbed states projected onto the feasible set.
    pub projected_fraction: f64,
    /// Samples that could not be evaluated even after projection.
    pub failed: usize,
    pub n_samples: usize,
}

/// Exact MPC evaluated at a perturbed state, with a read-only piece cache.
struct Evaluator<'a> {
    qp: &'a CondensedQp,
    x_set: &'a Polytope,
    cache: Option<&'a PieceCache>,
}

struct SampleOutcome {
    u0: Option<Vector>,
    outside: bool,
    projected: bool,
}

impl Evaluator<'_> {
    fn first_input(&self, x: &Vector) -> Result<Vector> {
        let du = self.qp.input_dim();
        if let Some(piece) = self.cache.and_then(|c| c.lookup(x)) {
            return Ok(piece.eval(x).rows(0, du).into_owned());
        }
        Ok(solve_qp(self.qp, x)?.u_star.rows(0, du).into_owned())
    }

    fn eval(&self, x: &Vector) -> SampleOutcome {
        let outside = !self.x_set.contains(x, 0.0);
        if !outside {
            match self.first_input(x) {
                Ok(u) => {
                    return SampleOutcome {
                        u0: Some(u),
                        outside,
                        projected: false,
                    }
                }
                Err(Error::Infeasible(_)) => {}
                Err(_) => {
                    return SampleOutcome {
                        u0: None,
                        outside,
                        projected: false,
                    }
                }
            }
        }
        let u0 = project_feasible(self.qp, self.x_set, x)
            .and_then(|p| self.first_input(&p))
            .ok();
        SampleOutcome {
            u0,
            outside,
            projected: true,
        }
    }
}

/// Euclidean projection of `y` onto `{x ∈ X : ∃u, G u ≤ w + P x}`, pulled
/// slightly toward the origin.
pub fn project_feasible(qp: &CondensedQp, x_set: &Polytope, y: &Vector) -> Result<Vector> {
    let dx = qp.state_dim();
    let n = qp.n();
    let (m, k) = (qp.m(), x_set.n_rows());
    let mut h = Matrix::zeros(dx + n, dx + n);
    for i in 0..dx {
        h[(i, i)] = 1.0;
    }
    for i in dx..dx + n {
        h[(i, i)] = PROJECTION_INPUT_WEIGHT;
    }
    let mut c = Vector::zeros(dx + n);
    c.rows_mut(0, dx).copy_from(y);
    let mut g = Matrix::zeros(m + k, dx + n);
    g.view_mut((0, 0), (m, dx)).copy_from(&(-qp.p()));
    g.view_mut((0, dx), (m, n)).copy_from(qp.g());
    g.view_mut((m, 0), (k, dx)).copy_from(x_set.a());
    let mut b = Vector::zeros(m + k);
    b.rows_mut(0, m).copy_from(qp.w());
    b.rows_mut(m, k).copy_from(x_set.b());
    // the origin is feasible whenever w ≥ 0 and X contains it
    let origin_ok = b.iter().all(|&v| v >= 0.0);
    let zero = Vector::zeros(dx + n);
    let start = origin_ok.then_some(&zero);
    let res = qp::solve_active_set(&h, &c, &g, &b, start, &ActiveSetOptions::default())?;
    Ok(res.u.rows(0, dx).into_owned() * (1.0 - PROJECTION_SHRINK))
}

/// Monte Carlo estimate of the smoothed first input at `x0`.
pub fn randomized_policy(
    qp: &CondensedQp,
    x_set: &Polytope,
    spec: &SmoothingSpec,
    x0: &Vector,
    cache: Option<&PieceCache>,
) -> Result<RandomizedEstimate> {
    spec.validate()?;
    if x0.len() != qp.state_dim() || x_set.dim() != qp.state_dim() {
        return Err(Error::Dimension("state dimension mismatch".into()));
    }
    let ev = Evaluator { qp, x_set, cache };
    let dim = x0.len();
    let outcomes: Vec<SampleOutcome> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| ev.eval(&(x0 + spec.noise(i, dim))))
        .collect();
    let du = qp.input_dim();
    let mut sum = Vector::zeros(du);
    let mut sum_sq = Vector::zeros(du);
    let (mut used, mut outside, mut projected) = (0usize, 0usize, 0usize);
    for o in &outcomes {
        outside += o.outside as usize;
        projected += o.projected as usize;
        if let Some(u) = &o.u0 {
            used += 1;
            sum += u;
            sum_sq += u.component_mul(u);
        }
    }
    if used == 0 {
        return Err(Error::AllSamplesInfeasible(spec.n_samples));
    }
    let nf = used as f64;
    let mean = sum / nf;
    let stderr = if used > 1 {
        let var = (sum_sq - mean.component_mul(&mean) * nf) / (nf - 1.0);
        var.map(|v| (v.max(0.0) / nf).sqrt())
    } else {
        Vector::from_element(du, f64::INFINITY)
    };
    Ok(RandomizedEstimate {
        mean,
        stderr,
        outside_fraction: outside as f64 / spec.n_samples as f64,
        projected_fraction: projected as f64 / spec.n_samples as f64,
        failed: spec.n_samples - used,
        n_samples: spec.n_samples,
    })
}

/// Central difference of [`randomized_policy`] with common random numbers.
pub fn smoothed_jacobian(
    qp: &CondensedQp,
    x_set: &Polytope,
    spec: &SmoothingSpec,
    x0: &Vector,
    step: f64,
    cache: Option<&PieceCache>,
) -> Result<Matrix> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let dim = x0.len();
    let mut jac = Matrix::zeros(qp.input_dim(), dim);
    for j in 0..dim {
        let mut e = Vector::zeros(dim);
        e[j] = step;
        let plus = randomized_policy(qp, x_set, spec, &(x0 + &e), cache)?;
        let minus = randomized_policy(qp, x_set, spec, &(x0 - &e), cache)?;
        jac.set_column(j, &((plus.mean - minus.mean) / (2.0 * step)));
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::{condense, MpcSpec};
    use crate::explicit::piece_gains;
    use nalgebra::dvector;

    fn setup() -> (MpcSpec, CondensedQp) {
        let spec = MpcSpec::double_integrator();
        let qp = condense(&spec).unwrap();
        (spec, qp)
    }

    #[test]
    fn noise_is_keyed_by_seed_and_index() {
        let s = SmoothingSpec::new(NoiseDistribution::Gaussian, 1.0, 10, 42).unwrap();
        assert_eq!(s.noise(3, 2), s.noise(3, 2));
        assert_ne!(s.noise(3, 2), s.noise(4, 2));
        let t = SmoothingSpec { seed: 43, ..s.clone() };
        assert_ne!(s.noise(3, 2), t.noise(3, 2));
    }

    #[test]
    fn distributions_are_zero_mean_and_bounded() {
        for dist in [NoiseDistribution::Gaussian, NoiseDistribution::UniformBox, NoiseDistribution::UniformBall] {
            let s = SmoothingSpec::new(dist, 1.0, 1, 7).unwrap();
            let n = 20_000;
            let mut mean = Vector::zeros(2);
            for i in 0..n {
                let w = s.noise(i, 2);
                match dist {
                    NoiseDistribution::UniformBox => assert!(w.amax() <= 1.0),
                    NoiseDistribution::UniformBall => assert!(w.norm() <= 1.0),
                    NoiseDistribution::Gaussian => {}
                }
                mean += w;
            }
            mean /= n as f64;
            let limit = 4.0 * dist.coordinate_std(2) / (n as f64).sqrt();
            assert!(mean.amax() <= limit, "{dist}: {mean}");
        }
    }

    #[test]
    fn distribution_names_round_trip() {
        for d in [NoiseDistribution::Gaussian, NoiseDistribution::UniformBox, NoiseDistribution::UniformBall] {
            assert_eq!(d.to_string().parse::<NoiseDistribution>().unwrap(), d);
        }
        assert!("cauchy".parse::<NoiseDistribution>().is_err());
    }

    #[test]
    fn tiny_noise_recovers_exact_policy() {
        let (spec, qp) = setup();
        let x0 = dvector![-6.0, 2.0];
        let s = SmoothingSpec::new(NoiseDistribution::Gaussian, 1e-12, 16, 1).unwrap();
        let est = randomized_policy(&qp, &spec.x_set, &s, &x0, None).unwrap();
        let exact = solve_qp(&qp, &x0).unwrap().u_star[0];
        assert!((est.mean[0] - exact).abs() < 1e-9);
        assert_eq!(est.projected_fraction, 0.0);
    }

    #[test]
    fn affine_region_gives_piece_gain() {
        let (spec, qp) = setup();
        let x0 = dvector![0.3, -0.2];
        let sol = solve_qp(&qp, &x0).unwrap();
        let piece = piece_gains(&qp, &sol.sigma).unwrap();
        let s = SmoothingSpec::new(NoiseDistribution::UniformBall, 1e-3, 64, 5).unwrap();
        let jac = smoothed_jacobian(&qp, &spec.x_set, &s, &x0, 1e-4, None).unwrap();
        assert!((jac - piece.gain.rows(0, 1)).amax() < 1e-8);
        let est = randomized_policy(&qp, &spec.x_set, &s, &x0, None).unwrap();
        assert!((est.mean[0] - sol.u_star[0]).abs() <= 3.0 * est.stderr[0] + 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let (spec, qp) = setup();
        let s = SmoothingSpec::new(NoiseDistribution::Gaussian, 1.0, 200, 9).unwrap();
        let x0 = dvector![-8.0, 1.0];
        let a = randomized_policy(&qp, &spec.x_set, &s, &x0, None).unwrap();
        let b = randomized_policy(&qp, &spec.x_set, &s, &x0, None).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.stderr, b.stderr);
        assert!(a.projected_fraction > 0.0);
        assert!(a.outside_fraction <= a.projected_fraction);
    }

    #[test]
    fn projection_lands_in_feasible_set() {
        let (spec, qp) = setup();
        let p = project_feasible(&qp, &spec.x_set, &dvector![12.0, 9.0]).unwrap();
        assert!(spec.x_set.contains(&p, 0.0));
        assert!(solve_qp(&qp, &p).is_ok());
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(SmoothingSpec::new(NoiseDistribution::Gaussian, 0.0, 1, 0).is_err());
        assert!(SmoothingSpec::new(NoiseDistribution::Gaussian, 1.0, 0, 0).is_err());
    }
}
