mod common;

use barrier_mpc::barrier::BarrierConfig;
use barrier_mpc::rollout::{
    closed_loop, export_dataset, iss_estimate, read_dataset, sample_initial_states, BarrierPolicy, LinearPolicy,
    Trajectory,
};
use barrier_mpc::smoothing::{randomized_policy, NoiseDistribution, SmoothingSpec};
use barrier_mpc::{condense, eval_explicit, solve_qp, Matrix, MpcSpec, PieceCache, StateGrid};
use nalgebra::{dmatrix, dvector};

fn warmed_cache(qp: &barrier_mpc::CondensedQp) -> PieceCache {
    let cache = PieceCache::new();
    for x in StateGrid::square(2, 10.0, 121).unwrap().points() {
        let _ = eval_explicit(qp, &x, &cache);
    }
    cache
}

#[test]
fn vanishing_noise_recovers_the_exact_law() {
    let spec = MpcSpec::double_integrator();
    let qp = condense(&spec).unwrap();
    for x in [dvector![-6.0, 2.0], dvector![2.0, -1.0], dvector![0.5, 0.5]] {
        let exact = solve_qp(&qp, &x).unwrap().u_star[0];
        for dist in [NoiseDistribution::Gaussian, NoiseDistribution::UniformBall] {
            let s = SmoothingSpec::new(dist, 1e-9, 50, 3).unwrap();
            let est = randomized_policy(&qp, &spec.x_set, &s, &x, None).unwrap();
            assert!((est.mean[0] - exact).abs() <= 1e-6, "x={x} {dist}");
            assert_eq!(est.projected_fraction, 0.0);
        }
    }
}

#[test]
fn monte_carlo_estimates_are_self_consistent() {
    let spec = MpcSpec::double_integrator();
    let qp = condense(&spec).unwrap();
    let cache = warmed_cache(&qp);
    let x = dvector![-3.0, 1.0];
    let small = SmoothingSpec::new(NoiseDistribution::Gaussian, 0.5, 10_000, 11).unwrap();
    let large = SmoothingSpec { n_samples: 1_000_000, seed: 12, ..small.clone() };
    let a = randomized_policy(&qp, &spec.x_set, &small, &x, Some(&cache)).unwrap();
    let b = randomized_policy(&qp, &spec.x_set, &large, &x, Some(&cache)).unwrap();
    assert!(a.stderr[0] > 0.0);
    assert!((a.mean[0] - b.mean[0]).abs() <= 4.0 * a.stderr[0], "{} vs {} ± {}", a.mean[0], b.mean[0], a.stderr[0]);
}

#[test]
fn doubling_samples_halves_the_variance() {
    let spec = MpcSpec::double_integrator();
    let qp = condense(&spec).unwrap();
    let cache = warmed_cache(&qp);
    let x = dvector![-3.0, 1.0];
    let base = SmoothingSpec::new(NoiseDistribution::UniformBox, 1.0, 20_000, 5).unwrap();
    let a = randomized_policy(&qp, &spec.x_set, &base, &x, Some(&cache)).unwrap();
    let doubled = SmoothingSpec { n_samples: 40_000, ..base };
    let b = randomized_policy(&qp, &spec.x_set, &doubled, &x, Some(&cache)).unwrap();
    let ratio = (b.stderr[0] / a.stderr[0]).powi(2);
    assert!((ratio - 0.5).abs() <= 0.05, "variance ratio {ratio}");
}

#[test]
fn barrier_loop_converges_to_the_origin() {
    let spec = MpcSpec::double_integrator();
    let qp = condense(&spec).unwrap();
    let policy = BarrierPolicy { qp: &qp, cfg: BarrierConfig::new(1e-2).unwrap() };
    let x0 = dvector![-6.0, 2.0];
    let traj = closed_loop(&spec, &policy, &x0, 30).unwrap();
    assert!(!traj.exited);
    assert_eq!(traj.violations(), 0);
    assert!(traj.replay_error(&spec) == 0.0);
    assert!(traj.states.last().unwrap().norm() <= 0.1 * x0.norm());
}

#[test]
fn linear_loop_gain_is_below_the_impulse_response_sum() {
    let spec = MpcSpec::double_integrator();
    let gain = dmatrix![-0.5, -1.0];
    let a_cl: Matrix = &spec.sys.a + &spec.sys.b * &gain;
    let steps = 25;
    // x_t − x̄_t = Σ_k A_cl^{t−1−k} Δ_k
    let mut power = Matrix::identity(2, 2);
    let mut bound = 0.0;
    for _ in 0..steps {
        bound += power.clone().svd(false, false).singular_values.max();
        power = &a_cl * power;
    }
    let policy = LinearPolicy { gain };
    for level in [1e-3, 1e-1] {
        let gamma = iss_estimate(&spec, &policy, &dvector![1.0, 0.0], level, 64, steps, 9).unwrap();
        assert!(gamma > 0.0 && gamma <= bound + 1e-12, "{gamma} vs {bound}");
    }
    assert_eq!(iss_estimate(&spec, &policy, &dvector![1.0, 0.0], 0.0, 64, steps, 9).unwrap(), 0.0);
}

#[test]
fn barrier_gain_is_stable_across_seeds() {
    let spec = MpcSpec::double_integrator();
    let qp = condense(&spec).unwrap();
    let policy = BarrierPolicy { qp: &qp, cfg: BarrierConfig::new(1e-2).unwrap() };
    let x0 = dvector![-3.0, 1.0];
    let gains: Vec<f64> = (0..20)
        .map(|seed| iss_estimate(&spec, &policy, &x0, 1e-3, 5, 15, seed).unwrap())
        .collect();
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let var = gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (gains.len() - 1) as f64;
    assert!(mean > 0.0);
    assert!(var.sqrt() / mean <= 0.5, "cv {}", var.sqrt() / mean);
}

fn dataset(spec: &MpcSpec, policy: &BarrierPolicy) -> Vec<Trajectory> {
    let x0s = sample_initial_states(&spec.x_set, 50, 0.5, 21, |x| solve_qp(policy.qp, x).is_ok()).unwrap();
    x0s.iter().map(|x| closed_loop(spec, policy, x, 20).unwrap()).collect()
}

#[test]
fn dataset_export_is_complete_and_deterministic() {
    let spec = MpcSpec::double_integrator();
    let qp = condense(&spec).unwrap();
    let policy = BarrierPolicy { qp: &qp, cfg: BarrierConfig::new(1e-2).unwrap() };
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let trajs = dataset(&spec, &policy);
    assert!(trajs.iter().all(|t| !t.exited));
    assert_eq!(export_dataset(&trajs, &p1).unwrap(), 1000);
    assert_eq!(export_dataset(&dataset(&spec, &policy), &p2).unwrap(), 1000);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let rows = read_dataset(&p1).unwrap();
    assert_eq!(rows.len(), 1000);
    let first = &rows[0];
    assert_eq!((first.traj_id, first.t), (0, 0));
    assert_eq!(first.x, trajs[0].states[0]);
    assert_eq!(Some(&first.jacobian), trajs[0].jacobians[0].as_ref());
}
