//! Independent reference solvers shared by the integration tests. None of
//! them call into the library's own solvers.

#![allow(dead_code)]

use barrier_mpc::{CondensedQp, Matrix, MpcSpec, Vector};

/// Exact solution of `min ½uᵀHu − cᵀu s.t. Gu ≤ b` by trying every active
/// set and keeping the one that satisfies the KKT conditions. Only for a
/// handful of rows.
pub fn enumerate_kkt(h: &Matrix, c: &Vector, g: &Matrix, b: &Vector) -> Option<(Vector, Vector)> {
    let (m, n) = (g.nrows(), h.nrows());
    assert!(m <= 16, "enumeration oracle is exponential in the row count");
    let scale = 1.0 + c.amax() + b.amax();
    let mut best: Option<(f64, Vector, Vector)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let k = rows.len();
        let mut kkt = Matrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = Vector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(c);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = g[(i, j)];
                kkt[(j, n + r)] = g[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.clone().full_piv_lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-10 * scale {
            continue;
        }
        let u = sol.rows(0, n).into_owned();
        let mut lambda = Vector::zeros(m);
        for (r, &i) in rows.iter().enumerate() {
            lambda[i] = sol[n + r];
        }
        let primal_ok = (b - g * &u).iter().all(|&s| s >= -1e-10 * scale);
        let dual_ok = lambda.iter().all(|&l| l >= -1e-10 * scale);
        if primal_ok && dual_ok {
            let obj = 0.5 * u.dot(&(h * &u)) - c.dot(&u);
            if best.as_ref().is_none_or(|(o, _, _)| obj < *o - 1e-12 * scale) {
                best = Some((obj, u, lambda));
            }
        }
    }
    best.map(|(_, u, l)| (u, l))
}

/// Dual accelerated projected gradient with adaptive restart.
pub fn dual_projected_gradient(h: &Matrix, c: &Vector, g: &Matrix, b: &Vector, iters: usize) -> Vector {
    let h_inv = h.clone().try_inverse().expect("H invertible");
    let q = g * &h_inv * g.transpose();
    let step = 1.0 / q.clone().symmetric_eigenvalues().max().max(1e-12);
    let primal = |lambda: &Vector| &h_inv * (c - g.transpose() * lambda);
    let dual_value = |lambda: &Vector| {
        let r = c - g.transpose() * lambda;
        -0.5 * r.dot(&(&h_inv * &r)) - b.dot(lambda)
    };
    let m = g.nrows();
    let (mut lambda, mut y) = (Vector::zeros(m), Vector::zeros(m));
    let mut t: f64 = 1.0;
    let mut last = dual_value(&lambda);
    for _ in 0..iters {
        // gradient of the dual is G u(λ) − b
        let grad = g * primal(&y) - b;
        let next = (&y + grad * step).map(|v| v.max(0.0));
        let value = dual_value(&next);
        if value < last {
            // restart momentum
            t = 1.0;
            y = lambda.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &lambda) * ((t - 1.0) / t_next);
        lambda = next;
        t = t_next;
        last = value;
    }
    primal(&lambda)
}

pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let f_lo = f(lo);
    assert!(f_lo * f(hi) <= 0.0, "bracket does not straddle a root");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Inscribed radius `max_u min_i (b_i − a_i u)/‖a_i‖` by projected
/// subgradient ascent with diminishing steps.
pub fn inscribed_radius(a: &Matrix, b: &Vector, start: &Vector, iters: usize) -> f64 {
    let norms: Vec<f64> = a.row_iter().map(|r| r.norm()).collect();
    let margin = |u: &Vector| {
        (0..a.nrows())
            .map(|i| ((b[i] - a.row(i).dot(&u.transpose())) / norms[i], i))
            .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc })
    };
    let mut u = start.clone();
    let mut best = margin(&u).0;
    for k in 0..iters {
        let (_, i) = margin(&u);
        let dir = -a.row(i).transpose() / norms[i];
        u += dir * (1.0 / (1.0 + k as f64).sqrt());
        best = best.max(margin(&u).0);
    }
    best
}

/// The condensed problem's data restricted to rows that depend on `u`.
pub fn decision_rows(qp: &CondensedQp, x0: &Vector) -> (Matrix, Vector) {
    let rows: Vec<usize> = (0..qp.m()).filter(|&i| qp.decision_rows()[i]).collect();
    let rhs = qp.w() + qp.p() * x0;
    (
        qp.g().select_rows(&rows),
        Vector::from_iterator(rows.len(), rows.iter().map(|&i| rhs[i])),
    )
}

/// Cost of a trajectory written out stage by stage.
pub fn rollout_cost(spec: &MpcSpec, x0: &Vector, u: &Vector) -> f64 {
    let du = spec.input_dim();
    let mut x = x0.clone();
    let mut cost = 0.0;
    for t in 0..spec.horizon {
        let ut = u.rows(t * du, du).into_owned();
        cost += ut.dot(&(&spec.r[t] * &ut));
        x = &spec.sys.a * &x + &spec.sys.b * &ut;
        cost += x.dot(&(&spec.q[t] * &x));
    }
    cost
}

pub fn random_states(n: usize, half_width: f64, seed: u64) -> Vec<Vector> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vector::from_fn(2, |_, _| rng.random_range(-half_width..half_width)))
        .collect()
}
