//! The 4D-Var machinery: quadratic cost, adjoint-swept gradient,
//! Hessian–vector products, the right-hand side `f`, conjugate gradients on
//! the Hessian system, and dense oracles / condition numbers.
//!
//! The Hessian is `B^{-1} + sum_k G_k^T R^{-1} G_k` with
//! `G_k = H M^k`; every operator application is matrix-free (one forward
//! sweep storing states at observation times, one adjoint Horner sweep),
//! costing O(K n_x) regardless of how many observations there are.

use crate::covariance::{apply_b_inverse, CovarianceModel};
use crate::grid::{propagate, step_adjoint, step_forward, GridConfig, StateVector};
use crate::observation::{apply_h, apply_h_transpose, ObsSet};
use crate::{Error, Result};
use nalgebra::DMatrix;
use std::sync::Arc;

/// Upper bound on n_x for dense assembly (oracles, condition numbers).
pub const DENSE_GUARD: usize = 2048;

/// One 4D-Var problem instance: grid, covariances, observations, background.
#[derive(Debug, Clone)]
pub struct VarProblem {
    pub grid: GridConfig,
    pub cov: Arc<CovarianceModel>,
    pub obs: ObsSet,
    pub background: StateVector,
}

impl VarProblem {
    pub fn new(
        grid: GridConfig,
        cov: Arc<CovarianceModel>,
        obs: ObsSet,
        background: StateVector,
    ) -> Result<Self> {
        if cov.n_x() != grid.n_x {
            return Err(Error::DimensionMismatch { expected: grid.n_x, actual: cov.n_x() });
        }
        if background.len() != grid.n_x {
            return Err(Error::DimensionMismatch { expected: grid.n_x, actual: background.len() });
        }
        if obs.config.n_x != grid.n_x || obs.config.n_steps != grid.n_steps {
            return Err(Error::InvalidConfig(
                "observation layout inconsistent with the grid".into(),
            ));
        }
        obs.validate()?;
        Ok(Self { grid, cov, obs, background })
    }

    fn check_len(&self, v: &StateVector) -> Result<()> {
        if v.len() != self.grid.n_x {
            return Err(Error::DimensionMismatch { expected: self.grid.n_x, actual: v.len() });
        }
        Ok(())
    }

    /// Backward Horner sweep of `sum_k (M^T)^k H^T R^{-1} y_k` for
    /// per-observation-time vectors `y_k` in observation space.
    fn adjoint_accumulate(&self, terms: &[(usize, Vec<f64>)]) -> Result<StateVector> {
        let r_inv = self.cov.r_inv();
        let mut acc = StateVector::zeros(self.grid.n_x);
        let mut next = terms.len();
        let last_k = terms.last().map(|(k, _)| *k).unwrap_or(0);
        for k in (0..=last_k).rev() {
            if k < last_k {
                acc = step_adjoint(&acc, &self.grid)?;
            }
            if next > 0 && terms[next - 1].0 == k {
                let y: Vec<f64> = terms[next - 1].1.iter().map(|v| r_inv * v).collect();
                acc = acc.add(&apply_h_transpose(&y, &self.obs.config)?);
                next -= 1;
            }
        }
        Ok(acc)
    }
}

/// The matrix-free Hessian `B^{-1} + sum_k G_k^T R^{-1} G_k` (SPD).
#[derive(Debug, Clone)]
pub struct HessianOperator {
    problem: VarProblem,
}

impl HessianOperator {
    pub fn new(problem: VarProblem) -> Self {
        Self { problem }
    }

    pub fn problem(&self) -> &VarProblem {
        &self.problem
    }

    pub fn n_x(&self) -> usize {
        self.problem.grid.n_x
    }
}

/// The 4D-Var cost `J(u0)`; the observation sum runs over observation
/// times only.
pub fn cost(p: &VarProblem, u0: &StateVector) -> Result<f64> {
    p.check_len(u0)?;
    let db = u0.sub(&p.background);
    let b_inv_db = apply_b_inverse(&p.cov, &db)?;
    let mut j = 0.5 * db.dot(&b_inv_db);

    let traj = propagate(u0, &p.grid)?;
    let r_inv = p.cov.r_inv();
    for (k, obs_k) in &p.obs.values {
        let hu = apply_h(&traj.states[*k], &p.obs.config)?;
        let misfit: f64 = hu.iter().zip(obs_k).map(|(m, o)| (m - o) * (m - o)).sum();
        j += 0.5 * r_inv * misfit;
    }
    Ok(j)
}

/// Gradient of the cost via the backward adjoint sweep:
/// `B^{-1}(u0 - u^b) - sum_k (M^T)^k H^T R^{-1} d_k` with innovations
/// `d_k = u_k^obs - H M^k u0`.
pub fn gradient(p: &VarProblem, u0: &StateVector) -> Result<StateVector> {
    p.check_len(u0)?;
    let traj = propagate(u0, &p.grid)?;
    let mut innovations = Vec::with_capacity(p.obs.values.len());
    for (k, obs_k) in &p.obs.values {
        let hu = apply_h(&traj.states[*k], &p.obs.config)?;
        let d: Vec<f64> = obs_k.iter().zip(&hu).map(|(o, m)| o - m).collect();
        innovations.push((*k, d));
    }
    let obs_term = p.adjoint_accumulate(&innovations)?;

    let db = u0.sub(&p.background);
    let b_term = apply_b_inverse(&p.cov, &db)?;
    Ok(b_term.sub(&obs_term))
}

/// Matrix-free Hessian–vector product.
pub fn hessian_vec(h: &HessianOperator, v: &StateVector) -> Result<StateVector> {
    let p = &h.problem;
    p.check_len(v)?;
    let mut terms = Vec::with_capacity(p.obs.values.len());
    let mut u = v.clone();
    let mut step = 0usize;
    for k in p.obs.values.keys() {
        while step < *k {
            u = step_forward(&u, &p.grid)?;
            step += 1;
        }
        terms.push((*k, apply_h(&u, &p.obs.config)?));
    }
    let obs_term = p.adjoint_accumulate(&terms)?;
    let b_term = apply_b_inverse(&p.cov, v)?;
    Ok(b_term.add(&obs_term))
}

/// Right-hand side of the Hessian system, `f = -grad J(0)`.
pub fn rhs_f(p: &VarProblem) -> Result<StateVector> {
    let zero = StateVector::zeros(p.grid.n_x);
    Ok(gradient(p, &zero)?.scale(-1.0))
}

/// Outcome of a CG solve.
#[derive(Debug, Clone)]
pub struct CgResult {
    pub solution: StateVector,
    /// Loop iterations performed (one Hessian–vector product each).
    pub n_iterations: usize,
    /// `|r_i| / |f|` after each iteration (index 0 is the initial residual).
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Conjugate gradients on `H x = f` from `x0`, stopping when
/// `|f - H x| / |f| <= rel_tol` or `max_iter` is reached.
pub fn cg_solve(
    h: &HessianOperator,
    f: &StateVector,
    x0: &StateVector,
    rel_tol: f64,
    max_iter: usize,
) -> Result<CgResult> {
    cg_solve_observed(h, f, x0, rel_tol, max_iter, |_, _| {})
}

/// `cg_solve` with a per-iterate observer `(iteration, current x)`, called
/// once for the start point and once per accepted iterate. Used by the
/// harness to record error-vs-iteration curves without re-running solves.
pub fn cg_solve_observed(
    h: &HessianOperator,
    f: &StateVector,
    x0: &StateVector,
    rel_tol: f64,
    max_iter: usize,
    mut observer: impl FnMut(usize, &StateVector),
) -> Result<CgResult> {
    if !(rel_tol > 0.0) {
        return Err(Error::InvalidConfig("rel_tol must be positive".into()));
    }
    if max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
    }
    let p = &h.problem;
    p.check_len(f)?;
    p.check_len(x0)?;

    let f_norm = f.norm();
    if f_norm == 0.0 {
        return Err(Error::InvalidConfig("cg_solve: zero right-hand side".into()));
    }

    let mut x = x0.clone();
    observer(0, &x);
    let mut r = f.sub(&hessian_vec(h, &x)?);
    let mut rs = r.dot(&r);
    let mut history = vec![rs.sqrt() / f_norm];
    if !rs.is_finite() {
        return Err(Error::NonFinite { context: "cg_solve initial residual".into() });
    }
    if history[0] <= rel_tol {
        return Ok(CgResult { solution: x, n_iterations: 0, residual_history: history, converged: true });
    }

    let mut d = r.clone();
    let mut n_iterations = 0;
    let mut converged = false;
    for _ in 0..max_iter {
        let hd = hessian_vec(h, &d)?;
        let dhd = d.dot(&hd);
        if !dhd.is_finite() || dhd <= 0.0 {
            return Err(Error::NonFinite {
                context: format!("cg_solve curvature d^T H d = {dhd:.3e} at iteration {n_iterations}"),
            });
        }
        let alpha = rs / dhd;
        x.axpy(alpha, &d);
        r.axpy(-alpha, &hd);
        let rs_new = r.dot(&r);
        if !rs_new.is_finite() {
            return Err(Error::NonFinite {
                context: format!("cg_solve residual at iteration {n_iterations}"),
            });
        }
        n_iterations += 1;
        observer(n_iterations, &x);
        history.push(rs_new.sqrt() / f_norm);
        if rs_new.sqrt() / f_norm <= rel_tol {
            converged = true;
            break;
        }
        let beta = rs_new / rs;
        d = r.add(&d.scale(beta));
        rs = rs_new;
    }

    Ok(CgResult { solution: x, n_iterations, residual_history: history, converged })
}

/// Dense Hessian, column by column through `hessian_vec`, symmetry-checked
/// (max asymmetry 1e-10) and then symmetrized. Oracle/conditioning use only.
pub fn assemble_dense_hessian(h: &HessianOperator) -> Result<DMatrix<f64>> {
    let n = h.n_x();
    if n > DENSE_GUARD {
        return Err(Error::DenseGuard { n_x: n, guard: DENSE_GUARD });
    }
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let e = StateVector::from_fn(n, |i| if i == j { 1.0 } else { 0.0 });
        let col = hessian_vec(h, &e)?;
        for i in 0..n {
            a[(i, j)] = col[i];
        }
    }
    let asym = (&a - a.transpose()).abs().max();
    let scale = a.abs().max().max(1.0);
    if asym > 1e-10 * scale {
        return Err(Error::NonFinite {
            context: format!("dense Hessian asymmetry {asym:.3e} exceeds tolerance"),
        });
    }
    let at = a.transpose();
    Ok((a + at) * 0.5)
}

/// Condition number `lambda_max / lambda_min` of the symmetrized dense
/// Hessian.
pub fn condition_number(h: &HessianOperator) -> Result<f64> {
    let a = assemble_dense_hessian(h)?;
    condition_number_of(&a)
}

/// Condition number of an already-assembled symmetric matrix.
pub fn condition_number_of(a: &DMatrix<f64>) -> Result<f64> {
    let eig = a.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.max();
    let lambda_min = eig.eigenvalues.min();
    if lambda_min <= 0.0 {
        return Err(Error::NotPositiveDefinite { lambda_min });
    }
    Ok(lambda_max / lambda_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{build_soar, DistanceMetric, SoarParams};
    use crate::observation::{extract_observations, ObsConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_cov(sigma_b: f64, length_scale: f64) -> Arc<CovarianceModel> {
        let p = SoarParams {
            sigma_b,
            length_scale,
            n_x: 100,
            dx: 1.0,
            distance: DistanceMetric::Absolute,
        };
        Arc::new(build_soar(&p, 0.02).unwrap())
    }

    fn random_problem(seed: u64) -> VarProblem {
        let g = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = test_cov(0.3, *[5.0, 10.0, 15.0, 20.0, 25.0].choose(&mut rng).unwrap());
        let n_space = *[2usize, 4, 5, 10].choose(&mut rng).unwrap();
        let t_interval = *[1usize, 4, 6, 10, 15, 20].choose(&mut rng).unwrap();
        let oc = ObsConfig::new(n_space, t_interval, g.n_x, g.n_steps).unwrap();
        let u_true = StateVector::from_fn(g.n_x, |i| {
            0.5 + 0.4 * (0.12 * i as f64 + rng.gen_range(0.0..0.3)).sin()
        });
        let traj = propagate(&u_true, &g).unwrap();
        let obs = extract_observations(&traj, &oc, 0.0, seed).unwrap();
        let background = StateVector::from_fn(g.n_x, |i| 0.5 + 0.3 * (0.1 * i as f64).sin());
        VarProblem::new(g, cov, obs, background).unwrap()
    }

    fn random_state(n: usize, rng: &mut ChaCha8Rng) -> StateVector {
        StateVector::from_fn(n, |_| rng.gen_range(-1.0..1.0))
    }

    fn empty_obs_problem(seed: u64) -> VarProblem {
        // t_interval beyond K would leave time 0; instead build a problem and
        // strip the map to model "no observations".
        let mut p = random_problem(seed);
        p.obs.values.clear();
        p
    }

    #[test]
    fn cost_zero_at_background_truth() {
        let g = GridConfig::default();
        let cov = test_cov(0.3, 10.0);
        let background = StateVector::from_fn(g.n_x, |i| 0.5 + 0.2 * (0.07 * i as f64).cos());
        let traj = propagate(&background, &g).unwrap();
        let oc = ObsConfig::new(4, 6, g.n_x, g.n_steps).unwrap();
        let obs = extract_observations(&traj, &oc, 0.0, 1).unwrap();
        let p = VarProblem::new(g, cov, obs, background.clone()).unwrap();
        let j = cost(&p, &background).unwrap();
        assert!(j.abs() <= 1e-18, "J = {j:.3e}");
    }

    #[test]
    fn cost_without_observations_is_background_term() {
        let p = empty_obs_problem(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u0 = random_state(100, &mut rng);
        let j = cost(&p, &u0).unwrap();
        let db = u0.sub(&p.background);
        let expect = 0.5 * db.dot(&apply_b_inverse(&p.cov, &db).unwrap());
        assert!((j - expect).abs() <= 1e-12 * expect.abs());
    }

    /// Dense oracle for the full cost, from explicitly assembled B^{-1}, H, M.
    fn dense_cost(p: &VarProblem, u0: &StateVector) -> f64 {
        let n = p.grid.n_x;
        let b_inv = p.cov.b_matrix().clone().try_inverse().unwrap();
        let m = crate::grid::step_matrix(&p.grid);
        let u0v = nalgebra::DVector::from_column_slice(u0.as_slice());
        let db = &u0v - nalgebra::DVector::from_column_slice(p.background.as_slice());
        let mut j = 0.5 * (db.transpose() * &b_inv * &db)[(0, 0)];
        let r_inv = p.cov.r_inv();
        let idx = p.obs.config.indices();
        let mut uk = u0v.clone();
        let mut step = 0usize;
        for (k, obs_k) in &p.obs.values {
            while step < *k {
                uk = &m * uk;
                step += 1;
            }
            let misfit: f64 = idx
                .iter()
                .zip(obs_k)
                .map(|(i, o)| (uk[*i] - o) * (uk[*i] - o))
                .sum();
            j += 0.5 * r_inv * misfit;
            let _ = n;
        }
        j
    }

    #[test]
    fn cost_matches_dense_oracle() {
        let p = random_problem(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u0 = random_state(100, &mut rng);
        let j = cost(&p, &u0).unwrap();
        let oracle = dense_cost(&p, &u0);
        assert!(
            (j - oracle).abs() <= 1e-10 * oracle.abs(),
            "J {j:.12e} vs oracle {oracle:.12e}"
        );
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_problem(8);
        let u0 = random_state(100, &mut rng);
        let grad = gradient(&p, &u0).unwrap();
        let eps = 1e-5;
        for _ in 0..10 {
            let dir = random_state(100, &mut rng);
            let dir = dir.scale(1.0 / dir.norm());
            let jp = cost(&p, &u0.add(&dir.scale(eps))).unwrap();
            let jm = cost(&p, &u0.sub(&dir.scale(eps))).unwrap();
            let fd = (jp - jm) / (2.0 * eps);
            let an = grad.dot(&dir);
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            assert!(rel <= 1e-5, "fd {fd:.8e} vs analytic {an:.8e} (rel {rel:.2e})");
        }
    }

    #[test]
    fn gradient_without_observations_is_prior_pull() {
        let p = empty_obs_problem(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u0 = random_state(100, &mut rng);
        let grad = gradient(&p, &u0).unwrap();
        let expect = apply_b_inverse(&p.cov, &u0.sub(&p.background)).unwrap();
        let rel = grad.sub(&expect).norm() / expect.norm();
        assert!(rel <= 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_cg_minimizer() {
        let p = random_problem(11);
        let h = HessianOperator::new(p.clone());
        let f = rhs_f(&p).unwrap();
        let res = cg_solve(&h, &f, &p.background, 1e-12, 2000).unwrap();
        assert!(res.converged);
        let g = gradient(&p, &res.solution).unwrap();
        // |grad| = |H x - f| <= rel_tol * |f| at the solver's tolerance scale
        assert!(g.norm() <= 1e-9 * f.norm(), "|grad| = {:.3e}", g.norm());
    }

    #[test]
    fn hvp_is_symmetric() {
        let p = random_problem(12);
        let h = HessianOperator::new(p);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let v = random_state(100, &mut rng);
            let w = random_state(100, &mut rng);
            let lhs = hessian_vec(&h, &v).unwrap().dot(&w);
            let rhs = v.dot(&hessian_vec(&h, &w).unwrap());
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
            assert!(rel <= 1e-11, "symmetry violation {rel:.3e}");
        }
    }

    #[test]
    fn hvp_consistent_with_gradient_differences() {
        let p = random_problem(14);
        let h = HessianOperator::new(p.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let u0 = random_state(100, &mut rng);
        let zero = StateVector::zeros(100);
        let lhs = gradient(&p, &u0).unwrap().sub(&gradient(&p, &zero).unwrap());
        let rhs = hessian_vec(&h, &u0).unwrap();
        let rel = lhs.sub(&rhs).norm() / rhs.norm();
        assert!(rel <= 1e-10, "quadratic exactness violated: {rel:.3e}");
    }

    #[test]
    fn hvp_matches_dense_and_finite_difference_oracles() {
        let p = random_problem(16);
        let h = HessianOperator::new(p.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v = random_state(100, &mut rng);

        let dense = assemble_dense_hessian(&h).unwrap();
        let dv = &dense * nalgebra::DVector::from_column_slice(v.as_slice());
        let hv = hessian_vec(&h, &v).unwrap();
        let rel_dense = (0..100)
            .map(|i| (hv[i] - dv[i]).powi(2))
            .sum::<f64>()
            .sqrt()
            / hv.norm();
        assert!(rel_dense <= 1e-10, "dense oracle mismatch {rel_dense:.3e}");

        // finite differences of the gradient (exact up to roundoff: J quadratic)
        let mut rng2 = ChaCha8Rng::seed_from_u64(18);
        let u0 = random_state(100, &mut rng2);
        let eps = 1e-6;
        let gp = gradient(&p, &u0.add(&v.scale(eps))).unwrap();
        let gm = gradient(&p, &u0.sub(&v.scale(eps))).unwrap();
        let fd = gp.sub(&gm).scale(1.0 / (2.0 * eps));
        let rel_fd = fd.sub(&hv).norm() / hv.norm();
        assert!(rel_fd <= 1e-6, "fd oracle mismatch {rel_fd:.3e}");
    }

    #[test]
    fn rhs_identities() {
        let p = random_problem(19);
        let f = rhs_f(&p).unwrap();
        let zero = StateVector::zeros(100);
        let g0 = gradient(&p, &zero).unwrap();
        assert!(f.add(&g0).norm() <= 1e-12 * f.norm());

        // direct Eq.-(10)-style evaluation: B^{-1} u^b + sum G^T R^{-1} obs
        let b_term = apply_b_inverse(&p.cov, &p.background).unwrap();
        let terms: Vec<(usize, Vec<f64>)> =
            p.obs.values.iter().map(|(k, v)| (*k, v.clone())).collect();
        let obs_term = p.adjoint_accumulate(&terms).unwrap();
        let direct = b_term.add(&obs_term);
        let rel = direct.sub(&f).norm() / f.norm();
        assert!(rel <= 1e-12, "two routes disagree: {rel:.3e}");
    }

    #[test]
    fn rhs_without_observations_is_prior_times_background() {
        let p = empty_obs_problem(20);
        let f = rhs_f(&p).unwrap();
        let expect = apply_b_inverse(&p.cov, &p.background).unwrap();
        assert!(f.sub(&expect).norm() <= 1e-12 * expect.norm());
    }

    #[test]
    fn cg_converges_immediately_at_solution() {
        let p = random_problem(21);
        let h = HessianOperator::new(p.clone());
        let f = rhs_f(&p).unwrap();
        let exact = cg_solve(&h, &f, &p.background, 1e-12, 2000).unwrap();
        let again = cg_solve(&h, &f, &exact.solution, 1e-10, 100).unwrap();
        assert_eq!(again.n_iterations, 0);
        assert!(again.converged);
    }

    #[test]
    fn cg_matches_dense_direct_solve() {
        for seed in [22, 23, 24] {
            let p = random_problem(seed);
            let h = HessianOperator::new(p.clone());
            let f = rhs_f(&p).unwrap();
            let res = cg_solve(&h, &f, &p.background, 1e-12, 3000).unwrap();
            let dense = assemble_dense_hessian(&h).unwrap();
            let x = dense
                .cholesky()
                .unwrap()
                .solve(&nalgebra::DVector::from_column_slice(f.as_slice()));
            let oracle = StateVector::new(x.data.into());
            let rel = res.solution.sub(&oracle).norm() / oracle.norm();
            assert!(rel <= 1e-6, "seed {seed}: CG vs dense solve {rel:.3e}");
        }
    }

    #[test]
    fn cg_energy_norm_error_is_monotone() {
        let p = random_problem(25);
        let h = HessianOperator::new(p.clone());
        let f = rhs_f(&p).unwrap();
        let dense = assemble_dense_hessian(&h).unwrap();
        let xstar = dense
            .clone()
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_column_slice(f.as_slice()));
        let mut h_norms = Vec::new();
        let _ = cg_solve_observed(&h, &f, &p.background, 1e-10, 400, |_, x| {
            let e = nalgebra::DVector::from_column_slice(x.as_slice()) - &xstar;
            h_norms.push((e.transpose() * &dense * &e)[(0, 0)].sqrt());
        })
        .unwrap();
        for w in h_norms.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-10),
                "H-norm error increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn quadratic_expansion_around_minimizer() {
        let p = random_problem(26);
        let h = HessianOperator::new(p.clone());
        let f = rhs_f(&p).unwrap();
        let xstar = cg_solve(&h, &f, &p.background, 1e-13, 3000).unwrap().solution;
        let jstar = cost(&p, &xstar).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let u = random_state(100, &mut rng);
        let d = u.sub(&xstar);
        let model = jstar + 0.5 * d.dot(&hessian_vec(&h, &d).unwrap());
        let real = cost(&p, &u).unwrap();
        let rel = (model - real).abs() / real.abs();
        assert!(rel <= 1e-8, "quadratic model off by {rel:.3e}");
    }

    #[test]
    fn gradient_equals_hx_minus_f_everywhere() {
        let p = random_problem(28);
        let h = HessianOperator::new(p.clone());
        let f = rhs_f(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let u0 = random_state(100, &mut rng);
        let lhs = gradient(&p, &u0).unwrap();
        let rhs = hessian_vec(&h, &u0).unwrap().sub(&f);
        let rel = lhs.sub(&rhs).norm() / rhs.norm().max(1e-300);
        assert!(rel <= 1e-10, "f-identity violated: {rel:.3e}");
    }

    #[test]
    fn dense_hessian_without_observations_is_b_inverse() {
        let p = empty_obs_problem(30);
        let h = HessianOperator::new(p.clone());
        let dense = assemble_dense_hessian(&h).unwrap();
        let b_inv = p.cov.b_matrix().clone().try_inverse().unwrap();
        let rel = (&dense - &b_inv).abs().max() / b_inv.abs().max();
        assert!(rel <= 1e-8, "dense Hessian vs B^-1: {rel:.3e}");
    }

    #[test]
    fn dense_hessian_spd_on_random_problems() {
        for seed in 40..60 {
            let p = random_problem(seed);
            let h = HessianOperator::new(p);
            let dense = assemble_dense_hessian(&h).unwrap();
            let eig = dense.symmetric_eigen();
            assert!(eig.eigenvalues.min() > 0.0, "seed {seed}: not SPD");
        }
    }

    #[test]
    fn condition_number_grows_with_length_scale() {
        let g = GridConfig::default();
        let oc = ObsConfig::new(4, 10, g.n_x, g.n_steps).unwrap();
        let mut kappas = Vec::new();
        for l in [5.0, 25.0] {
            let cov = test_cov(0.3, l);
            let u_true = StateVector::from_fn(g.n_x, |i| 0.5 + 0.3 * (0.2 * i as f64).sin());
            let traj = propagate(&u_true, &g).unwrap();
            let obs = extract_observations(&traj, &oc, 0.0, 31).unwrap();
            let p = VarProblem::new(g, cov, obs, u_true.clone()).unwrap();
            kappas.push(condition_number(&HessianOperator::new(p)).unwrap());
        }
        assert!(
            kappas[1] > kappas[0],
            "kappa(L=25dx) = {:.3e} not above kappa(L=5dx) = {:.3e}",
            kappas[1],
            kappas[0]
        );
    }

    #[test]
    fn condition_number_of_simple_matrices() {
        let id = DMatrix::<f64>::identity(10, 10);
        assert!((condition_number_of(&id).unwrap() - 1.0).abs() <= 1e-12);
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(10, |i, _| (i + 1) as f64));
        assert!((condition_number_of(&diag).unwrap() - 10.0).abs() <= 1e-10);
    }

    #[test]
    fn cg_rejects_bad_arguments() {
        let p = random_problem(33);
        let h = HessianOperator::new(p.clone());
        let f = rhs_f(&p).unwrap();
        assert!(cg_solve(&h, &f, &p.background, 0.0, 10).is_err());
        assert!(cg_solve(&h, &f, &p.background, 1e-6, 0).is_err());
        let bad = StateVector::zeros(7);
        assert!(cg_solve(&h, &bad, &p.background, 1e-6, 10).is_err());
    }
}
