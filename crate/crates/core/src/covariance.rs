//! SOAR background-error covariance `B`, its symmetric square root and
//! inverse application, plus the (diagonal) observation-error precision.
//!
//! `B_ij = sigma_b^2 (1 + D_ij/L) exp(-D_ij/L)` with `D_ij` the grid
//! distance. The SOAR kernel is positive definite on the line but *not* on
//! the circle: with the arc (periodic) distance at n_x = 100 the matrix is
//! indefinite for L >= 10 dx. Plain |x_i - x_j| distance is therefore the
//! default; the periodic variant stays available behind
//! [`DistanceMetric::Periodic`].

use crate::grid::StateVector;
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// Relative eigenvalue floor used when forming `B^{1/2}`.
const EIGENVALUE_FLOOR_REL: f64 = 1e-12;

/// How grid-point separation enters the SOAR kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// `D_ij = |i - j| dx`.
    #[default]
    Absolute,
    /// `D_ij = min(|i - j|, n - |i - j|) dx` (breaks SPD for large L).
    Periodic,
}

/// Parameters of the SOAR covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoarParams {
    /// Background error standard deviation (field units).
    pub sigma_b: f64,
    /// Correlation length scale L (m).
    pub length_scale: f64,
    /// Grid dimension.
    pub n_x: usize,
    /// Grid spacing (m).
    pub dx: f64,
    pub distance: DistanceMetric,
}

impl SoarParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_b > 0.0) {
            return Err(Error::InvalidConfig("sigma_b must be positive".into()));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::InvalidConfig("length_scale must be positive".into()));
        }
        if self.n_x == 0 || !(self.dx > 0.0) {
            return Err(Error::InvalidConfig("n_x and dx must be positive".into()));
        }
        Ok(())
    }

    fn distance_between(&self, i: usize, j: usize) -> f64 {
        let d = i.abs_diff(j);
        let steps = match self.distance {
            DistanceMetric::Absolute => d,
            DistanceMetric::Periodic => d.min(self.n_x - d),
        };
        steps as f64 * self.dx
    }
}

/// `B` with the factorizations needed by the assimilation, plus the
/// observation-error precision. Immutable once built.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    params: SoarParams,
    sigma_o: f64,
    b_matrix: DMatrix<f64>,
    b_sqrt: DMatrix<f64>,
    b_chol: Cholesky<f64, Dyn>,
    lambda_min: f64,
    lambda_max: f64,
}

/// Build the SOAR covariance and its factorizations.
///
/// The square root comes from a symmetric eigendecomposition with
/// eigenvalues clamped at `1e-12 * lambda_max`; a non-positive eigenvalue is
/// an error (clamping it would materially change `B`), as is a failed
/// Cholesky factorization of the inverse solve.
pub fn build_soar(p: &SoarParams, sigma_o: f64) -> Result<CovarianceModel> {
    p.validate()?;
    if !(sigma_o > 0.0) {
        return Err(Error::InvalidConfig("sigma_o must be positive".into()));
    }
    let n = p.n_x;
    let s2 = p.sigma_b * p.sigma_b;
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let r = p.distance_between(i, j) / p.length_scale;
            let v = s2 * (1.0 + r) * (-r).exp();
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }

    let eig = b.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.max();
    let lambda_min = eig.eigenvalues.min();
    if lambda_min <= 0.0 {
        return Err(Error::NotPositiveDefinite { lambda_min });
    }
    let floor = EIGENVALUE_FLOOR_REL * lambda_max;
    let sqrt_vals = DVector::from_fn(n, |i, _| eig.eigenvalues[i].max(floor).sqrt());
    let mut b_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    // symmetrize away the roundoff from the triple product
    let b_sqrt_t = b_sqrt.transpose();
    b_sqrt = (b_sqrt + b_sqrt_t) * 0.5;

    let b_chol = Cholesky::new(b.clone())
        .ok_or(Error::NotPositiveDefinite { lambda_min })?;

    Ok(CovarianceModel {
        params: *p,
        sigma_o,
        b_matrix: b,
        b_sqrt,
        b_chol,
        lambda_min,
        lambda_max,
    })
}

impl CovarianceModel {
    pub fn params(&self) -> &SoarParams {
        &self.params
    }

    pub fn n_x(&self) -> usize {
        self.params.n_x
    }

    pub fn sigma_o(&self) -> f64 {
        self.sigma_o
    }

    /// Per-observation precision, the diagonal value of `R^{-1}`.
    pub fn r_inv(&self) -> f64 {
        1.0 / (self.sigma_o * self.sigma_o)
    }

    pub fn b_matrix(&self) -> &DMatrix<f64> {
        &self.b_matrix
    }

    pub fn b_sqrt(&self) -> &DMatrix<f64> {
        &self.b_sqrt
    }

    pub fn eigenvalue_range(&self) -> (f64, f64) {
        (self.lambda_min, self.lambda_max)
    }

    fn check_len(&self, v: &StateVector) -> Result<()> {
        if v.len() != self.n_x() {
            return Err(Error::DimensionMismatch { expected: self.n_x(), actual: v.len() });
        }
        Ok(())
    }

    /// Write `B` as CSV (debug aid).
    pub fn dump_b_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        let n = self.n_x();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{}", self.b_matrix[(i, j)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Solve `B x = v`.
pub fn apply_b_inverse(m: &CovarianceModel, v: &StateVector) -> Result<StateVector> {
    m.check_len(v)?;
    let rhs = DVector::from_column_slice(v.as_slice());
    let x = m.b_chol.solve(&rhs);
    Ok(StateVector::new(x.data.into()))
}

/// Multiply by the symmetric square root: `B^{1/2} eta`.
pub fn apply_b_sqrt(m: &CovarianceModel, eta: &StateVector) -> Result<StateVector> {
    m.check_len(eta)?;
    let v = DVector::from_column_slice(eta.as_slice());
    let out = &m.b_sqrt * v;
    Ok(StateVector::new(out.data.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn params(length_scale: f64, distance: DistanceMetric) -> SoarParams {
        SoarParams { sigma_b: 1.0, length_scale, n_x: 100, dx: 1.0, distance }
    }

    #[test]
    fn diagonal_is_sigma_b_squared() {
        let p = SoarParams { sigma_b: 0.3, ..params(5.0, DistanceMetric::Absolute) };
        let m = build_soar(&p, 0.02).unwrap();
        for i in 0..p.n_x {
            assert_abs_diff_eq!(m.b_matrix()[(i, i)], 0.09, epsilon = 1e-14);
        }
    }

    #[test]
    fn soar_value_at_one_length_scale() {
        // sigma_b = 1, L = 5 dx, |i-j| = 5: B_ij = 2 e^{-1}
        let p = params(5.0, DistanceMetric::Absolute);
        let m = build_soar(&p, 0.02).unwrap();
        let expect = 2.0 * (-1.0f64).exp();
        assert_abs_diff_eq!(m.b_matrix()[(0, 5)], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.735_758_8, epsilon = 1e-7);
    }

    #[test]
    fn periodic_distance_wraps() {
        let p = params(5.0, DistanceMetric::Periodic);
        let m = build_soar(&p, 0.02).unwrap();
        assert_abs_diff_eq!(m.b_matrix()[(0, 99)], m.b_matrix()[(0, 1)], epsilon = 1e-15);
    }

    #[test]
    fn periodic_b_is_circulant() {
        let p = params(5.0, DistanceMetric::Periodic);
        let m = build_soar(&p, 0.02).unwrap();
        let b = m.b_matrix();
        for i in 1..p.n_x {
            for j in 0..p.n_x {
                assert_eq!(b[(i, j)], b[(0, (j + p.n_x - i) % p.n_x)]);
            }
        }
    }

    #[test]
    fn periodic_large_length_scale_is_rejected() {
        // wrapped SOAR loses positive definiteness for L >= 10 dx at n_x = 100
        let p = params(25.0, DistanceMetric::Periodic);
        match build_soar(&p, 0.02) {
            Err(Error::NotPositiveDefinite { lambda_min }) => assert!(lambda_min <= 0.0),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn absolute_distance_spd_for_all_paper_lengths() {
        for l in [5.0, 10.0, 15.0, 20.0, 25.0] {
            let m = build_soar(&params(l, DistanceMetric::Absolute), 0.02).unwrap();
            let (lo, hi) = m.eigenvalue_range();
            assert!(lo > 0.0, "L = {l}: min eigenvalue {lo:.3e}");
            assert!(hi > lo);
        }
    }

    #[test]
    fn sqrt_squares_back_to_b() {
        for l in [5.0, 25.0] {
            let m = build_soar(&params(l, DistanceMetric::Absolute), 0.02).unwrap();
            let sq = m.b_sqrt() * m.b_sqrt();
            let diff = (&sq - m.b_matrix()).abs().max();
            assert!(diff <= 1e-10, "L = {l}: max |B12*B12 - B| = {diff:.3e}");
        }
    }

    #[test]
    fn b_is_symmetric_exactly() {
        let m = build_soar(&params(15.0, DistanceMetric::Absolute), 0.02).unwrap();
        let b = m.b_matrix();
        for i in 0..100 {
            for j in 0..100 {
                assert_eq!(b[(i, j)], b[(j, i)]);
            }
        }
    }

    #[test]
    fn inverse_recovers_forward_product() {
        let m = build_soar(&params(10.0, DistanceMetric::Absolute), 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = StateVector::from_fn(100, |_| rng.gen_range(-1.0..1.0));
        let bw = {
            let v = nalgebra::DVector::from_column_slice(w.as_slice());
            let out = m.b_matrix() * v;
            StateVector::new(out.data.into())
        };
        let back = apply_b_inverse(&m, &bw).unwrap();
        let rel = back.sub(&w).norm() / w.norm();
        assert!(rel <= 1e-9, "relative error {rel:.3e}");
    }

    #[test]
    fn inverse_scales_with_sigma_b_squared() {
        let p1 = SoarParams { sigma_b: 1.0, ..params(5.0, DistanceMetric::Absolute) };
        let p2 = SoarParams { sigma_b: 2.0, ..params(5.0, DistanceMetric::Absolute) };
        let m1 = build_soar(&p1, 0.02).unwrap();
        let m2 = build_soar(&p2, 0.02).unwrap();
        let v = StateVector::from_fn(100, |i| (i as f64 * 0.37).sin());
        let x1 = apply_b_inverse(&m1, &v).unwrap();
        let x2 = apply_b_inverse(&m2, &v).unwrap();
        for i in 0..100 {
            assert_abs_diff_eq!(x2[i], 0.25 * x1[i], epsilon = 1e-9 * x1[i].abs().max(1.0));
        }
    }

    #[test]
    fn inverse_matches_dense_solve_oracle() {
        let m = build_soar(&params(5.0, DistanceMetric::Absolute), 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = StateVector::from_fn(100, |_| rng.gen_range(-1.0..1.0));
        let got = apply_b_inverse(&m, &v).unwrap();
        // independent dense route: LU solve
        let lu = m.b_matrix().clone().lu();
        let x = lu.solve(&nalgebra::DVector::from_column_slice(v.as_slice())).unwrap();
        let oracle = StateVector::new(x.data.into());
        let rel = got.sub(&oracle).norm() / oracle.norm();
        assert!(rel <= 1e-10, "relative error vs dense solve {rel:.3e}");
    }

    #[test]
    fn sqrt_of_zero_is_zero_and_twice_is_b() {
        let m = build_soar(&params(10.0, DistanceMetric::Absolute), 0.02).unwrap();
        let zero = StateVector::zeros(100);
        assert_eq!(apply_b_sqrt(&m, &zero).unwrap().norm(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eta = StateVector::from_fn(100, |_| rng.gen_range(-1.0..1.0));
        let twice = apply_b_sqrt(&m, &apply_b_sqrt(&m, &eta).unwrap()).unwrap();
        let beta = {
            let v = nalgebra::DVector::from_column_slice(eta.as_slice());
            let out = m.b_matrix() * v;
            StateVector::new(out.data.into())
        };
        let rel = twice.sub(&beta).norm() / beta.norm();
        assert!(rel <= 1e-9, "relative error {rel:.3e}");
    }

    #[test]
    fn sample_covariance_approaches_b() {
        // Monte-Carlo oracle on a smaller grid to keep the test quick.
        let p = SoarParams { sigma_b: 1.0, length_scale: 3.0, n_x: 24, dx: 1.0, distance: DistanceMetric::Absolute };
        let m = build_soar(&p, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = p.n_x;
        let draws = 10_000;
        let mut acc = DMatrix::<f64>::zeros(n, n);
        for _ in 0..draws {
            let eta = StateVector::from_fn(n, |_| rng.sample(rand_distr::StandardNormal));
            let s = apply_b_sqrt(&m, &eta).unwrap();
            for i in 0..n {
                for j in 0..n {
                    acc[(i, j)] += s[i] * s[j];
                }
            }
        }
        acc /= draws as f64;
        let max_err = (&acc - m.b_matrix()).abs().max();
        assert!(max_err <= 5e-2, "max entry error {max_err:.3e}");
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(build_soar(&SoarParams { sigma_b: 0.0, ..params(5.0, DistanceMetric::Absolute) }, 0.02).is_err());
        assert!(build_soar(&SoarParams { length_scale: -1.0, ..params(5.0, DistanceMetric::Absolute) }, 0.02).is_err());
        assert!(build_soar(&params(5.0, DistanceMetric::Absolute), 0.0).is_err());
    }

    #[test]
    fn dimension_mismatch_reported() {
        let m = build_soar(&params(5.0, DistanceMetric::Absolute), 0.02).unwrap();
        let v = StateVector::zeros(99);
        assert!(apply_b_inverse(&m, &v).is_err());
        assert!(apply_b_sqrt(&m, &v).is_err());
    }
}
