//! Observation operator `H` (equally spaced spatial samples at fixed time
//! intervals), its adjoint, and synthetic observation extraction from a
//! true trajectory.

use crate::grid::{StateVector, Trajectory};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// Spatial/temporal layout of the observation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsConfig {
    /// Number of observed grid points, equally spaced starting at index 0.
    pub n_space: usize,
    /// Time steps between consecutive observation times.
    pub t_interval: usize,
    pub n_x: usize,
    /// Window length K.
    pub n_steps: usize,
}

impl ObsConfig {
    pub fn new(n_space: usize, t_interval: usize, n_x: usize, n_steps: usize) -> Result<Self> {
        if n_space == 0 || n_space > n_x {
            return Err(Error::InvalidConfig(format!(
                "n_space = {n_space} outside 1..={n_x}"
            )));
        }
        if t_interval == 0 {
            return Err(Error::InvalidConfig("t_interval must be >= 1".into()));
        }
        Ok(Self { n_space, t_interval, n_x, n_steps })
    }

    /// Observed grid indices `floor(j * n_x / n_space)`, anchored at 0.
    /// Exactly equally spaced when `n_space` divides `n_x`; the closest
    /// quasi-equal partition otherwise (n_x = 100 with 6 or 8 stations).
    pub fn indices(&self) -> Vec<usize> {
        (0..self.n_space).map(|j| j * self.n_x / self.n_space).collect()
    }

    /// Observation times `{0, t, 2t, ...} ∩ [0, K]`.
    pub fn times(&self) -> Vec<usize> {
        (0..=self.n_steps).step_by(self.t_interval).collect()
    }

    /// Total number of scalar observations over the window.
    pub fn n_observations(&self) -> usize {
        self.n_space * self.times().len()
    }
}

/// Observed values keyed by time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSet {
    pub config: ObsConfig,
    /// Time step -> the `n_space` observed values at that step.
    pub values: BTreeMap<usize, Vec<f64>>,
}

impl ObsSet {
    /// Verify the keys/lengths match the config and entries are finite.
    pub fn validate(&self) -> Result<()> {
        let times = self.config.times();
        if self.values.len() != times.len() || !times.iter().all(|t| self.values.contains_key(t)) {
            return Err(Error::InvalidConfig(
                "observation times do not match the configuration".into(),
            ));
        }
        for (k, v) in &self.values {
            if v.len() != self.config.n_space {
                return Err(Error::DimensionMismatch {
                    expected: self.config.n_space,
                    actual: v.len(),
                });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { context: format!("observation at step {k}") });
            }
        }
        Ok(())
    }
}

/// Sample the state at the observed indices.
pub fn apply_h(u: &StateVector, c: &ObsConfig) -> Result<Vec<f64>> {
    if u.len() != c.n_x {
        return Err(Error::DimensionMismatch { expected: c.n_x, actual: u.len() });
    }
    Ok(c.indices().into_iter().map(|i| u[i]).collect())
}

/// Scatter an observation-space vector back onto the grid: `H^T y`.
pub fn apply_h_transpose(y: &[f64], c: &ObsConfig) -> Result<StateVector> {
    if y.len() != c.n_space {
        return Err(Error::DimensionMismatch { expected: c.n_space, actual: y.len() });
    }
    let mut out = StateVector::zeros(c.n_x);
    for (j, idx) in c.indices().into_iter().enumerate() {
        out[idx] = y[j];
    }
    Ok(out)
}

/// Extract observations from a true trajectory, optionally perturbed with
/// iid Gaussian noise. Deterministic for a fixed seed; `noise_std = 0`
/// returns the sampled truth bit-exactly.
pub fn extract_observations(
    traj: &Trajectory,
    c: &ObsConfig,
    noise_std: f64,
    seed: u64,
) -> Result<ObsSet> {
    if traj.n_steps() != c.n_steps {
        return Err(Error::DimensionMismatch { expected: c.n_steps, actual: traj.n_steps() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = BTreeMap::new();
    for k in c.times() {
        let mut obs = apply_h(&traj.states[k], c)?;
        if noise_std > 0.0 {
            for o in &mut obs {
                let eps: f64 = rng.sample(StandardNormal);
                *o += noise_std * eps;
            }
        }
        values.insert(k, obs);
    }
    Ok(ObsSet { config: *c, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{propagate, GridConfig};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identity_sampling_when_fully_observed() {
        let c = ObsConfig::new(100, 1, 100, 90).unwrap();
        let u = StateVector::from_fn(100, |i| i as f64);
        assert_eq!(apply_h(&u, &c).unwrap(), u.as_slice());
    }

    #[test]
    fn ramp_sampled_at_expected_indices() {
        let c = ObsConfig::new(4, 1, 100, 90).unwrap();
        let u = StateVector::from_fn(100, |i| i as f64);
        assert_eq!(apply_h(&u, &c).unwrap(), vec![0.0, 25.0, 50.0, 75.0]);
    }

    #[test]
    fn h_adjoint_pairing() {
        let c = ObsConfig::new(4, 1, 100, 90).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let u = StateVector::from_fn(100, |_| rng.gen_range(-1.0..1.0));
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hu = apply_h(&u, &c).unwrap();
            let hty = apply_h_transpose(&y, &c).unwrap();
            let lhs: f64 = hu.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs = u.dot(&hty);
            assert!((lhs - rhs).abs() <= 1e-14 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn h_ht_is_identity_on_obs_space() {
        let c = ObsConfig::new(8, 1, 96, 90).unwrap();
        let y: Vec<f64> = (0..8).map(|j| j as f64 - 3.5).collect();
        let round = apply_h(&apply_h_transpose(&y, &c).unwrap(), &c).unwrap();
        assert_eq!(round, y);
    }

    #[test]
    fn ht_matches_dense_scatter_matrix() {
        let c = ObsConfig::new(4, 1, 100, 90).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = apply_h_transpose(&y, &c).unwrap();
        // dense 0/1 H assembled explicitly
        let mut ht = vec![0.0; 100];
        for (row, idx) in c.indices().into_iter().enumerate() {
            ht[idx] += y[row];
        }
        assert_eq!(got.as_slice(), &ht[..]);
    }

    #[test]
    fn zero_obs_vector_scatters_to_zero() {
        let c = ObsConfig::new(2, 10, 100, 90).unwrap();
        let out = apply_h_transpose(&[0.0, 0.0], &c).unwrap();
        assert_eq!(out.norm(), 0.0);
    }

    #[test]
    fn noiseless_extraction_is_exact_sampling() {
        let g = GridConfig::default();
        let u0 = StateVector::from_fn(g.n_x, |i| (0.13 * i as f64).cos());
        let traj = propagate(&u0, &g).unwrap();
        let c = ObsConfig::new(4, 6, g.n_x, g.n_steps).unwrap();
        let obs = extract_observations(&traj, &c, 0.0, 999).unwrap();
        obs.validate().unwrap();
        for (k, v) in &obs.values {
            assert_eq!(v, &apply_h(&traj.states[*k], &c).unwrap());
        }
    }

    #[test]
    fn interval_one_gives_k_plus_one_times() {
        let c = ObsConfig::new(2, 1, 100, 90).unwrap();
        assert_eq!(c.times().len(), 91);
        assert_eq!(c.n_observations(), 182);
        let c20 = ObsConfig::new(2, 20, 100, 90).unwrap();
        assert_eq!(c20.times(), vec![0, 20, 40, 60, 80]);
    }

    #[test]
    fn fixed_seed_reproduces_noisy_observations() {
        let g = GridConfig::default();
        let u0 = StateVector::from_fn(g.n_x, |i| (0.05 * i as f64).sin());
        let traj = propagate(&u0, &g).unwrap();
        let c = ObsConfig::new(8, 4, g.n_x, g.n_steps).unwrap();
        let a = extract_observations(&traj, &c, 0.05, 4242).unwrap();
        let b = extract_observations(&traj, &c, 0.05, 4242).unwrap();
        assert_eq!(a, b);
        let c2 = extract_observations(&traj, &c, 0.05, 4243).unwrap();
        assert_ne!(a, c2);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ObsConfig::new(0, 1, 100, 90).is_err());
        assert!(ObsConfig::new(101, 1, 100, 90).is_err());
        assert!(ObsConfig::new(2, 0, 100, 90).is_err());
    }

    #[test]
    fn quasi_equal_spacing_when_not_divisible() {
        let c = ObsConfig::new(8, 1, 100, 90).unwrap();
        assert_eq!(c.indices(), vec![0, 12, 25, 37, 50, 62, 75, 87]);
        let c6 = ObsConfig::new(6, 1, 100, 90).unwrap();
        assert_eq!(c6.indices(), vec![0, 16, 33, 50, 66, 83]);
        // gaps differ by at most one grid point
        for idx in [c.indices(), c6.indices()] {
            let gaps: Vec<usize> = idx
                .windows(2)
                .map(|w| w[1] - w[0])
                .chain(std::iter::once(100 + idx[0] - idx[idx.len() - 1]))
                .collect();
            let lo = *gaps.iter().min().unwrap();
            let hi = *gaps.iter().max().unwrap();
            assert!(hi - lo <= 1, "gaps {gaps:?}");
        }
    }

    proptest! {
        #[test]
        fn ht_h_is_a_projector(n_space in prop::sample::select(vec![2usize, 4, 5, 10, 20]), seed in 0u64..200) {
            let c = ObsConfig::new(n_space, 1, 100, 90).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = StateVector::from_fn(100, |_| rng.gen_range(-1.0..1.0));
            let proj = apply_h_transpose(&apply_h(&u, &c).unwrap(), &c).unwrap();
            let twice = apply_h_transpose(&apply_h(&proj, &c).unwrap(), &c).unwrap();
            // projector: applying twice equals applying once, entries are 0 or u_i
            prop_assert_eq!(proj.as_slice(), twice.as_slice());
            let idx = c.indices();
            for i in 0..100 {
                if idx.contains(&i) {
                    prop_assert_eq!(proj[i], u[i]);
                } else {
                    prop_assert_eq!(proj[i], 0.0);
                }
            }
        }
    }
}
