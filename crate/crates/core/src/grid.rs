//! Spatial/temporal discretization of the periodic advection equation
//! `du/dt + c du/dx = 0` and the Lax–Wendroff forward, tangent-linear and
//! adjoint step operators.
//!
//! The model is linear with a constant advection speed, so the tangent
//! linear model equals the forward model and a single stencil serves every
//! time step. All operators are matrix-free; `step_matrix` assembles the
//! dense step matrix only for oracles and conditioning studies.

use crate::{Error, Result};
use nalgebra::DMatrix;

/// Discretization of the periodic advection problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Number of grid points.
    pub n_x: usize,
    /// Domain length (m); the domain is `[-x_max/2, x_max/2)`.
    pub x_max: f64,
    /// Advection speed (m/s).
    pub c: f64,
    /// Time step (s).
    pub dt: f64,
    /// Steps per assimilation window (K).
    pub n_steps: usize,
}

impl GridConfig {
    pub fn new(n_x: usize, x_max: f64, c: f64, dt: f64, n_steps: usize) -> Result<Self> {
        let g = Self { n_x, x_max, c, dt, n_steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 8 {
            return Err(Error::InvalidConfig(format!("n_x = {} < 8", self.n_x)));
        }
        if !(self.x_max > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("x_max and dt must be positive".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::InvalidConfig("n_steps must be >= 1".into()));
        }
        let nu = self.courant();
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "Courant number {nu:.4} outside (0, 1]: Lax-Wendroff unstable"
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.n_x as f64
    }

    /// Courant number `nu = c dt / dx`.
    pub fn courant(&self) -> f64 {
        self.c * self.dt / self.dx()
    }

    /// Cell-center coordinates `x_i = -x_max/2 + (i + 1/2) dx`.
    pub fn cell_centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_x)
            .map(|i| -0.5 * self.x_max + (i as f64 + 0.5) * dx)
            .collect()
    }

    /// Lax–Wendroff stencil `(coef of u_{i-1}, u_i, u_{i+1})`.
    pub fn stencil(&self) -> (f64, f64, f64) {
        let nu = self.courant();
        (0.5 * nu * (1.0 + nu), 1.0 - nu * nu, 0.5 * nu * (nu - 1.0))
    }
}

impl Default for GridConfig {
    /// The experiment discretization: x_max = 100 m, c = 0.92 m/s,
    /// n_x = 100 (dx = 1 m), dt = 1 s, K = 90, so nu = 0.92.
    fn default() -> Self {
        Self { n_x: 100, x_max: 100.0, c: 0.92, dt: 1.0, n_steps: 90 }
    }
}

/// Discretized field on the periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    values: Vec<f64>,
}

impl StateVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self { values: (0..n).map(f).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::from_fn(self.len(), |i| a * self.values[i])
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_fn(self.len(), |i| self.values[i] + other.values[i])
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::from_fn(self.len(), |i| self.values[i] - other.values[i])
    }

    /// In-place `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: self.len() });
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for StateVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// States `u_0 .. u_K` over one assimilation window.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
}

impl Trajectory {
    /// Number of steps K (states.len() - 1).
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// One Lax–Wendroff step with periodic wraparound.
///
/// `u_i' = u_i - (nu/2)(u_{i+1} - u_{i-1}) + (nu^2/2)(u_{i+1} - 2 u_i + u_{i-1})`
pub fn step_forward(u: &StateVector, g: &GridConfig) -> Result<StateVector> {
    u.check_len(g.n_x)?;
    let (cm1, c0, cp1) = g.stencil();
    let n = g.n_x;
    let v = u.as_slice();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let im1 = if i == 0 { n - 1 } else { i - 1 };
        let ip1 = if i + 1 == n { 0 } else { i + 1 };
        out[i] = cm1 * v[im1] + c0 * v[i] + cp1 * v[ip1];
    }
    Ok(StateVector::new(out))
}

/// Adjoint step `M^T w`: the stencil transposed (each output entry gathers
/// the coefficients that `step_forward` scatters).
pub fn step_adjoint(w: &StateVector, g: &GridConfig) -> Result<StateVector> {
    w.check_len(g.n_x)?;
    let (cm1, c0, cp1) = g.stencil();
    let n = g.n_x;
    let v = w.as_slice();
    let mut out = vec![0.0; n];
    for j in 0..n {
        let jm1 = if j == 0 { n - 1 } else { j - 1 };
        let jp1 = if j + 1 == n { 0 } else { j + 1 };
        // M[j+1, j] = cm1 and M[j-1, j] = cp1 for the circulant stencil.
        out[j] = cm1 * v[jp1] + c0 * v[j] + cp1 * v[jm1];
    }
    Ok(StateVector::new(out))
}

/// Run the forward model for `g.n_steps` steps, keeping every state.
pub fn propagate(u0: &StateVector, g: &GridConfig) -> Result<Trajectory> {
    u0.check_len(g.n_x)?;
    let mut states = Vec::with_capacity(g.n_steps + 1);
    states.push(u0.clone());
    for _ in 0..g.n_steps {
        let next = step_forward(states.last().unwrap(), g)?;
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Apply `k` forward steps without storing the intermediate states.
pub fn propagate_to(u0: &StateVector, g: &GridConfig, k: usize) -> Result<StateVector> {
    u0.check_len(g.n_x)?;
    let mut u = u0.clone();
    for _ in 0..k {
        u = step_forward(&u, g)?;
    }
    Ok(u)
}

/// Dense step matrix, assembled from the stencil. Oracle/conditioning use only.
pub fn step_matrix(g: &GridConfig) -> DMatrix<f64> {
    let (cm1, c0, cp1) = g.stencil();
    let n = g.n_x;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, (i + n - 1) % n)] += cm1;
        m[(i, i)] += c0;
        m[(i, (i + 1) % n)] += cp1;
    }
    m
}
