//! 1-D Fourier neural operator mapping the Hessian-system right-hand side
//! `f` to an initial state, trained as a surrogate of the inverse Hessian.

mod adam;
mod io;
mod model;
mod spectral;
mod train;

pub use adam::{adam_step, AdamState};
pub use io::{load_model, save_model};
pub use model::{backward, forward, FnoParams, ForwardCache, SpectralLayer};
pub use spectral::{spectral_conv, spectral_conv_backward, RealFft};
pub use train::{build_input, loss_rel_l2, normalized_coords, train, EpochRecord, TrainLog};

use crate::grid::StateVector;
use crate::{Error, Result};

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoConfig {
    /// Retained Fourier modes per spectral layer.
    pub n_modes: usize,
    /// Channel width of the hidden field.
    pub width: usize,
    /// Number of spectral blocks.
    pub n_layers: usize,
    /// Hidden width of the two-stage projection head.
    pub hidden_width: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    /// Early-stopping patience in epochs (0 disables it).
    pub patience: usize,
    /// Fraction of the dataset held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 || self.width == 0 || self.n_layers == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidConfig("fno dimensions must be >= 1".into()));
        }
        if self.batch_size == 0 || self.n_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and n_epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self {
            n_modes: 16,
            width: 64,
            n_layers: 4,
            hidden_width: 128,
            lr: 1e-4,
            batch_size: 32,
            n_epochs: 500,
            patience: 50,
            val_fraction: 0.1,
            seed: 7,
        }
    }
}

/// Scalar input standardization fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Pooled mean/std over every entry of the given vectors.
    pub fn fit<'a>(data: impl Iterator<Item = &'a [f64]> + Clone) -> Result<Self> {
        let mut count = 0usize;
        let mut mean = 0.0;
        for s in data.clone() {
            for v in s {
                count += 1;
                mean += v;
            }
        }
        if count == 0 {
            return Err(Error::InvalidConfig("standardizer fitted on empty data".into()));
        }
        mean /= count as f64;
        let mut var = 0.0;
        for s in data {
            for v in s {
                var += (v - mean) * (v - mean);
            }
        }
        var /= count as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| (v - self.mean) / self.std).collect()
    }
}

/// A trained operator network: architecture, parameters and the input
/// standardizer. Inference is pure; the model is safe to share.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoModel {
    pub config: FnoConfig,
    pub params: FnoParams,
    pub standardizer: Standardizer,
}

/// Evaluate the surrogate on a right-hand side `f` given the domain length
/// (coordinates enter as the second input channel). Resolution-agnostic:
/// any `f.len() >= 2 * n_modes` works.
pub fn fno_forward(m: &FnoModel, f: &StateVector, x_max: f64) -> Result<StateVector> {
    let n = f.len();
    if n < 2 * m.config.n_modes {
        return Err(Error::InvalidConfig(format!(
            "grid of {n} points below 2 * n_modes = {}",
            2 * m.config.n_modes
        )));
    }
    let fft = RealFft::shared(n);
    let f_std = m.standardizer.standardize(f.as_slice());
    let coords = normalized_coords(n, x_max);
    let input = build_input(&f_std, &coords);
    let (out, _) = forward(&m.params, &input, &fft)?;
    Ok(StateVector::new(out))
}
