//! Experiment configuration: one TOML file with `[grid]`, `[covariance]`,
//! `[solver]`, `[fno]` and `[dataset]` sections. Unknown keys are rejected.

use crate::covariance::DistanceMetric;
use crate::fno::FnoConfig;
use crate::grid::GridConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n_x: usize,
    pub x_max: f64,
    pub c: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        Self { n_x: g.n_x, x_max: g.x_max, c: g.c, dt: g.dt, n_steps: g.n_steps }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceSection {
    /// Background error standard deviation.
    pub sigma_b: f64,
    /// Observation error standard deviation (weight of the data term).
    pub sigma_o: f64,
    pub distance: DistanceMetric,
}

impl Default for CovarianceSection {
    fn default() -> Self {
        Self { sigma_b: 0.3, sigma_o: 0.02, distance: DistanceMetric::Absolute }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// CG stops when |f - H x| / |f| <= rel_tol.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { rel_tol: 3e-2, max_iter: 300 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FnoSection {
    pub n_modes: usize,
    pub width: usize,
    pub n_layers: usize,
    pub hidden_width: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    /// Early-stopping patience in epochs (0 disables early stopping).
    pub patience: usize,
    /// Fraction of the training file held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FnoSection {
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

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub master_seed: u64,
    /// Std-dev of Gaussian noise added to extracted observations (0: exact).
    pub obs_noise_std: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { master_seed: 42, obs_noise_std: 0.0 }
    }
}

/// The full experiment configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub covariance: CovarianceSection,
    pub solver: SolverSection,
    pub fno: FnoSection,
    pub dataset: DatasetSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn grid_config(&self) -> Result<GridConfig> {
        GridConfig::new(
            self.grid.n_x,
            self.grid.x_max,
            self.grid.c,
            self.grid.dt,
            self.grid.n_steps,
        )
    }

    pub fn fno_config(&self) -> FnoConfig {
        FnoConfig {
            n_modes: self.fno.n_modes,
            width: self.fno.width,
            n_layers: self.fno.n_layers,
            hidden_width: self.fno.hidden_width,
            lr: self.fno.lr,
            batch_size: self.fno.batch_size,
            n_epochs: self.fno.n_epochs,
            patience: self.fno.patience,
            val_fraction: self.fno.val_fraction,
            seed: self.fno.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_config()?;
        if !(self.covariance.sigma_b > 0.0) || !(self.covariance.sigma_o > 0.0) {
            return Err(Error::InvalidConfig("sigma_b and sigma_o must be positive".into()));
        }
        if !(self.solver.rel_tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::InvalidConfig("solver settings must be positive".into()));
        }
        let f = &self.fno;
        if f.n_modes == 0 || f.width == 0 || f.n_layers == 0 || f.hidden_width == 0 {
            return Err(Error::InvalidConfig("fno dimensions must be >= 1".into()));
        }
        if f.n_modes > self.grid.n_x / 2 + 1 {
            return Err(Error::InvalidConfig(format!(
                "n_modes = {} exceeds floor(n_x/2)+1 = {}",
                f.n_modes,
                self.grid.n_x / 2 + 1
            )));
        }
        if f.batch_size == 0 || f.n_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and n_epochs must be >= 1".into()));
        }
        if !(f.val_fraction >= 0.0 && f.val_fraction < 1.0) {
            return Err(Error::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        if self.dataset.obs_noise_std < 0.0 {
            return Err(Error::InvalidConfig("obs_noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let s = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = "[grid]\nn_x = 100\nbogus = 3\n";
        assert!(ExperimentConfig::from_toml_str(s).is_err());
        let s2 = "[nonsense]\nx = 1\n";
        assert!(ExperimentConfig::from_toml_str(s2).is_err());
    }

    #[test]
    fn partial_files_use_defaults() {
        let s = "[solver]\nrel_tol = 1e-4\n";
        let cfg = ExperimentConfig::from_toml_str(s).unwrap();
        assert_eq!(cfg.solver.rel_tol, 1e-4);
        assert_eq!(cfg.solver.max_iter, SolverSection::default().max_iter);
        assert_eq!(cfg.grid, GridSection::default());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("[covariance]\nsigma_b = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[grid]\nc = 2.0\n").is_err()); // Courant > 1
        assert!(ExperimentConfig::from_toml_str("[fno]\nn_modes = 99\n").is_err());
    }
}
