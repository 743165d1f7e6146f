//! Scenario enumeration and dataset generation: backgrounds, SOAR-correlated
//! perturbations, true initial states, right-hand sides `f`, and the
//! train/test window split, written as binary record files plus a TOML
//! manifest.
//!
//! Every sample is reproducible from (master seed, window, index): the
//! per-sample seed is a splitmix64 chain over those three values, so
//! regeneration is order-independent and embarrassingly parallel.

use crate::assimilation::{rhs_f, VarProblem};
use crate::config::ExperimentConfig;
use crate::covariance::{apply_b_sqrt, build_soar, CovarianceModel, DistanceMetric, SoarParams};
use crate::grid::{propagate, propagate_to, GridConfig, StateVector};
use crate::observation::{extract_observations, ObsConfig};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Background wavenumbers alpha.
pub const ALPHAS: [f64; 3] = [2.0, 4.0, 6.0];
/// Background amplitudes beta.
pub const BETAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];
/// Background phases phi.
pub const PHIS: [f64; 3] = [0.0, std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_4];
/// Correlation lengths in units of dx.
pub const LENGTH_SCALE_STEPS: [usize; 5] = [5, 10, 15, 20, 25];
/// Spatial observation counts.
pub const N_SPACES: [usize; 4] = [2, 4, 6, 8];
/// Time-step intervals between observations.
pub const T_INTERVALS: [usize; 6] = [1, 4, 6, 10, 15, 20];

const DATASET_MAGIC: &[u8; 4] = b"FCGD";
const DATASET_VERSION: u32 = 1;

/// Which assimilation window a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// `[0, T]`
    Train,
    /// `[T, 2T]`: the target is the state at `T`, reached by propagating
    /// the sampled initial state through one full window.
    Test,
}

impl Window {
    pub fn tag(self) -> u8 {
        match self {
            Window::Train => 0,
            Window::Test => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Window::Train),
            1 => Ok(Window::Test),
            other => Err(Error::Format(format!("unknown window tag {other}"))),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Window::Train => "train.bin",
            Window::Test => "test.bin",
        }
    }
}

/// One point of the scenario grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    /// Correlation length in meters.
    pub length_scale: f64,
    pub n_space: usize,
    pub t_interval: usize,
    /// Derived per-sample seed (see [`derive_seed`]).
    pub seed: u64,
}

/// A training/evaluation pair plus the metadata that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub u0_true: StateVector,
    pub f: StateVector,
    pub params: ScenarioParams,
    pub window: Window,
    /// Hessian condition number, filled lazily by the harness.
    pub kappa: Option<f64>,
}

/// The periodic noise law: a finite sum of cosines with distinct integer
/// frequencies, normalized to zero mean and unit sample variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub n_terms: usize,
    /// Inclusive integer frequency range to draw from (without replacement).
    pub freq_range: (u32, u32),
    /// Uniform amplitude range.
    pub amp_range: (f64, f64),
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(seed: u64) -> Self {
        Self { n_terms: 5, freq_range: (1, 10), amp_range: (0.5, 1.0), seed }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed from (master seed, window, sample index).
pub fn derive_seed(master_seed: u64, window: Window, index: u64) -> u64 {
    let s = splitmix64(master_seed);
    let s = splitmix64(s ^ (window.tag() as u64).wrapping_shl(32));
    splitmix64(s ^ index)
}

/// Enumerate the full 225 x 24 scenario grid for one window, in the fixed
/// order alpha > beta > phi > L > n_space > t_interval.
pub fn scenario_grid(g: &GridConfig, master_seed: u64, window: Window) -> Vec<ScenarioParams> {
    let dx = g.dx();
    let mut out = Vec::with_capacity(ALPHAS.len() * BETAS.len() * PHIS.len() * LENGTH_SCALE_STEPS.len() * N_SPACES.len() * T_INTERVALS.len());
    let mut index = 0u64;
    for alpha in ALPHAS {
        for beta in BETAS {
            for phi in PHIS {
                for l in LENGTH_SCALE_STEPS {
                    for n_space in N_SPACES {
                        for t_interval in T_INTERVALS {
                            out.push(ScenarioParams {
                                alpha,
                                beta,
                                phi,
                                length_scale: l as f64 * dx,
                                n_space,
                                t_interval,
                                seed: derive_seed(master_seed, window, index),
                            });
                            index += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// The background family `u^b(x) = 0.5 + beta sin(alpha 2 pi x / x_max + phi)`
/// evaluated at cell centers.
pub fn background(alpha: f64, beta: f64, phi: f64, g: &GridConfig) -> StateVector {
    let xs = g.cell_centers();
    StateVector::from_fn(g.n_x, |i| {
        0.5 + beta * (alpha * 2.0 * std::f64::consts::PI * xs[i] / g.x_max + phi).sin()
    })
}

/// Draw the periodic cosine-sum noise field and normalize it to zero mean
/// and unit sample variance.
pub fn sample_noise(spec: &NoiseSpec, g: &GridConfig) -> Result<StateVector> {
    let (lo, hi) = spec.freq_range;
    if lo == 0 || hi < lo {
        return Err(Error::InvalidConfig("noise frequency range must be 1 <= lo <= hi".into()));
    }
    let n_candidates = (hi - lo + 1) as usize;
    if spec.n_terms == 0 || spec.n_terms > n_candidates {
        return Err(Error::InvalidConfig(format!(
            "n_terms = {} outside 1..={n_candidates}",
            spec.n_terms
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // distinct frequencies via a partial Fisher-Yates shuffle
    let mut candidates: Vec<u32> = (lo..=hi).collect();
    for m in 0..spec.n_terms {
        let j = rng.gen_range(m..candidates.len());
        candidates.swap(m, j);
    }
    let freqs = &candidates[..spec.n_terms];
    let amps: Vec<f64> =
        (0..spec.n_terms).map(|_| rng.gen_range(spec.amp_range.0..spec.amp_range.1)).collect();
    let phases: Vec<f64> =
        (0..spec.n_terms).map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI)).collect();

    let xs = g.cell_centers();
    let mut eta = StateVector::from_fn(g.n_x, |i| {
        let mut v = 0.0;
        for m in 0..spec.n_terms {
            v += amps[m]
                * (2.0 * std::f64::consts::PI * freqs[m] as f64 * xs[i] / g.x_max + phases[m]).cos();
        }
        v
    });
    let mean = eta.sum() / g.n_x as f64;
    for v in eta.as_mut_slice() {
        *v -= mean;
    }
    let var = eta.dot(&eta) / g.n_x as f64;
    if !(var > 0.0) {
        return Err(Error::InvalidConfig("degenerate noise draw with zero variance".into()));
    }
    let inv = 1.0 / var.sqrt();
    for v in eta.as_mut_slice() {
        *v *= inv;
    }
    Ok(eta)
}

/// `u0_true = u^b + B^{1/2} eta`.
pub fn make_true_init(
    ub: &StateVector,
    cov: &CovarianceModel,
    eta: &StateVector,
) -> Result<StateVector> {
    Ok(ub.add(&apply_b_sqrt(cov, eta)?))
}

/// Thread-safe cache of covariance models keyed by correlation length.
pub struct CovarianceCache {
    sigma_b: f64,
    sigma_o: f64,
    distance: DistanceMetric,
    n_x: usize,
    dx: f64,
    map: std::sync::Mutex<HashMap<u64, Arc<CovarianceModel>>>,
}

impl CovarianceCache {
    pub fn new(cfg: &ExperimentConfig, g: &GridConfig) -> Self {
        Self {
            sigma_b: cfg.covariance.sigma_b,
            sigma_o: cfg.covariance.sigma_o,
            distance: cfg.covariance.distance,
            n_x: g.n_x,
            dx: g.dx(),
            map: std::sync::Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, length_scale: f64) -> Result<Arc<CovarianceModel>> {
        let key = length_scale.to_bits();
        if let Some(m) = self.map.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let params = SoarParams {
            sigma_b: self.sigma_b,
            length_scale,
            n_x: self.n_x,
            dx: self.dx,
            distance: self.distance,
        };
        let built = Arc::new(build_soar(&params, self.sigma_o)?);
        Ok(self.map.lock().unwrap().entry(key).or_insert(built).clone())
    }

    /// Pre-build every model for the scenario grid (parallel-friendly).
    pub fn warm(&self, g: &GridConfig) -> Result<()> {
        for l in LENGTH_SCALE_STEPS {
            self.get(l as f64 * g.dx())?;
        }
        Ok(())
    }
}

/// Build the full 4D-Var problem a sample defines (its observation set is
/// re-extracted from the stored window-start truth).
pub fn sample_problem(
    sample_u0_true: &StateVector,
    params: &ScenarioParams,
    g: &GridConfig,
    cov: Arc<CovarianceModel>,
    obs_noise_std: f64,
) -> Result<VarProblem> {
    let oc = ObsConfig::new(params.n_space, params.t_interval, g.n_x, g.n_steps)?;
    let traj = propagate(sample_u0_true, g)?;
    let obs_seed = splitmix64(params.seed ^ 0x0B5E_55ED);
    let obs = extract_observations(&traj, &oc, obs_noise_std, obs_seed)?;
    let ub = background(params.alpha, params.beta, params.phi, g);
    VarProblem::new(*g, cov, obs, ub)
}

/// Generate one sample.
///
/// Train window: the truth is `u^b + B^{1/2} eta` and observations span
/// `[0, T]`. Test window: the same construction is propagated one full
/// window so the assimilation runs on `[T, 2T]`; the stored target is the
/// state at the start of that window (the operators are time-invariant, so
/// the shifted problem uses the same M).
pub fn generate_sample(
    params: &ScenarioParams,
    window: Window,
    g: &GridConfig,
    cov: Arc<CovarianceModel>,
    obs_noise_std: f64,
    index: u64,
) -> Result<Sample> {
    let ub = background(params.alpha, params.beta, params.phi, g);
    let eta = sample_noise(&NoiseSpec::new(params.seed), g)?;
    let u0 = make_true_init(&ub, &cov, &eta)?;
    let window_start = match window {
        Window::Train => u0,
        Window::Test => propagate_to(&u0, g, g.n_steps)?,
    };
    let problem = sample_problem(&window_start, params, g, cov, obs_noise_std)?;
    let f = rhs_f(&problem)?;
    Ok(Sample { index, u0_true: window_start, f, params: *params, window, kappa: None })
}

/// Manifest row: (index, alpha, beta, phi, L, n_space, t_interval, seed).
/// The seed is hex-encoded: TOML integers are signed and the derived
/// per-sample seeds use the full u64 range.
pub type ManifestTuple = (u64, f64, f64, f64, f64, u32, u32, String);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowManifest {
    pub window: Window,
    pub file: String,
    pub n_samples: usize,
    pub samples: Vec<ManifestTuple>,
}

/// Human-readable sidecar describing a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub sigma_b: f64,
    pub sigma_o: f64,
    pub obs_noise_std: f64,
    pub distance: DistanceMetric,
    pub n_x: usize,
    pub x_max: f64,
    pub c: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub windows: Vec<WindowManifest>,
}

fn manifest_tuple(s: &Sample) -> ManifestTuple {
    (
        s.index,
        s.params.alpha,
        s.params.beta,
        s.params.phi,
        s.params.length_scale,
        s.params.n_space as u32,
        s.params.t_interval as u32,
        format!("{:016x}", s.params.seed),
    )
}

/// Generate both windows of the dataset into `out_dir` (train.bin,
/// test.bin, manifest.toml). Returns the manifest.
pub fn generate_dataset(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let g = cfg.grid_config()?;
    let cache = CovarianceCache::new(cfg, &g);
    cache.warm(&g)?;

    let expected = ALPHAS.len() * BETAS.len() * PHIS.len() * LENGTH_SCALE_STEPS.len();
    assert_eq!(expected, 225, "scenario cardinality drifted");
    assert_eq!(N_SPACES.len() * T_INTERVALS.len(), 24, "observation cardinality drifted");

    let mut windows = Vec::new();
    for window in [Window::Train, Window::Test] {
        let grid_points = scenario_grid(&g, cfg.dataset.master_seed, window);
        let samples: Vec<Sample> = grid_points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let cov = cache.get(p.length_scale)?;
                generate_sample(p, window, &g, cov, cfg.dataset.obs_noise_std, i as u64)
            })
            .collect::<Result<Vec<_>>>()?;
        let path = out_dir.join(window.file_name());
        write_dataset(&path, window, &g, &samples)?;
        windows.push(WindowManifest {
            window,
            file: window.file_name().to_string(),
            n_samples: samples.len(),
            samples: samples.iter().map(manifest_tuple).collect(),
        });
    }

    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        master_seed: cfg.dataset.master_seed,
        sigma_b: cfg.covariance.sigma_b,
        sigma_o: cfg.covariance.sigma_o,
        obs_noise_std: cfg.dataset.obs_noise_std,
        distance: cfg.covariance.distance,
        n_x: g.n_x,
        x_max: g.x_max,
        c: g.c,
        dt: g.dt,
        n_steps: g.n_steps,
        windows,
    };
    let manifest_path = out_dir.join("manifest.toml");
    if manifest_path.exists() {
        // refuse to silently mix two generations in one directory
        let existing = std::fs::read_to_string(&manifest_path)?;
        let fresh = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        if existing != fresh {
            return Err(Error::InvalidConfig(format!(
                "manifest already exists at {} and differs; refusing to overwrite",
                manifest_path.display()
            )));
        }
    }
    std::fs::write(
        &manifest_path,
        toml::to_string_pretty(&manifest).map_err(|e| Error::Format(format!("manifest serialization: {e}")))?,
    )?;
    Ok(manifest)
}

/// Write one window's samples as a binary record file.
pub fn write_dataset(
    path: impl AsRef<Path>,
    window: Window,
    g: &GridConfig,
    samples: &[Sample],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(g.n_x as u32).to_le_bytes())?;
    w.write_all(&[window.tag()])?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.index.to_le_bytes())?;
        w.write_all(&s.params.alpha.to_le_bytes())?;
        w.write_all(&s.params.beta.to_le_bytes())?;
        w.write_all(&s.params.phi.to_le_bytes())?;
        w.write_all(&s.params.length_scale.to_le_bytes())?;
        w.write_all(&(s.params.n_space as u32).to_le_bytes())?;
        w.write_all(&(s.params.t_interval as u32).to_le_bytes())?;
        w.write_all(&s.params.seed.to_le_bytes())?;
        for v in s.u0_true.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in s.f.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32_le(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("dataset: {what}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64_le(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("dataset: {what}: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64_le(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("dataset: {what}: {e}")))?;
    Ok(f64::from_le_bytes(b))
}

/// Read a window file back.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(Window, usize, Vec<Sample>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Format(format!("dataset: magic: {e}")))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not an fnocg dataset file".into()));
    }
    let version = read_u32_le(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_x = read_u32_le(&mut r, "n_x")? as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|e| Error::Format(format!("dataset: window tag: {e}")))?;
    let window = Window::from_tag(tag[0])?;
    let n_samples = read_u64_le(&mut r, "sample count")? as usize;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let index = read_u64_le(&mut r, "index")?;
        let alpha = read_f64_le(&mut r, "alpha")?;
        let beta = read_f64_le(&mut r, "beta")?;
        let phi = read_f64_le(&mut r, "phi")?;
        let length_scale = read_f64_le(&mut r, "length_scale")?;
        let n_space = read_u32_le(&mut r, "n_space")? as usize;
        let t_interval = read_u32_le(&mut r, "t_interval")? as usize;
        let seed = read_u64_le(&mut r, "seed")?;
        let mut u0 = vec![0.0; n_x];
        for v in &mut u0 {
            *v = read_f64_le(&mut r, "u0_true")?;
        }
        let mut f = vec![0.0; n_x];
        for v in &mut f {
            *v = read_f64_le(&mut r, "f")?;
        }
        samples.push(Sample {
            index,
            u0_true: StateVector::new(u0),
            f: StateVector::new(f),
            params: ScenarioParams { alpha, beta, phi, length_scale, n_space, t_interval, seed },
            window,
            kappa: None,
        });
    }
    Ok((window, n_x, samples))
}
