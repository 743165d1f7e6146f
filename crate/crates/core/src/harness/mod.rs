//! Experiment harness: runs CG, standalone FNO and FNO-CG over a test set,
//! collects relative errors, iteration counts and condition numbers, and
//! writes the records/summary/deltas CSV files and SVG figures.

pub mod plots;

use crate::assimilation::{cg_solve_observed, condition_number, HessianOperator};
use crate::config::ExperimentConfig;
use crate::datagen::{read_dataset, sample_problem, CovarianceCache, Sample, Window};
use crate::fno::{fno_forward, load_model, FnoModel};
use crate::grid::{GridConfig, StateVector};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

/// Which solver produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Cg,
    Fno,
    FnoCg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cg => "CG",
            Method::Fno => "FNO",
            Method::FnoCg => "FNO-CG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CG" => Ok(Method::Cg),
            "FNO" => Ok(Method::Fno),
            "FNO-CG" => Ok(Method::FnoCg),
            other => Err(Error::Format(format!("unknown method '{other}'"))),
        }
    }
}

/// One (sample, method) outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub sample_id: u64,
    pub method: Method,
    pub relative_error: f64,
    /// CG loop iterations; absent for the standalone FNO.
    pub n_iterations: Option<usize>,
    pub kappa: f64,
    pub wall_time_s: f64,
    pub converged: bool,
}

/// Aggregates over one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub n_samples: usize,
    pub mean_error_cg: f64,
    pub mean_error_fno: f64,
    pub mean_error_fnocg: f64,
    pub mean_iterations_cg: f64,
    pub mean_iterations_fnocg: f64,
    /// `(CG - FNO-CG) / CG * 100` over the same samples.
    pub error_reduction_pct: f64,
    pub iteration_reduction_pct: f64,
}

/// CG settings shared by the CG and FNO-CG runs.
#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub rel_tol: f64,
    pub max_iter: usize,
}

/// Relative recovery error `|pred - truth| / |truth|`.
pub fn relative_error(u0_pred: &StateVector, u0_true: &StateVector) -> Result<f64> {
    if u0_pred.len() != u0_true.len() {
        return Err(Error::DimensionMismatch { expected: u0_true.len(), actual: u0_pred.len() });
    }
    let den = u0_true.norm();
    if den == 0.0 {
        return Err(Error::InvalidConfig("relative error against a zero-norm truth".into()));
    }
    Ok(u0_pred.sub(u0_true).norm() / den)
}

/// Error-vs-iteration curve for one (sample, method) run.
#[derive(Debug, Clone)]
pub struct ConvergenceCurve {
    pub sample_id: u64,
    pub method: Method,
    /// `(iteration, relative error)` starting from the initial iterate.
    pub points: Vec<(usize, f64)>,
}

/// Run one method on one sample. `kappa` is supplied by the caller (it
/// depends only on (L, n_space, t_interval) and is memoized upstream).
#[allow(clippy::too_many_arguments)]
pub fn run_method(
    sample: &Sample,
    method: Method,
    model: Option<&FnoModel>,
    settings: SolverSettings,
    h: &HessianOperator,
    kappa: f64,
    track_curve: bool,
) -> Result<(RunRecord, Option<ConvergenceCurve>)> {
    let p = h.problem();
    let truth = &sample.u0_true;
    let start = Instant::now();

    let make_curve = |pts: Vec<(usize, f64)>| ConvergenceCurve {
        sample_id: sample.index,
        method,
        points: pts,
    };

    let (pred, n_iterations, converged, curve) = match method {
        Method::Fno => {
            let m = model.ok_or_else(|| {
                Error::InvalidConfig("FNO evaluation requires a model".into())
            })?;
            let pred = fno_forward(m, &sample.f, p.grid.x_max)?;
            (pred, None, true, None)
        }
        Method::Cg | Method::FnoCg => {
            let x0 = match method {
                Method::Cg => p.background.clone(),
                _ => {
                    let m = model.ok_or_else(|| {
                        Error::InvalidConfig("FNO-CG requires a model".into())
                    })?;
                    fno_forward(m, &sample.f, p.grid.x_max)?
                }
            };
            let mut pts = Vec::new();
            let res = cg_solve_observed(h, &sample.f, &x0, settings.rel_tol, settings.max_iter, |it, x| {
                if track_curve {
                    if let Ok(e) = relative_error(x, truth) {
                        pts.push((it, e));
                    }
                }
            })?;
            let curve = track_curve.then(|| make_curve(pts));
            (res.solution, Some(res.n_iterations), res.converged, curve)
        }
    };

    let record = RunRecord {
        sample_id: sample.index,
        method,
        relative_error: relative_error(&pred, truth)?,
        n_iterations,
        kappa,
        wall_time_s: start.elapsed().as_secs_f64(),
        converged,
    };
    Ok((record, curve))
}

/// Per-sample error/iteration deltas against the CG baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRecord {
    pub sample_id: u64,
    pub kappa: f64,
    pub delta_e_fno: f64,
    pub delta_e_fnocg: f64,
    pub delta_n_fnocg: f64,
}

/// Everything `run_suite` produces, also available in memory for tests.
#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub records: Vec<RunRecord>,
    pub deltas: Vec<DeltaRecord>,
    pub summary: SummaryStats,
    pub curve_sample_ids: Vec<u64>,
    pub curves: Vec<ConvergenceCurve>,
}

/// Memoizes the Hessian condition number per (L, n_space, t_interval); the
/// operator structure does not depend on the background or the observed
/// values, so one representative problem per key suffices.
struct KappaCache {
    map: Mutex<HashMap<(u64, usize, usize), f64>>,
}

impl KappaCache {
    fn new() -> Self {
        Self { map: Mutex::new(HashMap::new()) }
    }

    fn get(&self, sample: &Sample, h: &HessianOperator) -> Result<f64> {
        let key = (
            sample.params.length_scale.to_bits(),
            sample.params.n_space,
            sample.params.t_interval,
        );
        if let Some(k) = self.map.lock().unwrap().get(&key) {
            return Ok(*k);
        }
        let k = condition_number(h)?;
        self.map.lock().unwrap().insert(key, k);
        Ok(k)
    }
}

/// Evaluate the three methods over every sample of the test window and
/// write records.csv, deltas.csv, summary.csv, curves.csv and
/// evaluation.toml into `out_dir`.
pub fn run_suite(
    cfg: &ExperimentConfig,
    dataset_dir: impl AsRef<Path>,
    model_path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<SuiteOutput> {
    let dataset_path = dataset_dir.as_ref().join(Window::Test.file_name());
    let (window, n_x, mut samples) = read_dataset(&dataset_path)?;
    if window != Window::Test {
        return Err(Error::InvalidConfig(format!(
            "{} does not hold the test window",
            dataset_path.display()
        )));
    }
    let g = cfg.grid_config()?;
    if n_x != g.n_x {
        return Err(Error::DimensionMismatch { expected: g.n_x, actual: n_x });
    }
    let model = load_model(model_path)?;
    samples.sort_by_key(|s| s.index);
    run_suite_on(cfg, &g, &mut samples, &model, out_dir)
}

/// Core of [`run_suite`], reusable on in-memory samples.
pub fn run_suite_on(
    cfg: &ExperimentConfig,
    g: &GridConfig,
    samples: &mut [Sample],
    model: &FnoModel,
    out_dir: impl AsRef<Path>,
) -> Result<SuiteOutput> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let settings = SolverSettings { rel_tol: cfg.solver.rel_tol, max_iter: cfg.solver.max_iter };
    let cov_cache = CovarianceCache::new(cfg, g);
    cov_cache.warm(g)?;
    let kappa_cache = KappaCache::new();

    // seeded choice of the convergence-curve samples
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dataset.master_seed ^ 0xF162_u64);
    let mut curve_ids: Vec<u64> = Vec::new();
    if !samples.is_empty() {
        let mut ids: Vec<u64> = samples.iter().map(|s| s.index).collect();
        ids.shuffle(&mut rng);
        curve_ids = ids.into_iter().take(3).collect();
        curve_ids.sort_unstable();
    }

    let results: Vec<(Vec<RunRecord>, Vec<ConvergenceCurve>, f64)> = samples
        .par_iter()
        .map(|sample| -> Result<(Vec<RunRecord>, Vec<ConvergenceCurve>, f64)> {
            let cov = cov_cache.get(sample.params.length_scale)?;
            let problem =
                sample_problem(&sample.u0_true, &sample.params, g, cov, cfg.dataset.obs_noise_std)?;
            let h = HessianOperator::new(problem);
            let kappa = kappa_cache.get(sample, &h)?;
            let track = curve_ids.contains(&sample.index);
            let mut records = Vec::with_capacity(3);
            let mut curves = Vec::new();
            for method in [Method::Cg, Method::Fno, Method::FnoCg] {
                let (rec, curve) =
                    run_method(sample, method, Some(model), settings, &h, kappa, track)?;
                records.push(rec);
                if let Some(c) = curve {
                    curves.push(c);
                }
            }
            Ok((records, curves, kappa))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(samples.len() * 3);
    let mut curves = Vec::new();
    for ((recs, cs, kappa), sample) in results.into_iter().zip(samples.iter_mut()) {
        sample.kappa = Some(kappa);
        records.extend(recs);
        curves.extend(cs);
    }

    let deltas = compute_deltas(&records)?;
    let summary = summarize(&records)?;

    write_records_csv(&records, out_dir.join("records.csv"))?;
    write_deltas_csv(&deltas, out_dir.join("deltas.csv"))?;
    write_summary_csv(&summary, out_dir.join("summary.csv"))?;
    write_curves_csv(&curves, out_dir.join("curves.csv"))?;

    let meta = format!(
        "rel_tol = {}\nmax_iter = {}\nn_samples = {}\ncurve_sample_ids = {:?}\niteration_convention = \"loop iterations, one Hessian-vector product each; the initial-residual product is not counted\"\n",
        settings.rel_tol,
        settings.max_iter,
        samples.len(),
        curve_ids,
    );
    std::fs::write(out_dir.join("evaluation.toml"), meta)?;

    Ok(SuiteOutput { records, deltas, summary, curve_sample_ids: curve_ids, curves })
}

/// Group records by sample and form the per-sample deltas.
pub fn compute_deltas(records: &[RunRecord]) -> Result<Vec<DeltaRecord>> {
    let mut by_sample: HashMap<u64, HashMap<Method, &RunRecord>> = HashMap::new();
    for r in records {
        by_sample.entry(r.sample_id).or_default().insert(r.method, r);
    }
    let mut out = Vec::with_capacity(by_sample.len());
    for (id, m) in by_sample {
        let (cg, fno, fnocg) = match (m.get(&Method::Cg), m.get(&Method::Fno), m.get(&Method::FnoCg)) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "sample {id} is missing one of the three methods"
                )))
            }
        };
        out.push(DeltaRecord {
            sample_id: id,
            kappa: cg.kappa,
            delta_e_fno: fno.relative_error - cg.relative_error,
            delta_e_fnocg: fnocg.relative_error - cg.relative_error,
            delta_n_fnocg: fnocg.n_iterations.unwrap_or(0) as f64
                - cg.n_iterations.unwrap_or(0) as f64,
        });
    }
    out.sort_by_key(|d| d.sample_id);
    Ok(out)
}

/// Aggregate per-method means and the FNO-CG-vs-CG reduction percentages.
pub fn summarize(records: &[RunRecord]) -> Result<SummaryStats> {
    let mut sums: HashMap<Method, (f64, f64, usize)> = HashMap::new();
    for r in records {
        let e = sums.entry(r.method).or_insert((0.0, 0.0, 0));
        e.0 += r.relative_error;
        e.1 += r.n_iterations.unwrap_or(0) as f64;
        e.2 += 1;
    }
    let take = |m: Method| -> Result<(f64, f64, usize)> {
        let (es, is, n) = sums
            .get(&m)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("no records for {}", m.as_str())))?;
        Ok((es / n as f64, is / n as f64, n))
    };
    let (e_cg, i_cg, n_cg) = take(Method::Cg)?;
    let (e_fno, _, n_fno) = take(Method::Fno)?;
    let (e_fnocg, i_fnocg, n_fnocg) = take(Method::FnoCg)?;
    if n_cg != n_fno || n_cg != n_fnocg {
        return Err(Error::InvalidConfig("method record counts disagree".into()));
    }
    Ok(SummaryStats {
        n_samples: n_cg,
        mean_error_cg: e_cg,
        mean_error_fno: e_fno,
        mean_error_fnocg: e_fnocg,
        mean_iterations_cg: i_cg,
        mean_iterations_fnocg: i_fnocg,
        error_reduction_pct: (e_cg - e_fnocg) / e_cg * 100.0,
        iteration_reduction_pct: (i_cg - i_fnocg) / i_cg * 100.0,
    })
}

pub fn write_records_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "sample_id,method,relative_error,n_iterations,kappa,wall_time_s,converged")?;
    for r in records {
        let iters = r.n_iterations.map(|n| n.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.sample_id,
            r.method.as_str(),
            r.relative_error,
            iters,
            r.kappa,
            r.wall_time_s,
            r.converged
        )?;
    }
    Ok(())
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "sample_id,method,relative_error,n_iterations,kappa,wall_time_s,converged" {
                return Err(Error::Format("unexpected records.csv header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Format(format!("records.csv line {i}: expected 7 fields")));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("records.csv line {i}: bad {what} '{s}'")))
        };
        out.push(RunRecord {
            sample_id: parts[0]
                .parse()
                .map_err(|_| Error::Format(format!("records.csv line {i}: bad sample id")))?,
            method: Method::parse(parts[1])?,
            relative_error: parse_f(parts[2], "relative_error")?,
            n_iterations: if parts[3].is_empty() {
                None
            } else {
                Some(parts[3].parse().map_err(|_| {
                    Error::Format(format!("records.csv line {i}: bad n_iterations"))
                })?)
            },
            kappa: parse_f(parts[4], "kappa")?,
            wall_time_s: parse_f(parts[5], "wall_time_s")?,
            converged: match parts[6] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Format(format!(
                        "records.csv line {i}: bad converged flag '{other}'"
                    )))
                }
            },
        });
    }
    Ok(out)
}

pub fn write_deltas_csv(deltas: &[DeltaRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "sample_id,kappa,delta_e_fno,delta_e_fnocg,delta_n_fnocg")?;
    for d in deltas {
        writeln!(
            w,
            "{},{},{},{},{}",
            d.sample_id, d.kappa, d.delta_e_fno, d.delta_e_fnocg, d.delta_n_fnocg
        )?;
    }
    Ok(())
}

pub fn read_deltas_csv(path: impl AsRef<Path>) -> Result<Vec<DeltaRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!("deltas.csv line {i}: expected 5 fields")));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("deltas.csv line {i}: bad float '{s}'")))
        };
        out.push(DeltaRecord {
            sample_id: parts[0]
                .parse()
                .map_err(|_| Error::Format(format!("deltas.csv line {i}: bad sample id")))?,
            kappa: parse_f(parts[1])?,
            delta_e_fno: parse_f(parts[2])?,
            delta_e_fnocg: parse_f(parts[3])?,
            delta_n_fnocg: parse_f(parts[4])?,
        });
    }
    Ok(out)
}

pub fn write_summary_csv(s: &SummaryStats, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "n_samples,mean_error_cg,mean_error_fno,mean_error_fnocg,mean_iterations_cg,mean_iterations_fnocg,error_reduction_pct,iteration_reduction_pct"
    )?;
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        s.n_samples,
        s.mean_error_cg,
        s.mean_error_fno,
        s.mean_error_fnocg,
        s.mean_iterations_cg,
        s.mean_iterations_fnocg,
        s.error_reduction_pct,
        s.iteration_reduction_pct
    )?;
    Ok(())
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<SummaryStats> {
    let text = std::fs::read_to_string(path)?;
    let line = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::Format("summary.csv has no data row".into()))?;
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != 8 {
        return Err(Error::Format("summary.csv: expected 8 fields".into()));
    }
    let f = |i: usize| -> Result<f64> {
        parts[i].parse().map_err(|_| Error::Format(format!("summary.csv: bad field {i}")))
    };
    Ok(SummaryStats {
        n_samples: parts[0].parse().map_err(|_| Error::Format("summary.csv: bad n".into()))?,
        mean_error_cg: f(1)?,
        mean_error_fno: f(2)?,
        mean_error_fnocg: f(3)?,
        mean_iterations_cg: f(4)?,
        mean_iterations_fnocg: f(5)?,
        error_reduction_pct: f(6)?,
        iteration_reduction_pct: f(7)?,
    })
}

pub fn write_curves_csv(curves: &[ConvergenceCurve], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "sample_id,method,iteration,relative_error")?;
    for c in curves {
        for (it, e) in &c.points {
            writeln!(w, "{},{},{},{}", c.sample_id, c.method.as_str(), it, e)?;
        }
    }
    Ok(())
}

pub fn read_curves_csv(path: impl AsRef<Path>) -> Result<Vec<ConvergenceCurve>> {
    let text = std::fs::read_to_string(path)?;
    let mut grouped: Vec<ConvergenceCurve> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("curves.csv line {i}: expected 4 fields")));
        }
        let sample_id: u64 = parts[0]
            .parse()
            .map_err(|_| Error::Format(format!("curves.csv line {i}: bad sample id")))?;
        let method = Method::parse(parts[1])?;
        let it: usize = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("curves.csv line {i}: bad iteration")))?;
        let e: f64 = parts[3]
            .parse()
            .map_err(|_| Error::Format(format!("curves.csv line {i}: bad error")))?;
        match grouped.last_mut() {
            Some(c) if c.sample_id == sample_id && c.method == method => c.points.push((it, e)),
            _ => grouped.push(ConvergenceCurve { sample_id, method, points: vec![(it, e)] }),
        }
    }
    Ok(grouped)
}
