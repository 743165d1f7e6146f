//! Mini-batch Adam training of the FNO on (f, u0) pairs, with a seeded
//! train/validation split, early stopping and a divergence guard.
//!
//! Within-batch forward/backward work runs in parallel; per-sample
//! gradients and losses are merged in dataset-index order, so results do
//! not depend on the thread count and a full-batch epoch is invariant
//! under sample order.

use super::adam::{adam_step, AdamState};
use super::model::{backward, forward, FnoParams};
use super::spectral::RealFft;
use super::{FnoConfig, FnoModel, Standardizer};
use crate::datagen::Sample;
use crate::grid::GridConfig;
use crate::{Error, Result};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

/// Divergence guard: abort after this many consecutive bad epochs.
const DIVERGENCE_PATIENCE: usize = 5;
/// ... where "bad" means validation loss above this multiple of the first
/// epoch's validation loss (or NaN).
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Mean over the batch of `|pred - target| / |target|`.
pub fn loss_rel_l2(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::DimensionMismatch { expected: targets.len(), actual: preds.len() });
    }
    let mut acc = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        acc += sample_rel_l2(p, t)?;
    }
    Ok(acc / preds.len() as f64)
}

fn sample_rel_l2(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), actual: pred.len() });
    }
    let den: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::InvalidConfig("relative L2 against a zero-norm target".into()));
    }
    let num: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

/// One epoch row of the training log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

/// Per-epoch loss curve plus how the run ended.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,wall_time_s")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.wall_time_s)?;
        }
        Ok(())
    }
}

/// Assemble the `[2, n]` network input for one sample.
pub fn build_input(f_std: &[f64], coords: &[f64]) -> Array2<f64> {
    let n = f_std.len();
    Array2::from_shape_fn((2, n), |(c, j)| if c == 0 { f_std[j] } else { coords[j] })
}

/// Normalized cell-center coordinates `x_i / x_max` for a grid.
pub fn normalized_coords(n: usize, x_max: f64) -> Vec<f64> {
    let dx = x_max / n as f64;
    (0..n).map(|i| (-0.5 * x_max + (i as f64 + 0.5) * dx) / x_max).collect()
}

struct Prepared {
    input: Array2<f64>,
    target: Vec<f64>,
}

fn batch_pass(
    prepared: &[Prepared],
    indices: &[usize],
    params: &FnoParams,
    cfg: &FnoConfig,
    fft: &RealFft,
    with_grads: bool,
) -> Result<(Vec<f64>, Option<FnoParams>)> {
    let batch = indices.len() as f64;
    let per_sample: Vec<(f64, Option<FnoParams>)> = indices
        .par_iter()
        .map(|&i| -> Result<(f64, Option<FnoParams>)> {
            let p = &prepared[i];
            let (out, cache) = forward(params, &p.input, fft)?;
            let den: f64 = p.target.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff: Vec<f64> = out.iter().zip(&p.target).map(|(a, b)| a - b).collect();
            let num: f64 = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let loss = num / den;
            let grads = if with_grads {
                let mut g = FnoParams::zeros(cfg);
                if num > 0.0 {
                    let scale = 1.0 / (batch * num * den);
                    let g_out: Vec<f64> = diff.iter().map(|d| d * scale).collect();
                    backward(params, &cache, &g_out, fft, &mut g)?;
                }
                Some(g)
            } else {
                None
            };
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let losses: Vec<f64> = per_sample.iter().map(|(l, _)| *l).collect();
    let grads = if with_grads {
        let mut total = FnoParams::zeros(cfg);
        for (_, g) in per_sample {
            total.axpy(1.0, &g.expect("gradient requested"));
        }
        Some(total)
    } else {
        None
    };
    Ok((losses, grads))
}

/// Train an FNO mapping `f` to `u0_true` on the given samples.
///
/// The split, initialization and shuffles all derive from `cfg.seed`; the
/// input standardizer is fit on the training portion only and stored with
/// the model.
pub fn train(cfg: &FnoConfig, samples: &[Sample], grid: &GridConfig) -> Result<(FnoModel, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("training requires a nonempty dataset".into()));
    }
    let n = grid.n_x;
    if n < 2 * cfg.n_modes {
        return Err(Error::InvalidConfig(format!(
            "n_x = {n} below 2 * n_modes = {}",
            2 * cfg.n_modes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = FnoParams::init(cfg, &mut rng);

    // seeded split
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let standardizer = Standardizer::fit(
        train_idx.iter().map(|&i| samples[i].f.as_slice()),
    )?;

    let coords = normalized_coords(n, grid.x_max);
    let prepared: Vec<Prepared> = samples
        .iter()
        .map(|s| {
            let f_std = standardizer.standardize(s.f.as_slice());
            Prepared { input: build_input(&f_std, &coords), target: s.u0_true.as_slice().to_vec() }
        })
        .collect();

    let fft = RealFft::shared(n);
    let mut adam = AdamState::new(cfg);
    let mut log = TrainLog::default();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<FnoParams> = None;
    let mut since_best = 0usize;
    let mut first_val: Option<f64> = None;
    let mut bad_epochs = 0usize;
    let t0 = Instant::now();

    for epoch in 0..cfg.n_epochs {
        train_idx.shuffle(&mut rng);
        // per-sample losses keyed by dataset index, summed canonically
        let mut epoch_losses: Vec<(usize, f64)> = Vec::with_capacity(train_idx.len());
        for chunk in train_idx.chunks(cfg.batch_size) {
            let mut batch: Vec<usize> = chunk.to_vec();
            batch.sort_unstable();
            let (losses, grads) = batch_pass(&prepared, &batch, &params, cfg, &fft, true)?;
            adam_step(&mut params, &grads.expect("gradients"), &mut adam, cfg.lr);
            epoch_losses.extend(batch.iter().copied().zip(losses));
        }
        epoch_losses.sort_unstable_by_key(|(i, _)| *i);
        let train_loss =
            epoch_losses.iter().map(|(_, l)| l).sum::<f64>() / epoch_losses.len().max(1) as f64;

        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let (losses, _) = batch_pass(&prepared, &val_idx, &params, cfg, &fft, false)?;
            let mut ordered: Vec<(usize, f64)> = val_idx.iter().copied().zip(losses).collect();
            ordered.sort_unstable_by_key(|(i, _)| *i);
            ordered.iter().map(|(_, l)| l).sum::<f64>() / ordered.len() as f64
        };

        let wall = t0.elapsed().as_secs_f64();
        log.records.push(EpochRecord { epoch, train_loss, val_loss, wall_time_s: wall });
        log::info!("epoch {epoch}: train {train_loss:.4e} val {val_loss:.4e} ({wall:.1}s)");

        // divergence guard
        let reference = *first_val.get_or_insert(val_loss);
        if val_loss.is_nan() || val_loss > DIVERGENCE_FACTOR * reference {
            bad_epochs += 1;
            if bad_epochs >= DIVERGENCE_PATIENCE {
                log::error!(
                    "training diverged: val {val_loss:.3e} vs initial {reference:.3e} for {bad_epochs} epochs"
                );
                return Err(Error::Diverged(format!(
                    "validation loss {val_loss:.3e} (initial {reference:.3e}) for {bad_epochs} consecutive epochs at epoch {epoch}"
                )));
            }
        } else {
            bad_epochs = 0;
        }

        if val_loss < best_val {
            best_val = val_loss;
            log.best_epoch = epoch;
            since_best = 0;
            if cfg.patience > 0 {
                best_params = Some(params.clone());
            }
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log.stopped_early = true;
                log::info!("early stop at epoch {epoch}; best epoch {}", log.best_epoch);
                break;
            }
        }
    }

    if let Some(best) = best_params {
        params = best;
    }
    let model = FnoModel { config: cfg.clone(), params, standardizer };
    Ok((model, log))
}
