//! Real FFT helpers and the truncated spectral convolution used by the FNO
//! layers, with its exact adjoint for backpropagation.
//!
//! Conventions (matched by the naive-DFT oracle in the tests):
//! forward transform `X[k] = sum_j x[j] exp(-2 pi i j k / n)` for
//! `k = 0..n/2`; the inverse rebuilds a real signal from the half-spectrum,
//! ignoring the imaginary parts of the DC and Nyquist bins.
//!
//! Batched layout: a mini-batch of `B` signals with `C` channels lives in
//! one `[C, B*n]` array (sample `b` occupies the column block
//! `b*n..(b+1)*n`); spectra live in `[n_modes, C, B]` arrays so each mode
//! exposes a contiguous `[C, B]` matrix. Spectral weights are
//! `[n_modes, c_out, c_in]` for the same reason. Per-row/per-mode work runs
//! in parallel; every reduction is a fixed-order loop, so results do not
//! depend on the thread count.

use crate::{Error, Result};
use ndarray::{Array2, Array3, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Cached FFT plans for one transform length.
#[derive(Clone)]
pub struct RealFft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RealFft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// Plans from a process-wide cache keyed by length.
    pub fn shared(n: usize) -> Self {
        use std::collections::HashMap;
        use std::sync::{Mutex, OnceLock};
        static CACHE: OnceLock<Mutex<HashMap<usize, RealFft>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap();
        guard.entry(n).or_insert_with(|| RealFft::new(n)).clone()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of retained half-spectrum bins, `n/2 + 1`.
    pub fn n_half(&self) -> usize {
        self.n / 2 + 1
    }

    /// Forward real-to-complex transform (unnormalized half spectrum).
    pub fn rfft(&self, x: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(x.len(), self.n);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.truncate(self.n_half());
        buf
    }

    /// Inverse transform of a half spectrum whose bins beyond `spec.len()`
    /// are zero. Imaginary parts of DC and (when present) Nyquist are
    /// ignored, as for a Hermitian spectrum.
    pub fn irfft(&self, spec: &[Complex64]) -> Vec<f64> {
        let nh = self.n_half();
        debug_assert!(spec.len() <= nh);
        let mut full = vec![Complex64::new(0.0, 0.0); self.n];
        for (k, &c) in spec.iter().enumerate() {
            let c = if k == 0 || (self.n % 2 == 0 && k == self.n / 2) {
                Complex64::new(c.re, 0.0)
            } else {
                c
            };
            full[k] = c;
            if k > 0 && k < self.n - k {
                full[self.n - k] = c.conj();
            }
        }
        self.inverse.process(&mut full);
        let scale = 1.0 / self.n as f64;
        full.into_iter().map(|c| c.re * scale).collect()
    }

    /// Unnormalized inverse of a zero-padded half spectrum *without* the
    /// Hermitian mirror: `Re(sum_k spec[k] exp(+2 pi i j k / n))`. This is
    /// the adjoint of `rfft` restricted to the retained bins.
    pub fn irfft_adjoint(&self, spec: &[Complex64]) -> Vec<f64> {
        debug_assert!(spec.len() <= self.n_half());
        let mut full = vec![Complex64::new(0.0, 0.0); self.n];
        full[..spec.len()].copy_from_slice(spec);
        self.inverse.process(&mut full);
        full.into_iter().map(|c| c.re).collect()
    }
}

fn check_batch_shape(x: &Array2<f64>, batch: usize, fft: &RealFft, c: usize) -> Result<()> {
    if x.nrows() != c {
        return Err(Error::DimensionMismatch { expected: c, actual: x.nrows() });
    }
    if batch == 0 || x.ncols() != batch * fft.len() {
        return Err(Error::DimensionMismatch { expected: batch * fft.len(), actual: x.ncols() });
    }
    Ok(())
}

fn check_modes(fft: &RealFft, n_modes: usize) -> Result<()> {
    if n_modes == 0 || n_modes > fft.n_half() {
        return Err(Error::InvalidConfig(format!(
            "n_modes = {} outside 1..={} for n = {}",
            n_modes,
            fft.n_half(),
            fft.len()
        )));
    }
    Ok(())
}

/// Truncated input spectra of a `[C, B*n]` batch: `[n_modes, C, B]`.
fn rfft_truncated(x: &Array2<f64>, batch: usize, n_modes: usize, fft: &RealFft) -> Array3<Complex64> {
    let c = x.nrows();
    let n = fft.len();
    let mut out = Array3::from_elem((n_modes, c, batch), Complex64::new(0.0, 0.0));
    Zip::from(x.axis_iter(Axis(0)))
        .and(out.axis_iter_mut(Axis(1)))
        .par_for_each(|row, mut spec_c| {
            let row = row.as_slice().expect("contiguous row");
            for b in 0..batch {
                let spec = fft.rfft(&row[b * n..(b + 1) * n]);
                for m in 0..n_modes {
                    spec_c[(m, b)] = spec[m];
                }
            }
        });
    out
}

/// Per-mode complex product `y[m] = W[m] x[m]` with `W[m]` a
/// `[c_out, c_in]` matrix and `x[m]` a `[c_in, B]` block.
fn apply_mode_weights(
    x_hat: &Array3<Complex64>,
    w_re: &Array3<f64>,
    w_im: &Array3<f64>,
) -> Array3<Complex64> {
    let (n_modes, c_out, c_in) = w_re.dim();
    let batch = x_hat.dim().2;
    let mut y = Array3::from_elem((n_modes, c_out, batch), Complex64::new(0.0, 0.0));
    Zip::from(y.axis_iter_mut(Axis(0)))
        .and(x_hat.axis_iter(Axis(0)))
        .and(w_re.axis_iter(Axis(0)))
        .and(w_im.axis_iter(Axis(0)))
        .par_for_each(|mut y_m, x_m, wr_m, wi_m| {
            for o in 0..c_out {
                let y_row = y_m.row_mut(o);
                let y_row = y_row.into_slice().expect("contiguous mode rows");
                for i in 0..c_in {
                    let w = Complex64::new(wr_m[(o, i)], wi_m[(o, i)]);
                    let x_row = x_m.row(i);
                    let x_row = x_row.to_slice().expect("contiguous mode rows");
                    for (yv, xv) in y_row.iter_mut().zip(x_row) {
                        *yv += w * xv;
                    }
                }
            }
        });
    y
}

/// Inverse transforms of per-mode coefficient blocks back to `[C, B*n]`.
fn irfft_blocks(y: &Array3<Complex64>, batch: usize, fft: &RealFft) -> Array2<f64> {
    let (n_modes, c_out, _) = y.dim();
    let n = fft.len();
    let mut out = Array2::zeros((c_out, batch * n));
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(y.axis_iter(Axis(1)))
        .par_for_each(|mut row, y_c| {
            let row = row.as_slice_mut().expect("contiguous row");
            let mut spec = vec![Complex64::new(0.0, 0.0); n_modes];
            for b in 0..batch {
                for m in 0..n_modes {
                    spec[m] = y_c[(m, b)];
                }
                row[b * n..(b + 1) * n].copy_from_slice(&fft.irfft(&spec));
            }
        });
    out
}

/// Truncated spectral convolution of a `[c_in, B*n]` batch. Returns the
/// `[c_out, B*n]` output and the truncated input spectra (the cache needed
/// by [`spectral_conv_backward_batch`]).
pub fn spectral_conv_batch(
    x: &Array2<f64>,
    batch: usize,
    w_re: &Array3<f64>,
    w_im: &Array3<f64>,
    fft: &RealFft,
) -> Result<(Array2<f64>, Array3<Complex64>)> {
    let (n_modes, _, c_in) = w_re.dim();
    if w_im.dim() != w_re.dim() {
        return Err(Error::InvalidConfig("spectral weight shapes disagree".into()));
    }
    check_batch_shape(x, batch, fft, c_in)?;
    check_modes(fft, n_modes)?;
    let x_hat = rfft_truncated(x, batch, n_modes, fft);
    let y = apply_mode_weights(&x_hat, w_re, w_im);
    Ok((irfft_blocks(&y, batch, fft), x_hat))
}

/// Gradients of the spectral convolution: given `d loss / d out` for the
/// whole batch, produce `d loss / d x` and the summed weight gradients.
/// Exact adjoint of [`spectral_conv_batch`] (finite-difference checked).
pub fn spectral_conv_backward_batch(
    g_out: &Array2<f64>,
    batch: usize,
    x_hat: &Array3<Complex64>,
    w_re: &Array3<f64>,
    w_im: &Array3<f64>,
    fft: &RealFft,
) -> Result<(Array2<f64>, Array3<f64>, Array3<f64>)> {
    let (n_modes, c_out, c_in) = w_re.dim();
    check_batch_shape(g_out, batch, fft, c_out)?;
    if x_hat.dim() != (n_modes, c_in, batch) {
        return Err(Error::InvalidConfig("spectral cache shape mismatch".into()));
    }

    let n = fft.len();
    let nyquist = if n % 2 == 0 { Some(n / 2) } else { None };

    // d loss / d Y: rescaled forward transform of the output gradient, with
    // the DC/Nyquist imaginary parts dropped (they do not reach the output).
    let mut g_y = Array3::from_elem((n_modes, c_out, batch), Complex64::new(0.0, 0.0));
    Zip::from(g_out.axis_iter(Axis(0)))
        .and(g_y.axis_iter_mut(Axis(1)))
        .par_for_each(|row, mut g_c| {
            let row = row.as_slice().expect("contiguous row");
            for b in 0..batch {
                let spec = fft.rfft(&row[b * n..(b + 1) * n]);
                for m in 0..n_modes {
                    let edge = m == 0 || Some(m) == nyquist;
                    let scale = if edge { 1.0 / n as f64 } else { 2.0 / n as f64 };
                    let v = spec[m] * scale;
                    g_c[(m, b)] = if edge { Complex64::new(v.re, 0.0) } else { v };
                }
            }
        });

    // weight gradients: dW[m][o][i] = sum_b gY[m][o][b] conj(X[m][i][b])
    let mut dw_re = Array3::zeros((n_modes, c_out, c_in));
    let mut dw_im = Array3::zeros((n_modes, c_out, c_in));
    Zip::from(dw_re.axis_iter_mut(Axis(0)))
        .and(dw_im.axis_iter_mut(Axis(0)))
        .and(g_y.axis_iter(Axis(0)))
        .and(x_hat.axis_iter(Axis(0)))
        .par_for_each(|mut dre_m, mut dim_m, gy_m, x_m| {
            for o in 0..c_out {
                let gy_row = gy_m.row(o);
                let gy_row = gy_row.to_slice().expect("contiguous mode rows");
                for i in 0..c_in {
                    let x_row = x_m.row(i);
                    let x_row = x_row.to_slice().expect("contiguous mode rows");
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (g, x) in gy_row.iter().zip(x_row) {
                        acc += g * x.conj();
                    }
                    dre_m[(o, i)] = acc.re;
                    dim_m[(o, i)] = acc.im;
                }
            }
        });

    // input-spectrum gradients: gX[m][i][b] = sum_o conj(W[m][o][i]) gY[m][o][b]
    let mut g_x = Array3::from_elem((n_modes, c_in, batch), Complex64::new(0.0, 0.0));
    Zip::from(g_x.axis_iter_mut(Axis(0)))
        .and(g_y.axis_iter(Axis(0)))
        .and(w_re.axis_iter(Axis(0)))
        .and(w_im.axis_iter(Axis(0)))
        .par_for_each(|mut gx_m, gy_m, wr_m, wi_m| {
            for i in 0..c_in {
                let gx_row = gx_m.row_mut(i);
                let gx_row = gx_row.into_slice().expect("contiguous mode rows");
                for o in 0..c_out {
                    let w = Complex64::new(wr_m[(o, i)], -wi_m[(o, i)]);
                    let gy_row = gy_m.row(o);
                    let gy_row = gy_row.to_slice().expect("contiguous mode rows");
                    for (gx, gy) in gx_row.iter_mut().zip(gy_row) {
                        *gx += w * gy;
                    }
                }
            }
        });

    // back through the forward transform
    let mut dx = Array2::zeros((c_in, batch * n));
    Zip::from(dx.axis_iter_mut(Axis(0)))
        .and(g_x.axis_iter(Axis(1)))
        .par_for_each(|mut row, gx_c| {
            let row = row.as_slice_mut().expect("contiguous row");
            let mut spec = vec![Complex64::new(0.0, 0.0); n_modes];
            for b in 0..batch {
                for m in 0..n_modes {
                    spec[m] = gx_c[(m, b)];
                }
                row[b * n..(b + 1) * n].copy_from_slice(&fft.irfft_adjoint(&spec));
            }
        });

    Ok((dx, dw_re, dw_im))
}

/// Single-signal spectral convolution (batch of one).
pub fn spectral_conv(
    x: &Array2<f64>,
    w_re: &Array3<f64>,
    w_im: &Array3<f64>,
    fft: &RealFft,
) -> Result<(Array2<f64>, Array3<Complex64>)> {
    spectral_conv_batch(x, 1, w_re, w_im, fft)
}

/// Single-signal adjoint of [`spectral_conv`].
pub fn spectral_conv_backward(
    g_out: &Array2<f64>,
    x_hat: &Array3<Complex64>,
    w_re: &Array3<f64>,
    w_im: &Array3<f64>,
    fft: &RealFft,
) -> Result<(Array2<f64>, Array3<f64>, Array3<f64>)> {
    spectral_conv_backward_batch(g_out, 1, x_hat, w_re, w_im, fft)
}
