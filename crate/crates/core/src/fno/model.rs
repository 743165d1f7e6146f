//! FNO parameters, forward pass and backpropagation.
//!
//! Architecture: pointwise lifting (2 -> width), `n_layers` spectral blocks
//! (truncated spectral convolution plus a pointwise affine skip, GELU
//! between blocks but not after the last), then a two-stage pointwise
//! projection (width -> hidden -> 1) with GELU between the stages.
//!
//! A mini-batch is one `[channels, batch*n]` tensor (per-sample column
//! blocks), so the pointwise stages are single GEMMs and the whole batch
//! shares one backward pass. Parallel pieces either write disjoint outputs
//! or reduce over a fixed chunk order, keeping results independent of the
//! thread count.

use super::spectral::{spectral_conv_batch, spectral_conv_backward_batch, RealFft};
use super::FnoConfig;
use crate::{Error, Result};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Fixed parallel split for the batched matrix products.
const GEMM_CHUNKS: usize = 4;

pub(crate) fn gelu(x: f64) -> f64 {
    const A: f64 = 0.044_715;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const A: f64 = 0.044_715;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * A * x * x)
}

/// `a . b` with the columns of `b` split into a fixed number of chunks
/// evaluated in parallel (disjoint output blocks, order-independent).
fn par_matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (m, n) = (a.nrows(), b.ncols());
    if n < 2 * GEMM_CHUNKS {
        return a.dot(b);
    }
    let chunk = n.div_ceil(GEMM_CHUNKS);
    let mut out = Array2::zeros((m, n));
    let pieces: Vec<(usize, Array2<f64>)> = (0..GEMM_CHUNKS)
        .into_par_iter()
        .filter_map(|c| {
            let lo = c * chunk;
            if lo >= n {
                return None;
            }
            let hi = ((c + 1) * chunk).min(n);
            Some((lo, a.dot(&b.slice(s![.., lo..hi]))))
        })
        .collect();
    for (lo, piece) in pieces {
        out.slice_mut(s![.., lo..lo + piece.ncols()]).assign(&piece);
    }
    out
}

/// `a . b` where the shared dimension is large (a reduction over the
/// batch): split it into a fixed number of chunks and sum the partial
/// products in chunk order.
fn par_matmul_kfold(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let k = a.ncols();
    if k < 2 * GEMM_CHUNKS {
        return a.dot(b);
    }
    let chunk = k.div_ceil(GEMM_CHUNKS);
    let pieces: Vec<Array2<f64>> = (0..GEMM_CHUNKS)
        .into_par_iter()
        .filter_map(|c| {
            let lo = c * chunk;
            if lo >= k {
                return None;
            }
            let hi = ((c + 1) * chunk).min(k);
            Some(a.slice(s![.., lo..hi]).dot(&b.slice(s![lo..hi, ..])))
        })
        .collect();
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for piece in pieces {
        out += &piece;
    }
    out
}

/// One spectral block: complex mode weights plus the pointwise skip.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLayer {
    /// `[n_modes, width_out, width_in]`
    pub w_re: Array3<f64>,
    pub w_im: Array3<f64>,
    /// `[width_out, width_in]`
    pub skip_w: Array2<f64>,
    pub skip_b: Array1<f64>,
}

/// All trainable tensors. Also reused as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoParams {
    /// `[width, 2]`: lifting from (f, x/x_max) channels.
    pub lift_w: Array2<f64>,
    pub lift_b: Array1<f64>,
    pub layers: Vec<SpectralLayer>,
    /// `[hidden, width]`
    pub proj1_w: Array2<f64>,
    pub proj1_b: Array1<f64>,
    /// `[hidden]`
    pub proj2_w: Array1<f64>,
    pub proj2_b: f64,
}

impl FnoParams {
    /// Random initialization: spectral weights uniform on `[0, 1/width^2)`
    /// per real/imaginary part, affine maps uniform on
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(cfg: &FnoConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        let h = cfg.hidden_width;
        let m = cfg.n_modes;
        let spec_scale = 1.0 / (w * w) as f64;
        let mut affine = |fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.gen_range(-bound..bound)
        };
        let lift_w = Array2::from_shape_fn((w, 2), |_| affine(2, rng));
        let lift_b = Array1::from_shape_fn(w, |_| affine(2, rng));
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let w_re = Array3::from_shape_fn((m, w, w), |_| rng.gen_range(0.0..spec_scale));
                let w_im = Array3::from_shape_fn((m, w, w), |_| rng.gen_range(0.0..spec_scale));
                let skip_w = Array2::from_shape_fn((w, w), |_| affine(w, rng));
                let skip_b = Array1::from_shape_fn(w, |_| affine(w, rng));
                SpectralLayer { w_re, w_im, skip_w, skip_b }
            })
            .collect();
        let proj1_w = Array2::from_shape_fn((h, w), |_| affine(w, rng));
        let proj1_b = Array1::from_shape_fn(h, |_| affine(w, rng));
        let proj2_w = Array1::from_shape_fn(h, |_| affine(h, rng));
        let proj2_b = affine(h, rng);
        Self { lift_w, lift_b, layers, proj1_w, proj1_b, proj2_w, proj2_b }
    }

    pub fn zeros(cfg: &FnoConfig) -> Self {
        let w = cfg.width;
        let h = cfg.hidden_width;
        let m = cfg.n_modes;
        Self {
            lift_w: Array2::zeros((w, 2)),
            lift_b: Array1::zeros(w),
            layers: (0..cfg.n_layers)
                .map(|_| SpectralLayer {
                    w_re: Array3::zeros((m, w, w)),
                    w_im: Array3::zeros((m, w, w)),
                    skip_w: Array2::zeros((w, w)),
                    skip_b: Array1::zeros(w),
                })
                .collect(),
            proj1_w: Array2::zeros((h, w)),
            proj1_b: Array1::zeros(h),
            proj2_w: Array1::zeros(h),
            proj2_b: 0.0,
        }
    }

    /// Named views of every tensor, in a fixed order shared by the flat
    /// accessors and the serializer.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("lift_w".into(), self.lift_w.shape().to_vec(), self.lift_w.as_slice().unwrap()),
            ("lift_b".into(), self.lift_b.shape().to_vec(), self.lift_b.as_slice().unwrap()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}_w_re"), l.w_re.shape().to_vec(), l.w_re.as_slice().unwrap()));
            out.push((format!("layer{i}_w_im"), l.w_im.shape().to_vec(), l.w_im.as_slice().unwrap()));
            out.push((format!("layer{i}_skip_w"), l.skip_w.shape().to_vec(), l.skip_w.as_slice().unwrap()));
            out.push((format!("layer{i}_skip_b"), l.skip_b.shape().to_vec(), l.skip_b.as_slice().unwrap()));
        }
        out.push(("proj1_w".into(), self.proj1_w.shape().to_vec(), self.proj1_w.as_slice().unwrap()));
        out.push(("proj1_b".into(), self.proj1_b.shape().to_vec(), self.proj1_b.as_slice().unwrap()));
        out.push(("proj2_w".into(), self.proj2_w.shape().to_vec(), self.proj2_w.as_slice().unwrap()));
        out.push(("proj2_b".into(), vec![1], std::slice::from_ref(&self.proj2_b)));
        out
    }

    /// Flat mutable views in the same fixed order as [`Self::named_tensors`].
    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.lift_w.as_slice_mut().unwrap(),
            self.lift_b.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.push(l.w_re.as_slice_mut().unwrap());
            out.push(l.w_im.as_slice_mut().unwrap());
            out.push(l.skip_w.as_slice_mut().unwrap());
            out.push(l.skip_b.as_slice_mut().unwrap());
        }
        out.push(self.proj1_w.as_slice_mut().unwrap());
        out.push(self.proj1_b.as_slice_mut().unwrap());
        out.push(self.proj2_w.as_slice_mut().unwrap());
        out.push(std::slice::from_mut(&mut self.proj2_b));
        out
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, _, s)| s).collect()
    }

    pub fn n_params(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }

    /// Closed-form parameter count implied by a configuration.
    pub fn expected_n_params(cfg: &FnoConfig) -> usize {
        let w = cfg.width;
        let h = cfg.hidden_width;
        let m = cfg.n_modes;
        let per_layer = 2 * w * w * m + w * w + w;
        w * 2 + w + cfg.n_layers * per_layer + h * w + h + h + 1
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &FnoParams) {
        for (dst, src) in self.flat_mut().into_iter().zip(other.flat()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Intermediate activations kept for the backward pass (whole batch).
pub struct ForwardCache {
    /// `[2, batch*n]` input (standardized f + coordinate channel).
    pub input: Array2<f64>,
    pub batch: usize,
    /// Input to each spectral block (`layer_in[0]` is the lifted field).
    pub layer_in: Vec<Array2<f64>>,
    /// Pre-activation output of each block.
    pub z: Vec<Array2<f64>>,
    /// Truncated input spectra cached per block, `[n_modes, width, batch]`.
    pub x_hat: Vec<Array3<Complex64>>,
    /// Projection pre-activation `[hidden, batch*n]`.
    pub q1: Array2<f64>,
    /// Projection hidden activation `[hidden, batch*n]`.
    pub a1: Array2<f64>,
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    for (mut row, bv) in m.axis_iter_mut(Axis(0)).zip(b) {
        row += *bv;
    }
    m
}

/// Forward pass over a `[2, batch*n]` input; returns the `[batch*n]`
/// output row and the cache for backprop. Reports the offending block on
/// non-finite activations.
pub fn forward_batch(
    params: &FnoParams,
    input: &Array2<f64>,
    batch: usize,
    fft: &RealFft,
) -> Result<(Vec<f64>, ForwardCache)> {
    let n = fft.len();
    if input.dim() != (2, batch * n) {
        return Err(Error::DimensionMismatch { expected: 2 * batch * n, actual: input.len() });
    }
    let n_layers = params.layers.len();
    let mut layer_in = Vec::with_capacity(n_layers);
    let mut zs = Vec::with_capacity(n_layers);
    let mut x_hats = Vec::with_capacity(n_layers);

    let mut h = add_bias(par_matmul(&params.lift_w.view(), &input.view()), &params.lift_b);
    for (l, layer) in params.layers.iter().enumerate() {
        let (spec, x_hat) = spectral_conv_batch(&h, batch, &layer.w_re, &layer.w_im, fft)?;
        let skip = add_bias(par_matmul(&layer.skip_w.view(), &h.view()), &layer.skip_b);
        let z = spec + skip;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("fno forward, spectral block {l}") });
        }
        layer_in.push(h);
        x_hats.push(x_hat);
        h = if l + 1 < n_layers { z.mapv(gelu) } else { z.clone() };
        zs.push(z);
    }

    let q1 = add_bias(par_matmul(&params.proj1_w.view(), &h.view()), &params.proj1_b);
    let a1 = q1.mapv(gelu);
    let out_arr = params.proj2_w.dot(&a1) + params.proj2_b;
    let out = out_arr.to_vec();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "fno forward, projection".into() });
    }
    Ok((out, ForwardCache { input: input.clone(), batch, layer_in, z: zs, x_hat: x_hats, q1, a1 }))
}

/// Single-sample forward pass (batch of one).
pub fn forward(params: &FnoParams, input: &Array2<f64>, fft: &RealFft) -> Result<(Vec<f64>, ForwardCache)> {
    forward_batch(params, input, 1, fft)
}

/// Backward pass: gradients of a scalar loss for the whole batch, given
/// `d loss / d output` per output entry. Gradients accumulate into
/// `grads`.
pub fn backward(
    params: &FnoParams,
    cache: &ForwardCache,
    g_out: &[f64],
    fft: &RealFft,
    grads: &mut FnoParams,
) -> Result<()> {
    let cols = cache.a1.ncols();
    if g_out.len() != cols {
        return Err(Error::DimensionMismatch { expected: cols, actual: g_out.len() });
    }
    let hidden = params.proj2_w.len();
    let g_row = ArrayView2::from_shape((1, cols), g_out)
        .map_err(|_| Error::InvalidConfig("gradient row reshape".into()))?;

    // projection stage
    let g_out_arr = Array1::from_iter(g_out.iter().copied());
    grads.proj2_w += &cache.a1.dot(&g_out_arr);
    grads.proj2_b += g_out.iter().sum::<f64>();
    let mut d_a1 = Array2::zeros((hidden, cols));
    for c in 0..hidden {
        let w = params.proj2_w[c];
        let row = d_a1.row_mut(c);
        let row = row.into_slice().unwrap();
        for (r, g) in row.iter_mut().zip(g_out) {
            *r = w * g;
        }
    }

    let d_q1 = &d_a1 * &cache.q1.mapv(gelu_prime);
    let h_last = cache.z.last().expect("n_layers >= 1");
    grads.proj1_w += &par_matmul_kfold(&d_q1.view(), &h_last.t());
    grads.proj1_b += &d_q1.sum_axis(Axis(1));
    let mut g = par_matmul(&params.proj1_w.t(), &d_q1.view());

    // spectral blocks, last to first
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let dz = if l + 1 < params.layers.len() {
            &g * &cache.z[l].mapv(gelu_prime)
        } else {
            g.clone()
        };
        grads.layers[l].skip_w += &par_matmul_kfold(&dz.view(), &cache.layer_in[l].t());
        grads.layers[l].skip_b += &dz.sum_axis(Axis(1));
        let (dx_spec, dw_re, dw_im) = spectral_conv_backward_batch(
            &dz,
            cache.batch,
            &cache.x_hat[l],
            &layer.w_re,
            &layer.w_im,
            fft,
        )?;
        grads.layers[l].w_re += &dw_re;
        grads.layers[l].w_im += &dw_im;
        g = par_matmul(&layer.skip_w.t(), &dz.view()) + dx_spec;
    }

    grads.lift_w += &par_matmul_kfold(&g.view(), &cache.input.t());
    grads.lift_b += &g.sum_axis(Axis(1));
    let _ = g_row;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::FnoConfig;

    fn tiny_config() -> FnoConfig {
        FnoConfig {
            n_modes: 2,
            width: 4,
            n_layers: 1,
            hidden_width: 5,
            lr: 1e-3,
            batch_size: 4,
            n_epochs: 10,
            patience: 0,
            val_fraction: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [
            tiny_config(),
            FnoConfig { n_modes: 16, width: 64, n_layers: 4, hidden_width: 128, ..tiny_config() },
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = FnoParams::init(&cfg, &mut rng);
            assert_eq!(p.n_params(), FnoParams::expected_n_params(&cfg));
        }
    }

    #[test]
    fn zero_params_give_constant_bias_output() {
        let cfg = tiny_config();
        let params = FnoParams::zeros(&cfg);
        let fft = RealFft::new(8);
        let input = Array2::from_shape_fn((2, 8), |(c, j)| (c + j) as f64 * 0.1);
        let (out, _) = forward(&params, &input, &fft).unwrap();
        for v in out {
            assert_eq!(v, 0.0);
        }
        let mut p2 = FnoParams::zeros(&cfg);
        p2.proj2_b = 0.7;
        let (out2, _) = forward(&p2, &input, &fft).unwrap();
        for v in out2 {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn gelu_derivative_finite_difference() {
        for x in [-3.0, -0.5, 0.0, 0.3, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_prime(x)).abs() <= 1e-8, "x = {x}");
        }
    }

    #[test]
    fn par_matmul_matches_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((5, 7), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((7, 53), |_| rng.gen_range(-1.0..1.0));
        let direct = a.dot(&b);
        let par = par_matmul(&a.view(), &b.view());
        let folded = par_matmul_kfold(&a.view(), &b.view());
        for ((x, y), z) in direct.iter().zip(par.iter()).zip(folded.iter()) {
            assert_eq!(x, y);
            assert!((x - z).abs() <= 1e-13);
        }
    }

    #[test]
    fn batched_forward_matches_single_rows() {
        let n = 8;
        let batch = 3;
        let cfg = FnoConfig { n_layers: 2, ..tiny_config() };
        let fft = RealFft::new(n);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = FnoParams::init(&cfg, &mut rng);
        let input = Array2::from_shape_fn((2, batch * n), |_| rng.gen_range(-1.0..1.0));
        let (out, _) = forward_batch(&params, &input, batch, &fft).unwrap();
        for b in 0..batch {
            let ib = input.slice(s![.., b * n..(b + 1) * n]).to_owned();
            let (ob, _) = forward(&params, &ib, &fft).unwrap();
            for (j, v) in ob.iter().enumerate() {
                let d = (v - out[b * n + j]).abs();
                assert!(d <= 1e-12, "row {b} col {j}: diff {d:.3e}");
            }
        }
    }

    /// Full-model gradient check on a miniature network: analytic backprop
    /// against central finite differences of a scalar loss, every tensor.
    #[test]
    fn backprop_matches_finite_differences() {
        let n = 8;
        let cfg = tiny_config();
        let fft = RealFft::new(n);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = FnoParams::init(&cfg, &mut rng);
        let input = Array2::from_shape_fn((2, n), |_| rng.gen_range(-1.0..1.0));
        let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of = |p: &FnoParams| -> f64 {
            let (out, _) = forward(p, &input, &fft).unwrap();
            let num: f64 = out.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = target.iter().map(|v| v * v).sum();
            (num / den).sqrt()
        };

        let (out, cache) = forward(&params, &input, &fft).unwrap();
        let den: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: Vec<f64> = out.iter().zip(&target).map(|(a, b)| a - b).collect();
        let num: f64 = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g_out: Vec<f64> = diff.iter().map(|d| d / (num * den)).collect();
        let mut grads = FnoParams::zeros(&cfg);
        backward(&params, &cache, &g_out, &fft, &mut grads).unwrap();

        let eps = 1e-5;
        let mut p_work = params.clone();
        let n_tensors = grads.flat().len();
        for t in 0..n_tensors {
            let len = grads.flat()[t].len();
            let stride = (len / 3).max(1);
            for i in (0..len).step_by(stride) {
                let orig = p_work.flat_mut()[t][i];
                p_work.flat_mut()[t][i] = orig + eps;
                let lp = loss_of(&p_work);
                p_work.flat_mut()[t][i] = orig - eps;
                let lm = loss_of(&p_work);
                p_work.flat_mut()[t][i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.flat()[t][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    rel <= 1e-4,
                    "tensor {t} index {i}: fd {fd:.8e} vs analytic {an:.8e} (rel {rel:.2e})"
                );
            }
        }
    }

    #[test]
    fn two_layer_batched_backprop_matches_finite_differences() {
        let n = 8;
        let batch = 2;
        let cfg = FnoConfig { n_layers: 2, ..tiny_config() };
        let fft = RealFft::new(n);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = FnoParams::init(&cfg, &mut rng);
        let input = Array2::from_shape_fn((2, batch * n), |_| rng.gen_range(-1.0..1.0));
        let wts: Vec<f64> = (0..batch * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |p: &FnoParams| -> f64 {
            let (out, _) = forward_batch(p, &input, batch, &fft).unwrap();
            out.iter().zip(&wts).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = forward_batch(&params, &input, batch, &fft).unwrap();
        let mut grads = FnoParams::zeros(&cfg);
        backward(&params, &cache, &wts, &fft, &mut grads).unwrap();

        let eps = 1e-5;
        let mut p_work = params.clone();
        for t in 0..grads.flat().len() {
            let len = p_work.flat()[t].len();
            let stride = (len / 4).max(1);
            for i in (0..len).step_by(stride) {
                let orig = p_work.flat()[t][i];
                p_work.flat_mut()[t][i] = orig + eps;
                let lp = loss_of(&p_work);
                p_work.flat_mut()[t][i] = orig - eps;
                let lm = loss_of(&p_work);
                p_work.flat_mut()[t][i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.flat()[t][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel <= 1e-4, "tensor {t} index {i}: rel {rel:.2e}");
            }
        }
    }
}
