//! Forward and backward kernels besides convolution: batch normalization,
//! ReLU, global average pooling, the linear head, residual adds, the two-path
//! channel concatenation and the MSE loss.
//!
//! Reductions accumulate in f64 and run in a fixed order per channel, so
//! outputs are deterministic under thread scheduling.

use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;

const PAR_CHUNK: usize = 1 << 16;

/// Training/eval switch for operations with mode-dependent semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ── batch normalization ─────────────────────────────────────────────

/// Exponential-moving-average running statistics of one BN layer.
#[derive(Debug, Clone)]
pub struct BnRunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    /// Number of train-mode updates applied; eval before any update is an error.
    pub batches_tracked: u64,
}

impl BnRunningStats {
    pub fn new(channels: usize) -> Self {
        BnRunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::filled(&[channels], 1.0),
            batches_tracked: 0,
        }
    }
}

/// Per-batch statistics saved by the train-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

fn bn_check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize), TensorError> {
    input.expect_rank(5, "batchnorm input")?;
    let channels = input.extent(1);
    gamma.expect_shape(&[channels], "batchnorm gamma")?;
    beta.expect_shape(&[channels], "batchnorm beta")?;
    Ok((channels, input.extent(0) * input.extent(2) * input.extent(3) * input.extent(4)))
}

/// Iterate one channel's values across batch and spatial axes in fixed order.
fn for_each_channel_value(input: &[f32], n: usize, channels: usize, vol: usize, c: usize, mut f: impl FnMut(usize, f32)) {
    for ni in 0..n {
        let base = (ni * channels + c) * vol;
        for (i, &v) in input[base..base + vol].iter().enumerate() {
            f(base + i, v);
        }
    }
}

/// Train-mode batchnorm: normalizes per channel over batch and spatial axes,
/// updates running statistics, and returns the saved batch statistics.
pub fn batchnorm3d_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut BnRunningStats,
) -> Result<(Tensor, BnSaved), TensorError> {
    let (channels, _) = bn_check(input, gamma, beta)?;
    let n = input.extent(0);
    let vol = input.extent(2) * input.extent(3) * input.extent(4);
    let count = n * vol;

    let stats: Vec<(f32, f32)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for_each_channel_value(input.data(), n, channels, vol, c, |_, v| {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            });
            let mean = sum / count as f64;
            let var = (sq / count as f64 - mean * mean).max(0.0);
            (mean as f32, var as f32)
        })
        .collect();

    let mut saved = BnSaved {
        mean: Vec::with_capacity(channels),
        inv_std: Vec::with_capacity(channels),
    };
    for &(mean, var) in &stats {
        saved.mean.push(mean);
        saved.inv_std.push(1.0 / (var + BN_EPSILON).sqrt());
    }

    let unbias = count as f32 / (count.max(2) - 1) as f32;
    for c in 0..channels {
        let rm = &mut running.mean.data_mut()[c];
        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * stats[c].0;
        let rv = &mut running.var.data_mut()[c];
        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * stats[c].1 * unbias;
    }
    running.batches_tracked += 1;

    let out = bn_apply(input, gamma, beta, &saved.mean, &saved.inv_std);
    Ok((out, saved))
}

/// Eval-mode batchnorm using running statistics.
pub fn batchnorm3d_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &BnRunningStats,
) -> Result<Tensor, TensorError> {
    let (channels, _) = bn_check(input, gamma, beta)?;
    if running.batches_tracked == 0 {
        return Err(TensorError::UninitializedStats);
    }
    let inv_std: Vec<f32> = (0..channels)
        .map(|c| 1.0 / (running.var.data()[c] + BN_EPSILON).sqrt())
        .collect();
    Ok(bn_apply(input, gamma, beta, running.mean.data(), &inv_std))
}

/// Mode-dispatching batchnorm entry point.
pub fn batchnorm3d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut BnRunningStats,
    mode: Mode,
) -> Result<Tensor, TensorError> {
    match mode {
        Mode::Train => batchnorm3d_train(input, gamma, beta, running).map(|(out, _)| out),
        Mode::Eval => batchnorm3d_eval(input, gamma, beta, running),
    }
}

fn bn_apply(input: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f32], inv_std: &[f32]) -> Tensor {
    let channels = input.extent(1);
    let vol = input.extent(2) * input.extent(3) * input.extent(4);
    let mut out = Tensor::zeros(input.shape());
    out.data_mut()
        .par_chunks_mut(vol)
        .zip(input.data().par_chunks(vol))
        .enumerate()
        .for_each(|(chunk_idx, (dst, src))| {
            let c = chunk_idx % channels;
            let scale = gamma.data()[c] * inv_std[c];
            let shift = beta.data()[c] - mean[c] * scale;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale + shift;
            }
        });
    out
}

/// Train-mode batchnorm backward from saved batch statistics.
pub fn batchnorm3d_backward(
    input: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    grad_out.expect_shape(input.shape(), "batchnorm grad_out")?;
    let channels = input.extent(1);
    let n = input.extent(0);
    let vol = input.extent(2) * input.extent(3) * input.extent(4);
    let count = (n * vol) as f64;

    let mut grad_input = Tensor::zeros(input.shape());
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);

    let sums: Vec<(f64, f64)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            let mean = saved.mean[c] as f64;
            let inv_std = saved.inv_std[c] as f64;
            for_each_channel_value(input.data(), n, channels, vol, c, |i, v| {
                let dy = grad_out.data()[i] as f64;
                sum_dy += dy;
                sum_dy_xhat += dy * ((v as f64) - mean) * inv_std;
            });
            (sum_dy, sum_dy_xhat)
        })
        .collect();

    for c in 0..channels {
        dbeta.data_mut()[c] = sums[c].0 as f32;
        dgamma.data_mut()[c] = sums[c].1 as f32;
    }

    let gi = grad_input.data_mut();
    gi.par_chunks_mut(vol)
        .zip(input.data().par_chunks(vol))
        .zip(grad_out.data().par_chunks(vol))
        .enumerate()
        .for_each(|(chunk_idx, ((dst, x), dy))| {
            let c = chunk_idx % channels;
            let mean = saved.mean[c];
            let inv_std = saved.inv_std[c];
            let g = gamma.data()[c];
            let mean_dy = (sums[c].0 / count) as f32;
            let mean_dy_xhat = (sums[c].1 / count) as f32;
            for ((d, &xv), &dyv) in dst.iter_mut().zip(x).zip(dy) {
                let xhat = (xv - mean) * inv_std;
                *d = g * inv_std * (dyv - mean_dy - xhat * mean_dy_xhat);
            }
        });

    Ok((grad_input, dgamma, dbeta))
}

// ── elementwise ──────────────────────────────────────────────────────

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().par_chunks_mut(PAR_CHUNK).for_each(|chunk| {
        for v in chunk.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    });
    out
}

/// ReLU adjoint; masks by the forward output.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor, TensorError> {
    grad_out.expect_shape(output.shape(), "relu grad_out")?;
    let mut grad_in = grad_out.clone();
    grad_in
        .data_mut()
        .par_chunks_mut(PAR_CHUNK)
        .zip(output.data().par_chunks(PAR_CHUNK))
        .for_each(|(g, o)| {
            for (gv, &ov) in g.iter_mut().zip(o) {
                if ov <= 0.0 {
                    *gv = 0.0;
                }
            }
        });
    Ok(grad_in)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    b.expect_shape(a.shape(), "add rhs")?;
    let mut out = a.clone();
    out.data_mut()
        .par_chunks_mut(PAR_CHUNK)
        .zip(b.data().par_chunks(PAR_CHUNK))
        .for_each(|(dst, src)| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        });
    Ok(out)
}

// ── global average pooling ──────────────────────────────────────────

/// Per-channel spatial mean: `[N, C, X, Y, Z]` -> `[N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    input.expect_rank(5, "gap input")?;
    let (n, c) = (input.extent(0), input.extent(1));
    let vol = input.extent(2) * input.extent(3) * input.extent(4);
    let mut out = Tensor::zeros(&[n, c]);
    out.data_mut()
        .iter_mut()
        .zip(input.data().chunks_exact(vol))
        .for_each(|(dst, chunk)| {
            let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
            *dst = (sum / vol as f64) as f32;
        });
    Ok(out)
}

pub fn global_avg_pool_backward(
    input_shape: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor, TensorError> {
    let vol = input_shape[2] * input_shape[3] * input_shape[4];
    grad_out.expect_shape(&input_shape[..2], "gap grad_out")?;
    let mut grad_in = Tensor::zeros(input_shape);
    grad_in
        .data_mut()
        .chunks_exact_mut(vol)
        .zip(grad_out.data())
        .for_each(|(chunk, &g)| {
            let v = g / vol as f32;
            chunk.fill(v);
        });
    Ok(grad_in)
}

// ── linear head ──────────────────────────────────────────────────────

/// Affine map: input `[N, C]`, weight `[M, C]`, bias `[M]` -> `[N, M]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    input.expect_rank(2, "linear input")?;
    weight.expect_rank(2, "linear weight")?;
    let (n, c) = (input.extent(0), input.extent(1));
    let m = weight.extent(0);
    weight.expect_extent(1, c, "linear weight")?;
    bias.expect_shape(&[m], "linear bias")?;
    let mut out = Tensor::zeros(&[n, m]);
    for (row_out, row_in) in out
        .data_mut()
        .chunks_exact_mut(m)
        .zip(input.data().chunks_exact(c))
    {
        for (o, dst) in row_out.iter_mut().enumerate() {
            let w = &weight.data()[o * c..(o + 1) * c];
            let mut acc = bias.data()[o] as f64;
            for (&x, &wv) in row_in.iter().zip(w) {
                acc += (x as f64) * (wv as f64);
            }
            *dst = acc as f32;
        }
    }
    Ok(out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let (n, c) = (input.extent(0), input.extent(1));
    let m = weight.extent(0);
    grad_out.expect_shape(&[n, m], "linear grad_out")?;
    let mut dinput = Tensor::zeros(&[n, c]);
    let mut dweight = Tensor::zeros(&[m, c]);
    let mut dbias = Tensor::zeros(&[m]);
    for ni in 0..n {
        let gy = &grad_out.data()[ni * m..(ni + 1) * m];
        let x = &input.data()[ni * c..(ni + 1) * c];
        let dx = &mut dinput.data_mut()[ni * c..(ni + 1) * c];
        for (o, &g) in gy.iter().enumerate() {
            dbias.data_mut()[o] += g;
            let w = &weight.data()[o * c..(o + 1) * c];
            let dw = &mut dweight.data_mut()[o * c..(o + 1) * c];
            for i in 0..c {
                dx[i] += g * w[i];
                dw[i] += g * x[i];
            }
        }
    }
    Ok((dinput, dweight, dbias))
}

// ── 1x1x1 projection (residual skip path) ───────────────────────────

/// Channel projection with optional spatial subsampling: weight `[O, C]`
/// applied at every retained voxel. Used on stride-2 residual skip paths.
pub fn proj_conv3d(input: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
    if stride != 1 && stride != 2 {
        return Err(TensorError::InvalidStride(stride));
    }
    input.expect_rank(5, "projection input")?;
    weight.expect_rank(2, "projection weight")?;
    input.expect_extent(1, weight.extent(1), "projection input channels")?;
    let (n, c) = (input.extent(0), input.extent(1));
    let o = weight.extent(0);
    let ext_in = [input.extent(2), input.extent(3), input.extent(4)];
    let ext_out = [
        (ext_in[0] - 1) / stride + 1,
        (ext_in[1] - 1) / stride + 1,
        (ext_in[2] - 1) / stride + 1,
    ];
    let in_vol: usize = ext_in.iter().product();
    let out_vol: usize = ext_out.iter().product();
    let mut out = Tensor::zeros(&[n, o, ext_out[0], ext_out[1], ext_out[2]]);
    let w = weight.data();
    let src = input.data();
    out.data_mut()
        .par_chunks_mut(o * out_vol)
        .enumerate()
        .for_each(|(ni, dst)| {
            let sample = &src[ni * c * in_vol..(ni + 1) * c * in_vol];
            let sub = subsample(sample, c, &ext_in, &ext_out, stride);
            for (oi, row) in dst.chunks_exact_mut(out_vol).enumerate() {
                for ci in 0..c {
                    let wv = w[oi * c + ci];
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, &s) in row.iter_mut().zip(&sub[ci * out_vol..(ci + 1) * out_vol]) {
                        *d += wv * s;
                    }
                }
            }
        });
    Ok(out)
}

fn subsample(sample: &[f32], c: usize, ext_in: &[usize; 3], ext_out: &[usize; 3], stride: usize) -> Vec<f32> {
    let in_vol: usize = ext_in.iter().product();
    let out_vol: usize = ext_out.iter().product();
    if stride == 1 {
        return sample[..c * in_vol].to_vec();
    }
    let mut sub = vec![0.0f32; c * out_vol];
    for ci in 0..c {
        let src_c = &sample[ci * in_vol..(ci + 1) * in_vol];
        let dst_c = &mut sub[ci * out_vol..(ci + 1) * out_vol];
        let mut idx = 0;
        for p0 in 0..ext_out[0] {
            for p1 in 0..ext_out[1] {
                let base = (p0 * stride * ext_in[1] + p1 * stride) * ext_in[2];
                for p2 in 0..ext_out[2] {
                    dst_c[idx] = src_c[base + p2 * stride];
                    idx += 1;
                }
            }
        }
    }
    sub
}

pub fn proj_conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let (n, c) = (input.extent(0), input.extent(1));
    let o = weight.extent(0);
    let ext_in = [input.extent(2), input.extent(3), input.extent(4)];
    let ext_out = [
        (ext_in[0] - 1) / stride + 1,
        (ext_in[1] - 1) / stride + 1,
        (ext_in[2] - 1) / stride + 1,
    ];
    grad_out.expect_shape(&[n, o, ext_out[0], ext_out[1], ext_out[2]], "projection grad_out")?;
    let in_vol: usize = ext_in.iter().product();
    let out_vol: usize = ext_out.iter().product();
    let w = weight.data();

    let mut grad_input = Tensor::zeros(input.shape());
    let partials: Vec<Vec<f32>> = grad_input
        .data_mut()
        .par_chunks_mut(c * in_vol)
        .enumerate()
        .map(|(ni, gin)| {
            let go = &grad_out.data()[ni * o * out_vol..(ni + 1) * o * out_vol];
            let sample = &input.data()[ni * c * in_vol..(ni + 1) * c * in_vol];
            let sub = subsample(sample, c, &ext_in, &ext_out, stride);
            let mut dw = vec![0.0f32; o * c];
            for oi in 0..o {
                let go_row = &go[oi * out_vol..(oi + 1) * out_vol];
                for ci in 0..c {
                    let mut acc = 0.0f32;
                    for (&g, &s) in go_row.iter().zip(&sub[ci * out_vol..(ci + 1) * out_vol]) {
                        acc += g * s;
                    }
                    dw[oi * c + ci] = acc;
                }
            }
            // scatter W^T . grad_out back onto the strided grid
            for ci in 0..c {
                let gin_c = &mut gin[ci * in_vol..(ci + 1) * in_vol];
                for oi in 0..o {
                    let wv = w[oi * c + ci];
                    if wv == 0.0 {
                        continue;
                    }
                    let go_row = &go[oi * out_vol..(oi + 1) * out_vol];
                    let mut idx = 0;
                    for p0 in 0..ext_out[0] {
                        for p1 in 0..ext_out[1] {
                            let base = (p0 * stride * ext_in[1] + p1 * stride) * ext_in[2];
                            for p2 in 0..ext_out[2] {
                                gin_c[base + p2 * stride] += wv * go_row[idx];
                                idx += 1;
                            }
                        }
                    }
                }
            }
            dw
        })
        .collect();

    let mut grad_weight = Tensor::zeros(weight.shape());
    for dw in &partials {
        for (acc, v) in grad_weight.data_mut().iter_mut().zip(dw) {
            *acc += v;
        }
    }
    Ok((grad_input, grad_weight))
}

// ── two-path concatenation ──────────────────────────────────────────

/// Pairs up a stacked two-path batch: `[2N, C, X, Y, Z]` -> `[N, 2C, X, Y, Z]`,
/// where row `n` of the output holds path A (`n`) then path B (`N + n`) along
/// the feature-map dimension.
pub fn pair_concat(input: &Tensor) -> Result<Tensor, TensorError> {
    input.expect_rank(5, "pair_concat input")?;
    let two_n = input.extent(0);
    if two_n % 2 != 0 {
        return Err(TensorError::ShapeMismatch {
            context: "pair_concat input",
            axis: 0,
            expected: two_n + 1,
            got: two_n,
        });
    }
    let n = two_n / 2;
    let c = input.extent(1);
    let vol = input.extent(2) * input.extent(3) * input.extent(4);
    let mut out = Tensor::zeros(&[n, 2 * c, input.extent(2), input.extent(3), input.extent(4)]);
    let src = input.data();
    out.data_mut()
        .par_chunks_mut(2 * c * vol)
        .enumerate()
        .for_each(|(ni, dst)| {
            dst[..c * vol].copy_from_slice(&src[ni * c * vol..(ni + 1) * c * vol]);
            dst[c * vol..].copy_from_slice(&src[(n + ni) * c * vol..(n + ni + 1) * c * vol]);
        });
    Ok(out)
}

pub fn pair_concat_backward(grad_out: &Tensor) -> Result<Tensor, TensorError> {
    grad_out.expect_rank(5, "pair_concat grad_out")?;
    let n = grad_out.extent(0);
    let c2 = grad_out.extent(1);
    let c = c2 / 2;
    let vol = grad_out.extent(2) * grad_out.extent(3) * grad_out.extent(4);
    let mut grad_in = Tensor::zeros(&[2 * n, c, grad_out.extent(2), grad_out.extent(3), grad_out.extent(4)]);
    let dst = grad_in.data_mut();
    for ni in 0..n {
        let src = &grad_out.data()[ni * c2 * vol..(ni + 1) * c2 * vol];
        dst[ni * c * vol..(ni + 1) * c * vol].copy_from_slice(&src[..c * vol]);
        dst[(n + ni) * c * vol..(n + ni + 1) * c * vol].copy_from_slice(&src[c * vol..]);
    }
    Ok(grad_in)
}

// ── loss ─────────────────────────────────────────────────────────────

/// Mean over all entries of the squared difference.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f32, TensorError> {
    target.expect_shape(pred.shape(), "mse target")?;
    let mut acc = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = (p - t) as f64;
        acc += d * d;
    }
    Ok((acc / pred.len() as f64) as f32)
}

/// d(mse)/d(pred) scaled by the upstream scalar gradient.
pub fn mse_loss_backward(pred: &Tensor, target: &Tensor, upstream: f32) -> Result<Tensor, TensorError> {
    target.expect_shape(pred.shape(), "mse target")?;
    let scale = 2.0 * upstream / pred.len() as f32;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        *g = scale * (p - t);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn bn_constant_channel_maps_to_zero() {
        let input = Tensor::filled(&[2, 1, 2, 2, 2], 3.5);
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut running = BnRunningStats::new(1);
        let (out, _) = batchnorm3d_train(&input, &gamma, &beta, &mut running).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_zero_gamma_broadcasts_beta() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&[2, 3, 2, 2, 2], &mut rng);
        let gamma = Tensor::zeros(&[3]);
        let beta = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut running = BnRunningStats::new(3);
        let (out, _) = batchnorm3d_train(&input, &gamma, &beta, &mut running).unwrap();
        let vol = 8;
        for (i, &v) in out.data().iter().enumerate() {
            let c = (i / vol) % 3;
            assert_eq!(v, beta.data()[c]);
        }
    }

    #[test]
    fn bn_normalizes_random_batch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&[2, 3, 4, 4, 4], &mut rng);
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut running = BnRunningStats::new(3);
        let (out, _) = batchnorm3d_train(&input, &gamma, &beta, &mut running).unwrap();
        let vol = 64;
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            let mut count = 0;
            for ni in 0..2 {
                for &v in &out.data()[(ni * 3 + c) * vol..(ni * 3 + c + 1) * vol] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            let var = sq / count as f64 - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn bn_eval_before_any_update_errors() {
        let input = Tensor::zeros(&[1, 2, 2, 2, 2]);
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let running = BnRunningStats::new(2);
        assert!(matches!(
            batchnorm3d_eval(&input, &gamma, &beta, &running),
            Err(TensorError::UninitializedStats)
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_of_constant_channel_is_the_constant() {
        let input = Tensor::filled(&[1, 2, 3, 3, 3], 0.25);
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn gap_preserves_channel_means() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&[2, 4, 3, 5, 4], &mut rng);
        let out = global_avg_pool(&input).unwrap();
        let vol = 60;
        for ni in 0..2 {
            for c in 0..4 {
                let sum: f64 = input.data()[(ni * 4 + c) * vol..(ni * 4 + c + 1) * vol]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                let expect = (sum / vol as f64) as f32;
                assert!((out.data()[ni * 4 + c] - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn linear_identity_passes_through() {
        let input = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut weight = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            weight.data_mut()[i * 3 + i] = 1.0;
        }
        let out = linear(&input, &weight, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn mse_basic_values() {
        let a = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::zeros(&[1, 3]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!((mse_loss(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn mse_matches_two_loop_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pred = rand_tensor(&[40, 3], &mut rng);
        let target = rand_tensor(&[40, 3], &mut rng);
        let got = mse_loss(&pred, &target).unwrap();
        let mut acc = 0.0f64;
        for i in 0..40 {
            for j in 0..3 {
                let d = (pred.data()[i * 3 + j] - target.data()[i * 3 + j]) as f64;
                acc += d * d;
            }
        }
        let expect = (acc / 120.0) as f32;
        assert!((got - expect).abs() <= 1e-7);
    }

    #[test]
    fn mse_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(mse_loss(&a, &b).is_err());
    }

    #[test]
    fn pair_concat_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor(&[4, 3, 2, 2, 2], &mut rng);
        let out = pair_concat(&input).unwrap();
        assert_eq!(out.shape(), &[2, 6, 2, 2, 2]);
        let back = pair_concat_backward(&out).unwrap();
        assert_eq!(back.data(), input.data());
    }
}
