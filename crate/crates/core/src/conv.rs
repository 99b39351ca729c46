//! 3x3x3 convolution over `[N, C, X, Y, Z]` volumes with "same" zero padding.
//!
//! Stride-1 passes copy each sample into a zero-padded volume and run the
//! GEMM against shifted row pointers into that buffer (no column matrix is
//! materialized). Stride-2 passes lower through a chunked im2col. Samples are
//! processed in parallel; each sample's arithmetic is sequential, so results
//! are deterministic under thread scheduling.

use crate::gemm::{gemm_nn_rows, gemm_nt_rows_acc};
use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;

pub const KERNEL_EXTENT: usize = 3;
const KERNEL_TAPS: usize = KERNEL_EXTENT * KERNEL_EXTENT * KERNEL_EXTENT;
/// Output positions per im2col chunk (stride-2 path).
const CHUNK_POSITIONS: usize = 8192;

/// Validated 3x3x3 kernel: weights `[out_maps, in_maps, 3, 3, 3]`, bias
/// `[out_maps]`, stride 1 or 2.
#[derive(Debug, Clone)]
pub struct ConvKernel3D {
    weights: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvKernel3D {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize) -> Result<Self, TensorError> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::InvalidStride(stride));
        }
        weights.expect_rank(5, "conv kernel weights")?;
        for axis in 2..5 {
            if weights.extent(axis) != KERNEL_EXTENT {
                return Err(TensorError::KernelExtent(weights.extent(axis)));
            }
        }
        bias.expect_shape(&[weights.extent(0)], "conv kernel bias")?;
        Ok(ConvKernel3D {
            weights,
            bias,
            stride,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_maps(&self) -> usize {
        self.weights.extent(0)
    }

    pub fn in_maps(&self) -> usize {
        self.weights.extent(1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    in_ch: usize,
    out_ch: usize,
    ext_in: [usize; 3],
    ext_out: [usize; 3],
    stride: usize,
}

impl ConvDims {
    fn in_volume(&self) -> usize {
        self.ext_in.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.ext_out.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.in_ch * KERNEL_TAPS
    }
}

fn conv_dims(input: &Tensor, weights: &Tensor, stride: usize) -> Result<ConvDims, TensorError> {
    input.expect_rank(5, "conv input")?;
    input.expect_extent(1, weights.extent(1), "conv input channels")?;
    let ext_in = [input.extent(2), input.extent(3), input.extent(4)];
    // pad 1 on both sides: stride-1 output keeps the extent, stride-2 gives ceil(extent/2)
    let ext_out = [
        (ext_in[0] - 1) / stride + 1,
        (ext_in[1] - 1) / stride + 1,
        (ext_in[2] - 1) / stride + 1,
    ];
    Ok(ConvDims {
        n: input.extent(0),
        in_ch: input.extent(1),
        out_ch: weights.extent(0),
        ext_in,
        ext_out,
        stride,
    })
}

// ── padded-volume machinery (stride 1) ───────────────────────────────

/// Geometry of one zero-padded sample buffer. Channel planes are `vol` apart;
/// a `margin` of zeros on both ends keeps every shifted row pointer in bounds.
#[derive(Clone, Copy)]
struct Padded {
    ext: [usize; 3],
    p: [usize; 3],
    vol: usize,
    margin: usize,
}

impl Padded {
    fn new(ext: [usize; 3]) -> Self {
        let p = [ext[0] + 2, ext[1] + 2, ext[2] + 2];
        let vol = p[0] * p[1] * p[2];
        Padded {
            ext,
            p,
            vol,
            margin: p[1] * p[2] + p[2] + 1,
        }
    }

    fn buffer_len(&self, channels: usize) -> usize {
        channels * self.vol + 2 * self.margin
    }

    /// Copy a `[C, X, Y, Z]` sample into the padded buffer, writing the zero
    /// ring explicitly so the buffer can be reused without a full clear.
    fn fill(&self, buf: &mut [f32], sample: &[f32], channels: usize) {
        let [d0, d1, d2] = self.ext;
        let [p0, p1, p2] = self.p;
        let interior = &mut buf[self.margin..];
        for c in 0..channels {
            let dst_c = &mut interior[c * self.vol..(c + 1) * self.vol];
            let src_c = &sample[c * d0 * d1 * d2..(c + 1) * d0 * d1 * d2];
            for xp in 0..p0 {
                let plane = &mut dst_c[xp * p1 * p2..(xp + 1) * p1 * p2];
                if xp == 0 || xp == p0 - 1 {
                    plane.fill(0.0);
                    continue;
                }
                let src_p = &src_c[(xp - 1) * d1 * d2..xp * d1 * d2];
                for yp in 0..p1 {
                    let row = &mut plane[yp * p2..(yp + 1) * p2];
                    if yp == 0 || yp == p1 - 1 {
                        row.fill(0.0);
                        continue;
                    }
                    row[0] = 0.0;
                    row[1..1 + d2].copy_from_slice(&src_p[(yp - 1) * d2..yp * d2]);
                    row[1 + d2] = 0.0;
                }
            }
        }
    }

    /// Copy channel rows of a padded `[C, vol]` buffer back to dense layout,
    /// adding a per-channel bias.
    fn compact(&self, padded: &[f32], out: &mut [f32], channels: usize, bias: Option<&[f32]>) {
        let [d0, d1, d2] = self.ext;
        let [_, p1, p2] = self.p;
        for c in 0..channels {
            let src_c = &padded[c * self.vol..(c + 1) * self.vol];
            let dst_c = &mut out[c * d0 * d1 * d2..(c + 1) * d0 * d1 * d2];
            let b = bias.map(|b| b[c]).unwrap_or(0.0);
            for x in 0..d0 {
                for y in 0..d1 {
                    let src = &src_c[((x + 1) * p1 + y + 1) * p2 + 1..][..d2];
                    let dst = &mut dst_c[(x * d1 + y) * d2..][..d2];
                    if b == 0.0 {
                        dst.copy_from_slice(src);
                    } else {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s + b;
                        }
                    }
                }
            }
        }
    }

    /// Row pointers indexed like the weight layout `(c, k0, k1, k2)`: row
    /// values at padded column `j` equal `padded[c, x + k0 - 1, ...]`.
    ///
    /// Pointers may start inside the zeroed margin; the margin length bounds
    /// every shift, so all reads stay inside the allocation.
    fn tap_rows(&self, buf: &[f32], channels: usize) -> Vec<*const f32> {
        let [_, p1, p2] = self.p;
        let base = unsafe { buf.as_ptr().add(self.margin) };
        let mut rows = Vec::with_capacity(channels * KERNEL_TAPS);
        for c in 0..channels {
            for k0 in 0..KERNEL_EXTENT {
                for k1 in 0..KERNEL_EXTENT {
                    for k2 in 0..KERNEL_EXTENT {
                        let shift = ((k0 as isize - 1) * p1 as isize + (k1 as isize - 1))
                            * p2 as isize
                            + (k2 as isize - 1);
                        rows.push(unsafe { base.offset(c as isize * self.vol as isize + shift) });
                    }
                }
            }
        }
        rows
    }

    /// Row pointers for the transposed correlation used by the input
    /// gradient: ordered `(o, k0, k1, k2)` with the spatial shift negated.
    fn flipped_tap_rows(&self, buf: &[f32], channels: usize) -> Vec<*const f32> {
        let [_, p1, p2] = self.p;
        let base = unsafe { buf.as_ptr().add(self.margin) };
        let mut rows = Vec::with_capacity(channels * KERNEL_TAPS);
        for o in 0..channels {
            for k0 in 0..KERNEL_EXTENT {
                for k1 in 0..KERNEL_EXTENT {
                    for k2 in 0..KERNEL_EXTENT {
                        let shift = ((1 - k0 as isize) * p1 as isize + (1 - k1 as isize))
                            * p2 as isize
                            + (1 - k2 as isize);
                        rows.push(unsafe { base.offset(o as isize * self.vol as isize + shift) });
                    }
                }
            }
        }
        rows
    }
}

// ── im2col machinery (stride 2) ──────────────────────────────────────

/// Fill `col` with the (c, k0, k1, k2) x (output position) matrix for output
/// x-planes `[p0_lo, p0_hi)` of one sample.
fn im2col_chunk(sample: &[f32], dims: &ConvDims, p0_lo: usize, p0_hi: usize, col: &mut [f32]) {
    let [d0, d1, d2] = dims.ext_in;
    let [_, o1, o2] = dims.ext_out;
    let s = dims.stride;
    let plane = o1 * o2;
    let chunk_cols = (p0_hi - p0_lo) * plane;
    for c in 0..dims.in_ch {
        let src_c = &sample[c * d0 * d1 * d2..(c + 1) * d0 * d1 * d2];
        for k0 in 0..KERNEL_EXTENT {
            for k1 in 0..KERNEL_EXTENT {
                for k2 in 0..KERNEL_EXTENT {
                    let row = ((c * KERNEL_EXTENT + k0) * KERNEL_EXTENT + k1) * KERNEL_EXTENT + k2;
                    let dst = &mut col[row * chunk_cols..(row + 1) * chunk_cols];
                    for p0 in p0_lo..p0_hi {
                        let out_plane = &mut dst[(p0 - p0_lo) * plane..(p0 - p0_lo + 1) * plane];
                        let i0 = (p0 * s + k0) as isize - 1;
                        if i0 < 0 || i0 as usize >= d0 {
                            out_plane.fill(0.0);
                            continue;
                        }
                        let src_p = &src_c[i0 as usize * d1 * d2..(i0 as usize + 1) * d1 * d2];
                        for p1 in 0..o1 {
                            let seg = &mut out_plane[p1 * o2..(p1 + 1) * o2];
                            let i1 = (p1 * s + k1) as isize - 1;
                            if i1 < 0 || i1 as usize >= d1 {
                                seg.fill(0.0);
                                continue;
                            }
                            let src_row = &src_p[i1 as usize * d2..(i1 as usize + 1) * d2];
                            for (p2, out) in seg.iter_mut().enumerate() {
                                let i2 = (p2 * 2 + k2) as isize - 1;
                                *out = if i2 >= 0 && (i2 as usize) < d2 {
                                    src_row[i2 as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of `im2col_chunk`: accumulates column gradients
/// back onto the input gradient of one sample.
fn col2im_add_chunk(
    grad_sample: &mut [f32],
    dims: &ConvDims,
    p0_lo: usize,
    p0_hi: usize,
    col: &[f32],
) {
    let [d0, d1, d2] = dims.ext_in;
    let [_, o1, o2] = dims.ext_out;
    let s = dims.stride;
    let plane = o1 * o2;
    let chunk_cols = (p0_hi - p0_lo) * plane;
    for c in 0..dims.in_ch {
        let dst_c = &mut grad_sample[c * d0 * d1 * d2..(c + 1) * d0 * d1 * d2];
        for k0 in 0..KERNEL_EXTENT {
            for k1 in 0..KERNEL_EXTENT {
                for k2 in 0..KERNEL_EXTENT {
                    let row = ((c * KERNEL_EXTENT + k0) * KERNEL_EXTENT + k1) * KERNEL_EXTENT + k2;
                    let src = &col[row * chunk_cols..(row + 1) * chunk_cols];
                    for p0 in p0_lo..p0_hi {
                        let i0 = (p0 * s + k0) as isize - 1;
                        if i0 < 0 || i0 as usize >= d0 {
                            continue;
                        }
                        let in_plane = &src[(p0 - p0_lo) * plane..(p0 - p0_lo + 1) * plane];
                        let dst_p = &mut dst_c[i0 as usize * d1 * d2..(i0 as usize + 1) * d1 * d2];
                        for p1 in 0..o1 {
                            let i1 = (p1 * s + k1) as isize - 1;
                            if i1 < 0 || i1 as usize >= d1 {
                                continue;
                            }
                            let seg = &in_plane[p1 * o2..(p1 + 1) * o2];
                            let dst_row = &mut dst_p[i1 as usize * d2..(i1 as usize + 1) * d2];
                            for (p2, &v) in seg.iter().enumerate() {
                                let i2 = (p2 * 2 + k2) as isize - 1;
                                if i2 >= 0 && (i2 as usize) < d2 {
                                    dst_row[i2 as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn chunk_planes(dims: &ConvDims) -> usize {
    let plane = dims.ext_out[1] * dims.ext_out[2];
    (CHUNK_POSITIONS / plane).max(1)
}

fn col_row_ptrs(col: &[f32], rows: usize, cols: usize) -> Vec<*const f32> {
    (0..rows).map(|r| col[r * cols..].as_ptr()).collect()
}

// ── forward ──────────────────────────────────────────────────────────

/// Convolution forward pass. Output extent is `ceil(extent / stride)` per axis.
pub fn conv3d_forward(input: &Tensor, kernel: &ConvKernel3D) -> Result<Tensor, TensorError> {
    let dims = conv_dims(input, kernel.weights(), kernel.stride())?;
    input.check_finite("conv input")?;
    let mut out = Tensor::zeros(&[
        dims.n,
        dims.out_ch,
        dims.ext_out[0],
        dims.ext_out[1],
        dims.ext_out[2],
    ]);
    if dims.stride == 1 {
        forward_padded(input, kernel, &dims, &mut out);
    } else {
        forward_im2col(input, kernel, &dims, &mut out);
    }
    Ok(out)
}

fn forward_padded(input: &Tensor, kernel: &ConvKernel3D, dims: &ConvDims, out: &mut Tensor) {
    let pad = Padded::new(dims.ext_in);
    let in_vol = dims.in_volume();
    let out_vol = dims.out_volume();
    let weights = kernel.weights().data();
    let bias = kernel.bias().data();
    let in_data = input.data();
    out.data_mut()
        .par_chunks_mut(dims.out_ch * out_vol)
        .enumerate()
        .for_each_init(
            || {
                (
                    vec![0.0f32; pad.buffer_len(dims.in_ch)],
                    vec![0.0f32; dims.out_ch * pad.vol],
                )
            },
            |(in_pad, out_pad), (n, out_sample)| {
                let sample = &in_data[n * dims.in_ch * in_vol..(n + 1) * dims.in_ch * in_vol];
                pad.fill(in_pad, sample, dims.in_ch);
                let rows = pad.tap_rows(in_pad, dims.in_ch);
                unsafe {
                    gemm_nn_rows(
                        dims.out_ch,
                        dims.col_rows(),
                        pad.vol,
                        weights.as_ptr(),
                        &rows,
                        out_pad.as_mut_ptr(),
                        pad.vol,
                    );
                }
                pad.compact(out_pad, out_sample, dims.out_ch, Some(bias));
            },
        );
}

fn forward_im2col(input: &Tensor, kernel: &ConvKernel3D, dims: &ConvDims, out: &mut Tensor) {
    let in_vol = dims.in_volume();
    let out_vol = dims.out_volume();
    let planes_per_chunk = chunk_planes(dims);
    let col_len = dims.col_rows() * planes_per_chunk * dims.ext_out[1] * dims.ext_out[2];
    let weights = kernel.weights().data();
    let bias = kernel.bias().data();
    let in_data = input.data();
    out.data_mut()
        .par_chunks_mut(dims.out_ch * out_vol)
        .enumerate()
        .for_each_init(
            || vec![0.0f32; col_len],
            |col, (n, out_sample)| {
                let sample = &in_data[n * dims.in_ch * in_vol..(n + 1) * dims.in_ch * in_vol];
                let mut p0 = 0;
                while p0 < dims.ext_out[0] {
                    let p0_hi = (p0 + planes_per_chunk).min(dims.ext_out[0]);
                    let cols = (p0_hi - p0) * dims.ext_out[1] * dims.ext_out[2];
                    im2col_chunk(sample, dims, p0, p0_hi, col);
                    let off = p0 * dims.ext_out[1] * dims.ext_out[2];
                    let rows = col_row_ptrs(col, dims.col_rows(), cols);
                    unsafe {
                        gemm_nn_rows(
                            dims.out_ch,
                            dims.col_rows(),
                            cols,
                            weights.as_ptr(),
                            &rows,
                            out_sample[off..].as_mut_ptr(),
                            out_vol,
                        );
                    }
                    p0 = p0_hi;
                }
                for (o, chunk) in out_sample.chunks_exact_mut(out_vol).enumerate() {
                    let b = bias[o];
                    if b != 0.0 {
                        for v in chunk.iter_mut() {
                            *v += b;
                        }
                    }
                }
            },
        );
}

// ── backward ─────────────────────────────────────────────────────────

/// Gradients of the convolution with respect to input, weights and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward pass: `grad_out` has the forward output's shape.
pub fn conv3d_backward(
    input: &Tensor,
    kernel: &ConvKernel3D,
    grad_out: &Tensor,
) -> Result<ConvGrads, TensorError> {
    let dims = conv_dims(input, kernel.weights(), kernel.stride())?;
    grad_out.expect_shape(
        &[
            dims.n,
            dims.out_ch,
            dims.ext_out[0],
            dims.ext_out[1],
            dims.ext_out[2],
        ],
        "conv grad_out",
    )?;
    let mut grad_input = Tensor::zeros(input.shape());
    let partials = if dims.stride == 1 {
        backward_padded(input, kernel, grad_out, &dims, &mut grad_input)
    } else {
        backward_im2col(input, kernel, grad_out, &dims, &mut grad_input)
    };
    let mut grad_weights = Tensor::zeros(kernel.weights().shape());
    let mut grad_bias = Tensor::zeros(kernel.bias().shape());
    // fixed reduction order over samples
    for (dw, db) in &partials {
        for (acc, v) in grad_weights.data_mut().iter_mut().zip(dw) {
            *acc += v;
        }
        for (acc, v) in grad_bias.data_mut().iter_mut().zip(db) {
            *acc += v;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

type SamplePartials = Vec<(Vec<f32>, Vec<f32>)>;

fn backward_padded(
    input: &Tensor,
    kernel: &ConvKernel3D,
    grad_out: &Tensor,
    dims: &ConvDims,
    grad_input: &mut Tensor,
) -> SamplePartials {
    let pad = Padded::new(dims.ext_in);
    let in_vol = dims.in_volume();
    let out_vol = dims.out_volume();
    let k_rows = dims.col_rows();
    let weights = kernel.weights().data();
    // W'[c, (o, k)] = W[o, c, k] for the transposed correlation
    let mut w_flip = vec![0.0f32; dims.in_ch * dims.out_ch * KERNEL_TAPS];
    for o in 0..dims.out_ch {
        for c in 0..dims.in_ch {
            for t in 0..KERNEL_TAPS {
                w_flip[(c * dims.out_ch + o) * KERNEL_TAPS + t] =
                    weights[(o * dims.in_ch + c) * KERNEL_TAPS + t];
            }
        }
    }
    let in_data = input.data();
    let go_data = grad_out.data();
    grad_input
        .data_mut()
        .par_chunks_mut(dims.in_ch * in_vol)
        .enumerate()
        .map_init(
            || {
                (
                    vec![0.0f32; pad.buffer_len(dims.in_ch.max(dims.out_ch))],
                    vec![0.0f32; pad.buffer_len(dims.out_ch)],
                    vec![0.0f32; dims.in_ch.max(dims.out_ch) * pad.vol],
                )
            },
            |(in_pad, go_pad, scratch_out), (n, gin_sample)| {
                let sample = &in_data[n * dims.in_ch * in_vol..(n + 1) * dims.in_ch * in_vol];
                let go_sample =
                    &go_data[n * dims.out_ch * out_vol..(n + 1) * dims.out_ch * out_vol];
                let mut dw = vec![0.0f32; dims.out_ch * k_rows];
                let mut db = vec![0.0f32; dims.out_ch];
                for (o, row) in go_sample.chunks_exact(out_vol).enumerate() {
                    db[o] = row.iter().sum();
                }
                pad.fill(in_pad, sample, dims.in_ch);
                pad.fill(go_pad, go_sample, dims.out_ch);
                // dW[o, (c,k)] += sum_j go_pad[o, j] * in_pad[(c,k) shifted, j]
                let in_rows = pad.tap_rows(in_pad, dims.in_ch);
                unsafe {
                    gemm_nt_rows_acc(
                        dims.out_ch,
                        k_rows,
                        pad.vol,
                        go_pad.as_ptr().add(pad.margin),
                        pad.vol,
                        &in_rows,
                        dw.as_mut_ptr(),
                    );
                }
                // grad_in[c] = sum_{o,k} W[o,c,k] * go shifted by -(k-1)
                let go_rows = pad.flipped_tap_rows(go_pad, dims.out_ch);
                unsafe {
                    gemm_nn_rows(
                        dims.in_ch,
                        dims.out_ch * KERNEL_TAPS,
                        pad.vol,
                        w_flip.as_ptr(),
                        &go_rows,
                        scratch_out.as_mut_ptr(),
                        pad.vol,
                    );
                }
                pad.compact(scratch_out, gin_sample, dims.in_ch, None);
                (dw, db)
            },
        )
        .collect()
}

fn backward_im2col(
    input: &Tensor,
    kernel: &ConvKernel3D,
    grad_out: &Tensor,
    dims: &ConvDims,
    grad_input: &mut Tensor,
) -> SamplePartials {
    let in_vol = dims.in_volume();
    let out_vol = dims.out_volume();
    let k_rows = dims.col_rows();
    let planes_per_chunk = chunk_planes(dims);
    let col_len = k_rows * planes_per_chunk * dims.ext_out[1] * dims.ext_out[2];
    let weights = kernel.weights().data();
    // W^T as [k_rows, out_ch] row-major
    let mut w_t = vec![0.0f32; k_rows * dims.out_ch];
    for o in 0..dims.out_ch {
        for r in 0..k_rows {
            w_t[r * dims.out_ch + o] = weights[o * k_rows + r];
        }
    }
    let in_data = input.data();
    let go_data = grad_out.data();
    grad_input
        .data_mut()
        .par_chunks_mut(dims.in_ch * in_vol)
        .enumerate()
        .map_init(
            || (vec![0.0f32; col_len], vec![0.0f32; col_len]),
            |(col, col_grad), (n, gin_sample)| {
                let sample = &in_data[n * dims.in_ch * in_vol..(n + 1) * dims.in_ch * in_vol];
                let go_sample =
                    &go_data[n * dims.out_ch * out_vol..(n + 1) * dims.out_ch * out_vol];
                let mut dw = vec![0.0f32; dims.out_ch * k_rows];
                let mut db = vec![0.0f32; dims.out_ch];
                for (o, row) in go_sample.chunks_exact(out_vol).enumerate() {
                    db[o] = row.iter().sum();
                }
                let mut p0 = 0;
                while p0 < dims.ext_out[0] {
                    let p0_hi = (p0 + planes_per_chunk).min(dims.ext_out[0]);
                    let cols = (p0_hi - p0) * dims.ext_out[1] * dims.ext_out[2];
                    let off = p0 * dims.ext_out[1] * dims.ext_out[2];
                    im2col_chunk(sample, dims, p0, p0_hi, col);
                    let col_rows_ptrs = col_row_ptrs(col, k_rows, cols);
                    let go_rows: Vec<*const f32> = (0..dims.out_ch)
                        .map(|o| go_sample[o * out_vol + off..].as_ptr())
                        .collect();
                    unsafe {
                        // dW += grad_out_chunk . col^T
                        gemm_nt_rows_acc(
                            dims.out_ch,
                            k_rows,
                            cols,
                            go_sample[off..].as_ptr(),
                            out_vol,
                            &col_rows_ptrs,
                            dw.as_mut_ptr(),
                        );
                        // col_grad = W^T . grad_out_chunk, then scatter back
                        gemm_nn_rows(
                            k_rows,
                            dims.out_ch,
                            cols,
                            w_t.as_ptr(),
                            &go_rows,
                            col_grad.as_mut_ptr(),
                            cols,
                        );
                    }
                    col2im_add_chunk(gin_sample, dims, p0, p0_hi, col_grad);
                    p0 = p0_hi;
                }
                (dw, db)
            },
        )
        .collect()
}
