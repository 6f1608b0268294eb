//! Forward and backward kernels: 3D convolution with "same" zero padding,
//! non-overlapping transpose convolution, anisotropic max pooling, ReLU,
//! batch normalization, channel concatenation, elementwise add, MSE loss.
//!
//! Convolutions follow the cross-correlation convention and accumulate in
//! f64. Every parallel region writes disjoint output slabs in a fixed order,
//! so results are schedule-independent.

use rayon::prelude::*;

use super::tensor::{NnError, Tensor5};

#[inline]
fn tap_bounds(dim: usize, offset: i64) -> (usize, usize) {
    // valid output range so that position + offset stays inside [0, dim)
    let lo = (-offset).max(0) as usize;
    let hi = ((dim as i64 - offset).min(dim as i64)).max(0) as usize;
    (lo, hi.max(lo))
}

/// One output row of a same-padded 1D correlation, all x taps fused:
/// dst[x] += sum_tx w[tx] * src[x + tx - px]. `src` and `dst` are full rows
/// of length `xs`; the x-interior runs fused, edges tap by tap.
#[inline]
fn row_correlate_fused(dst: &mut [f64], src: &[f64], w: &[f64], px: usize) {
    let xs = dst.len();
    let kx = w.len();
    if kx == 1 {
        let w0 = w[0];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w0 * s;
        }
        return;
    }
    if kx == 3 && xs >= 2 {
        let (w0, w1, w2) = (w[0], w[1], w[2]);
        // interior: x in 1..xs-1
        let n = xs - 2;
        let s0 = &src[0..n];
        let s1 = &src[1..n + 1];
        let s2 = &src[2..n + 2];
        let d = &mut dst[1..n + 1];
        for i in 0..n {
            d[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
        }
        dst[0] += w1 * src[0] + w2 * src[1];
        dst[xs - 1] += w0 * src[xs - 2] + w1 * src[xs - 1];
        return;
    }
    // general odd kx
    for (x, d) in dst.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (tx, &wt) in w.iter().enumerate() {
            let sx = x as i64 + tx as i64 - px as i64;
            if sx >= 0 && (sx as usize) < xs {
                acc += wt * src[sx as usize];
            }
        }
        *d += acc;
    }
}

/// All x taps of one (tz, ty) kernel row accumulated in a single pass:
/// acc[tx] += sum_x src[x + tx - px] * grad[x]. Uses independent
/// accumulator chains so the FMAs pipeline.
#[inline]
fn row_tap_dots(acc: &mut [f64], src: &[f64], grad: &[f64], px: usize) {
    let xs = grad.len();
    let kx = acc.len();
    if kx == 3 && xs >= 2 {
        let (mut a0a, mut a0b) = (0.0f64, 0.0f64);
        let (mut a1a, mut a1b) = (0.0f64, 0.0f64);
        let (mut a2a, mut a2b) = (0.0f64, 0.0f64);
        let n = xs - 2;
        let g = &grad[1..n + 1];
        let s0 = &src[0..n];
        let s1 = &src[1..n + 1];
        let s2 = &src[2..n + 2];
        let half = n / 2;
        for i in 0..half {
            let j = 2 * i;
            a0a += s0[j] * g[j];
            a0b += s0[j + 1] * g[j + 1];
            a1a += s1[j] * g[j];
            a1b += s1[j + 1] * g[j + 1];
            a2a += s2[j] * g[j];
            a2b += s2[j + 1] * g[j + 1];
        }
        if n % 2 == 1 {
            let j = n - 1;
            a0a += s0[j] * g[j];
            a1a += s1[j] * g[j];
            a2a += s2[j] * g[j];
        }
        // edge columns x = 0 and x = xs-1
        acc[0] += a0a + a0b;
        acc[1] += a1a + a1b + src[0] * grad[0] + src[xs - 1] * grad[xs - 1];
        acc[2] += a2a + a2b + src[1] * grad[0];
        acc[0] += src[xs - 2] * grad[xs - 1];
        return;
    }
    for (tx, a) in acc.iter_mut().enumerate() {
        let mut sum = 0.0;
        for (x, &g) in grad.iter().enumerate() {
            let sx = x as i64 + tx as i64 - px as i64;
            if sx >= 0 && (sx as usize) < xs {
                sum += src[sx as usize] * g;
            }
        }
        *a += sum;
    }
}

fn check_conv_shapes(input: &Tensor5, kernel: &Tensor5, bias: &[f64]) -> Result<(), NnError> {
    let [_, ci, _, _, _] = input.shape;
    let [co, kci, kx, ky, kz] = kernel.shape;
    if ci != kci {
        return Err(NnError::ShapeMismatch {
            context: "conv3d input channels vs kernel",
            a: input.shape.to_vec(),
            b: kernel.shape.to_vec(),
        });
    }
    if kx % 2 == 0 || ky % 2 == 0 || kz % 2 == 0 {
        return Err(NnError::EvenKernel((kx, ky, kz)));
    }
    if bias.len() != co {
        return Err(NnError::ShapeMismatch {
            context: "conv3d bias length",
            a: vec![bias.len()],
            b: vec![co],
        });
    }
    Ok(())
}

/// 3D cross-correlation with "same" zero padding and unit stride; the output
/// keeps the input's spatial shape.
pub fn conv3d_forward(
    input: &Tensor5,
    kernel: &Tensor5,
    bias: &[f64],
) -> Result<Tensor5, NnError> {
    check_conv_shapes(input, kernel, bias)?;
    let [nb, ci_n, xs, ys, zs] = input.shape;
    let [co_n, _, kx, ky, kz] = kernel.shape;
    let (px, py, pz) = (kx / 2, ky / 2, kz / 2);
    let spatial = xs * ys * zs;
    let kvol = kx * ky * kz;

    let mut out = Tensor5::zeros([nb, co_n, xs, ys, zs]);
    out.data
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(idx, out_slab)| {
            let n = idx / co_n;
            let co = idx % co_n;
            let mut acc = vec![0.0f64; xs];
            for z in 0..zs {
                // kernel z taps that stay in bounds for this output z
                let tz_lo = pz.saturating_sub(z);
                let tz_hi = kz.min(zs + pz - z);
                for y in 0..ys {
                    let ty_lo = py.saturating_sub(y);
                    let ty_hi = ky.min(ys + py - y);
                    acc.fill(bias[co]);
                    for ci in 0..ci_n {
                        let in_slab = input.slab(n, ci);
                        let kbase = (co * ci_n + ci) * kvol;
                        for tz in tz_lo..tz_hi {
                            let src_z = z + tz - pz;
                            for ty in ty_lo..ty_hi {
                                let src_y = y + ty - py;
                                let wrow = &kernel.data[kbase + (tz * ky + ty) * kx..][..kx];
                                let src = &in_slab[(src_z * ys + src_y) * xs..][..xs];
                                row_correlate_fused(&mut acc, src, wrow, px);
                            }
                        }
                    }
                    out_slab[(z * ys + y) * xs..][..xs].copy_from_slice(&acc);
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv3d_forward`] with respect to input, kernel, and bias.
pub fn conv3d_backward(
    input: &Tensor5,
    kernel: &Tensor5,
    grad_out: &Tensor5,
) -> Result<(Tensor5, Tensor5, Vec<f64>), NnError> {
    let [nb, ci_n, xs, ys, zs] = input.shape;
    let [co_n, _, kx, ky, kz] = kernel.shape;
    if grad_out.shape != [nb, co_n, xs, ys, zs] {
        return Err(NnError::ShapeMismatch {
            context: "conv3d grad_out",
            a: grad_out.shape.to_vec(),
            b: vec![nb, co_n, xs, ys, zs],
        });
    }
    let (px, py, pz) = (kx / 2, ky / 2, kz / 2);
    let spatial = xs * ys * zs;
    let kvol = kx * ky * kz;

    // d input: correlate grad_out with the kernel reflected through its center
    let mut grad_input = Tensor5::zeros(input.shape);
    grad_input
        .data
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(idx, gin_slab)| {
            let n = idx / ci_n;
            let ci = idx % ci_n;
            // x-reversed weights turn the reflected correlation into the
            // same fused row pass as the forward op
            let mut wrev = vec![0.0f64; co_n * kvol];
            for co in 0..co_n {
                let kbase = (co * ci_n + ci) * kvol;
                for t in 0..kvol {
                    let tx = t % kx;
                    wrev[co * kvol + t - tx + (kx - 1 - tx)] = kernel.data[kbase + t];
                }
            }
            let mut acc = vec![0.0f64; xs];
            for z in 0..zs {
                // reflected z taps in bounds: src_z = z + pz - tz
                let tz_lo = (z + pz + 1).saturating_sub(zs);
                let tz_hi = kz.min(z + pz + 1);
                for y in 0..ys {
                    let ty_lo = (y + py + 1).saturating_sub(ys);
                    let ty_hi = ky.min(y + py + 1);
                    acc.fill(0.0);
                    for co in 0..co_n {
                        let gout_slab = grad_out.slab(n, co);
                        for tz in tz_lo..tz_hi {
                            let src_z = z + pz - tz;
                            for ty in ty_lo..ty_hi {
                                let src_y = y + py - ty;
                                let wrow = &wrev[co * kvol + (tz * ky + ty) * kx..][..kx];
                                let src = &gout_slab[(src_z * ys + src_y) * xs..][..xs];
                                row_correlate_fused(&mut acc, src, wrow, px);
                            }
                        }
                    }
                    gin_slab[(z * ys + y) * xs..][..xs].copy_from_slice(&acc);
                }
            }
        });

    // d kernel: correlate input with grad_out per (co, ci, tap)
    let mut grad_kernel = Tensor5::zeros(kernel.shape);
    grad_kernel
        .data
        .par_chunks_mut(kvol)
        .enumerate()
        .for_each(|(idx, gk_slab)| {
            let co = idx / ci_n;
            let ci = idx % ci_n;
            for tz in 0..kz {
                let dz = tz as i64 - pz as i64;
                let (z_lo, z_hi) = tap_bounds(zs, dz);
                for ty in 0..ky {
                    let dy = ty as i64 - py as i64;
                    let (y_lo, y_hi) = tap_bounds(ys, dy);
                    let acc = &mut gk_slab[(tz * ky + ty) * kx..][..kx];
                    for n in 0..nb {
                        let in_slab = input.slab(n, ci);
                        let gout_slab = grad_out.slab(n, co);
                        for z in z_lo..z_hi {
                            let src_z = (z as i64 + dz) as usize;
                            for y in y_lo..y_hi {
                                let src_y = (y as i64 + dy) as usize;
                                let src = &in_slab[(src_z * ys + src_y) * xs..][..xs];
                                let grad = &gout_slab[(z * ys + y) * xs..][..xs];
                                row_tap_dots(acc, src, grad, px);
                            }
                        }
                    }
                }
            }
        });

    let mut grad_bias = vec![0.0f64; co_n];
    for n in 0..nb {
        for (co, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out.slab(n, co).iter().sum::<f64>();
        }
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Strided valid cross-correlation (no padding, stride = kernel size is NOT
/// required here): out[o] = sum_d in[o*stride + d] * k[d]. The linear adjoint
/// of [`deconv3d_forward`] when stride equals the kernel size.
pub fn conv3d_strided_valid(
    input: &Tensor5,
    kernel: &Tensor5,
    stride: (usize, usize, usize),
) -> Result<Tensor5, NnError> {
    let [nb, ci_n, xs, ys, zs] = input.shape;
    let [co_n, kci, kx, ky, kz] = kernel.shape;
    if ci_n != kci {
        return Err(NnError::ShapeMismatch {
            context: "strided conv channels",
            a: input.shape.to_vec(),
            b: kernel.shape.to_vec(),
        });
    }
    let (sx, sy, sz) = stride;
    if xs % sx != 0 || ys % sy != 0 || zs % sz != 0 {
        return Err(NnError::NotDivisible {
            dims: (xs, ys, zs),
            window: stride,
        });
    }
    let (ox, oy, oz) = (xs / sx, ys / sy, zs / sz);
    let mut out = Tensor5::zeros([nb, co_n, ox, oy, oz]);
    for n in 0..nb {
        for co in 0..co_n {
            for ci in 0..ci_n {
                let in_slab = input.slab(n, ci);
                for z in 0..oz {
                    for y in 0..oy {
                        for x in 0..ox {
                            let mut acc = 0.0;
                            for tz in 0..kz.min(zs - z * sz) {
                                for ty in 0..ky.min(ys - y * sy) {
                                    for tx in 0..kx.min(xs - x * sx) {
                                        let w = kernel.at(co, ci, tx, ty, tz);
                                        acc += w
                                            * in_slab[((z * sz + tz) * ys + (y * sy + ty)) * xs
                                                + (x * sx + tx)];
                                    }
                                }
                            }
                            let i = out.index(n, co, x, y, z);
                            out.data[i] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_deconv(kernel: &Tensor5, stride: (usize, usize, usize)) -> Result<(), NnError> {
    let [_, _, kx, ky, kz] = kernel.shape;
    if (kx, ky, kz) != stride {
        return Err(NnError::KernelStrideMismatch {
            kernel: (kx, ky, kz),
            stride,
        });
    }
    Ok(())
}

/// Transpose convolution with kernel == stride: each input voxel paints a
/// disjoint kernel-shaped block, multiplying every spatial dim by its stride.
pub fn deconv3d_forward(
    input: &Tensor5,
    kernel: &Tensor5,
    bias: &[f64],
    stride: (usize, usize, usize),
) -> Result<Tensor5, NnError> {
    check_deconv(kernel, stride)?;
    let [nb, ci_n, xs, ys, zs] = input.shape;
    let [co_n, kci, kx, ky, kz] = kernel.shape;
    if ci_n != kci {
        return Err(NnError::ShapeMismatch {
            context: "deconv channels",
            a: input.shape.to_vec(),
            b: kernel.shape.to_vec(),
        });
    }
    if bias.len() != co_n {
        return Err(NnError::ShapeMismatch {
            context: "deconv bias length",
            a: vec![bias.len()],
            b: vec![co_n],
        });
    }
    let (ox, oy, oz) = (xs * kx, ys * ky, zs * kz);
    let out_spatial = ox * oy * oz;
    let kvol = kx * ky * kz;
    let mut out = Tensor5::zeros([nb, co_n, ox, oy, oz]);
    out.data
        .par_chunks_mut(out_spatial)
        .enumerate()
        .for_each(|(idx, out_slab)| {
            let n = idx / co_n;
            let co = idx % co_n;
            out_slab.fill(bias[co]);
            for ci in 0..ci_n {
                let in_slab = input.slab(n, ci);
                let kbase = (co * ci_n + ci) * kvol;
                for z in 0..zs {
                    for y in 0..ys {
                        for x in 0..xs {
                            let v = in_slab[(z * ys + y) * xs + x];
                            for tz in 0..kz {
                                for ty in 0..ky {
                                    let row =
                                        ((z * kz + tz) * oy + (y * ky + ty)) * ox + x * kx;
                                    for tx in 0..kx {
                                        out_slab[row + tx] +=
                                            v * kernel.data[kbase + (tz * ky + ty) * kx + tx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`deconv3d_forward`].
pub fn deconv3d_backward(
    input: &Tensor5,
    kernel: &Tensor5,
    grad_out: &Tensor5,
    stride: (usize, usize, usize),
) -> Result<(Tensor5, Tensor5, Vec<f64>), NnError> {
    check_deconv(kernel, stride)?;
    let [nb, ci_n, xs, ys, zs] = input.shape;
    let [co_n, _, kx, ky, kz] = kernel.shape;
    let (ox, oy, oz) = (xs * kx, ys * ky, zs * kz);
    if grad_out.shape != [nb, co_n, ox, oy, oz] {
        return Err(NnError::ShapeMismatch {
            context: "deconv grad_out",
            a: grad_out.shape.to_vec(),
            b: vec![nb, co_n, ox, oy, oz],
        });
    }
    let kvol = kx * ky * kz;
    let spatial = xs * ys * zs;

    let mut grad_input = Tensor5::zeros(input.shape);
    grad_input
        .data
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(idx, gin_slab)| {
            let n = idx / ci_n;
            let ci = idx % ci_n;
            for co in 0..co_n {
                let gout_slab = grad_out.slab(n, co);
                let kbase = (co * ci_n + ci) * kvol;
                for z in 0..zs {
                    for y in 0..ys {
                        for x in 0..xs {
                            let mut acc = 0.0;
                            for tz in 0..kz {
                                for ty in 0..ky {
                                    let row =
                                        ((z * kz + tz) * oy + (y * ky + ty)) * ox + x * kx;
                                    for tx in 0..kx {
                                        acc += gout_slab[row + tx]
                                            * kernel.data[kbase + (tz * ky + ty) * kx + tx];
                                    }
                                }
                            }
                            gin_slab[(z * ys + y) * xs + x] += acc;
                        }
                    }
                }
            }
        });

    let mut grad_kernel = Tensor5::zeros(kernel.shape);
    grad_kernel
        .data
        .par_chunks_mut(kvol)
        .enumerate()
        .for_each(|(idx, gk_slab)| {
            let co = idx / ci_n;
            let ci = idx % ci_n;
            for n in 0..nb {
                let in_slab = input.slab(n, ci);
                let gout_slab = grad_out.slab(n, co);
                for z in 0..zs {
                    for y in 0..ys {
                        for x in 0..xs {
                            let v = in_slab[(z * ys + y) * xs + x];
                            for tz in 0..kz {
                                for ty in 0..ky {
                                    let row =
                                        ((z * kz + tz) * oy + (y * ky + ty)) * ox + x * kx;
                                    for tx in 0..kx {
                                        gk_slab[(tz * ky + ty) * kx + tx] +=
                                            v * gout_slab[row + tx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut grad_bias = vec![0.0f64; co_n];
    for n in 0..nb {
        for (co, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out.slab(n, co).iter().sum::<f64>();
        }
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Max pooling with stride equal to the window. Returns the pooled tensor and
/// the flat within-slab argmax of every output element (first occurrence wins
/// on ties).
pub fn maxpool3d_forward(
    input: &Tensor5,
    window: (usize, usize, usize),
) -> Result<(Tensor5, Vec<u32>), NnError> {
    let [nb, cn, xs, ys, zs] = input.shape;
    let (wx, wy, wz) = window;
    if xs % wx != 0 || ys % wy != 0 || zs % wz != 0 {
        return Err(NnError::NotDivisible {
            dims: (xs, ys, zs),
            window,
        });
    }
    let (ox, oy, oz) = (xs / wx, ys / wy, zs / wz);
    let mut out = Tensor5::zeros([nb, cn, ox, oy, oz]);
    let mut argmax = vec![0u32; out.numel()];
    let out_spatial = ox * oy * oz;
    for n in 0..nb {
        for c in 0..cn {
            let in_slab = input.slab(n, c);
            let slab_base = (n * cn + c) * out_spatial;
            for z in 0..oz {
                for y in 0..oy {
                    for x in 0..ox {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for tz in 0..wz {
                            for ty in 0..wy {
                                for tx in 0..wx {
                                    let i = ((z * wz + tz) * ys + (y * wy + ty)) * xs
                                        + (x * wx + tx);
                                    if in_slab[i] > best {
                                        best = in_slab[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = (z * oy + y) * ox + x;
                        out.data[slab_base + o] = best;
                        argmax[slab_base + o] = best_i as u32;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient back to its argmax input position.
pub fn maxpool3d_backward(
    input_shape: [usize; 5],
    argmax: &[u32],
    grad_out: &Tensor5,
) -> Tensor5 {
    let mut grad_input = Tensor5::zeros(input_shape);
    let [_, cn, xs, ys, zs] = input_shape;
    let in_spatial = xs * ys * zs;
    let out_spatial = grad_out.spatial();
    for nc in 0..grad_out.shape[0] * cn {
        let out_base = nc * out_spatial;
        let in_base = nc * in_spatial;
        for o in 0..out_spatial {
            grad_input.data[in_base + argmax[out_base + o] as usize] +=
                grad_out.data[out_base + o];
        }
    }
    grad_input
}

pub fn relu_forward(input: &Tensor5) -> Tensor5 {
    Tensor5 {
        shape: input.shape,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn relu_backward(input: &Tensor5, grad_out: &Tensor5) -> Tensor5 {
    Tensor5 {
        shape: input.shape,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Per-channel statistics cached by the batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train_mode: bool,
}

impl BnCache {
    /// Batch variances recovered from the cached inverse standard deviations.
    pub fn variances(&self) -> Vec<f64> {
        self.inv_std
            .iter()
            .map(|is| 1.0 / (is * is) - BN_EPSILON)
            .collect()
    }
}

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Batch normalization over (batch, x, y, z) per channel.
///
/// Train mode standardizes with biased batch statistics; infer mode uses the
/// running estimates. Folding batch statistics into the running estimates is
/// a separate step, [`bn_running_update`].
pub fn batchnorm_forward(
    input: &Tensor5,
    gain: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    train: bool,
) -> Result<(Tensor5, BnCache), NnError> {
    let [nb, cn, xs, ys, zs] = input.shape;
    let spatial = xs * ys * zs;
    let per_channel = nb * spatial;
    if train && per_channel < 2 {
        return Err(NnError::DegenerateBatch(per_channel));
    }
    let mut mean = vec![0.0f64; cn];
    let mut inv_std = vec![0.0f64; cn];
    if train {
        for c in 0..cn {
            let mut sum = 0.0;
            for n in 0..nb {
                sum += input.slab(n, c).iter().sum::<f64>();
            }
            let mu = sum / per_channel as f64;
            let mut ssq = 0.0;
            for n in 0..nb {
                for &v in input.slab(n, c) {
                    let d = v - mu;
                    ssq += d * d;
                }
            }
            let var = ssq / per_channel as f64;
            mean[c] = mu;
            inv_std[c] = 1.0 / (var + BN_EPSILON).sqrt();
        }
    } else {
        for c in 0..cn {
            mean[c] = running_mean[c];
            inv_std[c] = 1.0 / (running_var[c] + BN_EPSILON).sqrt();
        }
    }

    let mut out = Tensor5::zeros(input.shape);
    for n in 0..nb {
        for c in 0..cn {
            let (mu, is, g, b) = (mean[c], inv_std[c], gain[c], shift[c]);
            let src = input.slab(n, c);
            let dst = out.slab_mut(n, c);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = g * (s - mu) * is + b;
            }
        }
    }
    Ok((
        out,
        BnCache {
            mean,
            inv_std,
            train_mode: train,
        },
    ))
}

/// Folds the cached batch statistics into the running estimates with
/// momentum [`BN_MOMENTUM`].
pub fn bn_running_update(cache: &BnCache, running_mean: &mut [f64], running_var: &mut [f64]) {
    let vars = cache.variances();
    for c in 0..running_mean.len() {
        running_mean[c] = BN_MOMENTUM * running_mean[c] + (1.0 - BN_MOMENTUM) * cache.mean[c];
        running_var[c] = BN_MOMENTUM * running_var[c] + (1.0 - BN_MOMENTUM) * vars[c];
    }
}

/// Gradients of batch norm: input, gain, shift.
pub fn batchnorm_backward(
    input: &Tensor5,
    gain: &[f64],
    cache: &BnCache,
    grad_out: &Tensor5,
) -> (Tensor5, Vec<f64>, Vec<f64>) {
    let [nb, cn, xs, ys, zs] = input.shape;
    let spatial = xs * ys * zs;
    let per_channel = (nb * spatial) as f64;
    let mut grad_gain = vec![0.0f64; cn];
    let mut grad_shift = vec![0.0f64; cn];
    let mut grad_input = Tensor5::zeros(input.shape);

    for c in 0..cn {
        let (mu, is) = (cache.mean[c], cache.inv_std[c]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..nb {
            let x = input.slab(n, c);
            let dy = grad_out.slab(n, c);
            for (&xv, &g) in x.iter().zip(dy) {
                sum_dy += g;
                sum_dy_xhat += g * (xv - mu) * is;
            }
        }
        grad_shift[c] = sum_dy;
        grad_gain[c] = sum_dy_xhat;
        if cache.train_mode {
            let m_dy = sum_dy / per_channel;
            let m_dy_xhat = sum_dy_xhat / per_channel;
            for n in 0..nb {
                let x = input.slab(n, c);
                let dy = grad_out.slab(n, c);
                let base = (n * cn + c) * spatial;
                for i in 0..spatial {
                    let xhat = (x[i] - mu) * is;
                    grad_input.data[base + i] =
                        gain[c] * is * (dy[i] - m_dy - xhat * m_dy_xhat);
                }
            }
        } else {
            for n in 0..nb {
                let dy = grad_out.slab(n, c);
                let base = (n * cn + c) * spatial;
                for i in 0..spatial {
                    grad_input.data[base + i] = gain[c] * is * dy[i];
                }
            }
        }
    }
    (grad_input, grad_gain, grad_shift)
}

/// Concatenates along the channel axis.
pub fn concat_forward(a: &Tensor5, b: &Tensor5) -> Result<Tensor5, NnError> {
    let [nb, ca, xs, ys, zs] = a.shape;
    let [nb2, cb, xs2, ys2, zs2] = b.shape;
    if nb != nb2 || xs != xs2 || ys != ys2 || zs != zs2 {
        return Err(NnError::ShapeMismatch {
            context: "concat spatial/batch",
            a: a.shape.to_vec(),
            b: b.shape.to_vec(),
        });
    }
    let mut out = Tensor5::zeros([nb, ca + cb, xs, ys, zs]);
    let spatial = xs * ys * zs;
    for n in 0..nb {
        for c in 0..ca {
            out.slab_mut(n, c).copy_from_slice(a.slab(n, c));
        }
        for c in 0..cb {
            out.slab_mut(n, ca + c).copy_from_slice(b.slab(n, c));
        }
    }
    debug_assert_eq!(out.spatial(), spatial);
    Ok(out)
}

/// Splits a concat gradient back into the two input gradients.
pub fn concat_backward(grad_out: &Tensor5, ca: usize, cb: usize) -> (Tensor5, Tensor5) {
    let [nb, _, xs, ys, zs] = grad_out.shape;
    let mut ga = Tensor5::zeros([nb, ca, xs, ys, zs]);
    let mut gb = Tensor5::zeros([nb, cb, xs, ys, zs]);
    for n in 0..nb {
        for c in 0..ca {
            ga.slab_mut(n, c).copy_from_slice(grad_out.slab(n, c));
        }
        for c in 0..cb {
            gb.slab_mut(n, c).copy_from_slice(grad_out.slab(n, ca + c));
        }
    }
    (ga, gb)
}

pub fn add_forward(a: &Tensor5, b: &Tensor5) -> Result<Tensor5, NnError> {
    if a.shape != b.shape {
        return Err(NnError::ShapeMismatch {
            context: "elementwise add",
            a: a.shape.to_vec(),
            b: b.shape.to_vec(),
        });
    }
    Ok(Tensor5 {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Mean squared error over all elements, with its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor5, target: &Tensor5) -> Result<(f64, Tensor5), NnError> {
    if pred.shape != target.shape {
        return Err(NnError::ShapeMismatch {
            context: "mse",
            a: pred.shape.to_vec(),
            b: target.shape.to_vec(),
        });
    }
    let n = pred.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor5::zeros(pred.shape);
    for i in 0..pred.numel() {
        let d = pred.data[i] - target.data[i];
        loss += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
