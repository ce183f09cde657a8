//! Tape-free forward and backward kernels.
//!
//! Activations are `[N, C, H, W]` (pooling, convolution) or `[N, C, ...]`
//! (batch norm, global pooling). Every kernel validates shapes and returns
//! an invalid-argument or shape-mismatch error naming the offending size.

use alloc::vec;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::error::{invalid, shape_err};
use crate::Result;

/// Output length of a sliding window, or `None` when no window fits.
pub fn output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn as_nchw(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        other => Err(shape_err!("{what} expects [N, C, H, W], got {other:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = as_nchw(input, "conv2d input")?;
        let [out_channels, cin_per_group, kh, kw] = as_nchw(weight, "conv2d weight")
            .map_err(|_| shape_err!("conv2d weight must be [Cout, Cin/G, k1, k2], got {weight:?}"))?;
        if groups == 0 {
            return Err(invalid!("conv2d groups must be positive"));
        }
        if in_channels % groups != 0 {
            return Err(invalid!(
                "conv2d input channels {in_channels} not divisible by groups {groups}"
            ));
        }
        if out_channels % groups != 0 {
            return Err(invalid!(
                "conv2d output channels {out_channels} not divisible by groups {groups}"
            ));
        }
        if cin_per_group != in_channels / groups {
            return Err(shape_err!(
                "conv2d weight expects {cin_per_group} input channels per group, input provides {}",
                in_channels / groups
            ));
        }
        let out_h = output_dim(in_h, kh, stride.0, padding.0)
            .ok_or_else(|| invalid!("conv2d output height < 1 (H={in_h}, k1={kh}, s1={}, p1={})", stride.0, padding.0))?;
        let out_w = output_dim(in_w, kw, stride.1, padding.1)
            .ok_or_else(|| invalid!("conv2d output width < 1 (W={in_w}, k2={kw}, s2={}, p2={})", stride.1, padding.1))?;
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel: (kh, kw),
            stride,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the patch matrix for one group.
    fn patch_rows(&self) -> usize {
        self.cin_g() * self.kernel.0 * self.kernel.1
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Samples per patch matrix, sized to stay cache resident.
    fn chunk<T>(&self) -> usize {
        const TARGET_BYTES: usize = 512 * 1024;
        let per_sample = self.patch_rows() * self.out_plane() * core::mem::size_of::<T>();
        (TARGET_BYTES / per_sample.max(1)).clamp(1, self.batch.max(1))
    }

    /// Patch matrix `[patch_rows, samples.len() * out_plane]` of group `g`.
    fn chunk_im2col<T: Real>(&self, input: &[T], g: usize, samples: core::ops::Range<usize>, cols: &mut [T]) {
        let in_len = self.in_channels * self.in_plane();
        let plane = self.out_plane();
        let ld = samples.len() * plane;
        let n0 = samples.start;
        for n in samples {
            self.im2col(&input[n * in_len..(n + 1) * in_len], g, cols, ld, (n - n0) * plane);
        }
    }

    /// Output positions `lo..hi` whose tap `k` lands inside an input axis of
    /// length `len`.
    fn valid(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Writes group `g` of one sample into columns `offset..offset+out_plane`
    /// of a `[patch_rows, ld]` patch matrix.
    fn im2col<T: Real>(&self, sample: &[T], g: usize, cols: &mut [T], ld: usize, offset: usize) {
        let (kh, kw) = self.kernel;
        let (sy, sx) = self.stride;
        let (py, px) = self.padding;
        let plane = self.out_plane();
        for cl in 0..self.cin_g() {
            let c = g * self.cin_g() + cl;
            let src = &sample[c * self.in_plane()..(c + 1) * self.in_plane()];
            for i in 0..kh {
                let (ylo, yhi) = Self::valid(i, sy, py, self.in_h, self.out_h);
                for j in 0..kw {
                    let (xlo, xhi) = Self::valid(j, sx, px, self.in_w, self.out_w);
                    let row = (cl * kh + i) * kw + j;
                    let dst = &mut cols[row * ld + offset..row * ld + offset + plane];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if oy < ylo || oy >= yhi || xlo >= xhi {
                            line.fill(T::zero());
                            continue;
                        }
                        let iy = oy * sy + i - py;
                        let base = iy * self.in_w + xlo * sx + j - px;
                        line[..xlo].fill(T::zero());
                        line[xhi..].fill(T::zero());
                        if sx == 1 {
                            line[xlo..xhi].copy_from_slice(&src[base..base + xhi - xlo]);
                        } else {
                            for (k, v) in line[xlo..xhi].iter_mut().enumerate() {
                                *v = src[base + k * sx];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns `offset..offset+out_plane` of a `[patch_rows, ld]`
    /// patch matrix back onto group `g` of one sample.
    fn col2im<T: Real>(&self, cols: &[T], g: usize, sample: &mut [T], ld: usize, offset: usize) {
        let (kh, kw) = self.kernel;
        let (sy, sx) = self.stride;
        let (py, px) = self.padding;
        let plane = self.out_plane();
        for cl in 0..self.cin_g() {
            let c = g * self.cin_g() + cl;
            let dst = &mut sample[c * self.in_plane()..(c + 1) * self.in_plane()];
            for i in 0..kh {
                let (ylo, yhi) = Self::valid(i, sy, py, self.in_h, self.out_h);
                for j in 0..kw {
                    let (xlo, xhi) = Self::valid(j, sx, px, self.in_w, self.out_w);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = (cl * kh + i) * kw + j;
                    let src = &cols[row * ld + offset..row * ld + offset + plane];
                    for oy in ylo..yhi {
                        let iy = oy * sy + i - py;
                        let base = iy * self.in_w + xlo * sx + j - px;
                        let line = &src[oy * self.out_w + xlo..oy * self.out_w + xhi];
                        if sx == 1 {
                            for (d, &v) in dst[base..base + line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (k, &v) in line.iter().enumerate() {
                                dst[base + k * sx] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<(Tensor<T>, Conv2dGeometry)> {
    let geo = Conv2dGeometry::new(input.shape(), weight.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape() != [geo.out_channels] {
            return Err(shape_err!(
                "conv2d bias must be [{}], got {:?}",
                geo.out_channels,
                b.shape()
            ));
        }
    }
    let (rows, plane, cout_g) = (geo.patch_rows(), geo.out_plane(), geo.cout_g());
    let chunk = geo.chunk::<T>();
    let out_len = geo.out_channels * plane;
    let mut out = vec![T::zero(); geo.batch * out_len];
    let mut cols = vec![T::zero(); rows * chunk * plane];
    let mut y = vec![T::zero(); cout_g * chunk * plane];
    let w = weight.data();
    for g in 0..geo.groups {
        let w_g = &w[g * cout_g * rows..(g + 1) * cout_g * rows];
        for n0 in (0..geo.batch).step_by(chunk) {
            let n1 = (n0 + chunk).min(geo.batch);
            let ld = (n1 - n0) * plane;
            geo.chunk_im2col(input.data(), g, n0..n1, &mut cols);
            T::gemm(cout_g, rows, ld, (w_g, rows, 1), (&cols, ld, 1), T::zero(), (&mut y, ld, 1));
            for co in 0..cout_g {
                let b = bias.map_or(T::zero(), |b| b.data()[g * cout_g + co]);
                for n in n0..n1 {
                    let src = &y[co * ld + (n - n0) * plane..][..plane];
                    let start = n * out_len + (g * cout_g + co) * plane;
                    for (d, &v) in out[start..start + plane].iter_mut().zip(src) {
                        *d = v + b;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(geo.output_shape(), out)?, geo))
}

/// Gradients of a convolution. Each requested gradient is returned in the
/// shape of its forward operand.
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geo: &Conv2dGeometry,
    grad_out: &Tensor<T>,
    want: (bool, bool, bool),
) -> Result<Conv2dGrads<T>> {
    if grad_out.shape() != geo.output_shape() {
        return Err(shape_err!("conv2d upstream gradient shape {:?}", grad_out.shape()));
    }
    let (want_x, want_w, want_b) = want;
    let (rows, plane, cout_g) = (geo.patch_rows(), geo.out_plane(), geo.cout_g());
    let chunk = geo.chunk::<T>();
    let in_len = geo.in_channels * geo.in_plane();
    let out_len = geo.out_channels * plane;
    let x = input.data();
    let w = weight.data();
    let dy = grad_out.data();
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
    if want_x || want_w {
        let mut cols = vec![T::zero(); rows * chunk * plane];
        let mut dy_g = vec![T::zero(); cout_g * chunk * plane];
        for g in 0..geo.groups {
            let span = g * cout_g * rows..(g + 1) * cout_g * rows;
            for n0 in (0..geo.batch).step_by(chunk) {
                let n1 = (n0 + chunk).min(geo.batch);
                let ld = (n1 - n0) * plane;
                for co in 0..cout_g {
                    for n in n0..n1 {
                        let start = n * out_len + (g * cout_g + co) * plane;
                        dy_g[co * ld + (n - n0) * plane..][..plane]
                            .copy_from_slice(&dy[start..start + plane]);
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    geo.chunk_im2col(x, g, n0..n1, &mut cols);
                    // dW_g += dY_g * cols^T
                    T::gemm(
                        cout_g,
                        ld,
                        rows,
                        (&dy_g, ld, 1),
                        (&cols, 1, ld),
                        T::one(),
                        (&mut dw[span.clone()], rows, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let w_g = &w[span.clone()];
                    T::gemm(rows, cout_g, ld, (w_g, 1, rows), (&dy_g, ld, 1), T::zero(), (&mut cols, ld, 1));
                    for n in n0..n1 {
                        geo.col2im(&cols, g, &mut dx[n * in_len..(n + 1) * in_len], ld, (n - n0) * plane);
                    }
                }
            }
        }
    }
    let db = want_b.then(|| {
        let mut db = vec![T::zero(); geo.out_channels];
        for n in 0..geo.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = n * out_len + co * plane;
                *acc += dy[start..start + plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::new([geo.out_channels], d)).transpose()?,
    })
}

/// Input row/column for output coordinate `o` and kernel tap `k`.
fn tap_source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(
        input: &[usize],
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [batch, channels, in_h, in_w] = as_nchw(input, "pooling")?;
        // Every window must overlap the real input.
        if 2 * padding.0 > kernel.0 || 2 * padding.1 > kernel.1 {
            return Err(invalid!(
                "pool padding {padding:?} exceeds half the kernel {kernel:?}"
            ));
        }
        let out_h = output_dim(in_h, kernel.0, stride.0, padding.0)
            .ok_or_else(|| invalid!("degenerate pool window {kernel:?}/{stride:?} on height {in_h}"))?;
        let out_w = output_dim(in_w, kernel.1, stride.1, padding.1)
            .ok_or_else(|| invalid!("degenerate pool window {kernel:?}/{stride:?} on width {in_w}"))?;
        Ok(Self {
            batch,
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.out_h, self.out_w]
    }

    /// In-bounds input offsets (within one plane) covered by output `(oy, ox)`,
    /// in row-major order.
    fn window(&self, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let (kh, kw) = self.kernel;
        (0..kh).flat_map(move |i| {
            let iy = tap_source(oy, i, self.stride.0, self.padding.0, self.in_h);
            (0..kw).filter_map(move |j| {
                let ix = tap_source(ox, j, self.stride.1, self.padding.1, self.in_w);
                Some(iy? * self.in_w + ix?)
            })
        })
    }
}

/// Max pooling with negative-infinity padding. Also returns, per output, the
/// flat input index that won; ties go to the first maximum in row-major order.
pub fn max_pool2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let geo = PoolGeometry::new(input.shape(), kernel, stride, padding)?;
    let x = input.data();
    let in_plane = geo.in_h * geo.in_w;
    let total = geo.batch * geo.channels * geo.out_h * geo.out_w;
    let mut out = Vec::with_capacity(total);
    let mut argmax = Vec::with_capacity(total);
    for plane in 0..geo.batch * geo.channels {
        let base = plane * in_plane;
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for off in geo.window(oy, ox) {
                    let v = x[base + off];
                    if best_idx == usize::MAX || v > best {
                        best = v;
                        best_idx = base + off;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(geo.output_shape(), out)?, argmax))
}

pub fn max_pool2d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(shape_err!("max-pool gradient does not match the recorded windows"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Average pooling; every window divides by its full area (padded cells count
/// as zeros).
pub fn avg_pool2d_forward<T: Real>(input: &Tensor<T>, geo: &PoolGeometry) -> Result<Tensor<T>> {
    let x = input.data();
    let in_plane = geo.in_h * geo.in_w;
    let area = T::lit((geo.kernel.0 * geo.kernel.1) as f64);
    let mut out = Vec::with_capacity(geo.batch * geo.channels * geo.out_h * geo.out_w);
    for plane in 0..geo.batch * geo.channels {
        let base = plane * in_plane;
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let s: T = geo.window(oy, ox).map(|off| x[base + off]).sum();
                out.push(s / area);
            }
        }
    }
    Tensor::new(geo.output_shape(), out)
}

pub fn avg_pool2d_backward<T: Real>(geo: &PoolGeometry, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != geo.output_shape() {
        return Err(shape_err!("avg-pool upstream gradient shape {:?}", grad_out.shape()));
    }
    let in_plane = geo.in_h * geo.in_w;
    let area = T::lit((geo.kernel.0 * geo.kernel.1) as f64);
    let mut dx = Tensor::zeros([geo.batch, geo.channels, geo.in_h, geo.in_w]);
    let d = dx.data_mut();
    let dy = grad_out.data();
    let mut k = 0;
    for plane in 0..geo.batch * geo.channels {
        let base = plane * in_plane;
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let share = dy[k] / area;
                k += 1;
                for off in geo.window(oy, ox) {
                    d[base + off] += share;
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
pub fn global_avg_pool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() < 3 {
        return Err(shape_err!("global pooling expects [N, C, ...], got {shape:?}"));
    }
    let inner: usize = shape[2..].iter().product();
    let scale = T::lit(inner as f64);
    let out = input
        .data()
        .chunks_exact(inner)
        .map(|plane| plane.iter().copied().sum::<T>() / scale)
        .collect();
    Tensor::new([shape[0], shape[1]], out)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let inner: usize = input_shape[2..].iter().product();
    let scale = T::lit(inner as f64);
    let mut data = Vec::with_capacity(grad_out.numel() * inner);
    for &g in grad_out.data() {
        data.extend(core::iter::repeat(g / scale).take(inner));
    }
    Tensor::new(input_shape, data)
}

/// `y = x W^T + b` with `x: [N, D]`, `W: [K, D]`, `b: [K]`.
pub fn linear_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, d) = match input.shape() {
        &[n, d] => (n, d),
        s => return Err(shape_err!("linear input must be [N, D], got {s:?}")),
    };
    let k = match weight.shape() {
        &[k, wd] if wd == d => k,
        s => return Err(shape_err!("linear weight must be [K, {d}], got {s:?}")),
    };
    let mut out = vec![T::zero(); n * k];
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(shape_err!("linear bias must be [{k}], got {:?}", b.shape()));
        }
        for row in out.chunks_exact_mut(k) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(n, d, k, (input.data(), d, 1), (weight.data(), 1, d), T::one(), (&mut out, k, 1));
    Tensor::new([n, k], out)
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    want: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[0];
    let dy = grad_out.data();
    let dx = want.0.then(|| {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(n, k, d, (dy, k, 1), (weight.data(), d, 1), T::zero(), (&mut dx, d, 1));
        Tensor::new([n, d], dx).expect("shape by construction")
    });
    let dw = want.1.then(|| {
        let mut dw = vec![T::zero(); k * d];
        T::gemm(k, n, d, (dy, 1, k), (input.data(), d, 1), T::zero(), (&mut dw, d, 1));
        Tensor::new([k, d], dw).expect("shape by construction")
    });
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); k];
        for row in dy.chunks_exact(k) {
            db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
        }
        Tensor::new([k], db).expect("shape by construction")
    });
    (dx, dw, db)
}

/// Saved statistics of a batch-norm forward pass, enough for backward.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Per-channel layout of `[N, C, ...]`: (batch, channels, inner).
fn nc_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("batch norm expects [N, C, ...], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Contiguous `[inner]` planes of `data` as `(channel, plane)` pairs.
fn planes<T>(data: &[T], c: usize, inner: usize) -> impl Iterator<Item = (usize, &[T])> {
    data.chunks_exact(inner.max(1)).enumerate().map(move |(i, p)| (i % c, p))
}

/// Batch normalization. With `batch_stats` the per-channel statistics come
/// from the batch and are also returned as `(mean, biased variance)`;
/// otherwise `stats` supplies them.
pub fn batch_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormSaved<T>, Vec<T>, Vec<T>)> {
    let (n, c, inner) = nc_layout(input.shape())?;
    if gamma.len() != c || beta.len() != c {
        return Err(invalid!(
            "batch norm configured for {} channels, input has {c}",
            gamma.len()
        ));
    }
    let count = n * inner;
    let batch_stats = stats.is_none();
    if batch_stats && count < 2 {
        return Err(invalid!("training-mode batch norm needs N*H*W >= 2, got {count}"));
    }
    let x = input.data();
    let mut means = vec![T::zero(); c];
    let mut vars = vec![T::zero(); c];
    match stats {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(invalid!("running statistics have the wrong channel count"));
            }
            means.copy_from_slice(m);
            vars.copy_from_slice(v);
        }
        None => {
            let inv_count = T::one() / T::lit(count as f64);
            for (ch, p) in planes(x, c, inner) {
                means[ch] += p.iter().copied().sum::<T>();
            }
            means.iter_mut().for_each(|m| *m *= inv_count);
            for (ch, p) in planes(x, c, inner) {
                let mean = means[ch];
                vars[ch] += p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            vars.iter_mut().for_each(|v| *v *= inv_count);
        }
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let chunk = inner.max(1);
    for (((ch, p), h), out) in planes(x, c, inner).zip(xhat.chunks_exact_mut(chunk)).zip(y.chunks_exact_mut(chunk)) {
        let (m, s, g, b) = (means[ch], inv_std[ch], gamma[ch], beta[ch]);
        for ((&v, h), o) in p.iter().zip(h.iter_mut()).zip(out.iter_mut()) {
            *h = (v - m) * s;
            *o = g * *h + b;
        }
    }
    Ok((
        Tensor::new(input.shape(), y)?,
        BatchNormSaved {
            xhat,
            inv_std,
            batch_stats,
        },
        means,
        vars,
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &[T],
    saved: &BatchNormSaved<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, inner) = nc_layout(shape)?;
    let dy = grad_out.data();
    let xhat = &saved.xhat;
    let chunk = inner.max(1);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ((ch, g), h) in planes(dy, c, inner).zip(xhat.chunks_exact(chunk)) {
        dbeta[ch] += g.iter().copied().sum::<T>();
        dgamma[ch] += g.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>();
    }
    let mut dx = vec![T::zero(); dy.len()];
    let count = T::lit((n * inner) as f64);
    for (((ch, g), h), d) in planes(dy, c, inner).zip(xhat.chunks_exact(chunk)).zip(dx.chunks_exact_mut(chunk)) {
        let scale = gamma[ch] * saved.inv_std[ch];
        if saved.batch_stats {
            let mean_dy = dbeta[ch] / count;
            let mean_dy_xhat = dgamma[ch] / count;
            for ((d, &gv), &hv) in d.iter_mut().zip(g).zip(h) {
                *d = scale * (gv - mean_dy - hv * mean_dy_xhat);
            }
        } else {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d = scale * gv;
            }
        }
    }
    Ok((Tensor::new(shape, dx)?, dgamma, dbeta))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy_forward<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (n, k) = match logits.shape() {
        &[n, k] if k > 0 => (n, k),
        s => return Err(shape_err!("logits must be [N, K], got {s:?}")),
    };
    if labels.len() != n {
        return Err(shape_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid!("label {bad} out of range for {k} classes"));
    }
    if n == 0 {
        return Err(invalid!("cross entropy over an empty batch"));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[label] - max);
        probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
    }
    Ok((loss / T::lit(n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Real>(probs: &[T], labels: &[usize], classes: usize, upstream: T) -> Tensor<T> {
    let n = labels.len();
    let scale = upstream / T::lit(n as f64);
    let mut grad = probs.to_vec();
    for (i, &l) in labels.iter().enumerate() {
        grad[i * classes + l] -= T::one();
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Tensor::new([n, classes], grad).expect("shape by construction")
}
