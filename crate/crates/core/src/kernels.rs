//! Forward and backward numeric kernels on raw N×C×H×W buffers.
//!
//! These functions know nothing about the tape; `autograd` wires them into
//! differentiable ops and the model calls some of them directly for
//! inference-only work (augmentation resizing, BN folding).

use crate::error::{Error, Result};
use crate::tensor::{out_extent, ConvSpec, Real, Tensor};

// ── GEMM ─────────────────────────────────────────────────────────────

/// Column and depth tile sizes of `gemm_nn`; a K_TILE×N_TILE block of `b`
/// stays cache resident while every row of `a` streams over it.
const N_TILE: usize = 512;
const K_TILE: usize = 128;

/// `c[m×n] += a[m×k] · b[k×n]`. Each `c` element accumulates over `k` in
/// ascending order regardless of tiling.
pub fn gemm_nn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for j0 in (0..n).step_by(N_TILE) {
        let j1 = (j0 + N_TILE).min(n);
        for p0 in (0..k).step_by(K_TILE) {
            let p1 = (p0 + K_TILE).min(k);
            for i in 0..m {
                let c_row = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let b_row = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += aip * bv;
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

// ── Convolution ──────────────────────────────────────────────────────

/// Validates input/weight/bias against `spec` and returns the output extents.
pub fn conv2d_check<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    spec.validate()?;
    let (_, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv weight shape {:?}, spec requires {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => {}
        (None, false) => {}
        (Some(b), _) => {
            return Err(Error::Shape(format!(
                "conv bias shape {:?} does not match spec (has_bias={}, out_channels={})",
                b.shape(),
                spec.has_bias,
                spec.out_channels
            )))
        }
        (None, true) => return Err(Error::Shape("conv spec declares a bias but none given".into())),
    }
    spec.output_hw(h, w)
}

struct ConvGeom {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `cg` channels of one image into a `(cg·kh·kw) × (oh·ow)` matrix.
/// Output columns `lo..hi` whose input column for kernel column `kj` lies
/// inside the image.
fn valid_columns(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let off = (kj * g.dil) as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(g.ow);
    ((lo as usize).min(hi), hi)
}

fn im2col<T: Real>(x: &[T], cg: usize, g: &ConvGeom, cols: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..cg {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_columns(g, kj);
                    out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                    out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let start = lo * g.stride + kj * g.dil - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &x) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters a column matrix back onto `cg` channels.
fn col2im<T: Real>(cols: &[T], cg: usize, g: &ConvGeom, dx: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..cg {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_columns(g, kj);
                    if lo < hi {
                        let start = lo * g.stride + kj * g.dil - g.pad;
                        let row = &src[oy * g.ow + lo..oy * g.ow + hi];
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(row) {
                            *d += v;
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
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (oh, ow) = conv2d_check(input, weight, bias, spec)?;
    let (n, c, h, w) = input.dims4()?;
    let geom = ConvGeom {
        h,
        w,
        oh,
        ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
    };
    let groups = spec.groups;
    let cg = c / groups;
    let og = spec.out_channels / groups;
    let kdim = cg * geom.kh * geom.kw;
    let p = oh * ow;
    let mut out = vec![T::zero(); n * spec.out_channels * p];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    let x = input.data();
    let wdata = weight.data();
    for b in 0..n {
        for g in 0..groups {
            let xg = &x[(b * c + g * cg) * h * w..(b * c + (g + 1) * cg) * h * w];
            let wg = &wdata[g * og * kdim..(g + 1) * og * kdim];
            let og_out = &mut out[(b * spec.out_channels + g * og) * p..(b * spec.out_channels + (g + 1) * og) * p];
            if geom.is_pointwise() {
                gemm_nn(og, p, kdim, wg, xg, og_out);
            } else {
                im2col(xg, cg, &geom, &mut cols);
                gemm_nn(og, p, kdim, wg, &cols, og_out);
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                let plane = &mut out[(b * spec.out_channels + co) * p..(b * spec.out_channels + co + 1) * p];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let out = Tensor::new(&[n, spec.out_channels, oh, ow], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of a convolution. Each returned buffer is `Some` only when
/// requested through the `want_*` flags.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let geom = ConvGeom {
        h,
        w,
        oh,
        ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
    };
    let groups = spec.groups;
    let cg = c / groups;
    let og = spec.out_channels / groups;
    let kdim = cg * geom.kh * geom.kw;
    let p = oh * ow;
    let co_total = spec.out_channels;

    let mut dx = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want_weight.then(|| vec![T::zero(); weight.numel()]);
    let db = want_bias.then(|| {
        let mut db = vec![T::zero(); co_total];
        for b in 0..n {
            for (co, v) in db.iter_mut().enumerate() {
                *v += grad_out[(b * co_total + co) * p..(b * co_total + co + 1) * p]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        db
    });

    if want_input || want_weight {
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); kdim * p]
        };
        let mut dcols = vec![T::zero(); kdim * p];
        let x = input.data();
        let wdata = weight.data();
        for b in 0..n {
            for g in 0..groups {
                let x_off = (b * c + g * cg) * h * w;
                let xg = &x[x_off..x_off + cg * h * w];
                let dout_g = &grad_out[(b * co_total + g * og) * p..(b * co_total + (g + 1) * og) * p];
                if let Some(dw) = dw.as_mut() {
                    let dwg = &mut dw[g * og * kdim..(g + 1) * og * kdim];
                    if pointwise {
                        gemm_nt(og, kdim, p, dout_g, xg, dwg);
                    } else {
                        im2col(xg, cg, &geom, &mut cols);
                        gemm_nt(og, kdim, p, dout_g, &cols, dwg);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let wg = &wdata[g * og * kdim..(g + 1) * og * kdim];
                    let dxg = &mut dx[x_off..x_off + cg * h * w];
                    if pointwise {
                        gemm_tn(kdim, p, og, wg, dout_g, dxg);
                    } else {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(kdim, p, og, wg, dout_g, &mut dcols);
                        col2im(&dcols, cg, &geom, dxg);
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

// ── Pooling ──────────────────────────────────────────────────────────

/// Square pooling window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("pooling with zero kernel or stride: {self:?}")));
        }
        if self.padding >= self.kernel {
            return Err(Error::Config(format!(
                "pooling padding {} must be smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        let oh = out_extent(h, self.kernel, self.stride, self.padding, 1);
        let ow = out_extent(w, self.kernel, self.stride, self.padding, 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::EmptyOutput(format!("{h}x{w} input with pooling {self:?}"))),
        }
    }

    /// Clipped input range `[lo, hi)` covered by output position `o`.
    #[inline]
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as isize).max(0) as usize).min(len);
        (lo, hi)
    }
}

/// Average pooling that divides by the number of in-bounds positions.
pub fn avg_pool2d_forward<T: Real>(input: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks_exact(h * w) {
        for oy in 0..oh {
            let (y0, y1) = spec.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = spec.window(ox, w);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    acc += plane[iy * w + x0..iy * w + x1].iter().copied().sum::<T>();
                }
                out.push(acc / T::from_usize((y1 - y0) * (x1 - x0)));
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avg_pool2d_backward<T: Real>(input_shape: &[usize], spec: &PoolSpec, grad_out: &[T]) -> Result<Vec<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::Shape("avg_pool2d backward expects rank 4".into()));
    };
    let (oh, ow) = spec.output_hw(h, w)?;
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, dout) in dx.chunks_exact_mut(h * w).zip(grad_out.chunks_exact(oh * ow)) {
        for oy in 0..oh {
            let (y0, y1) = spec.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = spec.window(ox, w);
                let g = dout[oy * ow + ox] / T::from_usize((y1 - y0) * (x1 - x0));
                for iy in y0..y1 {
                    plane[iy * w + x0..iy * w + x1].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    Ok(dx)
}

/// Max pooling over in-bounds positions; also returns the flat argmax of
/// every output element for the backward pass.
pub fn max_pool2d_forward<T: Real>(input: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for (pi, plane) in x.chunks_exact(h * w).enumerate() {
        for oy in 0..oh {
            let (y0, y1) = spec.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = spec.window(ox, w);
                let mut best = y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        if plane[iy * w + ix] > plane[best] {
                            best = iy * w + ix;
                        }
                    }
                }
                out.push(plane[best]);
                argmax.push(pi * h * w + best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

// ── Bilinear resize ──────────────────────────────────────────────────

/// Per-axis interpolation taps: (i0, i1, w0, w1).
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Half-pixel-center bilinear resize with edge clamping.
pub fn bilinear_forward<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyOutput(format!("bilinear resize to {out_h}x{out_w}")));
    }
    let ty = bilinear_taps(h, out_h);
    let tx: Vec<_> = bilinear_taps(w, out_w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb)))
        .collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut row0 = vec![T::zero(); out_w];
    let mut row1 = vec![T::zero(); out_w];
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                row0[j] = r0[x0] * wx0 + r0[x1] * wx1;
                row1[j] = r1[x0] * wx0 + r1[x1] * wx1;
            }
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            out.extend(row0.iter().zip(&row1).map(|(&a, &b)| a * wy0 + b * wy1));
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub fn bilinear_backward<T: Real>(input_shape: &[usize], out_h: usize, out_w: usize, grad_out: &[T]) -> Result<Vec<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::Shape("bilinear backward expects rank 4".into()));
    };
    let ty = bilinear_taps(h, out_h);
    let tx: Vec<_> = bilinear_taps(w, out_w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb)))
        .collect();
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, dout) in dx.chunks_exact_mut(h * w).zip(grad_out.chunks_exact(out_h * out_w)) {
        for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = dout[i * out_w + j];
                plane[y0 * w + x0] += g * wy0 * wx0;
                plane[y0 * w + x1] += g * wy0 * wx1;
                plane[y1 * w + x0] += g * wy1 * wx0;
                plane[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    Ok(dx)
}

// ── Batch normalization ──────────────────────────────────────────────

/// Per-channel batch statistics of a rank-4 tensor: (mean, biased variance).
pub fn channel_stats<T: Real>(input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let m = T::from_usize(n * hw);
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&t| (t - mu) * (t - mu))
                .sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok((mean, var))
}

/// y = scale[c]·x + shift[c]
pub fn channel_affine<T: Real>(input: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::Shape(format!(
            "per-channel parameters of length {} for {c} channels",
            scale.len()
        )));
    }
    let hw = h * w;
    let mut out = input.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let (s, t) = (scale[ch], shift[ch]);
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = *v * s + t);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Folds an eval-mode batch norm into the preceding convolution so that
/// `conv(x, W', b') == bn(conv(x, W, b))`.
pub fn fold_batch_norm<T: Real>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let out_channels = weight.shape()[0];
    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()]
        .iter()
        .any(|&l| l != out_channels)
    {
        return Err(Error::Shape(format!(
            "batch norm parameters do not match {out_channels} output channels"
        )));
    }
    let per_out = weight.numel() / out_channels;
    let mut w = weight.data().to_vec();
    let mut b = Vec::with_capacity(out_channels);
    for o in 0..out_channels {
        let denom = running_var[o].as_f64() + eps;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::Config(format!(
                "batch norm channel {o}: variance + eps = {denom} is not positive"
            )));
        }
        let s = T::from_f64(gamma[o].as_f64() / denom.sqrt());
        w[o * per_out..(o + 1) * per_out].iter_mut().for_each(|v| *v *= s);
        let b0 = bias.map_or(T::zero(), |t| t.data()[o]);
        b.push((b0 - running_mean[o]) * s + beta[o]);
    }
    Ok((Tensor::new(weight.shape(), w)?, Tensor::new(&[out_channels], b)?))
}

// ── Loss ─────────────────────────────────────────────────────────────

/// Mean softmax cross entropy over non-ignored positions. Returns the loss,
/// the softmax probabilities, and the number of scored positions.
pub fn softmax_cross_entropy_forward<T: Real>(
    logits: &Tensor<T>,
    targets: &[u8],
    ignore_index: u8,
) -> Result<(T, Vec<T>, usize)> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::Shape(format!(
            "targets of length {} for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let z = logits.data();
    let mut probs = vec![T::zero(); z.len()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..n {
        for pos in 0..hw {
            let idx = |ch: usize| (b * k + ch) * hw + pos;
            let mut max = z[idx(0)];
            for ch in 1..k {
                max = max.max(z[idx(ch)]);
            }
            let mut s = T::zero();
            for ch in 0..k {
                let e = (z[idx(ch)] - max).exp();
                probs[idx(ch)] = e;
                s += e;
            }
            for ch in 0..k {
                probs[idx(ch)] /= s;
            }
            let t = targets[b * hw + pos];
            if t == ignore_index {
                continue;
            }
            if t as usize >= k {
                return Err(Error::LabelOutOfRange {
                    id: t as u32,
                    classes: k,
                });
            }
            let lse = max.as_f64() + s.as_f64().ln();
            total += lse - z[idx(t as usize)].as_f64();
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((T::from_f64(loss), probs, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, n, k) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nn(m, n, k, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // bᵀ stored as n×k
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c = vec![0.0; m * n];
        gemm_nt(m, n, k, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c = vec![0.0; m * n];
        gemm_tn(m, n, k, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_padding_must_be_below_kernel() {
        assert!(PoolSpec::new(2, 2, 2).output_hw(8, 8).is_err());
        assert_eq!(PoolSpec::new(5, 2, 2).output_hw(8, 8).unwrap(), (4, 4));
    }

    #[test]
    fn fold_rejects_nonpositive_variance() {
        let w = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let err = fold_batch_norm(&w, None, &[1.0], &[0.0], &[0.0], &[-1.0], 1e-5);
        assert!(err.is_err());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let z = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        assert!(matches!(
            softmax_cross_entropy_forward(&z, &[2], 255),
            Err(Error::LabelOutOfRange { id: 2, classes: 2 })
        ));
    }
}
