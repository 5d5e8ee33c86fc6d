//! Differentiable tensor operations recorded on a [`Tape`].

use crate::error::{shape_err, Result};
use crate::numerics::gemm::{gemm, matmul, Layout, MatMut, MatRef};
use crate::numerics::tape::{Backward, Tape, Var};
use crate::numerics::tensor::Tensor;

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly to ±1.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu_with_derivative(x).0
}

fn gelu_with_derivative(x: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_SCALE * (x + GELU_CUBIC * x * x * x));
    let value = 0.5 * x * (1.0 + t);
    let slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (value, slope)
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_height: usize,
    out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Range of output columns whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // ix = ox·s + kj − p must satisfy 0 ≤ ix < width.
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.width + p > kj {
            ((self.width + p - kj - 1) / s + 1).min(self.out_width)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(patch_row, out_row_offset, in_row_offset, ox_range)` for
    /// every kernel tap and output row that reads inside the input.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, (usize, usize))) {
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let cols = self.valid_cols(kj);
                    if cols.0 == cols.1 {
                        continue;
                    }
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        f(row, oy * self.out_width, (c * self.height + iy as usize) * self.width, cols);
                    }
                }
            }
        }
    }

    fn input_col(&self, ox: usize, kj: usize) -> usize {
        ox * self.stride + kj - self.padding
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.out_pixels();
        let k = self.kernel;
        let mut cols = vec![0.0; self.patch_len() * n];
        self.for_each_row(|row, out_off, in_off, (lo, hi)| {
            let kj = row % k;
            let dst = &mut cols[row * n + out_off..row * n + out_off + self.out_width];
            if self.stride == 1 {
                let start = in_off + self.input_col(lo, kj);
                dst[lo..hi].copy_from_slice(&input[start..start + (hi - lo)]);
            } else {
                for ox in lo..hi {
                    dst[ox] = input[in_off + self.input_col(ox, kj)];
                }
            }
        });
        cols
    }

    fn uses_taps(&self) -> bool {
        self.stride == 1 && !self.is_pointwise()
    }

    fn padded_dims(&self) -> (usize, usize) {
        (self.height + 2 * self.padding, self.width + 2 * self.padding)
    }

    /// Output pixels on the padded-width grid used by the tap path.
    fn wide_pixels(&self) -> usize {
        self.out_height * self.padded_dims().1
    }

    /// Offset of tap (ki, kj) into the padded input.
    fn tap_offset(&self, ki: usize, kj: usize) -> usize {
        ki * self.padded_dims().1 + kj
    }

    fn padded_len(&self) -> usize {
        let (hp, wp) = self.padded_dims();
        // Wide-grid columns past the output edge read up to k − 1 past the end.
        self.in_channels * hp * wp + self.kernel - 1
    }

    /// Zero-padded input; at stride 1 every tap becomes a constant offset.
    fn pad(&self, input: &[f64]) -> Vec<f64> {
        let (hp, wp) = self.padded_dims();
        let (h, w, p) = (self.height, self.width, self.padding);
        let mut xp = vec![0.0; self.padded_len()];
        for c in 0..self.in_channels {
            for y in 0..h {
                let dst = (c * hp + y + p) * wp + p;
                xp[dst..dst + w].copy_from_slice(&input[(c * h + y) * w..(c * h + y + 1) * w]);
            }
        }
        xp
    }

    fn unpad(&self, xp: &[f64]) -> Vec<f64> {
        let (hp, wp) = self.padded_dims();
        let (h, w, p) = (self.height, self.width, self.padding);
        let mut out = Vec::with_capacity(self.in_channels * h * w);
        for c in 0..self.in_channels {
            for y in 0..h {
                let src = (c * hp + y + p) * wp + p;
                out.extend_from_slice(&xp[src..src + w]);
            }
        }
        out
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> {
        let k = self.kernel;
        (0..k).flat_map(move |ki| (0..k).map(move |kj| (ki, kj)))
    }

    /// Sum of per-tap products on the wide grid, cropped to the output.
    fn forward_taps(&self, xp: &[f64], weight: &[f64]) -> Vec<f64> {
        let (hp, wp) = self.padded_dims();
        let (kk, wide) = (self.kernel * self.kernel, self.wide_pixels());
        let mut y = vec![0.0; self.out_channels * wide];
        for (t, (ki, kj)) in self.taps().enumerate() {
            gemm(
                self.out_channels,
                self.in_channels,
                wide,
                MatRef::new(weight, t, self.in_channels * kk, kk),
                MatRef::new(xp, self.tap_offset(ki, kj), hp * wp, 1),
                MatMut {
                    data: &mut y,
                    offset: 0,
                    row_stride: wide,
                    col_stride: 1,
                },
                t > 0,
            );
        }
        let mut out = Vec::with_capacity(self.out_channels * self.out_pixels());
        for row in y.chunks_exact(wp) {
            out.extend_from_slice(&row[..self.out_width]);
        }
        out
    }

    fn widen(&self, dy: &[f64]) -> Vec<f64> {
        let wp = self.padded_dims().1;
        let mut wide = vec![0.0; self.out_channels * self.wide_pixels()];
        for (dst, src) in wide.chunks_exact_mut(wp).zip(dy.chunks_exact(self.out_width)) {
            dst[..self.out_width].copy_from_slice(src);
        }
        wide
    }

    fn weight_grad_taps(&self, xp: &[f64], dy_wide: &[f64]) -> Vec<f64> {
        let (hp, wp) = self.padded_dims();
        let (kk, wide) = (self.kernel * self.kernel, self.wide_pixels());
        let mut dw = vec![0.0; self.out_channels * self.in_channels * kk];
        for (t, (ki, kj)) in self.taps().enumerate() {
            gemm(
                self.out_channels,
                wide,
                self.in_channels,
                MatRef::new(dy_wide, 0, wide, 1),
                MatRef::new(xp, self.tap_offset(ki, kj), 1, hp * wp),
                MatMut {
                    data: &mut dw,
                    offset: t,
                    row_stride: self.in_channels * kk,
                    col_stride: kk,
                },
                false,
            );
        }
        dw
    }

    fn input_grad_taps(&self, weight: &[f64], dy_wide: &[f64]) -> Vec<f64> {
        let (hp, wp) = self.padded_dims();
        let (kk, wide) = (self.kernel * self.kernel, self.wide_pixels());
        let mut dxp = vec![0.0; self.padded_len()];
        for (t, (ki, kj)) in self.taps().enumerate() {
            gemm(
                self.in_channels,
                self.out_channels,
                wide,
                MatRef::new(weight, t, kk, self.in_channels * kk),
                MatRef::new(dy_wide, 0, wide, 1),
                MatMut {
                    data: &mut dxp,
                    offset: self.tap_offset(ki, kj),
                    row_stride: hp * wp,
                    col_stride: 1,
                },
                true,
            );
        }
        self.unpad(&dxp)
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.out_pixels();
        let k = self.kernel;
        let mut out = vec![0.0; self.in_channels * self.height * self.width];
        self.for_each_row(|row, out_off, in_off, (lo, hi)| {
            let kj = row % k;
            let src = &cols[row * n + out_off..row * n + out_off + self.out_width];
            if self.stride == 1 {
                let start = in_off + self.input_col(lo, kj);
                for (d, s) in out[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                    *d += s;
                }
            } else {
                for ox in lo..hi {
                    out[in_off + self.input_col(ox, kj)] += src[ox];
                }
            }
        });
        out
    }
}

/// What the backward pass needs from the forward input.
enum ConvCache {
    /// Pointwise kernels read the input directly.
    Input,
    Padded(Vec<f64>),
    Cols(Vec<f64>),
    /// The weight needs no gradient.
    Nothing,
}

struct Conv2dOp {
    input: Var,
    weight: Var,
    bias: Var,
    geom: ConvGeometry,
    cache: ConvCache,
}

impl Backward for Conv2dOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.weight, self.bias]
    }

    fn backward(&self, tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (m, k, n) = (g.out_channels, g.patch_len(), g.out_pixels());
        let need_weight = tape.requires_grad(self.weight);
        let need_input = tape.requires_grad(self.input);
        let dy_wide = (g.uses_taps() && (need_weight || need_input)).then(|| g.widen(dy));

        let d_weight = need_weight.then(|| match (&self.cache, &dy_wide) {
            (ConvCache::Padded(xp), Some(dyw)) => g.weight_grad_taps(xp, dyw),
            (cache, _) => {
                let cols = match cache {
                    ConvCache::Cols(cols) => cols.as_slice(),
                    _ => tape.value(self.input).data(),
                };
                let mut dw = vec![0.0; m * k];
                matmul(m, n, k, dy, Layout::Normal, cols, Layout::Transposed, &mut dw, false);
                dw
            }
        });

        let d_bias = tape.requires_grad(self.bias).then(|| {
            dy.chunks_exact(n).map(|row| row.iter().sum()).collect()
        });

        let d_input = need_input.then(|| {
            let w = tape.value(self.weight).data();
            if let Some(dyw) = &dy_wide {
                return g.input_grad_taps(w, dyw);
            }
            let mut dcols = vec![0.0; k * n];
            matmul(k, m, n, w, Layout::Transposed, dy, Layout::Normal, &mut dcols, false);
            if g.is_pointwise() {
                dcols
            } else {
                g.col2im(&dcols)
            }
        });

        vec![d_input, d_weight, d_bias]
    }
}

struct GeluOp {
    input: Var,
    slope: Vec<f64>,
}

impl Backward for GeluOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.slope.iter().zip(dy).map(|(s, g)| s * g).collect())]
    }
}

/// Source taps for one destination index of a 2× bilinear upsample.
#[derive(Debug, Clone, Copy)]
struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn upsample_taps(src: usize) -> Vec<Taps> {
    let max = (src - 1) as f64;
    (0..2 * src)
        .map(|d| {
            let s = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Taps {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

struct UpsampleOp {
    input: Var,
    channels: usize,
    height: usize,
    width: usize,
}

impl Backward for UpsampleOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let rows = upsample_taps(h);
        let cols = upsample_taps(w);
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            let src = &mut dx[ch * h * w..(ch + 1) * h * w];
            let out = &dy[ch * 4 * h * w..(ch + 1) * 4 * h * w];
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, cx) in cols.iter().enumerate() {
                    let g = out[oy * 2 * w + ox];
                    let top = g * (1.0 - ry.frac);
                    let bottom = g * ry.frac;
                    src[ry.lo * w + cx.lo] += top * (1.0 - cx.frac);
                    src[ry.lo * w + cx.hi] += top * cx.frac;
                    src[ry.hi * w + cx.lo] += bottom * (1.0 - cx.frac);
                    src[ry.hi * w + cx.hi] += bottom * cx.frac;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct AddOp {
    a: Var,
    b: Var,
}

impl Backward for AddOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![
            tape.requires_grad(self.a).then(|| dy.to_vec()),
            tape.requires_grad(self.b).then(|| dy.to_vec()),
        ]
    }
}

struct ConcatOp {
    a: Var,
    b: Var,
    split: usize,
}

impl Backward for ConcatOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![
            tape.requires_grad(self.a).then(|| dy[..self.split].to_vec()),
            tape.requires_grad(self.b).then(|| dy[self.split..].to_vec()),
        ]
    }
}

struct ScaleOp {
    input: Var,
    factor: f64,
}

impl Backward for ScaleOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(dy.iter().map(|g| g * self.factor).collect())]
    }
}

struct SumOp {
    input: Var,
    factor: f64,
    len: usize,
}

impl Backward for SumOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![dy[0] * self.factor; self.len])]
    }
}

impl Tape {
    /// 2-D cross-correlation of a C_in×H×W map with a C_out×C_in×k×k kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (in_channels, height, width) = self.value(input).shape().chw()?;
        let (out_channels, kernel) = match self.value(weight).dims() {
            &[o, i, kh, kw] if i == in_channels && kh == kw => (o, kh),
            other => {
                return Err(shape_err!(
                    "conv2d weight {other:?} does not fit a {in_channels}-channel input"
                ))
            }
        };
        if kernel % 2 == 0 {
            return Err(shape_err!("conv2d kernel size {kernel} must be odd"));
        }
        if self.value(bias).dims() != [out_channels] {
            return Err(shape_err!(
                "conv2d bias {} does not match {out_channels} output channels",
                self.value(bias).shape()
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (out_height, out_width) = match (
            conv_out_extent(height, kernel, stride, padding),
            conv_out_extent(width, kernel, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(shape_err!(
                    "conv2d kernel {kernel} with padding {padding} exceeds a {height}×{width} input"
                ))
            }
        };
        let geom = ConvGeometry {
            in_channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            padding,
            out_height,
            out_width,
        };

        let n = geom.out_pixels();
        let keep = self.requires_grad(weight);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let (mut out, cache) = if geom.is_pointwise() {
            let mut out = vec![0.0; out_channels * n];
            matmul(out_channels, in_channels, n, w, Layout::Normal, x, Layout::Normal, &mut out, false);
            (out, if keep { ConvCache::Input } else { ConvCache::Nothing })
        } else if geom.uses_taps() {
            let xp = geom.pad(x);
            let out = geom.forward_taps(&xp, w);
            (out, if keep { ConvCache::Padded(xp) } else { ConvCache::Nothing })
        } else {
            let cols = geom.im2col(x);
            let mut out = vec![0.0; out_channels * n];
            matmul(out_channels, geom.patch_len(), n, w, Layout::Normal, &cols, Layout::Normal, &mut out, false);
            (out, if keep { ConvCache::Cols(cols) } else { ConvCache::Nothing })
        };
        for (row, &b) in out.chunks_exact_mut(n).zip(self.value(bias).data()) {
            row.iter_mut().for_each(|v| *v += b);
        }

        let value = Tensor::from_vec([out_channels, out_height, out_width], out)?;
        Ok(self.record(
            value,
            Box::new(Conv2dOp {
                input,
                weight,
                bias,
                geom,
                cache,
            }),
        ))
    }

    pub fn gelu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (values, slope): (Vec<f64>, Vec<f64>) = if self.requires_grad(input) {
            x.data().iter().map(|&v| gelu_with_derivative(v)).unzip()
        } else {
            (x.data().iter().map(|&v| gelu_scalar(v)).collect(), Vec::new())
        };
        let value = Tensor::new(x.shape().clone(), values).expect("same shape");
        self.record(value, Box::new(GeluOp { input, slope }))
    }

    /// Bilinear 2× upsampling with half-pixel centres and edge clamping.
    pub fn upsample_bilinear_2x(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).shape().chw()?;
        let rows = upsample_taps(h);
        let cols = upsample_taps(w);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * 4 * h * w);
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            for ry in &rows {
                for cx in &cols {
                    let top = src[ry.lo * w + cx.lo] * (1.0 - cx.frac) + src[ry.lo * w + cx.hi] * cx.frac;
                    let bottom = src[ry.hi * w + cx.lo] * (1.0 - cx.frac) + src[ry.hi * w + cx.hi] * cx.frac;
                    out.push(top * (1.0 - ry.frac) + bottom * ry.frac);
                }
            }
        }
        let value = Tensor::from_vec([c, 2 * h, 2 * w], out)?;
        Ok(self.record(
            value,
            Box::new(UpsampleOp {
                input,
                channels: c,
                height: h,
                width: w,
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("add of {} and {}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().clone(), data)?;
        Ok(self.record(value, Box::new(AddOp { a, b })))
    }

    /// Stacks two C×H×W maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).shape().chw()?;
        let (cb, hb, wb) = self.value(b).shape().chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(shape_err!("concat of {ha}×{wa} and {hb}×{wb} maps"));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let split = ca * ha * wa;
        let value = Tensor::from_vec([ca + cb, ha, wa], data)?;
        Ok(self.record(value, Box::new(ConcatOp { a, b, split })))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.record(value, Box::new(ScaleOp { input, factor }))
    }

    /// Scalar `factor · Σ input`.
    pub fn sum_scaled(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input).data();
        let len = x.len();
        let value = Tensor::scalar(factor * x.iter().sum::<f64>());
        self.record(value, Box::new(SumOp { input, factor, len }))
    }
}
