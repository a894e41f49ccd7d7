//! Dense row-major `f64` arrays and the numeric kernels the rest of the
//! crate is built on.
//!
//! The codec operates on small image-shaped tensors (`(channels, H, W)`) and
//! small matrices, so a plain `Vec<f64>` with an explicit shape is all the
//! machinery required. Every kernel here is pure and deterministic: given the
//! same operands it produces bit-identical output on a given platform. The
//! differentiation tape in [`crate::autodiff`] calls straight into these
//! kernels for its forward values and adjoints, which keeps the derivative
//! rules next to (and testable against) the arithmetic they differentiate.
//!
//! There is deliberately no broadcasting beyond per-output-channel bias in
//! [`Array::conv2d`]: all elementwise operations demand exactly matching
//! shapes and report both shapes on violation.

use crate::error::{domain_err, shape_err, Result};

/// Dense row-major array of `f64` with an explicit shape.
///
/// Rank is dynamic; the flow code uses rank-3 `(channels, H, W)` tensors,
/// matrix code uses rank-2, and scalars are rank-1 arrays of length 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Builds an array from a shape and backing data. The data length must
    /// equal the shape's element product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "array::new",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Array { shape, data })
    }

    /// All-zero array of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    /// Array of the given shape with every element set to `value`.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-1 single-element array (the scalar convention used by the tape).
    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// The shape slice.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Immutable view of the backing data, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the backing data, row-major.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The value of a single-element array.
    pub fn as_scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err(
                "as_scalar",
                format!("expected 1 element, array has shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Interprets the array as `(channels, height, width)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(shape_err(
                "dims3",
                format!("expected rank-3 array, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Interprets the array as a `(rows, cols)` matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err(
                "dims2",
                format!("expected rank-2 array, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// True when every element is finite and has zero fractional part.
    pub fn is_integer_valued(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && v.fract() == 0.0)
    }

    /// True when any element is NaN.
    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    fn check_same_shape(&self, other: &Array, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Array) -> Result<Array> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Array {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Array) -> Result<Array> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Array {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Array) -> Result<Array> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Array {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Every element multiplied by `c`.
    pub fn scale(&self, c: f64) -> Array {
        self.map(|v| v * c)
    }

    /// Every element shifted by `c`.
    pub fn add_scalar(&self, c: f64) -> Array {
        self.map(|v| v + c)
    }

    /// Elementwise map into a new array of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place elementwise accumulate: `self += other`.
    pub fn accumulate(&mut self, other: &Array) -> Result<()> {
        self.check_same_shape(other, "accumulate")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Largest absolute element (`0` for empty arrays).
    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of the flattened array.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Squared Frobenius norm (identical to the squared l2 norm of the
    /// flattened array; named for its use on weight matrices).
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Dot product of two same-shape arrays viewed as flat vectors.
    pub fn dot(&self, other: &Array) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Rectified linear unit.
    pub fn relu(&self) -> Array {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&self) -> Array {
        self.map(sigmoid_scalar)
    }

    /// Natural logarithm (follows IEEE semantics outside the domain).
    pub fn ln(&self) -> Array {
        self.map(f64::ln)
    }

    /// Natural exponential.
    pub fn exp(&self) -> Array {
        self.map(f64::exp)
    }

    /// Elementwise clamp into `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Array {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Rounds every element half away from zero (`0.5 -> 1`, `-0.5 -> -1`),
    /// the convention used by the straight-through rounding in the flow.
    pub fn round_half_away(&self) -> Array {
        self.map(round_half_away_scalar)
    }

    /// Matrix product of two rank-2 arrays.
    pub fn matmul(&self, other: &Array) -> Result<Array> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let acc = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    acc[j] += a * row[j];
                }
            }
        }
        Ok(Array {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 array.
    pub fn transpose(&self) -> Result<Array> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Array {
            shape: vec![n, m],
            data: out,
        })
    }

    /// 2-D convolution (cross-correlation) with stride 1 and symmetric
    /// zero padding of `pad` pixels on every border.
    ///
    /// `self` is `(in_ch, H, W)`, `kernel` is `(out_ch, in_ch, kh, kw)`,
    /// `bias` (when present) is `(out_ch,)` and is added per output channel —
    /// the only broadcast in the crate. Output is
    /// `(out_ch, H + 2*pad - kh + 1, W + 2*pad - kw + 1)`.
    pub fn conv2d(&self, kernel: &Array, bias: Option<&Array>, pad: usize) -> Result<Array> {
        let (in_ch, h, w) = self.dims3()?;
        if kernel.shape.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be rank-4, got shape {:?}", kernel.shape),
            ));
        }
        let (out_ch, kc, kh, kw) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        if kc != in_ch {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel expects {kc} input channels, input has shape {:?}",
                    self.shape
                ),
            ));
        }
        if h + 2 * pad + 1 < kh + 1 || w + 2 * pad + 1 < kw + 1 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape != [out_ch] {
                return Err(shape_err(
                    "conv2d",
                    format!(
                        "bias shape {:?} does not match {out_ch} output channels",
                        b.shape
                    ),
                ));
            }
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let mut out = vec![0.0; out_ch * oh * ow];
        for o in 0..out_ch {
            let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            if let Some(b) = bias {
                let bv = b.data[o];
                for v in out_plane.iter_mut() {
                    *v = bv;
                }
            }
            for c in 0..in_ch {
                let in_plane = &self.data[c * h * w..(c + 1) * h * w];
                let k_plane = &kernel.data[(o * in_ch + c) * kh * kw..(o * in_ch + c + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k_plane[ky * kw + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        // Input row index is oy + ky - pad; restrict oy to rows
                        // that land inside the unpadded input.
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (h + pad - ky).min(oh);
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += kv * in_row[ox + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        Ok(Array {
            shape: vec![out_ch, oh, ow],
            data: out,
        })
    }

    /// Gradient of [`Array::conv2d`] with respect to its input.
    ///
    /// `grad_out` has the convolution's output shape; the result has the
    /// input's shape `in_shape`.
    pub fn conv2d_grad_input(
        grad_out: &Array,
        kernel: &Array,
        in_shape: &[usize],
        pad: usize,
    ) -> Result<Array> {
        let (out_ch, oh, ow) = grad_out.dims3()?;
        let (k_out, in_ch, kh, kw) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        debug_assert_eq!(out_ch, k_out);
        let (h, w) = (in_shape[1], in_shape[2]);
        let mut out = vec![0.0; in_ch * h * w];
        for o in 0..out_ch {
            let g_plane = &grad_out.data[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..in_ch {
                let out_plane = &mut out[c * h * w..(c + 1) * h * w];
                let k_plane = &kernel.data[(o * in_ch + c) * kh * kw..(o * in_ch + c + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k_plane[ky * kw + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (h + pad - ky).min(oh);
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let out_row = &mut out_plane[iy * w..(iy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                out_row[ox + kx - pad] += kv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
        Ok(Array {
            shape: in_shape.to_vec(),
            data: out,
        })
    }

    /// Gradient of [`Array::conv2d`] with respect to its kernel.
    pub fn conv2d_grad_kernel(
        grad_out: &Array,
        input: &Array,
        kernel_shape: &[usize],
        pad: usize,
    ) -> Result<Array> {
        let (out_ch, oh, ow) = grad_out.dims3()?;
        let (in_ch, h, w) = input.dims3()?;
        let (kh, kw) = (kernel_shape[2], kernel_shape[3]);
        let mut out = vec![0.0; out_ch * in_ch * kh * kw];
        for o in 0..out_ch {
            let g_plane = &grad_out.data[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..in_ch {
                let in_plane = &input.data[c * h * w..(c + 1) * h * w];
                let k_plane = &mut out[(o * in_ch + c) * kh * kw..(o * in_ch + c + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (h + pad - ky).min(oh);
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pad;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                acc += g_row[ox] * in_row[ox + kx - pad];
                            }
                        }
                        k_plane[ky * kw + kx] += acc;
                    }
                }
            }
        }
        Ok(Array {
            shape: kernel_shape.to_vec(),
            data: out,
        })
    }

    /// Gradient of [`Array::conv2d`] with respect to its per-channel bias.
    pub fn conv2d_grad_bias(grad_out: &Array) -> Result<Array> {
        let (out_ch, oh, ow) = grad_out.dims3()?;
        let mut out = vec![0.0; out_ch];
        for o in 0..out_ch {
            out[o] = grad_out.data[o * oh * ow..(o + 1) * oh * ow].iter().sum();
        }
        Ok(Array {
            shape: vec![out_ch],
            data: out,
        })
    }

    /// Rearranges `(C, H, W)` into `(4C, H/2, W/2)` by moving each 2x2
    /// spatial block into four consecutive channels. Inverse of
    /// [`Array::depth_to_space`]; both dimensions must be even.
    pub fn space_to_depth(&self) -> Result<Array> {
        let (c, h, w) = self.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(
                "space_to_depth",
                format!("spatial dims must be even, got {:?}", self.shape),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let co = ci * 4 + dy * 2 + dx;
                    for y in 0..oh {
                        for x in 0..ow {
                            out[(co * oh + y) * ow + x] =
                                self.data[(ci * h + 2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                }
            }
        }
        Ok(Array {
            shape: vec![c * 4, oh, ow],
            data: out,
        })
    }

    /// Rearranges `(4C, H, W)` into `(C, 2H, 2W)`; exact inverse of
    /// [`Array::space_to_depth`]. The channel count must be divisible by 4.
    pub fn depth_to_space(&self) -> Result<Array> {
        let (c4, h, w) = self.dims3()?;
        if c4 % 4 != 0 {
            return Err(shape_err(
                "depth_to_space",
                format!("channel count must be divisible by 4, got {:?}", self.shape),
            ));
        }
        let c = c4 / 4;
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; c4 * h * w];
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let cin = ci * 4 + dy * 2 + dx;
                    for y in 0..h {
                        for x in 0..w {
                            out[(ci * oh + 2 * y + dy) * ow + 2 * x + dx] =
                                self.data[(cin * h + y) * w + x];
                        }
                    }
                }
            }
        }
        Ok(Array {
            shape: vec![c, oh, ow],
            data: out,
        })
    }

    /// Splits a rank-3 array along the channel axis at `at`, returning the
    /// leading `at` channels and the remainder.
    pub fn split_channels(&self, at: usize) -> Result<(Array, Array)> {
        let (c, h, w) = self.dims3()?;
        if at == 0 || at >= c {
            return Err(shape_err(
                "split_channels",
                format!("split index {at} outside (0, {c})"),
            ));
        }
        let plane = h * w;
        let first = Array {
            shape: vec![at, h, w],
            data: self.data[..at * plane].to_vec(),
        };
        let second = Array {
            shape: vec![c - at, h, w],
            data: self.data[at * plane..].to_vec(),
        };
        Ok((first, second))
    }

    /// Concatenates two rank-3 arrays along the channel axis. Exact inverse
    /// of [`Array::split_channels`].
    pub fn concat_channels(&self, other: &Array) -> Result<Array> {
        let (c1, h1, w1) = self.dims3()?;
        let (c2, h2, w2) = other.dims3()?;
        if (h1, w1) != (h2, w2) {
            return Err(shape_err(
                "concat_channels",
                format!("spatial dims differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut data = Vec::with_capacity((c1 + c2) * h1 * w1);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Array {
            shape: vec![c1 + c2, h1, w1],
            data,
        })
    }
}

/// Numerically stable logistic sigmoid of a scalar.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow for large `|x|`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Rounds half away from zero: `0.5 -> 1.0`, `-0.5 -> -1.0`.
pub fn round_half_away_scalar(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}

/// Sign function with `sign(0) = 0`.
pub fn sign_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Softmax with max subtraction. Errors on NaN input; an empty slice is a
/// domain error as well.
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(domain_err("softmax", "empty input"));
    }
    if xs.iter().any(|v| v.is_nan()) {
        return Err(domain_err("softmax", "NaN input"));
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Array {
        Array::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn conv2d_two_by_two_all_ones_kernel_no_padding() {
        // Hand computation: sum of all four pixels = 1+2+3+4 = 10.
        let x = arr3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let k = Array::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = x.conv2d(&k, None, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv2d_identity_one_by_one_kernel() {
        let x = arr3(1, 3, 3, (1..=9).map(|v| v as f64).collect());
        let k = Array::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&k, None, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_same_padding_shape_and_border_zeros() {
        // 3x3 all-ones kernel with pad 1: centre output is the sum of the
        // full input; corners see only a 2x2 patch.
        let x = arr3(1, 3, 3, vec![1.0; 9]);
        let k = Array::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = x.conv2d(&k, None, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0); // centre
        assert_eq!(y.data()[0], 4.0); // corner
        assert_eq!(y.data()[1], 6.0); // edge
    }

    #[test]
    fn conv2d_bias_is_per_output_channel() {
        let x = arr3(1, 2, 2, vec![0.0; 4]);
        let k = Array::new(vec![2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let b = Array::new(vec![2], vec![5.0, -3.0]).unwrap();
        let y = x.conv2d(&k, Some(&b), 0).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0, 5.0, -3.0, -3.0, -3.0, -3.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = arr3(2, 2, 2, vec![0.0; 8]);
        let k = Array::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let err = x.conv2d(&k, None, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "error should name the op: {msg}");
        assert!(msg.contains("[2, 2, 2]"), "error should cite the shape: {msg}");
    }

    #[test]
    fn space_to_depth_round_trips_and_matches_layout() {
        let x = arr3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.space_to_depth().unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        // Channel order is (dy, dx) = (0,0), (0,1), (1,0), (1,1).
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = y.depth_to_space().unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn split_concat_round_trip() {
        let x = arr3(4, 2, 2, (0..16).map(|v| v as f64).collect());
        let (a, b) = x.split_channels(2).unwrap();
        assert_eq!(a.shape(), &[2, 2, 2]);
        assert_eq!(b.shape(), &[2, 2, 2]);
        let y = a.concat_channels(&b).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Array::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dimension_mismatch() {
        let a = Array::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = Array::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn elementwise_ops_reject_shape_mismatch() {
        let a = Array::zeros(&[2, 2]);
        let b = Array::zeros(&[4]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
        assert!(a.sub(&b).is_err());
    }

    #[test]
    fn round_half_away_from_zero() {
        let x = Array::new(vec![6], vec![0.5, -0.5, 1.4, -1.4, 2.5, -2.5]).unwrap();
        assert_eq!(x.round_half_away().data(), &[1.0, -1.0, 1.0, -1.0, 3.0, -3.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(1000.0), 1.0);
        assert_eq!(sigmoid_scalar(-1000.0), 0.0);
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range_and_is_stable_outside() {
        for &x in &[-3.0_f64, -0.5, 0.0, 0.5, 3.0] {
            let naive = (1.0_f64 + x.exp()).ln();
            assert!((softplus_scalar(x) - naive).abs() < 1e-12);
        }
        assert_eq!(softplus_scalar(1000.0), 1000.0);
        assert_eq!(softplus_scalar(-1000.0), 0.0);
    }

    #[test]
    fn softmax_sums_to_one_and_handles_large_inputs() {
        let w = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn is_integer_valued_detects_fractions() {
        assert!(Array::new(vec![3], vec![1.0, -2.0, 255.0]).unwrap().is_integer_valued());
        assert!(!Array::new(vec![2], vec![1.0, 0.5]).unwrap().is_integer_valued());
        assert!(!Array::new(vec![1], vec![f64::NAN]).unwrap().is_integer_valued());
    }
}
