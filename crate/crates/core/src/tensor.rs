//! Minimal dense containers for the numeric kernels.
//!
//! Everything is row-major `Vec<T>` behind small shape-checked wrappers; at
//! desk scale plain loops beat any BLAS round trip and keep the arithmetic
//! order fixed, which the determinism guarantees rely on.

use crate::{real, Scalar};
use serde::{Deserialize, Serialize};

/// Dense rank-3 array laid out as `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "shape/data mismatch");
        Tensor3 {
            channels,
            height,
            width,
            data,
        }
    }

    /// Build by evaluating `f(c, y, x)` at every site.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor3 {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over the spatial sites of one channel.
    pub fn channel_mean(&self, c: usize) -> T {
        let plane = self.channel(c);
        let n = real::<T>(plane.len() as f64);
        plane.iter().copied().sum::<T>() / n
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `row_vec · self`, with `row_vec.len() == rows`.
    pub fn vec_mul(&self, row_vec: &[T]) -> Vec<T> {
        assert_eq!(row_vec.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &v) in row_vec.iter().enumerate() {
            if v == T::zero() {
                continue;
            }
            let row = self.row(r);
            for (o, &w) in out.iter_mut().zip(row.iter()) {
                *o += v * w;
            }
        }
        out
    }

    /// `self · col_vec`, with `col_vec.len() == cols`.
    pub fn mul_vec(&self, col_vec: &[T]) -> Vec<T> {
        assert_eq!(col_vec.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(col_vec.iter())
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// Source coordinate and blend weights for one output site of a bilinear
/// resize (half-pixel-center convention, edges clamped).
#[inline]
fn bilinear_taps<T: Scalar>(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, T) {
    if src_len == 1 {
        return (0, 0, T::zero());
    }
    let scale = src_len as f64 / dst_len as f64;
    let pos = (dst as f64 + 0.5) * scale - 0.5;
    let pos = pos.max(0.0).min(src_len as f64 - 1.0);
    let lo = pos.floor();
    let hi = (lo + 1.0).min(src_len as f64 - 1.0);
    (lo as usize, hi as usize, real::<T>(pos - lo))
}

/// Bilinear resize of a single plane `src` (h×w) to `out_h`×`out_w`.
pub fn bilinear_resize<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    assert_eq!(src.len(), h * w);
    let one = T::one();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = bilinear_taps::<T>(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = bilinear_taps::<T>(ox, out_w, w);
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let top = v00 * (one - fx) + v01 * fx;
            let bot = v10 * (one - fx) + v11 * fx;
            out.push(top * (one - fy) + bot * fy);
        }
    }
    out
}

/// Vector-Jacobian product of [`bilinear_resize`]: scatters `grad_out`
/// (out_h×out_w) back onto the source grid (h×w).
pub fn bilinear_resize_vjp<T: Scalar>(
    grad_out: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    assert_eq!(grad_out.len(), out_h * out_w);
    let one = T::one();
    let mut grad_src = vec![T::zero(); h * w];
    for oy in 0..out_h {
        let (y0, y1, fy) = bilinear_taps::<T>(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = bilinear_taps::<T>(ox, out_w, w);
            let g = grad_out[oy * out_w + ox];
            grad_src[y0 * w + x0] += g * (one - fx) * (one - fy);
            grad_src[y0 * w + x1] += g * fx * (one - fy);
            grad_src[y1 * w + x0] += g * (one - fx) * fy;
            grad_src[y1 * w + x1] += g * fx * fy;
        }
    }
    grad_src
}

/// Dot product.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
