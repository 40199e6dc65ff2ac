//! Dense `N×H×W×C` arrays and the primitives the layers are built from.
//!
//! Data is stored row-major in `(n, h, w, c)` order, so the channels of one
//! pixel are contiguous. Convolution kernels reuse the same container with
//! the axes read as `(kh, kw, c_in, c_out)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let shape = Shape { n, h, w, c };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::Dimension(format!(
                "shape {self} has a zero-sized axis"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(n, h, w)` positions.
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn from_array(a: [usize; 4]) -> Result<Self> {
        Shape::new(a[0], a[1], a[2], a[3])
    }

    #[inline]
    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Shorthand for tests and fixtures; panics on a bad shape.
    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Self {
        let shape = Shape::from_array(dims).expect("valid shape");
        Tensor::new(shape, data).expect("data length matches shape")
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape {
                n: 1,
                h: 1,
                w: 1,
                c: 1,
            },
            data: vec![value],
        }
    }

    /// A `(1,1,1,c)` per-channel vector.
    pub fn channel_vector(values: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(1, 1, 1, values.len())?;
        Tensor::new(shape, values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.shape.offset(n, h, w, c)]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }
}

/// Concatenates along the channel axis, preserving list order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Dimension("concat_channels of an empty list".into()))?;
    let base = first.shape;
    for (i, t) in inputs.iter().enumerate() {
        let s = t.shape;
        if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
            return Err(Error::Dimension(format!(
                "concat_channels input {i} has shape {s}, expected ({},{},{},_)",
                base.n, base.h, base.w
            )));
        }
    }
    let total: usize = inputs.iter().map(|t| t.shape.c).sum();
    let shape = Shape { c: total, ..base };
    let mut data = Vec::with_capacity(shape.len());
    for p in 0..base.pixels() {
        for t in inputs {
            let c = t.shape.c;
            data.extend_from_slice(&t.data[p * c..(p + 1) * c]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Inverse of [`concat_channels`]: cuts `x` into consecutive channel bands.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape.c || sizes.contains(&0) {
        return Err(Error::Dimension(format!(
            "cannot split {} channels into {sizes:?}",
            x.shape.c
        )));
    }
    let pixels = x.shape.pixels();
    let mut out: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&c| Vec::with_capacity(c * pixels))
        .collect();
    for p in 0..pixels {
        let row = &x.data[p * total..(p + 1) * total];
        let mut start = 0;
        for (band, &c) in out.iter_mut().zip(sizes) {
            band.extend_from_slice(&row[start..start + c]);
            start += c;
        }
    }
    Ok(out
        .into_iter()
        .zip(sizes)
        .map(|(data, &c)| Tensor {
            shape: Shape { c, ..x.shape },
            data,
        })
        .collect())
}

/// `a + b` for equal shapes, or with `b` a `(1,1,1,c)` per-channel vector.
pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Ok(Tensor {
            shape: a.shape,
            data,
        });
    }
    let bs = b.shape;
    if (bs.n, bs.h, bs.w) == (1, 1, 1) && bs.c == a.shape.c {
        let mut out = a.clone();
        for row in out.data.chunks_exact_mut(bs.c) {
            for (v, y) in row.iter_mut().zip(&b.data) {
                *v += y;
            }
        }
        return Ok(out);
    }
    Err(Error::Dimension(format!(
        "cannot add {} and {}",
        a.shape, b.shape
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output size and padding offsets of a 2-D sliding window.
///
/// Same padding puts `floor(total/2)` zeros on the leading edge and the
/// remainder on the trailing edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::Dimension(
                "kernel and stride must be positive".into(),
            ));
        }
        let (out_h, pad_top) = axis_geometry(in_h, kh, sh, padding)?;
        let (out_w, pad_left) = axis_geometry(in_w, kw, sw, padding)?;
        Ok(ConvGeometry {
            in_h,
            in_w,
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input row read by output row `oy` at kernel row `ky`, if inside the image.
    #[inline]
    pub fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.sh + ky)
            .checked_sub(self.pad_top)
            .filter(|&r| r < self.in_h)
    }

    #[inline]
    pub fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.sw + kx)
            .checked_sub(self.pad_left)
            .filter(|&c| c < self.in_w)
    }
}

fn axis_geometry(input: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if k > input {
                return Err(Error::Dimension(format!(
                    "kernel extent {k} exceeds unpadded input extent {input}"
                )));
            }
            Ok(((input - k) / s + 1, 0))
        }
    }
}

/// Row-major 2-D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Unfolds every receptive field of `x` into one row of a
/// `(n·out_h·out_w, kh·kw·c)` matrix; columns run over `(ky, kx, c)`.
pub fn im2col(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Matrix> {
    let s = x.shape;
    let g = ConvGeometry::new(s.h, s.w, kernel, stride, padding)?;
    Ok(im2col_with(x, &g))
}

pub(crate) fn im2col_with(x: &Tensor, g: &ConvGeometry) -> Matrix {
    let s = x.shape;
    let cols = g.kh * g.kw * s.c;
    let rows = s.n * g.out_h * g.out_w;
    let mut m = Matrix::zeros(rows, cols);
    let mut row = 0;
    for n in 0..s.n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut m.data[row * cols..(row + 1) * cols];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let src = s.offset(n, iy, ix, 0);
                        let d = (ky * g.kw + kx) * s.c;
                        dst[d..d + s.c].copy_from_slice(&x.data[src..src + s.c]);
                    }
                }
                row += 1;
            }
        }
    }
    m
}

/// Adjoint of [`im2col_with`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &Matrix, shape: Shape, g: &ConvGeometry) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let width = cols.cols;
    let mut row = 0;
    for n in 0..shape.n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols.data[row * width..(row + 1) * width];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let dst = shape.offset(n, iy, ix, 0);
                        let s = (ky * g.kw + kx) * shape.c;
                        for (o, v) in out.data[dst..dst + shape.c]
                            .iter_mut()
                            .zip(&src[s..s + shape.c])
                        {
                            *o += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    N,
    H,
    W,
    C,
}

/// Mean over `axes`; reduced axes keep size 1.
pub fn reduce_mean(x: &Tensor, axes: &[Axis]) -> Tensor {
    let s = x.shape;
    let keep = |axis: Axis, len: usize| if axes.contains(&axis) { 1 } else { len };
    let out_shape = Shape {
        n: keep(Axis::N, s.n),
        h: keep(Axis::H, s.h),
        w: keep(Axis::W, s.w),
        c: keep(Axis::C, s.c),
    };
    let mut out = Tensor::zeros(out_shape);
    let count = (s.len() / out_shape.len()) as f64;
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                for c in 0..s.c {
                    let dst = out_shape.offset(
                        n.min(out_shape.n - 1),
                        h.min(out_shape.h - 1),
                        w.min(out_shape.w - 1),
                        c.min(out_shape.c - 1),
                    );
                    out.data[dst] += x.data[s.offset(n, h, w, c)];
                }
            }
        }
    }
    for v in &mut out.data {
        *v /= count;
    }
    out
}

/// Operand layout for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

/// `c = alpha·op(a)·op(b) + beta·c` for row-major buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    op_a: Op,
    b: &[f64],
    op_b: Op,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(dims: [usize; 4]) -> Tensor {
        let len = dims.iter().product();
        Tensor::from_vec(dims, (0..len).map(|v| v as f64).collect())
    }

    #[test]
    fn zero_axis_rejected() {
        assert!(Shape::new(1, 0, 2, 2).is_err());
        assert!(Tensor::new(
            Shape {
                n: 1,
                h: 1,
                w: 1,
                c: 2
            },
            vec![1.0]
        )
        .is_err());
    }

    #[test]
    fn concat_two_tensors_adds_channels() {
        let a = seq([1, 2, 2, 3]);
        let b = seq([1, 2, 2, 5]);
        let out = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape().to_array(), [1, 2, 2, 8]);
        assert_eq!(out.at(0, 1, 0, 2), a.at(0, 1, 0, 2));
        assert_eq!(out.at(0, 1, 0, 3), b.at(0, 1, 0, 0));
    }

    #[test]
    fn concat_single_is_identity() {
        let a = seq([2, 3, 1, 4]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_dense_growth() {
        let x = seq([1, 2, 2, 16]);
        let outs: Vec<Tensor> = (0..8).map(|_| seq([1, 2, 2, 8])).collect();
        let mut refs = vec![&x];
        refs.extend(outs.iter());
        assert_eq!(concat_channels(&refs).unwrap().shape().c, 16 + 64);
    }

    #[test]
    fn concat_reports_offending_index() {
        let a = seq([1, 2, 2, 1]);
        let b = seq([1, 2, 3, 1]);
        let err = concat_channels(&[&a, &a, &b]).unwrap_err().to_string();
        assert!(err.contains("input 2"), "{err}");
        assert!(concat_channels(&[]).is_err());
    }

    #[test]
    fn add_zero_and_per_channel() {
        let a = seq([1, 2, 2, 2]);
        assert_eq!(elementwise_add(&a, &Tensor::zeros(a.shape())).unwrap(), a);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]);
        let b = Tensor::channel_vector(vec![10.0, 20.0]).unwrap();
        assert_eq!(elementwise_add(&x, &b).unwrap().data(), &[11.0, 22.0]);
        let bad = Tensor::channel_vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            elementwise_add(&x, &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn im2col_pointwise_is_reshape() {
        let x = seq([2, 3, 3, 2]);
        let m = im2col(&x, (1, 1), (1, 1), Padding::Same).unwrap();
        assert_eq!((m.rows, m.cols), (18, 2));
        assert_eq!(m.data, x.data());
    }

    #[test]
    fn im2col_strided_same() {
        let x = seq([1, 4, 4, 1]);
        let m = im2col(&x, (3, 3), (2, 2), Padding::Same).unwrap();
        assert_eq!((m.rows, m.cols), (4, 9));
        // total pad is 1 per axis: nothing before, one zero row/col after.
        assert_eq!(&m.data[0..9], &[0., 1., 2., 4., 5., 6., 8., 9., 10.]);
        assert_eq!(&m.data[27..36], &[10., 11., 0., 14., 15., 0., 0., 0., 0.]);
    }

    #[test]
    fn im2col_valid_single_patch() {
        let x = Tensor::from_vec([1, 3, 3, 1], (1..=9).map(f64::from).collect());
        let m = im2col(&x, (3, 3), (1, 1), Padding::Valid).unwrap();
        assert_eq!(m.rows, 1);
        assert_eq!(m.data, (1..=9).map(f64::from).collect::<Vec<_>>());
        assert!(im2col(&x, (5, 5), (1, 1), Padding::Valid).is_err());
    }

    #[test]
    fn same_padding_output_is_ceil() {
        for input in 1..=16 {
            for stride in [1, 2] {
                for k in [1, 3, 5] {
                    let g =
                        ConvGeometry::new(input, input, (k, k), (stride, stride), Padding::Same)
                            .unwrap();
                    assert_eq!(g.out_h, input.div_ceil(stride));
                }
            }
        }
    }

    #[test]
    fn reduce_mean_cases() {
        let c = Tensor::filled(Shape::new(2, 3, 2, 2).unwrap(), 4.5);
        let m = reduce_mean(&c, &[Axis::N, Axis::H, Axis::W, Axis::C]);
        assert_eq!(m.data(), &[4.5]);
        let v = Tensor::from_vec([2, 1, 1, 1], vec![0.0, 2.0]);
        assert_eq!(reduce_mean(&v, &[Axis::N]).data(), &[1.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [1., 0., 0., 1., 1., 1.];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, Op::N, &b, Op::N, &mut c, 0.0);
        assert_eq!(c, [4., 5., 10., 11.]);
        // aᵀ (3x2) stored as a; compute aᵀ·a' where a' is 2x3 -> 3x3
        let mut d = [0.0; 9];
        gemm(3, 2, 3, &a, Op::T, &a, Op::N, &mut d, 0.0);
        assert_eq!(d[0], 1. + 16.);
        assert_eq!(d[4], 4. + 25.);
        let mut e = [0.0; 4];
        gemm(
            2,
            3,
            2,
            &a,
            Op::N,
            &[1., 0., 1., 0., 1., 1.],
            Op::T,
            &mut e,
            0.0,
        );
        assert_eq!(e, [1. + 3., 2. + 3., 4. + 6., 5. + 6.]);
    }
}
