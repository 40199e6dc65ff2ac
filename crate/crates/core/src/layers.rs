//! Learnable layers and their backward rules.
//!
//! Every convolution in the network is wrapped in a *unit*:
//! `ReLU → conv → bias → batch norm`. With the separable kind the conv is a
//! per-channel depthwise filter followed by a 1×1 pointwise projection.
//! [`conv_unit`] records a separable unit as a single fused tape node that
//! can read its input from several tensors at once, which is how dense
//! blocks avoid materialising their growing concatenations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{channel_sums, BackwardOp, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, ParamKind, Parameterized};
use crate::tensor::{self, col2im, gemm, im2col_with, ConvGeometry, Op, Padding, Shape, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Separable,
    Standard,
}

/// Per-pass state: mode flag, the dropout stream and pending running-stat
/// writes produced by train-mode batch norm.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: Option<ChaCha8Rng>,
    updates: Vec<(String, Tensor)>,
    calibrating: bool,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            rng: None,
            updates: Vec::new(),
            calibrating: false,
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: Some(rng),
            updates: Vec::new(),
            calibrating: false,
        }
    }

    /// Batch norm uses batch statistics and queues them verbatim as the new
    /// running statistics; dropout is off.
    pub fn calibrate() -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: None,
            updates: Vec::new(),
            calibrating: true,
        }
    }

    /// Running-statistic replacements keyed by parameter path.
    pub fn take_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.updates)
    }
}

pub fn apply_buffer_updates<P: Parameterized>(
    params: &mut P,
    updates: Vec<(String, Tensor)>,
) -> Result<()> {
    for (path, value) in updates {
        params.set(&path, value)?;
    }
    Ok(())
}

/// Zero-mean Gaussian with variance `2 / fan_in`.
pub fn he_normal(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights {
    /// `(kh, kw, c_in, c_out)`.
    Standard { kernel: Tensor },
    /// `(kh, kw, c_in, 1)` then `(1, 1, c_in, c_out)`.
    Separable {
        depthwise: Tensor,
        pointwise: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: ConvWeights,
    /// `(1,1,1,c_out)`.
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvParams {
    pub fn init(
        kind: ConvKind,
        kernel: (usize, usize),
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(
                "conv channel counts must be at least 1".into(),
            ));
        }
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::Config(format!(
                "same padding needs odd kernel dims, got {kh}x{kw}"
            )));
        }
        let weights = match kind {
            ConvKind::Standard => ConvWeights::Standard {
                kernel: he_normal(Shape::new(kh, kw, c_in, c_out)?, kh * kw * c_in, rng),
            },
            ConvKind::Separable => ConvWeights::Separable {
                depthwise: he_normal(Shape::new(kh, kw, c_in, 1)?, kh * kw, rng),
                pointwise: he_normal(Shape::new(1, 1, c_in, c_out)?, c_in, rng),
            },
        };
        Ok(ConvParams {
            weights,
            bias: Tensor::zeros(Shape::new(1, 1, 1, c_out)?),
            stride,
            padding,
        })
    }

    pub fn kind(&self) -> ConvKind {
        match self.weights {
            ConvWeights::Standard { .. } => ConvKind::Standard,
            ConvWeights::Separable { .. } => ConvKind::Separable,
        }
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = match &self.weights {
            ConvWeights::Standard { kernel } => kernel.shape(),
            ConvWeights::Separable { depthwise, .. } => depthwise.shape(),
        };
        (s.n, s.h)
    }

    pub fn c_in(&self) -> usize {
        match &self.weights {
            ConvWeights::Standard { kernel } => kernel.shape().w,
            ConvWeights::Separable { depthwise, .. } => depthwise.shape().w,
        }
    }

    pub fn c_out(&self) -> usize {
        self.bias.shape().c
    }

    pub fn geometry(&self, input: Shape) -> Result<ConvGeometry> {
        ConvGeometry::new(
            input.h,
            input.w,
            self.kernel_size(),
            self.stride,
            self.padding,
        )
    }
}

impl Parameterized for ConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match &self.weights {
            ConvWeights::Standard { kernel } => {
                f(&join(prefix, "kernel"), kernel, ParamKind::Kernel)
            }
            ConvWeights::Separable {
                depthwise,
                pointwise,
            } => {
                f(&join(prefix, "depthwise"), depthwise, ParamKind::Kernel);
                f(&join(prefix, "pointwise"), pointwise, ParamKind::Kernel);
            }
        }
        f(&join(prefix, "bias"), &self.bias, ParamKind::Bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match &mut self.weights {
            ConvWeights::Standard { kernel } => {
                f(&join(prefix, "kernel"), kernel, ParamKind::Kernel)
            }
            ConvWeights::Separable {
                depthwise,
                pointwise,
            } => {
                f(&join(prefix, "depthwise"), depthwise, ParamKind::Kernel);
                f(&join(prefix, "pointwise"), pointwise, ParamKind::Kernel);
            }
        }
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Result<Self> {
        let shape = Shape::new(1, 1, 1, channels)?;
        Ok(BatchNormParams {
            gamma: Tensor::filled(shape, 1.0),
            beta: Tensor::zeros(shape),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::filled(shape, 1.0),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

impl Parameterized for BatchNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Scale);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Shift);
        f(
            &join(prefix, "running_mean"),
            &self.running_mean,
            ParamKind::RunningMean,
        );
        f(
            &join(prefix, "running_var"),
            &self.running_var,
            ParamKind::RunningVar,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Scale);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Shift);
        f(
            &join(prefix, "running_mean"),
            &mut self.running_mean,
            ParamKind::RunningMean,
        );
        f(
            &join(prefix, "running_var"),
            &mut self.running_var,
            ParamKind::RunningVar,
        );
    }
}

/// ReLU → conv → bias → BN.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnitParams {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

impl ConvUnitParams {
    pub fn init(
        kind: ConvKind,
        kernel: (usize, usize),
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvUnitParams {
            conv: ConvParams::init(kind, kernel, c_in, c_out, stride, Padding::Same, rng)?,
            bn: BatchNormParams::new(c_out)?,
        })
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }
}

impl Parameterized for ConvUnitParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
}

impl DropoutConfig {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(DropoutConfig { rate })
    }
}

// ---------------------------------------------------------------------------
// Pure kernels
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn check_channels(what: &str, x: Shape, expected: usize) -> Result<()> {
    if x.c != expected {
        return Err(Error::Dimension(format!(
            "{what} expects {expected} input channels, input has shape {x}"
        )));
    }
    Ok(())
}

/// Standard convolution through im2col lowering; `kernel` is `(kh,kw,c_in,c_out)`.
pub fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let ks = kernel.shape();
    check_channels("conv2d", x.shape(), ks.w)?;
    let g = ConvGeometry::new(x.shape().h, x.shape().w, (ks.n, ks.h), stride, padding)?;
    let cols = im2col_with(x, &g);
    let out_shape = Shape::new(x.shape().n, g.out_h, g.out_w, ks.c)?;
    let mut out = vec![0.0; out_shape.len()];
    gemm(
        cols.rows,
        cols.cols,
        ks.c,
        &cols.data,
        Op::N,
        kernel.data(),
        Op::N,
        &mut out,
        0.0,
    );
    Tensor::new(out_shape, out)
}

/// Per-channel spatial filter; `kernel` is `(kh,kw,c,1)`.
pub fn depthwise_forward(
    x: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let ks = kernel.shape();
    check_channels("depthwise conv", x.shape(), ks.w)?;
    if ks.c != 1 {
        return Err(Error::Dimension(format!(
            "depthwise kernel must be (kh,kw,c,1), got {ks}"
        )));
    }
    let s = x.shape();
    let g = ConvGeometry::new(s.h, s.w, (ks.n, ks.h), stride, padding)?;
    let out_shape = Shape::new(s.n, g.out_h, g.out_w, s.c)?;
    let mut out = vec![0.0; out_shape.len()];
    depthwise_into(x, false, kernel.data(), s.c, 0, &g, &mut out);
    Tensor::new(out_shape, out)
}

/// 1×1 channel mixing; `kernel` is `(1,1,c_in,c_out)`.
pub fn pointwise_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let ks = kernel.shape();
    if ks.n != 1 || ks.h != 1 {
        return Err(Error::Dimension(format!(
            "pointwise kernel must be (1,1,c_in,c_out), got {ks}"
        )));
    }
    check_channels("pointwise conv", x.shape(), ks.w)?;
    let s = x.shape();
    let out_shape = Shape { c: ks.c, ..s };
    let mut out = vec![0.0; out_shape.len()];
    gemm(
        s.pixels(),
        ks.w,
        ks.c,
        x.data(),
        Op::N,
        kernel.data(),
        Op::N,
        &mut out,
        0.0,
    );
    Tensor::new(out_shape, out)
}

/// Accumulates the depthwise response of `x` (optionally rectified) into
/// `out`, laid out `(n, out_h, out_w, x.c)`. `kernel` rows are `kernel_c`
/// wide; the channels of `x` start at column `offset`.
fn depthwise_into(
    x: &Tensor,
    rectify: bool,
    kernel: &[f64],
    kernel_c: usize,
    offset: usize,
    g: &ConvGeometry,
    out: &mut [f64],
) {
    let s = x.shape();
    let c = s.c;
    let xd = x.data();
    if g.sw == 1 {
        // Unit column stride: each (row, tap) pair is one flat multiply-add
        // against the tap's kernel slice tiled across the row.
        let tiles = tile_taps(kernel, kernel_c, offset, c, g);
        let row = g.out_w * c;
        for n in 0..s.n {
            for oy in 0..g.out_h {
                let dst_row = &mut out[(n * g.out_h + oy) * row..][..row];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let src_row = &xd[s.offset(n, iy, 0, 0)..][..g.in_w * c];
                    for kx in 0..g.kw {
                        let Some((lo, hi)) = unit_stride_span(g, kx) else {
                            continue;
                        };
                        let len = (hi - lo) * c;
                        let dst = &mut dst_row[lo * c..lo * c + len];
                        let src = &src_row[(lo + kx - g.pad_left) * c..][..len];
                        let k = &tiles[(ky * g.kw + kx) * row..][..len];
                        if rectify {
                            for ((d, &v), &w) in dst.iter_mut().zip(src).zip(k) {
                                *d += v.max(0.0) * w;
                            }
                        } else {
                            for ((d, &v), &w) in dst.iter_mut().zip(src).zip(k) {
                                *d += v * w;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    for n in 0..s.n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((n * g.out_h + oy) * g.out_w + ox) * c;
                let dst = &mut out[o..o + c];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let src = &xd[s.offset(n, iy, ix, 0)..][..c];
                        let k = (ky * g.kw + kx) * kernel_c + offset;
                        let kern = &kernel[k..k + c];
                        if rectify {
                            for ((d, &v), &w) in dst.iter_mut().zip(src).zip(kern) {
                                *d += v.max(0.0) * w;
                            }
                        } else {
                            for ((d, &v), &w) in dst.iter_mut().zip(src).zip(kern) {
                                *d += v * w;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Each tap's `c` kernel weights repeated `out_w` times.
fn tile_taps(
    kernel: &[f64],
    kernel_c: usize,
    offset: usize,
    c: usize,
    g: &ConvGeometry,
) -> Vec<f64> {
    let mut tiles = Vec::with_capacity(g.kh * g.kw * g.out_w * c);
    for t in 0..g.kh * g.kw {
        let k = &kernel[t * kernel_c + offset..][..c];
        for _ in 0..g.out_w {
            tiles.extend_from_slice(k);
        }
    }
    tiles
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input, for
/// unit column stride.
fn unit_stride_span(g: &ConvGeometry, kx: usize) -> Option<(usize, usize)> {
    let lo = g.pad_left.saturating_sub(kx);
    let hi = (g.in_w + g.pad_left).checked_sub(kx)?.min(g.out_w);
    (lo < hi).then_some((lo, hi))
}

/// Backward of [`depthwise_into`]: accumulates into `dkernel` and, when
/// given, writes the input gradient (masked by the ReLU when `rectify`).
#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &Tensor,
    rectify: bool,
    kernel: &[f64],
    kernel_c: usize,
    offset: usize,
    g: &ConvGeometry,
    dout: &[f64],
    dkernel: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe {
            depthwise_backward_avx2(x, rectify, kernel, kernel_c, offset, g, dout, dkernel, dx)
        };
    }
    depthwise_backward_impl(x, rectify, kernel, kernel_c, offset, g, dout, dkernel, dx)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn depthwise_backward_avx2(
    x: &Tensor,
    rectify: bool,
    kernel: &[f64],
    kernel_c: usize,
    offset: usize,
    g: &ConvGeometry,
    dout: &[f64],
    dkernel: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    depthwise_backward_impl(x, rectify, kernel, kernel_c, offset, g, dout, dkernel, dx)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn depthwise_backward_impl(
    x: &Tensor,
    rectify: bool,
    kernel: &[f64],
    kernel_c: usize,
    offset: usize,
    g: &ConvGeometry,
    dout: &[f64],
    dkernel: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let s = x.shape();
    let c = s.c;
    let xd = x.data();
    if g.sw == 1 {
        let tiles = tile_taps(kernel, kernel_c, offset, c, g);
        let row = g.out_w * c;
        let mut dtiles = vec![0.0; tiles.len()];
        for n in 0..s.n {
            for oy in 0..g.out_h {
                let go_row = &dout[(n * g.out_h + oy) * row..][..row];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let xo = s.offset(n, iy, 0, 0);
                    let src_row = &xd[xo..][..g.in_w * c];
                    for kx in 0..g.kw {
                        let Some((lo, hi)) = unit_stride_span(g, kx) else {
                            continue;
                        };
                        let len = (hi - lo) * c;
                        let go = &go_row[lo * c..lo * c + len];
                        let start = (lo + kx - g.pad_left) * c;
                        let src = &src_row[start..start + len];
                        let t = (ky * g.kw + kx) * row;
                        let dk = &mut dtiles[t..t + len];
                        if rectify {
                            for ((d, &v), &gv) in dk.iter_mut().zip(src).zip(go) {
                                *d += gv * v.max(0.0);
                            }
                        } else {
                            for ((d, &v), &gv) in dk.iter_mut().zip(src).zip(go) {
                                *d += gv * v;
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let k = &tiles[t..t + len];
                            let dst = &mut dx[xo + start..xo + start + len];
                            for ((d, &w), &gv) in dst.iter_mut().zip(k).zip(go) {
                                *d += gv * w;
                            }
                        }
                    }
                }
            }
        }
        for t in 0..g.kh * g.kw {
            let dk = &mut dkernel[t * kernel_c + offset..][..c];
            for chunk in dtiles[t * row..(t + 1) * row].chunks_exact(c) {
                for (d, &v) in dk.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
        }
    } else {
        for n in 0..s.n {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let o = ((n * g.out_h + oy) * g.out_w + ox) * c;
                    let go = &dout[o..o + c];
                    for ky in 0..g.kh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.in_col(ox, kx) else { continue };
                            let xo = s.offset(n, iy, ix, 0);
                            let k = (ky * g.kw + kx) * kernel_c + offset;
                            let src = &xd[xo..xo + c];
                            let dk = &mut dkernel[k..k + c];
                            if rectify {
                                for ((d, &v), &gv) in dk.iter_mut().zip(src).zip(go) {
                                    *d += gv * v.max(0.0);
                                }
                            } else {
                                for ((d, &v), &gv) in dk.iter_mut().zip(src).zip(go) {
                                    *d += gv * v;
                                }
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let kern = &kernel[k..k + c];
                                for ((d, &w), &gv) in dx[xo..xo + c].iter_mut().zip(kern).zip(go) {
                                    *d += gv * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if rectify {
        if let Some(dx) = dx {
            for (d, &v) in dx.iter_mut().zip(xd) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }
        }
    }
}

/// Statistics of one batch-norm application.
struct BnForward {
    y: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// `running = None` normalises by the batch's own (biased) statistics.
fn bn_forward(
    p: &[f64],
    c: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
    eps: f64,
) -> BnForward {
    let rows = p.len() / c;
    let (mean, var) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![0.0; c];
            for row in p.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in p.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; p.len()];
    let mut y = vec![0.0; p.len()];
    for ((prow, xrow), yrow) in p
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(y.chunks_exact_mut(c))
    {
        for j in 0..c {
            let h = (prow[j] - mean[j]) * inv_std[j];
            xrow[j] = h;
            yrow[j] = gamma[j] * h + beta[j];
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(d_input, d_gamma, d_beta)`.
fn bn_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    c: usize,
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / c;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (grow, xrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            dgamma[j] += grow[j] * xrow[j];
            dbeta[j] += grow[j];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    if batch_stats {
        // dxhat = dy·γ; dx = inv/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
        let n = rows as f64;
        for ((drow, grow), xrow) in dx
            .chunks_exact_mut(c)
            .zip(dy.chunks_exact(c))
            .zip(xhat.chunks_exact(c))
        {
            for j in 0..c {
                let dxhat = grow[j] * gamma[j];
                let sum_dxhat = dbeta[j] * gamma[j];
                let sum_dxhat_xhat = dgamma[j] * gamma[j];
                drow[j] = inv_std[j] / n * (n * dxhat - sum_dxhat - xrow[j] * sum_dxhat_xhat);
            }
        }
    } else {
        for (drow, grow) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
            for j in 0..c {
                drow[j] = grow[j] * gamma[j] * inv_std[j];
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Numerically stable softmax over the channel axis.
pub fn softmax_forward(z: &Tensor) -> Tensor {
    let c = z.shape().c;
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Numerically stable log-softmax over the channel axis.
pub fn log_softmax_forward(z: &Tensor) -> Tensor {
    let c = z.shape().c;
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

// ---------------------------------------------------------------------------
// Taped operations
// ---------------------------------------------------------------------------

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let value = relu_forward(tape.value(x));
    tape.record(value, &[x], ReluOp)
}

struct ReluOp;

impl BackwardOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let data = grad
            .data()
            .iter()
            .zip(inputs[0].data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

/// Standard convolution of `x` with the kernel bound at `kernel`.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Var> {
    let value = conv2d_forward(tape.value(x), tape.value(kernel), stride, padding)?;
    let ks = tape.value(kernel).shape();
    let xs = tape.value(x).shape();
    let geometry = ConvGeometry::new(xs.h, xs.w, (ks.n, ks.h), stride, padding)?;
    Ok(tape.record(value, &[x, kernel], Conv2dOp { geometry }))
}

struct Conv2dOp {
    geometry: ConvGeometry,
}

impl BackwardOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let ks = kernel.shape();
        let cols = im2col_with(x, &self.geometry);
        let c_out = ks.c;
        let dk = wanted[1].then(|| {
            let mut dk = vec![0.0; ks.len()];
            gemm(
                cols.cols,
                cols.rows,
                c_out,
                &cols.data,
                Op::T,
                grad.data(),
                Op::N,
                &mut dk,
                0.0,
            );
            Tensor::new(ks, dk).expect("kernel shape")
        });
        let dx = wanted[0].then(|| {
            let mut dcols = tensor::Matrix::zeros(cols.rows, cols.cols);
            gemm(
                cols.rows,
                c_out,
                cols.cols,
                grad.data(),
                Op::N,
                kernel.data(),
                Op::T,
                &mut dcols.data,
                0.0,
            );
            col2im(&dcols, x.shape(), &self.geometry)
        });
        vec![dx, dk]
    }
}

pub fn depthwise_conv(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Var> {
    let value = depthwise_forward(tape.value(x), tape.value(kernel), stride, padding)?;
    let ks = tape.value(kernel).shape();
    let xs = tape.value(x).shape();
    let geometry = ConvGeometry::new(xs.h, xs.w, (ks.n, ks.h), stride, padding)?;
    Ok(tape.record(value, &[x, kernel], DepthwiseOp { geometry }))
}

struct DepthwiseOp {
    geometry: ConvGeometry,
}

impl BackwardOp for DepthwiseOp {
    fn name(&self) -> &'static str {
        "depthwise_conv"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let c = x.shape().c;
        let mut dk = vec![0.0; kernel.len()];
        let mut dx = wanted[0].then(|| vec![0.0; x.len()]);
        depthwise_backward(
            x,
            false,
            kernel.data(),
            c,
            0,
            &self.geometry,
            grad.data(),
            &mut dk,
            dx.as_deref_mut(),
        );
        vec![
            dx.map(|d| Tensor::new(x.shape(), d).expect("x shape")),
            wanted[1].then(|| Tensor::new(kernel.shape(), dk).expect("kernel shape")),
        ]
    }
}

pub fn pointwise_conv(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    let value = pointwise_forward(tape.value(x), tape.value(kernel))?;
    Ok(tape.record(value, &[x, kernel], PointwiseOp))
}

struct PointwiseOp;

impl BackwardOp for PointwiseOp {
    fn name(&self) -> &'static str {
        "pointwise_conv"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let (p, ci, co) = (x.shape().pixels(), kernel.shape().w, kernel.shape().c);
        let dx = wanted[0].then(|| {
            let mut dx = vec![0.0; x.len()];
            gemm(
                p,
                co,
                ci,
                grad.data(),
                Op::N,
                kernel.data(),
                Op::T,
                &mut dx,
                0.0,
            );
            Tensor::new(x.shape(), dx).expect("x shape")
        });
        let dk = wanted[1].then(|| {
            let mut dk = vec![0.0; kernel.len()];
            gemm(ci, p, co, x.data(), Op::T, grad.data(), Op::N, &mut dk, 0.0);
            Tensor::new(kernel.shape(), dk).expect("kernel shape")
        });
        vec![dx, dk]
    }
}

/// Batch normalisation with `γ`, `β` bound at `gamma`, `beta`. Train mode
/// uses batch statistics and queues the running-stat update under `path`.
pub fn batch_norm(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x: Var,
    gamma: Var,
    beta: Var,
    bn: &BatchNormParams,
    path: &str,
) -> Result<Var> {
    let xv = tape.value(x);
    let c = xv.shape().c;
    if bn.channels() != c {
        return Err(Error::Dimension(format!(
            "batch norm has {} channels, input {}",
            bn.channels(),
            xv.shape()
        )));
    }
    let train = ctx.mode == Mode::Train;
    let running = (!train).then(|| (bn.running_mean.data(), bn.running_var.data()));
    let out = bn_forward(
        xv.data(),
        c,
        tape.value(gamma).data(),
        tape.value(beta).data(),
        running,
        bn.epsilon,
    );
    if train {
        queue_running_update(ctx, bn, path, &out);
    }
    let value = Tensor::new(xv.shape(), out.y)?;
    Ok(tape.record(
        value,
        &[x, gamma, beta],
        BatchNormOp {
            xhat: out.xhat,
            inv_std: out.inv_std,
            batch_stats: train,
        },
    ))
}

fn queue_running_update(ctx: &mut ForwardCtx, bn: &BatchNormParams, path: &str, out: &BnForward) {
    let m = if ctx.calibrating { 0.0 } else { bn.momentum };
    let blend = |running: &Tensor, batch: &[f64]| {
        let data = running
            .data()
            .iter()
            .zip(batch)
            .map(|(r, b)| m * r + (1.0 - m) * b)
            .collect();
        Tensor::new(running.shape(), data).expect("channel vector")
    };
    ctx.updates.push((
        join(path, "running_mean"),
        blend(&bn.running_mean, &out.mean),
    ));
    ctx.updates
        .push((join(path, "running_var"), blend(&bn.running_var, &out.var)));
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BackwardOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let c = grad.shape().c;
        let (dx, dg, db) = bn_backward(
            grad.data(),
            &self.xhat,
            &self.inv_std,
            inputs[1].data(),
            c,
            self.batch_stats,
        );
        vec![
            Some(Tensor::new(grad.shape(), dx).expect("x shape")),
            Some(Tensor::channel_vector(dg).expect("c >= 1")),
            Some(Tensor::channel_vector(db).expect("c >= 1")),
        ]
    }
}

/// Inverted dropout: identity in eval mode, otherwise zeroes each entry with
/// probability `rate` and scales survivors by `1/(1-rate)`.
pub fn dropout(tape: &mut Tape, ctx: &mut ForwardCtx, x: Var, cfg: DropoutConfig) -> Result<Var> {
    if ctx.mode == Mode::Eval || ctx.calibrating || cfg.rate == 0.0 {
        return Ok(tape.identity(x));
    }
    let rng = ctx
        .rng
        .as_mut()
        .ok_or_else(|| Error::State("train-mode dropout without an RNG stream".into()))?;
    let keep = 1.0 / (1.0 - cfg.rate);
    let xv = tape.value(x);
    let mask: Vec<f64> = (0..xv.len())
        .map(|_| {
            if rng.random::<f64>() < cfg.rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let value = Tensor::new(xv.shape(), data)?;
    Ok(tape.record(value, &[x], DropoutOp { mask }))
}

struct DropoutOp {
    mask: Vec<f64>,
}

impl BackwardOp for DropoutOp {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let data = grad
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(g, m)| g * m)
            .collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

pub fn softmax(tape: &mut Tape, z: Var) -> Var {
    let value = softmax_forward(tape.value(z));
    tape.record(value, &[z], SoftmaxOp)
}

struct SoftmaxOp;

impl BackwardOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let c = grad.shape().c;
        let mut dz = vec![0.0; grad.len()];
        for ((d, s), g) in dz
            .chunks_exact_mut(c)
            .zip(output.data().chunks_exact(c))
            .zip(grad.data().chunks_exact(c))
        {
            let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..c {
                d[j] = s[j] * (g[j] - dot);
            }
        }
        vec![Some(Tensor::new(grad.shape(), dz).expect("same shape"))]
    }
}

/// Mean over samples of `−log softmax(logits)[label]`; `logits` is `(n,1,1,K)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let z = tape.value(logits);
    let s = z.shape();
    if s.h != 1 || s.w != 1 || s.n != labels.len() {
        return Err(Error::Dimension(format!(
            "cross entropy needs (n,1,1,K) logits for {} labels, got {s}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::Contract(format!(
            "label {bad} outside {} classes",
            s.c
        )));
    }
    let logp = log_softmax_forward(z);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -logp.data()[i * s.c + l])
        .sum::<f64>()
        / s.n as f64;
    let probs = logp.map(f64::exp);
    Ok(tape.record(
        Tensor::scalar(loss),
        &[logits],
        CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
        },
    ))
}

struct CrossEntropyOp {
    probs: Tensor,
    labels: Vec<usize>,
}

impl BackwardOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let k = self.probs.shape().c;
        let n = self.labels.len() as f64;
        let mut d = self.probs.clone();
        for (i, &l) in self.labels.iter().enumerate() {
            d.data_mut()[i * k + l] -= 1.0;
        }
        vec![Some(d.scale(grad.item() / n))]
    }
}

// ---------------------------------------------------------------------------
// Conv units
// ---------------------------------------------------------------------------

/// `BN(conv(ReLU(concat(inputs))) + bias)` with parameters bound under `path`.
///
/// Separable units are recorded as one fused node that reads the inputs
/// in place; standard units are composed from the individual ops.
pub fn conv_unit(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    inputs: &[Var],
    p: &ConvUnitParams,
    path: &str,
) -> Result<Var> {
    match &p.conv.weights {
        ConvWeights::Standard { .. } => conv_unit_composed(tape, ctx, inputs, p, path),
        ConvWeights::Separable {
            depthwise,
            pointwise,
        } => fused_separable_unit(tape, ctx, inputs, p, depthwise, pointwise, path),
    }
}

/// Reference composition of the unit out of the individual taped ops.
pub fn conv_unit_composed(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    inputs: &[Var],
    p: &ConvUnitParams,
    path: &str,
) -> Result<Var> {
    let conv_path = join(path, "conv");
    let bn_path = join(path, "bn");
    let x = if inputs.len() == 1 {
        inputs[0]
    } else {
        tape.concat_channels(inputs)?
    };
    let r = relu(tape, x);
    let c = p.conv.clone();
    let conv_out = match c.weights {
        ConvWeights::Standard { kernel } => {
            let k = tape.param(join(&conv_path, "kernel"), kernel);
            conv2d(tape, r, k, c.stride, c.padding)?
        }
        ConvWeights::Separable {
            depthwise,
            pointwise,
        } => {
            let dk = tape.param(join(&conv_path, "depthwise"), depthwise);
            let pk = tape.param(join(&conv_path, "pointwise"), pointwise);
            let d = depthwise_conv(tape, r, dk, c.stride, c.padding)?;
            pointwise_conv(tape, d, pk)?
        }
    };
    let b = tape.param(join(&conv_path, "bias"), c.bias);
    let biased = tape.add(conv_out, b)?;
    let gamma = tape.param(join(&bn_path, "gamma"), p.bn.gamma.clone());
    let beta = tape.param(join(&bn_path, "beta"), p.bn.beta.clone());
    batch_norm(tape, ctx, biased, gamma, beta, &p.bn, &bn_path)
}

#[allow(clippy::too_many_arguments)]
fn fused_separable_unit(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    inputs: &[Var],
    p: &ConvUnitParams,
    depthwise: &Tensor,
    pointwise: &Tensor,
    path: &str,
) -> Result<Var> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::Dimension("conv unit with no inputs".into()))?;
    let base = tape.value(first).shape();
    let mut sizes = Vec::with_capacity(inputs.len());
    for (i, &v) in inputs.iter().enumerate() {
        let s = tape.value(v).shape();
        if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
            return Err(Error::Dimension(format!(
                "conv unit input {i} has shape {s}, expected ({},{},{},_)",
                base.n, base.h, base.w
            )));
        }
        sizes.push(s.c);
    }
    let c_in: usize = sizes.iter().sum();
    check_channels(path, Shape { c: c_in, ..base }, p.conv.c_in())?;
    let geometry = p.conv.geometry(base)?;
    let c_out = p.conv.c_out();
    let out_shape = Shape::new(base.n, geometry.out_h, geometry.out_w, c_out)?;

    let parts: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
    let mixed = separable_mix(
        &parts,
        depthwise,
        pointwise,
        &p.conv.bias,
        &geometry,
        out_shape,
    );

    let train = ctx.mode == Mode::Train;
    let running = (!train).then(|| (p.bn.running_mean.data(), p.bn.running_var.data()));
    let bn_path = join(path, "bn");
    let out = bn_forward(
        &mixed,
        c_out,
        p.bn.gamma.data(),
        p.bn.beta.data(),
        running,
        p.bn.epsilon,
    );
    if train {
        queue_running_update(ctx, &p.bn, &bn_path, &out);
    }
    let value = Tensor::new(out_shape, out.y)?;

    let conv_path = join(path, "conv");
    let mut all = inputs.to_vec();
    all.push(tape.param(join(&conv_path, "depthwise"), depthwise.clone()));
    all.push(tape.param(join(&conv_path, "pointwise"), pointwise.clone()));
    all.push(tape.param(join(&conv_path, "bias"), p.conv.bias.clone()));
    all.push(tape.param(join(&bn_path, "gamma"), p.bn.gamma.clone()));
    all.push(tape.param(join(&bn_path, "beta"), p.bn.beta.clone()));
    Ok(tape.record(
        value,
        &all,
        FusedSeparableOp {
            geometry,
            parts: sizes.len(),
            xhat: out.xhat,
            inv_std: out.inv_std,
            batch_stats: train,
        },
    ))
}

/// Depthwise response of one rectified part, `(pixels_out, part.c)`.
fn depthwise_of_part(
    part: &Tensor,
    depthwise: &Tensor,
    offset: usize,
    g: &ConvGeometry,
    out_pixels: usize,
) -> Vec<f64> {
    let mut d = vec![0.0; out_pixels * part.shape().c];
    depthwise_into(
        part,
        true,
        depthwise.data(),
        depthwise.shape().w,
        offset,
        g,
        &mut d,
    );
    d
}

/// `pointwise(depthwise(ReLU(parts))) + bias`, row-major `(pixels_out, c_out)`.
/// Each part meets its own band of pointwise rows.
fn separable_mix(
    parts: &[&Tensor],
    depthwise: &Tensor,
    pointwise: &Tensor,
    bias: &Tensor,
    g: &ConvGeometry,
    out_shape: Shape,
) -> Vec<f64> {
    let c_out = out_shape.c;
    let pixels = out_shape.pixels();
    let mut out = Vec::with_capacity(pixels * c_out);
    for _ in 0..pixels {
        out.extend_from_slice(bias.data());
    }
    let mut offset = 0;
    for part in parts {
        let c = part.shape().c;
        let d = depthwise_of_part(part, depthwise, offset, g, pixels);
        let band = &pointwise.data()[offset * c_out..(offset + c) * c_out];
        gemm(pixels, c, c_out, &d, Op::N, band, Op::N, &mut out, 1.0);
        offset += c;
    }
    out
}

struct FusedSeparableOp {
    geometry: ConvGeometry,
    parts: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BackwardOp for FusedSeparableOp {
    fn name(&self) -> &'static str {
        "separable_unit"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        let k = self.parts;
        let parts = &inputs[..k];
        let (depthwise, pointwise, bias, gamma) =
            (inputs[k], inputs[k + 1], inputs[k + 2], inputs[k + 3]);
        let c_in = depthwise.shape().w;
        let c_out = output.shape().c;
        let pixels = output.shape().pixels();

        let (dmix, dgamma, dbeta) = bn_backward(
            grad.data(),
            &self.xhat,
            &self.inv_std,
            gamma.data(),
            c_out,
            self.batch_stats,
        );
        let dbias = channel_sums(&Tensor::new(output.shape(), dmix.clone()).expect("out shape"));

        let mut dpw = vec![0.0; c_in * c_out];
        let mut ddw = vec![0.0; depthwise.len()];
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for (part, &want) in parts.iter().zip(wanted) {
            let c = part.shape().c;
            let d = depthwise_of_part(part, depthwise, offset, &self.geometry, pixels);
            gemm(
                c,
                pixels,
                c_out,
                &d,
                Op::T,
                &dmix,
                Op::N,
                &mut dpw[offset * c_out..(offset + c) * c_out],
                0.0,
            );
            drop(d);
            let mut dd = vec![0.0; pixels * c];
            let band = &pointwise.data()[offset * c_out..(offset + c) * c_out];
            gemm(pixels, c_out, c, &dmix, Op::N, band, Op::T, &mut dd, 0.0);
            let mut dx = want.then(|| vec![0.0; part.len()]);
            depthwise_backward(
                part,
                true,
                depthwise.data(),
                c_in,
                offset,
                &self.geometry,
                &dd,
                &mut ddw,
                dx.as_deref_mut(),
            );
            offset += c;
            grads.push(dx.map(|d| Tensor::new(part.shape(), d).expect("part shape")));
        }
        grads.push(Some(
            Tensor::new(depthwise.shape(), ddw).expect("depthwise shape"),
        ));
        grads.push(Some(
            Tensor::new(pointwise.shape(), dpw).expect("pointwise shape"),
        ));
        grads.push(Some(dbias.reshape(bias.shape()).expect("bias shape")));
        grads.push(Some(Tensor::channel_vector(dgamma).expect("c >= 1")));
        grads.push(Some(Tensor::channel_vector(dbeta).expect("c >= 1")));
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(dims: [usize; 4], r: &mut ChaCha8Rng) -> Tensor {
        let shape = Shape::from_array(dims).unwrap();
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec([1, 1, 2, 1], vec![0.5, 3.0]);
        assert_eq!(relu_forward(&pos), pos);

        let mut tape = Tape::new();
        let v = tape.param("x", Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]));
        let r = relu(&mut tape, v);
        let loss = tape
            .weighted_sum(r, Tensor::from_vec([1, 1, 1, 2], vec![5.0, 5.0]))
            .unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn conv2d_identity_and_ones() {
        let mut r = rng(1);
        let x = random([2, 3, 4, 3], &mut r);
        let mut eye = Tensor::zeros(Shape::new(1, 1, 3, 3).unwrap());
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &eye, (1, 1), Padding::Same).unwrap(), x);
        let ones = Tensor::filled(Shape::new(1, 3, 3, 1).unwrap(), 1.0);
        let k = Tensor::filled(Shape::new(3, 3, 1, 1).unwrap(), 1.0);
        let out = conv2d_forward(&ones, &k, (1, 1), Padding::Valid).unwrap();
        assert_eq!(out.data(), &[9.0]);
        assert!(matches!(
            conv2d_forward(&x, &k, (1, 1), Padding::Same),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn depthwise_delta_and_isolation() {
        let mut r = rng(2);
        let x = random([1, 4, 4, 2], &mut r);
        let mut delta = Tensor::zeros(Shape::new(3, 3, 2, 1).unwrap());
        for c in 0..2 {
            delta.data_mut()[(3 + 1) * 2 + c] = 1.0;
        }
        assert_eq!(
            depthwise_forward(&x, &delta, (1, 1), Padding::Same).unwrap(),
            x
        );

        let mut zeroed = x.clone();
        for row in zeroed.data_mut().chunks_exact_mut(2) {
            row[0] = 0.0;
        }
        let k = random([3, 3, 2, 1], &mut r);
        let out = depthwise_forward(&zeroed, &k, (2, 2), Padding::Same).unwrap();
        assert!(out.data().chunks_exact(2).all(|row| row[0] == 0.0));
        let bad = random([3, 3, 3, 1], &mut r);
        assert!(depthwise_forward(&x, &bad, (1, 1), Padding::Same).is_err());
    }

    #[test]
    fn pointwise_mixes_channels() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]);
        // columns (1,1) and (1,-1): kernel[ci][co]
        let k = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 1.0, 1.0, -1.0]);
        assert_eq!(pointwise_forward(&x, &k).unwrap().data(), &[3.0, -1.0]);
        let eye = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pointwise_forward(&x, &eye).unwrap(), x);
        let wrong = Tensor::from_vec([1, 1, 3, 1], vec![1.0; 3]);
        assert!(pointwise_forward(&x, &wrong).is_err());
    }

    #[test]
    fn softmax_cases() {
        let z = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 0.0]);
        assert_eq!(softmax_forward(&z).data(), &[0.5, 0.5]);
        let z = Tensor::from_vec([1, 1, 1, 3], vec![4.2; 3]);
        for v in softmax_forward(&z).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, v) in softmax_forward(&z).data().iter().enumerate() {
            assert!((v - ((j + 1) as f64).exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut r = rng(3);
        let x = random([4, 3, 3, 2], &mut r).map(|v| 3.0 * v + 1.5);
        let bn = BatchNormParams::new(2).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(rng(0));
        let xv = tape.constant(x.clone());
        let g = tape.param("g", bn.gamma.clone());
        let b = tape.param("b", bn.beta.clone());
        let y = batch_norm(&mut tape, &mut ctx, xv, g, b, &bn, "bn").unwrap();
        let y = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(2).cloned().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-8);
            // ε keeps the variance just under one
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
        let updates = ctx.take_updates();
        assert_eq!(updates.len(), 2);
        assert_eq!(updates[0].0, "bn.running_mean");
    }

    #[test]
    fn batch_norm_eval_identity_config() {
        let x = Tensor::from_vec([1, 1, 2, 1], vec![0.25, -4.0]);
        let bn = BatchNormParams::new(1).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let xv = tape.constant(x.clone());
        let g = tape.param("g", bn.gamma.clone());
        let b = tape.param("b", bn.beta.clone());
        let y = batch_norm(&mut tape, &mut ctx, xv, g, b, &bn, "bn").unwrap();
        for (a, v) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - v / (1.0 + BN_EPSILON).sqrt()).abs() < 1e-15);
        }
        assert!(ctx.take_updates().is_empty());
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::filled(Shape::new(1, 10, 10, 1).unwrap(), 2.0);
        for (mode, rate) in [(Mode::Train, 0.0), (Mode::Eval, 0.5), (Mode::Eval, 0.0)] {
            let mut tape = Tape::new();
            let mut ctx = if mode == Mode::Train {
                ForwardCtx::train(rng(1))
            } else {
                ForwardCtx::eval()
            };
            let v = tape.constant(x.clone());
            let y = dropout(&mut tape, &mut ctx, v, DropoutConfig::new(rate).unwrap()).unwrap();
            assert_eq!(tape.value(y), &x);
        }
        assert!(DropoutConfig::new(1.0).is_err());
        assert!(DropoutConfig::new(-0.1).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let x = Tensor::filled(Shape::new(1, 1000, 1000, 1).unwrap(), 1.0);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(rng(7));
        let v = tape.constant(x);
        let y = dropout(&mut tape, &mut ctx, v, DropoutConfig::new(0.2).unwrap()).unwrap();
        let mean = tape.value(y).sum() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::filled(Shape::new(3, 1, 1, 10).unwrap(), 0.7));
        let loss = cross_entropy(&mut tape, z, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).item() - 10f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&mut tape, z, &[0, 4, 10]).is_err());
    }

    #[test]
    fn separable_unit_parameter_count() {
        let mut r = rng(4);
        let sep =
            ConvUnitParams::init(ConvKind::Separable, (3, 3), 64, 64, (1, 1), &mut r).unwrap();
        let std = ConvUnitParams::init(ConvKind::Standard, (3, 3), 64, 64, (1, 1), &mut r).unwrap();
        assert_eq!(sep.count_parameters(), 576 + 4096 + 64 + 128);
        assert_eq!(std.count_parameters(), 36864 + 64 + 128);
        assert_eq!(sep.conv.count_parameters(), 640 + 4096);
    }

    #[test]
    fn even_kernel_rejected_for_same_padding() {
        let mut r = rng(5);
        assert!(ConvParams::init(
            ConvKind::Separable,
            (2, 3),
            1,
            1,
            (1, 1),
            Padding::Same,
            &mut r
        )
        .is_err());
        assert!(ConvParams::init(
            ConvKind::Standard,
            (4, 1),
            1,
            1,
            (1, 1),
            Padding::Valid,
            &mut r
        )
        .is_ok());
    }

    #[test]
    fn fused_unit_matches_composition() {
        let mut r = rng(6);
        let a = random([2, 5, 4, 3], &mut r);
        let b = random([2, 5, 4, 2], &mut r);
        for (stride, out_dims) in [((2, 2), [2, 3, 2, 4]), ((1, 1), [2, 5, 4, 4])] {
            let mut p =
                ConvUnitParams::init(ConvKind::Separable, (3, 3), 5, 4, stride, &mut r).unwrap();
            p.conv.bias = random([1, 1, 1, 4], &mut r);
            p.bn.gamma = random([1, 1, 1, 4], &mut r);
            p.bn.beta = random([1, 1, 1, 4], &mut r);
            let w = random(out_dims, &mut r);
            for mode in [Mode::Train, Mode::Eval] {
                let run = |fused: bool| {
                    let mut tape = Tape::new();
                    let mut ctx = if mode == Mode::Train {
                        ForwardCtx::train(rng(0))
                    } else {
                        ForwardCtx::eval()
                    };
                    let va = tape.param("a", a.clone());
                    let vb = tape.param("b", b.clone());
                    let y = if fused {
                        conv_unit(&mut tape, &mut ctx, &[va, vb], &p, "u").unwrap()
                    } else {
                        conv_unit_composed(&mut tape, &mut ctx, &[va, vb], &p, "u").unwrap()
                    };
                    let out = tape.value(y).clone();
                    let loss = tape.weighted_sum(y, w.clone()).unwrap();
                    (out, tape.backward(loss).unwrap(), ctx.take_updates())
                };
                let (yf, gf, uf) = run(true);
                let (yc, gc, uc) = run(false);
                assert!(yf.max_abs_diff(&yc) < 1e-12);
                assert_eq!(gf.len(), gc.len());
                for (path, g) in gf.iter() {
                    let other = gc.get(path).unwrap();
                    assert!(g.max_abs_diff(other) < 1e-10, "{path}");
                }
                assert_eq!(uf.len(), uc.len());
                for ((pf, tf), (pc, tc)) in uf.iter().zip(&uc) {
                    assert_eq!(pf, pc);
                    assert!(tf.max_abs_diff(tc) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn separable_unit_gradient_check() {
        let mut r = rng(8);
        let a = random([2, 5, 6, 3], &mut r);
        let b = random([2, 5, 6, 2], &mut r);
        for stride in [(1, 1), (2, 2)] {
            let unit =
                ConvUnitParams::init(ConvKind::Separable, (3, 3), 5, 4, stride, &mut r).unwrap();
            let g = unit.conv.geometry(a.shape()).unwrap();
            let w = random([2, g.out_h, g.out_w, 4], &mut r);
            let mut params = crate::params::ParamMap::new();
            params.insert("a", a.clone(), ParamKind::Kernel);
            params.insert("b", b.clone(), ParamKind::Kernel);
            unit.visit("u", &mut |path, t, kind| {
                params.insert(path, t.clone(), kind)
            });
            let err = crate::autograd::finite_difference_check(&params, 1e-5, |tape, p| {
                let mut u = unit.clone();
                u.visit_mut("u", &mut |path, t, _| *t = p.get(path).unwrap().clone());
                let va = tape.param("a", p.get("a").unwrap().clone());
                let vb = tape.param("b", p.get("b").unwrap().clone());
                let y = conv_unit(tape, &mut ForwardCtx::eval(), &[va, vb], &u, "u")?;
                tape.weighted_sum(y, w.clone())
            })
            .unwrap();
            assert!(err < 1e-6, "stride {stride:?}: {err}");
        }
    }
}
