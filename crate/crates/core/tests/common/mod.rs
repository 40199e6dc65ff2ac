//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use intensivenet::tensor::{Padding, Shape, Tensor};

/// Output length and leading pad of one spatial axis, from first principles.
pub fn axis(input: usize, k: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (k <= input).then(|| ((input - k) / s + 1, 0)),
    }
}

/// Direct six-loop convolution; `kernel` is `(kh, kw, c_in, c_out)`.
pub fn naive_conv(
    x: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Option<Tensor> {
    let s = x.shape();
    let k = kernel.shape();
    let (oh, pt) = axis(s.h, k.n, stride.0, padding)?;
    let (ow, pl) = axis(s.w, k.h, stride.1, padding)?;
    let mut out = Tensor::zeros(Shape::new(s.n, oh, ow, k.c).unwrap());
    for n in 0..s.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..k.c {
                    let mut acc = 0.0;
                    for ky in 0..k.n {
                        for kx in 0..k.h {
                            let iy = (oy * stride.0 + ky) as isize - pt as isize;
                            let ix = (ox * stride.1 + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            for ci in 0..s.c {
                                acc += x.at(n, iy as usize, ix as usize, ci)
                                    * kernel.at(ky, kx, ci, co);
                            }
                        }
                    }
                    let i = out.shape().offset(n, oy, ox, co);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    Some(out)
}

/// Direct depthwise convolution; `kernel` is `(kh, kw, c, 1)`.
pub fn naive_depthwise(
    x: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Option<Tensor> {
    let s = x.shape();
    let k = kernel.shape();
    let (oh, pt) = axis(s.h, k.n, stride.0, padding)?;
    let (ow, pl) = axis(s.w, k.h, stride.1, padding)?;
    let mut out = Tensor::zeros(Shape::new(s.n, oh, ow, s.c).unwrap());
    for n in 0..s.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..s.c {
                    let mut acc = 0.0;
                    for ky in 0..k.n {
                        for kx in 0..k.h {
                            let iy = (oy * stride.0 + ky) as isize - pt as isize;
                            let ix = (ox * stride.1 + kx) as isize - pl as isize;
                            if iy >= 0 && ix >= 0 && iy < s.h as isize && ix < s.w as isize {
                                acc +=
                                    x.at(n, iy as usize, ix as usize, c) * kernel.at(ky, kx, c, 0);
                            }
                        }
                    }
                    let i = out.shape().offset(n, oy, ox, c);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    Some(out)
}

/// Direct 1×1 channel mixing.
pub fn naive_pointwise(x: &Tensor, kernel: &Tensor) -> Tensor {
    let s = x.shape();
    let k = kernel.shape();
    let mut out = Tensor::zeros(Shape { c: k.c, ..s });
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                for co in 0..k.c {
                    let acc: f64 = (0..s.c)
                        .map(|ci| x.at(n, y, xx, ci) * kernel.at(0, 0, ci, co))
                        .sum();
                    let i = out.shape().offset(n, y, xx, co);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

/// Deterministic pseudo-random tensor in `[-1, 1]` (a tiny LCG so the
/// oracle shares no code with the crate's RNG plumbing).
pub fn lcg_tensor(dims: [usize; 4], seed: u64) -> Tensor {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Tensor::from_fn(
        Shape::new(dims[0], dims[1], dims[2], dims[3]).unwrap(),
        |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        },
    )
}

/// Closed-form channel widths through one intensive block built from two
/// dense blocks of `c` layers with growth `g` and compression `theta`.
pub fn intensive_trace(input: usize, c: usize, g: usize, theta: f64) -> [usize; 7] {
    let compress = |k: usize| (theta * k as f64).floor() as usize;
    let fd1 = input + c * g;
    let fd2 = fd1 + c * g;
    let fc1 = compress(fd2);
    let fc2 = fc1 + fd1;
    let fc3 = compress(fc2);
    let fc4 = fc3 + input;
    [fd1, fd2, fc1, fc2, fc3, fc4, compress(fc4)]
}
