//! 2-D convolution with hand-derived backward pass.
//!
//! Valid convolution by default; `pad = 1` zero-pads one pixel on each side.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn check_dims(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let ishape = input.shape();
    let kshape = kernels.shape();
    if ishape.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "conv2d input must be C_in x H x W, got {:?}",
            ishape
        )));
    }
    if kshape.len() != 4 || kshape[2] != kshape[3] {
        return Err(Error::InvalidInput(format!(
            "conv2d kernels must be C_out x C_in x k x k, got {:?}",
            kshape
        )));
    }
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, k) = (kshape[0], kshape[2]);
    if kshape[1] != c_in {
        return Err(Error::InvalidInput(format!(
            "kernel C_in {} does not match input C_in {}",
            kshape[1], c_in
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::InvalidInput(format!(
            "bias must have shape [{}], got {:?}",
            c_out,
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be positive".into()));
    }
    if pad > 1 {
        return Err(Error::InvalidInput("padding must be 0 or 1".into()));
    }
    if k > h || k > w {
        return Err(Error::InvalidInput(format!(
            "kernel size {} exceeds input {}x{}",
            k, h, w
        )));
    }
    let h_out = (h - k + 2 * pad) / stride + 1;
    let w_out = (w - k + 2 * pad) / stride + 1;
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k,
        h_out,
        w_out,
    })
}

// Range of output columns whose input column ox*stride + kx - pad lies in [0, w).
fn ox_range(kx: usize, pad: usize, stride: usize, w: usize, w_out: usize) -> (usize, usize) {
    let lo = if kx < pad {
        (pad - kx).div_ceil(stride)
    } else {
        0
    };
    let hi_num = w + pad;
    let hi = if hi_num > kx + 1 {
        (((hi_num - kx - 1) / stride) + 1).min(w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Convolve `input` (C_in x H x W) with `kernels` (C_out x C_in x k x k),
/// adding one bias per output channel.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let d = check_dims(input, kernels, bias, stride, pad)?;
    let x = input.data();
    let ker = kernels.data();
    let b = bias.data();
    let mut out = vec![0.0f64; d.c_out * d.h_out * d.w_out];

    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h * d.w;
    for co in 0..d.c_out {
        out[co * plane_out..(co + 1) * plane_out].fill(b[co]);
        for ci in 0..d.c_in {
            let xin = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = ker[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (lo, hi) = ox_range(kx, pad, stride, d.w, d.w_out);
                    for oy in 0..d.h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row_in = iy as usize * d.w;
                        let row_out = co * plane_out + oy * d.w_out;
                        for ox in lo..hi {
                            let ix = ox * stride + kx - pad;
                            out[row_out + ox] += wgt * xin[row_in + ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[d.c_out, d.h_out, d.w_out], out)
}

/// Backward pass of [`conv2d`]: gradients with respect to the input,
/// the kernels, and the bias, given the gradient at the output.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = check_dims(input, kernels, bias, stride, pad)?;
    if grad_out.shape() != [d.c_out, d.h_out, d.w_out] {
        return Err(Error::InvalidInput(format!(
            "grad_out shape {:?} does not match output [{}, {}, {}]",
            grad_out.shape(),
            d.c_out,
            d.h_out,
            d.w_out
        )));
    }
    let x = input.data();
    let ker = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![0.0f64; x.len()];
    let mut gk = vec![0.0f64; ker.len()];
    let mut gb = vec![0.0f64; d.c_out];

    let plane_out = d.h_out * d.w_out;
    let plane_in = d.h * d.w;
    for co in 0..d.c_out {
        gb[co] = g[co * plane_out..(co + 1) * plane_out].iter().sum();
        for ci in 0..d.c_in {
            let xin = &x[ci * plane_in..(ci + 1) * plane_in];
            let gxin = &mut gx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let kidx = ((co * d.c_in + ci) * d.k + ky) * d.k + kx;
                    let wgt = ker[kidx];
                    let mut wsum = 0.0;
                    let (lo, hi) = ox_range(kx, pad, stride, d.w, d.w_out);
                    for oy in 0..d.h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row_in = iy as usize * d.w;
                        let row_out = co * plane_out + oy * d.w_out;
                        for ox in lo..hi {
                            let ix = ox * stride + kx - pad;
                            let go = g[row_out + ox];
                            wsum += go * xin[row_in + ix];
                            gxin[row_in + ix] += wgt * go;
                        }
                    }
                    gk[kidx] += wsum;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), gx)?,
        Tensor::from_vec(kernels.shape(), gk)?,
        Tensor::from_vec(&[d.c_out], gb)?,
    ))
}
