//! Forward and backward passes for the layer zoo: 2D convolution,
//! transposed convolution, batch normalization, rectifier, and the
//! stride-1 "same" max pool used for peak extraction.
//!
//! Layouts: activations `[N, C, H, W]`, conv weights `[Cout, Cin, k, k]`,
//! transposed-conv weights `[Cin, Cout, k, k]`. All accumulations run in a
//! fixed order per output element, so results are bit-stable regardless of
//! the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::tensor::Tensor;

fn check_4d(x: &Tensor, what: &str) -> Result<()> {
    if x.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: format!("{what}: rank-4 tensor"),
            got: format!("rank-{}", x.shape().len()),
        });
    }
    Ok(())
}

/// Output spatial size for a convolution along one axis.
#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Output spatial size for a transposed convolution along one axis.
#[inline]
pub fn tconv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> usize {
    (input - 1) * stride + kernel + output_padding - 2 * padding
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_4d(x, "conv input")?;
    check_4d(weight, "conv weight")?;
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, k, k2) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin || k != k2 || bias.numel() != cout {
        return Err(Error::ShapeMismatch {
            expected: format!("weight [Cout, {cin}, k, k], bias [Cout]"),
            got: format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        });
    }
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    let mut y = Tensor::zeros(&[n, cout, ho, wo]);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let plane_out = ho * wo;
    let plane_in = h * w;
    y.data_mut()
        .par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, out)| {
            let ni = idx / cout;
            let co = idx % cout;
            out.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * plane_in;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[((co * cin + ci) * k + kh) * k + kw];
                        for oh in 0..ho {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * w;
                            let orow = oh * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                out[orow + ow] += wv * xd[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        });
    Ok(y)
}

/// Gradients of `conv2d_forward` w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, k, _) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let plane_in = h * w;
    let plane_out = ho * wo;

    // weight and bias gradients, parallel over output channels
    let mut dweight = Tensor::zeros(&[cout, cin, k, k]);
    let mut dbias = Tensor::zeros(&[cout]);
    let dw_chunk = cin * k * k;
    dweight
        .data_mut()
        .par_chunks_mut(dw_chunk)
        .zip(dbias.data_mut().par_iter_mut())
        .enumerate()
        .for_each(|(co, (dwc, dbc))| {
            for ni in 0..n {
                let dybase = (ni * cout + co) * plane_out;
                for ci in 0..cin {
                    let xbase = (ni * cin + ci) * plane_in;
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = 0.0;
                            for oh in 0..ho {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + ih as usize * w;
                                let dyrow = dybase + oh * wo;
                                for ow in 0..wo {
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    acc += dyd[dyrow + ow] * xd[xrow + iw as usize];
                                }
                            }
                            dwc[(ci * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
            *dbc = (0..n)
                .map(|ni| {
                    let base = (ni * cout + co) * plane_out;
                    dyd[base..base + plane_out].iter().sum::<f64>()
                })
                .sum();
        });

    // input gradient, parallel over (n, ci) planes
    let mut dx = Tensor::zeros(&[n, cin, h, w]);
    dx.data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dxp)| {
            let ni = idx / cin;
            let ci = idx % cin;
            for co in 0..cout {
                let dybase = (ni * cout + co) * plane_out;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[((co * cin + ci) * k + kh) * k + kw];
                        for oh in 0..ho {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let dxrow = ih as usize * w;
                            let dyrow = dybase + oh * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dxp[dxrow + iw as usize] += wv * dyd[dyrow + ow];
                            }
                        }
                    }
                }
            }
        });
    (dx, dweight, dbias)
}

pub fn tconv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    check_4d(x, "tconv input")?;
    check_4d(weight, "tconv weight")?;
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wcin, cout, k, k2) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin || k != k2 || bias.numel() != cout {
        return Err(Error::ShapeMismatch {
            expected: format!("weight [{cin}, Cout, k, k], bias [Cout]"),
            got: format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        });
    }
    let ho = tconv_out_dim(h, k, stride, padding, output_padding);
    let wo = tconv_out_dim(w, k, stride, padding, output_padding);
    let mut y = Tensor::zeros(&[n, cout, ho, wo]);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    y.data_mut()
        .par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, out)| {
            let ni = idx / cout;
            let co = idx % cout;
            out.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * plane_in;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[((ci * cout + co) * k + kh) * k + kw];
                        for ih in 0..h {
                            let oh = (ih * stride + kh) as isize - padding as isize;
                            if oh < 0 || oh >= ho as isize {
                                continue;
                            }
                            let xrow = xbase + ih * w;
                            let orow = oh as usize * wo;
                            for iw in 0..w {
                                let ow = (iw * stride + kw) as isize - padding as isize;
                                if ow < 0 || ow >= wo as isize {
                                    continue;
                                }
                                out[orow + ow as usize] += wv * xd[xrow + iw];
                            }
                        }
                    }
                }
            }
        });
    Ok(y)
}

/// Gradients of `tconv2d_forward` w.r.t. input, weight, and bias.
pub fn tconv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, cout, k, _) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let plane_in = h * w;
    let plane_out = ho * wo;

    let mut dweight = Tensor::zeros(&[cin, cout, k, k]);
    let dw_chunk = cout * k * k;
    dweight
        .data_mut()
        .par_chunks_mut(dw_chunk)
        .enumerate()
        .for_each(|(ci, dwc)| {
            for ni in 0..n {
                let xbase = (ni * cin + ci) * plane_in;
                for co in 0..cout {
                    let dybase = (ni * cout + co) * plane_out;
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = 0.0;
                            for ih in 0..h {
                                let oh = (ih * stride + kh) as isize - padding as isize;
                                if oh < 0 || oh >= ho as isize {
                                    continue;
                                }
                                let xrow = xbase + ih * w;
                                let dyrow = dybase + oh as usize * wo;
                                for iw in 0..w {
                                    let ow = (iw * stride + kw) as isize - padding as isize;
                                    if ow < 0 || ow >= wo as isize {
                                        continue;
                                    }
                                    acc += xd[xrow + iw] * dyd[dyrow + ow as usize];
                                }
                            }
                            dwc[(co * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
        });

    let mut dbias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut acc = 0.0;
        for ni in 0..n {
            let base = (ni * cout + co) * plane_out;
            acc += dyd[base..base + plane_out].iter().sum::<f64>();
        }
        dbias.data_mut()[co] = acc;
    }

    let mut dx = Tensor::zeros(&[n, cin, h, w]);
    dx.data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dxp)| {
            let ni = idx / cin;
            let ci = idx % cin;
            for co in 0..cout {
                let dybase = (ni * cout + co) * plane_out;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[((ci * cout + co) * k + kh) * k + kw];
                        for ih in 0..h {
                            let oh = (ih * stride + kh) as isize - padding as isize;
                            if oh < 0 || oh >= ho as isize {
                                continue;
                            }
                            let dyrow = dybase + oh as usize * wo;
                            let dxrow = ih * w;
                            for iw in 0..w {
                                let ow = (iw * stride + kw) as isize - padding as isize;
                                if ow < 0 || ow >= wo as isize {
                                    continue;
                                }
                                dxp[dxrow + iw] += wv * dyd[dyrow + ow as usize];
                            }
                        }
                    }
                }
            }
        });
    (dx, dweight, dbias)
}

/// Per-channel batch statistics cached for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batch normalization over `(N, H, W)` per channel.
pub fn batchnorm2d_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    check_4d(x, "batchnorm input")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("gamma/beta of length {c}"),
            got: format!("{}/{}", gamma.len(), beta.len()),
        });
    }
    let m = (n * h * w) as f64;
    let plane = h * w;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            acc += xd[base..base + plane].iter().sum::<f64>();
        }
        mean[ci] = acc / m;
        let mut acc2 = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            acc2 += xd[base..base + plane]
                .iter()
                .map(|v| {
                    let d = v - mean[ci];
                    d * d
                })
                .sum::<f64>();
        }
        var[ci] = acc2 / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let xh = xhat.data_mut();
        let yd = y.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
                for i in base..base + plane {
                    let xv = (xd[i] - mu) * is;
                    xh[i] = xv;
                    yd[i] = g * xv + b;
                }
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Inference-mode batch normalization using running statistics.
pub fn batchnorm2d_infer(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    check_4d(x, "batchnorm input")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let is = 1.0 / (running_var[ci] + eps).sqrt();
            let (mu, g, b) = (running_mean[ci], gamma[ci], beta[ci]);
            for i in base..base + plane {
                yd[i] = g * (xd[i] - mu) * is + b;
            }
        }
    }
    Ok(y)
}

/// Gradients of training-mode batch normalization.
pub fn batchnorm2d_backward(
    cache: &BnCache,
    gamma: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (
        dy.shape()[0],
        dy.shape()[1],
        dy.shape()[2],
        dy.shape()[3],
    );
    let plane = h * w;
    let m = (n * h * w) as f64;
    let dyd = dy.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let mut dg = 0.0;
        let mut db = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                dg += dyd[i] * xh[i];
                db += dyd[i];
            }
        }
        dgamma[ci] = dg;
        dbeta[ci] = db;
    }
    let mut dx = Tensor::zeros(dy.shape());
    let dxd = dx.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let coeff = gamma[ci] * cache.inv_std[ci] / m;
            let (sg, sb) = (dgamma[ci], dbeta[ci]);
            for i in base..base + plane {
                dxd[i] = coeff * (m * dyd[i] - sb - xh[i] * sg);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    y
}

/// Routes gradient through positive forward inputs only; exact 0 blocks.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Stride-1 "same" max pooling over `[C, H, W]` with an odd kernel
/// (padding `kernel / 2`, out-of-range treated as -inf).
pub fn maxpool2d_forward(x: &Tensor, kernel: usize) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            expected: "rank-3 [C, H, W]".into(),
            got: format!("rank-{}", x.shape().len()),
        });
    }
    debug_assert!(kernel % 2 == 1);
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let r = (kernel / 2) as isize;
    let mut y = Tensor::zeros(&[c, h, w]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        let base = ci * h * w;
        for hi in 0..h {
            for wi in 0..w {
                let mut best = f64::NEG_INFINITY;
                let h0 = (hi as isize - r).max(0) as usize;
                let h1 = ((hi as isize + r) as usize).min(h - 1);
                let w0 = (wi as isize - r).max(0) as usize;
                let w1 = ((wi as isize + r) as usize).min(w - 1);
                for hh in h0..=h1 {
                    let row = base + hh * w;
                    for ww in w0..=w1 {
                        let v = xd[row + ww];
                        if v > best {
                            best = v;
                        }
                    }
                }
                yd[base + hi * w + wi] = best;
            }
        }
    }
    Ok(y)
}
