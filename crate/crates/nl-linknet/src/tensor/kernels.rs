//! Forward and backward compute kernels.
//!
//! Every kernel writes each output element exactly once (or accumulates
//! into a chunk owned by a single task) with a fixed inner loop order, so
//! results do not depend on the thread count. Backward kernels receive the
//! upstream gradient and add into caller-provided accumulators.

use super::data::Tensor;
use super::scalar::Scalar;
use super::shape::{ConvSpec, PoolSpec, Shape};
use crate::error::{Error, Result};
use crate::exec::{for_each_chunk_mut, map_indexed};

/// Valid output index range `[lo, hi)` such that
/// `0 <= o * stride + offset < in_len` and `o < out_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_num = in_len as isize - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = hi_num as usize / stride + 1;
    (lo.min(out_len), hi.min(out_len))
}

fn check_weight_shape(weight: Shape, expect: Shape, what: &str) -> Result<()> {
    if weight != expect {
        return Err(Error::Shape(format!(
            "{what} weight shape {weight} does not match spec (expected {expect})"
        )));
    }
    Ok(())
}

fn check_bias<E: Scalar>(bias: Option<&Tensor<E>>, spec: &ConvSpec, out_c: usize) -> Result<()> {
    match (spec.bias, bias) {
        (true, Some(b)) => {
            if b.shape() != Shape::chan(out_c) {
                return Err(Error::Shape(format!(
                    "bias shape {} expected {}",
                    b.shape(),
                    Shape::chan(out_c)
                )));
            }
            Ok(())
        }
        (false, None) => Ok(()),
        _ => Err(Error::Shape(
            "bias presence does not match conv spec".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation)
// ---------------------------------------------------------------------------

pub fn conv2d<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    spec.validate()?;
    let (n, ci, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    if ci != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv2d input has {ci} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let co = spec.out_channels;
    let (kh, kw) = spec.kernel;
    check_weight_shape(weight.shape(), Shape::new(co, ci, kh, kw), "conv2d")?;
    check_bias(bias, spec, co)?;
    let (oh, ow) = spec.conv_output(h, w)?;

    let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
    let x = input.data();
    let wd = weight.data();
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation);

    for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, out_plane| {
        let b = plane_idx / co;
        let oc = plane_idx % co;
        for ic in 0..ci {
            let x_plane = &x[(b * ci + ic) * h * w..][..h * w];
            for ky in 0..kh {
                let off_h = (ky * d) as isize - p;
                let (oh_lo, oh_hi) = valid_range(oh, h, s, off_h);
                for kx in 0..kw {
                    let wv = wd[((oc * ci + ic) * kh + ky) * kw + kx];
                    let off_w = (kx * d) as isize - p;
                    let (ow_lo, ow_hi) = valid_range(ow, w, s, off_w);
                    for oy in oh_lo..oh_hi {
                        let iy = (oy * s) as isize + off_h;
                        let x_row = &x_plane[iy as usize * w..][..w];
                        let o_row = &mut out_plane[oy * ow..][..ow];
                        if s == 1 {
                            for ox in ow_lo..ow_hi {
                                o_row[ox] += wv * x_row[(ox as isize + off_w) as usize];
                            }
                        } else {
                            for ox in ow_lo..ow_hi {
                                o_row[ox] += wv * x_row[((ox * s) as isize + off_w) as usize];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b_t) = bias {
            let bv = b_t.data()[oc];
            for v in out_plane.iter_mut() {
                *v += bv;
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<E: Scalar> {
    /// `None` when the caller does not need the input gradient.
    pub input: Option<Tensor<E>>,
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

pub fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor<E>,
    need_input: bool,
) -> ConvGrads<E> {
    let (n, ci, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let co = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let (oh, ow) = (grad_out.shape().height(), grad_out.shape().width());
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation);
    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();

    let gin = need_input.then(|| {
        let mut gin = Tensor::zeros(input.shape());
        for_each_chunk_mut(gin.data_mut(), h * w, |plane_idx, gin_plane| {
            let b = plane_idx / ci;
            let ic = plane_idx % ci;
            for oc in 0..co {
                let g_plane = &g[(b * co + oc) * oh * ow..][..oh * ow];
                for ky in 0..kh {
                    let off_h = (ky * d) as isize - p;
                    let (oh_lo, oh_hi) = valid_range(oh, h, s, off_h);
                    for kx in 0..kw {
                        let wv = wd[((oc * ci + ic) * kh + ky) * kw + kx];
                        let off_w = (kx * d) as isize - p;
                        let (ow_lo, ow_hi) = valid_range(ow, w, s, off_w);
                        for oy in oh_lo..oh_hi {
                            let iy = ((oy * s) as isize + off_h) as usize;
                            let g_row = &g_plane[oy * ow..][..ow];
                            let gin_row = &mut gin_plane[iy * w..][..w];
                            for ox in ow_lo..ow_hi {
                                let ix = ((ox * s) as isize + off_w) as usize;
                                gin_row[ix] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        });
        gin
    });

    let mut gw = Tensor::zeros(weight.shape());
    for_each_chunk_mut(gw.data_mut(), ci * kh * kw, |oc, gw_chunk| {
        for b in 0..n {
            let g_plane = &g[(b * co + oc) * oh * ow..][..oh * ow];
            for ic in 0..ci {
                let x_plane = &x[(b * ci + ic) * h * w..][..h * w];
                for ky in 0..kh {
                    let off_h = (ky * d) as isize - p;
                    let (oh_lo, oh_hi) = valid_range(oh, h, s, off_h);
                    for kx in 0..kw {
                        let off_w = (kx * d) as isize - p;
                        let (ow_lo, ow_hi) = valid_range(ow, w, s, off_w);
                        let mut acc = E::zero();
                        for oy in oh_lo..oh_hi {
                            let iy = ((oy * s) as isize + off_h) as usize;
                            let x_row = &x_plane[iy * w..][..w];
                            let g_row = &g_plane[oy * ow..][..ow];
                            for ox in ow_lo..ow_hi {
                                let ix = ((ox * s) as isize + off_w) as usize;
                                acc += x_row[ix] * g_row[ox];
                            }
                        }
                        gw_chunk[(ic * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });

    let gb = has_bias.then(|| {
        let mut gb = Tensor::zeros(Shape::chan(co));
        for oc in 0..co {
            let mut acc = E::zero();
            for b in 0..n {
                for v in &g[(b * co + oc) * oh * ow..][..oh * ow] {
                    acc += *v;
                }
            }
            gb.data_mut()[oc] = acc;
        }
        gb
    });

    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}

// ---------------------------------------------------------------------------
// conv_transpose2d (fractionally strided / gradient-of-conv semantics)
// ---------------------------------------------------------------------------

/// Weight layout is `(in_channels, out_channels, kh, kw)`.
pub fn conv_transpose2d<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    spec.validate()?;
    let (n, ci, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    if ci != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv_transpose2d input has {ci} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let co = spec.out_channels;
    let (kh, kw) = spec.kernel;
    check_weight_shape(weight.shape(), Shape::new(ci, co, kh, kw), "conv_transpose2d")?;
    check_bias(bias, spec, co)?;
    let (oh, ow) = spec.conv_transpose_output(h, w)?;

    let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
    let x = input.data();
    let wd = weight.data();
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation);

    for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, out_plane| {
        let b = plane_idx / co;
        let oc = plane_idx % co;
        for ic in 0..ci {
            let x_plane = &x[(b * ci + ic) * h * w..][..h * w];
            for ky in 0..kh {
                let off_h = (ky * d) as isize - p;
                // input rows whose scattered row lands inside the output
                let (ih_lo, ih_hi) = valid_range(h, oh, s, off_h);
                for kx in 0..kw {
                    let wv = wd[((ic * co + oc) * kh + ky) * kw + kx];
                    let off_w = (kx * d) as isize - p;
                    let (iw_lo, iw_hi) = valid_range(w, ow, s, off_w);
                    for iy in ih_lo..ih_hi {
                        let oy = ((iy * s) as isize + off_h) as usize;
                        let x_row = &x_plane[iy * w..][..w];
                        let o_row = &mut out_plane[oy * ow..][..ow];
                        for ix in iw_lo..iw_hi {
                            let ox = ((ix * s) as isize + off_w) as usize;
                            o_row[ox] += wv * x_row[ix];
                        }
                    }
                }
            }
        }
        if let Some(b_t) = bias {
            let bv = b_t.data()[oc];
            for v in out_plane.iter_mut() {
                *v += bv;
            }
        }
    });
    Ok(out)
}

pub fn conv_transpose2d_backward<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor<E>,
    need_input: bool,
) -> ConvGrads<E> {
    let (n, ci, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let co = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let (oh, ow) = (grad_out.shape().height(), grad_out.shape().width());
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation);
    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();

    // Gradient w.r.t. input is an ordinary gather convolution of grad_out.
    let gin = need_input.then(|| {
        let mut gin = Tensor::zeros(input.shape());
        for_each_chunk_mut(gin.data_mut(), h * w, |plane_idx, gin_plane| {
            let b = plane_idx / ci;
            let ic = plane_idx % ci;
            for oc in 0..co {
                let g_plane = &g[(b * co + oc) * oh * ow..][..oh * ow];
                for ky in 0..kh {
                    let off_h = (ky * d) as isize - p;
                    let (ih_lo, ih_hi) = valid_range(h, oh, s, off_h);
                    for kx in 0..kw {
                        let wv = wd[((ic * co + oc) * kh + ky) * kw + kx];
                        let off_w = (kx * d) as isize - p;
                        let (iw_lo, iw_hi) = valid_range(w, ow, s, off_w);
                        for iy in ih_lo..ih_hi {
                            let oy = ((iy * s) as isize + off_h) as usize;
                            let g_row = &g_plane[oy * ow..][..ow];
                            let gin_row = &mut gin_plane[iy * w..][..w];
                            for ix in iw_lo..iw_hi {
                                let ox = ((ix * s) as isize + off_w) as usize;
                                gin_row[ix] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        });
        gin
    });

    let mut gw = Tensor::zeros(weight.shape());
    for_each_chunk_mut(gw.data_mut(), co * kh * kw, |ic, gw_chunk| {
        for b in 0..n {
            let x_plane = &x[(b * ci + ic) * h * w..][..h * w];
            for oc in 0..co {
                let g_plane = &g[(b * co + oc) * oh * ow..][..oh * ow];
                for ky in 0..kh {
                    let off_h = (ky * d) as isize - p;
                    let (ih_lo, ih_hi) = valid_range(h, oh, s, off_h);
                    for kx in 0..kw {
                        let off_w = (kx * d) as isize - p;
                        let (iw_lo, iw_hi) = valid_range(w, ow, s, off_w);
                        let mut acc = E::zero();
                        for iy in ih_lo..ih_hi {
                            let oy = ((iy * s) as isize + off_h) as usize;
                            let x_row = &x_plane[iy * w..][..w];
                            let g_row = &g_plane[oy * ow..][..ow];
                            for ix in iw_lo..iw_hi {
                                let ox = ((ix * s) as isize + off_w) as usize;
                                acc += x_row[ix] * g_row[ox];
                            }
                        }
                        gw_chunk[(oc * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });

    let gb = has_bias.then(|| {
        let mut gb = Tensor::zeros(Shape::chan(co));
        for oc in 0..co {
            let mut acc = E::zero();
            for b in 0..n {
                for v in &g[(b * co + oc) * oh * ow..][..oh * ow] {
                    acc += *v;
                }
            }
            gb.data_mut()[oc] = acc;
        }
        gb
    });

    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

pub struct PoolOut<E: Scalar> {
    pub output: Tensor<E>,
    /// Flat index (within the input plane) of the winning cell per output
    /// cell; `u32::MAX` when the window saw only padding.
    pub argmax: Vec<u32>,
}

pub fn maxpool2d<E: Scalar>(input: &Tensor<E>, spec: &PoolSpec) -> Result<PoolOut<E>> {
    let (n, c, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let (oh, ow) = spec.output(h, w)?;
    let x = input.data();
    let (kh, kw) = spec.window;
    let (s, p) = (spec.stride, spec.padding as isize);

    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let mut argmax = vec![u32::MAX; n * c * oh * ow];
    // Fill output and argmax plane by plane; the two buffers share chunk
    // geometry so one pass drives both via the index.
    let planes: Vec<(Vec<E>, Vec<u32>)> = map_indexed(n * c, |plane_idx| {
        let x_plane = &x[plane_idx * h * w..][..h * w];
        let mut o_plane = vec![E::zero(); oh * ow];
        let mut a_plane = vec![u32::MAX; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = E::neg_infinity();
                let mut best_idx = u32::MAX;
                for ky in 0..kh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * s + kx) as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = x_plane[idx];
                        // first index wins on ties
                        if best_idx == u32::MAX || v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                o_plane[oy * ow + ox] = if best_idx == u32::MAX { E::zero() } else { best };
                a_plane[oy * ow + ox] = best_idx;
            }
        }
        (o_plane, a_plane)
    });
    for (i, (o_plane, a_plane)) in planes.into_iter().enumerate() {
        out.data_mut()[i * oh * ow..][..oh * ow].copy_from_slice(&o_plane);
        argmax[i * oh * ow..][..oh * ow].copy_from_slice(&a_plane);
    }
    Ok(PoolOut {
        output: out,
        argmax,
    })
}

pub fn maxpool2d_backward<E: Scalar>(
    input_shape: Shape,
    argmax: &[u32],
    grad_out: &Tensor<E>,
) -> Tensor<E> {
    let (h, w) = (input_shape.height(), input_shape.width());
    let plane_out = grad_out.shape().height() * grad_out.shape().width();
    let g = grad_out.data();
    let mut gin = Tensor::zeros(input_shape);
    for_each_chunk_mut(gin.data_mut(), h * w, |plane_idx, gin_plane| {
        let g_plane = &g[plane_idx * plane_out..][..plane_out];
        let a_plane = &argmax[plane_idx * plane_out..][..plane_out];
        for (gv, &a) in g_plane.iter().zip(a_plane) {
            if a != u32::MAX {
                gin_plane[a as usize] += *gv;
            }
        }
    });
    gin
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

pub struct BnForward<E: Scalar> {
    pub output: Tensor<E>,
    /// Per-channel batch mean and `1/sqrt(var + eps)` saved for backward.
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
    /// Updated running statistics (momentum applied).
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

fn bn_check<E: Scalar>(input: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<()> {
    let c = input.shape().channels();
    if gamma.shape() != Shape::chan(c) || beta.shape() != Shape::chan(c) {
        return Err(Error::Shape(format!(
            "batchnorm parameters must have shape {}, got gamma {} beta {}",
            Shape::chan(c),
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

pub fn batchnorm2d_train<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
    momentum: f64,
) -> Result<BnForward<E>> {
    bn_check(input, gamma, beta)?;
    let (n, c, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let count = n * h * w;
    if count == 0 {
        return Err(Error::Config(
            "batchnorm over zero batch x spatial elements".into(),
        ));
    }
    let x = input.data();
    let plane = h * w;
    let inv_count = E::from_f64_lossy(1.0 / count as f64);
    let eps_e = E::from_f64_lossy(eps);

    let stats: Vec<(E, E)> = map_indexed(c, |ch| {
        let mut sum = E::zero();
        let mut sq = E::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * plane..][..plane] {
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum * inv_count;
        let var = (sq * inv_count - mean * mean).max(E::zero());
        (mean, var)
    });

    let mean: Vec<E> = stats.iter().map(|s| s.0).collect();
    let var: Vec<E> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<E> = var.iter().map(|&v| (v + eps_e).sqrt().recip()).collect();

    let mut out = Tensor::zeros(input.shape());
    let g = gamma.data();
    let bta = beta.data();
    for_each_chunk_mut(out.data_mut(), plane, |plane_idx, o_plane| {
        let ch = plane_idx % c;
        let scale = g[ch] * inv_std[ch];
        let shift = bta[ch] - mean[ch] * scale;
        let x_plane = &x[plane_idx * plane..][..plane];
        for (o, &v) in o_plane.iter_mut().zip(x_plane) {
            *o = v * scale + shift;
        }
    });

    // Running stats use the unbiased variance, matching the usual
    // framework convention.
    let m = E::from_f64_lossy(momentum);
    let one_m = E::one() - m;
    let unbias = if count > 1 {
        E::from_f64_lossy(count as f64 / (count as f64 - 1.0))
    } else {
        E::one()
    };
    let mut rm = running_mean.clone();
    let mut rv = running_var.clone();
    for ch in 0..c {
        rm.data_mut()[ch] = one_m * running_mean.data()[ch] + m * mean[ch];
        rv.data_mut()[ch] = one_m * running_var.data()[ch] + m * var[ch] * unbias;
    }

    Ok(BnForward {
        output: out,
        mean,
        inv_std,
        running_mean: rm,
        running_var: rv,
    })
}

pub fn batchnorm2d_eval<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    bn_check(input, gamma, beta)?;
    let c = input.shape().channels();
    let plane = input.shape().height() * input.shape().width();
    if plane * input.shape().batch() == 0 {
        return Err(Error::Config(
            "batchnorm over zero batch x spatial elements".into(),
        ));
    }
    let eps_e = E::from_f64_lossy(eps);
    let x = input.data();
    let g = gamma.data();
    let bta = beta.data();
    let rm = running_mean.data();
    let rv = running_var.data();
    let mut out = Tensor::zeros(input.shape());
    for_each_chunk_mut(out.data_mut(), plane, |plane_idx, o_plane| {
        let ch = plane_idx % c;
        let inv = (rv[ch] + eps_e).sqrt().recip();
        let scale = g[ch] * inv;
        let shift = bta[ch] - rm[ch] * scale;
        let x_plane = &x[plane_idx * plane..][..plane];
        for (o, &v) in o_plane.iter_mut().zip(x_plane) {
            *o = v * scale + shift;
        }
    });
    Ok(out)
}

pub struct BnGrads<E: Scalar> {
    pub input: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

pub fn batchnorm2d_train_backward<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    mean: &[E],
    inv_std: &[E],
    grad_out: &Tensor<E>,
) -> BnGrads<E> {
    let (n, c, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let plane = h * w;
    let count = n * plane;
    let inv_count = E::from_f64_lossy(1.0 / count as f64);
    let x = input.data();
    let g = grad_out.data();

    // Per-channel reductions: sum(dy) and sum(dy * xhat).
    let sums: Vec<(E, E)> = map_indexed(c, |ch| {
        let mu = mean[ch];
        let istd = inv_std[ch];
        let mut s_dy = E::zero();
        let mut s_dy_xhat = E::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            let xp = &x[base..][..plane];
            let gp = &g[base..][..plane];
            for (&xv, &gv) in xp.iter().zip(gp) {
                s_dy += gv;
                s_dy_xhat += gv * (xv - mu) * istd;
            }
        }
        (s_dy, s_dy_xhat)
    });

    let mut gin = Tensor::zeros(input.shape());
    let gm = gamma.data();
    for_each_chunk_mut(gin.data_mut(), plane, |plane_idx, gin_plane| {
        let ch = plane_idx % c;
        let (s_dy, s_dy_xhat) = sums[ch];
        let mu = mean[ch];
        let istd = inv_std[ch];
        let k = gm[ch] * istd;
        let mean_dy = s_dy * inv_count;
        let mean_dy_xhat = s_dy_xhat * inv_count;
        let xp = &x[plane_idx * plane..][..plane];
        let gp = &g[plane_idx * plane..][..plane];
        for ((o, &xv), &gv) in gin_plane.iter_mut().zip(xp).zip(gp) {
            let xhat = (xv - mu) * istd;
            *o = k * (gv - mean_dy - xhat * mean_dy_xhat);
        }
    });

    let mut ggamma = Tensor::zeros(Shape::chan(c));
    let mut gbeta = Tensor::zeros(Shape::chan(c));
    for ch in 0..c {
        ggamma.data_mut()[ch] = sums[ch].1;
        gbeta.data_mut()[ch] = sums[ch].0;
    }
    BnGrads {
        input: gin,
        gamma: ggamma,
        beta: gbeta,
    }
}

pub fn batchnorm2d_eval_backward<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
    grad_out: &Tensor<E>,
) -> BnGrads<E> {
    let (n, c, h, w) = {
        let s = input.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let plane = h * w;
    let eps_e = E::from_f64_lossy(eps);
    let x = input.data();
    let g = grad_out.data();
    let rm = running_mean.data();
    let rv = running_var.data();
    let gm = gamma.data();

    let mut gin = Tensor::zeros(input.shape());
    for_each_chunk_mut(gin.data_mut(), plane, |plane_idx, gin_plane| {
        let ch = plane_idx % c;
        let k = gm[ch] * (rv[ch] + eps_e).sqrt().recip();
        let gp = &g[plane_idx * plane..][..plane];
        for (o, &gv) in gin_plane.iter_mut().zip(gp) {
            *o = k * gv;
        }
    });

    let mut ggamma = Tensor::zeros(Shape::chan(c));
    let mut gbeta = Tensor::zeros(Shape::chan(c));
    for ch in 0..c {
        let inv = (rv[ch] + eps_e).sqrt().recip();
        let mut s_dy = E::zero();
        let mut s_dy_xhat = E::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for (&xv, &gv) in x[base..][..plane].iter().zip(&g[base..][..plane]) {
                s_dy += gv;
                s_dy_xhat += gv * (xv - rm[ch]) * inv;
            }
        }
        ggamma.data_mut()[ch] = s_dy_xhat;
        gbeta.data_mut()[ch] = s_dy;
    }
    BnGrads {
        input: gin,
        gamma: ggamma,
        beta: gbeta,
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn axis_geometry(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let dims = shape.0;
    let len = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let rows = shape.numel() / len.max(1);
    (len, stride, rows)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax<E: Scalar>(input: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if axis >= 4 {
        return Err(Error::Usage(format!("softmax axis {axis} out of range")));
    }
    let (len, stride, rows) = axis_geometry(input.shape(), axis);
    if len == 0 {
        return Err(Error::Shape("softmax along empty axis".into()));
    }
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let o = out.data_mut();
    // Rows are independent; only contiguous last-axis rows get chunked in
    // parallel, other axes go through the generic strided path serially per
    // row group (rows is small in practice for those).
    let row_values = map_indexed(rows, |r| {
        let pre = r / stride;
        let post = r % stride;
        let base = pre * len * stride + post;
        let mut maxv = E::neg_infinity();
        for k in 0..len {
            maxv = maxv.max(x[base + k * stride]);
        }
        let mut sum = E::zero();
        let mut vals = vec![E::zero(); len];
        for k in 0..len {
            let e = (x[base + k * stride] - maxv).exp();
            vals[k] = e;
            sum += e;
        }
        let inv = sum.recip();
        for v in vals.iter_mut() {
            *v = *v * inv;
        }
        vals
    });
    for (r, vals) in row_values.into_iter().enumerate() {
        let pre = r / stride;
        let post = r % stride;
        let base = pre * len * stride + post;
        for (k, v) in vals.into_iter().enumerate() {
            o[base + k * stride] = v;
        }
    }
    Ok(out)
}

/// `dx = y * (dy - sum(dy * y))` per row, where `y` is the forward output.
pub fn softmax_backward<E: Scalar>(output: &Tensor<E>, axis: usize, grad_out: &Tensor<E>) -> Tensor<E> {
    let (len, stride, rows) = axis_geometry(output.shape(), axis);
    let y = output.data();
    let g = grad_out.data();
    let mut gin = Tensor::zeros(output.shape());
    let gi = gin.data_mut();
    for r in 0..rows {
        let pre = r / stride;
        let post = r % stride;
        let base = pre * len * stride + post;
        let mut dot = E::zero();
        for k in 0..len {
            dot += g[base + k * stride] * y[base + k * stride];
        }
        for k in 0..len {
            let i = base + k * stride;
            gi[i] = y[i] * (g[i] - dot);
        }
    }
    gin
}

// ---------------------------------------------------------------------------
// batched matrix multiply
// ---------------------------------------------------------------------------

/// `(b, c, m, k) x (b, c, k, n) -> (b, c, m, n)`, every `(b, c)` slice an
/// independent matrix product.
pub fn batched_matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch() != sb.batch() || sa.channels() != sb.channels() || sa.width() != sb.height() {
        return Err(Error::Shape(format!(
            "batched_matmul shapes {sa} x {sb} do not chain"
        )));
    }
    let (m, k, nn) = (sa.height(), sa.width(), sb.width());
    let batches = sa.batch() * sa.channels();
    let ad = a.data();
    let bd = b.data();
    let mut out = Tensor::zeros(Shape::new(sa.batch(), sa.channels(), m, nn));
    for_each_chunk_mut(out.data_mut(), m * nn, |bc, o_plane| {
        let a_plane = &ad[bc * m * k..][..m * k];
        let b_plane = &bd[bc * k * nn..][..k * nn];
        for i in 0..m {
            let o_row = &mut o_plane[i * nn..][..nn];
            for p in 0..k {
                let av = a_plane[i * k + p];
                let b_row = &b_plane[p * nn..][..nn];
                for (ov, &bv) in o_row.iter_mut().zip(b_row) {
                    *ov += av * bv;
                }
            }
        }
    });
    debug_assert!(batches > 0 || out.numel() == 0);
    Ok(out)
}

pub fn batched_matmul_backward<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k, nn) = (sa.height(), sa.width(), sb.width());
    let ad = a.data();
    let bd = b.data();
    let g = grad_out.data();

    let mut ga = Tensor::zeros(sa);
    for_each_chunk_mut(ga.data_mut(), m * k, |bc, ga_plane| {
        let b_plane = &bd[bc * k * nn..][..k * nn];
        let g_plane = &g[bc * m * nn..][..m * nn];
        for i in 0..m {
            let g_row = &g_plane[i * nn..][..nn];
            for p in 0..k {
                let mut acc = E::zero();
                let b_row = &b_plane[p * nn..][..nn];
                for (&gv, &bv) in g_row.iter().zip(b_row) {
                    acc += gv * bv;
                }
                ga_plane[i * k + p] = acc;
            }
        }
    });

    let mut gb = Tensor::zeros(sb);
    for_each_chunk_mut(gb.data_mut(), k * nn, |bc, gb_plane| {
        let a_plane = &ad[bc * m * k..][..m * k];
        let g_plane = &g[bc * m * nn..][..m * nn];
        for i in 0..m {
            let g_row = &g_plane[i * nn..][..nn];
            for p in 0..k {
                let av = a_plane[i * k + p];
                let gb_row = &mut gb_plane[p * nn..][..nn];
                for (ov, &gv) in gb_row.iter_mut().zip(g_row) {
                    *ov += av * gv;
                }
            }
        }
    });
    (ga, gb)
}

// ---------------------------------------------------------------------------
// layout permutations
// ---------------------------------------------------------------------------

/// Swap the last two axes: `(b, c, m, n) -> (b, c, n, m)`.
pub fn transpose_mat<E: Scalar>(input: &Tensor<E>) -> Tensor<E> {
    let s = input.shape();
    let (m, n) = (s.height(), s.width());
    let x = input.data();
    let mut out = Tensor::zeros(Shape::new(s.batch(), s.channels(), n, m));
    for_each_chunk_mut(out.data_mut(), m * n, |bc, o_plane| {
        let x_plane = &x[bc * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                o_plane[j * m + i] = x_plane[i * n + j];
            }
        }
    });
    out
}

/// `(b, c, h, w) -> (b, 1, h*w, c)`: one row per spatial position.
pub fn nchw_to_positions<E: Scalar>(input: &Tensor<E>) -> Tensor<E> {
    let s = input.shape();
    let (b, c, h, w) = (s.batch(), s.channels(), s.height(), s.width());
    let plane = h * w;
    let x = input.data();
    let mut out = Tensor::zeros(Shape::new(b, 1, plane, c));
    for_each_chunk_mut(out.data_mut(), plane * c, |bi, o_mat| {
        for ch in 0..c {
            let x_plane = &x[(bi * c + ch) * plane..][..plane];
            for (pos, &v) in x_plane.iter().enumerate() {
                o_mat[pos * c + ch] = v;
            }
        }
    });
    out
}

/// Inverse of [`nchw_to_positions`].
pub fn positions_to_nchw<E: Scalar>(input: &Tensor<E>, c: usize, h: usize, w: usize) -> Tensor<E> {
    let s = input.shape();
    let b = s.batch();
    let plane = h * w;
    debug_assert_eq!(s.height(), plane);
    debug_assert_eq!(s.width(), c);
    let x = input.data();
    let mut out = Tensor::zeros(Shape::new(b, c, h, w));
    for_each_chunk_mut(out.data_mut(), plane * c, |bi, o_chunk| {
        let x_mat = &x[bi * plane * c..][..plane * c];
        for ch in 0..c {
            let o_plane = &mut o_chunk[ch * plane..][..plane];
            for (pos, o) in o_plane.iter_mut().enumerate() {
                *o = x_mat[pos * c + ch];
            }
        }
    });
    out
}

// ---------------------------------------------------------------------------
// elementwise and reductions
// ---------------------------------------------------------------------------

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add of mismatched shapes {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

/// Broadcast add of a `(1, c, 1, 1)` vector over all batch/spatial slots.
pub fn add_channel<E: Scalar>(a: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let c = a.shape().channels();
    if bias.shape() != Shape::chan(c) {
        return Err(Error::Shape(format!(
            "channel bias shape {} expected {}",
            bias.shape(),
            Shape::chan(c)
        )));
    }
    let plane = a.shape().height() * a.shape().width();
    let bd = bias.data();
    let mut out = a.clone();
    for_each_chunk_mut(out.data_mut(), plane, |plane_idx, o_plane| {
        let bv = bd[plane_idx % c];
        for o in o_plane.iter_mut() {
            *o += bv;
        }
    });
    Ok(out)
}

/// Reduce a full-shape gradient to the `(1, c, 1, 1)` bias layout.
pub fn reduce_to_channel<E: Scalar>(grad: &Tensor<E>) -> Tensor<E> {
    let s = grad.shape();
    let (n, c, plane) = (s.batch(), s.channels(), s.height() * s.width());
    let g = grad.data();
    let mut out = Tensor::zeros(Shape::chan(c));
    for ch in 0..c {
        let mut acc = E::zero();
        for b in 0..n {
            for &v in &g[(b * c + ch) * plane..][..plane] {
                acc += v;
            }
        }
        out.data_mut()[ch] = acc;
    }
    out
}

pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul of mismatched shapes {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= bv;
    }
    Ok(out)
}

pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.max(E::zero()))
}

pub fn sigmoid<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| E::one() / (E::one() + (-v).exp()))
}

pub fn scale<E: Scalar>(x: &Tensor<E>, c: E) -> Tensor<E> {
    x.map(|v| v * c)
}

pub fn sum_all<E: Scalar>(x: &Tensor<E>) -> E {
    let mut acc = E::zero();
    for &v in x.data() {
        acc += v;
    }
    acc
}

pub fn mean_all<E: Scalar>(x: &Tensor<E>) -> E {
    sum_all(x) * E::from_f64_lossy(1.0 / x.numel().max(1) as f64)
}

// ---------------------------------------------------------------------------
// binary cross entropy
// ---------------------------------------------------------------------------

pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross entropy with predictions clamped away from {0, 1}.
pub fn bce_loss<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "bce shapes differ: {} vs {}",
            pred.shape(),
            target.shape()
        )));
    }
    let lo = E::from_f64_lossy(BCE_CLAMP);
    let hi = E::one() - lo;
    let mut acc = E::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let pc = p.max(lo).min(hi);
        acc += -(t * pc.ln() + (E::one() - t) * (E::one() - pc).ln());
    }
    Ok(acc * E::from_f64_lossy(1.0 / pred.numel().max(1) as f64))
}

/// Gradient of [`bce_loss`] w.r.t. the predictions; zero where the clamp
/// was active.
pub fn bce_loss_backward<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>, upstream: E) -> Tensor<E> {
    let lo = E::from_f64_lossy(BCE_CLAMP);
    let hi = E::one() - lo;
    let inv_n = E::from_f64_lossy(1.0 / pred.numel().max(1) as f64);
    let mut out = Tensor::zeros(pred.shape());
    for ((o, &p), &t) in out.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        if p > lo && p < hi {
            *o = upstream * inv_n * (p - t) / (p * (E::one() - p));
        }
    }
    out
}
