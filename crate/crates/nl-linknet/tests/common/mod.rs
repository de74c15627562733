//! Brute-force reference implementations used as test oracles. These are
//! written as literal nested loops, independent of the library's kernel
//! code paths, and stay that way on purpose.

#![allow(dead_code)]

use nl_linknet::tensor::{ConvSpec, PoolSpec, Scalar, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Plain seven-loop cross-correlation.
pub fn conv2d_ref<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Tensor<E> {
    let (n, ci, h, ww) = {
        let s = x.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let co = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let (oh, ow) = spec.conv_output(h, ww).unwrap();
    let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
    for b in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(E::zero(), |bt| bt.data()[oc]);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += x.at(b, ic, iy as usize, ix as usize)
                                    * w.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Scatter-add transpose convolution; weight layout `(ci, co, kh, kw)`.
pub fn conv_transpose2d_ref<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Tensor<E> {
    let (n, ci, h, ww) = {
        let s = x.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let co = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let (oh, ow) = spec.conv_transpose_output(h, ww).unwrap();
    let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
    for b in 0..n {
        for ic in 0..ci {
            for iy in 0..h {
                for ix in 0..ww {
                    let xv = x.at(b, ic, iy, ix);
                    for oc in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                let ox = (ix * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if oy < 0 || oy >= oh as isize || ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let cur = out.at(b, oc, oy as usize, ox as usize);
                                out.set(
                                    b,
                                    oc,
                                    oy as usize,
                                    ox as usize,
                                    cur + xv * w.at(ic, oc, ky, kx),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bt) = bias {
        for b in 0..n {
            for oc in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let cur = out.at(b, oc, oy, ox);
                        out.set(b, oc, oy, ox, cur + bt.data()[oc]);
                    }
                }
            }
        }
    }
    out
}

pub fn maxpool2d_ref<E: Scalar>(x: &Tensor<E>, spec: &PoolSpec) -> Tensor<E> {
    let (n, c, h, w) = {
        let s = x.shape();
        (s.batch(), s.channels(), s.height(), s.width())
    };
    let (oh, ow) = spec.output(h, w).unwrap();
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<E> = None;
                    for ky in 0..spec.window.0 {
                        for kx in 0..spec.window.1 {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x.at(b, ch, iy as usize, ix as usize);
                            best = Some(match best {
                                None => v,
                                Some(cur) => {
                                    if v > cur {
                                        v
                                    } else {
                                        cur
                                    }
                                }
                            });
                        }
                    }
                    out.set(b, ch, oy, ox, best.unwrap_or(E::zero()));
                }
            }
        }
    }
    out
}

/// Triple-loop matrix product per `(batch, channel)` slice.
pub fn batched_matmul_ref<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k, n) = (sa.height(), sa.width(), sb.width());
    let mut out = Tensor::zeros(Shape::new(sa.batch(), sa.channels(), m, n));
    for bi in 0..sa.batch() {
        for ci in 0..sa.channels() {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = E::zero();
                    for p in 0..k {
                        acc += a.at(bi, ci, i, p) * b.at(bi, ci, p, j);
                    }
                    out.set(bi, ci, i, j, acc);
                }
            }
        }
    }
    out
}

/// Naive exp/sum softmax without max-shift stabilization, f64 only.
pub fn softmax_ref(x: &Tensor<f64>, axis: usize) -> Tensor<f64> {
    let dims = x.shape().0;
    let mut out = Tensor::zeros(x.shape());
    let mut idx = [0usize; 4];
    // iterate over all positions with the axis coordinate fixed to 0
    loop {
        if idx[axis] == 0 {
            let mut sum = 0.0;
            for k in 0..dims[axis] {
                let mut j = idx;
                j[axis] = k;
                sum += x.at(j[0], j[1], j[2], j[3]).exp();
            }
            for k in 0..dims[axis] {
                let mut j = idx;
                j[axis] = k;
                let v = x.at(j[0], j[1], j[2], j[3]).exp() / sum;
                out.set(j[0], j[1], j[2], j[3], v);
            }
        }
        // odometer increment
        let mut d = 3;
        loop {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
            if d == 0 {
                return out;
            }
            d -= 1;
        }
    }
}

/// Scalar-loop binary cross entropy with the same clamp as the library.
pub fn bce_ref(pred: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let eps = 1e-7;
    let mut acc = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let pc = p.clamp(eps, 1.0 - eps);
        acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
    }
    acc / pred.numel() as f64
}

pub fn max_abs_diff<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .fold(0.0, f64::max)
}

pub fn max_rel_diff<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
            let denom = x.abs().max(y.abs());
            if denom < 1e-12 {
                0.0
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
