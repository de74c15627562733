//! Plane-geometry transforms on NCHW tensors: the dihedral group of the
//! square, integer shifts, and resampling. These are plain data movements,
//! not tape ops; training augmentation happens before batching and
//! test-time augmentation works on detached predictions.

use super::data::Tensor;
use super::scalar::Scalar;
use super::shape::Shape;
use crate::error::{Error, Result};

/// The eight symmetries of the square: identity, three rotations and four
/// reflections (horizontal, vertical, main diagonal, anti-diagonal).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    FlipDiag,
    FlipAnti,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::FlipDiag,
        Dihedral::FlipAnti,
    ];

    /// The unique transform that undoes this one.
    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    fn needs_square(self) -> bool {
        matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::FlipDiag | Dihedral::FlipAnti
        )
    }

    /// Source coordinates for destination cell `(y, x)` on an `n x n`
    /// square (rotations are counter-clockwise).
    #[inline]
    fn source(self, n: usize, y: usize, x: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Dihedral::Identity => (y, x),
            Dihedral::Rot90 => (x, m - y),
            Dihedral::Rot180 => (m - y, m - x),
            Dihedral::Rot270 => (m - x, y),
            Dihedral::FlipH => (y, m - x),
            Dihedral::FlipV => (m - y, x),
            Dihedral::FlipDiag => (x, y),
            Dihedral::FlipAnti => (m - x, m - y),
        }
    }

    /// Apply to every channel plane of an NCHW tensor.
    pub fn apply<E: Scalar>(self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let s = input.shape();
        let (h, w) = (s.height(), s.width());
        if self.needs_square() && h != w {
            return Err(Error::Config(format!(
                "{self:?} requires a square image, got {h}x{w}"
            )));
        }
        if self == Dihedral::Identity {
            return Ok(input.clone());
        }
        let mut out = Tensor::zeros(s);
        let x = input.data();
        let planes = s.batch() * s.channels();
        let plane = h * w;
        let o = out.data_mut();
        for pi in 0..planes {
            let xp = &x[pi * plane..][..plane];
            let op = &mut o[pi * plane..][..plane];
            match self {
                // The non-square-safe pair get dedicated loops.
                Dihedral::FlipH => {
                    for y in 0..h {
                        for xx in 0..w {
                            op[y * w + xx] = xp[y * w + (w - 1 - xx)];
                        }
                    }
                }
                Dihedral::FlipV => {
                    for y in 0..h {
                        op[y * w..][..w].copy_from_slice(&xp[(h - 1 - y) * w..][..w]);
                    }
                }
                Dihedral::Rot180 => {
                    for y in 0..h {
                        for xx in 0..w {
                            op[y * w + xx] = xp[(h - 1 - y) * w + (w - 1 - xx)];
                        }
                    }
                }
                t => {
                    let n = h;
                    for y in 0..n {
                        for xx in 0..n {
                            let (sy, sx) = t.source(n, y, xx);
                            op[y * n + xx] = xp[sy * n + sx];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Integer shift with zero fill; `(dx, dy)` moves content right/down.
pub fn shift<E: Scalar>(input: &Tensor<E>, dx: isize, dy: isize) -> Tensor<E> {
    let s = input.shape();
    let (h, w) = (s.height() as isize, s.width() as isize);
    let plane = (h * w) as usize;
    let x = input.data();
    let mut out = Tensor::zeros(s);
    let o = out.data_mut();
    for pi in 0..s.batch() * s.channels() {
        let xp = &x[pi * plane..][..plane];
        let op = &mut o[pi * plane..][..plane];
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for xx in 0..w {
                let sx = xx - dx;
                if sx < 0 || sx >= w {
                    continue;
                }
                op[(y * w + xx) as usize] = xp[(sy * w + sx) as usize];
            }
        }
    }
    out
}

/// Bilinear resampling (half-pixel center convention); for images and
/// probability maps.
pub fn resize_bilinear<E: Scalar>(input: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    let (h, w) = (s.height(), s.width());
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::Config("resize of empty tensor".into()));
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let x = input.data();
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut out = Tensor::zeros(Shape::new(s.batch(), s.channels(), oh, ow));
    let o = out.data_mut();
    for pi in 0..s.batch() * s.channels() {
        let xp = &x[pi * plane_in..][..plane_in];
        let op = &mut o[pi * plane_out..][..plane_out];
        for y in 0..oh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = E::from_f64_lossy(fy - y0 as f64);
            for xx in 0..ow {
                let fx = ((xx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = E::from_f64_lossy(fx - x0 as f64);
                let one = E::one();
                let top = xp[y0 * w + x0] * (one - wx) + xp[y0 * w + x1] * wx;
                let bot = xp[y1 * w + x0] * (one - wx) + xp[y1 * w + x1] * wx;
                op[y * ow + xx] = top * (one - wy) + bot * wy;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resampling; keeps binary masks binary.
pub fn resize_nearest<E: Scalar>(input: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let s = input.shape();
    let (h, w) = (s.height(), s.width());
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::Config("resize of empty tensor".into()));
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let x = input.data();
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut out = Tensor::zeros(Shape::new(s.batch(), s.channels(), oh, ow));
    let o = out.data_mut();
    for pi in 0..s.batch() * s.channels() {
        let xp = &x[pi * plane_in..][..plane_in];
        let op = &mut o[pi * plane_out..][..plane_out];
        for y in 0..oh {
            let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
            for xx in 0..ow {
                let ix = (((xx as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                op[y * ow + xx] = xp[iy * w + ix];
            }
        }
    }
    Ok(out)
}

/// Center-crop or zero-pad to `(oh, ow)`, keeping content centered.
pub fn center_fit<E: Scalar>(input: &Tensor<E>, oh: usize, ow: usize) -> Tensor<E> {
    let s = input.shape();
    let (h, w) = (s.height(), s.width());
    let x = input.data();
    let plane_in = h * w;
    let plane_out = oh * ow;
    let mut out = Tensor::zeros(Shape::new(s.batch(), s.channels(), oh, ow));
    let o = out.data_mut();
    // Destination offsets when padding, source offsets when cropping.
    let (dy, sy) = if oh >= h { ((oh - h) / 2, 0) } else { (0, (h - oh) / 2) };
    let (dx, sx) = if ow >= w { ((ow - w) / 2, 0) } else { (0, (w - ow) / 2) };
    let copy_h = h.min(oh);
    let copy_w = w.min(ow);
    for pi in 0..s.batch() * s.channels() {
        let xp = &x[pi * plane_in..][..plane_in];
        let op = &mut o[pi * plane_out..][..plane_out];
        for y in 0..copy_h {
            let src = &xp[(sy + y) * w + sx..][..copy_w];
            op[(dy + y) * ow + dx..][..copy_w].copy_from_slice(src);
        }
    }
    out
}
