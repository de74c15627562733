//! Rank-4 shapes and convolution geometry.

use crate::error::{Error, Result};

/// `(batch, channels, height, width)` extents. Everything in the crate is
/// rank 4; vectors ride along as `(1, c, 1, 1)` and scalars as all-ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    /// Per-channel vector layout used by biases and batch-norm parameters.
    pub fn chan(c: usize) -> Self {
        Shape([1, c, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }
    pub fn channels(&self) -> usize {
        self.0[1]
    }
    pub fn height(&self) -> usize {
        self.0[2]
    }
    pub fn width(&self) -> usize {
        self.0[3]
    }

    /// Flat offset of `(n, c, h, w)` in row-major NCHW order.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.0[0], self.0[1], self.0[2], self.0[3]
        )
    }
}

/// Geometry of a (transpose) convolution. `output_padding` only applies to
/// the transpose direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub output_padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: 0,
            dilation: 1,
            output_padding: 0,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn output_padding(mut self, p: usize) -> Self {
        self.output_padding = p;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::Config(format!(
                "conv spec extents must be >= 1, got {self:?}"
            )));
        }
        if self.output_padding >= self.stride {
            return Err(Error::Config(format!(
                "output_padding {} must be < stride {}",
                self.output_padding, self.stride
            )));
        }
        Ok(())
    }

    fn out_extent(&self, input: usize, k: usize) -> Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::Config(format!(
                "kernel span {span} exceeds padded input {padded}"
            )));
        }
        let out = (padded - span) / self.stride + 1;
        if out == 0 {
            return Err(Error::Config("zero-size convolution output".into()));
        }
        Ok(out)
    }

    /// Forward convolution output spatial size.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.out_extent(h, self.kernel.0)?,
            self.out_extent(w, self.kernel.1)?,
        ))
    }

    fn transpose_extent(&self, input: usize, k: usize) -> Result<usize> {
        let grown = (input - 1) * self.stride + self.dilation * (k - 1) + 1 + self.output_padding;
        if grown <= 2 * self.padding {
            return Err(Error::Config(
                "zero-size transpose convolution output".into(),
            ));
        }
        Ok(grown - 2 * self.padding)
    }

    /// Transpose convolution output spatial size.
    pub fn conv_transpose_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 {
            return Err(Error::Config("empty transpose convolution input".into()));
        }
        Ok((
            self.transpose_extent(h, self.kernel.0)?,
            self.transpose_extent(w, self.kernel.1)?,
        ))
    }
}

/// Max-pooling window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize, padding: usize) -> Self {
        PoolSpec {
            window: (window, window),
            stride,
            padding,
        }
    }

    pub fn output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.window.0 == 0 || self.window.1 == 0 {
            return Err(Error::Config("pool window and stride must be >= 1".into()));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.window.0 > ph || self.window.1 > pw {
            return Err(Error::Config(format!(
                "pool window {:?} larger than padded input ({ph}, {pw})",
                self.window
            )));
        }
        Ok((
            (ph - self.window.0) / self.stride + 1,
            (pw - self.window.1) / self.stride + 1,
        ))
    }
}
