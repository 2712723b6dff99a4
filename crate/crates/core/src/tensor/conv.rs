//! Cross-correlation geometry and the im2col/col2im lowering shared by the
//! float training path and the integer deployment path.

use crate::error::{Error, Result};

/// Shape bookkeeping for a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Dimension("conv stride must be positive".into()));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Dimension(format!(
                    "conv output size not integral: ({size} + 2*{pad} - {k}) / {stride}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            in_channels,
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: out(in_h, kernel_h)?,
            out_w: out(in_w, kernel_w)?,
        })
    }

    /// Rows of the lowered patch matrix: `C·kH·kW`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the lowered patch matrix: `H′·W′`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + k − pad` is
/// inside `[0, in_len)`.
fn valid_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    k: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out_len);
    // largest ox with ox·stride + k − pad <= in_len − 1
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Lowers one `C×H×W` image into a `(C·kH·kW) × (H′·W′)` matrix; padded
/// positions read as zero.
pub fn im2col<T: Copy + Default>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.patch_len() * g.positions());
    let positions = g.positions();
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            let (ylo, yhi) = valid_range(g.out_h, g.in_h, g.stride, ky, g.pad);
            for kx in 0..g.kernel_w {
                let (xlo, xhi) = valid_range(g.out_w, g.in_w, g.stride, kx, g.pad);
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < ylo || oy >= yhi {
                        out.fill(T::default());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    out[..xlo].fill(T::default());
                    out[xhi..].fill(T::default());
                    let x0 = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (o, ox) in out[xlo..xhi].iter_mut().zip(0..) {
                            *o = src[x0 + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im(g: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let positions = g.positions();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            let (ylo, yhi) = valid_range(g.out_h, g.in_h, g.stride, ky, g.pad);
            for kx in 0..g.kernel_w {
                let (xlo, xhi) = valid_range(g.out_w, g.in_w, g.stride, kx, g.pad);
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let x0 = xlo * g.stride + kx - g.pad;
                    for (ox, &v) in src[oy * g.out_w + xlo..oy * g.out_w + xhi]
                        .iter()
                        .enumerate()
                    {
                        dst[x0 + ox * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Non-overlapping `size×size` max pooling over `[B, C, H, W]`; trailing rows
/// and columns that do not fill a window are dropped. Returns the pooled
/// values and, for each output, the flat input index of the first maximum.
pub fn max_pool2d<T: Copy + PartialOrd>(
    input: &[T],
    shape: &[usize],
    size: usize,
) -> (Vec<T>, Vec<usize>, [usize; 4]) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let row0 = base + oy * size * w;
            for ox in 0..ow {
                let mut best_i = row0 + ox * size;
                let mut best = input[best_i];
                for dy in 0..size {
                    let r = row0 + dy * w + ox * size;
                    for (dx, &v) in input[r..r + size].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_i = r + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, [b, c, oh, ow])
}
