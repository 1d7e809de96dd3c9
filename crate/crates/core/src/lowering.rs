//! Transpose convolution as unit-stride convolution.
//!
//! A stride-`S` deconvolution with kernel `K` and padding `P` equals a plain
//! convolution of the 180-degree rotated kernel over an expanded input: `S-1`
//! zeros between neighbouring pixels and `K-P-1` zeros around the border.

use serde::Serialize;
use thiserror::Error;

use crate::netmodel::{DeconvLayerSpec, Kernel};
use crate::qarith::{QTensor, Shape3};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("input size, kernel and stride must be at least 1 (h_in={h_in}, k={k}, s={s})")]
    ZeroDimension { h_in: usize, k: usize, s: usize },
    #[error("pad {p} must be smaller than kernel {k}")]
    PadTooLarge { p: usize, k: usize },
    #[error("deconvolution of size {h_in} (k={k}, s={s}, p={p}) has no output pixels")]
    EmptyOutput { h_in: usize, k: usize, s: usize, p: usize },
    #[error("input shape {found} does not match expected {expected}")]
    ShapeMismatch { expected: Shape3, found: Shape3 },
}

/// Output extent of a transpose convolution along one axis:
/// `(h_in - 1) * s - 2p + k`.
pub fn deconv_output_shape(h_in: usize, k: usize, s: usize, p: usize) -> Result<usize, GeometryError> {
    if h_in == 0 || k == 0 || s == 0 {
        return Err(GeometryError::ZeroDimension { h_in, k, s });
    }
    if p >= k {
        return Err(GeometryError::PadTooLarge { p, k });
    }
    let full = (h_in - 1) * s + k;
    match full.checked_sub(2 * p) {
        Some(h) if h >= 1 => Ok(h),
        _ => Err(GeometryError::EmptyOutput { h_in, k, s, p }),
    }
}

pub fn layer_output_shape(layer: &DeconvLayerSpec, input: Shape3) -> Result<Shape3, GeometryError> {
    Ok(Shape3::new(
        layer.out_channels,
        deconv_output_shape(input.height, layer.kernel, layer.stride, layer.pad)?,
        deconv_output_shape(input.width, layer.kernel, layer.stride, layer.pad)?,
    ))
}

/// The unit-stride convolution equivalent to one deconvolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoweredConv {
    pub in_shape: Shape3,
    /// Stride of the deconvolution; `expansion - 1` zeros separate input pixels.
    pub expansion: usize,
    /// Zeros added on every side, `K - P - 1`.
    pub border_pad: usize,
    pub conv_kernel: usize,
    pub expanded_shape: Shape3,
    pub out_shape: Shape3,
}

impl LoweredConv {
    /// Input pixel at expanded coordinate `e` along one axis, if `e` lands on
    /// the grid `{b + i*S}`.
    #[inline]
    pub fn source_index(&self, e: usize, extent: usize) -> Option<usize> {
        let off = e.checked_sub(self.border_pad)?;
        if off % self.expansion != 0 {
            return None;
        }
        let i = off / self.expansion;
        (i < extent).then_some(i)
    }

    /// Number of elements in one window: `K^2 * C_in`.
    pub fn window_len(&self) -> usize {
        self.conv_kernel * self.conv_kernel * self.in_shape.channels
    }
}

pub fn lower_layer(layer: &DeconvLayerSpec, in_shape: Shape3) -> Result<LoweredConv, GeometryError> {
    if in_shape.channels != layer.in_channels {
        return Err(GeometryError::ShapeMismatch {
            expected: Shape3::new(layer.in_channels, in_shape.height, in_shape.width),
            found: in_shape,
        });
    }
    let out_shape = layer_output_shape(layer, in_shape)?;
    let (k, s, p) = (layer.kernel, layer.stride, layer.pad);
    let border_pad = k - p - 1;
    let expand = |n: usize| (n - 1) * s + 1 + 2 * border_pad;
    let expanded_shape = Shape3::new(in_shape.channels, expand(in_shape.height), expand(in_shape.width));
    debug_assert_eq!(expanded_shape.height - k + 1, out_shape.height);
    debug_assert_eq!(expanded_shape.width - k + 1, out_shape.width);
    Ok(LoweredConv {
        in_shape,
        expansion: s,
        border_pad,
        conv_kernel: k,
        expanded_shape,
        out_shape,
    })
}

/// Materializes the zero-inserted, border-padded input map.
pub fn expand_input(fm: &QTensor, lc: &LoweredConv) -> Result<QTensor, GeometryError> {
    if fm.shape() != lc.in_shape {
        return Err(GeometryError::ShapeMismatch {
            expected: lc.in_shape,
            found: fm.shape(),
        });
    }
    let es = lc.expanded_shape;
    let mut codes = vec![0; es.len()];
    let (b, s) = (lc.border_pad, lc.expansion);
    for i in 0..lc.in_shape.height {
        for j in 0..lc.in_shape.width {
            for c in 0..lc.in_shape.channels {
                codes[es.index(c, b + i * s, b + j * s)] = fm.get(c, i, j);
            }
        }
    }
    Ok(QTensor::new(es, codes, fm.scale_n()).expect("codes copied from a valid tensor"))
}

/// Rotates every `K x K` kernel slice by 180 degrees.
pub fn flip_kernel(w: &Kernel) -> Kernel {
    let k = w.size();
    let mut codes = vec![0; w.codes().len()];
    for o in 0..w.out_channels() {
        for c in 0..w.in_channels() {
            for kh in 0..k {
                for kw in 0..k {
                    codes[w.index(o, c, k - 1 - kh, k - 1 - kw)] = w.get(o, c, kh, kw);
                }
            }
        }
    }
    Kernel::new(w.out_channels(), w.in_channels(), k, codes, w.scale_n()).expect("same geometry and codes")
}
