//! Generator description, weight packing and the `QWT1` weight file.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lowering::{self, GeometryError};
use crate::qarith::{self, code_limit, QuantError, Shape3, ThresholdSet};

/// Clock the reference designs are synthesized for.
pub const DEFAULT_CLOCK_MHZ: f64 = 125.0;
/// Widest weight code that still fits one signed byte on disk (`[-64, 64]`).
pub const MAX_WEIGHT_BITS: u8 = 6;
pub const MAX_ACT_BITS: u8 = 8;
/// Bit width of the image-producing output stage.
pub const OUTPUT_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    ThresholdedRelu,
    OutputHardtanh,
}

/// One transpose-convolution layer and its engine parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeconvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub pe: usize,
    pub simd: usize,
    pub activation: ActivationKind,
}

impl DeconvLayerSpec {
    /// A layer with 4-bit weights and activations and no parallelism.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight_bits: 4,
            act_bits: 4,
            pe: 1,
            simd: 1,
            activation: ActivationKind::ThresholdedRelu,
        }
    }

    pub fn with_bits(mut self, weight_bits: u8, act_bits: u8) -> Self {
        self.weight_bits = weight_bits;
        self.act_bits = act_bits;
        self
    }

    pub fn with_parallelism(mut self, pe: usize, simd: usize) -> Self {
        self.pe = pe;
        self.simd = simd;
        self
    }

    /// Rows of the flattened weight matrix.
    pub fn matrix_rows(&self) -> usize {
        self.out_channels
    }

    /// Columns of the flattened weight matrix: `K^2 * C_in`.
    pub fn matrix_cols(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn row_tiles(&self) -> usize {
        self.matrix_rows().div_ceil(self.pe)
    }

    pub fn col_tiles(&self) -> usize {
        self.matrix_cols().div_ceil(self.simd)
    }

    /// Length of the tile-interleaved weight stream, zero padding included.
    pub fn packed_len(&self) -> usize {
        self.row_tiles() * self.col_tiles() * self.pe * self.simd
    }

    /// Threshold entries stored for this layer.
    pub fn threshold_count(&self) -> usize {
        match self.activation {
            ActivationKind::ThresholdedRelu => (1usize << self.act_bits) - 1,
            ActivationKind::OutputHardtanh => 0,
        }
    }

    fn validate(&self, layer: usize) -> Result<(), ConfigError> {
        let range = |field: &'static str, message: String| ConfigError::Range {
            layer: Some(layer),
            field,
            message,
        };
        if self.in_channels == 0 {
            return Err(range("in_channels", "must be at least 1".into()));
        }
        if self.out_channels == 0 {
            return Err(range("out_channels", "must be at least 1".into()));
        }
        if self.kernel == 0 {
            return Err(range("kernel", "must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(range("stride", "must be at least 1".into()));
        }
        if self.pad >= self.kernel {
            return Err(range(
                "pad",
                format!("pad {} must be smaller than kernel {}", self.pad, self.kernel),
            ));
        }
        if !(1..=MAX_WEIGHT_BITS).contains(&self.weight_bits) {
            return Err(range(
                "weight_bits",
                format!("{} not in 1..={MAX_WEIGHT_BITS}", self.weight_bits),
            ));
        }
        if !(1..=MAX_ACT_BITS).contains(&self.act_bits) {
            return Err(range("act_bits", format!("{} not in 1..={MAX_ACT_BITS}", self.act_bits)));
        }
        if self.pe == 0 || self.pe > self.out_channels {
            return Err(range(
                "pe",
                format!("{} not in 1..={} (out_channels)", self.pe, self.out_channels),
            ));
        }
        if self.simd == 0 || self.simd > self.matrix_cols() {
            return Err(range(
                "simd",
                format!("{} not in 1..={} (kernel^2 * in_channels)", self.simd, self.matrix_cols()),
            ));
        }
        let u16_fields = [
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("pad", self.pad),
            ("pe", self.pe),
            ("simd", self.simd),
        ];
        for (field, v) in u16_fields {
            if v > usize::from(u16::MAX) {
                return Err(range(field, format!("{v} exceeds the weight-file limit {}", u16::MAX)));
            }
        }
        for (field, v) in [("in_channels", self.in_channels), ("out_channels", self.out_channels)] {
            if v > u32::MAX as usize {
                return Err(range(field, format!("{v} exceeds the weight-file limit {}", u32::MAX)));
            }
        }
        Ok(())
    }
}

/// A validated generator: noise shape plus chained deconvolution layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Shape3,
    pub clock_mhz: f64,
    pub comment: Option<String>,
    layers: Vec<DeconvLayerSpec>,
}

impl NetworkSpec {
    /// Validates the layer chain. Activation kinds are assigned by position:
    /// the last layer drives the image output, all others are thresholded.
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape3,
        clock_mhz: f64,
        mut layers: Vec<DeconvLayerSpec>,
    ) -> Result<Self, ConfigError> {
        let n = layers.len();
        for (i, l) in layers.iter_mut().enumerate() {
            l.activation = if i + 1 == n {
                ActivationKind::OutputHardtanh
            } else {
                ActivationKind::ThresholdedRelu
            };
        }
        let spec = Self {
            name: name.into(),
            input_shape,
            clock_mhz,
            comment: None,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layers(&self) -> &[DeconvLayerSpec] {
        &self.layers
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let top = |field: &'static str, message: &str| ConfigError::Range {
            layer: None,
            field,
            message: message.into(),
        };
        if self.input_shape.is_empty() {
            return Err(top("input_shape", "every dimension must be at least 1"));
        }
        if !(self.clock_mhz.is_finite() && self.clock_mhz > 0.0) {
            return Err(top("clock_mhz", "must be a positive number"));
        }
        if self.layers.is_empty() {
            return Err(top("layers", "at least one layer is required"));
        }
        let mut shape = self.input_shape;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != shape.channels {
                return Err(ConfigError::Chaining {
                    layer: i,
                    expected: shape.channels,
                    found: l.in_channels,
                });
            }
            l.validate(i)?;
            shape = lowering::layer_output_shape(l, shape)
                .map_err(|source| ConfigError::Geometry { layer: i, source })?;
        }
        Ok(())
    }

    /// Bit width of the noise input, taken from the first layer's activations.
    pub fn input_bits(&self) -> u8 {
        self.layers[0].act_bits
    }

    /// Scale exponent of the activations entering layer `i`.
    pub fn layer_input_bits(&self, i: usize) -> u8 {
        if i == 0 {
            self.input_bits()
        } else {
            self.layers[i - 1].act_bits
        }
    }

    /// Feature-map shapes along the chain: input of every layer, then the
    /// final output.
    pub fn shapes(&self) -> Vec<Shape3> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut s = self.input_shape;
        out.push(s);
        for l in &self.layers {
            s = lowering::layer_output_shape(l, s).expect("validated geometry");
            out.push(s);
        }
        out
    }

    pub fn output_shape(&self) -> Shape3 {
        *self.shapes().last().expect("non-empty")
    }

    pub fn clock_hz(&self) -> u64 {
        (self.clock_mhz * 1e6).round() as u64
    }

    /// Serializes back to the JSON configuration format.
    pub fn to_config_json(&self) -> String {
        let raw = RawConfig {
            name: self.name.clone(),
            comment: self.comment.clone(),
            input_shape: [
                self.input_shape.channels,
                self.input_shape.height,
                self.input_shape.width,
            ],
            clock_mhz: Some(self.clock_mhz),
            layers: self
                .layers
                .iter()
                .map(|l| RawLayer {
                    in_channels: None,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                    pad: l.pad,
                    weight_bits: l.weight_bits,
                    act_bits: l.act_bits,
                    pe: l.pe,
                    simd: l.simd,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("plain data serializes")
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("layer {layer}: in_channels {found} does not chain from the previous output ({expected})")]
    Chaining {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("{}{field}: {message}", layer_prefix(*.layer))]
    Range {
        layer: Option<usize>,
        field: &'static str,
        message: String,
    },
    #[error("layer {layer}: {source}")]
    Geometry {
        layer: usize,
        #[source]
        source: GeometryError,
    },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn layer_prefix(layer: Option<usize>) -> String {
    layer.map(|l| format!("layer {l}: ")).unwrap_or_default()
}

impl ConfigError {
    /// Layer index the diagnostic points at, if any.
    pub fn layer(&self) -> Option<usize> {
        match self {
            Self::Chaining { layer, .. } | Self::Geometry { layer, .. } => Some(*layer),
            Self::Range { layer, .. } => *layer,
            Self::Syntax { .. } | Self::Io { .. } => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comment: Option<String>,
    input_shape: [usize; 3],
    #[serde(default)]
    clock_mhz: Option<f64>,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight_bits: u8,
    act_bits: u8,
    pe: usize,
    simd: usize,
}

/// Parses and validates a JSON network configuration.
pub fn parse_network_config(text: &str) -> Result<NetworkSpec, ConfigError> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let input_shape = Shape3::new(raw.input_shape[0], raw.input_shape[1], raw.input_shape[2]);
    let mut layers = Vec::with_capacity(raw.layers.len());
    let mut channels = input_shape.channels;
    for (i, rl) in raw.layers.iter().enumerate() {
        if let Some(found) = rl.in_channels {
            if found != channels {
                return Err(ConfigError::Chaining {
                    layer: i,
                    expected: channels,
                    found,
                });
            }
        }
        layers.push(DeconvLayerSpec {
            in_channels: channels,
            out_channels: rl.out_channels,
            kernel: rl.kernel,
            stride: rl.stride,
            pad: rl.pad,
            weight_bits: rl.weight_bits,
            act_bits: rl.act_bits,
            pe: rl.pe,
            simd: rl.simd,
            activation: ActivationKind::ThresholdedRelu,
        });
        channels = rl.out_channels;
    }
    let mut spec = NetworkSpec::new(
        raw.name,
        input_shape,
        raw.clock_mhz.unwrap_or(DEFAULT_CLOCK_MHZ),
        layers,
    )?;
    spec.comment = raw.comment;
    Ok(spec)
}

pub fn load_network_config(path: impl AsRef<Path>) -> Result<NetworkSpec, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network_config(&text)
}

/// Deconvolution kernel in `(out, in, kh, kw)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kernel {
    out_channels: usize,
    in_channels: usize,
    size: usize,
    codes: Vec<i32>,
    scale_n: u8,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        codes: Vec<i32>,
        scale_n: u8,
    ) -> Result<Self, PackError> {
        let expected = out_channels * in_channels * size * size;
        if codes.len() != expected {
            return Err(PackError::Length {
                expected,
                found: codes.len(),
            });
        }
        check_codes(&codes, scale_n)?;
        Ok(Self {
            out_channels,
            in_channels,
            size,
            codes,
            scale_n,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn scale_n(&self) -> u8 {
        self.scale_n
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    #[inline]
    pub fn index(&self, o: usize, c: usize, kh: usize, kw: usize) -> usize {
        ((o * self.in_channels + c) * self.size + kh) * self.size + kw
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, kh: usize, kw: usize) -> i32 {
        self.codes[self.index(o, c, kh, kw)]
    }

    /// Flattens to `(out, K^2 * in)` with column order `(kh, kw, c)`, the
    /// element order of a sliding window.
    pub fn to_matrix(&self) -> QMatrix {
        let k = self.size;
        let cols = k * k * self.in_channels;
        let mut codes = vec![0; self.out_channels * cols];
        for o in 0..self.out_channels {
            for kh in 0..k {
                for kw in 0..k {
                    for c in 0..self.in_channels {
                        codes[o * cols + (kh * k + kw) * self.in_channels + c] = self.get(o, c, kh, kw);
                    }
                }
            }
        }
        QMatrix {
            rows: self.out_channels,
            cols,
            codes,
            scale_n: self.scale_n,
        }
    }

    /// Inverse of [`Kernel::to_matrix`].
    pub fn from_matrix(m: &QMatrix, in_channels: usize, size: usize) -> Result<Self, PackError> {
        if m.cols != size * size * in_channels {
            return Err(PackError::Dims {
                expected: (m.rows, size * size * in_channels),
                found: (m.rows, m.cols),
            });
        }
        let mut codes = vec![0; m.codes.len()];
        let mut kernel = Self {
            out_channels: m.rows,
            in_channels,
            size,
            codes: Vec::new(),
            scale_n: m.scale_n,
        };
        for o in 0..m.rows {
            for kh in 0..size {
                for kw in 0..size {
                    for c in 0..in_channels {
                        codes[kernel.index(o, c, kh, kw)] = m.get(o, (kh * size + kw) * in_channels + c);
                    }
                }
            }
        }
        kernel.codes = codes;
        Ok(kernel)
    }
}

/// Row-major integer weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<i32>,
    scale_n: u8,
}

impl QMatrix {
    pub fn new(rows: usize, cols: usize, codes: Vec<i32>, scale_n: u8) -> Result<Self, PackError> {
        if codes.len() != rows * cols {
            return Err(PackError::Length {
                expected: rows * cols,
                found: codes.len(),
            });
        }
        check_codes(&codes, scale_n)?;
        Ok(Self {
            rows,
            cols,
            codes,
            scale_n,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn scale_n(&self) -> u8 {
        self.scale_n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.codes[r * self.cols + c]
    }
}

fn check_codes(codes: &[i32], scale_n: u8) -> Result<(), PackError> {
    if scale_n == 0 || scale_n > MAX_WEIGHT_BITS {
        return Err(PackError::Quant(QuantError::BitWidth(scale_n)));
    }
    let lim = code_limit(scale_n);
    match codes.iter().enumerate().find(|(_, c)| c.abs() > lim) {
        Some((index, &code)) => Err(PackError::Quant(QuantError::CodeRange {
            index,
            code,
            scale_n,
        })),
        None => Ok(()),
    }
}

/// Dense (unpacked) weights of one layer, as the oracle consumes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWeights {
    pub kernel: Kernel,
    pub thresholds: Option<ThresholdSet>,
}

/// Layer dimensions echoed in the weight-file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerDims {
    pub in_channels: u32,
    pub out_channels: u32,
    pub kernel: u16,
    pub stride: u16,
    pub pad: u16,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub pe: u16,
    pub simd: u16,
}

impl LayerDims {
    pub fn rows(&self) -> usize {
        self.out_channels as usize
    }

    pub fn cols(&self) -> usize {
        let k = usize::from(self.kernel);
        k * k * self.in_channels as usize
    }

    pub fn packed_len(&self) -> usize {
        let (pe, simd) = (usize::from(self.pe), usize::from(self.simd));
        self.rows().div_ceil(pe) * self.cols().div_ceil(simd) * pe * simd
    }
}

impl From<&DeconvLayerSpec> for LayerDims {
    fn from(l: &DeconvLayerSpec) -> Self {
        Self {
            in_channels: l.in_channels as u32,
            out_channels: l.out_channels as u32,
            kernel: l.kernel as u16,
            stride: l.stride as u16,
            pad: l.pad as u16,
            weight_bits: l.weight_bits,
            act_bits: l.act_bits,
            pe: l.pe as u16,
            simd: l.simd as u16,
        }
    }
}

/// Engine-ready weights of one layer: the tile-interleaved code stream plus
/// the layer's shared threshold set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedLayer {
    pub dims: LayerDims,
    pub thresholds: Option<ThresholdSet>,
    pub codes: Vec<i8>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackError {
    #[error("matrix is {}x{}, layer expects {}x{}", .found.0, .found.1, .expected.0, .expected.1)]
    Dims {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("expected {expected} codes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("PE and SIMD must be at least 1")]
    ZeroParallelism,
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },
}

/// Emits `W` tile by tile: row tiles outermost, then column tiles, then the
/// `PE x SIMD` block in row-major order. Positions past the matrix edge are
/// zero.
pub fn pack_layer_weights(w: &QMatrix, dims: &LayerDims) -> Result<Vec<i8>, PackError> {
    if (w.rows, w.cols) != (dims.rows(), dims.cols()) {
        return Err(PackError::Dims {
            expected: (dims.rows(), dims.cols()),
            found: (w.rows, w.cols),
        });
    }
    let (pe, simd) = (usize::from(dims.pe), usize::from(dims.simd));
    if pe == 0 || simd == 0 {
        return Err(PackError::ZeroParallelism);
    }
    if w.scale_n != dims.weight_bits {
        return Err(PackError::Quant(QuantError::BitWidth(w.scale_n)));
    }
    let mut out = Vec::with_capacity(dims.packed_len());
    for rt in 0..w.rows.div_ceil(pe) {
        for ct in 0..w.cols.div_ceil(simd) {
            for p in 0..pe {
                let r = rt * pe + p;
                for s in 0..simd {
                    let c = ct * simd + s;
                    let code = if r < w.rows && c < w.cols { w.get(r, c) } else { 0 };
                    out.push(i8::try_from(code).map_err(|_| QuantError::CodeRange {
                        index: r * w.cols + c,
                        code,
                        scale_n: w.scale_n,
                    })?);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_layer_weights`].
pub fn unpack_layer_weights(packed: &[i8], dims: &LayerDims) -> Result<QMatrix, PackError> {
    let (pe, simd) = (usize::from(dims.pe), usize::from(dims.simd));
    if pe == 0 || simd == 0 {
        return Err(PackError::ZeroParallelism);
    }
    if packed.len() != dims.packed_len() {
        return Err(PackError::Length {
            expected: dims.packed_len(),
            found: packed.len(),
        });
    }
    let (rows, cols) = (dims.rows(), dims.cols());
    let mut codes = vec![0; rows * cols];
    let col_tiles = cols.div_ceil(simd);
    for (i, &code) in packed.iter().enumerate() {
        let s = i % simd;
        let p = (i / simd) % pe;
        let tile = i / (pe * simd);
        let (rt, ct) = (tile / col_tiles, tile % col_tiles);
        let (r, c) = (rt * pe + p, ct * simd + s);
        if r < rows && c < cols {
            codes[r * cols + c] = i32::from(code);
        }
    }
    QMatrix::new(rows, cols, codes, dims.weight_bits)
}

/// Packs one layer for the engine. `kernel_transform` maps the deconvolution
/// kernel to the kernel the unit-stride convolution applies;
/// [`pack_network`] passes the 180-degree flip.
pub fn pack_layer(
    layer: &DeconvLayerSpec,
    weights: &LayerWeights,
    kernel_transform: fn(&Kernel) -> Kernel,
) -> Result<PackedLayer, PackError> {
    let k = &weights.kernel;
    if (k.out_channels, k.in_channels, k.size) != (layer.out_channels, layer.in_channels, layer.kernel) {
        return Err(PackError::Dims {
            expected: (layer.matrix_rows(), layer.matrix_cols()),
            found: (k.out_channels, k.size * k.size * k.in_channels),
        });
    }
    let dims = LayerDims::from(layer);
    let codes = pack_layer_weights(&kernel_transform(k).to_matrix(), &dims)?;
    Ok(PackedLayer {
        dims,
        thresholds: weights.thresholds.clone(),
        codes,
    })
}

pub fn pack_network(spec: &NetworkSpec, weights: &[LayerWeights]) -> Result<Vec<PackedLayer>, PackError> {
    pack_network_with(spec, weights, lowering::flip_kernel)
}

pub fn pack_network_with(
    spec: &NetworkSpec,
    weights: &[LayerWeights],
    kernel_transform: fn(&Kernel) -> Kernel,
) -> Result<Vec<PackedLayer>, PackError> {
    if weights.len() != spec.layers().len() {
        return Err(PackError::Length {
            expected: spec.layers().len(),
            found: weights.len(),
        });
    }
    spec.layers()
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (l, w))| {
            check_thresholds(l, w.thresholds.as_ref()).map_err(|message| PackError::Layer { layer: i, message })?;
            pack_layer(l, w, kernel_transform).map_err(|e| PackError::Layer {
                layer: i,
                message: e.to_string(),
            })
        })
        .collect()
}

fn check_thresholds(l: &DeconvLayerSpec, ts: Option<&ThresholdSet>) -> Result<(), String> {
    match (l.activation, ts) {
        (ActivationKind::ThresholdedRelu, Some(ts)) if ts.out_bits() == l.act_bits => Ok(()),
        (ActivationKind::ThresholdedRelu, Some(ts)) => Err(format!(
            "threshold set is for {} bits, layer activations are {} bits",
            ts.out_bits(),
            l.act_bits
        )),
        (ActivationKind::ThresholdedRelu, None) => Err("thresholded layer has no threshold set".into()),
        (ActivationKind::OutputHardtanh, None) => Ok(()),
        (ActivationKind::OutputHardtanh, Some(_)) => Err("output layer must not carry thresholds".into()),
    }
}

/// Recovers dense deconvolution weights from engine-ready packed layers.
pub fn unpack_network(spec: &NetworkSpec, packed: &[PackedLayer]) -> Result<Vec<LayerWeights>, PackError> {
    spec.layers()
        .iter()
        .zip(packed)
        .map(|(l, p)| {
            let m = unpack_layer_weights(&p.codes, &p.dims)?;
            let flipped = Kernel::from_matrix(&m, l.in_channels, l.kernel)?;
            Ok(LayerWeights {
                kernel: lowering::flip_kernel(&flipped),
                thresholds: p.thresholds.clone(),
            })
        })
        .collect()
}

/// Largest accumulator magnitude a layer can produce: `K^2 * C_in * 2^wn * 2^an`.
pub fn worst_case_accumulator_bound(layer: &DeconvLayerSpec, in_bits: u8) -> i64 {
    layer.matrix_cols() as i64 * i64::from(code_limit(layer.weight_bits)) * i64::from(code_limit(in_bits))
}

/// Threshold set for a thresholded layer, spread uniformly over
/// `[0, max_o ||W_o||_2 * 2^an / 2]`, with the upper end capped at
/// [`worst_case_accumulator_bound`] and raised to at least `2^a - 1`.
pub fn calibrate_thresholds(
    layer: &DeconvLayerSpec,
    kernel: &Kernel,
    in_bits: u8,
) -> Result<ThresholdSet, QuantError> {
    let cols = kernel.in_channels * kernel.size * kernel.size;
    let max_norm = kernel
        .codes
        .chunks(cols.max(1))
        .map(|row| row.iter().map(|&w| f64::from(w) * f64::from(w)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let spread = (max_norm * f64::from(code_limit(in_bits)) / 2.0).ceil() as i64;
    let count = (1i64 << layer.act_bits) - 1;
    let hi = spread.min(worst_case_accumulator_bound(layer, in_bits)).max(count);
    qarith::build_uniform_thresholds(0, hi, layer.act_bits)
}

/// Uniform `[-1, 1)` float weights for every layer, `(out, in, kh, kw)` order.
pub fn random_raw_weights(spec: &NetworkSpec, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.layers()
        .iter()
        .map(|l| {
            (0..l.out_channels * l.matrix_cols())
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect()
        })
        .collect()
}

/// Quantizes float weights to each layer's weight bits and attaches
/// calibrated thresholds to the hidden layers.
pub fn quantize_weights(spec: &NetworkSpec, raw: &[Vec<f32>]) -> Result<Vec<LayerWeights>, PackError> {
    if raw.len() != spec.layers().len() {
        return Err(PackError::Length {
            expected: spec.layers().len(),
            found: raw.len(),
        });
    }
    let mut out = Vec::with_capacity(raw.len());
    for (i, (l, values)) in spec.layers().iter().zip(raw).enumerate() {
        let layer_err = |e: &dyn std::fmt::Display| PackError::Layer {
            layer: i,
            message: e.to_string(),
        };
        let expected = l.out_channels * l.matrix_cols();
        if values.len() != expected {
            return Err(PackError::Layer {
                layer: i,
                message: format!("expected {expected} weights, found {}", values.len()),
            });
        }
        let codes = values
            .iter()
            .map(|&v| qarith::quantize(f64::from(v), l.weight_bits).map(|q| q.code))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| layer_err(&e))?;
        let kernel = Kernel::new(l.out_channels, l.in_channels, l.kernel, codes, l.weight_bits)?;
        let thresholds = match l.activation {
            ActivationKind::ThresholdedRelu => Some(
                calibrate_thresholds(l, &kernel, spec.layer_input_bits(i)).map_err(|e| layer_err(&e))?,
            ),
            ActivationKind::OutputHardtanh => None,
        };
        out.push(LayerWeights { kernel, thresholds });
    }
    Ok(out)
}

pub const WEIGHT_FILE_MAGIC: [u8; 4] = *b"QWT1";
pub const WEIGHT_FILE_VERSION: u16 = 1;

/// Header of a weight file: format version and per-layer dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightFileHeader {
    pub version: u16,
    pub layers: Vec<LayerDims>,
}

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("bad magic {0:?}, expected \"QWT1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    Version(u16),
    #[error("file truncated in {0}")]
    Truncated(Section),
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error("layer {layer}: header field {field} is {found}, config expects {expected}")]
    SpecMismatch {
        layer: usize,
        field: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("layer {layer}: {message}")]
    Invalid { layer: usize, message: String },
    #[error("{0} layers do not fit the u16 layer count")]
    TooManyLayers(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where a truncated read stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    FileHeader,
    Layer(usize),
}

impl std::fmt::Display for Section {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::FileHeader => f.write_str("file header"),
            Self::Layer(i) => write!(f, "layer {i}"),
        }
    }
}

/// Serializes packed layers to the little-endian `QWT1` layout.
pub fn encode_weight_file(packed: &[PackedLayer]) -> Result<Vec<u8>, WeightFileError> {
    let count = u16::try_from(packed.len()).map_err(|_| WeightFileError::TooManyLayers(packed.len()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&WEIGHT_FILE_MAGIC);
    buf.extend_from_slice(&WEIGHT_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for p in packed {
        let d = &p.dims;
        buf.extend_from_slice(&d.in_channels.to_le_bytes());
        buf.extend_from_slice(&d.out_channels.to_le_bytes());
        buf.extend_from_slice(&d.kernel.to_le_bytes());
        buf.extend_from_slice(&d.stride.to_le_bytes());
        buf.extend_from_slice(&d.pad.to_le_bytes());
        buf.push(d.weight_bits);
        buf.push(d.act_bits);
        buf.extend_from_slice(&d.pe.to_le_bytes());
        buf.extend_from_slice(&d.simd.to_le_bytes());
        let thresholds = p.thresholds.as_ref().map(ThresholdSet::thresholds).unwrap_or(&[]);
        buf.extend_from_slice(&(thresholds.len() as u32).to_le_bytes());
        for t in thresholds {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        buf.extend_from_slice(&(p.codes.len() as u64).to_le_bytes());
        buf.extend(p.codes.iter().map(|&c| c as u8));
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: Section,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(WeightFileError::Truncated(self.section)),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WeightFileError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightFileError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, WeightFileError> {
        self.array().map(u64::from_le_bytes)
    }

    fn i64(&mut self) -> Result<i64, WeightFileError> {
        self.array().map(i64::from_le_bytes)
    }
}

/// Parses a `QWT1` byte image.
pub fn decode_weight_file(bytes: &[u8]) -> Result<(WeightFileHeader, Vec<PackedLayer>), WeightFileError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        section: Section::FileHeader,
    };
    let magic: [u8; 4] = r.array()?;
    if magic != WEIGHT_FILE_MAGIC {
        return Err(WeightFileError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != WEIGHT_FILE_VERSION {
        return Err(WeightFileError::Version(version));
    }
    let count = usize::from(r.u16()?);
    let mut layers = Vec::with_capacity(count);
    for layer in 0..count {
        r.section = Section::Layer(layer);
        let invalid = |message: String| WeightFileError::Invalid { layer, message };
        let dims = LayerDims {
            in_channels: r.u32()?,
            out_channels: r.u32()?,
            kernel: r.u16()?,
            stride: r.u16()?,
            pad: r.u16()?,
            weight_bits: r.u8()?,
            act_bits: r.u8()?,
            pe: r.u16()?,
            simd: r.u16()?,
        };
        if dims.pe == 0 || dims.simd == 0 {
            return Err(invalid("PE and SIMD must be at least 1".into()));
        }
        if !(1..=MAX_WEIGHT_BITS).contains(&dims.weight_bits) || !(1..=MAX_ACT_BITS).contains(&dims.act_bits) {
            return Err(invalid(format!(
                "bit widths W{}A{} out of range",
                dims.weight_bits, dims.act_bits
            )));
        }
        let n_thresholds = r.u32()? as usize;
        let mut ts = Vec::with_capacity(n_thresholds.min(1 << 16));
        for _ in 0..n_thresholds {
            ts.push(r.i64()?);
        }
        let thresholds = if n_thresholds == 0 {
            None
        } else {
            Some(ThresholdSet::new(ts, dims.act_bits).map_err(|e| invalid(e.to_string()))?)
        };
        let packed_len = r.u64()?;
        let codes_bytes = r.take(usize::try_from(packed_len).map_err(|_| WeightFileError::Truncated(r.section))?)?;
        if codes_bytes.len() != dims.packed_len() {
            return Err(invalid(format!(
                "packed length {} does not match the tile geometry ({})",
                codes_bytes.len(),
                dims.packed_len()
            )));
        }
        let lim = code_limit(dims.weight_bits);
        let codes: Vec<i8> = codes_bytes.iter().map(|&b| b as i8).collect();
        if let Some(c) = codes.iter().find(|&&c| i32::from(c).abs() > lim) {
            return Err(invalid(format!("weight code {c} outside the {}-bit range", dims.weight_bits)));
        }
        layers.push(PackedLayer { dims, thresholds, codes });
    }
    if r.pos != bytes.len() {
        return Err(WeightFileError::TrailingBytes(bytes.len() - r.pos));
    }
    let header = WeightFileHeader {
        version,
        layers: layers.iter().map(|p| p.dims).collect(),
    };
    Ok((header, layers))
}

pub fn write_weight_file(
    spec: &NetworkSpec,
    packed: &[PackedLayer],
    path: impl AsRef<Path>,
) -> Result<(), WeightFileError> {
    check_packed_against_spec(spec, packed)?;
    let bytes = encode_weight_file(packed)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_weight_file(path: impl AsRef<Path>) -> Result<(WeightFileHeader, Vec<PackedLayer>), WeightFileError> {
    decode_weight_file(&fs::read(path)?)
}

/// Reads a weight file and checks every header field against `spec`.
pub fn load_weights_for(spec: &NetworkSpec, path: impl AsRef<Path>) -> Result<Vec<PackedLayer>, WeightFileError> {
    let (_, packed) = read_weight_file(path)?;
    check_packed_against_spec(spec, &packed)?;
    Ok(packed)
}

/// Header/spec agreement: layer count, every dimension field, and the
/// threshold count implied by each layer's activation.
pub fn check_packed_against_spec(spec: &NetworkSpec, packed: &[PackedLayer]) -> Result<(), WeightFileError> {
    if packed.len() != spec.layers().len() {
        return Err(WeightFileError::SpecMismatch {
            layer: packed.len().min(spec.layers().len()),
            field: "layer_count",
            expected: spec.layers().len() as u64,
            found: packed.len() as u64,
        });
    }
    for (layer, (l, p)) in spec.layers().iter().zip(packed).enumerate() {
        let want = LayerDims::from(l);
        let d = &p.dims;
        let fields: [(&'static str, u64, u64); 9] = [
            ("in_channels", want.in_channels.into(), d.in_channels.into()),
            ("out_channels", want.out_channels.into(), d.out_channels.into()),
            ("kernel", want.kernel.into(), d.kernel.into()),
            ("stride", want.stride.into(), d.stride.into()),
            ("pad", want.pad.into(), d.pad.into()),
            ("weight_bits", want.weight_bits.into(), d.weight_bits.into()),
            ("act_bits", want.act_bits.into(), d.act_bits.into()),
            ("pe", want.pe.into(), d.pe.into()),
            ("simd", want.simd.into(), d.simd.into()),
        ];
        if let Some(&(field, expected, found)) = fields.iter().find(|(_, e, f)| e != f) {
            return Err(WeightFileError::SpecMismatch {
                layer,
                field,
                expected,
                found,
            });
        }
        let n_ts = p.thresholds.as_ref().map_or(0, |t| t.thresholds().len());
        if n_ts != l.threshold_count() {
            return Err(WeightFileError::SpecMismatch {
                layer,
                field: "threshold_count",
                expected: l.threshold_count() as u64,
                found: n_ts as u64,
            });
        }
        if p.codes.len() != d.packed_len() {
            return Err(WeightFileError::SpecMismatch {
                layer,
                field: "packed_length",
                expected: d.packed_len() as u64,
                found: p.codes.len() as u64,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(rows: usize, cols: usize, pe: u16, simd: u16) -> LayerDims {
        // cols = K^2 * C_in with K = 1
        LayerDims {
            in_channels: cols as u32,
            out_channels: rows as u32,
            kernel: 1,
            stride: 1,
            pad: 0,
            weight_bits: 4,
            act_bits: 4,
            pe,
            simd,
        }
    }

    fn matrix(rows: usize, cols: usize, codes: &[i32]) -> QMatrix {
        QMatrix::new(rows, cols, codes.to_vec(), 4).unwrap()
    }

    #[test]
    fn pack_unit_tiles_is_row_major() {
        let m = matrix(2, 2, &[1, 2, 3, 4]);
        let d = dims(2, 2, 1, 1);
        assert_eq!(pack_layer_weights(&m, &d).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(unpack_layer_weights(&[1, 2, 3, 4], &d).unwrap(), m);
    }

    #[test]
    fn pack_single_tile() {
        let m = matrix(2, 2, &[1, 2, 3, 4]);
        let d = dims(2, 2, 2, 2);
        assert_eq!(pack_layer_weights(&m, &d).unwrap(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn pack_column_tiles_interleave() {
        // 2x4, PE=2, SIMD=2: tile (0,0) = [1,2,5,6], tile (0,1) = [3,4,7,8]
        let m = matrix(2, 4, &[1, 2, 3, 4, 5, 6, 7, 8]);
        let d = dims(2, 4, 2, 2);
        assert_eq!(pack_layer_weights(&m, &d).unwrap(), vec![1, 2, 5, 6, 3, 4, 7, 8]);
    }

    #[test]
    fn pack_non_divisible_pads_with_zero() {
        let m = matrix(3, 3, &[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let d = dims(3, 3, 2, 2);
        let p = pack_layer_weights(&m, &d).unwrap();
        assert_eq!(p.len(), 16);
        // oracle: tile-index formula written out by hand
        assert_eq!(p, vec![1, 2, 4, 5, 3, 0, 6, 0, 7, 8, 0, 0, 9, 0, 0, 0]);
        assert_eq!(unpack_layer_weights(&p, &d).unwrap(), m);
    }

    #[test]
    fn unpack_zero_segment() {
        let d = dims(3, 5, 2, 4);
        let m = unpack_layer_weights(&vec![0; d.packed_len()], &d).unwrap();
        assert!(m.codes().iter().all(|&c| c == 0));
    }

    #[test]
    fn pack_rejects_dimension_mismatch() {
        let m = matrix(2, 2, &[1, 2, 3, 4]);
        assert!(matches!(
            pack_layer_weights(&m, &dims(2, 3, 1, 1)),
            Err(PackError::Dims { .. })
        ));
        assert!(matches!(
            unpack_layer_weights(&[0; 3], &dims(2, 2, 1, 1)),
            Err(PackError::Length { .. })
        ));
    }

    #[test]
    fn kernel_matrix_column_order() {
        // 1 out, 2 in, K=2: columns are (kh, kw, c)
        let codes: Vec<i32> = (0..8).collect();
        let k = Kernel::new(1, 2, 2, codes, 4).unwrap();
        let m = k.to_matrix();
        // column (kh=0,kw=1,c=1) -> kernel index (0,1,0,1) = 1*4 + 0*2 + 1 = 5
        assert_eq!(m.get(0, 3), 5);
        assert_eq!(m.codes(), &[0, 4, 1, 5, 2, 6, 3, 7]);
        assert_eq!(Kernel::from_matrix(&m, 2, 2).unwrap(), k);
    }

    fn layer_json(extra: &str) -> String {
        format!(
            r#"{{"name":"t","input_shape":[2,1,1],"layers":[
                {{"out_channels":3,"kernel":4,"stride":1,"pad":0,"weight_bits":4,"act_bits":4,"pe":1,"simd":1}},
                {{"out_channels":1,"kernel":4,"stride":2,"pad":1,"weight_bits":4,"act_bits":4,"pe":1,"simd":1{extra}}}
            ]}}"#
        )
    }

    #[test]
    fn parse_defaults_and_chain() {
        let spec = parse_network_config(&layer_json("")).unwrap();
        assert_eq!(spec.clock_mhz, DEFAULT_CLOCK_MHZ);
        assert_eq!(spec.layers()[1].in_channels, 3);
        assert_eq!(spec.layers()[1].activation, ActivationKind::OutputHardtanh);
        assert_eq!(spec.layers()[0].activation, ActivationKind::ThresholdedRelu);
        assert_eq!(spec.output_shape(), Shape3::new(1, 8, 8));
    }

    #[test]
    fn parse_reports_chaining_layer() {
        let err = parse_network_config(&layer_json(r#","in_channels":5"#)).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Chaining {
                layer: 1,
                expected: 3,
                found: 5
            }
        ));
    }

    #[test]
    fn parse_syntax_error_has_location() {
        let err = parse_network_config("{\"name\": \"x\",\n  \"layers\": [").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err}");
    }

    #[test]
    fn parse_rejects_pad_ge_kernel() {
        let text = layer_json("").replacen(r#""pad":1"#, r#""pad":4"#, 1);
        let err = parse_network_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Range { layer: Some(1), field: "pad", .. }), "{err}");
        assert!(err.to_string().contains("layer 1"));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = parse_network_config(&layer_json("")).unwrap();
        assert_eq!(parse_network_config(&spec.to_config_json()).unwrap(), spec);
    }

    #[test]
    fn weight_file_errors() {
        assert!(matches!(decode_weight_file(b"XXXX\x01\x00\x00\x00"), Err(WeightFileError::BadMagic(_))));
        assert!(matches!(decode_weight_file(b"QWT1\x02\x00\x00\x00"), Err(WeightFileError::Version(2))));
        assert!(matches!(
            decode_weight_file(b"QWT1\x01"),
            Err(WeightFileError::Truncated(Section::FileHeader))
        ));
        assert!(decode_weight_file(b"QWT1\x01\x00\x00\x00").unwrap().1.is_empty());
        assert!(matches!(
            decode_weight_file(b"QWT1\x01\x00\x00\x00\x07"),
            Err(WeightFileError::TrailingBytes(1))
        ));
    }

    #[test]
    fn calibrated_thresholds_are_valid() {
        let spec = parse_network_config(&layer_json("")).unwrap();
        let w = quantize_weights(&spec, &random_raw_weights(&spec, 3)).unwrap();
        let ts = w[0].thresholds.as_ref().unwrap();
        assert_eq!(ts.thresholds().len(), 15);
        assert!(w[1].thresholds.is_none());
    }
}
