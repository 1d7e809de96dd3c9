//! Folding-factor cycle model and throughput estimate.
//!
//! A layer's weight matrix is `H = C_out` rows by `W = K^2 * C_in` columns.
//! PE lanes fold the rows and SIMD lanes fold the columns, so one output
//! pixel costs `ceil(H/PE) * ceil(W/SIMD)` cycles. Layers run as a pipeline;
//! the slowest one sets the frame rate.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::lowering::{self, GeometryError};
use crate::netmodel::{DeconvLayerSpec, NetworkSpec};
use crate::qarith::Shape3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PerfError {
    #[error("folding factor arguments must be at least 1 (h={h}, w={w}, pe={pe}, simd={simd})")]
    ZeroArgument { h: usize, w: usize, pe: usize, simd: usize },
    #[error("clock must be at least 1 Hz")]
    ZeroClock,
    #[error("layer {layer}: {source}")]
    Geometry {
        layer: usize,
        #[source]
        source: GeometryError,
    },
}

/// `ceil(h/pe) * ceil(w/simd)`; equals `h*w / (pe*simd)` when both divide.
pub fn folding_factor(h: usize, w: usize, pe: usize, simd: usize) -> Result<u64, PerfError> {
    if h == 0 || w == 0 || pe == 0 || simd == 0 {
        return Err(PerfError::ZeroArgument { h, w, pe, simd });
    }
    Ok((h.div_ceil(pe) * w.div_ceil(simd)) as u64)
}

/// Cycles for one image: output pixels times the folding factor.
pub fn layer_cycles(layer: &DeconvLayerSpec, in_shape: Shape3) -> Result<u64, GeometryError> {
    let out = lowering::layer_output_shape(layer, in_shape)?;
    let ff = folding_factor(layer.matrix_rows(), layer.matrix_cols(), layer.pe, layer.simd)
        .map_err(|_| GeometryError::ZeroDimension {
            h_in: in_shape.height,
            k: layer.kernel,
            s: layer.stride,
        })?;
    Ok((out.height * out.width) as u64 * ff)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub index: usize,
    /// Matrix rows, `C_out`.
    pub h: usize,
    /// Matrix columns, `K^2 * C_in`.
    pub w: usize,
    pub pe: usize,
    pub simd: usize,
    pub folding_factor: u64,
    pub window_count: u64,
    pub layer_cycles: u64,
    pub weight_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleReport {
    pub network: String,
    pub layers: Vec<LayerReport>,
    pub bottleneck_layer: usize,
    pub bottleneck_cycles: u64,
    pub clock_hz: u64,
    pub estimated_fps: f64,
    pub total_weight_bits: u64,
}

impl CycleReport {
    /// Frame rate as the exact fraction `clock_hz / bottleneck_cycles`.
    pub fn fps_ratio(&self) -> (u64, u64) {
        (self.clock_hz, self.bottleneck_cycles)
    }
}

impl fmt::Display for CycleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "network: {}", self.network)?;
        writeln!(
            f,
            "{:>5} {:>6} {:>7} {:>4} {:>5} {:>10} {:>8} {:>12} {:>11}",
            "layer", "H", "W", "PE", "SIMD", "FF", "windows", "cycles", "weight_bits"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>5} {:>6} {:>7} {:>4} {:>5} {:>10} {:>8} {:>12} {:>11}{}",
                l.index,
                l.h,
                l.w,
                l.pe,
                l.simd,
                l.folding_factor,
                l.window_count,
                l.layer_cycles,
                l.weight_bits,
                if l.index == self.bottleneck_layer { "  <- bottleneck" } else { "" }
            )?;
        }
        writeln!(f, "clock: {} Hz", self.clock_hz)?;
        writeln!(
            f,
            "estimated FPS: {:.3} ({} / {})",
            self.estimated_fps, self.clock_hz, self.bottleneck_cycles
        )?;
        write!(f, "total weight memory: {} bits", self.total_weight_bits)
    }
}

/// Per-layer on-chip bits: weights plus one 64-bit word per threshold.
pub fn layer_memory_bits(layer: &DeconvLayerSpec) -> u64 {
    (layer.matrix_rows() * layer.matrix_cols()) as u64 * u64::from(layer.weight_bits)
        + layer.threshold_count() as u64 * 64
}

pub fn weight_memory_bits(spec: &NetworkSpec) -> u64 {
    spec.layers().iter().map(layer_memory_bits).sum()
}

/// Steady-state throughput of the layer pipeline at `clock_hz`.
pub fn estimate_fps(spec: &NetworkSpec, clock_hz: u64) -> Result<CycleReport, PerfError> {
    if clock_hz == 0 {
        return Err(PerfError::ZeroClock);
    }
    let shapes = spec.shapes();
    let mut layers = Vec::with_capacity(spec.layers().len());
    for (index, l) in spec.layers().iter().enumerate() {
        let out = lowering::layer_output_shape(l, shapes[index])
            .map_err(|source| PerfError::Geometry { layer: index, source })?;
        let ff = folding_factor(l.matrix_rows(), l.matrix_cols(), l.pe, l.simd)?;
        let window_count = (out.height * out.width) as u64;
        layers.push(LayerReport {
            index,
            h: l.matrix_rows(),
            w: l.matrix_cols(),
            pe: l.pe,
            simd: l.simd,
            folding_factor: ff,
            window_count,
            layer_cycles: window_count * ff,
            weight_bits: layer_memory_bits(l),
        });
    }
    // first layer wins ties
    let bottleneck = layers
        .iter()
        .rev()
        .max_by_key(|l| l.layer_cycles)
        .expect("validated spec has layers");
    let (bottleneck_layer, bottleneck_cycles) = (bottleneck.index, bottleneck.layer_cycles);
    Ok(CycleReport {
        network: spec.name.clone(),
        bottleneck_layer,
        bottleneck_cycles,
        clock_hz,
        estimated_fps: clock_hz as f64 / bottleneck_cycles as f64,
        total_weight_bits: weight_memory_bits(spec),
        layers,
    })
}
