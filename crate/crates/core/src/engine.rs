//! Streaming dataflow core.
//!
//! Each layer owns a [`LayerEngine`]: a sliding-window generator fed pixel by
//! pixel from upstream, followed by a matrix-vector-threshold unit (MVTU) that
//! walks the packed weight stream in `PE x SIMD` tiles. Layers talk to each
//! other only through bounded FIFOs of integer codes.

use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::lowering::{self, GeometryError, LoweredConv};
use crate::netmodel::{self, ActivationKind, DeconvLayerSpec, LayerDims, NetworkSpec, PackedLayer, OUTPUT_BITS};
use crate::qarith::{self, code_limit, QTensor, QuantError, Shape3};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("window width {found} does not match the weight matrix ({expected} columns)")]
    WindowWidth { expected: usize, found: usize },
    #[error("packed weights do not match the layer: {0}")]
    Weights(String),
    #[error("input stream ended after {consumed} of {expected} codes")]
    InputExhausted { consumed: usize, expected: usize },
    #[error("accumulator {acc} exceeds the bound {bound}")]
    AccumulatorOverflow { acc: i64, bound: i64 },
    #[error("window at row {row} needs expanded row {missing}, which is not resident")]
    RowNotResident { row: usize, missing: usize },
    #[error("ring buffer holds {occupancy} codes, above its capacity {capacity}")]
    RingOverflow { occupancy: usize, capacity: usize },
    #[error("downstream stage stopped")]
    PipelineAborted,
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<EngineError>,
    },
}

impl EngineError {
    fn at_layer(self, index: usize) -> Self {
        Self::Layer {
            index,
            source: Box::new(self),
        }
    }
}

/// `K` row slots over the expanded input, addressed by expanded row modulo
/// `K`. Only rows that carry input pixels hold storage, and they hold just
/// those pixels; zero rows and inserted zero columns are implied by
/// coordinates.
#[derive(Debug)]
pub struct RingBuffer {
    slots: Vec<Option<(usize, Vec<i32>)>>,
    capacity: usize,
    occupancy: usize,
    peak: usize,
}

impl RingBuffer {
    fn new(lc: &LoweredConv) -> Self {
        let k = lc.conv_kernel;
        Self {
            slots: vec![None; k],
            capacity: k * lc.expanded_shape.width * lc.in_shape.channels,
            occupancy: 0,
            peak: 0,
        }
    }

    /// Write cursor for expanded row `row`; evicts the row `K` above it.
    fn store(&mut self, row: usize, data: Option<Vec<i32>>) -> Result<(), EngineError> {
        let k = self.slots.len();
        let slot = &mut self.slots[row % k];
        if let Some((_, old)) = slot.take() {
            self.occupancy -= old.len();
        }
        let data = data.unwrap_or_default();
        self.occupancy += data.len();
        *slot = Some((row, data));
        self.peak = self.peak.max(self.occupancy);
        if self.occupancy > self.capacity {
            return Err(EngineError::RingOverflow {
                occupancy: self.occupancy,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    fn row(&self, row: usize) -> Option<&[i32]> {
        match &self.slots[row % self.slots.len()] {
            Some((r, data)) if *r == row => Some(data),
            _ => None,
        }
    }

    /// Largest number of codes resident at any time.
    pub fn peak_occupancy(&self) -> usize {
        self.peak
    }

    /// `K * W_e * C_in`.
    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Emits `K x K x C_in` windows over the expanded input in raster order while
/// reading the compact input stream exactly once.
pub struct WindowGenerator<I> {
    lc: LoweredConv,
    input: I,
    ring: RingBuffer,
    rows_loaded: usize,
    next_pixel: usize,
    consumed: usize,
}

impl<I: Iterator<Item = i32>> WindowGenerator<I> {
    pub fn new(lc: LoweredConv, input: I) -> Self {
        Self {
            ring: RingBuffer::new(&lc),
            lc,
            input,
            rows_loaded: 0,
            next_pixel: 0,
            consumed: 0,
        }
    }

    pub fn window_count(&self) -> usize {
        self.lc.out_shape.height * self.lc.out_shape.width
    }

    pub fn ring(&self) -> &RingBuffer {
        &self.ring
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    fn load_row(&mut self, row: usize) -> Result<(), EngineError> {
        let ins = self.lc.in_shape;
        let data = match self.lc.source_index(row, ins.height) {
            Some(_) => {
                let n = ins.width * ins.channels;
                let mut v = Vec::with_capacity(n);
                v.extend(self.input.by_ref().take(n));
                self.consumed += v.len();
                if v.len() != n {
                    return Err(EngineError::InputExhausted {
                        consumed: self.consumed,
                        expected: ins.len(),
                    });
                }
                Some(v)
            }
            None => None,
        };
        self.ring.store(row, data)
    }

    /// Writes the next window into `buf`. Returns `false` once every output
    /// pixel has been covered.
    pub fn next_window(&mut self, buf: &mut [i32]) -> Result<bool, EngineError> {
        let lc = self.lc;
        let (k, c_in) = (lc.conv_kernel, lc.in_shape.channels);
        if buf.len() != lc.window_len() {
            return Err(EngineError::WindowWidth {
                expected: lc.window_len(),
                found: buf.len(),
            });
        }
        if self.next_pixel >= self.window_count() {
            return Ok(false);
        }
        let y = self.next_pixel / lc.out_shape.width;
        let x = self.next_pixel % lc.out_shape.width;
        while self.rows_loaded < y + k {
            self.load_row(self.rows_loaded)?;
            self.rows_loaded += 1;
        }
        for kh in 0..k {
            let row = self
                .ring
                .row(y + kh)
                .ok_or(EngineError::RowNotResident { row: y, missing: y + kh })?;
            for kw in 0..k {
                let dst = &mut buf[(kh * k + kw) * c_in..][..c_in];
                match lc.source_index(x + kw, lc.in_shape.width).filter(|_| !row.is_empty()) {
                    Some(j) => dst.copy_from_slice(&row[j * c_in..(j + 1) * c_in]),
                    None => dst.fill(0),
                }
            }
        }
        self.next_pixel += 1;
        Ok(true)
    }
}

/// All windows of one feature map, flattened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowStream {
    pub window_len: usize,
    pub data: Vec<i32>,
    pub peak_occupancy: usize,
    pub occupancy_bound: usize,
    pub consumed: usize,
}

impl WindowStream {
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.window_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn windows(&self) -> impl Iterator<Item = &[i32]> {
        self.data.chunks_exact(self.window_len)
    }
}

/// Runs the window generator over a whole feature map.
pub fn sliding_windows(fm: &QTensor, lc: &LoweredConv) -> Result<WindowStream, EngineError> {
    if fm.shape() != lc.in_shape {
        return Err(GeometryError::ShapeMismatch {
            expected: lc.in_shape,
            found: fm.shape(),
        }
        .into());
    }
    let mut gen = WindowGenerator::new(*lc, fm.codes().iter().copied());
    let window_len = lc.window_len();
    let mut data = vec![0; gen.window_count() * window_len];
    for chunk in data.chunks_exact_mut(window_len) {
        gen.next_window(chunk)?;
    }
    Ok(WindowStream {
        window_len,
        data,
        peak_occupancy: gen.ring().peak_occupancy(),
        occupancy_bound: gen.ring().capacity(),
        consumed: gen.consumed(),
    })
}

/// One layer's engine: lowered geometry, packed weights and output stage.
#[derive(Debug, Clone)]
pub struct LayerEngine {
    pub layer: DeconvLayerSpec,
    pub lowered: LoweredConv,
    pub weights: PackedLayer,
    pub in_bits: u8,
    acc_bound: i64,
}

impl LayerEngine {
    pub fn new(layer: &DeconvLayerSpec, in_shape: Shape3, in_bits: u8, weights: PackedLayer) -> Result<Self, EngineError> {
        let lowered = lowering::lower_layer(layer, in_shape)?;
        if weights.dims != LayerDims::from(layer) {
            return Err(EngineError::Weights(format!(
                "header {:?} vs layer {:?}",
                weights.dims,
                LayerDims::from(layer)
            )));
        }
        if weights.codes.len() != layer.packed_len() {
            return Err(EngineError::Weights(format!(
                "{} packed codes, tiling needs {}",
                weights.codes.len(),
                layer.packed_len()
            )));
        }
        match (layer.activation, &weights.thresholds) {
            (ActivationKind::ThresholdedRelu, Some(ts)) if ts.out_bits() == layer.act_bits => {}
            (ActivationKind::OutputHardtanh, None) => {}
            _ => return Err(EngineError::Weights("threshold set does not fit the activation".into())),
        }
        Ok(Self {
            layer: *layer,
            lowered,
            weights,
            in_bits,
            acc_bound: netmodel::worst_case_accumulator_bound(layer, in_bits),
        })
    }

    pub fn out_bits(&self) -> u8 {
        match self.layer.activation {
            ActivationKind::ThresholdedRelu => self.layer.act_bits,
            ActivationKind::OutputHardtanh => OUTPUT_BITS,
        }
    }

    /// Fold trips needed for one window: `ceil(C_out/PE) * ceil(K^2 C_in/SIMD)`.
    pub fn trips_per_window(&self) -> u64 {
        (self.layer.row_tiles() * self.layer.col_tiles()) as u64
    }

    /// Accumulates one window through the folded tile schedule. Returns the
    /// number of fold trips taken.
    fn accumulate(&self, window: &[i32], acc: &mut [i64]) -> Result<u64, EngineError> {
        let (pe, simd) = (self.layer.pe, self.layer.simd);
        let (rows, cols) = (self.layer.matrix_rows(), self.layer.matrix_cols());
        if window.len() != cols {
            return Err(EngineError::WindowWidth {
                expected: cols,
                found: window.len(),
            });
        }
        let col_tiles = self.layer.col_tiles();
        acc.fill(0);
        let mut trips = 0;
        let mut tile = self.weights.codes.chunks_exact(pe * simd);
        for rt in 0..self.layer.row_tiles() {
            for ct in 0..col_tiles {
                let block = tile.next().expect("packed length checked");
                trips += 1;
                let c0 = ct * simd;
                let lanes = simd.min(cols - c0);
                let inputs = &window[c0..c0 + lanes];
                for (p, wrow) in block.chunks_exact(simd).enumerate() {
                    let r = rt * pe + p;
                    if r >= rows {
                        break;
                    }
                    let dot: i64 = wrow[..lanes]
                        .iter()
                        .zip(inputs)
                        .map(|(&w, &x)| i64::from(w) * i64::from(x))
                        .sum();
                    acc[r] += dot;
                }
            }
        }
        if let Some(&a) = acc.iter().find(|a| a.abs() > self.acc_bound) {
            return Err(EngineError::AccumulatorOverflow {
                acc: a,
                bound: self.acc_bound,
            });
        }
        Ok(trips)
    }

    fn activate(&self, acc: i64) -> Result<i32, EngineError> {
        Ok(match &self.weights.thresholds {
            Some(ts) => qarith::apply_thresholds(acc, ts) as i32,
            None => qarith::hardtanh_output_code(
                acc,
                u32::from(self.layer.weight_bits) + u32::from(self.in_bits),
                OUTPUT_BITS,
            )?,
        })
    }

    /// Streams one image through the layer: reads exactly `H_in*W_in*C_in`
    /// codes from `input` and hands each output pixel (`C_out` codes) to
    /// `emit`.
    pub fn run_stream<I, F>(&self, input: I, mut emit: F) -> Result<LayerStats, EngineError>
    where
        I: Iterator<Item = i32>,
        F: FnMut(&[i32]) -> Result<(), EngineError>,
    {
        let mut gen = WindowGenerator::new(self.lowered, input);
        let mut window = vec![0; self.lowered.window_len()];
        let mut acc = vec![0i64; self.layer.out_channels];
        let mut pixel = vec![0; self.layer.out_channels];
        let mut stats = LayerStats::default();
        while gen.next_window(&mut window)? {
            stats.windows += 1;
            stats.trip_count += self.accumulate(&window, &mut acc)?;
            for (o, &a) in pixel.iter_mut().zip(&acc) {
                *o = self.activate(a)?;
            }
            stats.produced += pixel.len();
            emit(&pixel)?;
        }
        stats.consumed = gen.consumed();
        stats.peak_occupancy = gen.ring().peak_occupancy();
        stats.occupancy_bound = gen.ring().capacity();
        Ok(stats)
    }

    pub fn run(&self, input: &QTensor) -> Result<(QTensor, LayerStats), EngineError> {
        if input.shape() != self.lowered.in_shape {
            return Err(GeometryError::ShapeMismatch {
                expected: self.lowered.in_shape,
                found: input.shape(),
            }
            .into());
        }
        let mut out = Vec::with_capacity(self.lowered.out_shape.len());
        let stats = self.run_stream(input.codes().iter().copied(), |px| {
            out.extend_from_slice(px);
            Ok(())
        })?;
        Ok((QTensor::new(self.lowered.out_shape, out, self.out_bits())?, stats))
    }
}

/// Counters collected while a layer processes one image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LayerStats {
    pub windows: usize,
    pub trip_count: u64,
    pub consumed: usize,
    pub produced: usize,
    pub peak_occupancy: usize,
    pub occupancy_bound: usize,
}

/// MVTU over a materialized window stream.
pub fn mvtu_forward(ws: &WindowStream, le: &LayerEngine) -> Result<(QTensor, u64), EngineError> {
    if ws.window_len != le.layer.matrix_cols() {
        return Err(EngineError::WindowWidth {
            expected: le.layer.matrix_cols(),
            found: ws.window_len,
        });
    }
    let out_shape = le.lowered.out_shape;
    if ws.len() != out_shape.height * out_shape.width {
        return Err(EngineError::Weights(format!(
            "{} windows for a {}x{} output",
            ws.len(),
            out_shape.height,
            out_shape.width
        )));
    }
    let mut acc = vec![0i64; le.layer.out_channels];
    let mut codes = Vec::with_capacity(out_shape.len());
    let mut trips = 0;
    for w in ws.windows() {
        trips += le.accumulate(w, &mut acc)?;
        for &a in &acc {
            codes.push(le.activate(a)?);
        }
    }
    Ok((QTensor::new(out_shape, codes, le.out_bits())?, trips))
}

/// Builds one engine per layer.
pub fn build_engines(spec: &NetworkSpec, weights: &[PackedLayer]) -> Result<Vec<LayerEngine>, EngineError> {
    if weights.len() != spec.layers().len() {
        return Err(EngineError::Weights(format!(
            "{} weight segments for {} layers",
            weights.len(),
            spec.layers().len()
        )));
    }
    let shapes = spec.shapes();
    spec.layers()
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (l, w))| {
            LayerEngine::new(l, shapes[i], spec.layer_input_bits(i), w.clone()).map_err(|e| e.at_layer(i))
        })
        .collect()
}

/// Output of a full generator pass.
#[derive(Debug, Clone)]
pub struct NetworkRun {
    pub output: QTensor,
    pub stats: Vec<LayerStats>,
    /// Outputs of every layer but the last; empty for pipelined runs.
    pub intermediates: Vec<QTensor>,
}

fn check_input(spec: &NetworkSpec, z: &QTensor) -> Result<(), EngineError> {
    if z.shape() != spec.input_shape || z.scale_n() != spec.input_bits() {
        return Err(EngineError::Layer {
            index: 0,
            source: Box::new(
                GeometryError::ShapeMismatch {
                    expected: spec.input_shape,
                    found: z.shape(),
                }
                .into(),
            ),
        });
    }
    Ok(())
}

/// Runs the layers one after another on whole tensors.
pub fn run_network(spec: &NetworkSpec, weights: &[PackedLayer], z: &QTensor) -> Result<NetworkRun, EngineError> {
    let engines = build_engines(spec, weights)?;
    check_input(spec, z)?;
    let mut stats = Vec::with_capacity(engines.len());
    let mut intermediates = Vec::with_capacity(engines.len());
    let mut current = z.clone();
    for (i, e) in engines.iter().enumerate() {
        let (out, s) = e.run(&current).map_err(|e| e.at_layer(i))?;
        stats.push(s);
        intermediates.push(std::mem::replace(&mut current, out));
    }
    intermediates.remove(0);
    Ok(NetworkRun {
        output: current,
        stats,
        intermediates,
    })
}

/// Depth of the FIFO in front of each layer engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FifoDepth {
    /// One expanded row of the consuming layer, `W_e * C_in` codes.
    #[default]
    ExpandedRow,
    Codes(usize),
}

/// Runs every layer engine on its own thread, connected by bounded FIFOs.
pub fn run_network_pipelined(
    spec: &NetworkSpec,
    weights: &[PackedLayer],
    z: &QTensor,
    depth: FifoDepth,
) -> Result<NetworkRun, EngineError> {
    let engines = build_engines(spec, weights)?;
    check_input(spec, z)?;
    let capacity = |e: &LayerEngine| match depth {
        FifoDepth::ExpandedRow => e.lowered.expanded_shape.width * e.lowered.in_shape.channels,
        FifoDepth::Codes(n) => n.max(1),
    };
    let n = engines.len();
    let out_shape = engines[n - 1].lowered.out_shape;

    let (results, output) = thread::scope(|scope| {
        let mut receivers: Vec<Option<Receiver<i32>>> = Vec::with_capacity(n);
        let mut senders: Vec<Option<SyncSender<i32>>> = Vec::with_capacity(n);
        for e in &engines[1..] {
            let (tx, rx) = mpsc::sync_channel(capacity(e));
            senders.push(Some(tx));
            receivers.push(Some(rx));
        }
        let mut handles = Vec::with_capacity(n);
        for (i, e) in engines.iter().enumerate() {
            let rx = if i == 0 { None } else { receivers[i - 1].take() };
            let tx = senders.get_mut(i).and_then(Option::take);
            let z_codes = z.codes();
            handles.push(scope.spawn(move || -> Result<(LayerStats, Vec<i32>), EngineError> {
                let mut collected = Vec::new();
                let emit = |px: &[i32]| -> Result<(), EngineError> {
                    match &tx {
                        Some(tx) => px
                            .iter()
                            .try_for_each(|&c| tx.send(c))
                            .map_err(|_| EngineError::PipelineAborted),
                        None => {
                            collected.extend_from_slice(px);
                            Ok(())
                        }
                    }
                };
                let stats = match rx {
                    Some(rx) => e.run_stream(rx.into_iter(), emit)?,
                    None => e.run_stream(z_codes.iter().copied(), emit)?,
                };
                Ok((stats, collected))
            }));
        }
        let mut results = Vec::with_capacity(n);
        let mut output = Vec::new();
        for h in handles {
            match h.join().expect("layer thread panicked") {
                Ok((s, collected)) => {
                    output = collected;
                    results.push(Ok(s));
                }
                Err(e) => results.push(Err(e)),
            }
        }
        (results, output)
    });

    // A failing stage closes its FIFOs: upstream sees PipelineAborted, downstream
    // sees a short input. The first non-abort error in layer order is the cause.
    if results.iter().any(Result::is_err) {
        let cause = results
            .iter()
            .position(|r| matches!(r, Err(e) if !matches!(e, EngineError::PipelineAborted)))
            .or_else(|| results.iter().position(Result::is_err))
            .expect("at least one error");
        let err = results.into_iter().nth(cause).and_then(Result::err).expect("error at cause");
        return Err(err.at_layer(cause));
    }
    let stats = results.into_iter().map(|r| r.expect("checked")).collect();
    Ok(NetworkRun {
        output: QTensor::new(out_shape, output, engines[n - 1].out_bits())?,
        stats,
        intermediates: Vec::new(),
    })
}

/// Noise tensor with codes drawn uniformly from `[-2^n, 2^n]` by ChaCha8
/// seeded through `seed_from_u64`, in streaming order.
pub fn generate_noise(seed: u64, shape: Shape3, bits: u8) -> Result<QTensor, QuantError> {
    if bits == 0 || bits > qarith::MAX_BITS {
        return Err(QuantError::BitWidth(bits));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lim = code_limit(bits);
    let codes = (0..shape.len()).map(|_| rng.gen_range(-lim..=lim)).collect();
    QTensor::new(shape, codes, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{pack_layer, Kernel, LayerWeights};
    use crate::qarith::ThresholdSet;

    fn lowered(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> LoweredConv {
        lowering::lower_layer(&DeconvLayerSpec::new(c, 1, k, s, p), Shape3::new(c, h, w)).unwrap()
    }

    /// Patch extraction from the materialized expanded map.
    fn naive_windows(fm: &QTensor, lc: &LoweredConv) -> Vec<i32> {
        let e = lowering::expand_input(fm, lc).unwrap();
        let k = lc.conv_kernel;
        let mut out = Vec::new();
        for y in 0..lc.out_shape.height {
            for x in 0..lc.out_shape.width {
                for kh in 0..k {
                    for kw in 0..k {
                        for c in 0..lc.in_shape.channels {
                            out.push(e.get(c, y + kh, x + kw));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn plain_conv_windows() {
        let fm = QTensor::new(Shape3::new(1, 3, 3), (1..=9).collect(), 4).unwrap();
        let lc = lowered(1, 3, 3, 2, 1, 1);
        let ws = sliding_windows(&fm, &lc).unwrap();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws.windows().next().unwrap(), &[1, 2, 4, 5]);
        assert_eq!(ws.data, naive_windows(&fm, &lc));
    }

    #[test]
    fn single_pixel_strided_windows() {
        let fm = QTensor::new(Shape3::new(1, 1, 1), vec![7], 3).unwrap();
        let lc = lowered(1, 1, 1, 4, 2, 1);
        assert_eq!(lc.expanded_shape.height, 5);
        let ws = sliding_windows(&fm, &lc).unwrap();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws.data, naive_windows(&fm, &lc));
        assert_eq!(ws.consumed, 1);
    }

    #[test]
    fn unit_kernel_windows_are_pixels() {
        let fm = QTensor::new(Shape3::new(2, 2, 2), (0..8).map(|v| v - 4).collect(), 3).unwrap();
        let lc = lowered(2, 2, 2, 1, 3, 0);
        let e = lowering::expand_input(&fm, &lc).unwrap();
        let ws = sliding_windows(&fm, &lc).unwrap();
        assert_eq!(ws.data, e.codes());
    }

    #[test]
    fn ring_stays_within_bound() {
        let fm = generate_noise(5, Shape3::new(3, 5, 4), 3).unwrap();
        for (k, s, p) in [(5, 3, 0), (3, 1, 1), (4, 2, 1), (2, 3, 1)] {
            let lc = lowered(3, 5, 4, k, s, p);
            let ws = sliding_windows(&fm, &lc).unwrap();
            assert!(ws.peak_occupancy <= ws.occupancy_bound);
            assert_eq!(ws.data, naive_windows(&fm, &lc), "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn short_input_is_reported() {
        let lc = lowered(1, 2, 2, 2, 1, 0);
        let mut gen = WindowGenerator::new(lc, [1, 2, 3].into_iter());
        let mut buf = vec![0; 4];
        let err = loop {
            match gen.next_window(&mut buf) {
                Ok(true) => continue,
                Ok(false) => panic!("short input ran to completion"),
                Err(e) => break e,
            }
        };
        assert!(matches!(err, EngineError::InputExhausted { .. }));
    }

    fn engine_for(w: &[i32], rows: usize, cols: usize, ts: Option<ThresholdSet>, pe: usize, simd: usize) -> LayerEngine {
        let mut layer = DeconvLayerSpec::new(cols, rows, 1, 1, 0).with_parallelism(pe, simd);
        match &ts {
            Some(t) => layer.act_bits = t.out_bits(),
            None => layer.activation = ActivationKind::OutputHardtanh,
        }
        let kernel = Kernel::new(rows, cols, 1, w.to_vec(), 4).unwrap();
        let packed = pack_layer(&layer, &LayerWeights { kernel, thresholds: ts }, lowering::flip_kernel).unwrap();
        LayerEngine::new(&layer, Shape3::new(cols, 1, 1), 4, packed).unwrap()
    }

    #[test]
    fn scalar_mac_threshold() {
        let ts = ThresholdSet::new(vec![2], 1).unwrap();
        let le = engine_for(&[3], 1, 1, Some(ts), 1, 1);
        let ws = WindowStream {
            window_len: 1,
            data: vec![1],
            peak_occupancy: 0,
            occupancy_bound: 0,
            consumed: 1,
        };
        let (out, trips) = mvtu_forward(&ws, &le).unwrap();
        assert_eq!(out.codes(), &[1]);
        assert_eq!(trips, 1);
    }

    #[test]
    fn two_pe_scalar_case() {
        let ts = ThresholdSet::new(vec![2], 1).unwrap();
        let le = engine_for(&[1, 1, 2, 0], 2, 2, Some(ts), 2, 1);
        let ws = WindowStream {
            window_len: 2,
            data: vec![1, 2],
            peak_occupancy: 0,
            occupancy_bound: 0,
            consumed: 2,
        };
        let (out, trips) = mvtu_forward(&ws, &le).unwrap();
        assert_eq!(out.codes(), &[1, 1]);
        assert_eq!(trips, 2);
    }

    #[test]
    fn mvtu_rejects_wrong_width() {
        let le = engine_for(&[1, 1], 1, 2, None, 1, 1);
        let ws = WindowStream {
            window_len: 3,
            data: vec![0; 3],
            peak_occupancy: 0,
            occupancy_bound: 0,
            consumed: 0,
        };
        assert!(matches!(mvtu_forward(&ws, &le), Err(EngineError::WindowWidth { .. })));
    }

    #[test]
    fn overflow_is_detected() {
        let le = engine_for(&[16], 1, 1, None, 1, 1);
        // in_bits = 4 allows |x| <= 16; 1000 is out of contract
        let mut acc = [0i64];
        assert!(matches!(
            le.accumulate(&[1000], &mut acc),
            Err(EngineError::AccumulatorOverflow { .. })
        ));
    }

    #[test]
    fn noise_is_seeded() {
        let s = Shape3::new(100, 1, 1);
        let a = generate_noise(42, s, 4).unwrap();
        assert_eq!(a, generate_noise(42, s, 4).unwrap());
        assert_ne!(a, generate_noise(43, s, 4).unwrap());
        assert!(a.codes().iter().all(|c| c.abs() <= 16));
    }
}
