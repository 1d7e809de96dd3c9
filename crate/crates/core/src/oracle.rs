//! Brute-force reference semantics.
//!
//! The reference deconvolution scatters every input pixel into the output
//! through the kernel and crops the padding afterwards. It never expands,
//! flips, windows or tiles anything, so it shares no code path with the
//! engine beyond the final activation functions from [`crate::qarith`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{self, EngineError, LayerStats};
use crate::lowering::GeometryError;
use crate::netmodel::{self, DeconvLayerSpec, Kernel, LayerWeights, NetworkSpec, PackError, OUTPUT_BITS};
use crate::perfmodel;
use crate::qarith::{self, QTensor, QuantError, Shape3};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("layer {layer}: {message}")]
    Weights { layer: usize, message: String },
}

/// Raw accumulators of a deconvolution, channel-major `(o, y, x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i64>,
}

impl AccTensor {
    pub fn get(&self, o: usize, y: usize, x: usize) -> i64 {
        self.data[(o * self.height + y) * self.width + x]
    }
}

/// Scatter-add transpose convolution on integer codes.
pub fn deconv_reference(fm: &QTensor, w: &Kernel, s: usize, p: usize) -> Result<AccTensor, GeometryError> {
    let inp = fm.shape();
    let k = w.size();
    if w.in_channels() != inp.channels {
        return Err(GeometryError::ShapeMismatch {
            expected: Shape3::new(w.in_channels(), inp.height, inp.width),
            found: inp,
        });
    }
    if s == 0 || k == 0 || inp.height == 0 || inp.width == 0 {
        return Err(GeometryError::ZeroDimension { h_in: inp.height, k, s });
    }
    if p >= k {
        return Err(GeometryError::PadTooLarge { p, k });
    }
    let full_h = (inp.height - 1) * s + k;
    let full_w = (inp.width - 1) * s + k;
    if full_h <= 2 * p || full_w <= 2 * p {
        return Err(GeometryError::EmptyOutput {
            h_in: inp.height.min(inp.width),
            k,
            s,
            p,
        });
    }
    let c_out = w.out_channels();
    let mut full = vec![0i64; c_out * full_h * full_w];
    for c in 0..inp.channels {
        for i in 0..inp.height {
            for j in 0..inp.width {
                let v = i64::from(fm.get(c, i, j));
                if v == 0 {
                    continue;
                }
                for o in 0..c_out {
                    for kh in 0..k {
                        for kw in 0..k {
                            full[(o * full_h + i * s + kh) * full_w + j * s + kw] += i64::from(w.get(o, c, kh, kw)) * v;
                        }
                    }
                }
            }
        }
    }
    let (h, wd) = (full_h - 2 * p, full_w - 2 * p);
    let mut data = Vec::with_capacity(c_out * h * wd);
    for o in 0..c_out {
        for y in 0..h {
            let row = (o * full_h + y + p) * full_w + p;
            data.extend_from_slice(&full[row..row + wd]);
        }
    }
    Ok(AccTensor {
        channels: c_out,
        height: h,
        width: wd,
        data,
    })
}

fn activate_layer(
    acc: &AccTensor,
    layer: &DeconvLayerSpec,
    weights: &LayerWeights,
    in_bits: u8,
) -> Result<QTensor, QuantError> {
    let shape = Shape3::new(acc.channels, acc.height, acc.width);
    let mut codes = vec![0; shape.len()];
    let shift = u32::from(layer.weight_bits) + u32::from(in_bits);
    for o in 0..acc.channels {
        for y in 0..acc.height {
            for x in 0..acc.width {
                let a = acc.get(o, y, x);
                codes[shape.index(o, y, x)] = match &weights.thresholds {
                    Some(ts) => qarith::apply_thresholds(a, ts) as i32,
                    None => qarith::hardtanh_output_code(a, shift, OUTPUT_BITS)?,
                };
            }
        }
    }
    let bits = match &weights.thresholds {
        Some(ts) => ts.out_bits(),
        None => OUTPUT_BITS,
    };
    QTensor::new(shape, codes, bits)
}

/// Evaluates the generator layer by layer with [`deconv_reference`].
/// Returns the output of every layer, the image last.
pub fn network_reference(
    spec: &NetworkSpec,
    weights: &[LayerWeights],
    z: &QTensor,
) -> Result<Vec<QTensor>, OracleError> {
    if weights.len() != spec.layers().len() {
        return Err(OracleError::Weights {
            layer: weights.len().min(spec.layers().len()),
            message: format!("{} weight sets for {} layers", weights.len(), spec.layers().len()),
        });
    }
    let mut outputs: Vec<QTensor> = Vec::with_capacity(weights.len());
    for (i, (layer, w)) in spec.layers().iter().zip(weights).enumerate() {
        let input = outputs.last().unwrap_or(z);
        let acc = deconv_reference(input, &w.kernel, layer.stride, layer.pad)?;
        outputs.push(activate_layer(&acc, layer, w, spec.layer_input_bits(i))?);
    }
    Ok(outputs)
}

/// First disagreement between engine and oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub trial: usize,
    pub noise_seed: u64,
    pub layer: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
    pub engine_code: i32,
    pub oracle_code: i32,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "trial {} (noise seed {}): layer {} at (c={}, y={}, x={}): engine {} vs oracle {}",
            self.trial, self.noise_seed, self.layer, self.channel, self.row, self.col, self.engine_code, self.oracle_code
        )
    }
}

/// Outcome of comparing engine and oracle over many inputs.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub mismatch: Option<Mismatch>,
    /// Largest ring-buffer occupancy seen, and the bound of the layer it occurred in.
    pub peak_occupancy: usize,
    pub peak_occupancy_bound: usize,
    /// Any layer whose ring buffer went above `K * W_e * C_in`.
    pub occupancy_violations: usize,
    /// Layers whose MVTU trip count differed from the cycle model.
    pub trip_count_violations: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none() && self.occupancy_violations == 0 && self.trip_count_violations == 0
    }

    fn absorb(&mut self, other: &VerifyReport) {
        self.trials += other.trials;
        if self.mismatch.is_none() {
            self.mismatch = other.mismatch.clone();
        }
        if other.peak_occupancy * self.peak_occupancy_bound.max(1)
            >= self.peak_occupancy * other.peak_occupancy_bound.max(1)
        {
            self.peak_occupancy = other.peak_occupancy;
            self.peak_occupancy_bound = other.peak_occupancy_bound;
        }
        self.occupancy_violations += other.occupancy_violations;
        self.trip_count_violations += other.trip_count_violations;
    }
}

fn first_difference(trial: usize, noise_seed: u64, layer: usize, engine: &QTensor, oracle: &QTensor) -> Option<Mismatch> {
    let s = oracle.shape();
    if engine.shape() != s {
        return Some(Mismatch {
            trial,
            noise_seed,
            layer,
            channel: 0,
            row: 0,
            col: 0,
            engine_code: engine.codes().len() as i32,
            oracle_code: oracle.codes().len() as i32,
        });
    }
    let idx = engine.codes().iter().zip(oracle.codes()).position(|(a, b)| a != b)?;
    let (pixel, channel) = (idx / s.channels, idx % s.channels);
    Some(Mismatch {
        trial,
        noise_seed,
        layer,
        channel,
        row: pixel / s.width,
        col: pixel % s.width,
        engine_code: engine.codes()[idx],
        oracle_code: oracle.codes()[idx],
    })
}

fn check_stats(spec: &NetworkSpec, stats: &[LayerStats], report: &mut VerifyReport) {
    let shapes = spec.shapes();
    for (i, (layer, s)) in spec.layers().iter().zip(stats).enumerate() {
        if s.peak_occupancy > s.occupancy_bound {
            report.occupancy_violations += 1;
        }
        if s.peak_occupancy * report.peak_occupancy_bound.max(1) >= report.peak_occupancy * s.occupancy_bound.max(1) {
            report.peak_occupancy = s.peak_occupancy;
            report.peak_occupancy_bound = s.occupancy_bound;
        }
        match perfmodel::layer_cycles(layer, shapes[i]) {
            Ok(cycles) if cycles == s.trip_count => {}
            _ => report.trip_count_violations += 1,
        }
    }
}

fn trial_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Runs engine and oracle on `n_trials` seeded noise inputs.
pub fn equivalence_check(
    spec: &NetworkSpec,
    weights: &[LayerWeights],
    n_trials: usize,
    seed: u64,
) -> Result<VerifyReport, OracleError> {
    equivalence_check_with(spec, weights, n_trials, seed, crate::lowering::flip_kernel)
}

/// [`equivalence_check`] with the engine's kernel lowering swapped out, for
/// mutation testing.
pub fn equivalence_check_with(
    spec: &NetworkSpec,
    weights: &[LayerWeights],
    n_trials: usize,
    seed: u64,
    kernel_transform: fn(&Kernel) -> Kernel,
) -> Result<VerifyReport, OracleError> {
    if n_trials == 0 {
        return Err(OracleError::NoTrials);
    }
    let packed = netmodel::pack_network_with(spec, weights, kernel_transform)?;
    let seeds = trial_seeds(seed, n_trials);
    let reports = seeds
        .par_iter()
        .enumerate()
        .map(|(trial, &noise_seed)| -> Result<VerifyReport, OracleError> {
            let z = engine::generate_noise(noise_seed, spec.input_shape, spec.input_bits())?;
            let run = engine::run_network(spec, &packed, &z)?;
            let reference = network_reference(spec, weights, &z)?;
            let mut report = VerifyReport {
                trials: 1,
                ..Default::default()
            };
            let engine_outputs = run.intermediates.iter().chain(std::iter::once(&run.output));
            report.mismatch = engine_outputs
                .zip(&reference)
                .enumerate()
                .find_map(|(layer, (e, o))| first_difference(trial, noise_seed, layer, e, o));
            check_stats(spec, &run.stats, &mut report);
            Ok(report)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = VerifyReport::default();
    for r in &reports {
        total.absorb(r);
    }
    Ok(total)
}

/// Bounds for randomly drawn verification networks.
#[derive(Debug, Clone, Copy)]
pub struct FuzzLimits {
    pub max_channels: usize,
    pub max_spatial: usize,
    pub max_kernel: usize,
    pub max_stride: usize,
    pub max_layers: usize,
}

impl Default for FuzzLimits {
    fn default() -> Self {
        Self {
            max_channels: 4,
            max_spatial: 6,
            max_kernel: 5,
            max_stride: 3,
            max_layers: 2,
        }
    }
}

/// Draws a small valid generator. The noise map is up to
/// `max_spatial x max_spatial`; later layers grow from there.
pub fn random_network(rng: &mut impl Rng, limits: &FuzzLimits) -> NetworkSpec {
    loop {
        let input = Shape3::new(
            rng.gen_range(1..=limits.max_channels),
            rng.gen_range(1..=limits.max_spatial),
            rng.gen_range(1..=limits.max_spatial),
        );
        let n_layers = rng.gen_range(1..=limits.max_layers);
        let mut layers = Vec::with_capacity(n_layers);
        let mut shape = input;
        for _ in 0..n_layers {
            let k = rng.gen_range(1..=limits.max_kernel);
            let layer = DeconvLayerSpec::new(
                shape.channels,
                rng.gen_range(1..=limits.max_channels),
                k,
                rng.gen_range(1..=limits.max_stride),
                rng.gen_range(0..k),
            );
            let layer = layer
                .with_bits(
                    rng.gen_range(1..=netmodel::MAX_WEIGHT_BITS),
                    rng.gen_range(1..=netmodel::MAX_ACT_BITS),
                )
                .with_parallelism(
                    rng.gen_range(1..=layer.out_channels),
                    rng.gen_range(1..=layer.matrix_cols()),
                );
            match crate::lowering::layer_output_shape(&layer, shape) {
                Ok(next) => {
                    shape = next;
                    layers.push(layer);
                }
                Err(_) => break,
            }
        }
        if layers.len() == n_layers {
            if let Ok(spec) = NetworkSpec::new("fuzz", input, netmodel::DEFAULT_CLOCK_MHZ, layers) {
                return spec;
            }
        }
    }
}

/// Geometry seen by a fuzz run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Coverage {
    pub networks: usize,
    pub layers: usize,
    pub kernel: BTreeMap<usize, usize>,
    pub stride: BTreeMap<usize, usize>,
    pub pad: BTreeMap<usize, usize>,
    /// Layers whose PE does not divide `C_out` or SIMD does not divide `K^2 C_in`.
    pub ragged_tilings: usize,
    pub multi_layer_networks: usize,
}

impl Coverage {
    fn record(&mut self, spec: &NetworkSpec) {
        self.networks += 1;
        if spec.layers().len() > 1 {
            self.multi_layer_networks += 1;
        }
        for l in spec.layers() {
            self.layers += 1;
            *self.kernel.entry(l.kernel).or_default() += 1;
            *self.stride.entry(l.stride).or_default() += 1;
            *self.pad.entry(l.pad).or_default() += 1;
            if l.matrix_rows() % l.pe != 0 || l.matrix_cols() % l.simd != 0 {
                self.ragged_tilings += 1;
            }
        }
    }
}

/// Engine/oracle agreement over `n_trials` random networks, each with random
/// weights and one random noise input.
pub fn fuzz_equivalence(n_trials: usize, seed: u64, limits: &FuzzLimits) -> Result<(VerifyReport, Coverage), OracleError> {
    fuzz_equivalence_with(n_trials, seed, limits, crate::lowering::flip_kernel)
}

pub fn fuzz_equivalence_with(
    n_trials: usize,
    seed: u64,
    limits: &FuzzLimits,
    kernel_transform: fn(&Kernel) -> Kernel,
) -> Result<(VerifyReport, Coverage), OracleError> {
    if n_trials == 0 {
        return Err(OracleError::NoTrials);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(NetworkSpec, u64, u64)> = (0..n_trials)
        .map(|_| (random_network(&mut rng, limits), rng.gen(), rng.gen()))
        .collect();
    let reports = cases
        .par_iter()
        .enumerate()
        .map(|(trial, (spec, weight_seed, noise_seed))| -> Result<VerifyReport, OracleError> {
            let weights = netmodel::quantize_weights(spec, &netmodel::random_raw_weights(spec, *weight_seed))?;
            let mut r = equivalence_check_with(spec, &weights, 1, *noise_seed, kernel_transform)?;
            if let Some(m) = &mut r.mismatch {
                m.trial = trial;
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = VerifyReport::default();
    let mut coverage = Coverage::default();
    for ((spec, _, _), r) in cases.iter().zip(&reports) {
        total.absorb(r);
        coverage.record(spec);
    }
    Ok((total, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel(o: usize, c: usize, k: usize, codes: Vec<i32>) -> Kernel {
        Kernel::new(o, c, k, codes, 4).unwrap()
    }

    #[test]
    fn single_pixel_scatter_is_kernel_copy() {
        let fm = QTensor::new(Shape3::new(1, 1, 1), vec![3], 2).unwrap();
        let w = kernel(2, 1, 2, vec![1, 2, 3, 4, -1, -2, -3, -4]);
        let acc = deconv_reference(&fm, &w, 1, 0).unwrap();
        assert_eq!(acc.data, vec![3, 6, 9, 12, -3, -6, -9, -12]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let fm = QTensor::zeros(Shape3::new(2, 3, 3), 2).unwrap();
        let w = kernel(1, 2, 3, vec![5; 18]);
        let acc = deconv_reference(&fm, &w, 2, 1).unwrap();
        assert!(acc.data.iter().all(|&v| v == 0));
        assert_eq!((acc.height, acc.width), (5, 5));
    }

    #[test]
    fn strided_hand_case() {
        // 1x2 input [a, b], K=2, S=2, P=0 -> [[a*w00, a*w01, b*w00, b*w01], [a*w10, ...]]
        let fm = QTensor::new(Shape3::new(1, 1, 2), vec![2, -1], 2).unwrap();
        let w = kernel(1, 1, 2, vec![1, 2, 3, 4]);
        let acc = deconv_reference(&fm, &w, 2, 0).unwrap();
        assert_eq!((acc.height, acc.width), (2, 4));
        assert_eq!(acc.data, vec![2, 4, -1, -2, 6, 8, -3, -4]);
    }

    #[test]
    fn overlap_accumulates() {
        // 1x2 input, K=3, S=1: middle columns receive two contributions
        let fm = QTensor::new(Shape3::new(1, 1, 2), vec![1, 1], 2).unwrap();
        let w = kernel(1, 1, 3, (1..=9).collect());
        let acc = deconv_reference(&fm, &w, 1, 1).unwrap();
        // full 3x4, crop 1 -> 1x2 centre: row 1 cols 1,2 = (5+4, 6+5)
        assert_eq!(acc.data, vec![9, 11]);
    }

    #[test]
    fn unit_kernel_network_is_thresholded_copy() {
        let l0 = DeconvLayerSpec::new(1, 1, 1, 1, 0).with_bits(4, 2);
        let l1 = DeconvLayerSpec::new(1, 1, 1, 1, 0).with_bits(4, 2);
        let spec = NetworkSpec::new("id", Shape3::new(1, 2, 2), 125.0, vec![l0, l1]).unwrap();
        let ts = qarith::ThresholdSet::new(vec![1, 2, 3], 2).unwrap();
        let weights = vec![
            LayerWeights {
                kernel: kernel(1, 1, 1, vec![1]),
                thresholds: Some(ts.clone()),
            },
            LayerWeights {
                kernel: kernel(1, 1, 1, vec![16]),
                thresholds: None,
            },
        ];
        let z = QTensor::new(Shape3::new(1, 2, 2), vec![-3, 0, 2, 4], 2).unwrap();
        let out = network_reference(&spec, &weights, &z).unwrap();
        assert_eq!(out[0].codes(), &[0, 0, 2, 3]);
    }

    #[test]
    fn zero_trials_rejected() {
        let spec = NetworkSpec::new("t", Shape3::new(1, 1, 1), 125.0, vec![DeconvLayerSpec::new(1, 1, 2, 1, 0)]).unwrap();
        let weights = vec![LayerWeights {
            kernel: kernel(1, 1, 2, vec![1, 2, 3, 4]),
            thresholds: None,
        }];
        assert!(matches!(equivalence_check(&spec, &weights, 0, 1), Err(OracleError::NoTrials)));
    }

    #[test]
    fn random_networks_are_valid_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let limits = FuzzLimits::default();
        for _ in 0..100 {
            let spec = random_network(&mut rng, &limits);
            assert!(spec.input_shape.channels <= 4 && spec.input_shape.height <= 6 && spec.input_shape.width <= 6);
            for l in spec.layers() {
                assert!(l.kernel <= 5 && l.stride <= 3 && l.pad < l.kernel && l.out_channels <= 4);
            }
        }
    }
}
