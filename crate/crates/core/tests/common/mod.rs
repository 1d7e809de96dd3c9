#![allow(dead_code)]

use qdcgan_core::netmodel::{self, DeconvLayerSpec, LayerWeights, NetworkSpec};
use qdcgan_core::oracle::{self, FuzzLimits};
use qdcgan_core::qarith::Shape3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random network plus quantized random weights.
pub fn random_case(rng: &mut ChaCha8Rng, limits: &FuzzLimits) -> (NetworkSpec, Vec<LayerWeights>) {
    let spec = oracle::random_network(rng, limits);
    let weights = netmodel::quantize_weights(&spec, &netmodel::random_raw_weights(&spec, rng.gen())).unwrap();
    (spec, weights)
}

/// Single-layer network with a random geometry, as the final (hard-tanh) layer.
pub fn random_single_layer(rng: &mut ChaCha8Rng, limits: &FuzzLimits) -> NetworkSpec {
    let one = FuzzLimits {
        max_layers: 1,
        ..*limits
    };
    oracle::random_network(rng, &one)
}

/// Same network with one layer's PE and SIMD replaced.
pub fn with_tiling(spec: &NetworkSpec, layer: usize, pe: usize, simd: usize) -> NetworkSpec {
    let layers: Vec<DeconvLayerSpec> = spec
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| if i == layer { l.with_parallelism(pe, simd) } else { *l })
        .collect();
    NetworkSpec::new(spec.name.clone(), spec.input_shape, spec.clock_mhz, layers).unwrap()
}

/// Up to `n` distinct valid (PE, SIMD) pairs for a layer, always including (1, 1),
/// the full tiling and at least one pair that divides neither dimension when
/// one exists.
pub fn tiling_pairs(rng: &mut ChaCha8Rng, layer: &DeconvLayerSpec, n: usize) -> Vec<(usize, usize)> {
    let (rows, cols) = (layer.matrix_rows(), layer.matrix_cols());
    let mut pairs = vec![(1, 1), (rows, cols)];
    let ragged_pe = (2..=rows).find(|p| rows % p != 0);
    let ragged_simd = (2..=cols).find(|s| cols % s != 0);
    if let (Some(p), Some(s)) = (ragged_pe, ragged_simd) {
        pairs.push((p, s));
    } else if let Some(s) = ragged_simd {
        pairs.push((1, s));
    } else if let Some(p) = ragged_pe {
        pairs.push((p, 1));
    }
    let mut attempts = 0;
    while pairs.len() < n && attempts < 1000 {
        attempts += 1;
        let cand = (rng.gen_range(1..=rows), rng.gen_range(1..=cols));
        if !pairs.contains(&cand) {
            pairs.push(cand);
        }
    }
    pairs.dedup();
    pairs
}

pub fn shape(c: usize, h: usize, w: usize) -> Shape3 {
    Shape3::new(c, h, w)
}
