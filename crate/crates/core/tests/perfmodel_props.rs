mod common;

use common::rng;
use proptest::prelude::*;
use qdcgan_core::cli::reference_configs;
use qdcgan_core::netmodel::{DeconvLayerSpec, NetworkSpec};
use qdcgan_core::oracle::{self, FuzzLimits};
use qdcgan_core::perfmodel::{estimate_fps, folding_factor, layer_cycles, PerfError};
use qdcgan_core::qarith::Shape3;

proptest! {
    #[test]
    fn folding_is_monotone(h in 1usize..200, w in 1usize..400, pe in 1usize..32, simd in 1usize..64) {
        let f = folding_factor(h, w, pe, simd).unwrap();
        prop_assert!(folding_factor(h, w, pe + 1, simd).unwrap() <= f);
        prop_assert!(folding_factor(h, w, pe, simd + 1).unwrap() <= f);
        prop_assert!(folding_factor(h + 1, w, pe, simd).unwrap() >= f);
        prop_assert!(f * (pe * simd) as u64 >= (h * w) as u64);
        prop_assert!(f >= 1);
    }

    #[test]
    fn folding_matches_division_when_divisible(a in 1usize..20, b in 1usize..20, pe in 1usize..16, simd in 1usize..16) {
        prop_assert_eq!(folding_factor(a * pe, b * simd, pe, simd).unwrap(), (a * b) as u64);
    }

    #[test]
    fn fps_is_linear_in_clock(mhz in 1u64..1000, scale in 1u64..8) {
        let spec = reference_configs().mnist_like;
        let a = estimate_fps(&spec, mhz * 1_000_000).unwrap();
        let b = estimate_fps(&spec, scale * mhz * 1_000_000).unwrap();
        prop_assert_eq!(a.bottleneck_cycles, b.bottleneck_cycles);
        prop_assert!((b.estimated_fps - scale as f64 * a.estimated_fps).abs() <= 1e-9 * b.estimated_fps);
    }
}

#[test]
fn zero_arguments_are_rejected() {
    assert!(matches!(folding_factor(0, 1, 1, 1), Err(PerfError::ZeroArgument { .. })));
    assert!(matches!(folding_factor(1, 1, 1, 0), Err(PerfError::ZeroArgument { .. })));
    let spec = reference_configs().mnist_like;
    assert!(matches!(estimate_fps(&spec, 0), Err(PerfError::ZeroClock)));
}

#[test]
fn bottleneck_is_max_cycles_first_on_ties() {
    let mut r = rng(50);
    let limits = FuzzLimits {
        max_layers: 4,
        max_spatial: 3,
        max_stride: 2,
        ..FuzzLimits::default()
    };
    for _ in 0..200 {
        let spec = oracle::random_network(&mut r, &limits);
        let report = estimate_fps(&spec, 100_000_000).unwrap();
        let shapes = spec.shapes();
        let cycles: Vec<u64> = spec
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| layer_cycles(l, shapes[i]).unwrap())
            .collect();
        let max = *cycles.iter().max().unwrap();
        assert_eq!(report.bottleneck_cycles, max);
        assert_eq!(report.bottleneck_layer, cycles.iter().position(|&c| c == max).unwrap());
        assert_eq!(report.estimated_fps, 1e8 / max as f64);
        for (lr, c) in report.layers.iter().zip(&cycles) {
            assert_eq!(lr.layer_cycles, *c);
            assert_eq!(lr.layer_cycles, lr.window_count * lr.folding_factor);
        }
    }
}

#[test]
fn equal_layers_tie_to_first() {
    let l = DeconvLayerSpec::new(2, 2, 1, 1, 0);
    let spec = NetworkSpec::new("tie", Shape3::new(2, 3, 3), 125.0, vec![l, l, l]).unwrap();
    assert_eq!(estimate_fps(&spec, 1_000).unwrap().bottleneck_layer, 0);
}

#[test]
fn reference_config_cycles() {
    let configs = reference_configs();
    let m = estimate_fps(&configs.mnist_like, configs.mnist_like.clock_hz()).unwrap();
    let cycles: Vec<u64> = m.layers.iter().map(|l| l.layer_cycles).collect();
    assert_eq!(cycles, vec![204_800, 65_536, 65_536, 65_536]);
    assert_eq!(m.bottleneck_layer, 0);
    assert_eq!(m.fps_ratio(), (125_000_000, 204_800));

    let c = estimate_fps(&configs.celeba_like, configs.celeba_like.clock_hz()).unwrap();
    assert_eq!(c.bottleneck_cycles, 409_600);
    assert!((c.estimated_fps - 305.17578125).abs() < 1e-9);
    assert!(c.total_weight_bits > m.total_weight_bits);
}

#[test]
fn doubling_pe_halves_cycles_when_divisible() {
    let base = DeconvLayerSpec::new(16, 32, 4, 2, 1).with_parallelism(2, 16);
    let s = Shape3::new(16, 8, 8);
    for pe in [2, 4, 8, 16] {
        let a = layer_cycles(&base.with_parallelism(pe, 16), s).unwrap();
        let b = layer_cycles(&base.with_parallelism(pe * 2, 16), s).unwrap();
        assert_eq!(a, 2 * b);
    }
}
