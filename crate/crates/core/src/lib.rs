//! Bit-exact software model of a streaming dataflow accelerator for
//! quantized deconvolution GAN generators.
//!
//! - [`qarith`]: fixed-point quantizer, straight-through gradient mask,
//!   threshold activations.
//! - [`netmodel`]: network configs, PE/SIMD weight packing, `QWT1` files.
//! - [`lowering`]: transpose convolution as zero-inserted unit-stride convolution.
//! - [`engine`]: ring-buffer window generator, folded MVTU, layer pipeline.
//! - [`oracle`]: scatter-add reference and engine/oracle equivalence checks.
//! - [`perfmodel`]: folding factor, cycle counts, FPS estimate.
//! - [`trainmath`]: GAN / WGAN-GP objectives.
//! - [`cli`]: the `qdcgan` command.

pub mod cli;
pub mod engine;
pub mod lowering;
pub mod netmodel;
pub mod oracle;
pub mod perfmodel;
pub mod qarith;
pub mod trainmath;

pub use engine::{generate_noise, run_network, LayerEngine};
pub use netmodel::{parse_network_config, DeconvLayerSpec, NetworkSpec, PackedLayer};
pub use qarith::{QTensor, Shape3};
