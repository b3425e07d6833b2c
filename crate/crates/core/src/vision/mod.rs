//! Vision path: crop planning -> bilinear resize -> per-crop patch
//! encoding -> MLP projector emitting decoder-space image tokens.

pub mod crop;
pub mod encoder;
pub mod image_io;

pub use crop::{fallback_aspect_grid, plan_crops, CropPlan, VisionEncoderConfig};
pub use encoder::VisionEncoder;
pub use image_io::{bilinear_resize, load_image, prepare_image, save_image, split_crops};

use crate::error::Result;
use crate::numerics::{Graph, NodeId};
use crate::params::GraphBinder;
use crate::projector::MlpProjector;

/// The vision projector's parameter prefix.
pub const VISION_PROJECTOR_PREFIX: &str = "vision_projector";

/// Standard vision projector: encoder width -> d_model with a hidden layer
/// of the encoder width.
pub fn vision_projector(width: usize, d_model: usize) -> Result<MlpProjector> {
    MlpProjector::new(VISION_PROJECTOR_PREFIX, width, width, d_model)
}

/// Full vision tower over crops already in the graph:
/// n crops of [C, C, 3] -> [n * n_patches, d_model] in row-major crop order.
pub fn vision_tower(
    g: &mut Graph,
    binder: &mut GraphBinder,
    encoder: &VisionEncoder,
    projector: &MlpProjector,
    crops: &[NodeId],
) -> Result<NodeId> {
    let encoded = encoder.encode_crops(g, binder, crops)?;
    projector.forward(g, binder, encoded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::params::ParamStore;
    use crate::rng::SplitMix64;

    #[test]
    fn tower_maps_crops_to_decoder_width_tokens() {
        let cfg = VisionEncoderConfig {
            crop_size: 8,
            patch: 4,
            width: 8,
            n_heads: 2,
            max_crops_pretrain: 16,
            max_crops_sft: 36,
        };
        let enc = VisionEncoder::new(cfg).unwrap();
        let proj = vision_projector(8, 32).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(31);
        enc.init_params(&mut store, &mut rng);
        proj.init_params(&mut store, &mut rng);
        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(&store);
        let c0 = g.constant(Tensor::randn(&[8, 8, 3], 1.0, &mut rng));
        let c1 = g.constant(Tensor::randn(&[8, 8, 3], 1.0, &mut rng));
        let c2 = g.constant(Tensor::randn(&[8, 8, 3], 1.0, &mut rng));
        let tokens = vision_tower(&mut g, &mut binder, &enc, &proj, &[c0, c1, c2]).unwrap();
        // 3 crops x 4 patches each, projected to width 32.
        assert_eq!(g.value(tokens).shape(), &[12, 32]);
        assert!(g.value(tokens).all_finite());
    }

    #[test]
    fn projector_prefix_separates_param_groups() {
        let proj = vision_projector(8, 16).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(32);
        proj.init_params(&mut store, &mut rng);
        let names = store.names_with_prefix("vision_projector.");
        assert_eq!(names.len(), 4);
        assert!(store.names_with_prefix("audio_projector.").is_empty());
    }
}
