//! Toy crop encoder: non-overlapping patch flattening, a linear patch
//! embedding, and one bidirectional self-attention block. Stands in for a
//! production image backbone at a size the test suite can differentiate
//! through.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::params::{GraphBinder, ParamStore};
use crate::rng::SplitMix64;
use crate::vision::crop::VisionEncoderConfig;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const ROPE_BASE: f64 = 10000.0;

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: VisionEncoderConfig,
}

impl VisionEncoder {
    pub fn new(config: VisionEncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let cfg = &self.config;
        let w = cfg.width;
        store.insert(
            "vision_encoder.patch_embed.weight",
            Tensor::randn(&[w, cfg.patch_dim()], INIT_STD, rng),
        );
        store.insert("vision_encoder.patch_embed.bias", Tensor::zeros(&[w]));
        store.insert("vision_encoder.attn.norm.gain", Tensor::full(&[w], 1.0));
        store.insert("vision_encoder.attn.norm.bias", Tensor::zeros(&[w]));
        for proj in ["q", "k", "v", "o"] {
            store.insert(
                format!("vision_encoder.attn.{proj}.weight"),
                Tensor::randn(&[w, w], INIT_STD, rng),
            );
            store.insert(format!("vision_encoder.attn.{proj}.bias"), Tensor::zeros(&[w]));
        }
        store.insert("vision_encoder.final_norm.gain", Tensor::full(&[w], 1.0));
        store.insert("vision_encoder.final_norm.bias", Tensor::zeros(&[w]));
    }

    /// Row indices into the [C*C, 3] pixel matrix that lay patches out
    /// contiguously: crops scan patch-row-major, pixels scan row-major
    /// inside each patch.
    fn patch_order(&self) -> Vec<usize> {
        let c = self.config.crop_size;
        let p = self.config.patch;
        let side = self.config.patches_per_side();
        let mut order = Vec::with_capacity(c * c);
        for pi in 0..side {
            for pj in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        order.push((pi * p + y) * c + (pj * p + x));
                    }
                }
            }
        }
        order
    }

    /// One crop [C, C, 3] -> patch tokens [n_patches, width].
    pub fn patch_encode(&self, g: &mut Graph, binder: &mut GraphBinder, crop: NodeId) -> Result<NodeId> {
        let cfg = &self.config;
        let c = cfg.crop_size;
        let shape = g.value(crop).shape().to_vec();
        if shape != [c, c, 3] {
            return Err(Error::shape(
                "patch_encode",
                format!("[{c}, {c}, 3]"),
                format!("{shape:?}"),
            ));
        }
        let pixels = g.reshape(crop, vec![c * c, 3])?;
        let ordered = g.gather_rows(pixels, &self.patch_order())?;
        let patches = g.reshape(ordered, vec![cfg.n_patches(), cfg.patch_dim()])?;

        let w_embed = binder.bind(g, "vision_encoder.patch_embed.weight")?;
        let b_embed = binder.bind(g, "vision_encoder.patch_embed.bias")?;
        let embedded = g.matmul_nt(patches, w_embed)?;
        let embedded = g.add_bias(embedded, b_embed)?;

        let attn = self.self_attention(g, binder, embedded)?;
        let res = g.add(embedded, attn)?;
        let gain = binder.bind(g, "vision_encoder.final_norm.gain")?;
        let bias = binder.bind(g, "vision_encoder.final_norm.bias")?;
        g.layer_norm(res, gain, bias, LN_EPS)
    }

    /// Bidirectional multi-head self-attention over patch tokens, rotary
    /// over the flattened patch index.
    fn self_attention(&self, g: &mut Graph, binder: &mut GraphBinder, x: NodeId) -> Result<NodeId> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let t = g.value(x).shape()[0];
        let positions: Vec<usize> = (0..t).collect();
        let gain = binder.bind(g, "vision_encoder.attn.norm.gain")?;
        let bias = binder.bind(g, "vision_encoder.attn.norm.bias")?;
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let proj = |g: &mut Graph, binder: &mut GraphBinder, name: &str| -> Result<NodeId> {
            let w = binder.bind(g, &format!("vision_encoder.attn.{name}.weight"))?;
            let b = binder.bind(g, &format!("vision_encoder.attn.{name}.bias"))?;
            let y = g.matmul_nt(normed, w)?;
            g.add_bias(y, b)
        };
        let q = proj(g, binder, "q")?;
        let k = proj(g, binder, "k")?;
        let v = proj(g, binder, "v")?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * hd, (h + 1) * hd)?;
            let kh = g.slice_cols(k, h * hd, (h + 1) * hd)?;
            let vh = g.slice_cols(v, h * hd, (h + 1) * hd)?;
            let qr = g.rope(qh, &positions, hd, ROPE_BASE)?;
            let kr = g.rope(kh, &positions, hd, ROPE_BASE)?;
            let scores = g.matmul_nt(qr, kr)?;
            let scaled = g.scale(scores, scale);
            let probs = g.softmax_rows(scaled)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        let wo = binder.bind(g, "vision_encoder.attn.o.weight")?;
        let bo = binder.bind(g, "vision_encoder.attn.o.bias")?;
        let out = g.matmul_nt(ctx, wo)?;
        g.add_bias(out, bo)
    }

    /// Encode several crops of one image and stack the results in
    /// row-major crop order: [n_crops * n_patches, width].
    pub fn encode_crops(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        crops: &[NodeId],
    ) -> Result<NodeId> {
        if crops.is_empty() {
            return Err(Error::Config("encode_crops needs at least one crop".into()));
        }
        let mut parts = Vec::with_capacity(crops.len());
        for &crop in crops {
            parts.push(self.patch_encode(g, binder, crop)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }
}
