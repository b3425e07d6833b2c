//! Convolutional subsampler and conformer encoder for the speech path.
//!
//! The subsampler's three stride-2 convolutions take the 10ms mel frames to
//! an 80ms token rate. Conformer blocks are macaron-style: half-step
//! feed-forward, bidirectional self-attention with full rotary embedding,
//! a depthwise convolution module, a second half-step feed-forward, and a
//! closing norm.

use serde::{Deserialize, Serialize};

use crate::decoder::ROPE_BASE;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::params::{GraphBinder, ParamStore};
use crate::rng::SplitMix64;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub n_blocks: usize,
    pub attn_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub subsample_strides: Vec<usize>,
    pub n_mels: usize,
}

impl Default for ConformerConfig {
    /// Desk-scale toy configuration.
    fn default() -> Self {
        Self {
            n_blocks: 2,
            attn_dim: 64,
            ff_dim: 96,
            n_heads: 4,
            conv_kernel: 15,
            subsample_strides: vec![2, 2, 2],
            n_mels: 80,
        }
    }
}

impl ConformerConfig {
    /// Full-scale reference configuration (metadata only at desk scale).
    pub fn full_scale() -> Self {
        Self {
            n_blocks: 24,
            attn_dim: 1024,
            ff_dim: 1536,
            n_heads: 16,
            conv_kernel: 15,
            subsample_strides: vec![2, 2, 2],
            n_mels: 80,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.attn_dim == 0 || self.ff_dim == 0 || self.n_heads == 0 {
            return Err(Error::Config("conformer extents must be >= 1".into()));
        }
        if self.attn_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} not divisible by n_heads {}",
                self.attn_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for full rotary coverage",
                self.head_dim()
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.subsample_strides.iter().product::<usize>() != 8 {
            return Err(Error::Config(format!(
                "subsample strides {:?} must multiply to 8",
                self.subsample_strides
            )));
        }
        Ok(())
    }
}

pub struct AudioEncoder {
    pub config: ConformerConfig,
}

impl AudioEncoder {
    pub fn new(config: ConformerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Seeded init of all `audio_encoder.` parameters.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut SplitMix64) {
        let cfg = &self.config;
        let mut chans = cfg.n_mels;
        for (j, _) in cfg.subsample_strides.iter().enumerate() {
            store.insert(
                format!("audio_encoder.subsample.conv{j}.weight"),
                Tensor::randn(&[cfg.attn_dim, chans, 3], INIT_STD, rng),
            );
            store.insert(
                format!("audio_encoder.subsample.conv{j}.bias"),
                Tensor::zeros(&[cfg.attn_dim]),
            );
            chans = cfg.attn_dim;
        }
        for i in 0..cfg.n_blocks {
            let p = format!("audio_encoder.blocks.{i}");
            for ff in ["ff1", "ff2"] {
                insert_norm(store, &format!("{p}.{ff}.norm"), cfg.attn_dim);
                store.insert(
                    format!("{p}.{ff}.in.weight"),
                    Tensor::randn(&[cfg.ff_dim, cfg.attn_dim], INIT_STD, rng),
                );
                store.insert(format!("{p}.{ff}.in.bias"), Tensor::zeros(&[cfg.ff_dim]));
                store.insert(
                    format!("{p}.{ff}.out.weight"),
                    Tensor::randn(&[cfg.attn_dim, cfg.ff_dim], INIT_STD, rng),
                );
                store.insert(format!("{p}.{ff}.out.bias"), Tensor::zeros(&[cfg.attn_dim]));
            }
            insert_norm(store, &format!("{p}.attn.norm"), cfg.attn_dim);
            for proj in ["q", "k", "v", "o"] {
                store.insert(
                    format!("{p}.attn.{proj}.weight"),
                    Tensor::randn(&[cfg.attn_dim, cfg.attn_dim], INIT_STD, rng),
                );
                store.insert(
                    format!("{p}.attn.{proj}.bias"),
                    Tensor::zeros(&[cfg.attn_dim]),
                );
            }
            insert_norm(store, &format!("{p}.conv.norm"), cfg.attn_dim);
            store.insert(
                format!("{p}.conv.pre.weight"),
                Tensor::randn(&[cfg.attn_dim, cfg.attn_dim], INIT_STD, rng),
            );
            store.insert(format!("{p}.conv.pre.bias"), Tensor::zeros(&[cfg.attn_dim]));
            store.insert(
                format!("{p}.conv.dw.weight"),
                Tensor::randn(&[cfg.attn_dim, cfg.conv_kernel], INIT_STD, rng),
            );
            store.insert(format!("{p}.conv.dw.bias"), Tensor::zeros(&[cfg.attn_dim]));
            store.insert(
                format!("{p}.conv.post.weight"),
                Tensor::randn(&[cfg.attn_dim, cfg.attn_dim], INIT_STD, rng),
            );
            store.insert(format!("{p}.conv.post.bias"), Tensor::zeros(&[cfg.attn_dim]));
            insert_norm(store, &format!("{p}.final_norm"), cfg.attn_dim);
        }
    }

    /// Three stride-2 convolutions: [T, n_mels] -> [ceil(T/8), attn_dim].
    pub fn subsample(&self, g: &mut Graph, binder: &mut GraphBinder, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.config.subsample_strides.len() - 1;
        for (j, &stride) in self.config.subsample_strides.iter().enumerate() {
            let w = binder.bind(g, &format!("audio_encoder.subsample.conv{j}.weight"))?;
            let b = binder.bind(g, &format!("audio_encoder.subsample.conv{j}.bias"))?;
            h = g.conv1d(h, w, b, stride, 1)?;
            if j < last {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    fn feed_forward(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let gain = binder.bind(g, &format!("{prefix}.norm.gain"))?;
        let bias = binder.bind(g, &format!("{prefix}.norm.bias"))?;
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let w_in = binder.bind(g, &format!("{prefix}.in.weight"))?;
        let b_in = binder.bind(g, &format!("{prefix}.in.bias"))?;
        let h = g.matmul_nt(normed, w_in)?;
        let h = g.add_bias(h, b_in)?;
        let h = g.gelu(h);
        let w_out = binder.bind(g, &format!("{prefix}.out.weight"))?;
        let b_out = binder.bind(g, &format!("{prefix}.out.bias"))?;
        let out = g.matmul_nt(h, w_out)?;
        g.add_bias(out, b_out)
    }

    /// Bidirectional multi-head self-attention with full rotary embedding.
    fn self_attention(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let t = g.value(x).shape()[0];
        let positions: Vec<usize> = (0..t).collect();
        let gain = binder.bind(g, &format!("{prefix}.norm.gain"))?;
        let bias = binder.bind(g, &format!("{prefix}.norm.bias"))?;
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let proj = |g: &mut Graph, binder: &mut GraphBinder, name: &str| -> Result<NodeId> {
            let w = binder.bind(g, &format!("{prefix}.{name}.weight"))?;
            let b = binder.bind(g, &format!("{prefix}.{name}.bias"))?;
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
        let wo = binder.bind(g, &format!("{prefix}.o.weight"))?;
        let bo = binder.bind(g, &format!("{prefix}.o.bias"))?;
        let out = g.matmul_nt(ctx, wo)?;
        g.add_bias(out, bo)
    }

    fn conv_module(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let gain = binder.bind(g, &format!("{prefix}.norm.gain"))?;
        let bias = binder.bind(g, &format!("{prefix}.norm.bias"))?;
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let w_pre = binder.bind(g, &format!("{prefix}.pre.weight"))?;
        let b_pre = binder.bind(g, &format!("{prefix}.pre.bias"))?;
        let h = g.matmul_nt(normed, w_pre)?;
        let h = g.add_bias(h, b_pre)?;
        let h = g.gelu(h);
        let w_dw = binder.bind(g, &format!("{prefix}.dw.weight"))?;
        let b_dw = binder.bind(g, &format!("{prefix}.dw.bias"))?;
        let h = g.depthwise_conv1d(h, w_dw, b_dw, (self.config.conv_kernel - 1) / 2)?;
        let h = g.gelu(h);
        let w_post = binder.bind(g, &format!("{prefix}.post.weight"))?;
        let b_post = binder.bind(g, &format!("{prefix}.post.bias"))?;
        let out = g.matmul_nt(h, w_post)?;
        g.add_bias(out, b_post)
    }

    /// Length-preserving conformer stack over subsampled features.
    pub fn encode(&self, g: &mut Graph, binder: &mut GraphBinder, x: NodeId) -> Result<NodeId> {
        let (_, w) = g.value(x).dims2()?;
        if w != self.config.attn_dim {
            return Err(Error::Config(format!(
                "conformer expects width {}, got {w}",
                self.config.attn_dim
            )));
        }
        let mut h = x;
        for i in 0..self.config.n_blocks {
            let p = format!("audio_encoder.blocks.{i}");
            let ff1 = self.feed_forward(g, binder, &format!("{p}.ff1"), h)?;
            let half1 = g.scale(ff1, 0.5);
            h = g.add(h, half1)?;
            let attn = self.self_attention(g, binder, &format!("{p}.attn"), h)?;
            h = g.add(h, attn)?;
            let conv = self.conv_module(g, binder, &format!("{p}.conv"), h)?;
            h = g.add(h, conv)?;
            let ff2 = self.feed_forward(g, binder, &format!("{p}.ff2"), h)?;
            let half2 = g.scale(ff2, 0.5);
            h = g.add(h, half2)?;
            let gain = binder.bind(g, &format!("{p}.final_norm.gain"))?;
            let bias = binder.bind(g, &format!("{p}.final_norm.bias"))?;
            h = g.layer_norm(h, gain, bias, LN_EPS)?;
        }
        Ok(h)
    }

    /// Full path: mel frames [T, n_mels] -> encoded tokens [ceil(T/8), attn_dim].
    pub fn forward(&self, g: &mut Graph, binder: &mut GraphBinder, frames: NodeId) -> Result<NodeId> {
        let sub = self.subsample(g, binder, frames)?;
        self.encode(g, binder, sub)
    }
}

fn insert_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}
