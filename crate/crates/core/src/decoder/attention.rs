//! Grouped-query attention with fractional rotary embeddings.

use crate::decoder::{DecoderConfig, LinearTap};
use crate::error::Result;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::params::GraphBinder;

pub const ROPE_BASE: f64 = 10000.0;

/// One attention sublayer over normalized input `x` [T, d_model].
///
/// Each kv head serves `n_q_heads / n_kv_heads` consecutive query heads.
/// `prior` carries cached keys/values (already rotated) as [t_prev, kv_dim]
/// tensors; the returned pair holds this call's new key/value rows for the
/// caller to append to its cache.
#[allow(clippy::too_many_arguments)]
pub fn gqa_attention(
    g: &mut Graph,
    binder: &mut GraphBinder,
    tap: &dyn LinearTap,
    cfg: &DecoderConfig,
    layer: usize,
    x: NodeId,
    positions: &[usize],
    prior: Option<(&Tensor, &Tensor)>,
) -> Result<(NodeId, Tensor, Tensor)> {
    let hd = cfg.head_dim();
    let rot = cfg.rot_dims();
    let group = cfg.n_q_heads / cfg.n_kv_heads;

    let q = linear(g, binder, tap, &format!("layers.{layer}.attn.q"), x)?;
    let k = linear(g, binder, tap, &format!("layers.{layer}.attn.k"), x)?;
    let v = linear(g, binder, tap, &format!("layers.{layer}.attn.v"), x)?;

    // Rotate new keys per kv head, then stitch them back into [T, kv_dim]
    // so cache rows stay head-contiguous.
    let mut k_heads = Vec::with_capacity(cfg.n_kv_heads);
    for h in 0..cfg.n_kv_heads {
        let kh = g.slice_cols(k, h * hd, (h + 1) * hd)?;
        k_heads.push(g.rope(kh, positions, rot, ROPE_BASE)?);
    }
    let k_new = g.concat_cols(&k_heads)?;
    let k_new_val = g.value(k_new).clone();
    let v_new_val = g.value(v).clone();

    let offset = prior.map_or(0, |(pk, _)| pk.shape()[0]);
    let (k_all, v_all) = match prior {
        Some((pk, pv)) => {
            let pk_node = g.constant(pk.clone());
            let pv_node = g.constant(pv.clone());
            (
                g.concat_rows(&[pk_node, k_new])?,
                g.concat_rows(&[pv_node, v])?,
            )
        }
        None => (k_new, v),
    };

    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctxs = Vec::with_capacity(cfg.n_q_heads);
    for qh in 0..cfg.n_q_heads {
        let kvh = qh / group;
        let qh_cols = g.slice_cols(q, qh * hd, (qh + 1) * hd)?;
        let q_rot = g.rope(qh_cols, positions, rot, ROPE_BASE)?;
        let k_head = g.slice_cols(k_all, kvh * hd, (kvh + 1) * hd)?;
        let v_head = g.slice_cols(v_all, kvh * hd, (kvh + 1) * hd)?;
        let scores = g.matmul_nt(q_rot, k_head)?;
        let scaled = g.scale(scores, scale);
        let masked = g.causal_mask_add(scaled, offset)?;
        let probs = g.softmax_rows(masked)?;
        ctxs.push(g.matmul(probs, v_head)?);
    }
    let ctx = g.concat_cols(&ctxs)?;
    let out = linear(g, binder, tap, &format!("layers.{layer}.attn.o"), ctx)?;
    Ok((out, k_new_val, v_new_val))
}

/// A named decoder linear: y = x W^T + b, plus any adapter delta the tap
/// contributes at this attach point.
pub fn linear(
    g: &mut Graph,
    binder: &mut GraphBinder,
    tap: &dyn LinearTap,
    attach: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = binder.bind(g, &format!("decoder.{attach}.weight"))?;
    let b = binder.bind(g, &format!("decoder.{attach}.bias"))?;
    let wx = g.matmul_nt(x, w)?;
    let mut y = g.add_bias(wx, b)?;
    if let Some(delta) = tap.delta(g, binder, attach, x)? {
        y = g.add(y, delta)?;
    }
    Ok(y)
}
