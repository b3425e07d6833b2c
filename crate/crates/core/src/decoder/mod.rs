//! Decoder-only language core: tied-embedding transformer with grouped-query
//! attention, fractional rotary embeddings, and an incremental KV cache.
//! The core stays frozen during adapter training; adapters reach its linear
//! layers through the [`LinearTap`] hook.

pub mod attention;
pub mod lr;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::params::{GraphBinder, ParamStore};
use crate::rng::SplitMix64;

pub use attention::{gqa_attention, linear, ROPE_BASE};
pub use lr::peak_lr;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub rotary_fraction: f64,
    pub vocab_size: usize,
    pub max_context: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    /// Desk-scale toy configuration.
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_q_heads: 8,
            n_kv_heads: 2,
            rotary_fraction: 0.75,
            vocab_size: 512,
            max_context: 512,
            mlp_hidden: 256,
            seed: 42,
        }
    }
}

impl DecoderConfig {
    /// The full-scale reference configuration (used for arithmetic only;
    /// never materialized as weights at desk scale).
    pub fn full_scale() -> Self {
        Self {
            d_model: 3072,
            n_layers: 32,
            n_q_heads: 24,
            n_kv_heads: 8,
            rotary_fraction: 0.75,
            vocab_size: 200_064,
            max_context: 131_072,
            mlp_hidden: 4 * 3072,
            seed: 42,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_q_heads
    }

    /// Width of the rotated slice of each head.
    pub fn rot_dims(&self) -> usize {
        (self.rotary_fraction * self.head_dim() as f64).round() as usize
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_q_heads == 0
            || self.n_kv_heads == 0
            || self.vocab_size == 0
            || self.max_context == 0
            || self.mlp_hidden == 0
        {
            return Err(Error::Config("decoder extents must be >= 1".into()));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.d_model % self.n_q_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_q_heads {}",
                self.d_model, self.n_q_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.rotary_fraction) {
            return Err(Error::Config(format!(
                "rotary_fraction {} outside [0, 1]",
                self.rotary_fraction
            )));
        }
        if self.rot_dims() % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary dim count {} must be even",
                self.rot_dims()
            )));
        }
        Ok(())
    }

    /// Attach-point paths of every linear layer in the decoder blocks.
    pub fn linear_attach_points(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.n_layers {
            for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                out.push(format!("layers.{i}.{name}"));
            }
            for name in ["mlp.in", "mlp.out"] {
                out.push(format!("layers.{i}.{name}"));
            }
        }
        out
    }

    /// (in_dim, out_dim) of the linear at an attach-point path.
    pub fn linear_dims(&self, attach: &str) -> Result<(usize, usize)> {
        let tail = attach
            .rsplit_once('.')
            .map(|(_, t)| t)
            .unwrap_or(attach);
        let prefix_ok = attach.starts_with("layers.");
        let dims = match tail {
            "q" if prefix_ok && attach.contains(".attn.") => (self.d_model, self.d_model),
            "k" | "v" if prefix_ok && attach.contains(".attn.") => (self.d_model, self.kv_dim()),
            "o" if prefix_ok && attach.contains(".attn.") => (self.d_model, self.d_model),
            "in" if prefix_ok && attach.contains(".mlp.") => (self.d_model, self.mlp_hidden),
            "out" if prefix_ok && attach.contains(".mlp.") => (self.mlp_hidden, self.d_model),
            _ => {
                return Err(Error::Config(format!(
                    "unknown attach point '{attach}'"
                )))
            }
        };
        Ok(dims)
    }
}

/// Hook invoked at every named decoder linear; adapters add their deltas
/// here without the decoder knowing adapter types.
pub trait LinearTap {
    fn delta(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        attach: &str,
        x: NodeId,
    ) -> Result<Option<NodeId>>;
}

/// The unadapted decoder: every tap is a no-op.
pub struct NoTap;

impl LinearTap for NoTap {
    fn delta(
        &self,
        _g: &mut Graph,
        _binder: &mut GraphBinder,
        _attach: &str,
        _x: NodeId,
    ) -> Result<Option<NodeId>> {
        Ok(None)
    }
}

#[derive(Default, Clone)]
struct LayerKV {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

/// Per-layer rotated keys and raw values, shape [t, n_kv_heads, head_dim],
/// append-only and capped at max_context.
#[derive(Clone)]
pub struct KVCache {
    layers: Vec<LayerKV>,
    n_kv_heads: usize,
    head_dim: usize,
    max_context: usize,
    len: usize,
}

impl KVCache {
    pub fn new(cfg: &DecoderConfig) -> Self {
        Self {
            layers: vec![LayerKV::default(); cfg.n_layers],
            n_kv_heads: cfg.n_kv_heads,
            head_dim: cfg.head_dim(),
            max_context: cfg.max_context,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    fn ensure_room(&self, new_rows: usize) -> Result<()> {
        if self.len + new_rows > self.max_context {
            return Err(Error::Capacity(format!(
                "KV cache at {} of {} tokens cannot take {new_rows} more",
                self.len, self.max_context
            )));
        }
        Ok(())
    }

    /// Cached (keys, values) for a layer as [t, kv_dim] matrices.
    fn prior(&self, layer: usize) -> Option<(Tensor, Tensor)> {
        let slot = &self.layers[layer];
        match (&slot.k, &slot.v) {
            (Some(k), Some(v)) => {
                let kv_dim = self.n_kv_heads * self.head_dim;
                let t = k.shape()[0];
                Some((
                    k.clone().reshaped(vec![t, kv_dim]).unwrap(),
                    v.clone().reshaped(vec![t, kv_dim]).unwrap(),
                ))
            }
            _ => None,
        }
    }

    fn append_all(&mut self, new: Vec<(Tensor, Tensor)>) -> Result<()> {
        let rows = new[0].0.shape()[0];
        self.ensure_room(rows)?;
        for (layer, (k_new, v_new)) in new.into_iter().enumerate() {
            let k3 = k_new.reshaped(vec![rows, self.n_kv_heads, self.head_dim])?;
            let v3 = v_new.reshaped(vec![rows, self.n_kv_heads, self.head_dim])?;
            let slot = &mut self.layers[layer];
            slot.k = Some(match slot.k.take() {
                Some(old) => concat_rows3(old, k3)?,
                None => k3,
            });
            slot.v = Some(match slot.v.take() {
                Some(old) => concat_rows3(old, v3)?,
                None => v3,
            });
        }
        self.len += rows;
        Ok(())
    }
}

fn concat_rows3(a: Tensor, b: Tensor) -> Result<Tensor> {
    let (ra, h, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let rb = b.shape()[0];
    let mut data = a.into_data();
    data.extend_from_slice(b.data());
    Tensor::new(vec![ra + rb, h, d], data)
}

pub struct Decoder {
    pub config: DecoderConfig,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Seeded parameter init under the `decoder.` prefix. Weights are
    /// Gaussian(0, 0.02), biases zero, norm gains one.
    pub fn init_params(&self) -> ParamStore {
        let cfg = &self.config;
        let mut rng = SplitMix64::new(cfg.seed);
        let mut store = ParamStore::new();
        store.insert(
            "decoder.embedding",
            Tensor::randn(&[cfg.vocab_size, cfg.d_model], INIT_STD, &mut rng),
        );
        for attach in cfg.linear_attach_points() {
            let (in_dim, out_dim) = cfg.linear_dims(&attach).unwrap();
            store.insert(
                format!("decoder.{attach}.weight"),
                Tensor::randn(&[out_dim, in_dim], INIT_STD, &mut rng),
            );
            store.insert(format!("decoder.{attach}.bias"), Tensor::zeros(&[out_dim]));
        }
        for i in 0..cfg.n_layers {
            for ln in ["ln1", "ln2"] {
                store.insert(
                    format!("decoder.layers.{i}.{ln}.gain"),
                    Tensor::full(&[cfg.d_model], 1.0),
                );
                store.insert(
                    format!("decoder.layers.{i}.{ln}.bias"),
                    Tensor::zeros(&[cfg.d_model]),
                );
            }
        }
        store.insert(
            "decoder.final_norm.gain",
            Tensor::full(&[cfg.d_model], 1.0),
        );
        store.insert("decoder.final_norm.bias", Tensor::zeros(&[cfg.d_model]));
        store
    }

    fn validate_spans(&self, t: usize, injected: &[(usize, NodeId)], g: &Graph) -> Result<()> {
        let mut cursor = 0usize;
        for (start, node) in injected {
            let shape = g.value(*node).shape();
            if shape.len() != 2 || shape[1] != self.config.d_model {
                return Err(Error::Alignment(format!(
                    "injected span at {start} has shape {shape:?}, need [len, {}]",
                    self.config.d_model
                )));
            }
            if *start < cursor || start + shape[0] > t {
                return Err(Error::Alignment(format!(
                    "injected span [{start}, {}) overlaps another span or exceeds length {t}",
                    start + shape[0]
                )));
            }
            cursor = start + shape[0];
        }
        Ok(())
    }

    /// Token embedding with injected spans spliced over placeholder rows.
    pub fn embed(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        tokens: &[u32],
        injected: &[(usize, NodeId)],
    ) -> Result<NodeId> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Data("cannot embed an empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of vocabulary {}",
                self.config.vocab_size
            )));
        }
        self.validate_spans(t, injected, g)?;
        let table = binder.bind(g, "decoder.embedding")?;
        let mut pieces = Vec::new();
        let mut cursor = 0usize;
        for (start, node) in injected {
            if *start > cursor {
                let ids: Vec<usize> = tokens[cursor..*start].iter().map(|&x| x as usize).collect();
                pieces.push(g.gather_rows(table, &ids)?);
            }
            pieces.push(*node);
            cursor = start + g.value(*node).shape()[0];
        }
        if cursor < t {
            let ids: Vec<usize> = tokens[cursor..].iter().map(|&x| x as usize).collect();
            pieces.push(g.gather_rows(table, &ids)?);
        }
        if pieces.len() == 1 {
            Ok(pieces[0])
        } else {
            g.concat_rows(&pieces)
        }
    }

    /// Blocks + final norm over already-embedded input rows.
    pub fn hidden_from_embeddings(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        tap: &dyn LinearTap,
        mut x: NodeId,
        cache: Option<&mut KVCache>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let t = g.value(x).shape()[0];
        let start = cache.as_ref().map_or(0, |c| c.len());
        if start + t > cfg.max_context {
            return Err(Error::Capacity(format!(
                "sequence of {t} tokens at position {start} exceeds max_context {}",
                cfg.max_context
            )));
        }
        let positions: Vec<usize> = (start..start + t).collect();
        let mut appended = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let ln1_g = binder.bind(g, &format!("decoder.layers.{layer}.ln1.gain"))?;
            let ln1_b = binder.bind(g, &format!("decoder.layers.{layer}.ln1.bias"))?;
            let normed = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let prior = cache.as_ref().and_then(|c| c.prior(layer));
            let (attn, k_new, v_new) = gqa_attention(
                g,
                binder,
                tap,
                cfg,
                layer,
                normed,
                &positions,
                prior.as_ref().map(|(k, v)| (k, v)),
            )?;
            appended.push((k_new, v_new));
            x = g.add(x, attn)?;

            let ln2_g = binder.bind(g, &format!("decoder.layers.{layer}.ln2.gain"))?;
            let ln2_b = binder.bind(g, &format!("decoder.layers.{layer}.ln2.bias"))?;
            let normed2 = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let up = linear(g, binder, tap, &format!("layers.{layer}.mlp.in"), normed2)?;
            let act = g.gelu(up);
            let down = linear(g, binder, tap, &format!("layers.{layer}.mlp.out"), act)?;
            x = g.add(x, down)?;
        }
        if let Some(c) = cache {
            c.append_all(appended)?;
        }
        let fin_g = binder.bind(g, "decoder.final_norm.gain")?;
        let fin_b = binder.bind(g, "decoder.final_norm.bias")?;
        g.layer_norm(x, fin_g, fin_b, LN_EPS)
    }

    /// Tied unembedding: logits = hidden x embedding^T (same leaf as embed).
    pub fn unembed(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        hidden: NodeId,
    ) -> Result<NodeId> {
        let table = binder.bind(g, "decoder.embedding")?;
        g.matmul_nt(hidden, table)
    }

    /// Full-sequence logits [T, vocab] with optional injected embedding
    /// spans and optional KV cache (x is then the new suffix).
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        tap: &dyn LinearTap,
        tokens: &[u32],
        injected: &[(usize, NodeId)],
        cache: Option<&mut KVCache>,
    ) -> Result<NodeId> {
        let x = self.embed(g, binder, tokens, injected)?;
        let hidden = self.hidden_from_embeddings(g, binder, tap, x, cache)?;
        self.unembed(g, binder, hidden)
    }

    /// One cached decoding step: next-token logits for a single token.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        tap: &dyn LinearTap,
        token: u32,
        cache: &mut KVCache,
    ) -> Result<Tensor> {
        cache.ensure_room(1)?;
        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(store);
        let logits = self.forward(&mut g, &mut binder, tap, &[token], &[], Some(cache))?;
        Ok(g.value(logits).clone())
    }

    /// Greedy generation: prefill the prompt, then top-1 sample until
    /// `max_new` tokens or `eos`. Returns only the generated ids.
    pub fn generate(
        &self,
        store: &ParamStore,
        tap: &dyn LinearTap,
        prompt: &[u32],
        injected: &[(usize, Tensor)],
        max_new: usize,
        eos: Option<u32>,
    ) -> Result<Vec<u32>> {
        let mut cache = KVCache::new(&self.config);
        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(store);
        let injected_nodes: Vec<(usize, NodeId)> = injected
            .iter()
            .map(|(start, t)| (*start, g.constant(t.clone())))
            .collect();
        let logits = self.forward(
            &mut g,
            &mut binder,
            tap,
            prompt,
            &injected_nodes,
            Some(&mut cache),
        )?;
        let last = g.value(logits).row(prompt.len() - 1).to_vec();
        let mut next = argmax(&last) as u32;
        let mut out = Vec::new();
        for _ in 0..max_new {
            out.push(next);
            if Some(next) == eos {
                break;
            }
            if cache.len() >= self.config.max_context {
                break;
            }
            let step_logits = self.decode_step(store, tap, next, &mut cache)?;
            next = argmax(step_logits.row(0)) as u32;
        }
        Ok(out)
    }
}

/// Index of the maximum value; ties break to the lowest index so greedy
/// decoding is deterministic.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const WEIGHTS_FILE: &str = "weights.p4tz";
const CONFIG_FILE: &str = "config.json";

/// Checkpoint = tensor container + JSON config in one directory.
pub fn save_checkpoint(dir: &Path, config: &DecoderConfig, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    store.save(&dir.join(WEIGHTS_FILE))?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(config)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(DecoderConfig, ParamStore)> {
    let config: DecoderConfig =
        serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    config.validate()?;
    let store = ParamStore::load(&dir.join(WEIGHTS_FILE))?;
    Ok((config, store))
}
