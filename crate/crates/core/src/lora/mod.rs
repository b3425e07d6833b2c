//! Low-rank adapters over the frozen decoder, one per modality, plus the
//! router that picks the active set per request.
//!
//! An adapter contributes y += (alpha/rank) * B (A x) at each of its attach
//! points. B starts all-zero, so a freshly attached adapter is an exact
//! identity and the base model's behavior is unchanged until training moves
//! B away from zero. Base weights are never written.

pub mod router;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, LinearTap};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::params::{GraphBinder, ParamStore};
use crate::rng::SplitMix64;

pub use router::{Modality, ModalityRouter, LORA_A, LORA_V};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    pub attach_points: Vec<String>,
}

/// Attach set for the audio adapter: attention and MLP linears.
pub fn audio_attach_points(cfg: &DecoderConfig) -> Vec<String> {
    cfg.linear_attach_points()
}

/// Attach set for the vision adapter: all decoder linears. The decoder's
/// only linear layers are the attention and MLP projections (the embedding
/// is a lookup and the unembedding is tied to it), so the set coincides
/// with the audio one at this scale.
pub fn vision_attach_points(cfg: &DecoderConfig) -> Vec<String> {
    cfg.linear_attach_points()
}

impl LoraAdapter {
    pub fn new(name: impl Into<String>, rank: usize, alpha: f64, attach_points: Vec<String>) -> Result<Self> {
        let adapter = Self {
            name: name.into(),
            rank,
            alpha,
            attach_points,
        };
        if adapter.rank < 1 {
            return Err(Error::Config(format!(
                "adapter '{}' rank must be >= 1",
                adapter.name
            )));
        }
        Ok(adapter)
    }

    /// Parameter-name prefix for this adapter ("LoRA_V" -> "lora_v.").
    pub fn prefix(&self) -> String {
        format!("{}.", self.name.to_lowercase())
    }

    fn a_name(&self, attach: &str) -> String {
        format!("{}{attach}.a", self.prefix())
    }

    fn b_name(&self, attach: &str) -> String {
        format!("{}{attach}.b", self.prefix())
    }

    /// Create this adapter's parameters in the store: A is
    /// Gaussian(0, 1/in_dim), B is zero so attachment is an exact identity.
    pub fn attach(
        &self,
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        rng: &mut SplitMix64,
    ) -> Result<()> {
        for attach in &self.attach_points {
            let (in_dim, out_dim) = cfg.linear_dims(attach)?;
            let std = (1.0 / in_dim as f64).sqrt();
            store.insert(
                self.a_name(attach),
                Tensor::randn(&[self.rank, in_dim], std, rng),
            );
            store.insert(self.b_name(attach), Tensor::zeros(&[out_dim, self.rank]));
        }
        Ok(())
    }

    /// Names of this adapter's trainable tensors (A and B pairs only).
    pub fn trainable_parameters(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.attach_points.len() * 2);
        for attach in &self.attach_points {
            names.push(self.a_name(attach));
            names.push(self.b_name(attach));
        }
        names.sort_unstable();
        names
    }

    /// Total adapter parameters: sum of rank * (in + out) over attach points.
    pub fn parameter_count(&self, cfg: &DecoderConfig) -> Result<usize> {
        let mut total = 0usize;
        for attach in &self.attach_points {
            let (in_dim, out_dim) = cfg.linear_dims(attach)?;
            total += self.rank * (in_dim + out_dim);
        }
        Ok(total)
    }

    /// Fold the adapter into base weights: W' = W + (alpha/rank) * B * A.
    pub fn merge(&self, store: &mut ParamStore) -> Result<()> {
        self.apply_merge(store, 1.0)
    }

    /// Undo a previous merge exactly (up to float rounding).
    pub fn unmerge(&self, store: &mut ParamStore) -> Result<()> {
        self.apply_merge(store, -1.0)
    }

    fn apply_merge(&self, store: &mut ParamStore, sign: f64) -> Result<()> {
        for attach in &self.attach_points {
            let a = store.get(&self.a_name(attach))?.clone();
            let b = store.get(&self.b_name(attach))?.clone();
            let mut g = Graph::new();
            let an = g.constant(a);
            let bn = g.constant(b);
            let ba = g.matmul(bn, an)?;
            let delta = g.scale(ba, sign * self.alpha / self.rank as f64);
            let delta_val = g.value(delta).clone();
            let w = store.get_mut(&format!("decoder.{attach}.weight"))?;
            if w.shape() != delta_val.shape() {
                return Err(Error::shape(
                    "merge",
                    format!("{:?}", w.shape()),
                    format!("{:?}", delta_val.shape()),
                ));
            }
            for (wi, di) in w.data_mut().iter_mut().zip(delta_val.data()) {
                *wi += di;
            }
        }
        Ok(())
    }
}

/// The set of adapters active for one request; implements the decoder's
/// linear hook. Multiple active adapters compose additively.
pub struct AdapterTap<'a> {
    active: Vec<&'a LoraAdapter>,
}

impl<'a> AdapterTap<'a> {
    pub fn new(active: Vec<&'a LoraAdapter>) -> Self {
        Self { active }
    }

    /// Activate, by name, the adapters a router selected.
    pub fn from_names(registry: &'a [LoraAdapter], names: &[String]) -> Result<Self> {
        let mut active = Vec::with_capacity(names.len());
        for n in names {
            let adapter = registry
                .iter()
                .find(|a| &a.name == n)
                .ok_or_else(|| Error::Config(format!("adapter '{n}' is not attached")))?;
            active.push(adapter);
        }
        Ok(Self { active })
    }

    pub fn none() -> Self {
        Self { active: vec![] }
    }
}

impl LinearTap for AdapterTap<'_> {
    fn delta(
        &self,
        g: &mut Graph,
        binder: &mut GraphBinder,
        attach: &str,
        x: NodeId,
    ) -> Result<Option<NodeId>> {
        let mut total: Option<NodeId> = None;
        for adapter in &self.active {
            if !adapter.attach_points.iter().any(|p| p == attach) {
                continue;
            }
            let a = binder.bind(g, &adapter.a_name(attach))?;
            let b = binder.bind(g, &adapter.b_name(attach))?;
            let xa = g.matmul_nt(x, a)?;
            let xab = g.matmul_nt(xa, b)?;
            let scaled = g.scale(xab, adapter.alpha / adapter.rank as f64);
            total = Some(match total {
                Some(t) => g.add(t, scaled)?,
                None => scaled,
            });
        }
        Ok(total)
    }
}

const MANIFEST_FILE: &str = "adapter.json";
const ADAPTER_WEIGHTS_FILE: &str = "adapter.p4tz";

/// Adapter checkpoint: tensor container + JSON manifest.
pub fn save_adapter(dir: &Path, adapter: &LoraAdapter, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(adapter)?,
    )?;
    let mut sub = ParamStore::new();
    for name in store.names_with_prefix(&adapter.prefix()) {
        sub.insert(name.clone(), store.get(&name)?.clone());
    }
    sub.save(&dir.join(ADAPTER_WEIGHTS_FILE))
}

pub fn load_adapter(dir: &Path, store: &mut ParamStore) -> Result<LoraAdapter> {
    let adapter: LoraAdapter =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let sub = ParamStore::load(&dir.join(ADAPTER_WEIGHTS_FILE))?;
    store.merge_from(sub)?;
    Ok(adapter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{Decoder, NoTap};

    fn toy_with_adapter(rank: usize) -> (Decoder, ParamStore, LoraAdapter) {
        let dec = Decoder::new(DecoderConfig::default()).unwrap();
        let mut store = dec.init_params();
        let adapter = LoraAdapter::new(
            LORA_V,
            rank,
            rank as f64,
            vision_attach_points(&dec.config),
        )
        .unwrap();
        let mut rng = SplitMix64::new(1234);
        adapter.attach(&mut store, &dec.config, &mut rng).unwrap();
        (dec, store, adapter)
    }

    fn logits(dec: &Decoder, store: &ParamStore, tap: &dyn LinearTap, tokens: &[u32]) -> Tensor {
        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(store);
        let id = dec.forward(&mut g, &mut binder, tap, tokens, &[], None).unwrap();
        g.value(id).clone()
    }

    fn randomize_b(store: &mut ParamStore, adapter: &LoraAdapter, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        for attach in &adapter.attach_points {
            let b = store.get_mut(&adapter.b_name(attach)).unwrap();
            let fresh = Tensor::randn(b.shape(), 0.05, &mut rng);
            *b = fresh;
        }
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let (dec, store, adapter) = toy_with_adapter(4);
        let tokens = [3u32, 99, 200, 1];
        let base = logits(&dec, &store, &NoTap, &tokens);
        let tap = AdapterTap::new(vec![&adapter]);
        let adapted = logits(&dec, &store, &tap, &tokens);
        assert!(base.bit_equal(&adapted));
    }

    #[test]
    fn routed_inactive_adapter_leaves_text_path_untouched() {
        let (dec, mut store, adapter) = toy_with_adapter(4);
        let tokens = [3u32, 99, 200, 1];
        let base = logits(&dec, &store, &NoTap, &tokens);
        randomize_b(&mut store, &adapter, 77);
        let inactive = AdapterTap::none();
        let after = logits(&dec, &store, &inactive, &tokens);
        assert!(base.bit_equal(&after));
    }

    #[test]
    fn merged_equals_dynamic() {
        let (dec, mut store, adapter) = toy_with_adapter(3);
        randomize_b(&mut store, &adapter, 21);
        let tokens = [10u32, 400, 7, 8, 250];
        let tap = AdapterTap::new(vec![&adapter]);
        let dynamic = logits(&dec, &store, &tap, &tokens);
        let mut merged_store = store.clone();
        adapter.merge(&mut merged_store).unwrap();
        let merged = logits(&dec, &merged_store, &NoTap, &tokens);
        assert!(dynamic.max_abs_diff(&merged) <= 1e-9);
    }

    #[test]
    fn merge_of_zero_b_is_noop_and_merge_unmerge_round_trips() {
        let (dec, mut store, adapter) = toy_with_adapter(5);
        let before = store.fingerprint("decoder.");
        adapter.merge(&mut store).unwrap();
        assert_eq!(store.fingerprint("decoder."), before);

        randomize_b(&mut store, &adapter, 31);
        let originals: Vec<(String, Tensor)> = adapter
            .attach_points
            .iter()
            .map(|a| {
                let n = format!("decoder.{a}.weight");
                (n.clone(), store.get(&n).unwrap().clone())
            })
            .collect();
        adapter.merge(&mut store).unwrap();
        adapter.unmerge(&mut store).unwrap();
        for (name, orig) in originals {
            assert!(
                store.get(&name).unwrap().max_abs_diff(&orig) <= 1e-12,
                "{name} drifted"
            );
        }
        let _ = dec;
    }

    #[test]
    fn trainable_parameters_never_alias_base_weights() {
        let (_, store, adapter) = toy_with_adapter(4);
        for name in adapter.trainable_parameters() {
            assert!(name.starts_with("lora_v."));
            assert!(store.contains(&name));
        }
        assert_eq!(
            adapter.trainable_parameters().len(),
            adapter.attach_points.len() * 2
        );
    }

    #[test]
    fn toy_parameter_count_matches_hand_enumeration() {
        let (dec, store, adapter) = toy_with_adapter(4);
        // per layer: q 4*(64+64), k 4*(64+16), v 4*(64+16), o 4*(64+64),
        // mlp.in 4*(64+256), mlp.out 4*(256+64) = 4224; two layers = 8448
        let expect = 8448usize;
        assert_eq!(adapter.parameter_count(&dec.config).unwrap(), expect);
        assert_eq!(store.element_count_with_prefix("lora_v."), expect);
    }

    #[test]
    fn full_scale_count_follows_formula() {
        let cfg = DecoderConfig::full_scale();
        let adapter = LoraAdapter::new(LORA_A, 320, 320.0, audio_attach_points(&cfg)).unwrap();
        let mut expect = 0usize;
        for attach in &adapter.attach_points {
            let (i, o) = cfg.linear_dims(attach).unwrap();
            expect += 320 * (i + o);
        }
        assert_eq!(adapter.parameter_count(&cfg).unwrap(), expect);
    }

    #[test]
    fn adapter_checkpoint_round_trips() {
        let (_, store, adapter) = toy_with_adapter(2);
        let dir = tempfile::tempdir().unwrap();
        save_adapter(dir.path(), &adapter, &store).unwrap();
        let mut fresh = ParamStore::new();
        let loaded = load_adapter(dir.path(), &mut fresh).unwrap();
        assert_eq!(loaded, adapter);
        assert_eq!(
            fresh.fingerprint(&adapter.prefix()),
            store.fingerprint(&adapter.prefix())
        );
    }

    #[test]
    fn unknown_attach_point_is_config_error() {
        let cfg = DecoderConfig::default();
        let adapter =
            LoraAdapter::new("LoRA_X", 2, 2.0, vec!["layers.0.attn.zz".into()]).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0);
        assert!(matches!(
            adapter.attach(&mut store, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
