//! Staged training: the freeze/unfreeze schedule, the per-step SFT loss
//! graph, and byte-level verification that frozen groups never move.

pub mod adam;
pub mod data;
pub mod sft;
pub mod synth;

pub use adam::Adam;
pub use data::{read_jsonl, resolve_raw, RawSample, ResolvedSample};
pub use sft::{render_sft, PlaceholderSpan, RenderedSample, SftSample};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::audio::audio_tower;
use crate::decoder::{argmax, LinearTap};
use crate::error::{Error, Result};
use crate::lora::router::Modality;
use crate::lora::{AdapterTap, LoraAdapter};
use crate::model::{MultimodalModel, PARAM_GROUPS};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::params::{GraphBinder, ParamStore};
use crate::rng::SplitMix64;
use crate::vision::vision_tower;

/// Reference step count per stage before desk scaling.
pub const BASE_STEPS: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub trainable_groups: Vec<String>,
    pub frozen_groups: Vec<String>,
    pub learning_rate: f64,
    pub steps: usize,
    pub data_source: String,
    pub max_audio_tokens: Option<usize>,
}

impl StageSpec {
    fn standard(
        name: &str,
        trainable: &[&str],
        learning_rate: f64,
        steps: usize,
        data_source: &str,
        max_audio_tokens: Option<usize>,
    ) -> Self {
        let trainable_groups: Vec<String> = trainable.iter().map(|s| s.to_string()).collect();
        let frozen_groups = PARAM_GROUPS
            .iter()
            .filter(|g| !trainable.contains(g))
            .map(|s| s.to_string())
            .collect();
        Self {
            name: name.into(),
            trainable_groups,
            frozen_groups,
            learning_rate,
            steps,
            data_source: data_source.into(),
            max_audio_tokens,
        }
    }

    /// Trainable and frozen sets must partition the model's groups.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("stage name must be nonempty".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "stage {}: learning rate {} out of range",
                self.name, self.learning_rate
            )));
        }
        let trainable: BTreeSet<&str> = self.trainable_groups.iter().map(|s| s.as_str()).collect();
        let frozen: BTreeSet<&str> = self.frozen_groups.iter().map(|s| s.as_str()).collect();
        if let Some(both) = trainable.intersection(&frozen).next() {
            return Err(Error::Config(format!(
                "stage {}: group {both} is both trainable and frozen",
                self.name
            )));
        }
        let all: BTreeSet<&str> = PARAM_GROUPS.iter().copied().collect();
        let covered: BTreeSet<&str> = trainable.union(&frozen).copied().collect();
        if covered != all {
            return Err(Error::Config(format!(
                "stage {}: groups {:?} must partition {:?}",
                self.name, covered, all
            )));
        }
        Ok(())
    }

    fn trainable_prefixes(&self) -> Vec<String> {
        self.trainable_groups.iter().map(|g| format!("{g}.")).collect()
    }
}

/// The seven-stage program: four vision stages, the two speech stages with
/// their stated learning rates, and the closing vision-speech joint stage.
/// `steps_scale` shrinks every stage by the same factor for desk runs.
pub fn standard_schedules(steps_scale: f64) -> Vec<StageSpec> {
    let steps = (BASE_STEPS as f64 * steps_scale.max(0.0)).round() as usize;
    vec![
        StageSpec::standard(
            "vision_projector_alignment",
            &["vision_projector"],
            1e-4,
            steps,
            "synthetic_captions",
            None,
        ),
        StageSpec::standard(
            "vision_joint",
            &["vision_encoder", "vision_projector"],
            1e-4,
            steps,
            "synthetic_captions",
            None,
        ),
        StageSpec::standard(
            "vision_generative",
            &["lora_v", "vision_encoder", "vision_projector"],
            1e-4,
            steps,
            "synthetic_vision_sft",
            None,
        ),
        StageSpec::standard(
            "vision_multiframe",
            &["lora_v", "vision_projector"],
            1e-4,
            steps,
            "synthetic_multiframe",
            None,
        ),
        StageSpec::standard(
            "speech_pretrain",
            &["audio_encoder", "audio_projector"],
            4e-5,
            steps,
            "synthetic_tones_asr",
            None,
        ),
        StageSpec::standard(
            "speech_posttrain",
            &["audio_projector", "lora_a"],
            1e-4,
            steps,
            "synthetic_tones_sft",
            Some(375),
        ),
        StageSpec::standard(
            "vision_speech_joint",
            &["lora_v", "vision_encoder", "vision_projector"],
            1e-4,
            steps,
            "synthetic_vision_speech",
            None,
        ),
    ]
}

/// Per-group fingerprints taken at stage start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FreezeMask {
    pub fingerprints: BTreeMap<String, u64>,
}

impl FreezeMask {
    pub fn capture(store: &ParamStore, groups: &[String]) -> Self {
        let fingerprints = groups
            .iter()
            .map(|g| (g.clone(), store.fingerprint(&format!("{g}."))))
            .collect();
        Self { fingerprints }
    }
}

/// Byte-level comparison per group; returns the groups that changed
/// (empty = pass).
pub fn verify_frozen(mask: &FreezeMask, store: &ParamStore) -> Vec<String> {
    mask.fingerprints
        .iter()
        .filter(|(g, &fp)| store.fingerprint(&format!("{g}.")) != fp)
        .map(|(g, _)| g.clone())
        .collect()
}

/// Towers + decoder forward for one sample; returns full-stream logits.
pub fn sample_logits(
    g: &mut Graph,
    binder: &mut GraphBinder,
    model: &MultimodalModel,
    tap: &dyn LinearTap,
    sample: &ResolvedSample,
) -> Result<NodeId> {
    let mut injected = Vec::with_capacity(sample.rendered.spans.len());
    for span in &sample.rendered.spans {
        let node = match span.modality {
            Modality::Image => {
                let crops = sample.image_crops.get(span.payload_index).ok_or_else(|| {
                    Error::Data(format!("image payload {} missing", span.payload_index))
                })?;
                let crop_nodes: Vec<NodeId> =
                    crops.iter().map(|c| g.constant(c.clone())).collect();
                vision_tower(
                    g,
                    binder,
                    &model.vision_encoder,
                    &model.vision_projector,
                    &crop_nodes,
                )?
            }
            Modality::Audio => {
                let frames = sample
                    .audio_frames
                    .as_ref()
                    .ok_or_else(|| Error::Data("audio payload missing".into()))?;
                let fnode = g.constant(frames.clone());
                audio_tower(
                    g,
                    binder,
                    &model.audio_encoder,
                    &model.audio_projector,
                    fnode,
                )?
            }
            Modality::Text => {
                return Err(Error::Data("text spans cannot carry payloads".into()))
            }
        };
        let rows = g.value(node).shape()[0];
        if rows != span.len {
            return Err(Error::Alignment(format!(
                "span at {} expects {} positions, tower produced {rows}",
                span.start, span.len
            )));
        }
        injected.push((span.start, node));
    }
    model
        .decoder
        .forward(g, binder, tap, &sample.rendered.tokens, &injected, None)
}

/// Next-token cross-entropy over the supervised positions.
pub fn sft_loss(
    g: &mut Graph,
    binder: &mut GraphBinder,
    model: &MultimodalModel,
    tap: &dyn LinearTap,
    sample: &ResolvedSample,
) -> Result<NodeId> {
    let logits = sample_logits(g, binder, model, tap, sample)?;
    let t = sample.rendered.tokens.len();
    let preds = g.gather_rows(logits, &(0..t - 1).collect::<Vec<_>>())?;
    let targets: Vec<usize> = sample.rendered.tokens[1..]
        .iter()
        .map(|&x| x as usize)
        .collect();
    let mask = sample.rendered.loss_mask[1..].to_vec();
    g.cross_entropy_masked(preds, &targets, &mask)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub fingerprints_before: BTreeMap<String, u64>,
    pub fingerprints_after: BTreeMap<String, u64>,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Run one stage: plain Adam over the trainable groups, frozen groups
/// bound as constants (they receive no gradient at all), and a hard
/// failure if any frozen fingerprint moves.
pub fn run_stage(
    model: &mut MultimodalModel,
    stage: &StageSpec,
    dataset: &[ResolvedSample],
    seed: u64,
) -> Result<StageReport> {
    stage.validate()?;
    if stage.steps > 0 && dataset.is_empty() {
        return Err(Error::Data(format!("stage {} has no data", stage.name)));
    }
    let fingerprint_all = |params: &ParamStore| -> BTreeMap<String, u64> {
        PARAM_GROUPS
            .iter()
            .map(|g| (g.to_string(), params.fingerprint(&format!("{g}."))))
            .collect()
    };
    let fingerprints_before = fingerprint_all(&model.params);
    let mask = FreezeMask::capture(&model.params, &stage.frozen_groups);
    let prefixes = stage.trainable_prefixes();
    // Adapters are active in the forward pass exactly when their group
    // trains in this stage.
    let active: Vec<LoraAdapter> = model
        .adapters
        .iter()
        .filter(|a| prefixes.contains(&a.prefix()))
        .cloned()
        .collect();

    let mut opt = Adam::new(stage.learning_rate);
    let mut rng = SplitMix64::new(seed);
    let mut losses = Vec::with_capacity(stage.steps);
    for _ in 0..stage.steps {
        let sample = &dataset[rng.next_range(dataset.len())];
        let mut g = Graph::new();
        let mut binder = GraphBinder::new(&model.params, |name: &str| {
            prefixes.iter().any(|p| name.starts_with(p.as_str()))
        });
        let tap = AdapterTap::new(active.iter().collect());
        let loss_node = sft_loss(&mut g, &mut binder, model, &tap, sample)?;
        let loss = g.value(loss_node).scalar_value();
        g.backward(loss_node)?;
        let mut grads: Vec<(String, Tensor)> = Vec::new();
        for (name, &node) in binder.bound() {
            if prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                if let Some(grad) = g.grad(node) {
                    grads.push((name.clone(), grad.clone()));
                }
            }
        }
        drop(binder);
        opt.apply(&mut model.params, &grads)?;
        losses.push(loss);
    }

    let diff = verify_frozen(&mask, &model.params);
    if !diff.is_empty() {
        return Err(Error::FrozenViolation(diff));
    }
    Ok(StageReport {
        name: stage.name.clone(),
        steps: stage.steps,
        losses,
        fingerprints_before,
        fingerprints_after: fingerprint_all(&model.params),
    })
}

/// Teacher-forced greedy accuracy over the supervised positions, with the
/// given adapters active.
pub fn token_accuracy(
    model: &MultimodalModel,
    adapter_names: &[String],
    dataset: &[ResolvedSample],
) -> Result<f64> {
    let tap = AdapterTap::from_names(&model.adapters, adapter_names)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for sample in dataset {
        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(&model.params);
        let logits = sample_logits(&mut g, &mut binder, model, &tap, sample)?;
        let lv = g.value(logits);
        for t in 1..sample.rendered.tokens.len() {
            if sample.rendered.loss_mask[t] {
                total += 1;
                if argmax(lv.row(t - 1)) as u32 == sample.rendered.tokens[t] {
                    correct += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "token accuracy over zero supervised positions".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}
