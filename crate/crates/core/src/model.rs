//! Whole-model assembly: frozen decoder, audio and vision towers, the two
//! modality adapters, and the router — everything sharing one parameter
//! store partitioned by name prefix.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{audio_projector, AudioEncoder, ConformerConfig};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::lora::router::{Modality, ModalityRouter, LORA_A, LORA_V};
use crate::lora::{audio_attach_points, vision_attach_points, AdapterTap, LoraAdapter};
use crate::numerics::{Graph, Tensor};
use crate::params::{GraphBinder, ParamStore};
use crate::projector::MlpProjector;
use crate::rng::SplitMix64;
use crate::text::{Tokenizer, TOK_ASSISTANT, TOK_AUDIO, TOK_END, TOK_IMAGE, TOK_USER};
use crate::vision::{prepare_image, vision_projector, CropPlan, VisionEncoder, VisionEncoderConfig};

/// Parameter groups, each owning the names under `<group>.`.
pub const PARAM_GROUPS: [&str; 7] = [
    "decoder",
    "audio_encoder",
    "audio_projector",
    "vision_encoder",
    "vision_projector",
    "lora_a",
    "lora_v",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub audio: ConformerConfig,
    pub vision: VisionEncoderConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            audio: ConformerConfig::default(),
            vision: VisionEncoderConfig::default(),
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl ModelConfig {
    /// Production-scale reference (metadata only; never instantiated in
    /// tests).
    pub fn full_scale() -> Self {
        Self {
            decoder: DecoderConfig::full_scale(),
            audio: ConformerConfig::full_scale(),
            vision: VisionEncoderConfig::full_scale(),
            lora_rank: 320,
            lora_alpha: 320.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.audio.validate()?;
        self.vision.validate()?;
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct MultimodalModel {
    pub config: ModelConfig,
    pub decoder: Decoder,
    pub audio_encoder: AudioEncoder,
    pub audio_projector: MlpProjector,
    pub vision_encoder: VisionEncoder,
    pub vision_projector: MlpProjector,
    pub adapters: Vec<LoraAdapter>,
    pub router: ModalityRouter,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
}

/// One request after modality resolution: the token stream with placeholder
/// ids, the projector outputs to inject at those spans, and the routing
/// decision.
pub struct PreparedInput {
    pub tokens: Vec<u32>,
    pub injected: Vec<(usize, Tensor)>,
    pub modalities: BTreeSet<Modality>,
    pub routed: Vec<String>,
    pub crop_plans: Vec<CropPlan>,
}

impl MultimodalModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let decoder = Decoder::new(config.decoder.clone())?;
        let audio_encoder = AudioEncoder::new(config.audio.clone())?;
        let vision_encoder = VisionEncoder::new(config.vision.clone())?;
        let audio_projector = audio_projector(config.audio.attn_dim, config.decoder.d_model)?;
        let vision_projector = vision_projector(config.vision.width, config.decoder.d_model)?;
        let lora_a = LoraAdapter::new(
            LORA_A,
            config.lora_rank,
            config.lora_alpha,
            audio_attach_points(&config.decoder),
        )?;
        let lora_v = LoraAdapter::new(
            LORA_V,
            config.lora_rank,
            config.lora_alpha,
            vision_attach_points(&config.decoder),
        )?;

        let mut params = decoder.init_params();
        let mut rng = SplitMix64::new(seed);
        audio_encoder.init_params(&mut params, &mut rng);
        audio_projector.init_params(&mut params, &mut rng);
        vision_encoder.init_params(&mut params, &mut rng);
        vision_projector.init_params(&mut params, &mut rng);
        lora_a.attach(&mut params, &config.decoder, &mut rng)?;
        lora_v.attach(&mut params, &config.decoder, &mut rng)?;

        Ok(Self {
            config,
            decoder,
            audio_encoder,
            audio_projector,
            vision_encoder,
            vision_projector,
            adapters: vec![lora_a, lora_v],
            router: ModalityRouter::default(),
            tokenizer: Tokenizer::toy(),
            params,
        })
    }

    pub fn toy(seed: u64) -> Result<Self> {
        Self::new(ModelConfig::default(), seed)
    }

    pub fn adapter(&self, name: &str) -> Result<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("unknown adapter {name}")))
    }

    /// Resolve one inference request: run the frozen towers over the
    /// payloads, lay out the user turn
    /// `<|user|>` placeholders prompt `<|end|>` `<|assistant|>`,
    /// and route the adapter set.
    pub fn prepare_prompt(
        &self,
        prompt: &str,
        images: &[Tensor],
        audio_frames: Option<&Tensor>,
        max_crops: usize,
    ) -> Result<PreparedInput> {
        let mut modalities = BTreeSet::from([Modality::Text]);
        if !images.is_empty() {
            modalities.insert(Modality::Image);
        }
        if audio_frames.is_some() {
            modalities.insert(Modality::Audio);
        }
        let routed = self.router.route(&modalities)?;

        let mut g = Graph::new();
        let mut binder = GraphBinder::frozen(&self.params);
        let mut tokens = vec![TOK_USER];
        let mut injected = Vec::new();
        let mut crop_plans = Vec::new();
        for img in images {
            let (plan, crops) = prepare_image(img, self.config.vision.crop_size, max_crops)?;
            crop_plans.push(plan);
            let crop_nodes: Vec<_> = crops.into_iter().map(|c| g.constant(c)).collect();
            let feats = crate::vision::vision_tower(
                &mut g,
                &mut binder,
                &self.vision_encoder,
                &self.vision_projector,
                &crop_nodes,
            )?;
            let feats = g.value(feats).clone();
            injected.push((tokens.len(), feats.clone()));
            tokens.extend(std::iter::repeat_n(TOK_IMAGE, feats.shape()[0]));
        }
        if let Some(frames) = audio_frames {
            let node = g.constant(frames.clone());
            let feats = crate::audio::audio_tower(
                &mut g,
                &mut binder,
                &self.audio_encoder,
                &self.audio_projector,
                node,
            )?;
            let feats = g.value(feats).clone();
            injected.push((tokens.len(), feats.clone()));
            tokens.extend(std::iter::repeat_n(TOK_AUDIO, feats.shape()[0]));
        }
        tokens.extend(self.tokenizer.encode(prompt));
        tokens.push(TOK_END);
        tokens.push(TOK_ASSISTANT);
        if tokens.len() >= self.config.decoder.max_context {
            return Err(Error::Capacity(format!(
                "prompt needs {} positions but the context holds {}",
                tokens.len(),
                self.config.decoder.max_context
            )));
        }
        Ok(PreparedInput {
            tokens,
            injected,
            modalities,
            routed,
            crop_plans,
        })
    }

    /// Greedy decode with the routed adapters active.
    pub fn generate(&self, prepared: &PreparedInput, max_new: usize) -> Result<Vec<u32>> {
        let tap = AdapterTap::from_names(&self.adapters, &prepared.routed)?;
        self.decoder.generate(
            &self.params,
            &tap,
            &prepared.tokens,
            &prepared.injected,
            max_new,
            Some(TOK_END),
        )
    }

    /// Fingerprints for every parameter group, in PARAM_GROUPS order.
    pub fn group_fingerprints(&self) -> Vec<(String, u64)> {
        PARAM_GROUPS
            .iter()
            .map(|group| {
                (
                    group.to_string(),
                    self.params.fingerprint(&format!("{group}.")),
                )
            })
            .collect()
    }
}

pub fn save_model(dir: &Path, model: &MultimodalModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(&model.config)?;
    std::fs::write(dir.join("model.json"), config_json)?;
    model.params.save(&dir.join("weights.p4tz"))
}

pub fn load_model(dir: &Path) -> Result<MultimodalModel> {
    let raw = std::fs::read_to_string(dir.join("model.json"))?;
    let config: ModelConfig = serde_json::from_str(&raw)?;
    let mut model = MultimodalModel::new(config, 0)?;
    let params = ParamStore::load(&dir.join("weights.p4tz"))?;
    for name in model.params.names_with_prefix("") {
        if !params.contains(&name) {
            return Err(Error::Data(format!("checkpoint is missing {name}")));
        }
    }
    model.params = params;
    Ok(model)
}
