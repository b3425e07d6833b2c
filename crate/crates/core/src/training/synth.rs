//! Synthetic stand-in datasets for the desk-scale training stages: pure
//! tones labeled with digit words, constant-color images labeled with
//! color words, and their combination for joint training.

use crate::audio::{log_mel, subsampled_len, MelFrontendConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::Tokenizer;
use crate::training::data::ResolvedSample;
use crate::training::sft::{render_sft, SftSample};
use crate::vision::VisionEncoderConfig;

pub const ASR_PROMPT: &str = "Transcribe the audio clip into text.";
pub const CAPTION_PROMPT: &str = "Describe the image.";
pub const JOINT_PROMPT: &str = "Describe the image and transcribe the audio.";

pub const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

pub const COLOR_WORDS: [(&str, [f64; 3]); 10] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.10, 0.15, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("cyan", [0.10, 0.80, 0.80]),
    ("magenta", [0.85, 0.10, 0.80]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.50, 0.50, 0.50]),
    ("olive", [0.50, 0.50, 0.10]),
    ("navy", [0.05, 0.05, 0.45]),
];

const TONE_SECONDS: f64 = 0.2;

/// Mel frames for one tone class/variant: class sets the frequency,
/// variant shifts amplitude and phase.
pub fn tone_frames(class: usize, variant: usize) -> Result<Tensor> {
    let cfg = MelFrontendConfig::default();
    let freq = 250.0 * (class + 1) as f64;
    let amp = 0.5 + 0.07 * variant as f64;
    let phase = 0.6 * variant as f64;
    let n = (TONE_SECONDS * cfg.sample_rate as f64) as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / cfg.sample_rate as f64 + phase).sin())
        .collect();
    Ok(log_mel(&cfg, &samples)?.frames)
}

/// One constant-color crop; variant scales brightness slightly.
pub fn color_crop(cfg: &VisionEncoderConfig, class: usize, variant: usize) -> Tensor {
    let (_, rgb) = COLOR_WORDS[class % COLOR_WORDS.len()];
    let scale = 1.0 - 0.03 * variant as f64;
    let c = cfg.crop_size;
    let mut data = Vec::with_capacity(c * c * 3);
    for _ in 0..c * c {
        for ch in 0..3 {
            data.push((rgb[ch] * scale).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![c, c, 3], data).expect("sized above")
}

/// classes x variants ASR samples: tone -> digit word.
pub fn tone_dataset(classes: usize, variants: usize, tokenizer: &Tokenizer) -> Result<Vec<ResolvedSample>> {
    assert!(classes <= DIGIT_WORDS.len());
    let mut out = Vec::with_capacity(classes * variants);
    for class in 0..classes {
        for variant in 0..variants {
            let frames = tone_frames(class, variant)?;
            let sample = SftSample {
                task_prompt: ASR_PROMPT.into(),
                image_token_counts: vec![],
                audio_token_count: Some(subsampled_len(frames.shape()[0])),
                label: DIGIT_WORDS[class].into(),
            };
            out.push(ResolvedSample {
                rendered: render_sft(&sample, tokenizer)?,
                image_crops: vec![],
                audio_frames: Some(frames),
            });
        }
    }
    Ok(out)
}

/// classes x variants caption samples: `frames_per_sample` copies of one
/// color image -> color word.
pub fn color_dataset(
    cfg: &VisionEncoderConfig,
    classes: usize,
    variants: usize,
    frames_per_sample: usize,
    tokenizer: &Tokenizer,
) -> Result<Vec<ResolvedSample>> {
    assert!(classes <= COLOR_WORDS.len());
    assert!(frames_per_sample >= 1);
    let n_patches = cfg.n_patches();
    let mut out = Vec::with_capacity(classes * variants);
    for class in 0..classes {
        for variant in 0..variants {
            let crop = color_crop(cfg, class, variant);
            let sample = SftSample {
                task_prompt: CAPTION_PROMPT.into(),
                image_token_counts: vec![n_patches; frames_per_sample],
                audio_token_count: None,
                label: COLOR_WORDS[class].0.into(),
            };
            out.push(ResolvedSample {
                rendered: render_sft(&sample, tokenizer)?,
                image_crops: vec![vec![crop]; frames_per_sample],
                audio_frames: None,
            });
        }
    }
    Ok(out)
}

/// classes x variants joint samples: color image + tone -> "color digit".
pub fn vision_speech_dataset(
    cfg: &VisionEncoderConfig,
    classes: usize,
    variants: usize,
    tokenizer: &Tokenizer,
) -> Result<Vec<ResolvedSample>> {
    assert!(classes <= COLOR_WORDS.len().min(DIGIT_WORDS.len()));
    let n_patches = cfg.n_patches();
    let mut out = Vec::with_capacity(classes * variants);
    for class in 0..classes {
        for variant in 0..variants {
            let tone_class = (class + variant) % classes;
            let frames = tone_frames(tone_class, variant)?;
            let sample = SftSample {
                task_prompt: JOINT_PROMPT.into(),
                image_token_counts: vec![n_patches],
                audio_token_count: Some(subsampled_len(frames.shape()[0])),
                label: format!("{} {}", COLOR_WORDS[class].0, DIGIT_WORDS[tone_class]),
            };
            out.push(ResolvedSample {
                rendered: render_sft(&sample, tokenizer)?,
                image_crops: vec![vec![color_crop(cfg, class, variant)]],
                audio_frames: Some(frames),
            });
        }
    }
    Ok(out)
}

/// Build the stand-in dataset a stage schedule names in `data_source`.
pub fn dataset_for_source(
    source: &str,
    cfg: &VisionEncoderConfig,
    tokenizer: &Tokenizer,
) -> Result<Vec<ResolvedSample>> {
    match source {
        "synthetic_captions" | "synthetic_vision_sft" => color_dataset(cfg, 10, 5, 1, tokenizer),
        "synthetic_multiframe" => color_dataset(cfg, 10, 5, 2, tokenizer),
        "synthetic_tones_asr" | "synthetic_tones_sft" => tone_dataset(10, 5, tokenizer),
        "synthetic_vision_speech" => vision_speech_dataset(cfg, 10, 5, tokenizer),
        other => Err(Error::Config(format!("unknown data source {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_dataset_has_expected_shape() {
        let data = tone_dataset(10, 5, &Tokenizer::toy()).unwrap();
        assert_eq!(data.len(), 50);
        for s in &data {
            let frames = s.audio_frames.as_ref().unwrap();
            // 0.2 s at 16 kHz: 1 + (3200-400)/160 = 18 frames -> 3 tokens.
            assert_eq!(frames.shape(), &[18, 80]);
            assert_eq!(s.rendered.spans[0].len, 3);
            assert!(s.rendered.supervised_positions() >= 4);
        }
    }

    #[test]
    fn tone_classes_are_distinguishable() {
        let a = tone_frames(0, 0).unwrap();
        let b = tone_frames(1, 0).unwrap();
        assert!(a.max_abs_diff(&b) > 1.0);
        // Variants of one class stay closer than different classes.
        let a2 = tone_frames(0, 1).unwrap();
        assert!(a.max_abs_diff(&a2) < a.max_abs_diff(&b));
    }

    #[test]
    fn color_dataset_counts_match_patches() {
        let cfg = VisionEncoderConfig {
            crop_size: 8,
            patch: 4,
            width: 8,
            n_heads: 2,
            max_crops_pretrain: 16,
            max_crops_sft: 36,
        };
        let data = color_dataset(&cfg, 4, 2, 1, &Tokenizer::toy()).unwrap();
        assert_eq!(data.len(), 8);
        for s in &data {
            assert_eq!(s.rendered.spans[0].len, 4);
            assert_eq!(s.image_crops.len(), 1);
            assert_eq!(s.image_crops[0][0].shape(), &[8, 8, 3]);
        }
        let multi = color_dataset(&cfg, 2, 1, 2, &Tokenizer::toy()).unwrap();
        assert_eq!(multi[0].image_crops.len(), 2);
        assert_eq!(multi[0].rendered.spans.len(), 2);
    }

    #[test]
    fn joint_dataset_carries_both_payloads() {
        let cfg = VisionEncoderConfig {
            crop_size: 8,
            patch: 4,
            width: 8,
            n_heads: 2,
            max_crops_pretrain: 16,
            max_crops_sft: 36,
        };
        let data = vision_speech_dataset(&cfg, 3, 2, &Tokenizer::toy()).unwrap();
        assert_eq!(data.len(), 6);
        for s in &data {
            assert_eq!(s.image_crops.len(), 1);
            assert!(s.audio_frames.is_some());
            assert_eq!(s.rendered.spans.len(), 2);
        }
    }

    #[test]
    fn every_standard_source_resolves_to_a_dataset() {
        let cfg = VisionEncoderConfig {
            crop_size: 8,
            patch: 4,
            width: 8,
            n_heads: 2,
            max_crops_pretrain: 16,
            max_crops_sft: 36,
        };
        let tok = Tokenizer::toy();
        for stage in crate::training::standard_schedules(0.0) {
            let data = dataset_for_source(&stage.data_source, &cfg, &tok).unwrap();
            assert!(!data.is_empty(), "{} yielded no samples", stage.name);
        }
        assert!(dataset_for_source("nonexistent", &cfg, &tok).is_err());
    }
}
