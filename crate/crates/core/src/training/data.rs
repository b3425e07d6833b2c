//! Data plumbing: JSONL manifests of raw samples, and resolution of file
//! payloads into mel frames and image crops ready for the step graph.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::audio::{log_mel, subsampled_len, MelFrontendConfig};
use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::numerics::Tensor;
use crate::training::sft::{render_sft, RenderedSample, SftSample};
use crate::vision::{load_image, prepare_image};

/// One line of a JSONL data source.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub task: String,
    pub prompt: String,
    #[serde(default)]
    pub audio: Option<PathBuf>,
    #[serde(default)]
    pub images: Vec<PathBuf>,
    pub label: String,
    pub lang: String,
}

/// A sample with its payload features attached, ready to train on.
#[derive(Debug, Clone)]
pub struct ResolvedSample {
    pub rendered: RenderedSample,
    /// Per image payload, its crops in row-major order.
    pub image_crops: Vec<Vec<Tensor>>,
    /// Mel frames [T, n_mels].
    pub audio_frames: Option<Tensor>,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: T = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", path.display())));
    }
    Ok(out)
}

/// Load payload files, apply the per-source audio cap, and render the
/// stream. Relative payload paths resolve against `base_dir`.
pub fn resolve_raw(
    raw: &RawSample,
    model: &MultimodalModel,
    base_dir: &Path,
    max_audio_tokens: Option<usize>,
) -> Result<ResolvedSample> {
    let join = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base_dir.join(p)
        }
    };
    let mut image_crops = Vec::new();
    let mut image_token_counts = Vec::new();
    let n_patches = model.config.vision.n_patches();
    for path in &raw.images {
        let img = load_image(&join(path))?;
        let (_, crops) = prepare_image(
            &img,
            model.config.vision.crop_size,
            model.config.vision.max_crops_sft,
        )?;
        image_token_counts.push(crops.len() * n_patches);
        image_crops.push(crops);
    }

    let mut audio_frames = None;
    let mut audio_token_count = None;
    if let Some(path) = &raw.audio {
        let samples = crate::audio::wav::read_wav(&join(path))?;
        let feats = log_mel(&MelFrontendConfig::default(), &samples)?;
        let frames = truncate_frames(feats.frames, max_audio_tokens)?;
        audio_token_count = Some(subsampled_len(frames.shape()[0]));
        audio_frames = Some(frames);
    }

    let sample = SftSample {
        task_prompt: raw.prompt.clone(),
        image_token_counts,
        audio_token_count,
        label: raw.label.clone(),
    };
    let rendered = render_sft(&sample, &model.tokenizer)?;
    Ok(ResolvedSample {
        rendered,
        image_crops,
        audio_frames,
    })
}

/// Cap mel frames so the subsampled length stays within `max_tokens`.
pub fn truncate_frames(frames: Tensor, max_tokens: Option<usize>) -> Result<Tensor> {
    let Some(cap) = max_tokens else {
        return Ok(frames);
    };
    if cap == 0 {
        return Err(Error::Config("audio token cap must be >= 1".into()));
    }
    let (t, mels) = frames.dims2()?;
    let max_frames = cap * 8;
    if t <= max_frames {
        return Ok(frames);
    }
    let data = frames.data()[..max_frames * mels].to_vec();
    Tensor::new(vec![max_frames, mels], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_parses_and_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"task":"asr","prompt":"p","audio":"a.wav","label":"l","lang":"en"}"#,
                "\n",
                r#"{"task":"cap","prompt":"q","images":["i.png"],"label":"m","lang":"en"}"#,
                "\n"
            ),
        )
        .unwrap();
        let samples: Vec<RawSample> = read_jsonl(&path).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].audio.as_deref(), Some(Path::new("a.wav")));
        assert_eq!(samples[1].images.len(), 1);

        std::fs::write(&path, r#"{"task":"x","prompt":"p","label":"l","lang":"en","extra":1}"#)
            .unwrap();
        assert!(read_jsonl::<RawSample>(&path).is_err());
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "\n\n").unwrap();
        assert!(read_jsonl::<RawSample>(&path).is_err());
    }

    #[test]
    fn truncation_caps_subsampled_tokens() {
        let frames = Tensor::zeros(&[100, 80]);
        let kept = truncate_frames(frames.clone(), Some(5)).unwrap();
        assert_eq!(kept.shape(), &[40, 80]);
        assert_eq!(subsampled_len(40), 5);
        let untouched = truncate_frames(frames.clone(), Some(13)).unwrap();
        assert_eq!(untouched.shape(), &[100, 80]);
        let free = truncate_frames(frames, None).unwrap();
        assert_eq!(free.shape(), &[100, 80]);
    }
}
