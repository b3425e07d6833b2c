//! SFT sample rendering: the chat stream layout, placeholder spans for
//! modality payloads, and the label-only loss mask.

use crate::error::{Error, Result};
use crate::lora::router::Modality;
use crate::text::{Tokenizer, TOK_ASSISTANT, TOK_AUDIO, TOK_END, TOK_IMAGE, TOK_USER};

/// One supervised sample before tokenization. Payloads are carried as the
/// number of decoder positions their projected features will occupy.
#[derive(Debug, Clone)]
pub struct SftSample {
    /// May be empty (some question-answering tasks supply audio only).
    pub task_prompt: String,
    pub image_token_counts: Vec<usize>,
    pub audio_token_count: Option<usize>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaceholderSpan {
    pub start: usize,
    pub len: usize,
    pub modality: Modality,
    /// Index into the sample's payload list for this modality.
    pub payload_index: usize,
}

#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub tokens: Vec<u32>,
    pub spans: Vec<PlaceholderSpan>,
    /// True exactly on the label tokens and the closing end-of-turn.
    pub loss_mask: Vec<bool>,
}

impl RenderedSample {
    pub fn supervised_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }
}

/// Lay out one training stream:
/// `<|user|>` [image spans] [audio span] prompt `<|end|>` `<|assistant|>`
/// label `<|end|>`, with loss on the label and its closing `<|end|>` only.
pub fn render_sft(sample: &SftSample, tokenizer: &Tokenizer) -> Result<RenderedSample> {
    if sample.label.is_empty() {
        return Err(Error::Data("sft label must be nonempty".into()));
    }
    for text in [&sample.task_prompt, &sample.label] {
        for marker in ["<image>", "<audio>"] {
            if text.contains(marker) {
                return Err(Error::Data(format!(
                    "unresolved placeholder {marker:?} in sample text; payloads must be \
                     attached as features"
                )));
            }
        }
    }
    if sample.image_token_counts.iter().any(|&n| n == 0) {
        return Err(Error::Data("image payload with zero positions".into()));
    }
    if sample.audio_token_count == Some(0) {
        return Err(Error::Data("audio payload with zero positions".into()));
    }

    let mut tokens = vec![TOK_USER];
    let mut spans = Vec::new();
    for (payload_index, &n) in sample.image_token_counts.iter().enumerate() {
        spans.push(PlaceholderSpan {
            start: tokens.len(),
            len: n,
            modality: Modality::Image,
            payload_index,
        });
        tokens.extend(std::iter::repeat_n(TOK_IMAGE, n));
    }
    if let Some(n) = sample.audio_token_count {
        spans.push(PlaceholderSpan {
            start: tokens.len(),
            len: n,
            modality: Modality::Audio,
            payload_index: 0,
        });
        tokens.extend(std::iter::repeat_n(TOK_AUDIO, n));
    }
    tokens.extend(tokenizer.encode(&sample.task_prompt));
    tokens.push(TOK_END);
    tokens.push(TOK_ASSISTANT);
    let label_start = tokens.len();
    tokens.extend(tokenizer.encode(&sample.label));
    tokens.push(TOK_END);

    let mut loss_mask = vec![false; tokens.len()];
    for m in loss_mask.iter_mut().skip(label_start) {
        *m = true;
    }
    Ok(RenderedSample {
        tokens,
        spans,
        loss_mask,
    })
}
