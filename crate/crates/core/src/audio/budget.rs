//! Token-budget arithmetic for the 80ms audio token rate.

use crate::error::{Error, Result};

/// Output length of the 8x subsampler: three halvings, each rounding up.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2).div_ceil(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioBudget {
    pub frames: usize,
    pub tokens: usize,
    pub fits: bool,
}

/// Tokens consumed by `duration_s` of audio at the 10ms frame / 80ms token
/// rate, and whether they fit a context alongside `reserved_text` tokens.
pub fn audio_token_budget(
    duration_s: f64,
    context_tokens: usize,
    reserved_text: usize,
) -> Result<AudioBudget> {
    if !(duration_s > 0.0) {
        return Err(Error::Domain(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let frames = (duration_s * 100.0).ceil() as usize;
    let tokens = subsampled_len(frames);
    Ok(AudioBudget {
        frames,
        tokens,
        fits: tokens + reserved_text <= context_tokens,
    })
}

/// Longest duration (seconds) whose tokens fit the context: each token
/// covers 8 frames = 80 ms.
pub fn max_duration_s(context_tokens: usize, reserved_text: usize) -> f64 {
    let budget = context_tokens.saturating_sub(reserved_text);
    budget as f64 * 0.08
}
