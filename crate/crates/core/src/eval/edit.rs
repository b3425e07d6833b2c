//! Word and character error rates over Levenshtein distance.

use crate::error::{Error, Result};

/// Single-row Levenshtein DP over any comparable tokens.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Default ASR text normalization: lowercase, drop everything that is
/// neither alphanumeric nor whitespace.
pub fn default_normalizer(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect()
}

/// Word error rate with a caller-supplied normalizer.
pub fn wer_with(
    hypothesis: &str,
    reference: &str,
    normalizer: impl Fn(&str) -> String,
) -> Result<f64> {
    let hyp_n = normalizer(hypothesis);
    let ref_n = normalizer(reference);
    let hyp: Vec<&str> = hyp_n.split_whitespace().collect();
    let refr: Vec<&str> = ref_n.split_whitespace().collect();
    if refr.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "WER reference empty after normalization: {reference:?}"
        )));
    }
    Ok(edit_distance(&hyp, &refr) as f64 / refr.len() as f64)
}

pub fn wer(hypothesis: &str, reference: &str) -> Result<f64> {
    wer_with(hypothesis, reference, default_normalizer)
}

/// Character error rate: edit distance over the non-whitespace characters.
pub fn cer(hypothesis: &str, reference: &str) -> Result<f64> {
    let hyp: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let refr: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if refr.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "CER reference has no characters: {reference:?}"
        )));
    }
    Ok(edit_distance(&hyp, &refr) as f64 / refr.len() as f64)
}

/// Lowercased primary language subtag: "ZH-cn" -> "zh".
pub(crate) fn primary_subtag(lang: &str) -> String {
    lang.split(['-', '_'])
        .next()
        .unwrap_or(lang)
        .to_lowercase()
}

/// Japanese and Chinese are scored with CER, everything else with WER.
pub fn uses_cer(lang: &str) -> bool {
    let primary = primary_subtag(lang);
    primary == "ja" || primary == "zh"
}

/// Language-dispatched error rate.
pub fn error_rate(hypothesis: &str, reference: &str, lang: &str) -> Result<f64> {
    if uses_cer(lang) {
        cer(hypothesis, reference)
    } else {
        wer(hypothesis, reference)
    }
}
