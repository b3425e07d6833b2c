//! Leaderboard-style aggregation: macro averages over subcategories.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Group scores, then average the group means (macro). Items with no
/// score (judge declined) are excluded and counted.
#[derive(Debug, Clone, Default)]
pub struct Aggregator {
    groups: BTreeMap<String, Vec<f64>>,
    excluded: usize,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, score: Option<f64>) {
        match score {
            Some(v) => self.groups.entry(group.to_string()).or_default().push(v),
            None => self.excluded += 1,
        }
    }

    pub fn excluded(&self) -> usize {
        self.excluded
    }

    /// Per-group means and their unweighted mean.
    pub fn finish(&self) -> Result<(BTreeMap<String, f64>, f64)> {
        let means: BTreeMap<String, f64> = self
            .groups
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(g, v)| (g.clone(), v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        if means.is_empty() {
            return Err(Error::UndefinedMetric(
                "aggregate over zero scored items".into(),
            ));
        }
        let overall = means.values().sum::<f64>() / means.len() as f64;
        Ok((means, overall))
    }
}

/// Macro average of pre-computed subcategory values (e.g. one score per
/// language row).
pub fn macro_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("macro average of nothing".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// MT-Bench convention: mean of the turn-1 and turn-2 means.
pub fn mt_bench_average(turn1: &[f64], turn2: &[f64]) -> Result<f64> {
    Ok((macro_average(turn1)? + macro_average(turn2)?) / 2.0)
}

/// First standalone choice letter in a model answer ("B", "the answer
/// is B.", "(b)"), uppercased.
pub fn choice_letter(s: &str) -> Option<char> {
    for token in s.split_whitespace() {
        let stripped = token.trim_matches(|c: char| !c.is_ascii_alphanumeric());
        let mut chars = stripped.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if c.is_ascii_alphabetic() {
                return Some(c.to_ascii_uppercase());
            }
        }
    }
    None
}

/// Multiple-choice accuracy by exact match of the extracted letters.
pub fn choice_accuracy<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::shape(
            "choice_accuracy",
            format!("{} references", hypotheses.len()),
            format!("{}", references.len()),
        ));
    }
    if hypotheses.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over zero items".into()));
    }
    let mut correct = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let want = choice_letter(r.as_ref()).ok_or_else(|| {
            Error::Data(format!(
                "reference {:?} carries no choice letter",
                r.as_ref()
            ))
        })?;
        if choice_letter(h.as_ref()) == Some(want) {
            correct += 1;
        }
    }
    Ok(correct as f64 / hypotheses.len() as f64)
}
