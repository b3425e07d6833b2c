//! The metric stack: error rates, BLEU, CoT splitting, judge scoring, and
//! leaderboard-style report assembly.

pub mod aggregate;
pub mod bleu;
pub mod cot;
pub mod edit;
pub mod judge;

pub use aggregate::{choice_accuracy, choice_letter, macro_average, mt_bench_average, Aggregator};
pub use bleu::{bleu, bleu_for_lang, tokenize_13a, BleuTokenizer};
pub use cot::{cot_split, CotSplit, COT_SEPARATOR};
pub use edit::{cer, error_rate, uses_cer, wer, wer_with};
pub use judge::{
    extract_adherence, extract_air_bench, extract_hallucination, extract_mt_bench,
    extract_summarization, fill_judge_template, judge_transport, JudgeClient, JudgeRequest,
    JudgeTarget, JudgeTemplate,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::read_jsonl;

/// Stamped into every report: the stand-in tokenization for languages
/// whose morphological tokenizers are not available here.
pub const TOKENIZER_DEVIATION_NOTE: &str =
    "ja/zh text is scored per character (CER, character BLEU) in place of morphological tokenization";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Asr,
    Ast,
    Sqqa,
    Ssum,
    Au,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Asr => "asr",
            EvalTask::Ast => "ast",
            EvalTask::Sqqa => "sqqa",
            EvalTask::Ssum => "ssum",
            EvalTask::Au => "au",
        }
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "asr" => Ok(EvalTask::Asr),
            "ast" => Ok(EvalTask::Ast),
            "sqqa" => Ok(EvalTask::Sqqa),
            "ssum" => Ok(EvalTask::Ssum),
            "au" => Ok(EvalTask::Au),
            other => Err(Error::Config(format!(
                "unknown eval task {other:?} (expected asr|ast|sqqa|ssum|au)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub id: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub audio: Option<PathBuf>,
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub reference: String,
    #[serde(default)]
    pub lang: Option<String>,
    #[serde(default)]
    pub direction: Option<String>,
    /// Model output; filled by inference or carried in the manifest.
    #[serde(default)]
    pub hypothesis: Option<String>,
    /// Extra judged-task fields (turn, src, ref_answer, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl EvalItem {
    fn hypothesis(&self) -> Result<&str> {
        self.hypothesis
            .as_deref()
            .ok_or_else(|| Error::Data(format!("item {} has no hypothesis to score", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub task: EvalTask,
    pub dataset: String,
    pub items: Vec<EvalItem>,
}

impl EvalManifest {
    pub fn new(task: EvalTask, dataset: impl Into<String>, items: Vec<EvalItem>) -> Result<Self> {
        let m = Self {
            task,
            dataset: dataset.into(),
            items,
        };
        m.validate()?;
        Ok(m)
    }

    /// One JSON item per line; the dataset name is the file stem.
    pub fn from_jsonl(path: &Path, task: EvalTask) -> Result<Self> {
        let items = read_jsonl(path)?;
        let dataset = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unnamed".into());
        Self::new(task, dataset, items)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::Data(format!("duplicate item id {:?}", item.id)));
            }
            if self.task == EvalTask::Ast && item.direction.is_none() {
                return Err(Error::Data(format!(
                    "AST item {:?} carries no direction",
                    item.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub group: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: String,
    pub dataset: String,
    pub metric: String,
    pub notes: Vec<String>,
    pub subcategories: BTreeMap<String, f64>,
    pub overall: f64,
    pub excluded: usize,
    pub per_item: Vec<ItemScore>,
}

impl ScoreReport {
    /// Aligned plain-text table: one subcategory per row, macro average
    /// last.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task {} | {} | {}", self.task, self.dataset, self.metric);
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        let width = self
            .subcategories
            .keys()
            .map(|k| k.len())
            .chain(["Average".len()])
            .max()
            .unwrap_or(7);
        let _ = writeln!(out, "{:-<1$}", "", width + 12);
        for (group, value) in &self.subcategories {
            let _ = writeln!(out, "{group:<width$}  {value:>10.4}");
        }
        let _ = writeln!(out, "{:-<1$}", "", width + 12);
        let _ = writeln!(out, "{:<width$}  {:>10.4}", "Average", self.overall);
        if self.excluded > 0 {
            let _ = writeln!(out, "unscored items excluded: {}", self.excluded);
        }
        out
    }
}

fn base_notes() -> Vec<String> {
    vec![TOKENIZER_DEVIATION_NOTE.to_string()]
}

/// ASR scoring: WER per language, CER for ja/zh, macro average across
/// language groups.
pub fn score_asr(manifest: &EvalManifest) -> Result<ScoreReport> {
    manifest.validate()?;
    let mut agg = Aggregator::new();
    let mut per_item = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let hyp = item.hypothesis()?;
        let lang = item.lang.as_deref().unwrap_or("en");
        let rate = error_rate(hyp, &item.reference, lang)?;
        agg.add(lang, Some(rate));
        per_item.push(ItemScore {
            id: item.id.clone(),
            group: lang.to_string(),
            score: Some(rate),
        });
    }
    let (subcategories, overall) = agg.finish()?;
    Ok(ScoreReport {
        task: manifest.task.name().into(),
        dataset: manifest.dataset.clone(),
        metric: "error rate (WER; CER for ja/zh)".into(),
        notes: base_notes(),
        subcategories,
        overall,
        excluded: agg.excluded(),
        per_item,
    })
}

/// AST scoring: split the CoT output, corpus BLEU per direction with the
/// target-language tokenizer, macro average across directions.
pub fn score_ast(manifest: &EvalManifest) -> Result<ScoreReport> {
    manifest.validate()?;
    if manifest.items.is_empty() {
        return Err(Error::UndefinedMetric("AST manifest has no items".into()));
    }
    let mut grouped: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    let mut per_item = Vec::with_capacity(manifest.items.len());
    let mut missing_sep = 0usize;
    for item in &manifest.items {
        let direction = item.direction.clone().expect("validated above");
        let split = cot_split(item.hypothesis()?);
        if split.missing_separator {
            missing_sep += 1;
        }
        let slot = grouped.entry(direction.clone()).or_default();
        slot.0.push(split.translation);
        slot.1.push(item.reference.clone());
        per_item.push(ItemScore {
            id: item.id.clone(),
            group: direction,
            score: None,
        });
    }
    let mut subcategories = BTreeMap::new();
    for (direction, (hyps, refs)) in &grouped {
        let target = direction
            .rsplit('-')
            .next()
            .unwrap_or(direction.as_str());
        subcategories.insert(
            direction.clone(),
            bleu(hyps, refs, BleuTokenizer::for_lang(target))?,
        );
    }
    let overall = macro_average(&subcategories.values().copied().collect::<Vec<_>>())?;
    let mut notes = base_notes();
    if missing_sep > 0 {
        notes.push(format!(
            "{missing_sep} output(s) lacked \"{COT_SEPARATOR}\"; whole output scored as translation"
        ));
    }
    Ok(ScoreReport {
        task: manifest.task.name().into(),
        dataset: manifest.dataset.clone(),
        metric: "corpus BLEU (13a; char for ja/zh targets)".into(),
        notes,
        subcategories,
        overall,
        excluded: 0,
        per_item,
    })
}

/// Multiple-choice scoring by exact match of the extracted letter.
pub fn score_choice(manifest: &EvalManifest) -> Result<ScoreReport> {
    manifest.validate()?;
    let mut agg = Aggregator::new();
    let mut per_item = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let want = choice_letter(&item.reference).ok_or_else(|| {
            Error::Data(format!(
                "item {}: reference {:?} carries no choice letter",
                item.id, item.reference
            ))
        })?;
        let got = choice_letter(item.hypothesis()?);
        let score = f64::from(got == Some(want));
        agg.add("accuracy", Some(score));
        per_item.push(ItemScore {
            id: item.id.clone(),
            group: "accuracy".into(),
            score: Some(score),
        });
    }
    let (subcategories, overall) = agg.finish()?;
    Ok(ScoreReport {
        task: manifest.task.name().into(),
        dataset: manifest.dataset.clone(),
        metric: "choice accuracy".into(),
        notes: base_notes(),
        subcategories,
        overall,
        excluded: 0,
        per_item,
    })
}

fn judged_fields(item: &EvalItem) -> BTreeMap<String, String> {
    let mut fields = item.meta.clone();
    fields.insert("question".into(), item.prompt.clone());
    fields
}

/// Open-ended spoken QA judged MT-Bench style: grouped by turn, overall =
/// mean of the turn means.
pub fn score_sqqa(
    manifest: &EvalManifest,
    client: &JudgeClient,
    target: &JudgeTarget,
) -> Result<ScoreReport> {
    manifest.validate()?;
    let mut requests = Vec::with_capacity(manifest.items.len());
    let mut groups = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let turn = item.meta.get("turn").map(String::as_str).unwrap_or("1");
        let mut fields = judged_fields(item);
        let template = if turn == "2" {
            fields.insert("question_2".into(), item.prompt.clone());
            fields.insert("answer_2".into(), item.hypothesis()?.to_string());
            if fields.contains_key("ref_answer_1") {
                JudgeTemplate::MtBenchTurn2Math
            } else {
                JudgeTemplate::MtBenchTurn2Default
            }
        } else {
            fields.insert("answer".into(), item.hypothesis()?.to_string());
            if fields.contains_key("ref_answer") {
                JudgeTemplate::MtBenchTurn1Math
            } else {
                JudgeTemplate::MtBenchTurn1Default
            }
        };
        let mut request = fill_judge_template(template, &fields)?;
        request.target = target.clone();
        requests.push(request);
        groups.push(format!("turn-{turn}"));
    }
    let replies = client.judge_batch(&requests)?;
    let mut agg = Aggregator::new();
    let mut per_item = Vec::with_capacity(manifest.items.len());
    for ((item, group), (request, reply)) in manifest
        .items
        .iter()
        .zip(&groups)
        .zip(requests.iter().zip(&replies))
    {
        let score = request.template.extract(reply)?;
        agg.add(group, score);
        per_item.push(ItemScore {
            id: item.id.clone(),
            group: group.clone(),
            score,
        });
    }
    let (subcategories, overall) = agg.finish()?;
    Ok(ScoreReport {
        task: manifest.task.name().into(),
        dataset: manifest.dataset.clone(),
        metric: "judge score 1-10 (mean over turns)".into(),
        notes: base_notes(),
        subcategories,
        overall,
        excluded: agg.excluded(),
        per_item,
    })
}

/// Speech summarization judged on overall quality 1-7; "N/A" replies are
/// excluded and counted.
pub fn score_ssum(
    manifest: &EvalManifest,
    client: &JudgeClient,
    target: &JudgeTarget,
) -> Result<ScoreReport> {
    manifest.validate()?;
    let mut requests = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let mut fields = judged_fields(item);
        if !fields.contains_key("src") {
            return Err(Error::Data(format!(
                "item {}: summarization needs meta.src (the source transcript)",
                item.id
            )));
        }
        fields.insert("instruction".into(), item.prompt.clone());
        fields.insert("tgt".into(), item.hypothesis()?.to_string());
        let mut request = fill_judge_template(JudgeTemplate::Summarization, &fields)?;
        request.target = target.clone();
        requests.push(request);
    }
    let replies = client.judge_batch(&requests)?;
    let mut agg = Aggregator::new();
    let mut per_item = Vec::with_capacity(manifest.items.len());
    for (item, reply) in manifest.items.iter().zip(&replies) {
        let score = extract_summarization(reply)?;
        agg.add("overall", score);
        per_item.push(ItemScore {
            id: item.id.clone(),
            group: "overall".into(),
            score,
        });
    }
    let (subcategories, overall) = agg.finish()?;
    Ok(ScoreReport {
        task: manifest.task.name().into(),
        dataset: manifest.dataset.clone(),
        metric: "judge overall quality 1-7".into(),
        notes: base_notes(),
        subcategories,
        overall,
        excluded: agg.excluded(),
        per_item,
    })
}
