//! Judge-prompt templating, score extraction, and the HTTP/stub transport
//! with retries, a concurrency bound, and a reply cache.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, OnceLock, RwLock};
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// MT-Bench turn-1, no reference answer.
const MT_BENCH_TURN1_DEFAULT: &str = r#"You are a helpful assistant.

[Instruction]
Please act as an impartial judge and evaluate the quality of the response provided by an AI assistant to the user question displayed below. Your evaluation should consider factors such as the helpfulness, relevance, accuracy, depth, creativity, and level of detail of the response. Begin your evaluation by providing a short explanation. Be as objective as possible. After providing your explanation, you must rate the response on a scale of 1 to 10 by strictly following this format: "[[rating]]", for example: "Rating: [[5]]".

[Question]
{question}

[The Start of Assistant's Answer]
{answer}
[The End of Assistant's Answer]"#;

/// MT-Bench turn-1 for math and code, judged against a reference answer.
const MT_BENCH_TURN1_MATH: &str = r#"You are a helpful assistant.

[Instruction]
Please act as an impartial judge and evaluate the quality of the response provided by an AI assistant to the user question displayed below. Your evaluation should consider correctness and helpfulness. You will be given a reference answer and the assistant's answer. Begin your evaluation by comparing the assistant's answer with the reference answer. Identify and correct any mistakes. Be as objective as possible. After providing your explanation, you must rate the response on a scale of 1 to 10 by strictly following this format: "[[rating]]", for example: "Rating: [[5]]".

[Question]
{question}

[The Start of Reference Answer]
{ref_answer}
[The End of Reference Answer]

[The Start of Assistant's Answer]
{answer}
[The End of Assistant's Answer]"#;

/// MT-Bench turn-2, no reference answers.
const MT_BENCH_TURN2_DEFAULT: &str = r#"Please act as an impartial judge and evaluate the quality of the response provided by an AI assistant to the user question displayed below. Your evaluation should consider factors such as the helpfulness, relevance, accuracy, depth, creativity, and level of detail of the response. You evaluation should focus on the assistant's answer to the second user question. Begin your evaluation by providing a short explanation. Be as objective as possible. After providing your explanation, you must rate the response on a scale of 1 to 10 by strictly following this format: "[[rating]]", for example: "Rating: [[5]]".

|The Start of Assistant A's Conversation with User|

### User:
{question_1}

### Assistant A:
{answer_1}

### User:
{question_2}

### Assistant A:
{answer_2}

|The End of Assistant A's Conversation with User|"#;

/// MT-Bench turn-2 for math and code.
const MT_BENCH_TURN2_MATH: &str = r#"Please act as an impartial judge and evaluate the quality of the response provided by an AI assistant to the user question. Your evaluation should consider correctness and helpfulness. You will be given a reference answer and the assistant's answer. You evaluation should focus on the assistant's answer to the second question. Begin your evaluation by comparing the assistant's answer with the reference answer. Identify and correct any mistakes. Be as objective as possible. After providing your explanation, you must rate the response on a scale of 1 to 10 by strictly following this format: "[[rating]]", for example: "Rating: [[5]]".

|The Start of Reference Answer|

### User:
{question_1}

### Reference answer:
{ref_answer_1}

### User:
{question_2}

### Reference answer:
{ref_answer_2}

|The End of Reference Answer|


|The Start of Assistant A's Conversation with User|

### User:
{question_1}

### Assistant A:
{answer_1}

### User:
{question_2}

### Assistant A:
{answer_2}

|The End of Assistant A's Conversation with User|"#;

/// AirBench-Chat pairwise scoring; assistant 1 is the reference answer.
const AIR_BENCH: &str = r#"You are a helpful and precise assistant for checking the quality of the answer.
[Detailed Audio Description]
{meta_info}
[Question]
{question}
[The Start of Assistant 1s Answer]
{reference}
[The End of Assistant 1s Answer]
[The Start of Assistant 2s Answer]
{ai_response}
[The End of Assistant 2s Answer]
[System]
We would like to request your feedback on the performance of two AI assistants in response to the user question and audio description displayed above. AI assistants are provided with detailed audio descriptions and questions.
Please rate the helpfulness, relevance, accuracy, and comprehensiveness of their responses. Each assistant receives an overall score on a scale of 1 to 10, where a higher score indicates better overall performance. Please output a single line containing only two values indicating the scores for Assistant 1 and 2, respectively. The two scores are separated by a space."#;

/// Speech-summarization overall-quality scoring, JSON reply.
const SUMMARIZATION: &str = r#"You are a skilled evaluator for summaries generated based on user-provided instructions. A prominent organization has enlisted your help to assess the overall quality of a summary by focusing on how effectively it adheres to the user's specific instructions. Rate the summary on a scale of 1 to 7 based on the following criteria:

1. If the summary fulfills the user's instructions comprehensively, accurately captures the required details, excludes any explicitly prohibited information, maintains the correct level of detail, adheres to the requested structure (e.g., bullet points, paragraphs), and is both fluent and coherent, assign a score of 7. The summary should read naturally, resembling a human-written summary. Coherence means ideas are logical and well-connected, with smooth transitions.

2. If the summary mostly fulfills the user instructions but has minor issues, such as slight deviations in structure, missing small details, or minor readability issues, assign a score of 5-6, depending on the severity of the deviation. Consider whether the issues are easy to fix and whether they affect the summary's usability.

3. If the summary fulfills the majority of the instructions but includes unimportant or extra information, omits key details specified by the user, or diverges slightly in structure or emphasis, assign a score of 4-5, depending on the significance of the issues. Weigh the importance of missing or extraneous content against the clarity and adherence to instructions.

4. If the summary partially adheres to the instructions, capturing some of the requested details but introducing inconsistencies, hallucinations, or irrelevant content, assign a score of 2-4, depending on the extent of the deviations and errors. Penalize for any explicitly prohibited content that has been included.

5. If the summary minimally adheres to the instructions, misses most of the required details, includes significant irrelevant or hallucinated content, or ignores the specified structure or tone, assign a score of 1-3, depending on the severity of the shortcomings.

6. If the summary fails to follow the user's instructions altogether, missing all critical requirements or containing a high proportion of irrelevant or fabricated content, assign a score of 1. This includes summaries that fail to meet any formatting, detail, or exclusion criteria.

Here is the input document, user instruction and the corresponding summary.
Source:
```
{src}
```
User Instruction:
```
{instruction}
```
Summary
```
{tgt}
```
Note: It is helpful to read the summary first, before reading the source document. This will allow you to judge whether you understand the main contents of the source document through the summary alone. Afterward, you can assess to what extent the summary accurately reflects the source document.

Note: Based on the above criteria and assign a overall score of summary in the scale 1-7. If the summary is not provided for evaluation, return "N/A". Besides the score, you should also provide a **brief** explanation.

Note: Use the following json format for easy downstream consumption.

{
    "explanation": "judge the summary based on the given criteria and explain your reasoning for the score you are going to give in the next field.",
    "score": THE_SCORE_VALUE
}"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum JudgeTemplate {
    MtBenchTurn1Default,
    MtBenchTurn1Math,
    MtBenchTurn2Default,
    MtBenchTurn2Math,
    AirBench,
    Summarization,
}

impl JudgeTemplate {
    pub const ALL: [JudgeTemplate; 6] = [
        JudgeTemplate::MtBenchTurn1Default,
        JudgeTemplate::MtBenchTurn1Math,
        JudgeTemplate::MtBenchTurn2Default,
        JudgeTemplate::MtBenchTurn2Math,
        JudgeTemplate::AirBench,
        JudgeTemplate::Summarization,
    ];

    pub fn id(self) -> &'static str {
        match self {
            JudgeTemplate::MtBenchTurn1Default => "mt_bench_turn1_default",
            JudgeTemplate::MtBenchTurn1Math => "mt_bench_turn1_math",
            JudgeTemplate::MtBenchTurn2Default => "mt_bench_turn2_default",
            JudgeTemplate::MtBenchTurn2Math => "mt_bench_turn2_math",
            JudgeTemplate::AirBench => "air_bench",
            JudgeTemplate::Summarization => "summarization",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            JudgeTemplate::MtBenchTurn1Default => MT_BENCH_TURN1_DEFAULT,
            JudgeTemplate::MtBenchTurn1Math => MT_BENCH_TURN1_MATH,
            JudgeTemplate::MtBenchTurn2Default => MT_BENCH_TURN2_DEFAULT,
            JudgeTemplate::MtBenchTurn2Math => MT_BENCH_TURN2_MATH,
            JudgeTemplate::AirBench => AIR_BENCH,
            JudgeTemplate::Summarization => SUMMARIZATION,
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            JudgeTemplate::MtBenchTurn1Default => &["question", "answer"],
            JudgeTemplate::MtBenchTurn1Math => &["question", "ref_answer", "answer"],
            JudgeTemplate::MtBenchTurn2Default => {
                &["question_1", "answer_1", "question_2", "answer_2"]
            }
            JudgeTemplate::MtBenchTurn2Math => &[
                "question_1",
                "ref_answer_1",
                "question_2",
                "ref_answer_2",
                "answer_1",
                "answer_2",
            ],
            JudgeTemplate::AirBench => &["meta_info", "question", "reference", "ai_response"],
            JudgeTemplate::Summarization => &["src", "instruction", "tgt"],
        }
    }

    /// Parse a judge reply for this template. `None` means the judge
    /// declined to score (summarization "N/A").
    pub fn extract(self, reply: &str) -> Result<Option<f64>> {
        match self {
            JudgeTemplate::MtBenchTurn1Default
            | JudgeTemplate::MtBenchTurn1Math
            | JudgeTemplate::MtBenchTurn2Default
            | JudgeTemplate::MtBenchTurn2Math => {
                extract_mt_bench(reply).map(|v| Some(f64::from(v)))
            }
            JudgeTemplate::AirBench => extract_air_bench(reply).map(Some),
            JudgeTemplate::Summarization => extract_summarization(reply),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeTarget {
    /// Offline transport returning a canned reply.
    Stub { reply: String },
    Endpoint { url: String, api_key: Option<String> },
}

impl JudgeTarget {
    /// Endpoint from `LORAMIX_JUDGE_URL` / `LORAMIX_JUDGE_KEY`, when set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("LORAMIX_JUDGE_URL").ok()?;
        Some(JudgeTarget::Endpoint {
            url,
            api_key: std::env::var("LORAMIX_JUDGE_KEY").ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeRequest {
    pub template: JudgeTemplate,
    pub prompt: String,
    pub target: JudgeTarget,
}

/// Fill every placeholder of the template; the transport target defaults
/// to an empty stub and is set by the caller.
pub fn fill_judge_template(
    template: JudgeTemplate,
    fields: &BTreeMap<String, String>,
) -> Result<JudgeRequest> {
    let mut prompt = template.text().to_string();
    for &name in template.placeholders() {
        let value = fields.get(name).ok_or_else(|| Error::Template {
            template: template.id().to_string(),
            field: name.to_string(),
        })?;
        prompt = prompt.replace(&format!("{{{name}}}"), value);
    }
    Ok(JudgeRequest {
        template,
        prompt,
        target: JudgeTarget::Stub {
            reply: String::new(),
        },
    })
}

fn mt_bench_pattern() -> &'static Regex {
    static RX: OnceLock<Regex> = OnceLock::new();
    RX.get_or_init(|| Regex::new(r"\[\[(\d+)\]\]").unwrap())
}

/// MT-Bench rating: the integer inside the first `[[n]]`, 1 to 10.
pub fn extract_mt_bench(reply: &str) -> Result<u32> {
    let caps = mt_bench_pattern()
        .captures(reply)
        .ok_or_else(|| Error::Extraction {
            raw: reply.to_string(),
        })?;
    let n: u32 = caps[1].parse().map_err(|_| Error::Extraction {
        raw: reply.to_string(),
    })?;
    if (1..=10).contains(&n) {
        Ok(n)
    } else {
        Err(Error::Extraction {
            raw: reply.to_string(),
        })
    }
}

/// AirBench emits "score1 score2" on one line; assistant 2 is the system
/// under test, so the second value is kept.
pub fn extract_air_bench(reply: &str) -> Result<f64> {
    for line in reply.lines() {
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .unwrap_or_default();
        if nums.len() == 2 {
            return Ok(nums[1]);
        }
    }
    Err(Error::Extraction {
        raw: reply.to_string(),
    })
}

/// First balanced top-level JSON object in the text, string-aware.
fn first_json_object(s: &str) -> Option<&str> {
    let start = s.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start..start + i + c.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Summarization reply: JSON with a numeric `score` 1-7, or the string
/// "N/A" when the judge had nothing to score (returned as `None`).
pub fn extract_summarization(reply: &str) -> Result<Option<f64>> {
    let fail = || Error::Extraction {
        raw: reply.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(reply.trim()).or_else(|_| {
        first_json_object(reply)
            .ok_or_else(fail)
            .and_then(|obj| serde_json::from_str(obj).map_err(|_| fail()))
    })?;
    match value.get("score") {
        Some(serde_json::Value::Number(n)) => {
            let v = n.as_f64().ok_or_else(fail)?;
            if (1.0..=7.0).contains(&v) {
                Ok(Some(v))
            } else {
                Err(fail())
            }
        }
        Some(serde_json::Value::String(s)) if s == "N/A" => Ok(None),
        _ => Err(fail()),
    }
}

fn first_int_in_range(reply: &str, lo: u32, hi: u32) -> Result<u32> {
    for token in reply.split_whitespace() {
        let digits = token.trim_matches(|c: char| !c.is_ascii_digit());
        if let Ok(n) = digits.parse::<u32>() {
            if (lo..=hi).contains(&n) {
                return Ok(n);
            }
        }
    }
    Err(Error::Extraction {
        raw: reply.to_string(),
    })
}

/// Binary hallucination flag: 0 = faithful, 1 = fabricated content.
pub fn extract_hallucination(reply: &str) -> Result<u32> {
    first_int_in_range(reply, 0, 1)
}

/// Instruction-adherence score on the 1-7 scale.
pub fn extract_adherence(reply: &str) -> Result<u32> {
    first_int_in_range(reply, 1, 7)
}

pub const JUDGE_MAX_RETRIES: usize = 3;

fn transient_backoff(attempt: usize) {
    std::thread::sleep(Duration::from_millis(25 << attempt));
}

/// One transport round-trip: POST {"prompt": ...} and read {"text": ...},
/// retrying transient failures (5xx, connection errors) up to
/// [`JUDGE_MAX_RETRIES`] times.
pub fn judge_transport(request: &JudgeRequest) -> Result<String> {
    let (url, api_key) = match &request.target {
        JudgeTarget::Stub { reply } => return Ok(reply.clone()),
        JudgeTarget::Endpoint { url, api_key } => (url, api_key),
    };
    let body = format!(
        "{{\"prompt\":{}}}",
        serde_json::to_string(&request.prompt)?
    );
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into();
    let mut attempt = 0usize;
    loop {
        let mut req = agent.post(url).header("content-type", "application/json");
        if let Some(key) = api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        match req.send(body.as_str()) {
            Ok(mut resp) => {
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| Error::Transport(format!("reading judge reply: {e}")))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Transport(format!("judge reply is not JSON: {e}")))?;
                return value
                    .get("text")
                    .and_then(|t| t.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| {
                        Error::Transport("judge reply lacks a \"text\" field".into())
                    });
            }
            Err(ureq::Error::StatusCode(code)) if code >= 500 && attempt < JUDGE_MAX_RETRIES => {
                attempt += 1;
                transient_backoff(attempt);
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(Error::Transport(format!(
                    "judge endpoint returned status {code}"
                )));
            }
            Err(ureq::Error::BadUri(e)) => {
                return Err(Error::Config(format!("judge endpoint URL: {e}")));
            }
            Err(_) if attempt < JUDGE_MAX_RETRIES => {
                attempt += 1;
                transient_backoff(attempt);
            }
            Err(e) => return Err(Error::Transport(e.to_string())),
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.available.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.available.notify_one();
    }
}

/// Batch judging with a reply cache keyed by (template id, prompt hash)
/// and a bound on concurrent transport calls.
pub struct JudgeClient {
    cache: RwLock<BTreeMap<(&'static str, u64), String>>,
    limiter: Semaphore,
}

impl JudgeClient {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            cache: RwLock::new(BTreeMap::new()),
            limiter: Semaphore::new(max_in_flight),
        }
    }

    pub fn judge(&self, request: &JudgeRequest) -> Result<String> {
        let key = (request.template.id(), fnv1a64(request.prompt.as_bytes()));
        if let Some(hit) = self.cache.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let reply = {
            let _slot = self.limiter.acquire();
            judge_transport(request)?
        };
        self.cache
            .write()
            .unwrap()
            .insert(key, reply.clone());
        Ok(reply)
    }

    /// Judge a batch in parallel; replies come back in request order.
    pub fn judge_batch(&self, requests: &[JudgeRequest]) -> Result<Vec<String>> {
        requests.par_iter().map(|r| self.judge(r)).collect()
    }
}
