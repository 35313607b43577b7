//! Uniform access to every text-generating role: actor, critic, annotator
//! and judge.
//!
//! A [`ModelBackend`] only moves text. [`Gateway`] wraps one and enforces the
//! contracts the pipeline relies on: step segmentation and the per-step token
//! cap, rollout budgets, answer extraction, critic score fallback, answer
//! redaction in annotator feedback, retries and grading.

mod grade;
mod mock;
mod remote;
mod templates;

pub use grade::{canonical_number, grade_normalized, normalize_answer, Grader};
pub use mock::{
    prefix_hash, CallCounts, CountingBackend, DefaultBehavior, ScriptKind, ScriptLoadError, ScriptRecord,
    ScriptedPolicy,
};
pub use remote::{RemoteBackend, RemoteSettings};
pub use templates::{render, PromptTemplates};

use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcts::extract_answer;
use crate::types::{approx_token_count, DivergencePair, PathSource, Question, ReasoningPath, Step, NO_CORRECTIONS};

/// Mask substituted for the correct answer inside annotator feedback.
pub const REDACTION: &str = "[REDACTED]";

/// End-of-sequence markers stripped from generated text; their presence
/// makes the step terminal.
pub const EOS_MARKERS: [&str; 4] = ["<|endoftext|>", "<|im_end|>", "</s>", "<eos>"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no scripted output for {kind} at question {question_id} prefix {prefix_hash}")]
    ScriptMiss {
        kind: &'static str,
        question_id: String,
        prefix_hash: String,
    },
    #[error("could not parse backend reply: {0}")]
    Parse(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("operation not supported by this backend: {0}")]
    Unsupported(&'static str),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// True for failures of the remote service itself, as opposed to bad
    /// input or a script that does not cover a request.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::Http { .. })
    }
}

pub type Result<T> = std::result::Result<T, GatewayError>;

/// Identifies one stochastic draw so backends can be reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SampleKey {
    pub seed: u64,
    pub index: u32,
}

impl SampleKey {
    pub fn new(seed: u64, index: u32) -> Self {
        Self { seed, index }
    }
}

/// Sampling parameters for step or completion generation.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub question: &'a Question,
    pub prior_steps: &'a [Step],
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub n_samples: usize,
    /// Ask for a single next step rather than a full completion.
    pub stop_at_step_boundary: bool,
}

impl GenerationRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(GatewayError::InvalidRequest("n_samples must be ≥ 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Critic output as produced by a backend, before score resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVerdict {
    pub text: String,
    /// Scalar from a score head, when the backend exposes one.
    pub score: Option<f64>,
}

/// Critique text plus scalar correctness score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub critique: String,
    pub score: f64,
}

/// Raw text interface every model backend implements.
pub trait ModelBackend: Send + Sync {
    /// Returns `req.n_samples` raw continuations of the partial path.
    fn generate(&self, req: &GenerationRequest<'_>, key: SampleKey) -> Result<Vec<String>>;

    fn critique(&self, question: &Question, answer: &ReasoningPath) -> Result<RawVerdict>;

    /// Returns the full text of a refined answer.
    fn refine(
        &self,
        question: &Question,
        answer: &ReasoningPath,
        critique: &str,
        temperature: f64,
        key: SampleKey,
    ) -> Result<String>;

    fn annotate(&self, question: &Question, pair: &DivergencePair) -> Result<String>;

    fn judge(&self, _question: &Question, _predicted: &str, _ground_truth: &str) -> Result<bool> {
        Err(GatewayError::Unsupported("judge"))
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Arc<B> {
    fn generate(&self, req: &GenerationRequest<'_>, key: SampleKey) -> Result<Vec<String>> {
        (**self).generate(req, key)
    }
    fn critique(&self, question: &Question, answer: &ReasoningPath) -> Result<RawVerdict> {
        (**self).critique(question, answer)
    }
    fn refine(
        &self,
        question: &Question,
        answer: &ReasoningPath,
        critique: &str,
        temperature: f64,
        key: SampleKey,
    ) -> Result<String> {
        (**self).refine(question, answer, critique, temperature, key)
    }
    fn annotate(&self, question: &Question, pair: &DivergencePair) -> Result<String> {
        (**self).annotate(question, pair)
    }
    fn judge(&self, question: &Question, predicted: &str, ground_truth: &str) -> Result<bool> {
        (**self).judge(question, predicted, ground_truth)
    }
}

/// Exponential backoff for retryable failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn run<T>(&self, what: &str, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = self.base_delay.saturating_mul(1 << attempt);
                    log::warn!(
                        "{what} failed ({e}); retry {} of {} in {delay:?}",
                        attempt + 1,
                        self.max_retries
                    );
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Knobs of the gateway that are independent of the backend.
#[derive(Debug, Clone)]
pub struct GatewaySettings {
    /// Per-step token cap applied to every generated step.
    pub step_token_cap: usize,
    pub retry: RetryPolicy,
    /// Score used when the critic reply carries neither a score head value
    /// nor a `SCORE:` line. `None` applies the canonical-text rule: 1.0 for
    /// "No corrections needed.", 0.0 otherwise.
    pub score_fallback: Option<f64>,
    pub grader: Grader,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            step_token_cap: 30,
            retry: RetryPolicy::default(),
            score_fallback: None,
            grader: Grader::Normalized,
        }
    }
}

/// A backend plus the contracts enforced on top of it.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    settings: GatewaySettings,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>, settings: GatewaySettings) -> Self {
        Self { backend, settings }
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    pub fn backend(&self) -> &Arc<dyn ModelBackend> {
        &self.backend
    }

    /// Samples `req.n_samples` candidate next steps, each truncated to
    /// `min(req.max_new_tokens, step_token_cap)` tokens.
    pub fn generate_steps(&self, req: &GenerationRequest<'_>, key: SampleKey) -> Result<Vec<Step>> {
        req.validate()?;
        let req = GenerationRequest {
            stop_at_step_boundary: true,
            ..*req
        };
        let raw = self
            .settings
            .retry
            .run("generate_steps", || self.backend.generate(&req, key))?;
        if raw.len() < req.n_samples {
            return Err(GatewayError::Parse(format!(
                "expected {} samples, backend returned {}",
                req.n_samples,
                raw.len()
            )));
        }
        let cap = req.max_new_tokens.min(self.settings.step_token_cap);
        Ok(raw
            .iter()
            .take(req.n_samples)
            .map(|text| first_step(text, cap))
            .collect())
    }

    /// Completes a partial path until a terminal step or until `budget` new
    /// tokens have been produced. Running out of budget is not an error: the
    /// path simply comes back without a final answer.
    pub fn rollout(
        &self,
        question: &Question,
        prior_steps: &[Step],
        budget: usize,
        temperature: f64,
        key: SampleKey,
    ) -> Result<ReasoningPath> {
        self.complete_path(question, prior_steps, budget, temperature, key, PathSource::Rollout)
    }

    /// The actor's unaided first answer.
    pub fn answer(
        &self,
        question: &Question,
        budget: usize,
        temperature: f64,
        key: SampleKey,
    ) -> Result<ReasoningPath> {
        self.complete_path(question, &[], budget, temperature, key, PathSource::ActorDirect)
    }

    fn complete_path(
        &self,
        question: &Question,
        prior_steps: &[Step],
        budget: usize,
        temperature: f64,
        key: SampleKey,
        source: PathSource,
    ) -> Result<ReasoningPath> {
        if budget < 1 {
            return Err(GatewayError::InvalidRequest("rollout budget must be ≥ 1".into()));
        }
        let mut steps = prior_steps.to_vec();
        if !prior_steps.last().is_some_and(|s| s.is_terminal) {
            let req = GenerationRequest {
                question,
                prior_steps,
                max_new_tokens: budget,
                temperature,
                n_samples: 1,
                stop_at_step_boundary: false,
            };
            let raw = self
                .settings
                .retry
                .run("rollout", || self.backend.generate(&req, key))?;
            let text = raw.into_iter().next().ok_or(GatewayError::EmptyResponse)?;
            steps.extend(take_budget(segment_steps(&text, self.settings.step_token_cap), budget));
        }
        Ok(finish_path(&question.id, steps, source))
    }

    /// Runs the critic and resolves its score to `[0, 1]`.
    pub fn critique(&self, question: &Question, answer: &ReasoningPath) -> Result<CriticVerdict> {
        if answer.is_empty() {
            return Err(GatewayError::InvalidRequest("cannot critique an empty answer".into()));
        }
        let raw = self
            .settings
            .retry
            .run("critique", || self.backend.critique(question, answer))?;
        resolve_verdict(raw, self.settings.score_fallback)
    }

    /// Asks the actor for a new answer given its previous answer and a critique.
    pub fn refine(
        &self,
        question: &Question,
        answer: &ReasoningPath,
        critique: &str,
        budget: usize,
        temperature: f64,
        key: SampleKey,
    ) -> Result<ReasoningPath> {
        if critique.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("critique must be non-empty".into()));
        }
        let text = self.settings.retry.run("refine", || {
            self.backend.refine(question, answer, critique, temperature, key)
        })?;
        let steps = take_budget(segment_steps(&text, self.settings.step_token_cap), budget.max(1));
        Ok(finish_path(&question.id, steps, PathSource::Refined))
    }

    /// Step-level critique of branch B written by comparing it to branch A,
    /// with branch A's final answer masked out.
    pub fn annotate(&self, question: &Question, pair: &DivergencePair) -> Result<String> {
        let violations = pair.violations();
        if !violations.is_empty() {
            return Err(GatewayError::InvalidRequest(violations.join("; ")));
        }
        let text = self
            .settings
            .retry
            .run("annotate", || self.backend.annotate(question, pair))?;
        let text = text.trim();
        if text.is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        let reference_answer = pair.branch_a.last().and_then(|s| extract_answer_from_step(&s.text));
        Ok(match reference_answer {
            Some(ans) => redact(text, &ans),
            None => text.to_string(),
        })
    }

    pub fn grade(&self, question: &Question, predicted: &str) -> Result<bool> {
        match self.settings.grader {
            Grader::Normalized => Ok(grade_normalized(predicted, &question.ground_truth)),
            Grader::RemoteJudge => self.settings.retry.run("judge", || {
                self.backend.judge(question, predicted, &question.ground_truth)
            }),
        }
    }

    /// Grades a path's final answer; paths without one are incorrect.
    pub fn grade_path(&self, question: &Question, path: &ReasoningPath) -> Result<bool> {
        match &path.final_answer {
            Some(ans) => self.grade(question, ans),
            None => Ok(false),
        }
    }
}

fn finish_path(question_id: &str, steps: Vec<Step>, source: PathSource) -> ReasoningPath {
    let mut path = ReasoningPath::new(question_id, steps, source);
    path.final_answer = extract_answer(&path);
    path
}

fn take_budget(steps: Vec<Step>, budget: usize) -> Vec<Step> {
    let mut used = 0;
    let mut out = Vec::new();
    for step in steps {
        if used + step.token_count > budget {
            break;
        }
        used += step.token_count;
        let terminal = step.is_terminal;
        out.push(step);
        if terminal {
            break;
        }
    }
    out
}

fn score_line_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*score\s*:\s*([0-9]*\.?[0-9]+)\s*$").expect("valid regex"))
}

fn critique_label_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*critique\s*:\s*").expect("valid regex"))
}

/// Resolves a critic reply into a verdict: score head value first, then a
/// `SCORE: x` line, then the fallback.
pub fn resolve_verdict(raw: RawVerdict, fallback: Option<f64>) -> Result<CriticVerdict> {
    let re = score_line_regex();
    let parsed = re
        .captures_iter(&raw.text)
        .last()
        .and_then(|c| c[1].parse::<f64>().ok());
    let critique = re.replace_all(&raw.text, "");
    let critique = critique_label_regex().replace(critique.trim(), "").trim().to_string();
    if critique.is_empty() {
        return Err(GatewayError::Parse("critic reply has no critique text".into()));
    }
    let score = match raw.score.or(parsed) {
        Some(s) if s.is_finite() => s.clamp(0.0, 1.0),
        Some(s) => return Err(GatewayError::Parse(format!("critic score {s} is not finite"))),
        None => fallback.unwrap_or(if critique == NO_CORRECTIONS { 1.0 } else { 0.0 }),
    };
    Ok(CriticVerdict { critique, score })
}

/// Masks whole-token occurrences of `answer` in `text`. An occurrence glued
/// to surrounding letters or digits (`142`, `7.5` for answer `7`) is kept.
pub fn redact(text: &str, answer: &str) -> String {
    let answer = answer.trim();
    if answer.is_empty() {
        return text.to_string();
    }
    let word = |c: char| c.is_alphanumeric();
    let check_start = answer.starts_with(word);
    let check_end = answer.ends_with(word);
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (pos, _) in text.match_indices(answer) {
        let before = text[..pos].chars().next_back();
        let tail = &text[pos + answer.len()..];
        let mut after = tail.chars();
        let next = after.next();
        let decimal_tail = matches!(next, Some('.' | ',')) && after.next().is_some_and(|c| c.is_ascii_digit());
        if (check_start && before.is_some_and(word)) || (check_end && (next.is_some_and(word) || decimal_tail)) {
            continue;
        }
        out.push_str(&text[last..pos]);
        out.push_str(REDACTION);
        last = pos + answer.len();
    }
    out.push_str(&text[last..]);
    out
}

fn strip_eos(line: &str) -> (String, bool) {
    let mut s = line.to_string();
    let mut found = false;
    for m in EOS_MARKERS {
        if s.contains(m) {
            found = true;
            s = s.replace(m, "");
        }
    }
    (s.trim().to_string(), found)
}

fn answer_marker_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)final\s+answer\s*:").expect("valid regex"))
}

pub(crate) fn has_answer_marker(text: &str) -> bool {
    answer_marker_regex().is_match(text)
}

/// Text following the last final-answer marker of a single step, trimmed of
/// whitespace and trailing sentence punctuation.
pub(crate) fn extract_answer_from_step(text: &str) -> Option<String> {
    let m = answer_marker_regex().find_iter(text).last()?;
    let tail = text[m.end()..].lines().next().unwrap_or("");
    let ans = tail
        .trim()
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | '!' | '。') || c.is_whitespace())
        .trim();
    (!ans.is_empty()).then(|| ans.to_string())
}

/// Splits generated text into steps.
///
/// Each non-empty line is a step. Lines longer than `cap` tokens are cut
/// into chunks of at most `cap` tokens, preferring to end a chunk after a
/// sentence terminator. The first line carrying a final-answer marker or an
/// end-of-sequence token is terminal and ends the segmentation.
pub fn segment_steps(text: &str, cap: usize) -> Vec<Step> {
    let cap = cap.max(1);
    let mut steps = Vec::new();
    for line in text.lines() {
        let (line, eos) = strip_eos(line);
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            if eos {
                steps.push(Step {
                    text: String::new(),
                    token_count: 0,
                    is_terminal: true,
                });
                return steps;
            }
            continue;
        }
        let line_terminal = eos || has_answer_marker(&line);
        let chunks = chunk_words(&words, cap);
        let last = chunks.len() - 1;
        for (i, chunk) in chunks.into_iter().enumerate() {
            let text = chunk.join(" ");
            let terminal = line_terminal && (i == last || has_answer_marker(&text));
            steps.push(Step {
                token_count: chunk.len(),
                text,
                is_terminal: terminal,
            });
            if terminal {
                return steps;
            }
        }
    }
    steps
}

fn chunk_words<'a>(words: &[&'a str], cap: usize) -> Vec<Vec<&'a str>> {
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < words.len() {
        let end = (start + cap).min(words.len());
        let cut = if end == words.len() {
            end
        } else {
            sentence_cut(&words[start..end]).map_or(end, |k| start + k)
        };
        chunks.push(words[start..cut].to_vec());
        start = cut;
    }
    chunks
}

/// Length of the longest prefix of `window` ending in a sentence terminator.
fn sentence_cut(window: &[&str]) -> Option<usize> {
    window
        .iter()
        .rposition(|w| w.ends_with(['.', '!', '?', '。']))
        .map(|i| i + 1)
}

/// The first step of a raw continuation, truncated to `cap` tokens.
fn first_step(text: &str, cap: usize) -> Step {
    match segment_steps(text, cap).into_iter().next() {
        Some(step) => step,
        None => Step {
            text: String::new(),
            token_count: 0,
            is_terminal: true,
        },
    }
}

/// Counts tokens the way generated steps are counted.
pub fn count_tokens(text: &str) -> usize {
    approx_token_count(text)
}
