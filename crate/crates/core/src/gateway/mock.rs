//! Deterministic scripted backend and a call-counting wrapper.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grade::grade_normalized;
use super::{GatewayError, GenerationRequest, ModelBackend, RawVerdict, Result, SampleKey};
use crate::types::{DivergencePair, Question, ReasoningPath, NO_CORRECTIONS};

/// Which role a script record answers for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Steps,
    Completion,
    Critique,
    Refine,
    Annotate,
    Judge,
}

impl ScriptKind {
    fn name(self) -> &'static str {
        match self {
            ScriptKind::Steps => "steps",
            ScriptKind::Completion => "completion",
            ScriptKind::Critique => "critique",
            ScriptKind::Refine => "refine",
            ScriptKind::Annotate => "annotate",
            ScriptKind::Judge => "judge",
        }
    }
}

/// Behavior when no record covers a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultBehavior {
    /// Answer with a deterministic reflection of the input.
    #[default]
    Echo,
    /// Return [`GatewayError::ScriptMiss`].
    Fail,
}

/// One line of a mock script file.
///
/// The lookup key is `(question_id, prefix)`, where the prefix is the
/// step-text sequence the request conditions on: prior steps for `steps`
/// and `completion`, the answer path for `critique` and `refine`, the shared
/// prefix followed by branch B for `annotate`, and the single predicted
/// answer for `judge`. Give either `prefix` (step texts) or `prefix_hash`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub question_id: String,
    pub kind: ScriptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_hash: Option<String>,
    pub outputs: Vec<String>,
    /// Critic scores, paired index-wise with `outputs`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptLoadError {
    #[error("reading script: {0}")]
    Io(#[from] std::io::Error),
    #[error("script line {line}: {message}")]
    Record { line: usize, message: String },
}

/// Hex digest identifying a step-text sequence.
pub fn prefix_hash<S: AsRef<str>>(steps: &[S]) -> String {
    let mut h = Sha256::new();
    h.update((steps.len() as u64).to_le_bytes());
    for s in steps {
        let s = s.as_ref().as_bytes();
        h.update((s.len() as u64).to_le_bytes());
        h.update(s);
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone)]
struct Entry {
    outputs: Vec<String>,
    scores: Vec<f64>,
}

/// Scripted test double for every model role.
///
/// Output `i` of a request is `outputs[i % len]`, where `i` comes from the
/// request's [`SampleKey`] index (times `n_samples`, plus the sample offset
/// for step generation). Except for `steps`, which requires an exact prefix
/// match, lookups fall back to the longest scripted prefix of the request's
/// prefix, so one record can cover a whole subtree.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    script: HashMap<(String, ScriptKind, String), Entry>,
    pub default_behavior: DefaultBehavior,
}

impl ScriptedPolicy {
    pub fn new(default_behavior: DefaultBehavior) -> Self {
        Self {
            script: HashMap::new(),
            default_behavior,
        }
    }

    pub fn add<S: AsRef<str>, O: Into<String>>(
        &mut self,
        question_id: &str,
        prefix: &[S],
        kind: ScriptKind,
        outputs: impl IntoIterator<Item = O>,
    ) -> &mut Self {
        let entry = Entry {
            outputs: outputs.into_iter().map(Into::into).collect(),
            scores: Vec::new(),
        };
        self.script
            .insert((question_id.to_string(), kind, prefix_hash(prefix)), entry);
        self
    }

    pub fn add_critique<S: AsRef<str>>(
        &mut self,
        question_id: &str,
        answer_prefix: &[S],
        critique: &str,
        score: Option<f64>,
    ) -> &mut Self {
        let entry = Entry {
            outputs: vec![critique.to_string()],
            scores: score.into_iter().collect(),
        };
        self.script.insert(
            (
                question_id.to_string(),
                ScriptKind::Critique,
                prefix_hash(answer_prefix),
            ),
            entry,
        );
        self
    }

    pub fn insert_record(&mut self, rec: ScriptRecord) -> std::result::Result<(), String> {
        if rec.outputs.is_empty() {
            return Err("outputs must be non-empty".into());
        }
        let hash = match (&rec.prefix, &rec.prefix_hash) {
            (Some(p), None) => prefix_hash(p),
            (None, Some(h)) => h.clone(),
            (None, None) => prefix_hash::<&str>(&[]),
            (Some(_), Some(_)) => return Err("give either prefix or prefix_hash, not both".into()),
        };
        self.script.insert(
            (rec.question_id, rec.kind, hash),
            Entry {
                outputs: rec.outputs,
                scores: rec.scores,
            },
        );
        Ok(())
    }

    /// Reads a line-delimited script. Blank lines and header records
    /// (`{"record": "header", ...}`) are skipped.
    pub fn load(path: &Path, default_behavior: DefaultBehavior) -> std::result::Result<Self, ScriptLoadError> {
        let file = std::fs::File::open(path)?;
        let mut policy = Self::new(default_behavior);
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| ScriptLoadError::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
            if value.get("record").and_then(|r| r.as_str()) == Some("header") {
                continue;
            }
            let rec: ScriptRecord = serde_json::from_value(value).map_err(|e| ScriptLoadError::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
            policy
                .insert_record(rec)
                .map_err(|message| ScriptLoadError::Record { line: i + 1, message })?;
        }
        Ok(policy)
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    fn lookup(&self, question_id: &str, kind: ScriptKind, prefix: &[&str], exact: bool) -> Option<&Entry> {
        let shortest = if exact { prefix.len() } else { 0 };
        (shortest..=prefix.len()).rev().find_map(|k| {
            self.script
                .get(&(question_id.to_string(), kind, prefix_hash(&prefix[..k])))
        })
    }

    fn miss(&self, question_id: &str, kind: ScriptKind, prefix: &[&str]) -> GatewayError {
        GatewayError::ScriptMiss {
            kind: kind.name(),
            question_id: question_id.to_string(),
            prefix_hash: prefix_hash(prefix),
        }
    }
}

fn pick(outputs: &[String], i: usize) -> &str {
    &outputs[i % outputs.len()]
}

fn texts(steps: &[crate::types::Step]) -> Vec<&str> {
    steps.iter().map(|s| s.text.as_str()).collect()
}

impl ModelBackend for ScriptedPolicy {
    fn generate(&self, req: &GenerationRequest<'_>, key: SampleKey) -> Result<Vec<String>> {
        let q = req.question;
        let prefix = texts(req.prior_steps);
        let kind = if req.stop_at_step_boundary {
            ScriptKind::Steps
        } else {
            ScriptKind::Completion
        };
        match self.lookup(&q.id, kind, &prefix, kind == ScriptKind::Steps) {
            Some(e) => {
                let base = key.index as usize * req.n_samples;
                Ok((0..req.n_samples)
                    .map(|j| pick(&e.outputs, base + j).to_string())
                    .collect())
            }
            None => match self.default_behavior {
                DefaultBehavior::Fail => Err(self.miss(&q.id, kind, &prefix)),
                DefaultBehavior::Echo => Ok(vec![format!("Final answer: {}", q.text); req.n_samples]),
            },
        }
    }

    fn critique(&self, question: &Question, answer: &ReasoningPath) -> Result<RawVerdict> {
        let prefix = texts(&answer.steps);
        match self.lookup(&question.id, ScriptKind::Critique, &prefix, false) {
            Some(e) => Ok(RawVerdict {
                text: e.outputs[0].clone(),
                score: e.scores.first().copied(),
            }),
            None => match self.default_behavior {
                DefaultBehavior::Fail => Err(self.miss(&question.id, ScriptKind::Critique, &prefix)),
                DefaultBehavior::Echo => {
                    let correct = answer
                        .final_answer
                        .as_deref()
                        .is_some_and(|a| grade_normalized(a, &question.ground_truth));
                    Ok(if correct {
                        RawVerdict {
                            text: NO_CORRECTIONS.to_string(),
                            score: Some(1.0),
                        }
                    } else {
                        RawVerdict {
                            text: "The final answer is not supported by the reasoning; recheck each step.".to_string(),
                            score: Some(0.0),
                        }
                    })
                }
            },
        }
    }

    fn refine(
        &self,
        question: &Question,
        answer: &ReasoningPath,
        _critique: &str,
        _temperature: f64,
        key: SampleKey,
    ) -> Result<String> {
        let prefix = texts(&answer.steps);
        match self.lookup(&question.id, ScriptKind::Refine, &prefix, false) {
            Some(e) => Ok(pick(&e.outputs, key.index as usize).to_string()),
            None => match self.default_behavior {
                DefaultBehavior::Fail => Err(self.miss(&question.id, ScriptKind::Refine, &prefix)),
                DefaultBehavior::Echo => Ok(answer.render()),
            },
        }
    }

    fn annotate(&self, question: &Question, pair: &DivergencePair) -> Result<String> {
        let mut prefix = texts(&pair.shared_prefix);
        prefix.extend(texts(&pair.branch_b));
        match self.lookup(&question.id, ScriptKind::Annotate, &prefix, false) {
            Some(e) => Ok(e.outputs[0].clone()),
            None => match self.default_behavior {
                DefaultBehavior::Fail => Err(self.miss(&question.id, ScriptKind::Annotate, &prefix)),
                DefaultBehavior::Echo => Ok(format!(
                    "The step \"{}\" is where path B goes wrong; re-examine it.",
                    pair.branch_b.first().map_or("", |s| s.text.as_str())
                )),
            },
        }
    }

    fn judge(&self, question: &Question, predicted: &str, ground_truth: &str) -> Result<bool> {
        match self.lookup(&question.id, ScriptKind::Judge, &[predicted], true) {
            Some(e) => Ok(e.outputs[0].trim().eq_ignore_ascii_case("yes")),
            None => match self.default_behavior {
                DefaultBehavior::Fail => Err(self.miss(&question.id, ScriptKind::Judge, &[predicted])),
                DefaultBehavior::Echo => Ok(grade_normalized(predicted, ground_truth)),
            },
        }
    }
}

/// Snapshot of calls made through a [`CountingBackend`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallCounts {
    pub generate: u64,
    pub critique: u64,
    pub refine: u64,
    pub annotate: u64,
    pub judge: u64,
}

/// Wraps a backend and counts calls per role.
#[derive(Debug, Default)]
pub struct CountingBackend<B> {
    inner: B,
    generate: AtomicU64,
    critique: AtomicU64,
    refine: AtomicU64,
    annotate: AtomicU64,
    judge: AtomicU64,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            generate: AtomicU64::new(0),
            critique: AtomicU64::new(0),
            refine: AtomicU64::new(0),
            annotate: AtomicU64::new(0),
            judge: AtomicU64::new(0),
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            generate: self.generate.load(Ordering::SeqCst),
            critique: self.critique.load(Ordering::SeqCst),
            refine: self.refine.load(Ordering::SeqCst),
            annotate: self.annotate.load(Ordering::SeqCst),
            judge: self.judge.load(Ordering::SeqCst),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ModelBackend> ModelBackend for CountingBackend<B> {
    fn generate(&self, req: &GenerationRequest<'_>, key: SampleKey) -> Result<Vec<String>> {
        self.generate.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(req, key)
    }
    fn critique(&self, question: &Question, answer: &ReasoningPath) -> Result<RawVerdict> {
        self.critique.fetch_add(1, Ordering::SeqCst);
        self.inner.critique(question, answer)
    }
    fn refine(
        &self,
        question: &Question,
        answer: &ReasoningPath,
        critique: &str,
        temperature: f64,
        key: SampleKey,
    ) -> Result<String> {
        self.refine.fetch_add(1, Ordering::SeqCst);
        self.inner.refine(question, answer, critique, temperature, key)
    }
    fn annotate(&self, question: &Question, pair: &DivergencePair) -> Result<String> {
        self.annotate.fetch_add(1, Ordering::SeqCst);
        self.inner.annotate(question, pair)
    }
    fn judge(&self, question: &Question, predicted: &str, ground_truth: &str) -> Result<bool> {
        self.judge.fetch_add(1, Ordering::SeqCst);
        self.inner.judge(question, predicted, ground_truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Step;

    #[test]
    fn longest_prefix_fallback() {
        let mut p = ScriptedPolicy::new(DefaultBehavior::Fail);
        p.add("q", &["a"], ScriptKind::Completion, ["from a"]);
        p.add("q", &["a", "b"], ScriptKind::Completion, ["from ab"]);
        let q = Question::new("q", "t", "1");
        let prior = vec![Step::new("a", false), Step::new("b", false), Step::new("c", false)];
        let req = GenerationRequest {
            question: &q,
            prior_steps: &prior,
            max_new_tokens: 10,
            temperature: 0.0,
            n_samples: 1,
            stop_at_step_boundary: false,
        };
        assert_eq!(p.generate(&req, SampleKey::default()).unwrap(), ["from ab"]);
        let req = GenerationRequest {
            prior_steps: &prior[..1],
            ..req
        };
        assert_eq!(p.generate(&req, SampleKey::default()).unwrap(), ["from a"]);
        let req = GenerationRequest {
            prior_steps: &[],
            ..req
        };
        assert!(p.generate(&req, SampleKey::default()).is_err());
    }

    #[test]
    fn steps_need_exact_prefix() {
        let mut p = ScriptedPolicy::new(DefaultBehavior::Fail);
        p.add("q", &[] as &[&str], ScriptKind::Steps, ["x"]);
        let q = Question::new("q", "t", "1");
        let prior = vec![Step::new("a", false)];
        let req = GenerationRequest {
            question: &q,
            prior_steps: &prior,
            max_new_tokens: 10,
            temperature: 0.0,
            n_samples: 1,
            stop_at_step_boundary: true,
        };
        assert!(matches!(
            p.generate(&req, SampleKey::default()),
            Err(GatewayError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn sample_index_cycles_outputs() {
        let mut p = ScriptedPolicy::new(DefaultBehavior::Fail);
        p.add("q", &[] as &[&str], ScriptKind::Completion, ["r0", "r1", "r2"]);
        let q = Question::new("q", "t", "1");
        let req = GenerationRequest {
            question: &q,
            prior_steps: &[],
            max_new_tokens: 10,
            temperature: 0.7,
            n_samples: 1,
            stop_at_step_boundary: false,
        };
        let got: Vec<String> = (0..5)
            .map(|i| p.generate(&req, SampleKey::new(9, i)).unwrap().remove(0))
            .collect();
        assert_eq!(got, ["r0", "r1", "r2", "r0", "r1"]);
    }

    #[test]
    fn load_reads_records_and_skips_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let lines = [
            r#"{"record":"header","schema_version":1}"#,
            r#"{"question_id":"q","kind":"steps","prefix":[],"outputs":["a","b"]}"#,
            "",
            &format!(
                r#"{{"question_id":"q","kind":"critique","prefix_hash":"{}","outputs":["ok"],"scores":[0.9]}}"#,
                prefix_hash(&["a"])
            ),
        ];
        std::fs::write(&path, lines.join("\n")).unwrap();
        let p = ScriptedPolicy::load(&path, DefaultBehavior::Fail).unwrap();
        assert_eq!(p.len(), 2);
        let q = Question::new("q", "t", "1");
        let path_a = ReasoningPath::new("q", vec![Step::new("a", false)], crate::types::PathSource::Rollout);
        assert_eq!(p.critique(&q, &path_a).unwrap().score, Some(0.9));
    }

    #[test]
    fn load_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        std::fs::write(
            &path,
            "{\"question_id\":\"q\",\"kind\":\"steps\",\"outputs\":[\"a\"]}\nnot json\n",
        )
        .unwrap();
        match ScriptedPolicy::load(&path, DefaultBehavior::Fail) {
            Err(ScriptLoadError::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prefix_hash_distinguishes_boundaries() {
        assert_ne!(prefix_hash(&["ab", "c"]), prefix_hash(&["a", "bc"]));
        assert_ne!(prefix_hash::<&str>(&[]), prefix_hash(&[""]));
    }
}
