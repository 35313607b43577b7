//! OpenAI-compatible chat-completions backend.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::templates::{render, PromptTemplates};
use super::{GatewayError, GenerationRequest, ModelBackend, RawVerdict, Result, SampleKey};
use crate::types::{render_steps, DivergencePair, Question, ReasoningPath};

const CONTINUE_SUFFIX: &str = "\n\nReasoning so far:\n{reasoning}\n\nContinue the reasoning from the next step.";

const JUDGE_PROMPT: &str = "Question:\n{question}\n\nReference answer: {reference}\nPredicted answer: {predicted}\n\n\
Do the two answers mean the same thing? Reply with a single word: yes or no.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSettings {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    /// Actor model; also serves as annotator and judge.
    pub model: String,
    pub critic_base_url: Option<String>,
    pub critic_model: Option<String>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub critic_temperature: f64,
    pub annotator_temperature: f64,
    /// Directory with template overrides.
    pub templates_dir: Option<PathBuf>,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".to_string(),
            model: "actor".to_string(),
            critic_base_url: None,
            critic_model: None,
            api_key_env: "MCTSCRITIC_API_KEY".to_string(),
            timeout_secs: 120,
            critic_temperature: 0.0,
            annotator_temperature: 0.0,
            templates_dir: None,
        }
    }
}

pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    settings: RemoteSettings,
    api_key: Option<String>,
    templates: PromptTemplates,
}

impl RemoteBackend {
    pub fn new(settings: RemoteSettings, api_key: Option<String>, templates: PromptTemplates) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            settings,
            api_key,
            templates,
        })
    }

    fn critic_endpoint(&self) -> (&str, &str) {
        (
            self.settings
                .critic_base_url
                .as_deref()
                .unwrap_or(&self.settings.base_url),
            self.settings.critic_model.as_deref().unwrap_or(&self.settings.model),
        )
    }

    fn chat(&self, base_url: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Parse(e.to_string()))
    }

    fn actor_turn(&self, question: &Question) -> String {
        render(&self.templates.actor, &[("question", &question.text)])
    }

    fn generate_once(&self, req: &GenerationRequest<'_>, n: usize, seed: u64) -> Result<Vec<String>> {
        let mut text = self.actor_turn(req.question);
        if !req.prior_steps.is_empty() {
            text.push_str(&render(
                CONTINUE_SUFFIX,
                &[("reasoning", &render_steps(req.prior_steps))],
            ));
        }
        let mut body = json!({
            "model": self.settings.model,
            "messages": [user_message(&text, req.question.image_ref.as_deref())],
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
            "n": n,
            "seed": seed,
        });
        if req.stop_at_step_boundary {
            body["stop"] = json!(["\n"]);
        }
        let reply = self.chat(&self.settings.base_url, &body)?;
        choice_texts(&reply)
    }
}

fn user_message(text: &str, image_ref: Option<&str>) -> Value {
    match image_ref {
        Some(url) => json!({
            "role": "user",
            "content": [
                { "type": "text", "text": text },
                { "type": "image_url", "image_url": { "url": url } },
            ],
        }),
        None => json!({ "role": "user", "content": text }),
    }
}

/// Message contents of every choice, in choice-index order.
fn choice_texts(reply: &Value) -> Result<Vec<String>> {
    let choices = reply
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Parse("reply has no choices".into()))?;
    let mut indexed: Vec<(u64, String)> = choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let idx = c.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
            let text = c
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::Parse("choice has no message content".into()))?;
            Ok((idx, text.to_string()))
        })
        .collect::<Result<_>>()?;
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, t)| t).collect())
}

/// Scalar score exposed next to the message by a critic with a score head.
fn reply_score(reply: &Value) -> Option<f64> {
    reply
        .get("score")
        .or_else(|| reply.pointer("/choices/0/score"))
        .and_then(Value::as_f64)
}

fn mix_seed(key: SampleKey, salt: u64) -> u64 {
    key.seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(u64::from(key.index).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(salt)
}

impl ModelBackend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest<'_>, key: SampleKey) -> Result<Vec<String>> {
        let mut out = self.generate_once(req, req.n_samples, mix_seed(key, 0))?;
        // Servers that ignore `n` return a single choice; top up one at a time.
        let mut salt = 1;
        while out.len() < req.n_samples {
            let more = self.generate_once(req, 1, mix_seed(key, salt))?;
            if more.is_empty() {
                return Err(GatewayError::EmptyResponse);
            }
            out.extend(more);
            salt += 1;
        }
        out.truncate(req.n_samples);
        Ok(out)
    }

    fn critique(&self, question: &Question, answer: &ReasoningPath) -> Result<RawVerdict> {
        let text = render(
            &self.templates.critic,
            &[("question", &question.text), ("reasoning", &answer.render())],
        );
        let (base, model) = self.critic_endpoint();
        let body = json!({
            "model": model,
            "messages": [user_message(&text, question.image_ref.as_deref())],
            "temperature": self.settings.critic_temperature,
        });
        let reply = self.chat(base, &body)?;
        let text = choice_texts(&reply)?
            .into_iter()
            .next()
            .ok_or(GatewayError::EmptyResponse)?;
        Ok(RawVerdict {
            text,
            score: reply_score(&reply),
        })
    }

    fn refine(
        &self,
        question: &Question,
        answer: &ReasoningPath,
        critique: &str,
        temperature: f64,
        key: SampleKey,
    ) -> Result<String> {
        let follow_up = render(&self.templates.refine, &[("critique", critique)]);
        let body = json!({
            "model": self.settings.model,
            "messages": [
                user_message(&self.actor_turn(question), question.image_ref.as_deref()),
                { "role": "assistant", "content": answer.render() },
                { "role": "user", "content": follow_up },
            ],
            "temperature": temperature,
            "seed": mix_seed(key, 0),
        });
        let reply = self.chat(&self.settings.base_url, &body)?;
        choice_texts(&reply)?
            .into_iter()
            .next()
            .ok_or(GatewayError::EmptyResponse)
    }

    fn annotate(&self, question: &Question, pair: &DivergencePair) -> Result<String> {
        let text = render(
            &self.templates.annotator,
            &[
                ("question", &question.text),
                ("reasoning", &render_steps(&pair.shared_prefix)),
                ("branch_a", &render_steps(&pair.branch_a)),
                ("branch_b", &render_steps(&pair.branch_b)),
            ],
        );
        let body = json!({
            "model": self.settings.model,
            "messages": [user_message(&text, question.image_ref.as_deref())],
            "temperature": self.settings.annotator_temperature,
        });
        let reply = self.chat(&self.settings.base_url, &body)?;
        choice_texts(&reply)?
            .into_iter()
            .next()
            .ok_or(GatewayError::EmptyResponse)
    }

    fn judge(&self, question: &Question, predicted: &str, ground_truth: &str) -> Result<bool> {
        let text = render(
            JUDGE_PROMPT,
            &[
                ("question", &question.text),
                ("reference", ground_truth),
                ("predicted", predicted),
            ],
        );
        let body = json!({
            "model": self.settings.model,
            "messages": [{ "role": "user", "content": text }],
            "temperature": 0.0,
            "max_tokens": 4,
        });
        let reply = self.chat(&self.settings.base_url, &body)?;
        let word = choice_texts(&reply)?
            .into_iter()
            .next()
            .ok_or(GatewayError::EmptyResponse)?;
        Ok(word.trim().to_lowercase().starts_with("yes"))
    }
}
