//! Domain types shared by every stage of the pipeline.
//!
//! These are plain value objects. The only behavior here is construction,
//! validation and (de)serialization; node statistics are mutated exclusively
//! by [`crate::mcts`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Canonical critique text attached to every positive sample.
pub const NO_CORRECTIONS: &str = "No corrections needed.";

/// Identifier of a node inside one [`crate::mcts::SearchTree`].
pub type NodeId = usize;

/// A multimodal question: prompt text, an opaque image locator and the
/// reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub ground_truth: String,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>, ground_truth: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            image_ref: None,
            ground_truth: ground_truth.into(),
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    /// Returns the list of violated invariants (empty when valid).
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.id.trim().is_empty() {
            errs.push("question id must be non-empty".to_string());
        }
        if self.text.trim().is_empty() {
            errs.push(format!("question {}: text must be non-empty", self.id));
        }
        errs
    }
}

/// One reasoning step produced by the actor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub text: String,
    pub token_count: usize,
    pub is_terminal: bool,
}

impl Step {
    /// Builds a step whose token count is the whitespace-delimited word count.
    pub fn new(text: impl Into<String>, is_terminal: bool) -> Self {
        let text = text.into();
        let token_count = approx_token_count(&text);
        Self {
            text,
            token_count,
            is_terminal,
        }
    }
}

/// Whitespace word count, used wherever a backend token count is unavailable.
pub fn approx_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// A node of the search tree: one step plus its visit statistics.
///
/// `propagation_log` records every value ever backed up through the node so
/// that `value == mean(propagation_log)` can be checked independently of the
/// incremental update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub step: Option<Step>,
    pub children: Vec<NodeId>,
    pub visit_count: u64,
    pub value: f64,
    pub propagation_log: Vec<f64>,
}

impl Node {
    pub fn root() -> Self {
        Self {
            node_id: 0,
            parent_id: None,
            step: None,
            children: Vec::new(),
            visit_count: 0,
            value: 0.0,
            propagation_log: Vec::new(),
        }
    }

    pub fn child(node_id: NodeId, parent_id: NodeId, step: Step) -> Self {
        Self {
            node_id,
            parent_id: Some(parent_id),
            step: Some(step),
            children: Vec::new(),
            visit_count: 0,
            value: 0.0,
            propagation_log: Vec::new(),
        }
    }

    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// True when the node's own step carries a terminal marker.
    pub fn has_terminal_step(&self) -> bool {
        self.step.as_ref().is_some_and(|s| s.is_terminal)
    }
}

/// Where a reasoning path came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSource {
    SearchTree,
    Rollout,
    ActorDirect,
    Refined,
}

/// An ordered sequence of steps for one question, optionally ending in an
/// extracted final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub question_id: String,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub final_answer: Option<String>,
    pub source: PathSource,
}

impl ReasoningPath {
    pub fn new(question_id: impl Into<String>, steps: Vec<Step>, source: PathSource) -> Self {
        Self {
            question_id: question_id.into(),
            steps,
            final_answer: None,
            source,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.steps.iter().map(|s| s.token_count).sum()
    }

    /// Step texts joined by newlines, the form shown to models.
    pub fn render(&self) -> String {
        render_steps(&self.steps)
    }

    pub fn same_steps(&self, other: &ReasoningPath) -> bool {
        self.steps.len() == other.steps.len() && self.steps.iter().zip(&other.steps).all(|(a, b)| a.text == b.text)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.final_answer.is_some() && !self.steps.last().is_some_and(|s| s.is_terminal) {
            errs.push(format!(
                "path for {}: final_answer present but last step is not terminal",
                self.question_id
            ));
        }
        errs
    }
}

pub fn render_steps(steps: &[Step]) -> String {
    steps.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
}

/// A correct branch and an incorrect branch that split after a shared prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergencePair {
    pub question_id: String,
    pub shared_prefix: Vec<Step>,
    pub branch_a: Vec<Step>,
    pub branch_b: Vec<Step>,
    /// Deepest tree node whose root path equals `shared_prefix`. Absent when
    /// the pair was built from bare paths without a tree.
    #[serde(default)]
    pub lca_node_id: Option<NodeId>,
}

impl DivergencePair {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match (self.branch_a.first(), self.branch_b.first()) {
            (Some(a), Some(b)) if a.text == b.text => {
                errs.push("branches share their first step; prefix is not maximal".to_string())
            }
            (None, _) | (_, None) => errs.push("both branches must be non-empty".to_string()),
            _ => {}
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Positive,
    NegativeMined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub successes: u32,
    pub attempts: u32,
}

/// One critique-dataset record: question, reasoning path, binary
/// correctness label and critique text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueSample {
    pub question: Question,
    pub answer_path: ReasoningPath,
    pub correctness: u8,
    pub critique: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_stats: Option<FilterStats>,
}

impl CritiqueSample {
    pub fn positive(question: Question, answer_path: ReasoningPath) -> Self {
        Self {
            question,
            answer_path,
            correctness: 1,
            critique: NO_CORRECTIONS.to_string(),
            provenance: Provenance::Positive,
            filter_stats: None,
        }
    }

    pub fn negative(question: Question, answer_path: ReasoningPath, critique: String) -> Self {
        Self {
            question,
            answer_path,
            correctness: 0,
            critique,
            provenance: Provenance::NegativeMined,
            filter_stats: None,
        }
    }

    /// Stable content identifier: question id plus step texts.
    pub fn sample_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.question.id.as_bytes());
        for s in &self.answer_path.steps {
            h.update([0u8]);
            h.update(s.text.as_bytes());
        }
        h.update([1u8]);
        h.update(self.critique.as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.correctness > 1 {
            errs.push("correctness must be 0 or 1".to_string());
        }
        if self.correctness == 1 && self.critique != NO_CORRECTIONS {
            errs.push(format!("positive sample critique must be exactly {NO_CORRECTIONS:?}"));
        }
        if self.provenance == Provenance::NegativeMined && self.correctness != 0 {
            errs.push("negative_mined sample must have correctness 0".to_string());
        }
        errs
    }
}

/// Every knob of the pipeline: search, filtering, inference and loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Children generated per expansion.
    pub n_expand: usize,
    /// Rollouts per newly expanded node.
    pub m_rollouts: usize,
    /// Maximum tokens per step.
    pub step_token_cap: usize,
    /// Maximum tokens of a full reasoning path.
    pub max_path_tokens: usize,
    /// MCTS iteration budget.
    pub search_iterations: usize,
    pub temperature: f64,
    pub seed: u64,
    pub refine_attempts: u32,
    pub keep_threshold: u32,
    /// Critic score above which refinement stops.
    pub score_threshold: f64,
    pub max_refine_iters: usize,
    pub loss_weight: f64,
    /// UCB exploration constant. Zero keeps selection purely value-greedy.
    pub ucb_constant: f64,
    /// Mine incorrect rollout completions in addition to tree branches.
    pub mine_rollouts: bool,
    /// Emit every distinct correct terminal path as a positive, not only the reference.
    pub all_positives: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_expand: 3,
            m_rollouts: 5,
            step_token_cap: 30,
            max_path_tokens: 1024,
            search_iterations: 20,
            temperature: 0.7,
            seed: 0,
            refine_attempts: 10,
            keep_threshold: 3,
            score_threshold: 0.5,
            max_refine_iters: 5,
            loss_weight: 1.0,
            ucb_constant: 0.0,
            mine_rollouts: true,
            all_positives: false,
        }
    }
}

impl SearchConfig {
    /// Checks every invariant and returns all violations.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.n_expand < 1 {
            errs.push("n_expand must be ≥ 1".to_string());
        }
        if self.m_rollouts < 1 {
            errs.push("m_rollouts must be ≥ 1".to_string());
        }
        if self.step_token_cap < 1 {
            errs.push("step_token_cap must be ≥ 1".to_string());
        }
        if self.max_path_tokens < 1 {
            errs.push("max_path_tokens must be ≥ 1".to_string());
        }
        if self.keep_threshold < 1 {
            errs.push("keep_threshold must be ≥ 1".to_string());
        }
        if self.keep_threshold > self.refine_attempts {
            errs.push("keep_threshold exceeds refine_attempts".to_string());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            errs.push("score_threshold must lie in [0, 1]".to_string());
        }
        if self.max_refine_iters < 1 {
            errs.push("max_refine_iters must be ≥ 1".to_string());
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            errs.push("temperature must be a finite value ≥ 0".to_string());
        }
        if !self.loss_weight.is_finite() || self.loss_weight < 0.0 {
            errs.push("loss_weight must be a finite value ≥ 0".to_string());
        }
        if !self.ucb_constant.is_finite() || self.ucb_constant < 0.0 {
            errs.push("ucb_constant must be a finite value ≥ 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Short hex digest of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_config() -> SearchConfig {
        SearchConfig {
            n_expand: 3,
            m_rollouts: 5,
            step_token_cap: 30,
            keep_threshold: 3,
            refine_attempts: 10,
            score_threshold: 0.5,
            max_refine_iters: 5,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn default_values() {
        let c = SearchConfig::default();
        assert_eq!(c.step_token_cap, 30);
        assert_eq!(c.refine_attempts, 10);
        assert_eq!(c.keep_threshold, 3);
        assert_eq!(c.max_refine_iters, 5);
        assert_eq!(c.temperature, 0.7);
        assert_eq!(c.score_threshold, 0.5);
        assert_eq!(c.loss_weight, 1.0);
        assert_eq!(c.max_path_tokens, 1024);
        assert_eq!(c.ucb_constant, 0.0);
    }

    #[test]
    fn validate_accepts_reference_settings() {
        assert_eq!(reference_config().validate(), Ok(()));
    }

    #[test]
    fn validate_rejects_threshold_above_attempts() {
        let c = SearchConfig {
            keep_threshold: 11,
            ..reference_config()
        };
        let errs = c.validate().unwrap_err();
        assert_eq!(errs, vec!["keep_threshold exceeds refine_attempts".to_string()]);
    }

    #[test]
    fn validate_rejects_zero_rollouts() {
        let c = SearchConfig {
            m_rollouts: 0,
            ..reference_config()
        };
        let errs = c.validate().unwrap_err();
        assert_eq!(errs, vec!["m_rollouts must be ≥ 1".to_string()]);
    }

    #[test]
    fn validate_reports_every_violation() {
        let c = SearchConfig {
            n_expand: 0,
            m_rollouts: 0,
            score_threshold: 1.5,
            max_refine_iters: 0,
            ..reference_config()
        };
        assert_eq!(c.validate().unwrap_err().len(), 4);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = reference_config();
        assert_eq!(a.config_hash(), reference_config().config_hash());
        let b = SearchConfig { seed: 9, ..a.clone() };
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn positive_sample_uses_canonical_text() {
        let q = Question::new("q", "what?", "7");
        let p = ReasoningPath::new("q", vec![Step::new("Final answer: 7", true)], PathSource::SearchTree);
        let s = CritiqueSample::positive(q, p);
        assert_eq!(s.critique.as_bytes(), b"No corrections needed.");
        assert!(s.violations().is_empty());
    }

    #[test]
    fn sample_invariants_are_checked() {
        let q = Question::new("q", "what?", "7");
        let p = ReasoningPath::new("q", vec![], PathSource::Rollout);
        let mut s = CritiqueSample::negative(q, p, "bad step".into());
        assert!(s.violations().is_empty());
        s.correctness = 1;
        assert_eq!(s.violations().len(), 2);
    }

    #[test]
    fn path_final_answer_requires_terminal_step() {
        let mut p = ReasoningPath::new("q", vec![Step::new("a", false)], PathSource::Rollout);
        p.final_answer = Some("1".into());
        assert_eq!(p.violations().len(), 1);
    }

    #[test]
    fn question_validation() {
        assert!(Question::new("q1", "text", "a").violations().is_empty());
        assert_eq!(Question::new("", " ", "a").violations().len(), 2);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let r: Result<SearchConfig, _> = serde_json::from_str(r#"{"n_expand": 2, "bogus": 1}"#);
        assert!(r.is_err());
        let c: SearchConfig = serde_json::from_str(r#"{"n_expand": 2}"#).unwrap();
        assert_eq!(c.n_expand, 2);
        assert_eq!(c.m_rollouts, 5);
    }
}
