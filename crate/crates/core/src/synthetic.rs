//! A programmatic actor/critic with known error rates.
//!
//! Every random draw is seeded from the question id and the text being
//! judged, so results do not depend on call order or thread count.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gateway::{self, GenerationRequest, ModelBackend, RawVerdict, SampleKey};
use crate::mcts::{splitmix, stable_hash};
use crate::types::{DivergencePair, Question, ReasoningPath, NO_CORRECTIONS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    /// Probability the actor's first answer is correct.
    pub actor_accuracy: f64,
    /// Probability the critic flags an incorrect answer.
    pub recall: f64,
    /// Probability the critic passes a correct answer.
    pub specificity: f64,
    /// Probability one refinement fixes an incorrect answer. Correct
    /// answers stay correct.
    pub fix_rate: f64,
    /// Reasoning depth before the actor commits to an answer during search.
    pub depth: usize,
    pub seed: u64,
    /// Simulated per-call latency, for benchmarking I/O-bound runs.
    pub latency: Duration,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            actor_accuracy: 0.58,
            recall: 0.9,
            specificity: 0.95,
            fix_rate: 0.4,
            depth: 3,
            seed: 0,
            latency: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub params: SyntheticParams,
}

/// `n` questions whose ground truth is their index.
pub fn questions(n: usize) -> Vec<Question> {
    (0..n)
        .map(|i| Question::new(format!("syn-{i:05}"), format!("Synthetic question {i}"), i.to_string()))
        .collect()
}

fn wrong_answer(q: &Question) -> String {
    format!("{}-wrong", q.ground_truth)
}

impl SyntheticBackend {
    pub fn new(params: SyntheticParams) -> Self {
        Self { params }
    }

    fn rng(&self, parts: &[&str], index: u64) -> ChaCha8Rng {
        let h = parts
            .iter()
            .fold(self.params.seed, |acc, p| splitmix(acc ^ stable_hash(p)));
        ChaCha8Rng::seed_from_u64(splitmix(h ^ index))
    }

    fn wait(&self) {
        if !self.params.latency.is_zero() {
            std::thread::sleep(self.params.latency);
        }
    }

    fn answer_line(q: &Question, correct: bool) -> String {
        let ans = if correct {
            q.ground_truth.clone()
        } else {
            wrong_answer(q)
        };
        format!("Final answer: {ans}")
    }

    fn is_correct(q: &Question, path: &ReasoningPath) -> bool {
        path.final_answer
            .as_deref()
            .is_some_and(|a| gateway::grade_normalized(a, &q.ground_truth))
    }
}

impl ModelBackend for SyntheticBackend {
    fn generate(&self, req: &GenerationRequest<'_>, key: SampleKey) -> gateway::Result<Vec<String>> {
        self.wait();
        let q = req.question;
        let prior = crate::types::render_steps(req.prior_steps);
        let depth = req.prior_steps.len();
        Ok((0..req.n_samples)
            .map(|j| {
                let mut rng = self.rng(&[&q.id, &prior], splitmix(key.seed ^ u64::from(key.index)) ^ j as u64);
                if req.stop_at_step_boundary && depth + 1 < self.params.depth {
                    format!(
                        "Consider part {} of the question, case {}.",
                        depth + 1,
                        rng.random_range(0..4)
                    )
                } else if req.stop_at_step_boundary {
                    Self::answer_line(q, rng.random_bool(self.params.actor_accuracy))
                } else {
                    let mut text = String::new();
                    for d in depth..self.params.depth.saturating_sub(1) {
                        text.push_str(&format!("Consider part {} of the question.\n", d + 1));
                    }
                    text.push_str(&Self::answer_line(q, rng.random_bool(self.params.actor_accuracy)));
                    text
                }
            })
            .collect())
    }

    fn critique(&self, question: &Question, answer: &ReasoningPath) -> gateway::Result<RawVerdict> {
        self.wait();
        let correct = Self::is_correct(question, answer);
        let mut rng = self.rng(&[&question.id, "critic", &answer.render()], 0);
        let flag = if correct {
            !rng.random_bool(self.params.specificity)
        } else {
            rng.random_bool(self.params.recall)
        };
        Ok(if flag {
            RawVerdict {
                text: "The last step does not follow from the evidence; recheck it.".into(),
                score: Some(0.1),
            }
        } else {
            RawVerdict {
                text: NO_CORRECTIONS.into(),
                score: Some(0.9),
            }
        })
    }

    fn refine(
        &self,
        question: &Question,
        answer: &ReasoningPath,
        _critique: &str,
        _t: f64,
        key: SampleKey,
    ) -> gateway::Result<String> {
        self.wait();
        let was_correct = Self::is_correct(question, answer);
        let mut rng = self.rng(
            &[&question.id, "refine", &answer.render()],
            splitmix(key.seed ^ u64::from(key.index)),
        );
        let correct = was_correct || rng.random_bool(self.params.fix_rate);
        Ok(format!(
            "Revision {}.\n{}",
            key.index,
            Self::answer_line(question, correct)
        ))
    }

    fn annotate(&self, _question: &Question, pair: &DivergencePair) -> gateway::Result<String> {
        self.wait();
        Ok(format!(
            "Step {} is where the reasoning goes wrong.",
            pair.shared_prefix.len() + 1
        ))
    }
}
