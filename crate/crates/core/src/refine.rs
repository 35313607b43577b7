//! Iterative actor-critic inference and the per-iteration evaluation
//! harness built on it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::gateway::{CriticVerdict, Gateway, GatewayError, SampleKey};
use crate::mcts::{splitmix, stable_hash};
use crate::types::{Question, ReasoningPath, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ScoreExceeded,
    MaxIters,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub answer: ReasoningPath,
    pub verdict: CriticVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub question_id: String,
    pub rounds: Vec<Round>,
    pub stop_reason: StopReason,
    pub final_answer: Option<String>,
    /// The answer returned: the last one generated, even if it never got a
    /// verdict because the critic failed.
    pub final_path: Option<ReasoningPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Correctness of each round's answer, filled in by [`batch_eval`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub graded: Vec<bool>,
}

impl RefinementTrace {
    fn new(question_id: &str) -> Self {
        Self {
            question_id: question_id.to_string(),
            rounds: Vec::new(),
            stop_reason: StopReason::Error,
            final_answer: None,
            final_path: None,
            error: None,
            graded: Vec::new(),
        }
    }

    fn fail(mut self, latest: Option<ReasoningPath>, e: GatewayError) -> Self {
        self.stop_reason = StopReason::Error;
        self.error = Some(e.to_string());
        self.finish(latest)
    }

    fn finish(mut self, latest: Option<ReasoningPath>) -> Self {
        self.final_answer = latest.as_ref().and_then(|p| p.final_answer.clone());
        self.final_path = latest;
        self
    }

    /// Refine calls the run made: every round except the last is followed
    /// by one, unless a refinement itself failed.
    pub fn refine_calls(&self) -> usize {
        self.rounds.len().saturating_sub(1)
    }

    pub fn violations(&self, config: &SearchConfig) -> Vec<String> {
        let mut v = Vec::new();
        let t = self.rounds.len();
        if t > config.max_refine_iters {
            v.push(format!("{t} rounds exceeds the limit of {}", config.max_refine_iters));
        }
        if self.stop_reason != StopReason::Error && t == 0 {
            v.push("a completed trace has at least one round".into());
        }
        for (i, r) in self.rounds.iter().enumerate().take(t.saturating_sub(1)) {
            if r.verdict.score > config.score_threshold {
                v.push(format!("round {} scored above the threshold but did not stop", i + 1));
            }
        }
        if self.stop_reason == StopReason::ScoreExceeded
            && !self
                .rounds
                .last()
                .is_some_and(|r| r.verdict.score > config.score_threshold)
        {
            v.push("score_exceeded without a passing final verdict".into());
        }
        v
    }
}

fn question_seed(question: &Question, config: &SearchConfig) -> u64 {
    splitmix(config.seed ^ stable_hash(&question.id))
}

/// Answer, then alternate critique and refinement until the critic's score
/// is strictly above `score_threshold` or `max_refine_iters` rounds have
/// been critiqued. No refinement follows the final round.
pub fn run(gateway: &Gateway, question: &Question, config: &SearchConfig) -> RefinementTrace {
    let trace = RefinementTrace::new(&question.id);
    let seed = question_seed(question, config);
    let budget = config.max_path_tokens;
    let mut answer = match gateway.answer(question, budget, config.temperature, SampleKey::new(seed, 0)) {
        Ok(a) => a,
        Err(e) => return trace.fail(None, e),
    };
    let mut trace = trace;
    for t in 1..=config.max_refine_iters {
        let verdict = match gateway.critique(question, &answer) {
            Ok(v) => v,
            Err(e) => return trace.fail(Some(answer), e),
        };
        let passed = verdict.score > config.score_threshold;
        trace.rounds.push(Round {
            answer: answer.clone(),
            verdict,
        });
        if passed {
            trace.stop_reason = StopReason::ScoreExceeded;
            return trace.finish(Some(answer));
        }
        if t == config.max_refine_iters {
            break;
        }
        let critique = &trace.rounds.last().expect("just pushed").verdict.critique;
        answer = match gateway.refine(
            question,
            &answer,
            critique,
            budget,
            config.temperature,
            SampleKey::new(seed, t as u32),
        ) {
            Ok(a) => a,
            Err(e) => return trace.fail(Some(answer), e),
        };
    }
    trace.stop_reason = StopReason::MaxIters;
    trace.finish(Some(answer))
}

/// One row of the per-iteration table. `iter` counts refinement
/// opportunities (0 is the unaided actor); `round` is the same row counted
/// from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iter: usize,
    pub round: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Questions refined going into this row; absent for row 0.
    pub n_refine: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: usize,
    pub evaluated: usize,
    pub errors: usize,
    pub score_exceeded: usize,
    pub max_iters: usize,
    pub rows: Vec<IterationRow>,
}

impl EvalReport {
    /// Plain-text table with both row labelings.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>4}  {:>5}  {:>7}  {:>8}", "iter", "round", "Acc", "N_refine");
        for r in &self.rows {
            let n = r.n_refine.map_or_else(|| "-".to_string(), |n| n.to_string());
            let _ = writeln!(
                s,
                "{:>4}  {:>5}  {:>7.1}  {:>8}",
                r.iter,
                r.round,
                100.0 * r.accuracy,
                n
            );
        }
        let _ = writeln!(
            s,
            "evaluated {} of {} questions ({} errors)",
            self.evaluated, self.questions, self.errors
        );
        s
    }
}

fn grade_trace(gateway: &Gateway, question: &Question, trace: &mut RefinementTrace) {
    if trace.stop_reason == StopReason::Error {
        return;
    }
    let graded: Result<Vec<bool>, GatewayError> = trace
        .rounds
        .iter()
        .map(|r| gateway.grade_path(question, &r.answer))
        .collect();
    match graded {
        Ok(g) => trace.graded = g,
        Err(e) => {
            trace.stop_reason = StopReason::Error;
            trace.error = Some(format!("grading failed: {e}"));
        }
    }
}

/// Runs every question, grades each round, and tabulates accuracy after
/// `t` refinement opportunities for `t = 0..max_refine_iters`. Questions
/// that end in an error are left out of every row and counted separately.
pub fn batch_eval(
    gateway: &Gateway,
    questions: &[Question],
    config: &SearchConfig,
) -> (Vec<RefinementTrace>, EvalReport) {
    let traces = exec::map(questions, |q| {
        let mut t = run(gateway, q, config);
        grade_trace(gateway, q, &mut t);
        t
    });
    let report = tabulate(&traces, config.max_refine_iters);
    (traces, report)
}

/// Builds the per-iteration report from graded traces.
pub fn tabulate(traces: &[RefinementTrace], max_refine_iters: usize) -> EvalReport {
    let ok: Vec<&RefinementTrace> = traces.iter().filter(|t| t.stop_reason != StopReason::Error).collect();
    let count = |r: StopReason| ok.iter().filter(|t| t.stop_reason == r).count();
    let rows = (0..max_refine_iters)
        .map(|iter| {
            // The answer held after `iter` opportunities is the last one
            // produced up to round `iter + 1`.
            let correct = ok
                .iter()
                .filter(|t| {
                    t.graded
                        .get(iter.min(t.graded.len().saturating_sub(1)))
                        .copied()
                        .unwrap_or(false)
                })
                .count();
            let n_refine = (iter > 0).then(|| ok.iter().filter(|t| t.rounds.len() > iter).count());
            IterationRow {
                iter,
                round: iter + 1,
                correct,
                accuracy: if ok.is_empty() {
                    0.0
                } else {
                    correct as f64 / ok.len() as f64
                },
                n_refine,
            }
        })
        .collect();
    EvalReport {
        questions: traces.len(),
        evaluated: ok.len(),
        errors: traces.len() - ok.len(),
        score_exceeded: count(StopReason::ScoreExceeded),
        max_iters: count(StopReason::MaxIters),
        rows,
    }
}
