//! Refinement-based filtering of mined critiques.
//!
//! A negative sample is kept when the actor, given the question, its
//! incorrect path and the critique, produces a correct answer in at least
//! `keep_threshold` of `refine_attempts` tries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::gateway::{Gateway, SampleKey};
use crate::types::{CritiqueSample, FilterStats, Provenance, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Keep,
    Discard,
    /// Every attempt failed on transport; the critique could not be tested.
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterOutcome {
    pub decision: FilterDecision,
    pub stats: FilterStats,
    pub transport_failures: u32,
}

/// The keep rule.
pub fn keep_decision(successes: u32, keep_threshold: u32) -> bool {
    successes >= keep_threshold
}

/// Seed for one refinement attempt, fixed by the sample content and the
/// master seed so decisions replay exactly.
fn attempt_seed(sample: &CritiqueSample, master: u64) -> u64 {
    let id = u64::from_str_radix(&sample.sample_id()[..16], 16).unwrap_or(0);
    id ^ master.rotate_left(17)
}

/// Tests one negative sample by repeated refinement.
pub fn filter_sample(gateway: &Gateway, sample: &CritiqueSample, config: &SearchConfig) -> FilterOutcome {
    debug_assert_eq!(sample.provenance, Provenance::NegativeMined);
    let seed = attempt_seed(sample, config.seed);
    let attempts = config.refine_attempts;
    let results = exec::map_range(attempts as usize, |a| {
        let refined = gateway.refine(
            &sample.question,
            &sample.answer_path,
            &sample.critique,
            config.max_path_tokens,
            config.temperature,
            SampleKey::new(seed, a as u32),
        );
        match refined {
            Ok(path) => match gateway.grade_path(&sample.question, &path) {
                Ok(ok) => Attempt::Graded(ok),
                Err(e) => {
                    log::warn!("grading refinement {a} of {} failed: {e}", sample.question.id);
                    Attempt::Failed
                }
            },
            Err(e) => {
                log::warn!("refinement {a} of {} failed: {e}", sample.question.id);
                Attempt::Failed
            }
        }
    });
    let successes = results.iter().filter(|r| matches!(r, Attempt::Graded(true))).count() as u32;
    let transport_failures = results.iter().filter(|r| matches!(r, Attempt::Failed)).count() as u32;
    let decision = if attempts > 0 && transport_failures == attempts {
        FilterDecision::Undetermined
    } else if keep_decision(successes, config.keep_threshold) {
        FilterDecision::Keep
    } else {
        FilterDecision::Discard
    };
    FilterOutcome {
        decision,
        stats: FilterStats { successes, attempts },
        transport_failures,
    }
}

enum Attempt {
    Graded(bool),
    Failed,
}

/// Summary of a filtering run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub positives: usize,
    pub kept: usize,
    pub discarded: usize,
    pub undetermined: usize,
    /// 1-based line numbers of records that could not be parsed.
    pub malformed_lines: Vec<usize>,
    /// Number of negatives per success count.
    pub success_histogram: BTreeMap<u32, usize>,
}

/// Filters parsed samples: positives pass through, negatives are tested.
/// Output keeps input order.
pub fn filter_samples(
    gateway: &Gateway,
    samples: Vec<CritiqueSample>,
    config: &SearchConfig,
) -> (Vec<CritiqueSample>, FilterReport) {
    let mut report = FilterReport {
        total: samples.len(),
        ..FilterReport::default()
    };
    let outcomes = exec::map(&samples, |s| match s.provenance {
        Provenance::Positive => None,
        Provenance::NegativeMined => Some(filter_sample(gateway, s, config)),
    });
    let mut out = Vec::with_capacity(samples.len());
    for (mut sample, outcome) in samples.into_iter().zip(outcomes) {
        let Some(outcome) = outcome else {
            report.positives += 1;
            out.push(sample);
            continue;
        };
        match outcome.decision {
            FilterDecision::Undetermined => {
                report.undetermined += 1;
                continue;
            }
            FilterDecision::Keep => report.kept += 1,
            FilterDecision::Discard => report.discarded += 1,
        }
        *report.success_histogram.entry(outcome.stats.successes).or_default() += 1;
        if outcome.decision == FilterDecision::Keep {
            sample.filter_stats = Some(outcome.stats);
            out.push(sample);
        }
    }
    (out, report)
}

/// Parses line-delimited sample records and filters them. Blank lines and
/// header records are skipped; unparseable or invalid lines are reported
/// by number.
pub fn filter_dataset(gateway: &Gateway, text: &str, config: &SearchConfig) -> (Vec<CritiqueSample>, FilterReport) {
    let (samples, malformed) = crate::store::parse_samples(text);
    let (out, mut report) = filter_samples(gateway, samples, config);
    report.malformed_lines = malformed;
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{DefaultBehavior, GatewaySettings, RetryPolicy, ScriptKind, ScriptedPolicy};
    use crate::types::{PathSource, Question, ReasoningPath, Step};
    use std::sync::Arc;

    fn gw(p: ScriptedPolicy) -> Gateway {
        Gateway::new(
            Arc::new(p),
            GatewaySettings {
                retry: RetryPolicy::none(),
                ..GatewaySettings::default()
            },
        )
    }

    fn negative(qid: &str) -> CritiqueSample {
        let q = Question::new(qid, "How many?", "7");
        let mut p = ReasoningPath::new(qid, vec![Step::new("Final answer: 6", true)], PathSource::SearchTree);
        p.final_answer = Some("6".into());
        CritiqueSample::negative(q, p, "Recount the bars.".into())
    }

    fn positive(qid: &str) -> CritiqueSample {
        let q = Question::new(qid, "How many?", "7");
        let mut p = ReasoningPath::new(qid, vec![Step::new("Final answer: 7", true)], PathSource::SearchTree);
        p.final_answer = Some("7".into());
        CritiqueSample::positive(q, p)
    }

    /// Script `successes` correct refinements out of ten for question `qid`.
    fn script(p: &mut ScriptedPolicy, qid: &str, successes: usize) {
        let outs: Vec<&str> = (0..10)
            .map(|i| {
                if i < successes {
                    "Final answer: 7"
                } else {
                    "Final answer: 5"
                }
            })
            .collect();
        p.add(qid, &[] as &[&str], ScriptKind::Refine, outs);
    }

    #[test]
    fn threshold_boundaries() {
        let cfg = SearchConfig::default();
        for (succ, expected) in [
            (3, FilterDecision::Keep),
            (2, FilterDecision::Discard),
            (10, FilterDecision::Keep),
        ] {
            let mut p = ScriptedPolicy::new(DefaultBehavior::Fail);
            script(&mut p, "q", succ);
            let out = filter_sample(&gw(p), &negative("q"), &cfg);
            assert_eq!(out.decision, expected, "{succ} successes");
            assert_eq!(
                out.stats,
                FilterStats {
                    successes: succ as u32,
                    attempts: 10
                }
            );
        }
    }

    #[test]
    fn all_transport_failures_are_undetermined() {
        struct Down;
        impl crate::gateway::ModelBackend for Down {
            fn generate(
                &self,
                _: &crate::gateway::GenerationRequest<'_>,
                _: SampleKey,
            ) -> crate::gateway::Result<Vec<String>> {
                Err(crate::gateway::GatewayError::Transport("down".into()))
            }
            fn critique(&self, _: &Question, _: &ReasoningPath) -> crate::gateway::Result<crate::gateway::RawVerdict> {
                Err(crate::gateway::GatewayError::Transport("down".into()))
            }
            fn refine(
                &self,
                _: &Question,
                _: &ReasoningPath,
                _: &str,
                _: f64,
                _: SampleKey,
            ) -> crate::gateway::Result<String> {
                Err(crate::gateway::GatewayError::Transport("down".into()))
            }
            fn annotate(&self, _: &Question, _: &crate::types::DivergencePair) -> crate::gateway::Result<String> {
                Err(crate::gateway::GatewayError::Transport("down".into()))
            }
        }
        let g = Gateway::new(
            Arc::new(Down),
            GatewaySettings {
                retry: RetryPolicy::none(),
                ..GatewaySettings::default()
            },
        );
        let out = filter_sample(&g, &negative("q"), &SearchConfig::default());
        assert_eq!(out.decision, FilterDecision::Undetermined);
        let (kept, report) = filter_samples(&g, vec![negative("q"), positive("p")], &SearchConfig::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(report.undetermined, 1);
    }

    #[test]
    fn dataset_keeps_positives_and_passing_negatives() {
        let mut p = ScriptedPolicy::new(DefaultBehavior::Fail);
        for (qid, succ) in [("n1", 3), ("n2", 2), ("n3", 10), ("n4", 0)] {
            script(&mut p, qid, succ);
        }
        let g = gw(p);
        let mut samples: Vec<CritiqueSample> = (0..5).map(|i| positive(&format!("p{i}"))).collect();
        samples.extend(["n1", "n2", "n3", "n4"].map(negative));
        let (out, report) = filter_samples(&g, samples, &SearchConfig::default());
        // Oracle: 5 positives, then negatives with ≥ 3 successes (n1, n3).
        assert_eq!(out.len(), 7);
        let negs: Vec<_> = out
            .iter()
            .filter(|s| s.correctness == 0)
            .map(|s| s.question.id.as_str())
            .collect();
        assert_eq!(negs, ["n1", "n3"]);
        assert_eq!((report.positives, report.kept, report.discarded), (5, 2, 2));
        assert_eq!(
            report.success_histogram,
            BTreeMap::from([(0, 1), (2, 1), (3, 1), (10, 1)])
        );
        assert_eq!(
            out[5].filter_stats,
            Some(FilterStats {
                successes: 3,
                attempts: 10
            })
        );
    }

    #[test]
    fn empty_input_gives_zero_report() {
        let g = gw(ScriptedPolicy::new(DefaultBehavior::Fail));
        let (out, report) = filter_dataset(&g, "", &SearchConfig::default());
        assert!(out.is_empty());
        assert_eq!(report, FilterReport::default());
    }

    #[test]
    fn malformed_lines_are_reported() {
        let g = gw(ScriptedPolicy::new(DefaultBehavior::Fail));
        let good = serde_json::to_string(&positive("p")).unwrap();
        let text = format!("{good}\n{{not json\n{good}\n");
        let (out, report) = filter_dataset(&g, &text, &SearchConfig::default());
        assert_eq!(out.len(), 2);
        assert_eq!(report.malformed_lines, vec![2]);
    }

    #[test]
    fn decisions_replay_with_fixed_seed() {
        let mut p = ScriptedPolicy::new(DefaultBehavior::Fail);
        script(&mut p, "q", 4);
        let g = gw(p);
        let cfg = SearchConfig::default();
        let a = filter_sample(&g, &negative("q"), &cfg);
        let b = filter_sample(&g, &negative("q"), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn decision_rule_is_exhaustively_successes_at_least_k() {
        for k in 1..=10u32 {
            for s in 0..=10u32 {
                assert_eq!(keep_decision(s, k), s >= k);
                if k > 1 && keep_decision(s, k) {
                    assert!(keep_decision(s, k - 1), "lowering K never drops a keep");
                }
            }
        }
    }
}
