//! Critique mining: compare incorrect reasoning paths against a correct
//! reference from the same tree and have the annotator explain where each
//! one goes wrong.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::gateway::{Gateway, GatewayError};
use crate::mcts::{extract_answer, SearchTree};
use crate::types::{CritiqueSample, DivergencePair, NodeId, PathSource, Question, ReasoningPath, Step};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiningError {
    #[error("paths belong to different questions ({0} vs {1})")]
    QuestionMismatch(String, String),
    #[error("paths do not diverge")]
    NoDivergence,
    #[error("path does not grade correct")]
    NotCorrect,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MineOptions {
    /// Also mine incorrect rollout completions.
    pub include_rollouts: bool,
    /// Emit every distinct correct terminal path as a positive.
    pub all_positives: bool,
}

impl Default for MineOptions {
    fn default() -> Self {
        Self {
            include_rollouts: true,
            all_positives: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MineStats {
    pub trees: usize,
    pub no_reference: usize,
    pub positives: usize,
    pub negatives: usize,
    pub duplicate_paths: usize,
    pub skipped_annotations: usize,
    pub skipped_pairs: usize,
}

impl MineStats {
    pub fn merge(&mut self, o: &MineStats) {
        self.trees += o.trees;
        self.no_reference += o.no_reference;
        self.positives += o.positives;
        self.negatives += o.negatives;
        self.duplicate_paths += o.duplicate_paths;
        self.skipped_annotations += o.skipped_annotations;
        self.skipped_pairs += o.skipped_pairs;
    }
}

fn grades_correct(gateway: &Gateway, question: &Question, path: &ReasoningPath) -> bool {
    gateway.grade_path(question, path).unwrap_or_else(|e| {
        log::warn!("grading failed for {}: {e}", question.id);
        false
    })
}

/// Terminal tree nodes in depth-first, child-index order.
fn terminal_nodes(tree: &SearchTree) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut stack = vec![tree.root_id];
    while let Some(id) = stack.pop() {
        let node = &tree.nodes[id];
        if node.has_terminal_step() {
            out.push(id);
        }
        stack.extend(node.children.iter().rev());
    }
    out
}

/// Chooses the correct reference path of a tree.
///
/// Greedy value descent first. If that leaf is not a correct terminal, the
/// correct terminal tree node with the highest value wins (lowest id on
/// ties). If the tree has no correct terminal node, the correct retained
/// rollout from the highest-valued node is used (lowest node id, then
/// rollout index, on ties).
pub fn pick_reference(tree: &SearchTree, gateway: &Gateway) -> Option<ReasoningPath> {
    let leaf = tree.select_leaf();
    if tree.nodes[leaf].has_terminal_step() {
        let path = tree.reasoning_path(leaf);
        if grades_correct(gateway, &tree.question, &path) {
            return Some(path);
        }
    }
    let mut best: Option<(f64, NodeId)> = None;
    for id in terminal_nodes(tree) {
        let v = tree.nodes[id].value;
        if best.is_some_and(|(bv, bid)| v < bv || (v == bv && id > bid)) {
            continue;
        }
        if grades_correct(gateway, &tree.question, &tree.reasoning_path(id)) {
            best = Some((v, id));
        }
    }
    if let Some((_, id)) = best {
        return Some(tree.reasoning_path(id));
    }
    let mut best: Option<(f64, NodeId, u32, &ReasoningPath)> = None;
    for r in &tree.rollouts {
        let v = tree.nodes[r.node_id].value;
        let better = match best {
            None => true,
            Some((bv, bn, bi, _)) => v > bv || (v == bv && (r.node_id, r.index) < (bn, bi)),
        };
        if better && grades_correct(gateway, &tree.question, &r.path) {
            best = Some((v, r.node_id, r.index, &r.path));
        }
    }
    best.map(|(_, _, _, p)| p.clone())
}

fn is_incorrect_terminal(gateway: &Gateway, question: &Question, path: &ReasoningPath) -> bool {
    path.steps.last().is_some_and(|s| s.is_terminal) && !grades_correct(gateway, question, path)
}

/// Every terminal path whose final answer grades incorrect, depth-first in
/// child-index order. At each node its own path comes first, then its
/// retained rollouts (when `include_rollouts`), then its subtree.
pub fn collect_incorrect_paths(tree: &SearchTree, gateway: &Gateway, include_rollouts: bool) -> Vec<ReasoningPath> {
    let mut by_node: HashMap<NodeId, Vec<&ReasoningPath>> = HashMap::new();
    if include_rollouts {
        for r in &tree.rollouts {
            by_node.entry(r.node_id).or_default().push(&r.path);
        }
    }
    let mut out = Vec::new();
    let mut stack = vec![tree.root_id];
    while let Some(id) = stack.pop() {
        let node = &tree.nodes[id];
        if node.has_terminal_step() {
            let path = tree.reasoning_path(id);
            if is_incorrect_terminal(gateway, &tree.question, &path) {
                out.push(path);
            }
        }
        for path in by_node.get(&id).into_iter().flatten() {
            if is_incorrect_terminal(gateway, &tree.question, path) {
                out.push((*path).clone());
            }
        }
        stack.extend(node.children.iter().rev());
    }
    out
}

/// Splits two paths at their longest common step-text prefix.
pub fn find_divergence(reference: &ReasoningPath, wrong: &ReasoningPath) -> Result<DivergencePair, MiningError> {
    if reference.question_id != wrong.question_id {
        return Err(MiningError::QuestionMismatch(
            reference.question_id.clone(),
            wrong.question_id.clone(),
        ));
    }
    let shared = reference
        .steps
        .iter()
        .zip(&wrong.steps)
        .take_while(|(a, b)| a.text == b.text)
        .count();
    if shared == reference.steps.len() || shared == wrong.steps.len() {
        return Err(MiningError::NoDivergence);
    }
    Ok(DivergencePair {
        question_id: reference.question_id.clone(),
        shared_prefix: reference.steps[..shared].to_vec(),
        branch_a: reference.steps[shared..].to_vec(),
        branch_b: wrong.steps[shared..].to_vec(),
        lca_node_id: None,
    })
}

/// Negative sample for the incorrect branch of `pair`, critiqued by the
/// annotator.
pub fn build_negative(
    gateway: &Gateway,
    question: &Question,
    pair: &DivergencePair,
    source: PathSource,
) -> Result<CritiqueSample, GatewayError> {
    let critique = gateway.annotate(question, pair)?;
    let steps: Vec<Step> = pair.shared_prefix.iter().chain(&pair.branch_b).cloned().collect();
    let mut path = ReasoningPath::new(question.id.clone(), steps, source);
    path.final_answer = extract_answer(&path);
    Ok(CritiqueSample::negative(question.clone(), path, critique))
}

/// Positive sample with the canonical "No corrections needed." critique.
pub fn build_positive(
    gateway: &Gateway,
    question: &Question,
    correct: &ReasoningPath,
) -> Result<CritiqueSample, MiningError> {
    if !gateway.grade_path(question, correct)? {
        return Err(MiningError::NotCorrect);
    }
    Ok(CritiqueSample::positive(question.clone(), correct.clone()))
}

fn step_key(path: &ReasoningPath) -> Vec<String> {
    path.steps.iter().map(|s| s.text.clone()).collect()
}

/// Mines one tree: positives first, then one negative per distinct incorrect
/// path in collection order.
pub fn mine_tree(tree: &SearchTree, gateway: &Gateway, options: &MineOptions) -> (Vec<CritiqueSample>, MineStats) {
    let mut stats = MineStats {
        trees: 1,
        ..MineStats::default()
    };
    let question = &tree.question;
    let reference = if tree.no_reference() {
        None
    } else {
        pick_reference(tree, gateway)
    };
    let Some(reference) = reference else {
        stats.no_reference = 1;
        return (Vec::new(), stats);
    };

    let mut samples = vec![CritiqueSample::positive(question.clone(), reference.clone())];
    if options.all_positives {
        let mut seen: HashSet<Vec<String>> = HashSet::from([step_key(&reference)]);
        let tree_paths = terminal_nodes(tree).into_iter().map(|id| tree.reasoning_path(id));
        let rollout_paths = tree.rollouts.iter().map(|r| r.path.clone());
        for path in tree_paths.chain(rollout_paths) {
            if path.steps.last().is_some_and(|s| s.is_terminal)
                && grades_correct(gateway, question, &path)
                && seen.insert(step_key(&path))
            {
                samples.push(CritiqueSample::positive(question.clone(), path));
            }
        }
    }
    stats.positives = samples.len();

    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for wrong in collect_incorrect_paths(tree, gateway, options.include_rollouts) {
        if !seen.insert(step_key(&wrong)) {
            stats.duplicate_paths += 1;
            continue;
        }
        match find_divergence(&reference, &wrong) {
            Ok(mut pair) => {
                pair.lca_node_id = Some(tree.deepest_node_for(&pair.shared_prefix));
                pairs.push((pair, wrong.source));
            }
            Err(e) => {
                log::warn!("skipping path of {}: {e}", question.id);
                stats.skipped_pairs += 1;
            }
        }
    }
    let built = exec::map(&pairs, |(pair, source)| {
        build_negative(gateway, question, pair, *source)
    });
    for res in built {
        match res {
            Ok(s) => {
                stats.negatives += 1;
                samples.push(s);
            }
            Err(e) => {
                log::warn!("annotation skipped for {}: {e}", question.id);
                stats.skipped_annotations += 1;
            }
        }
    }
    (samples, stats)
}

/// Mines many trees, concatenating their samples in input order.
pub fn mine_trees(trees: &[SearchTree], gateway: &Gateway, options: &MineOptions) -> (Vec<CritiqueSample>, MineStats) {
    let per_tree = exec::map(trees, |t| mine_tree(t, gateway, options));
    let mut samples = Vec::new();
    let mut stats = MineStats::default();
    for (s, st) in per_tree {
        samples.extend(s);
        stats.merge(&st);
    }
    (samples, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{DefaultBehavior, GatewaySettings, RetryPolicy, ScriptKind, ScriptedPolicy};
    use crate::mcts::RetainedRollout;
    use crate::types::NO_CORRECTIONS;
    use std::sync::Arc;

    fn q() -> Question {
        Question::new("q", "Which bar is tallest?", "B")
    }

    fn gw(p: ScriptedPolicy) -> Gateway {
        Gateway::new(
            Arc::new(p),
            GatewaySettings {
                retry: RetryPolicy::none(),
                ..GatewaySettings::default()
            },
        )
    }

    fn echo() -> Gateway {
        gw(ScriptedPolicy::new(DefaultBehavior::Echo))
    }

    fn path(steps: &[&str]) -> ReasoningPath {
        let n = steps.len();
        let steps = steps
            .iter()
            .enumerate()
            .map(|(i, s)| Step::new(*s, i + 1 == n && s.contains("Final answer")))
            .collect();
        let mut p = ReasoningPath::new("q", steps, PathSource::SearchTree);
        p.final_answer = extract_answer(&p);
        p
    }

    /// root ─ s1 ─┬─ "Final answer: B" (v)
    ///            └─ "Final answer: C" (v)
    ///      ─ x1 ── "Final answer: D" (v)
    fn tree(values: [f64; 5]) -> SearchTree {
        let mut t = SearchTree::new(q(), 0);
        let s1 = t.add_child(0, Step::new("s1", false));
        let x1 = t.add_child(0, Step::new("x1", false));
        let good = t.add_child(s1, Step::new("Final answer: B", true));
        let bad = t.add_child(s1, Step::new("Final answer: C", true));
        let bad2 = t.add_child(x1, Step::new("Final answer: D", true));
        for (id, v) in [s1, x1, good, bad, bad2].into_iter().zip(values) {
            t.nodes[id].value = v;
        }
        t.nodes[0].value = 0.5;
        t
    }

    #[test]
    fn reference_from_greedy_path() {
        let t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        let r = pick_reference(&t, &echo()).unwrap();
        assert_eq!(r.final_answer.as_deref(), Some("B"));
        assert_eq!(step_key(&r), ["s1", "Final answer: B"]);
    }

    #[test]
    fn reference_falls_back_to_best_correct_terminal() {
        // Greedy goes s1 → the incorrect "C" leaf; the only correct terminal
        // is the "B" leaf with value 0.8.
        let t = tree([0.9, 0.1, 0.8, 0.9, 0.0]);
        assert_eq!(t.nodes[t.select_leaf()].step.as_ref().unwrap().text, "Final answer: C");
        let r = pick_reference(&t, &echo()).unwrap();
        // Oracle: scan every terminal node, keep the correct ones, take the
        // highest value with the lowest id on ties.
        let g = echo();
        let mut best: Option<(f64, usize)> = None;
        for n in &t.nodes {
            if n.has_terminal_step() {
                let p = t.reasoning_path(n.node_id);
                if g.grade_path(&t.question, &p).unwrap() && best.is_none_or(|(bv, _)| n.value > bv) {
                    best = Some((n.value, n.node_id));
                }
            }
        }
        assert_eq!(r, t.reasoning_path(best.unwrap().1));
    }

    #[test]
    fn no_correct_path_means_no_reference() {
        let mut t = tree([0.9, 0.1, 0.8, 0.9, 0.0]);
        t.nodes[3].step = Some(Step::new("Final answer: A", true));
        assert_eq!(pick_reference(&t, &echo()), None);
    }

    #[test]
    fn reference_can_come_from_a_rollout() {
        let mut t = SearchTree::new(q(), 0);
        let s1 = t.add_child(0, Step::new("s1", false));
        t.nodes[s1].value = 0.5;
        t.rollouts.push(RetainedRollout {
            node_id: s1,
            index: 0,
            path: path(&["s1", "r", "Final answer: C"]),
        });
        t.rollouts.push(RetainedRollout {
            node_id: s1,
            index: 1,
            path: path(&["s1", "r2", "Final answer: B"]),
        });
        let r = pick_reference(&t, &echo()).unwrap();
        assert_eq!(step_key(&r), ["s1", "r2", "Final answer: B"]);
    }

    #[test]
    fn incorrect_paths_in_dfs_order() {
        let t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        let wrong = collect_incorrect_paths(&t, &echo(), true);
        let keys: Vec<_> = wrong.iter().map(step_key).collect();
        assert_eq!(keys, vec![vec!["s1", "Final answer: C"], vec!["x1", "Final answer: D"]]);
    }

    #[test]
    fn only_correct_terminals_gives_nothing() {
        let mut t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        t.nodes[4].step = Some(Step::new("Final answer: B", true));
        t.nodes[5].step = Some(Step::new("Final answer: b", true));
        assert!(collect_incorrect_paths(&t, &echo(), true).is_empty());
    }

    #[test]
    fn incorrect_rollouts_under_correct_branch_are_included() {
        let mut t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        t.nodes[4].step = Some(Step::new("Final answer: B", true));
        t.nodes[5].step = Some(Step::new("Final answer: B", true));
        let rollouts = [
            (1, path(&["s1", "Final answer: B"])),
            (1, path(&["s1", "t", "Final answer: E"])),
            (2, path(&["x1", "unfinished"])),
        ];
        for (i, (node, p)) in rollouts.iter().enumerate() {
            t.rollouts.push(RetainedRollout {
                node_id: *node,
                index: i as u32,
                path: p.clone(),
            });
        }
        let got = collect_incorrect_paths(&t, &echo(), true);
        // Oracle: brute-force scan of the rollout store for terminal,
        // incorrectly graded paths.
        let g = echo();
        let expected: Vec<_> = t
            .rollouts
            .iter()
            .filter(|r| r.path.steps.last().unwrap().is_terminal && !g.grade_path(&t.question, &r.path).unwrap())
            .map(|r| r.path.clone())
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 1);
        assert!(collect_incorrect_paths(&t, &echo(), false).is_empty());
    }

    #[test]
    fn divergence_examples() {
        let r = path(&["s1", "s2", "s3"]);
        let w = path(&["s1", "s2", "x3", "x4"]);
        let p = find_divergence(&r, &w).unwrap();
        assert_eq!(p.shared_prefix.len(), 2);
        assert_eq!(p.branch_a.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(), ["s3"]);
        assert_eq!(
            p.branch_b.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(),
            ["x3", "x4"]
        );

        let p = find_divergence(&r, &path(&["y1", "y2"])).unwrap();
        assert!(p.shared_prefix.is_empty());
        assert_eq!(p.branch_a.len(), 3);
        assert_eq!(p.branch_b.len(), 2);

        assert_eq!(find_divergence(&r, &r), Err(MiningError::NoDivergence));
    }

    #[test]
    fn positive_sample_rules() {
        let g = echo();
        let good = path(&["s1", "Final answer: B"]);
        let s = build_positive(&g, &q(), &good).unwrap();
        assert_eq!(s.critique, "No corrections needed.");
        assert_eq!((s.correctness, s.provenance), (1, crate::types::Provenance::Positive));
        let bad = path(&["s1", "Final answer: C"]);
        assert_eq!(build_positive(&g, &q(), &bad), Err(MiningError::NotCorrect));
    }

    #[test]
    fn negative_sample_assembly() {
        let mut p = ScriptedPolicy::new(DefaultBehavior::Fail);
        p.add("q", &["s1"], ScriptKind::Annotate, ["Step 2 picks the wrong bar."]);
        let g = gw(p);
        let pair = find_divergence(&path(&["s1", "Final answer: B"]), &path(&["s1", "Final answer: C"])).unwrap();
        let s = build_negative(&g, &q(), &pair, PathSource::SearchTree).unwrap();
        assert_eq!(s.correctness, 0);
        assert_eq!(s.critique, "Step 2 picks the wrong bar.");
        let expected: Vec<Step> = pair.shared_prefix.iter().chain(&pair.branch_b).cloned().collect();
        assert_eq!(s.answer_path.steps, expected);
        assert_eq!(s.answer_path.final_answer.as_deref(), Some("C"));
    }

    #[test]
    fn empty_annotation_is_skipped_and_counted() {
        let mut p = ScriptedPolicy::new(DefaultBehavior::Echo);
        p.add("q", &["x1"], ScriptKind::Annotate, [""]);
        let t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        let (samples, stats) = mine_tree(&t, &gw(p), &MineOptions::default());
        assert_eq!(stats.skipped_annotations, 1);
        assert_eq!(stats.negatives, 1);
        assert_eq!(samples.len(), 2);
    }

    #[test]
    fn mining_counts_and_reassembly() {
        let t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        let (samples, stats) = mine_tree(&t, &echo(), &MineOptions::default());
        assert_eq!((stats.positives, stats.negatives), (1, 2));
        assert_eq!(samples[0].critique, NO_CORRECTIONS);
        for s in &samples[1..] {
            assert_eq!(s.correctness, 0);
            assert!(!echo().grade_path(&s.question, &s.answer_path).unwrap());
        }
        assert!(samples[2].critique.contains("\"x1\""), "{}", samples[2].critique);
    }

    #[test]
    fn lca_is_the_deepest_shared_tree_node() {
        let t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        let r = path(&["s1", "Final answer: B"]);
        let w = path(&["s1", "Final answer: C"]);
        let pair = find_divergence(&r, &w).unwrap();
        assert_eq!(t.deepest_node_for(&pair.shared_prefix), 1);
    }

    #[test]
    fn duplicate_incorrect_paths_are_annotated_once() {
        let mut t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        t.rollouts.push(RetainedRollout {
            node_id: 2,
            index: 0,
            path: path(&["x1", "Final answer: D"]),
        });
        let (_, stats) = mine_tree(&t, &echo(), &MineOptions::default());
        assert_eq!(stats.duplicate_paths, 1);
        assert_eq!(stats.negatives, 2);
    }

    #[test]
    fn no_reference_tree_is_skipped() {
        let mut t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        t.nodes[0].value = 0.0;
        let (samples, stats) = mine_tree(&t, &echo(), &MineOptions::default());
        assert!(samples.is_empty());
        assert_eq!(stats.no_reference, 1);
    }

    #[test]
    fn all_positives_adds_distinct_correct_paths() {
        let mut t = tree([0.9, 0.1, 1.0, 0.0, 0.0]);
        t.nodes[5].step = Some(Step::new("Final answer: B", true));
        let opts = MineOptions {
            all_positives: true,
            ..MineOptions::default()
        };
        let (_, stats) = mine_tree(&t, &echo(), &opts);
        assert_eq!(stats.positives, 2);
    }
}
