//! Monte Carlo Tree Search over reasoning steps.
//!
//! Each iteration selects a leaf by descending through the highest-valued
//! children, expands it with `n` sampled next steps, estimates each new
//! child by the fraction of `m` rollouts that reach the ground-truth answer,
//! and backs every child's estimate up to the root as an incremental mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::gateway::{extract_answer_from_step, Gateway, GatewayError, GenerationRequest, SampleKey};
use crate::types::{Node, NodeId, PathSource, Question, ReasoningPath, SearchConfig, Step};

pub const TREE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MctsError {
    #[error("expand on non-leaf node {0}")]
    NotALeaf(NodeId),
    #[error("expand on terminal node {0}")]
    TerminalExpansion(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("backpropagated value {0} outside [0, 1]")]
    InvalidValue(f64),
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Final answer of a path: the text after the final-answer marker in its
/// last step, provided that step is terminal.
pub fn extract_answer(path: &ReasoningPath) -> Option<String> {
    let last = path.steps.last()?;
    if !last.is_terminal {
        return None;
    }
    extract_answer_from_step(&last.text)
}

/// A completed rollout kept for critique mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedRollout {
    pub node_id: NodeId,
    pub index: u32,
    pub path: ReasoningPath,
}

/// Outcome of simulating one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub value: f64,
    pub correct: usize,
    pub rollouts: Vec<ReasoningPath>,
    /// Rollouts lost to backend failures; they count as incorrect.
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStatus {
    /// The run stopped early on a backend failure.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub failed_rollouts: usize,
    /// Selection reached a terminal node.
    pub reached_terminal: bool,
}

/// The search tree for one question. Node ids index `nodes`; the root is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub question: Question,
    pub nodes: Vec<Node>,
    pub root_id: NodeId,
    pub rng_seed: u64,
    pub iteration_count: usize,
    pub rollouts: Vec<RetainedRollout>,
    pub status: SearchStatus,
}

pub(crate) fn stable_hash(s: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl SearchTree {
    pub fn new(question: Question, rng_seed: u64) -> Self {
        Self {
            question,
            nodes: vec![Node::root()],
            root_id: 0,
            rng_seed,
            iteration_count: 0,
            rollouts: Vec::new(),
            status: SearchStatus::default(),
        }
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, MctsError> {
        self.nodes.get(id).ok_or(MctsError::UnknownNode(id))
    }

    pub fn root(&self) -> &Node {
        &self.nodes[self.root_id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Seed for draws made at `node`, derived from the tree seed.
    pub fn node_seed(&self, node: NodeId) -> u64 {
        splitmix(self.rng_seed ^ splitmix(node as u64 + 1))
    }

    /// Ids from the root down to `id`, inclusive.
    pub fn ancestry(&self, id: NodeId) -> Vec<NodeId> {
        let mut ids = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent_id {
            ids.push(p);
            cur = p;
        }
        ids.reverse();
        ids
    }

    /// The partial reasoning path from the root to `id`.
    pub fn path_steps(&self, id: NodeId) -> Vec<Step> {
        self.ancestry(id)
            .into_iter()
            .filter_map(|n| self.nodes[n].step.clone())
            .collect()
    }

    pub fn path_tokens(&self, id: NodeId) -> usize {
        self.ancestry(id)
            .into_iter()
            .filter_map(|n| self.nodes[n].step.as_ref().map(|s| s.token_count))
            .sum()
    }

    /// `P(id)` as a reasoning path with its final answer extracted.
    pub fn reasoning_path(&self, id: NodeId) -> ReasoningPath {
        let mut path = ReasoningPath::new(self.question.id.clone(), self.path_steps(id), PathSource::SearchTree);
        path.final_answer = extract_answer(&path);
        path
    }

    /// True when the node's step ends the reasoning or its path has used up
    /// the token budget.
    pub fn is_terminal(&self, id: NodeId, config: &SearchConfig) -> bool {
        self.nodes[id].has_terminal_step() || self.path_tokens(id) >= config.max_path_tokens
    }

    /// Greedy descent: from the root, repeatedly move to the child with the
    /// highest value (lowest index on ties) until a node without children.
    pub fn select_leaf(&self) -> NodeId {
        self.select_leaf_with(0.0)
    }

    /// Descent with an optional UCB bonus `c·sqrt(ln N(parent) / N(child))`.
    /// With `c == 0` this is exactly [`Self::select_leaf`].
    pub fn select_leaf_with(&self, ucb_constant: f64) -> NodeId {
        let mut cur = self.root_id;
        loop {
            let node = &self.nodes[cur];
            if node.children.is_empty() {
                return cur;
            }
            let parent_visits = node.visit_count.max(1) as f64;
            let score = |c: &Node| {
                if ucb_constant == 0.0 {
                    c.value
                } else if c.visit_count == 0 {
                    f64::INFINITY
                } else {
                    c.value + ucb_constant * (parent_visits.ln() / c.visit_count as f64).sqrt()
                }
            };
            let mut best = node.children[0];
            let mut best_score = score(&self.nodes[best]);
            for &child in &node.children[1..] {
                let s = score(&self.nodes[child]);
                if s > best_score {
                    best = child;
                    best_score = s;
                }
            }
            cur = best;
        }
    }

    /// Appends a fresh child (N = 0, V = 0) under `parent`.
    pub fn add_child(&mut self, parent: NodeId, step: Step) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node::child(id, parent, step));
        self.nodes[parent].children.push(id);
        id
    }

    /// Adds one child per distinct sampled next step of `leaf`.
    ///
    /// On a backend error nothing is added.
    pub fn expand(
        &mut self,
        gateway: &Gateway,
        leaf: NodeId,
        n: usize,
        config: &SearchConfig,
    ) -> Result<Vec<NodeId>, MctsError> {
        let node = self.node(leaf)?;
        if !node.is_leaf() {
            return Err(MctsError::NotALeaf(leaf));
        }
        if self.is_terminal(leaf, config) {
            return Err(MctsError::TerminalExpansion(leaf));
        }
        let prior = self.path_steps(leaf);
        let req = GenerationRequest {
            question: &self.question,
            prior_steps: &prior,
            max_new_tokens: config.step_token_cap,
            temperature: config.temperature,
            n_samples: n,
            stop_at_step_boundary: true,
        };
        let steps = gateway.generate_steps(&req, SampleKey::new(self.node_seed(leaf), 0))?;
        let mut seen = std::collections::HashSet::new();
        let fresh: Vec<Step> = steps.into_iter().filter(|s| seen.insert(s.text.clone())).collect();
        Ok(fresh.into_iter().map(|s| self.add_child(leaf, s)).collect())
    }

    /// Runs `m` rollouts from `P(node)` and returns the fraction whose
    /// final answer grades correct. Does not modify the tree.
    ///
    /// A terminal node is its own rollout: its path is graded once and no
    /// backend call is made.
    pub fn simulate(
        &self,
        gateway: &Gateway,
        node: NodeId,
        m: usize,
        config: &SearchConfig,
    ) -> Result<Simulation, MctsError> {
        self.node(node)?;
        if m == 0 {
            return Err(MctsError::InvalidConfig(vec!["m_rollouts must be ≥ 1".into()]));
        }
        if self.is_terminal(node, config) {
            let path = self.reasoning_path(node);
            let correct = gateway.grade_path(&self.question, &path).unwrap_or(false);
            return Ok(Simulation {
                value: if correct { 1.0 } else { 0.0 },
                correct: usize::from(correct),
                rollouts: Vec::new(),
                failures: 0,
            });
        }
        let prior = self.path_steps(node);
        let budget = config.max_path_tokens.saturating_sub(self.path_tokens(node)).max(1);
        let seed = self.node_seed(node);
        let results = exec::map_range(m, |r| {
            let path = gateway.rollout(
                &self.question,
                &prior,
                budget,
                config.temperature,
                SampleKey::new(seed, r as u32),
            )?;
            let correct = gateway.grade_path(&self.question, &path)?;
            Ok::<_, GatewayError>((path, correct))
        });
        let mut sim = Simulation {
            value: 0.0,
            correct: 0,
            rollouts: Vec::with_capacity(m),
            failures: 0,
        };
        for res in results {
            match res {
                Ok((path, correct)) => {
                    sim.correct += usize::from(correct);
                    sim.rollouts.push(path);
                }
                Err(e) => {
                    log::warn!("rollout from node {node} of {} failed: {e}", self.question.id);
                    sim.failures += 1;
                }
            }
        }
        sim.value = sim.correct as f64 / m as f64;
        Ok(sim)
    }

    /// Adds `value` to every node from `from` up to the root:
    /// `N ← N + 1`, `V ← (V·N_old + value) / N`.
    pub fn backpropagate(&mut self, from: NodeId, value: f64) -> Result<(), MctsError> {
        self.node(from)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(MctsError::InvalidValue(value));
        }
        let mut cur = Some(from);
        while let Some(id) = cur {
            let node = &mut self.nodes[id];
            let n_old = node.visit_count as f64;
            node.visit_count += 1;
            node.value = ((node.value * n_old + value) / node.visit_count as f64).clamp(0.0, 1.0);
            node.propagation_log.push(value);
            cur = node.parent_id;
        }
        Ok(())
    }

    /// Deepest node whose root path matches `prefix` step-for-step by text.
    pub fn deepest_node_for(&self, prefix: &[Step]) -> NodeId {
        let mut cur = self.root_id;
        for step in prefix {
            let next = self.nodes[cur]
                .children
                .iter()
                .copied()
                .find(|&c| self.nodes[c].step.as_ref().is_some_and(|s| s.text == step.text));
            match next {
                Some(c) => cur = c,
                None => break,
            }
        }
        cur
    }

    /// No rollout through the root ever reached the correct answer.
    pub fn no_reference(&self) -> bool {
        self.root().value == 0.0
    }

    /// Flattens the tree into dump records ordered by node id.
    pub fn to_records(&self, config: &SearchConfig) -> Vec<TreeRecord> {
        let mut out = Vec::with_capacity(self.nodes.len() + self.rollouts.len() + 1);
        out.push(TreeRecord::Header(TreeHeader {
            schema_version: TREE_SCHEMA_VERSION,
            config_hash: config.config_hash(),
            question: self.question.clone(),
            config: config.clone(),
            rng_seed: self.rng_seed,
            iteration_count: self.iteration_count,
            no_reference: self.no_reference(),
            status: self.status.clone(),
        }));
        out.extend(self.nodes.iter().map(|n| {
            TreeRecord::Node(NodeRecord {
                node_id: n.node_id,
                parent_id: n.parent_id,
                text: n.step.as_ref().map(|s| s.text.clone()),
                token_count: n.step.as_ref().map_or(0, |s| s.token_count),
                terminal: n.has_terminal_step(),
                visit_count: n.visit_count,
                value: n.value,
                propagation_log: n.propagation_log.clone(),
            })
        }));
        out.extend(self.rollouts.iter().cloned().map(TreeRecord::Rollout));
        out
    }

    /// Rebuilds a tree (and its config) from dump records.
    pub fn from_records(records: Vec<TreeRecord>) -> Result<(Self, SearchConfig), String> {
        let mut iter = records.into_iter();
        let header = match iter.next() {
            Some(TreeRecord::Header(h)) => h,
            _ => return Err("tree dump must start with a header record".into()),
        };
        if header.schema_version != TREE_SCHEMA_VERSION {
            return Err(format!("unsupported tree schema version {}", header.schema_version));
        }
        let mut tree = SearchTree::new(header.question, header.rng_seed);
        tree.iteration_count = header.iteration_count;
        tree.status = header.status;
        tree.nodes.clear();
        for rec in iter {
            match rec {
                TreeRecord::Header(_) => return Err("duplicate header record".into()),
                TreeRecord::Node(n) => {
                    if n.node_id != tree.nodes.len() {
                        return Err(format!("node {} out of order", n.node_id));
                    }
                    let step = match (&n.parent_id, n.text) {
                        (None, _) => None,
                        (Some(_), Some(text)) => Some(Step {
                            text,
                            token_count: n.token_count,
                            is_terminal: n.terminal,
                        }),
                        (Some(_), None) => return Err(format!("node {} has no step text", n.node_id)),
                    };
                    if let Some(p) = n.parent_id {
                        if p >= n.node_id {
                            return Err(format!("node {} has parent {p} that does not precede it", n.node_id));
                        }
                        tree.nodes[p].children.push(n.node_id);
                    } else if n.node_id != 0 {
                        return Err(format!("node {} has no parent but is not the root", n.node_id));
                    }
                    tree.nodes.push(Node {
                        node_id: n.node_id,
                        parent_id: n.parent_id,
                        step,
                        children: Vec::new(),
                        visit_count: n.visit_count,
                        value: n.value,
                        propagation_log: n.propagation_log,
                    });
                }
                TreeRecord::Rollout(r) => {
                    if r.node_id >= tree.nodes.len() {
                        return Err(format!("rollout refers to unknown node {}", r.node_id));
                    }
                    tree.rollouts.push(r);
                }
            }
        }
        if tree.nodes.is_empty() {
            return Err("tree dump has no root node".into());
        }
        Ok((tree, header.config))
    }
}

/// First record of a tree dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeHeader {
    pub schema_version: u32,
    pub config_hash: String,
    pub question: Question,
    pub config: SearchConfig,
    pub rng_seed: u64,
    pub iteration_count: usize,
    pub no_reference: bool,
    pub status: SearchStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub text: Option<String>,
    pub token_count: usize,
    pub terminal: bool,
    pub visit_count: u64,
    pub value: f64,
    pub propagation_log: Vec<f64>,
}

/// One line of a tree dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TreeRecord {
    Header(TreeHeader),
    Node(NodeRecord),
    Rollout(RetainedRollout),
}

/// Builds a search tree for one question.
///
/// Stops after `config.search_iterations` iterations or as soon as selection
/// lands on a terminal node. A backend failure during expansion ends the run
/// early; the tree built so far is returned with `status.partial` set.
pub fn run_search(question: Question, gateway: &Gateway, config: &SearchConfig) -> Result<SearchTree, MctsError> {
    config.validate().map_err(MctsError::InvalidConfig)?;
    let seed = splitmix(config.seed ^ stable_hash(&question.id));
    let mut tree = SearchTree::new(question, seed);
    for _ in 0..config.search_iterations {
        let leaf = tree.select_leaf_with(config.ucb_constant);
        if tree.is_terminal(leaf, config) {
            tree.status.reached_terminal = true;
            break;
        }
        let children = match tree.expand(gateway, leaf, config.n_expand, config) {
            Ok(c) => c,
            Err(MctsError::Gateway(e)) => {
                log::warn!("search for {} stopped: {e}", tree.question.id);
                tree.status.partial = true;
                tree.status.error = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let sims = {
            let tree = &tree;
            exec::map(&children, |&c| tree.simulate(gateway, c, config.m_rollouts, config))
        };
        for (child, sim) in children.into_iter().zip(sims) {
            let sim = sim?;
            tree.status.failed_rollouts += sim.failures;
            for (i, path) in sim.rollouts.into_iter().enumerate() {
                tree.rollouts.push(RetainedRollout {
                    node_id: child,
                    index: i as u32,
                    path,
                });
            }
            tree.backpropagate(child, sim.value)?;
        }
        tree.iteration_count += 1;
    }
    Ok(tree)
}
