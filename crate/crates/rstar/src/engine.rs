//! Search orchestration: selection, expansion, rollout simulation, terminal
//! confidence scoring, and backpropagation. Candidate trajectories are
//! collected across all rollouts and snapshotted once the search finishes.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::actions::{
    legal_actions, normalize_step_text, parse_action_output, render_prompt, ActionConfig,
    ActionError, ActionKind, TemplateRegistry,
};
use crate::answers::{extract_answer, majority_vote, AnswerKind, CanonicalAnswer};
use crate::backend::{BackendError, BackendSession};
use crate::seed::{derive_seed, fnv1a, seeded_rng};
use crate::tree::{uct_score, NodeId, ReasoningTree, Trajectory, TreeError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("rollout stalled: {0} consecutive unparseable completions")]
    RolloutStalled(usize),
    #[error("search space exhausted before any rollout completed")]
    Exhausted,
}

/// How a trajectory's reward is read from the tree once rollouts finish.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Accumulated Q at the terminal node.
    #[default]
    Accumulated,
    /// Q divided by visit count.
    MeanPerVisit,
}

/// How terminal confidence is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Per terminal: extra completions drawn from its parent state.
    #[default]
    PerTerminal,
    /// Pooled: each terminal scored by its answer's share of all rollout
    /// terminal answers. Applied to snapshots after the search.
    Pooled,
}

/// Every knob of one tree search.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub num_rollouts: u32,
    pub max_depth: usize,
    pub uct_c: f64,
    pub action_config: ActionConfig,
    /// Extra completions drawn when scoring a terminal (k).
    pub confidence_samples: u32,
    pub rng_seed: u64,
    pub max_tokens: u32,
    pub answer_kind: AnswerKind,
    pub reward_mode: RewardMode,
    pub confidence_mode: ConfidenceMode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            num_rollouts: 32,
            max_depth: 5,
            uct_c: 1.0,
            action_config: ActionConfig::default(),
            confidence_samples: 8,
            rng_seed: 0,
            max_tokens: 512,
            answer_kind: AnswerKind::Numeric,
            reward_mode: RewardMode::Accumulated,
            confidence_mode: ConfidenceMode::PerTerminal,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.num_rollouts == 0 {
            return Err(ActionError::InvalidConfig("num_rollouts must be >= 1".into()).into());
        }
        if self.max_depth == 0 {
            return Err(ActionError::InvalidConfig("max_depth must be >= 1".into()).into());
        }
        if self.confidence_samples == 0 {
            return Err(ActionError::InvalidConfig("confidence_samples must be >= 1".into()).into());
        }
        self.action_config.validate()?;
        Ok(())
    }
}

/// One completed rollout: which terminal it reached and the reward that was
/// backpropagated.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RolloutRecord {
    pub index: u32,
    pub terminal: NodeId,
    pub reward: f64,
}

/// Everything a finished search hands back.
#[derive(Debug)]
pub struct SearchOutcome {
    /// One snapshot per distinct terminal, in discovery order.
    pub trajectories: Vec<Trajectory>,
    pub tree: ReasoningTree,
    pub rollouts: Vec<RolloutRecord>,
    /// Rollouts abandoned on recoverable failures.
    pub failed_rollouts: u32,
}

/// Runs `select -> expand -> simulate -> score -> backpropagate` for the
/// configured number of rollouts and snapshots one trajectory per distinct
/// terminal reached.
pub fn run_search(
    question: &str,
    config: &SearchConfig,
    session: &BackendSession<'_>,
    registry: &TemplateRegistry,
) -> Result<SearchOutcome, SearchError> {
    config.validate()?;
    let mut engine = Engine {
        tree: ReasoningTree::new(question, config.max_depth, config.uct_c, config.rng_seed),
        config,
        session,
        registry,
        rollout_rng: seeded_rng(derive_seed(&[config.rng_seed, fnv1a(b"rollout-policy")])),
    };
    engine.run()
}

struct Engine<'a> {
    tree: ReasoningTree,
    config: &'a SearchConfig,
    session: &'a BackendSession<'a>,
    registry: &'a TemplateRegistry,
    rollout_rng: ChaCha8Rng,
}

impl Engine<'_> {
    fn run(&mut self) -> Result<SearchOutcome, SearchError> {
        let mut rollouts = Vec::new();
        let mut discovered: Vec<NodeId> = Vec::new();
        let mut failed = 0u32;

        for index in 0..self.config.num_rollouts {
            match self.rollout() {
                Ok(terminal) => {
                    let reward = self.terminal_reward(terminal)?;
                    self.tree.backpropagate(terminal, reward)?;
                    if !discovered.contains(&terminal) {
                        discovered.push(terminal);
                    }
                    rollouts.push(RolloutRecord { index, terminal, reward });
                }
                Err(err) if err_is_fatal(&err) => return Err(err),
                Err(SearchError::Exhausted) => {
                    failed += self.config.num_rollouts - index;
                    break;
                }
                Err(_) => failed += 1,
            }
        }

        let mut trajectories = Vec::with_capacity(discovered.len());
        for id in &discovered {
            let mut traj = self.tree.trajectory_of(*id)?;
            if self.config.reward_mode == RewardMode::MeanPerVisit {
                let node = self.tree.get(*id)?;
                traj.reward = if node.visit_count > 0 {
                    node.q_value / node.visit_count as f64
                } else {
                    0.0
                };
            }
            trajectories.push(traj);
        }
        if self.config.confidence_mode == ConfidenceMode::Pooled {
            pool_confidences(&mut trajectories, &rollouts, &self.tree);
        }
        Ok(SearchOutcome { trajectories, tree: self.tree.clone(), rollouts, failed_rollouts: failed })
    }

    /// One search iteration down to a terminal node.
    fn rollout(&mut self) -> Result<NodeId, SearchError> {
        let leaf = self.select()?;
        let leaf_node = self.tree.get(leaf)?;
        if leaf_node.terminal {
            return Ok(leaf);
        }
        self.expand(leaf)?;
        // Continue through the lowest-ordinal unvisited live child, falling
        // back to the first live child when everything has been visited.
        let children = self.tree.get(leaf)?.children.clone();
        let live = |c: &NodeId| self.tree.get(*c).map(|n| !n.dead).unwrap_or(false);
        let unvisited = |c: &NodeId| self.tree.get(*c).map(|n| n.visit_count == 0).unwrap_or(false);
        let next = children
            .iter()
            .copied()
            .find(|c| live(c) && unvisited(c))
            .or_else(|| children.iter().copied().find(live));
        let Some(child) = next else {
            self.tree.get_mut(leaf)?.dead = true;
            return Err(SearchError::RolloutStalled(0));
        };
        if self.tree.get(child)?.terminal {
            return Ok(child);
        }
        self.simulate(child)
    }

    /// Descends from the root by UCT among live children, stopping at a
    /// terminal, the depth cap, or a node with unexpanded actions remaining.
    /// Unvisited children carry the maximal-priority sentinel; ties resolve
    /// to the lowest ordinal. Dead branches are skipped, and nodes with no
    /// live children left are marked dead so the walk restarts above them.
    fn select(&mut self) -> Result<NodeId, SearchError> {
        let budget = self.tree.len() + 1;
        'restart: for _ in 0..budget {
            let mut current = self.tree.root_id();
            loop {
                let node = self.tree.get(current)?;
                if node.terminal || node.depth >= self.tree.max_depth() || !node.expanded {
                    return Ok(current);
                }
                let parent_visits = node.visit_count;
                let mut best: Option<(NodeId, f64)> = None;
                for &child_id in &node.children {
                    let child = self.tree.get(child_id)?;
                    if child.dead {
                        continue;
                    }
                    let score = uct_score(child, parent_visits, self.tree.uct_c());
                    match best {
                        Some((_, best_score)) if score <= best_score => {}
                        _ => best = Some((child_id, score)),
                    }
                }
                match best {
                    Some((child_id, _)) => current = child_id,
                    None => {
                        self.tree.get_mut(current)?.dead = true;
                        if current == self.tree.root_id() {
                            return Err(SearchError::Exhausted);
                        }
                        continue 'restart;
                    }
                }
            }
        }
        Err(SearchError::Exhausted)
    }

    /// Expands every legal action at `node` that still has branch-cap
    /// capacity: one batched completion of `cap` samples per action, parsed,
    /// deduplicated, and attached as children. Identical non-terminal samples
    /// collapse into one child; terminal samples are kept individually so
    /// answer multiplicity survives into voting.
    fn expand(&mut self, node_id: NodeId) -> Result<Vec<NodeId>, SearchError> {
        let node = self.tree.get(node_id)?;
        let depth = node.depth;
        let max_depth = self.tree.max_depth();
        let mut actions = legal_actions(node, &self.config.action_config, max_depth);
        if depth + 1 == max_depth {
            // Children will sit at the depth cap: only actions that can
            // reach an answer on their own are worth sampling.
            actions.retain(|a| a.terminal_capable());
        }
        let steps = self.tree.steps_to(node_id)?;
        let question = self.tree.question().to_string();

        let mut created = Vec::new();
        for action in actions {
            let cap = self.config.action_config.branch_cap(action);
            let existing = self.tree.children_under(node_id, action)?;
            if existing >= cap {
                continue;
            }
            let prompt = render_prompt(action, &question, &steps, self.registry)?;
            let response = self.session.complete(
                prompt.text,
                cap as u32,
                self.config.action_config.temperature(action),
                self.config.max_tokens,
                prompt.stop_sequences,
            )?;

            let mut seen: Vec<String> = {
                let node = self.tree.get(node_id)?;
                node.children
                    .iter()
                    .filter_map(|c| self.tree.get(*c).ok())
                    .filter(|c| c.action == Some(action) && !c.terminal)
                    .map(|c| normalize_step_text(&c.step_text))
                    .collect()
            };
            for sample in &response.samples {
                if self.tree.children_under(node_id, action)? >= cap {
                    break;
                }
                let Ok(parsed) = parse_action_output(action, sample) else {
                    continue; // dropped sample, never fatal
                };
                let Some(step) = parsed.into_iter().next() else {
                    continue;
                };
                let answer = if step.terminal {
                    match extract_answer(&step.text, self.config.answer_kind) {
                        Some(a) => Some(a),
                        None => continue,
                    }
                } else {
                    let key = normalize_step_text(&step.text);
                    if seen.contains(&key) {
                        continue;
                    }
                    seen.push(key);
                    None
                };
                let child = self.tree.add_child(node_id, action, step.text, step.terminal)?;
                if let Some(answer) = answer {
                    self.tree.set_answer(child, answer)?;
                }
                if !step.terminal && depth + 1 >= max_depth {
                    self.force_terminalize(child)?;
                }
                if !self.tree.get(child)?.dead {
                    created.push(child);
                }
            }
        }
        let node = self.tree.get_mut(node_id)?;
        node.expanded = true;
        if created.is_empty() && node.children.is_empty() {
            node.dead = true;
        }
        Ok(created)
    }

    /// Default rollout policy: a uniformly random legal action with a single
    /// sample per step, until a terminal node or the depth cap. When the
    /// sampled step duplicates an existing equivalent child, or the action's
    /// branch cap is already full, the walk follows an existing child
    /// instead of adding one.
    fn simulate(&mut self, from: NodeId) -> Result<NodeId, SearchError> {
        let mut current = from;
        let mut stalls = 0usize;
        let stall_budget = self.config.max_depth;
        let stall = |stalls: &mut usize| -> Result<(), SearchError> {
            *stalls += 1;
            if *stalls >= stall_budget {
                Err(SearchError::RolloutStalled(*stalls))
            } else {
                Ok(())
            }
        };
        loop {
            let node = self.tree.get(current)?;
            if node.terminal {
                return Ok(current);
            }
            let depth = node.depth;
            let max_depth = self.tree.max_depth();
            if depth >= max_depth {
                // Non-terminal at the cap: force-termination failed earlier.
                self.tree.get_mut(current)?.dead = true;
                return Err(SearchError::RolloutStalled(stalls));
            }
            let mut actions = legal_actions(node, &self.config.action_config, max_depth);
            if depth + 1 == max_depth {
                actions.retain(|a| a.terminal_capable());
            }
            if actions.is_empty() {
                self.tree.get_mut(current)?.dead = true;
                return Err(SearchError::RolloutStalled(stalls));
            }
            let action = *actions.choose(&mut self.rollout_rng).expect("non-empty");
            let steps = self.tree.steps_to(current)?;
            let question = self.tree.question().to_string();
            let prompt = render_prompt(action, &question, &steps, self.registry)?;
            let response = self.session.complete(
                prompt.text,
                1,
                self.config.action_config.temperature(action),
                self.config.max_tokens,
                prompt.stop_sequences,
            )?;
            let parsed = response
                .samples
                .first()
                .and_then(|s| parse_action_output(action, s).ok())
                .and_then(|steps| steps.into_iter().next());
            let Some(step) = parsed else {
                stall(&mut stalls)?;
                continue;
            };

            // Follow an equivalent existing child rather than duplicating it.
            let key = normalize_step_text(&step.text);
            let siblings: Vec<NodeId> = self
                .tree
                .get(current)?
                .children
                .iter()
                .copied()
                .filter(|c| {
                    self.tree
                        .get(*c)
                        .map(|n| n.action == Some(action) && !n.dead)
                        .unwrap_or(false)
                })
                .collect();
            let equivalent = siblings.iter().copied().find(|c| {
                self.tree
                    .get(*c)
                    .map(|n| !n.terminal && normalize_step_text(&n.step_text) == key)
                    .unwrap_or(false)
            });
            if let Some(next) = equivalent {
                stalls = 0;
                current = next;
                continue;
            }
            if self.tree.children_under(current, action)?
                >= self.config.action_config.branch_cap(action)
            {
                // Cap already full: continue through one of the existing
                // children instead.
                match siblings.choose(&mut self.rollout_rng) {
                    Some(&next) => {
                        stalls = 0;
                        current = next;
                    }
                    None => stall(&mut stalls)?,
                }
                continue;
            }

            let answer = if step.terminal {
                match extract_answer(&step.text, self.config.answer_kind) {
                    Some(a) => Some(a),
                    None => {
                        stall(&mut stalls)?;
                        continue;
                    }
                }
            } else {
                None
            };
            let child = self.tree.add_child(current, action, step.text.clone(), step.terminal)?;
            if let Some(answer) = answer {
                self.tree.set_answer(child, answer)?;
            }
            if !step.terminal && depth + 1 >= max_depth {
                self.force_terminalize(child)?;
                if self.tree.get(child)?.dead {
                    stall(&mut stalls)?;
                    continue;
                }
            }
            stalls = 0;
            current = child;
        }
    }

    /// Gives a non-terminal node at the depth cap an answer by requesting one
    /// remaining-steps completion from its state. Failure marks it dead.
    fn force_terminalize(&mut self, node_id: NodeId) -> Result<(), SearchError> {
        let steps = self.tree.steps_to(node_id)?;
        let question = self.tree.question().to_string();
        let prompt = render_prompt(ActionKind::RemainingSteps, &question, &steps, self.registry)?;
        let response = self.session.complete(
            prompt.text,
            1,
            self.config.action_config.temperature(ActionKind::RemainingSteps),
            self.config.max_tokens,
            prompt.stop_sequences,
        )?;
        let completion = response
            .samples
            .first()
            .and_then(|s| parse_action_output(ActionKind::RemainingSteps, s).ok())
            .and_then(|steps| steps.into_iter().next())
            .filter(|s| s.terminal);
        match completion {
            Some(step) => match extract_answer(&step.text, self.config.answer_kind) {
                Some(answer) => self.tree.force_terminal(node_id, &step.text, answer)?,
                None => self.tree.get_mut(node_id)?.dead = true,
            },
            None => self.tree.get_mut(node_id)?.dead = true,
        }
        Ok(())
    }

    /// Terminal reward: the fraction of k extra completions from the parent
    /// state (plus the terminal's own answer) agreeing with the terminal's
    /// answer. Computed once per terminal; revisits reuse the stored value.
    fn terminal_reward(&mut self, terminal: NodeId) -> Result<f64, SearchError> {
        if let Some(confidence) = self.tree.get(terminal)?.confidence {
            return Ok(confidence);
        }
        let node = self.tree.get(terminal)?;
        let answer = node.answer.clone().ok_or(TreeError::NotTerminal(terminal))?;
        let parent = node.parent.ok_or(TreeError::NotTerminal(terminal))?;
        let steps = self.tree.steps_to(parent)?;
        let question = self.tree.question().to_string();
        let prompt = render_prompt(ActionKind::RemainingSteps, &question, &steps, self.registry)?;
        let k = self.config.confidence_samples;
        let response = self.session.complete(
            prompt.text,
            k,
            self.config.action_config.confidence_temperature,
            self.config.max_tokens,
            prompt.stop_sequences,
        )?;
        let agreeing = response
            .samples
            .iter()
            .filter_map(|s| extract_answer(s, self.config.answer_kind))
            .filter(|a| crate::answers::answers_equal(a, &answer))
            .count();
        // The terminal's own answer is part of the vote; if every extra
        // sample is unparseable this degrades to 1/(k+1).
        let confidence = (1 + agreeing) as f64 / (k + 1) as f64;
        self.tree.set_confidence(terminal, confidence)?;
        Ok(confidence)
    }
}

fn err_is_fatal(err: &SearchError) -> bool {
    match err {
        SearchError::Backend(b) => b.is_fatal(),
        SearchError::Tree(_) => true,
        _ => false,
    }
}

/// Pooled confidence: every rollout's terminal answer enters one vote and
/// each trajectory is rescored by its answer's pooled fraction.
fn pool_confidences(trajectories: &mut [Trajectory], rollouts: &[RolloutRecord], tree: &ReasoningTree) {
    let answers: Vec<CanonicalAnswer> = rollouts
        .iter()
        .filter_map(|r| tree.get(r.terminal).ok())
        .filter_map(|n| n.answer.clone())
        .collect();
    if answers.is_empty() {
        return;
    }
    let Ok(vote) = majority_vote(&answers) else {
        return;
    };
    let total: usize = vote.tally.iter().map(|(_, c)| *c).sum();
    for traj in trajectories.iter_mut() {
        let share = vote
            .tally
            .iter()
            .find(|(a, _)| crate::answers::answers_equal(a, &traj.answer))
            .map(|(_, c)| *c as f64 / total as f64)
            .unwrap_or(0.0);
        traj.confidence = share;
    }
}
