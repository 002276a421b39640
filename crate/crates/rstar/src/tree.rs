//! The search tree: node statistics, UCT scoring, reward backpropagation,
//! and trajectory extraction.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{ActionKind, Step};
use crate::answers::CanonicalAnswer;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("action {action} is illegal under node {parent}")]
    IllegalAction { parent: NodeId, action: ActionKind },
    #[error("depth cap {max_depth} reached under node {parent}")]
    DepthExceeded { parent: NodeId, max_depth: usize },
    #[error("node {0} is terminal and cannot take children")]
    ParentTerminal(NodeId),
    #[error("node {0} is not terminal")]
    NotTerminal(NodeId),
}

/// Node identity: creation ordinal within one tree. The root is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One state in the search: a reasoning step with its accumulated statistics.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Action that produced this node; absent only at the root.
    pub action: Option<ActionKind>,
    pub step_text: String,
    pub depth: usize,
    /// Accumulated reward; starts at 0 for every unexplored node.
    pub q_value: f64,
    pub visit_count: u64,
    pub terminal: bool,
    pub answer: Option<CanonicalAnswer>,
    /// Agreement fraction of the terminal's answer among confidence samples.
    pub confidence: Option<f64>,
    pub children: Vec<NodeId>,
    /// Engine bookkeeping: whether this node's legal actions were expanded.
    pub expanded: bool,
    /// Engine bookkeeping: no live continuation exists below this node.
    pub dead: bool,
}

impl Node {
    fn fresh(id: NodeId, parent: Option<NodeId>, action: Option<ActionKind>, step_text: String, depth: usize) -> Self {
        Node {
            id,
            parent,
            action,
            step_text,
            depth,
            q_value: 0.0,
            visit_count: 0,
            terminal: false,
            answer: None,
            confidence: None,
            children: Vec::new(),
            expanded: false,
            dead: false,
        }
    }
}

/// UCT child-selection score. Unvisited nodes get the maximal-priority
/// sentinel so they are always explored first; ties resolve to the lowest
/// ordinal at the call site.
pub fn uct_score(node: &Node, parent_visits: u64, c: f64) -> f64 {
    if node.visit_count == 0 {
        return f64::INFINITY;
    }
    let n = node.visit_count as f64;
    let exploitation = node.q_value / n;
    let exploration = c * ((parent_visits as f64).ln() / n).sqrt();
    exploitation + exploration
}

/// Immutable snapshot of one root-to-terminal path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub steps: Vec<Step>,
    pub answer: CanonicalAnswer,
    /// Terminal node's accumulated reward at snapshot time.
    pub reward: f64,
    pub confidence: f64,
    pub terminal_node: NodeId,
    /// Set once the discriminator agrees with this trajectory.
    #[serde(default)]
    pub validated: bool,
}

impl Trajectory {
    pub fn final_score(&self) -> f64 {
        self.reward * self.confidence
    }
}

/// The MCTS state for one question.
#[derive(Debug, Clone)]
pub struct ReasoningTree {
    question: String,
    nodes: Vec<Node>,
    max_depth: usize,
    uct_c: f64,
    rng_seed: u64,
}

impl ReasoningTree {
    pub fn new(question: impl Into<String>, max_depth: usize, uct_c: f64, rng_seed: u64) -> Self {
        assert!(max_depth >= 1, "depth cap must be at least 1");
        let root = Node::fresh(NodeId(0), None, None, String::new(), 0);
        ReasoningTree { question: question.into(), nodes: vec![root], max_depth, uct_c, rng_seed }
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn uct_c(&self) -> f64 {
        self.uct_c
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn root_id(&self) -> NodeId {
        NodeId(0)
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a tree always has its root
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn get(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id.0 as usize).ok_or(TreeError::UnknownNode(id))
    }

    pub fn get_mut(&mut self, id: NodeId) -> Result<&mut Node, TreeError> {
        self.nodes.get_mut(id.0 as usize).ok_or(TreeError::UnknownNode(id))
    }

    /// Appends a child under `parent`. Zero-initializes Q and N. Enforces the
    /// structural grammar: depth cap, no children under terminals, a4 only
    /// after a3, a5 only at the root.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        action: ActionKind,
        step_text: impl Into<String>,
        terminal: bool,
    ) -> Result<NodeId, TreeError> {
        let parent_node = self.get(parent)?;
        if parent_node.terminal {
            return Err(TreeError::ParentTerminal(parent));
        }
        if parent_node.depth + 1 > self.max_depth {
            return Err(TreeError::DepthExceeded { parent, max_depth: self.max_depth });
        }
        let ordering_ok = match action {
            ActionKind::ReanswerSubQuestion => parent_node.action == Some(ActionKind::SubQuestion),
            ActionKind::RephraseQuestion => parent_node.parent.is_none(),
            _ => true,
        };
        if !ordering_ok {
            return Err(TreeError::IllegalAction { parent, action });
        }
        let depth = parent_node.depth + 1;
        let id = NodeId(self.nodes.len() as u32);
        let mut node = Node::fresh(id, Some(parent), Some(action), step_text.into(), depth);
        node.terminal = terminal;
        self.nodes.push(node);
        self.nodes[parent.0 as usize].children.push(id);
        Ok(id)
    }

    pub fn set_answer(&mut self, id: NodeId, answer: CanonicalAnswer) -> Result<(), TreeError> {
        self.get_mut(id)?.answer = Some(answer);
        Ok(())
    }

    pub fn set_confidence(&mut self, id: NodeId, confidence: f64) -> Result<(), TreeError> {
        self.get_mut(id)?.confidence = Some(confidence);
        Ok(())
    }

    /// Converts a childless non-terminal node into a terminal by appending
    /// the completion that finished it and attaching the extracted answer.
    pub fn force_terminal(
        &mut self,
        id: NodeId,
        completion: &str,
        answer: CanonicalAnswer,
    ) -> Result<(), TreeError> {
        let node = self.get_mut(id)?;
        debug_assert!(node.children.is_empty(), "terminals must stay leaves");
        if !completion.is_empty() {
            node.step_text.push('\n');
            node.step_text.push_str(completion);
        }
        node.terminal = true;
        node.answer = Some(answer);
        Ok(())
    }

    /// Root-to-node path, inclusive on both ends.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = Vec::new();
        let mut cursor = Some(self.get(id)?.id);
        while let Some(cur) = cursor {
            path.push(cur);
            cursor = self.nodes[cur.0 as usize].parent;
        }
        path.reverse();
        Ok(path)
    }

    /// The (action, step text) sequence from the root down to `id`.
    pub fn steps_to(&self, id: NodeId) -> Result<Vec<Step>, TreeError> {
        let path = self.path_to(id)?;
        Ok(path
            .into_iter()
            .skip(1)
            .map(|nid| {
                let n = &self.nodes[nid.0 as usize];
                Step::new(n.action.expect("non-root node has an action"), n.step_text.clone())
            })
            .collect())
    }

    /// The question the subtree at `id` reasons about: the latest rephrasing
    /// on the path if any, otherwise the original question.
    pub fn working_question(&self, id: NodeId) -> Result<&str, TreeError> {
        let path = self.path_to(id)?;
        for nid in path.into_iter().rev() {
            let n = &self.nodes[nid.0 as usize];
            if n.action == Some(ActionKind::RephraseQuestion) {
                return Ok(&n.step_text);
            }
        }
        Ok(&self.question)
    }

    /// Number of children created under `parent` by `action`.
    pub fn children_under(&self, parent: NodeId, action: ActionKind) -> Result<usize, TreeError> {
        let p = self.get(parent)?;
        Ok(p.children
            .iter()
            .filter(|c| self.nodes[c.0 as usize].action == Some(action))
            .count())
    }

    /// Snapshots the root-to-terminal path as an immutable trajectory, with
    /// reward read from the terminal's accumulated Q at call time.
    pub fn trajectory_of(&self, terminal: NodeId) -> Result<Trajectory, TreeError> {
        let node = self.get(terminal)?;
        if !node.terminal {
            return Err(TreeError::NotTerminal(terminal));
        }
        let answer = node.answer.clone().ok_or(TreeError::NotTerminal(terminal))?;
        Ok(Trajectory {
            question: self.question.clone(),
            steps: self.steps_to(terminal)?,
            answer,
            reward: node.q_value,
            confidence: node.confidence.unwrap_or(0.0),
            terminal_node: terminal,
            validated: false,
        })
    }

    /// Adds `reward` to Q and bumps N for every node on the root-to-terminal
    /// path. The root is included for visit counting; its Q is never read.
    pub fn backpropagate(&mut self, terminal: NodeId, reward: f64) -> Result<(), TreeError> {
        if !self.get(terminal)?.terminal {
            return Err(TreeError::NotTerminal(terminal));
        }
        debug_assert!((0.0..=1.0).contains(&reward), "terminal rewards are vote fractions");
        for id in self.path_to(terminal)? {
            let node = &mut self.nodes[id.0 as usize];
            node.q_value += reward;
            node.visit_count += 1;
        }
        Ok(())
    }

    /// One JSON object per node, for offline inspection.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            id: NodeId,
            parent: Option<NodeId>,
            action: Option<ActionKind>,
            depth: usize,
            q: f64,
            n: u64,
            terminal: bool,
            answer: Option<&'a CanonicalAnswer>,
        }
        for node in &self.nodes {
            let row = Row {
                id: node.id,
                parent: node.parent,
                action: node.action,
                depth: node.depth,
                q: node.q_value,
                n: node.visit_count,
                terminal: node.terminal,
                answer: node.answer.as_ref(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
