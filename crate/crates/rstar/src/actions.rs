//! The five-action reasoning grammar: ordering constraints, branching caps,
//! prompt rendering from the shipped few-shot templates, and parsing of
//! completions back into reasoning steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::Node;

/// Marker that makes a step terminal when it appears in A1/A2/A4 output.
pub const FINAL_ANSWER_MARKER: &str = "The answer is";
/// Sub-question prefix that makes an A3 step terminal.
pub const TERMINAL_SUBQUESTION_PREFIX: &str = "Now we can answer the question";

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("re-answer requires a preceding sub-question step")]
    MissingSubQuestion,
    #[error("no template registered for action {0}")]
    TemplateNotFound(ActionKind),
    #[error("could not extract a step from {0} output")]
    UnparseableOutput(ActionKind),
    #[error("question rephrasing is only legal at the root (no prior steps)")]
    RephraseAfterSteps,
    #[error("invalid action configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed template: {0}")]
    BadTemplate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The closed five-action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionKind {
    /// a1: propose one further reasoning step.
    OneStepThought,
    /// a2: propose all remaining steps up to the final answer.
    RemainingSteps,
    /// a3: propose the next sub-question together with its answer.
    SubQuestion,
    /// a4: re-answer the most recent sub-question with few-shot CoT.
    ReanswerSubQuestion,
    /// a5: rephrase the question into an explicit list of conditions.
    RephraseQuestion,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::OneStepThought,
        ActionKind::RemainingSteps,
        ActionKind::SubQuestion,
        ActionKind::ReanswerSubQuestion,
        ActionKind::RephraseQuestion,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            ActionKind::OneStepThought => "a1",
            ActionKind::RemainingSteps => "a2",
            ActionKind::SubQuestion => "a3",
            ActionKind::ReanswerSubQuestion => "a4",
            ActionKind::RephraseQuestion => "a5",
        }
    }

    /// Actions that can produce a node carrying a final answer on their own.
    /// A1 counts because a one-step completion may reach the answer marker
    /// and is then promoted to terminal.
    pub fn terminal_capable(&self) -> bool {
        matches!(
            self,
            ActionKind::OneStepThought | ActionKind::RemainingSteps | ActionKind::SubQuestion
        )
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ActionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a1" => Ok(ActionKind::OneStepThought),
            "a2" => Ok(ActionKind::RemainingSteps),
            "a3" => Ok(ActionKind::SubQuestion),
            "a4" => Ok(ActionKind::ReanswerSubQuestion),
            "a5" => Ok(ActionKind::RephraseQuestion),
            other => Err(format!("unknown action {other:?} (expected a1..a5)")),
        }
    }
}

impl Serialize for ActionKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for ActionKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One reasoning step: the action that produced it plus its text.
///
/// Text conventions per action: a1 stores the step content without its
/// `Step k:` prefix (numbering is reapplied at render time); a3 stores the
/// sub-question on the first line and the sub-answer on the following lines;
/// a5 stores the full rephrased question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub action: ActionKind,
    pub text: String,
}

impl Step {
    pub fn new(action: ActionKind, text: impl Into<String>) -> Self {
        Step { action, text: text.into() }
    }
}

/// First line of an a3 step: the sub-question itself.
pub fn sub_question_of(step_text: &str) -> &str {
    step_text.lines().next().unwrap_or("").trim()
}

/// Everything after the first line of an a3 step: the sub-answer.
pub fn sub_answer_of(step_text: &str) -> &str {
    match step_text.split_once('\n') {
        Some((_, rest)) => rest.trim(),
        None => "",
    }
}

/// Enabled actions, per-action branching caps, and sampling temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionConfig {
    pub enabled: BTreeSet<ActionKind>,
    branch_caps: BTreeMap<ActionKind, usize>,
    temperatures: BTreeMap<ActionKind, f64>,
    /// Temperature for the extra completions drawn when scoring a terminal.
    pub confidence_temperature: f64,
}

pub const DEFAULT_EXPANSION_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_CONFIDENCE_TEMPERATURE: f64 = 1.0;

impl Default for ActionConfig {
    fn default() -> Self {
        let mut branch_caps = BTreeMap::new();
        branch_caps.insert(ActionKind::OneStepThought, 5);
        branch_caps.insert(ActionKind::SubQuestion, 5);
        ActionConfig {
            enabled: ActionKind::ALL.into_iter().collect(),
            branch_caps,
            temperatures: BTreeMap::new(),
            confidence_temperature: DEFAULT_CONFIDENCE_TEMPERATURE,
        }
    }
}

impl ActionConfig {
    pub fn with_actions<I: IntoIterator<Item = ActionKind>>(actions: I) -> Self {
        ActionConfig { enabled: actions.into_iter().collect(), ..ActionConfig::default() }
    }

    pub fn branch_cap(&self, action: ActionKind) -> usize {
        self.branch_caps.get(&action).copied().unwrap_or(1)
    }

    pub fn set_branch_cap(&mut self, action: ActionKind, cap: usize) {
        self.branch_caps.insert(action, cap.max(1));
    }

    pub fn temperature(&self, action: ActionKind) -> f64 {
        self.temperatures.get(&action).copied().unwrap_or(DEFAULT_EXPANSION_TEMPERATURE)
    }

    pub fn set_temperature(&mut self, action: ActionKind, t: f64) {
        self.temperatures.insert(action, t.max(0.0));
    }

    /// A usable configuration needs at least one action that can reach a
    /// final answer on its own; a4/a5 alone cannot.
    pub fn validate(&self) -> Result<(), ActionError> {
        if self.enabled.is_empty() {
            return Err(ActionError::InvalidConfig("no actions enabled".into()));
        }
        if !self.enabled.iter().any(|a| a.terminal_capable()) {
            return Err(ActionError::InvalidConfig(
                "at least one terminal-capable action (a1, a2 or a3) must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Enabled actions minus ordering violations for the given node: a5 only at
/// the root, a4 only directly after a3, nothing at terminals or at the depth
/// cap. Returned in canonical a1..a5 order.
pub fn legal_actions(node: &Node, config: &ActionConfig, max_depth: usize) -> Vec<ActionKind> {
    if node.terminal || node.depth >= max_depth {
        return Vec::new();
    }
    ActionKind::ALL
        .into_iter()
        .filter(|a| config.enabled.contains(a))
        .filter(|a| match a {
            ActionKind::RephraseQuestion => node.parent.is_none(),
            ActionKind::ReanswerSubQuestion => node.action == Some(ActionKind::SubQuestion),
            _ => true,
        })
        .collect()
}

/// How accumulated steps are laid out inside a prompt continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceStyle {
    /// Instruction-style response block (a1/a2/a4 prompts, discriminator).
    Instruct,
    /// Numbered sub-question blocks under the live question (a3 prompts).
    Decomposition,
}

/// Renders accumulated steps as prompt-continuation text. Rephrasing steps
/// never appear here: their text replaces the working question instead.
pub fn render_trace(steps: &[Step], style: TraceStyle, live_ordinal: usize) -> String {
    let mut lines: Vec<String> = Vec::new();
    let mut thought_no = 0usize;
    let mut subq_no = 0usize;
    for step in steps {
        match step.action {
            ActionKind::RephraseQuestion => {}
            ActionKind::OneStepThought => {
                thought_no += 1;
                lines.push(format!("Step {}: {}", thought_no, step.text));
            }
            ActionKind::RemainingSteps | ActionKind::ReanswerSubQuestion => {
                lines.push(step.text.clone());
            }
            ActionKind::SubQuestion => match style {
                TraceStyle::Decomposition => {
                    subq_no += 1;
                    lines.push(format!(
                        "Question {}.{}: {}",
                        live_ordinal,
                        subq_no,
                        sub_question_of(&step.text)
                    ));
                    lines.push(format!(
                        "Answer {}.{}: {}",
                        live_ordinal,
                        subq_no,
                        sub_answer_of(&step.text)
                    ));
                }
                TraceStyle::Instruct => {
                    lines.push(sub_answer_of(&step.text).to_string());
                }
            },
        }
    }
    lines.join("\n")
}

/// The question the given steps were generated under: the latest rephrasing
/// if one occurred, otherwise the original.
pub fn working_question<'a>(question: &'a str, steps: &'a [Step]) -> &'a str {
    steps
        .iter()
        .rev()
        .find(|s| s.action == ActionKind::RephraseQuestion)
        .map(|s| s.text.as_str())
        .unwrap_or(question)
}

/// A few-shot prompt template for one action. Rendering substitutes the live
/// question and accumulated steps into the raw body, so identical inputs
/// always produce byte-identical prompts.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub action: ActionKind,
    body: String,
    /// Instructional text preceding the first exemplar (may be empty).
    pub preamble: String,
    pub fewshot_examples: Vec<(String, String)>,
    pub stop_sequences: Vec<String>,
    /// Ordinal of the live question in decomposition templates.
    pub live_ordinal: usize,
}

impl PromptTemplate {
    pub fn from_body(action: ActionKind, body: &str) -> Result<Self, ActionError> {
        if !body.contains("{question}") {
            return Err(ActionError::BadTemplate(format!(
                "{action} template has no {{question}} placeholder"
            )));
        }
        let (preamble, fewshot_examples, live_ordinal) = split_template(action, body);
        let stop_sequences = default_stop_sequences(action, live_ordinal);
        Ok(PromptTemplate {
            action,
            body: body.to_string(),
            preamble,
            fewshot_examples,
            stop_sequences,
            live_ordinal,
        })
    }

    fn render(&self, question: &str, steps_block: &str) -> String {
        self.body.replace("{steps}", steps_block).replace("{question}", question)
    }
}

fn default_stop_sequences(action: ActionKind, live_ordinal: usize) -> Vec<String> {
    match action {
        ActionKind::SubQuestion => {
            vec![format!("\nQuestion {}:", live_ordinal + 1), "### Instruction".to_string()]
        }
        ActionKind::RephraseQuestion => vec!["\nOriginal Question:".to_string()],
        _ => vec!["### Instruction".to_string()],
    }
}

/// Best-effort split of a template body into preamble and exemplar pairs.
/// Used for introspection; rendering always works off the raw body.
fn split_template(action: ActionKind, body: &str) -> (String, Vec<(String, String)>, usize) {
    match action {
        ActionKind::OneStepThought | ActionKind::RemainingSteps | ActionKind::ReanswerSubQuestion => {
            let mut pairs = Vec::new();
            for chunk in body.split("### Instruction:\n").skip(1) {
                if let Some((q, rest)) = chunk.split_once("\n\n### Response:") {
                    if q.contains("{question}") {
                        continue;
                    }
                    let resp = rest.split("\n\n### Instruction:").next().unwrap_or("");
                    pairs.push((q.trim().to_string(), resp.trim().to_string()));
                }
            }
            (String::new(), pairs, 0)
        }
        ActionKind::SubQuestion => {
            let top_q = top_level_question_re();
            let mut pairs = Vec::new();
            let mut preamble = String::new();
            let mut last: Option<(usize, usize)> = None; // (ordinal, body start)
            let mut spans: Vec<(usize, usize, usize)> = Vec::new();
            for m in top_q.captures_iter(body) {
                let whole = m.get(0).unwrap();
                let ordinal: usize = m[1].parse().unwrap_or(0);
                if let Some((prev_ord, prev_start)) = last.take() {
                    spans.push((prev_ord, prev_start, whole.start()));
                }
                last = Some((ordinal, whole.start()));
                if preamble.is_empty() {
                    preamble = body[..whole.start()].trim().to_string();
                }
            }
            let mut live_ordinal = 5;
            if let Some((ord, start)) = last {
                // The final block holds the live question placeholder.
                if body[start..].contains("{question}") {
                    live_ordinal = ord;
                } else {
                    spans.push((ord, start, body.len()));
                }
            }
            for (_, start, end) in spans {
                let block = body[start..end].trim();
                if let Some((q_line, rest)) = block.split_once('\n') {
                    let q = q_line.split_once(": ").map(|(_, q)| q).unwrap_or(q_line);
                    pairs.push((q.trim().to_string(), rest.trim().to_string()));
                }
            }
            (preamble, pairs, live_ordinal)
        }
        ActionKind::RephraseQuestion => {
            let mut pairs = Vec::new();
            let mut preamble = String::new();
            for (i, chunk) in body.split("Original Question: ").enumerate() {
                if i == 0 {
                    preamble = chunk.trim().to_string();
                    continue;
                }
                if chunk.contains("{question}") {
                    continue;
                }
                if let Some((q, rest)) = chunk.split_once("\nRephrased Question: ") {
                    pairs.push((q.trim().to_string(), rest.trim().to_string()));
                }
            }
            (preamble, pairs, 0)
        }
    }
}

fn top_level_question_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^Question (\d+): ").unwrap())
}

/// Registry of per-action templates. The defaults ship with the crate; a
/// directory of plain-text files (`a1.txt` .. `a5.txt`, `{question}` and
/// `{steps}` placeholders) can replace them. a4 falls back to the a2
/// few-shot CoT template unless a dedicated `a4.txt` is provided.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<ActionKind, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        let defaults = [
            (ActionKind::OneStepThought, include_str!("templates/a1.txt")),
            (ActionKind::RemainingSteps, include_str!("templates/a2.txt")),
            (ActionKind::SubQuestion, include_str!("templates/a3.txt")),
            (ActionKind::RephraseQuestion, include_str!("templates/a5.txt")),
        ];
        for (action, body) in defaults {
            templates.insert(action, PromptTemplate::from_body(action, body).expect("default template"));
        }
        TemplateRegistry { templates }
    }
}

impl TemplateRegistry {
    pub fn from_dir(dir: &Path) -> Result<Self, ActionError> {
        let mut templates = BTreeMap::new();
        for action in ActionKind::ALL {
            let path = dir.join(format!("{}.txt", action.token()));
            if !path.exists() {
                if action == ActionKind::ReanswerSubQuestion {
                    continue;
                }
                return Err(ActionError::BadTemplate(format!("missing template file {path:?}")));
            }
            let body = std::fs::read_to_string(&path)?;
            templates.insert(action, PromptTemplate::from_body(action, &body)?);
        }
        Ok(TemplateRegistry { templates })
    }

    pub fn get(&self, action: ActionKind) -> Result<&PromptTemplate, ActionError> {
        self.templates
            .get(&action)
            .or_else(|| {
                // a4 reuses the few-shot CoT template.
                (action == ActionKind::ReanswerSubQuestion)
                    .then(|| self.templates.get(&ActionKind::RemainingSteps))
                    .flatten()
            })
            .ok_or(ActionError::TemplateNotFound(action))
    }
}

/// A fully rendered prompt plus the stop sequences to request with it.
#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    pub stop_sequences: Vec<String>,
}

/// Renders the prompt for taking `action` from the state reached by
/// `prior_steps` under `question`. Rephrased questions replace the working
/// question for everything beneath them.
pub fn render_prompt(
    action: ActionKind,
    question: &str,
    prior_steps: &[Step],
    registry: &TemplateRegistry,
) -> Result<RenderedPrompt, ActionError> {
    let template = registry.get(action)?;
    let wq = working_question(question, prior_steps);
    let visible: Vec<Step> = prior_steps
        .iter()
        .filter(|s| s.action != ActionKind::RephraseQuestion)
        .cloned()
        .collect();

    let text = match action {
        ActionKind::RephraseQuestion => {
            if !prior_steps.is_empty() {
                return Err(ActionError::RephraseAfterSteps);
            }
            template.render(question, "")
        }
        ActionKind::OneStepThought | ActionKind::RemainingSteps => {
            let trace = render_trace(&visible, TraceStyle::Instruct, template.live_ordinal);
            let block = if trace.is_empty() { String::new() } else { format!("\n{trace}") };
            template.render(wq, &block)
        }
        ActionKind::SubQuestion => {
            let trace = render_trace(&visible, TraceStyle::Decomposition, template.live_ordinal);
            let block = if trace.is_empty() { String::new() } else { format!("\n{trace}") };
            template.render(wq, &block)
        }
        ActionKind::ReanswerSubQuestion => {
            let last = visible.last().ok_or(ActionError::MissingSubQuestion)?;
            if last.action != ActionKind::SubQuestion {
                return Err(ActionError::MissingSubQuestion);
            }
            let sub_question = sub_question_of(&last.text).to_string();
            let context = &visible[..visible.len() - 1];
            let trace = render_trace(context, TraceStyle::Instruct, template.live_ordinal);
            let block = if trace.is_empty() { String::new() } else { format!("\n{trace}") };
            template.render(&format!("{wq}\n{sub_question}"), &block)
        }
    };
    Ok(RenderedPrompt { text, stop_sequences: template.stop_sequences.clone() })
}

/// One step extracted from a completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedStep {
    pub text: String,
    pub terminal: bool,
}

fn step_prefix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Step\s+\d+\s*:\s*").unwrap())
}

fn sub_question_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Question\s+\d+(?:\.\d+)*\s*:\s*").unwrap())
}

fn sub_answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Answer\s+\d+(?:\.\d+)*\s*:\s*").unwrap())
}

fn truncate_at_stops<'a>(raw: &'a str, stops: &[String]) -> &'a str {
    let mut end = raw.len();
    for stop in stops {
        if let Some(at) = raw.find(stop.as_str()) {
            end = end.min(at);
        }
    }
    &raw[..end]
}

/// Parses a completion produced under `action` back into steps. A dropped
/// sample (`UnparseableOutput`) is recoverable for the caller, never fatal.
pub fn parse_action_output(action: ActionKind, raw: &str) -> Result<Vec<ParsedStep>, ActionError> {
    let template_stops = default_stop_sequences(action, 5);
    let raw = truncate_at_stops(raw, &template_stops);
    let unparseable = || ActionError::UnparseableOutput(action);

    match action {
        ActionKind::OneStepThought => {
            let m = step_prefix_re().find(raw).ok_or_else(unparseable)?;
            let rest = &raw[m.end()..];
            let content = match step_prefix_re().find(rest) {
                Some(next) => &rest[..next.start()],
                None => rest,
            };
            let text = content.trim().to_string();
            if text.is_empty() {
                return Err(unparseable());
            }
            // A one-step thought that already states the answer is promoted
            // to terminal.
            let terminal = text.contains(FINAL_ANSWER_MARKER);
            Ok(vec![ParsedStep { text, terminal }])
        }
        ActionKind::RemainingSteps | ActionKind::ReanswerSubQuestion => {
            let text = raw.trim().to_string();
            if text.is_empty() {
                return Err(unparseable());
            }
            let terminal = text.contains(FINAL_ANSWER_MARKER);
            Ok(vec![ParsedStep { text, terminal }])
        }
        ActionKind::SubQuestion => {
            let q = sub_question_re().find(raw).ok_or_else(unparseable)?;
            let after_q = &raw[q.end()..];
            let a = sub_answer_re().find(after_q).ok_or_else(unparseable)?;
            let sub_question = after_q[..a.start()].trim().to_string();
            let after_a = &after_q[a.end()..];
            let answer = match sub_question_re().find(after_a) {
                Some(next) => &after_a[..next.start()],
                None => after_a,
            };
            let answer = answer.trim().to_string();
            if sub_question.is_empty() || answer.is_empty() {
                return Err(unparseable());
            }
            let terminal = sub_question.starts_with(TERMINAL_SUBQUESTION_PREFIX);
            Ok(vec![ParsedStep { text: format!("{sub_question}\n{answer}"), terminal }])
        }
        ActionKind::RephraseQuestion => {
            let block = raw.trim();
            let block = block.split("\n\n").next().unwrap_or("").trim();
            if block.is_empty() {
                return Err(unparseable());
            }
            Ok(vec![ParsedStep { text: block.to_string(), terminal: false }])
        }
    }
}

/// Key used to deduplicate sampled steps: lowercase, whitespace collapsed.
pub fn normalize_step_text(text: &str) -> String {
    text.to_ascii_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::ReasoningTree;

    fn registry() -> TemplateRegistry {
        TemplateRegistry::default()
    }

    #[test]
    fn default_templates_carry_expected_exemplars() {
        let r = registry();
        assert_eq!(r.get(ActionKind::OneStepThought).unwrap().fewshot_examples.len(), 4);
        assert_eq!(r.get(ActionKind::RemainingSteps).unwrap().fewshot_examples.len(), 8);
        let a3 = r.get(ActionKind::SubQuestion).unwrap();
        assert_eq!(a3.fewshot_examples.len(), 4);
        assert_eq!(a3.live_ordinal, 5);
        assert!(a3.preamble.starts_with("Given a question, please decompose it into sub-questions."));
        assert_eq!(r.get(ActionKind::RephraseQuestion).unwrap().fewshot_examples.len(), 8);
    }

    #[test]
    fn a4_falls_back_to_a2_template() {
        let r = registry();
        let a4 = r.get(ActionKind::ReanswerSubQuestion).unwrap();
        assert_eq!(a4.action, ActionKind::RemainingSteps);
    }

    #[test]
    fn legal_actions_at_root_exclude_a4() {
        let tree = ReasoningTree::new("q", 5, 1.0, 0);
        let config = ActionConfig::default();
        let legal = legal_actions(tree.root(), &config, 5);
        assert_eq!(
            legal,
            vec![
                ActionKind::OneStepThought,
                ActionKind::RemainingSteps,
                ActionKind::SubQuestion,
                ActionKind::RephraseQuestion
            ]
        );
    }

    #[test]
    fn legal_actions_after_subquestion_include_a4() {
        let mut tree = ReasoningTree::new("q", 5, 1.0, 0);
        let id = tree
            .add_child(tree.root_id(), ActionKind::SubQuestion, "sub?\nans", false)
            .unwrap();
        let legal = legal_actions(tree.get(id).unwrap(), &ActionConfig::default(), 5);
        assert!(legal.contains(&ActionKind::ReanswerSubQuestion));
        assert!(!legal.contains(&ActionKind::RephraseQuestion));
    }

    #[test]
    fn legal_actions_empty_at_terminal_and_depth_cap() {
        let mut tree = ReasoningTree::new("q", 2, 1.0, 0);
        let t = tree
            .add_child(tree.root_id(), ActionKind::RemainingSteps, "The answer is: 3.", true)
            .unwrap();
        assert!(legal_actions(tree.get(t).unwrap(), &ActionConfig::default(), 2).is_empty());
        let mid = tree
            .add_child(tree.root_id(), ActionKind::OneStepThought, "half way", false)
            .unwrap();
        let deep = tree.add_child(mid, ActionKind::OneStepThought, "more", false).unwrap();
        assert!(legal_actions(tree.get(deep).unwrap(), &ActionConfig::default(), 2).is_empty());
    }

    #[test]
    fn config_validation_requires_terminal_capable_action() {
        assert!(ActionConfig::with_actions([ActionKind::RephraseQuestion]).validate().is_err());
        assert!(ActionConfig::with_actions([ActionKind::ReanswerSubQuestion]).validate().is_err());
        assert!(ActionConfig::with_actions([ActionKind::OneStepThought]).validate().is_ok());
        assert!(ActionConfig::with_actions([ActionKind::SubQuestion]).validate().is_ok());
        let empty = ActionConfig { enabled: BTreeSet::new(), ..ActionConfig::default() };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn render_is_referentially_transparent() {
        let steps = vec![Step::new(ActionKind::OneStepThought, "First move.")];
        let a = render_prompt(ActionKind::OneStepThought, "Q?", &steps, &registry()).unwrap();
        let b = render_prompt(ActionKind::OneStepThought, "Q?", &steps, &registry()).unwrap();
        assert_eq!(a.text, b.text);
        assert!(a.text.ends_with("Let's think step by step.\nStep 1: First move."));
    }

    #[test]
    fn render_a2_without_steps_ends_at_response_header() {
        let p = render_prompt(ActionKind::RemainingSteps, "Live question?", &[], &registry()).unwrap();
        assert!(p.text.ends_with("### Instruction:\nLive question?\n\n### Response:"));
        assert!(p.text.contains("Olivia had 23 dollars."));
    }

    #[test]
    fn render_a3_numbers_live_question_five() {
        let steps = vec![Step::new(ActionKind::SubQuestion, "How many joined?\nThey were 8. The answer is 8.")];
        let p = render_prompt(ActionKind::SubQuestion, "Live question?", &steps, &registry()).unwrap();
        assert!(p.text.ends_with(
            "Question 5: Live question?\nQuestion 5.1: How many joined?\nAnswer 5.1: They were 8. The answer is 8."
        ));
    }

    #[test]
    fn render_a5_with_steps_is_an_error() {
        let steps = vec![Step::new(ActionKind::OneStepThought, "x")];
        let err = render_prompt(ActionKind::RephraseQuestion, "Q?", &steps, &registry()).unwrap_err();
        assert!(matches!(err, ActionError::RephraseAfterSteps));
    }

    #[test]
    fn render_a4_requires_pending_subquestion() {
        let steps = vec![Step::new(ActionKind::OneStepThought, "x")];
        let err = render_prompt(ActionKind::ReanswerSubQuestion, "Q?", &steps, &registry()).unwrap_err();
        assert!(matches!(err, ActionError::MissingSubQuestion));

        let steps = vec![Step::new(ActionKind::SubQuestion, "How many apples?\nSeven. The answer is 7.")];
        let p = render_prompt(ActionKind::ReanswerSubQuestion, "Q?", &steps, &registry()).unwrap();
        assert!(p.text.contains("### Instruction:\nQ?\nHow many apples?\n\n### Response:"));
    }

    #[test]
    fn rephrased_question_replaces_working_question() {
        let steps = vec![
            Step::new(ActionKind::RephraseQuestion, "Given a list of conditions, please answer the question. Condition 1: x. Question: Q2?"),
            Step::new(ActionKind::OneStepThought, "First."),
        ];
        let p = render_prompt(ActionKind::RemainingSteps, "Q1?", &steps, &registry()).unwrap();
        assert!(p.text.contains("Question: Q2?"));
        assert!(!p.text.contains("### Instruction:\nQ1?"));
        // The rephrasing itself never shows up as a step.
        assert!(p.text.ends_with("### Response:\nStep 1: First."));
    }

    #[test]
    fn parse_a3_subquestion_pair() {
        let raw = "\nQuestion 5.1: How many fireflies joined?\nAnswer 5.1: 12 - 4 = 8 fireflies joined. The answer is 8.\nQuestion 5.2: trailing";
        let parsed = parse_action_output(ActionKind::SubQuestion, raw).unwrap();
        assert_eq!(parsed.len(), 1);
        assert!(!parsed[0].terminal);
        assert_eq!(sub_question_of(&parsed[0].text), "How many fireflies joined?");
        assert_eq!(sub_answer_of(&parsed[0].text), "12 - 4 = 8 fireflies joined. The answer is 8.");
    }

    #[test]
    fn parse_a3_terminal_form() {
        let raw = "\nQuestion 5.2: Now we can answer the question: How many remained?\nAnswer 5.2: There were 9 left. The answer is 9.";
        let parsed = parse_action_output(ActionKind::SubQuestion, raw).unwrap();
        assert!(parsed[0].terminal);
    }

    #[test]
    fn parse_empty_completion_is_unparseable() {
        for action in ActionKind::ALL {
            assert!(matches!(
                parse_action_output(action, "   \n "),
                Err(ActionError::UnparseableOutput(_))
            ));
        }
    }

    #[test]
    fn parse_a1_takes_first_step_and_strips_numbering() {
        let raw = "\nStep 3: Subtract 15 from 21.\nStep 4: The answer is 6.";
        let parsed = parse_action_output(ActionKind::OneStepThought, raw).unwrap();
        assert_eq!(parsed[0].text, "Subtract 15 from 21.");
        assert!(!parsed[0].terminal);
    }

    #[test]
    fn parse_a1_promotes_answer_to_terminal() {
        let raw = "\nStep 5: The answer is 6.";
        let parsed = parse_action_output(ActionKind::OneStepThought, raw).unwrap();
        assert!(parsed[0].terminal);
    }

    #[test]
    fn parse_a2_truncates_at_stop_sequence() {
        let raw = "Let's think step by step. 3 + 2 = 5. The answer is: 5.\n\n### Instruction:\nhallucinated";
        let parsed = parse_action_output(ActionKind::RemainingSteps, raw).unwrap();
        assert!(parsed[0].terminal);
        assert!(!parsed[0].text.contains("hallucinated"));
    }

    #[test]
    fn parse_a5_takes_first_block() {
        let raw = " Given a list of conditions, please answer the question. Condition 1: c. Question: q?\n\nextra";
        let parsed = parse_action_output(ActionKind::RephraseQuestion, raw).unwrap();
        assert!(parsed[0].text.starts_with("Given a list of conditions"));
        assert!(!parsed[0].terminal);
        assert!(!parsed[0].text.contains("extra"));
    }

    #[test]
    fn normalize_collapses_case_and_whitespace() {
        assert_eq!(normalize_step_text("  The  Answer\nis: 6 "), "the answer is: 6");
    }
}
