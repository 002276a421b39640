//! Deterministic synthetic oracle.
//!
//! Problems are integer update chains: an initial count followed by signed
//! changes. The oracle recognizes every rendered action template over such a
//! problem, reconstructs the claimed running state from the prompt, and emits
//! a correctly formatted next step. Each derivation step is correct with
//! probability `1 - error_rate`; otherwise the running value is perturbed by
//! a nonzero offset that never lands back on the true value, so an all-error
//! run can never reach the gold answer by accident. Derivations continuing
//! from an already-wrong claimed state err at twice the base rate (capped at
//! 1), which makes agreement sampling informative about prefix quality.
//!
//! Two further traits shape the dynamics. Within one completion, the i-th
//! derivation errs at `error_rate * CHAIN_DEGRADATION^i` (capped at 1): long
//! single completions degrade, focused single-step completions do not. And a
//! completion entering from an already-wrong claimed state notices the
//! inconsistency with probability one half and re-derives from the true
//! prefix, so completions from correct states are consistent while
//! completions from corrupted states waver.
//!
//! All randomness derives from (oracle seed, request ordinal, sample index,
//! prompt hash); arrival order never matters.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};
use crate::seed::{derive_seed, fnv1a, seeded_rng};

const SUBJECT: &str = "Pat";
const WRONG_STATE_MULTIPLIER: f64 = 3.0;
const CHAIN_DEGRADATION: f64 = 1.3;
/// Recheck rate for whole-chain completions (the model rereads the question).
const RECHECK_PROBABILITY: f64 = 0.5;
/// Recheck rate for focused single-step completions.
const STEP_RECHECK_PROBABILITY: f64 = 0.1;

/// An integer update-chain problem; the gold answer is fully determined by
/// the fields, and the rendered question round-trips to the same fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub entity: String,
    pub initial_value: i64,
    pub deltas: Vec<i64>,
}

impl SyntheticProblem {
    pub fn gold_answer(&self) -> i64 {
        self.initial_value + self.deltas.iter().sum::<i64>()
    }

    /// True running value after `k` changes.
    fn true_value_after(&self, k: usize) -> i64 {
        self.initial_value + self.deltas[..k].iter().sum::<i64>()
    }

    fn change_phrase(&self, delta: i64) -> String {
        let verb = if delta < 0 { "loses" } else { "gains" };
        format!("{SUBJECT} {verb} {} {}", delta.abs(), self.entity)
    }

    fn final_question_sentence(&self) -> String {
        format!("How many {} does {SUBJECT} have now?", self.entity)
    }

    pub fn question(&self) -> String {
        let mut q = format!("{SUBJECT} starts with {} {}.", self.initial_value, self.entity);
        for &d in &self.deltas {
            q.push_str(&format!(" Then {}.", self.change_phrase(d)));
        }
        q.push(' ');
        q.push_str(&self.final_question_sentence());
        q
    }

    /// The lossless conditions form emitted for rephrasing requests.
    pub fn rephrased_question(&self) -> String {
        let mut q = String::from("Given a list of conditions, please answer the question.");
        q.push_str(&format!(
            " Condition 1: {SUBJECT} starts with {} {}.",
            self.initial_value, self.entity
        ));
        for (i, &d) in self.deltas.iter().enumerate() {
            q.push_str(&format!(" Condition {}: {}.", i + 2, self.change_phrase(d)));
        }
        q.push_str(&format!(" Question: {}", self.final_question_sentence()));
        q
    }

    /// Recovers the problem from either question form.
    pub fn parse_question(text: &str) -> Option<SyntheticProblem> {
        let text = text.trim();
        let start = start_re().captures(text)?;
        let initial_value: i64 = start[1].parse().ok()?;
        let entity = start[2].to_string();
        let mut deltas = Vec::new();
        for cap in change_re().captures_iter(text) {
            let magnitude: i64 = cap[2].parse().ok()?;
            deltas.push(if &cap[1] == "loses" { -magnitude } else { magnitude });
        }
        if !final_re().is_match(text) {
            return None;
        }
        Some(SyntheticProblem { entity, initial_value, deltas })
    }
}

fn start_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"{SUBJECT} starts with (-?\d+) (\w+)\.")).unwrap())
}

fn change_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"(?:Then {SUBJECT}|Condition \d+: {SUBJECT}) (gains|loses) (\d+) \w+\.")).unwrap())
}

fn final_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"How many \w+ does {SUBJECT} have now\?")).unwrap())
}

fn state_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"{SUBJECT} has (-?\d+) \w+ after (\d+) changes\.")).unwrap())
}

fn step_number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Step (\d+):").unwrap())
}

fn numbered_subquestion_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Question (\d+)\.(\d+):").unwrap())
}

fn live_question_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^Question (\d+): (.*)$").unwrap())
}

fn reanswer_target_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^What is the number of \w+ after change (\d+)\?$").unwrap())
}

/// Fixed bank of seeded problems for datasets and fixtures.
pub struct SyntheticBank;

impl SyntheticBank {
    pub const ENTITIES: [&'static str; 10] = [
        "marbles", "apples", "coins", "pebbles", "stickers", "tokens", "beads", "shells",
        "acorns", "buttons",
    ];

    pub fn generate(seed: u64, count: usize) -> Vec<SyntheticProblem> {
        let mut rng = seeded_rng(derive_seed(&[seed, fnv1a(b"synthetic-bank")]));
        (0..count)
            .map(|_| {
                let entity = Self::ENTITIES.choose(&mut rng).unwrap().to_string();
                let initial_value = rng.gen_range(10..=60);
                let changes = rng.gen_range(2..=4);
                let deltas = (0..changes)
                    .map(|_| {
                        let magnitude = rng.gen_range(1..=9);
                        if rng.gen_bool(0.5) { magnitude } else { -magnitude }
                    })
                    .collect();
                SyntheticProblem { entity, initial_value, deltas }
            })
            .collect()
    }
}

/// Last claimed running state in a trace, plus the latest claim per change
/// index (needed when a sub-answer is re-derived).
#[derive(Debug, Default)]
struct TraceState {
    last: Option<(i64, usize)>,
    by_index: std::collections::HashMap<usize, i64>,
}

fn parse_trace_state(trace: &str) -> TraceState {
    let mut state = TraceState::default();
    for cap in state_re().captures_iter(trace) {
        let value: i64 = cap[1].parse().unwrap_or(0);
        let index: usize = cap[2].parse().unwrap_or(0);
        state.last = Some((value, index));
        state.by_index.insert(index, value);
    }
    state
}

enum PromptShape {
    OneStep { trace: String },
    Chain { trace: String },
    Decompose { trace: String, live_ordinal: usize },
    Reanswer { trace: String, target: usize },
    Rephrase,
}

/// The deterministic seeded oracle backend.
pub struct SyntheticOracle {
    error_rate: f64,
    seed: u64,
}

impl SyntheticOracle {
    pub fn new(error_rate: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&error_rate), "step error rate must be in [0,1]");
        SyntheticOracle { error_rate, seed }
    }

    pub fn error_rate(&self) -> f64 {
        self.error_rate
    }

    fn classify(prompt: &str) -> Result<(PromptShape, String), BackendError> {
        let unrecognized = |why: &str| BackendError::UnrecognizedPrompt(why.to_string());

        if prompt.contains("rephrase questions by splitting the question context into conditions") {
            let tail = prompt
                .rfind("Original Question: ")
                .map(|at| &prompt[at + "Original Question: ".len()..])
                .ok_or_else(|| unrecognized("rephrase prompt without a live question"))?;
            let question = tail.lines().next().unwrap_or("").trim().to_string();
            return Ok((PromptShape::Rephrase, question));
        }

        if prompt.contains("please decompose it into sub-questions") {
            let cap = live_question_re()
                .captures_iter(prompt)
                .last()
                .ok_or_else(|| unrecognized("decomposition prompt without a live question"))?;
            let live_ordinal: usize = cap[1].parse().unwrap_or(5);
            let question = cap[2].trim().to_string();
            let line_end = cap.get(0).unwrap().end();
            let trace = prompt[line_end..].to_string();
            return Ok((PromptShape::Decompose { trace, live_ordinal }, question));
        }

        // Instruction-style prompts: one further step or the remaining chain.
        let inst_at = prompt
            .rfind("### Instruction:\n")
            .ok_or_else(|| unrecognized("no instruction block"))?;
        let after_inst = &prompt[inst_at + "### Instruction:\n".len()..];
        let (instruction, _) = after_inst
            .split_once("\n\n### Response:")
            .ok_or_else(|| unrecognized("no response block"))?;
        let resp_at = prompt
            .rfind("### Response:")
            .ok_or_else(|| unrecognized("no response block"))?;
        let trace = prompt[resp_at + "### Response:".len()..].to_string();

        let mut lines = instruction.lines();
        let question = lines.next().unwrap_or("").trim().to_string();
        let rest: Vec<&str> = lines.collect();
        if let Some(last) = rest.last() {
            if let Some(cap) = reanswer_target_re().captures(last.trim()) {
                let target: usize = cap[1].parse().unwrap_or(1);
                return Ok((PromptShape::Reanswer { trace, target }, question));
            }
        }
        if prompt.contains("Step 1: Identify the initial number of trees.") {
            Ok((PromptShape::OneStep { trace }, question))
        } else {
            Ok((PromptShape::Chain { trace }, question))
        }
    }

    /// A single-step completion whose inherited claim is wrong notices it
    /// half the time and internally re-derives the prefix: mid-chain states
    /// jump back to the true line (the next derivation still errs normally),
    /// while a finished chain re-derives its final change with a fresh error
    /// draw. Never produces a free ride to the gold answer.
    fn maybe_recheck(
        &self,
        rng: &mut ChaCha8Rng,
        problem: &SyntheticProblem,
        value: i64,
        applied: usize,
    ) -> i64 {
        let total = problem.deltas.len();
        let applied = applied.min(total);
        if total == 0 || value == problem.true_value_after(applied) {
            return value;
        }
        if rng.gen::<f64>() >= STEP_RECHECK_PROBABILITY {
            return value;
        }
        if applied < total {
            problem.true_value_after(applied)
        } else {
            let true_prev = problem.true_value_after(total - 1);
            self.derive(rng, true_prev, true_prev, problem.deltas[total - 1], 0)
        }
    }

    /// One derivation: applies the next change to the claimed value, erring
    /// with the state- and position-dependent probability. An erroneous step
    /// never produces the true running value. `position` counts derivations
    /// already emitted within the same completion.
    fn derive(
        &self,
        rng: &mut ChaCha8Rng,
        claimed_prev: i64,
        true_prev: i64,
        delta: i64,
        position: usize,
    ) -> i64 {
        let raw = claimed_prev + delta;
        let true_next = true_prev + delta;
        let base = if claimed_prev == true_prev {
            self.error_rate
        } else {
            self.error_rate * WRONG_STATE_MULTIPLIER
        };
        let p_err = (base * CHAIN_DEGRADATION.powi(position as i32)).min(1.0);
        if p_err > 0.0 && rng.gen::<f64>() < p_err {
            loop {
                let offset = *[-2i64, -1, 1, 2].choose(rng).unwrap();
                if raw + offset != true_next {
                    return raw + offset;
                }
            }
        } else {
            raw
        }
    }

    fn generate_sample(&self, request: &CompletionRequest, sample_idx: u32) -> Result<String, BackendError> {
        // Temperature zero collapses every sample onto one stream.
        let idx = if request.temperature == 0.0 { 0 } else { sample_idx as u64 };
        let sample_seed = derive_seed(&[
            self.seed,
            request.request_ordinal,
            idx,
            fnv1a(request.prompt.as_bytes()),
        ]);
        let mut rng = seeded_rng(sample_seed);

        let (shape, question) = Self::classify(&request.prompt)?;
        let problem = SyntheticProblem::parse_question(&question).ok_or_else(|| {
            BackendError::UnrecognizedPrompt(format!("not a synthetic question: {question:?}"))
        })?;
        let total = problem.deltas.len();

        Ok(match shape {
            PromptShape::Rephrase => format!(" {}", problem.rephrased_question()),
            PromptShape::OneStep { trace } => {
                let state = parse_trace_state(&trace);
                let (value, applied) = state.last.unwrap_or((problem.initial_value, 0));
                let value = self.maybe_recheck(&mut rng, &problem, value, applied);
                let step_no = step_number_re()
                    .captures_iter(&trace)
                    .filter_map(|c| c[1].parse::<usize>().ok())
                    .max()
                    .unwrap_or(0)
                    + 1;
                if applied >= total {
                    format!("\nStep {step_no}: The answer is {value}.")
                } else {
                    let next = self.derive(
                        &mut rng,
                        value,
                        problem.true_value_after(applied),
                        problem.deltas[applied],
                        0,
                    );
                    format!(
                        "\nStep {step_no}: {}. {SUBJECT} has {next} {} after {} changes.",
                        problem.change_phrase(problem.deltas[applied]),
                        problem.entity,
                        applied + 1
                    )
                }
            }
            PromptShape::Chain { trace } => {
                let state = parse_trace_state(&trace);
                let (mut value, mut applied) = state.last.unwrap_or((problem.initial_value, 0));
                let mut text = String::from("\n");
                if !trace.contains("Let's think step by step.") {
                    text.push_str("Let's think step by step.");
                }
                // A completion entering from an inconsistent claimed state
                // notices it half the time and re-derives from the start.
                if value != problem.true_value_after(applied.min(total))
                    && rng.gen::<f64>() < RECHECK_PROBABILITY
                {
                    if !text.ends_with('\n') {
                        text.push(' ');
                    }
                    text.push_str("Let me recheck from the start.");
                    value = problem.initial_value;
                    applied = 0;
                }
                for (position, k) in (applied..total).enumerate() {
                    if !text.ends_with('\n') {
                        text.push(' ');
                    }
                    let next = self.derive(
                        &mut rng,
                        value,
                        problem.true_value_after(k),
                        problem.deltas[k],
                        position,
                    );
                    text.push_str(&format!(
                        "{}. {SUBJECT} has {next} {} after {} changes.",
                        problem.change_phrase(problem.deltas[k]),
                        problem.entity,
                        k + 1
                    ));
                    value = next;
                }
                if !text.ends_with('\n') {
                    text.push(' ');
                }
                text.push_str(&format!("The answer is: {value}."));
                text
            }
            PromptShape::Decompose { trace, live_ordinal } => {
                let state = parse_trace_state(&trace);
                let (value, applied) = state.last.unwrap_or((problem.initial_value, 0));
                let value = self.maybe_recheck(&mut rng, &problem, value, applied);
                let sub_no = numbered_subquestion_re()
                    .captures_iter(&trace)
                    .filter_map(|c| c[2].parse::<usize>().ok())
                    .max()
                    .unwrap_or(0)
                    + 1;
                if applied >= total {
                    format!(
                        "\nQuestion {live_ordinal}.{sub_no}: Now we can answer the question: {}\nAnswer {live_ordinal}.{sub_no}: {SUBJECT} has {value} {} after {total} changes. The answer is {value}.",
                        problem.final_question_sentence(),
                        problem.entity
                    )
                } else {
                    let next = self.derive(
                        &mut rng,
                        value,
                        problem.true_value_after(applied),
                        problem.deltas[applied],
                        0,
                    );
                    format!(
                        "\nQuestion {live_ordinal}.{sub_no}: What is the number of {} after change {}?\nAnswer {live_ordinal}.{sub_no}: {}. {SUBJECT} has {next} {} after {} changes. The answer is {next}.",
                        problem.entity,
                        applied + 1,
                        problem.change_phrase(problem.deltas[applied]),
                        problem.entity,
                        applied + 1
                    )
                }
            }
            PromptShape::Reanswer { trace, target } => {
                if target == 0 || target > total {
                    return Err(BackendError::UnrecognizedPrompt(format!(
                        "re-answer target {target} outside 1..={total}"
                    )));
                }
                let state = parse_trace_state(&trace);
                let prev_claim = if target == 1 {
                    problem.initial_value
                } else {
                    state
                        .by_index
                        .get(&(target - 1))
                        .copied()
                        .unwrap_or_else(|| problem.true_value_after(target - 1))
                };
                let true_prev = problem.true_value_after(target - 1);
                let prev_claim =
                    if prev_claim != true_prev && rng.gen::<f64>() < STEP_RECHECK_PROBABILITY {
                        true_prev
                    } else {
                        prev_claim
                    };
                let next = self.derive(
                    &mut rng,
                    prev_claim,
                    problem.true_value_after(target - 1),
                    problem.deltas[target - 1],
                    0,
                );
                let mut text = format!(
                    "\nLet's reconsider change {target}. {}. {SUBJECT} has {next} {} after {target} changes.",
                    problem.change_phrase(problem.deltas[target - 1]),
                    problem.entity
                );
                if target == total {
                    text.push_str(&format!(" The answer is: {next}."));
                }
                text
            }
        })
    }
}

impl CompletionBackend for SyntheticOracle {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let samples = (0..request.n)
            .map(|i| self.generate_sample(request, i))
            .collect::<Result<Vec<_>, _>>()?;
        let completion_tokens = samples.iter().map(|s| s.len() as u64 / 4).sum();
        Ok(CompletionResponse {
            samples,
            prompt_tokens: request.prompt.len() as u64 / 4,
            completion_tokens,
        })
    }
}
