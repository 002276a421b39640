//! Final-answer extraction, normalization, equality, and majority voting.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when comparing numeric answers that carry
/// fractional parts. Surfaced as config in the eval harness.
pub const DEFAULT_NUMERIC_TOLERANCE: f64 = 1e-6;

/// Markers that introduce a final answer in a completion.
const ANSWER_MARKER: &str = "The answer is";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnswerError {
    #[error("cannot vote over an empty answer list")]
    EmptyVote,
    #[error("invalid decimal literal: {0:?}")]
    InvalidDecimal(String),
}

/// Exact decimal value: `mantissa * 10^-scale`, normalized so that the
/// mantissa carries no trailing zeros (and zero itself has scale 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal {
    mantissa: i128,
    scale: u32,
}

impl Decimal {
    pub fn new(mantissa: i128, scale: u32) -> Self {
        let mut d = Decimal { mantissa, scale };
        d.normalize();
        d
    }

    pub fn from_int(value: i64) -> Self {
        Decimal { mantissa: value as i128, scale: 0 }
    }

    fn normalize(&mut self) {
        if self.mantissa == 0 {
            self.scale = 0;
            return;
        }
        while self.scale > 0 && self.mantissa % 10 == 0 {
            self.mantissa /= 10;
            self.scale -= 1;
        }
    }

    pub fn is_integral(&self) -> bool {
        self.scale == 0
    }

    pub fn to_f64(&self) -> f64 {
        self.mantissa as f64 / 10f64.powi(self.scale as i32)
    }

    /// Parses a numeric token, tolerating currency symbols and thousands
    /// separators (`$1,234.50` -> `1234.5`).
    pub fn parse(token: &str) -> Result<Self, AnswerError> {
        let cleaned: String = token
            .trim()
            .chars()
            .filter(|c| !matches!(c, '$' | ',' | ' '))
            .collect();
        if cleaned.is_empty() {
            return Err(AnswerError::InvalidDecimal(token.to_string()));
        }
        let (negative, digits) = match cleaned.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, cleaned.as_str()),
        };
        let (int_part, frac_part) = match digits.split_once('.') {
            Some((i, f)) => (i, f),
            None => (digits, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(AnswerError::InvalidDecimal(token.to_string()));
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(AnswerError::InvalidDecimal(token.to_string()));
        }
        let mut mantissa: i128 = 0;
        for c in int_part.chars().chain(frac_part.chars()) {
            mantissa = mantissa
                .checked_mul(10)
                .and_then(|m| m.checked_add((c as u8 - b'0') as i128))
                .ok_or_else(|| AnswerError::InvalidDecimal(token.to_string()))?;
        }
        if negative {
            mantissa = -mantissa;
        }
        Ok(Decimal::new(mantissa, frac_part.len() as u32))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.mantissa);
        }
        let negative = self.mantissa < 0;
        let digits = self.mantissa.unsigned_abs().to_string();
        let scale = self.scale as usize;
        let (int_part, frac_part) = if digits.len() > scale {
            let split = digits.len() - scale;
            (digits[..split].to_string(), digits[split..].to_string())
        } else {
            ("0".to_string(), format!("{:0>width$}", digits, width = scale))
        };
        write!(f, "{}{}.{}", if negative { "-" } else { "" }, int_part, frac_part)
    }
}

impl FromStr for Decimal {
    type Err = AnswerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Decimal::parse(s)
    }
}

/// Which shape of final answer a task expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    Numeric,
    Categorical,
}

impl FromStr for AnswerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "numeric" => Ok(AnswerKind::Numeric),
            "categorical" => Ok(AnswerKind::Categorical),
            other => Err(format!("unsupported answer kind: {other:?}")),
        }
    }
}

/// Normalized final answer embedded in a terminal step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CanonicalAnswer {
    Numeric(Decimal),
    Categorical(String),
}

impl CanonicalAnswer {
    pub fn numeric(value: i64) -> Self {
        CanonicalAnswer::Numeric(Decimal::from_int(value))
    }

    /// Categorical construction lowercases and maps truthy/falsy synonyms
    /// onto yes/no so StrategyQA-style golds group together.
    pub fn categorical(token: &str) -> Self {
        let t = token.trim().to_ascii_lowercase();
        let t = match t.as_str() {
            "true" => "yes".to_string(),
            "false" => "no".to_string(),
            _ => t,
        };
        CanonicalAnswer::Categorical(t)
    }

    pub fn kind(&self) -> AnswerKind {
        match self {
            CanonicalAnswer::Numeric(_) => AnswerKind::Numeric,
            CanonicalAnswer::Categorical(_) => AnswerKind::Categorical,
        }
    }

    /// Parses a gold-answer literal of the given kind.
    pub fn parse(text: &str, kind: AnswerKind) -> Option<Self> {
        match kind {
            AnswerKind::Numeric => Decimal::parse(text).ok().map(CanonicalAnswer::Numeric),
            AnswerKind::Categorical => {
                let token = text.trim();
                if token.is_empty() {
                    None
                } else {
                    Some(CanonicalAnswer::categorical(token))
                }
            }
        }
    }
}

impl fmt::Display for CanonicalAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalAnswer::Numeric(d) => write!(f, "{d}"),
            CanonicalAnswer::Categorical(s) => write!(f, "{s}"),
        }
    }
}

// Serialized as a tagged string pair so replay files stay human-readable.
impl Serialize for CanonicalAnswer {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            kind: AnswerKind,
            value: &'a str,
        }
        let value = self.to_string();
        Repr { kind: self.kind(), value: &value }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CanonicalAnswer {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            kind: AnswerKind,
            value: String,
        }
        let repr = Repr::deserialize(deserializer)?;
        CanonicalAnswer::parse(&repr.value, repr.kind)
            .ok_or_else(|| serde::de::Error::custom(format!("bad answer literal: {}", repr.value)))
    }
}

fn numeric_token_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\$?\d[\d,]*(?:\.\d+)?").unwrap())
}

fn categorical_token_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z]+").unwrap())
}

/// Scans for the last `The answer is [...]` marker and parses the value that
/// follows it. Absence is a value, not an error: few-shot prompts contain
/// exemplar answers, so only the final marker counts.
pub fn extract_answer(text: &str, kind: AnswerKind) -> Option<CanonicalAnswer> {
    let at = text.rfind(ANSWER_MARKER)?;
    let tail = &text[at + ANSWER_MARKER.len()..];
    let tail = tail.trim_start().strip_prefix(':').unwrap_or(tail).trim_start();
    match kind {
        AnswerKind::Numeric => {
            let m = numeric_token_re().find(tail)?;
            Decimal::parse(m.as_str()).ok().map(CanonicalAnswer::Numeric)
        }
        AnswerKind::Categorical => {
            let m = categorical_token_re().find(tail)?;
            Some(CanonicalAnswer::categorical(m.as_str()))
        }
    }
}

/// Equality under the declared normalization, with the default tolerance.
pub fn answers_equal(a: &CanonicalAnswer, b: &CanonicalAnswer) -> bool {
    answers_equal_with(a, b, DEFAULT_NUMERIC_TOLERANCE)
}

/// Numeric values compare exactly after normalization; values carrying
/// fractional parts additionally match under a relative tolerance.
/// Cross-kind comparisons are always false.
pub fn answers_equal_with(a: &CanonicalAnswer, b: &CanonicalAnswer, tolerance: f64) -> bool {
    match (a, b) {
        (CanonicalAnswer::Numeric(x), CanonicalAnswer::Numeric(y)) => {
            if x == y {
                return true;
            }
            if x.is_integral() && y.is_integral() {
                return false;
            }
            let (xf, yf) = (x.to_f64(), y.to_f64());
            (xf - yf).abs() <= tolerance * xf.abs().max(yf.abs())
        }
        (CanonicalAnswer::Categorical(x), CanonicalAnswer::Categorical(y)) => x == y,
        _ => false,
    }
}

/// Majority-vote outcome over a set of candidate answers.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteResult {
    pub winner: CanonicalAnswer,
    /// Winner count / total votes; always in (0, 1].
    pub confidence: f64,
    /// Group representatives with their counts, in first-occurrence order.
    pub tally: Vec<(CanonicalAnswer, usize)>,
}

/// Groups answers by their normalized representative and returns the largest
/// group; ties break toward the earliest first occurrence.
pub fn majority_vote(answers: &[CanonicalAnswer]) -> Result<VoteResult, AnswerError> {
    if answers.is_empty() {
        return Err(AnswerError::EmptyVote);
    }
    let mut order: Vec<CanonicalAnswer> = Vec::new();
    let mut counts: HashMap<CanonicalAnswer, usize> = HashMap::new();
    for ans in answers {
        let entry = counts.entry(ans.clone());
        if matches!(entry, std::collections::hash_map::Entry::Vacant(_)) {
            order.push(ans.clone());
        }
        *entry.or_insert(0) += 1;
    }
    let mut winner = order[0].clone();
    let mut best = counts[&winner];
    for rep in &order[1..] {
        let c = counts[rep];
        if c > best {
            best = c;
            winner = rep.clone();
        }
    }
    let tally: Vec<(CanonicalAnswer, usize)> =
        order.into_iter().map(|rep| { let c = counts[&rep]; (rep, c) }).collect();
    Ok(VoteResult { winner, confidence: best as f64 / answers.len() as f64, tally })
}
