//! Discriminator stage: mask a random suffix of each candidate trajectory,
//! have a second backend complete it, validate by answer agreement, and pick
//! the final trajectory by reward times confidence.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{parse_action_output, render_prompt, ActionKind, Step, TemplateRegistry};
use crate::answers::{answers_equal, extract_answer, majority_vote, CanonicalAnswer};
use crate::backend::BackendSession;
use crate::seed::{derive_seed, fnv1a, seeded_rng};
use crate::tree::{NodeId, Trajectory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsistencyError {
    #[error("no candidate trajectories to select from")]
    NoCandidates,
}

/// Bounds for the random prefix split, as fractions of trajectory length.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub lo_frac: f64,
    pub hi_frac: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { lo_frac: 0.2, hi_frac: 0.8 }
    }
}

/// A drawn split: the first `prefix_len` steps are kept, the rest masked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub prefix_len: usize,
    pub lo_frac: f64,
    pub hi_frac: f64,
}

/// Draws a prefix length uniformly from
/// `[max(1, ceil(lo*L)), min(L-1, floor(hi*L))]` for length `L >= 2`;
/// single-step trajectories keep nothing (question-only prompt).
pub fn mask_trajectory<R: Rng>(traj: &Trajectory, policy: MaskPolicy, rng: &mut R) -> MaskSpec {
    let len = traj.steps.len();
    let prefix_len = if len <= 1 {
        0
    } else {
        let lo = ((policy.lo_frac * len as f64).ceil() as usize).max(1).min(len - 1);
        let hi = ((policy.hi_frac * len as f64).floor() as usize).clamp(lo, len - 1);
        rng.gen_range(lo..=hi)
    };
    MaskSpec { prefix_len, lo_frac: policy.lo_frac, hi_frac: policy.hi_frac }
}

/// One verification outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub trajectory: NodeId,
    pub completion_answer: Option<CanonicalAnswer>,
    pub agrees: bool,
    pub prefix_len: usize,
}

/// Asks the discriminator to complete the trajectory from its retained
/// prefix and checks whether the completed answer matches. Unparseable
/// completions and backend errors yield disagreement, never a failure.
pub fn verify(
    traj: &Trajectory,
    mask: &MaskSpec,
    discriminator: &BackendSession<'_>,
    registry: &TemplateRegistry,
    temperature: f64,
    max_tokens: u32,
) -> Verdict {
    let ordinal = discriminator.reserve_ordinal();
    verify_with_ordinal(traj, mask, discriminator, registry, temperature, max_tokens, ordinal)
}

fn verify_with_ordinal(
    traj: &Trajectory,
    mask: &MaskSpec,
    discriminator: &BackendSession<'_>,
    registry: &TemplateRegistry,
    temperature: f64,
    max_tokens: u32,
    ordinal: u64,
) -> Verdict {
    let prefix: &[Step] = &traj.steps[..mask.prefix_len.min(traj.steps.len())];
    let completion_answer = render_prompt(ActionKind::RemainingSteps, &traj.question, prefix, registry)
        .ok()
        .and_then(|prompt| {
            discriminator
                .complete_with_ordinal(
                    ordinal,
                    prompt.text,
                    1,
                    temperature,
                    max_tokens,
                    prompt.stop_sequences,
                )
                .ok()
        })
        .and_then(|response| response.samples.into_iter().next())
        .and_then(|sample| {
            parse_action_output(ActionKind::RemainingSteps, &sample)
                .ok()
                .and_then(|steps| steps.into_iter().next())
        })
        .and_then(|step| extract_answer(&step.text, traj.answer.kind()));
    let agrees = completion_answer
        .as_ref()
        .map(|a| answers_equal(a, &traj.answer))
        .unwrap_or(false);
    Verdict { trajectory: traj.terminal_node, completion_answer, agrees, prefix_len: mask.prefix_len }
}

/// Verification settings for a batch of candidates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub mask: MaskPolicy,
    /// Independent splits per trajectory.
    pub splits: u32,
    /// A trajectory validates when at least this many splits agree.
    pub agreement_threshold: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            mask: MaskPolicy::default(),
            splits: 1,
            agreement_threshold: 1,
            temperature: 0.8,
            max_tokens: 512,
        }
    }
}

/// Verifies every candidate concurrently. Mask draws and request ordinals
/// derive from (seed, candidate index, split index), so verdicts do not
/// depend on thread scheduling.
pub fn verify_all(
    candidates: &[Trajectory],
    config: &VerifyConfig,
    seed: u64,
    discriminator: &BackendSession<'_>,
    registry: &TemplateRegistry,
) -> Vec<Verdict> {
    let splits = config.splits.max(1);
    // Pre-assign one ordinal per (candidate, split) in deterministic order.
    let base_ordinals: Vec<u64> =
        (0..candidates.len() * splits as usize).map(|_| discriminator.reserve_ordinal()).collect();

    let mut verdicts: Vec<Option<Verdict>> = vec![None; candidates.len()];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (idx, traj) in candidates.iter().enumerate() {
            let ordinals = &base_ordinals[idx * splits as usize..(idx + 1) * splits as usize];
            handles.push(scope.spawn(move || {
                let mut agreeing = 0u32;
                let mut first: Option<Verdict> = None;
                for split in 0..splits {
                    let mut rng = seeded_rng(derive_seed(&[
                        seed,
                        fnv1a(b"mask-draw"),
                        idx as u64,
                        split as u64,
                    ]));
                    let mask = mask_trajectory(traj, config.mask, &mut rng);
                    let verdict = verify_with_ordinal(
                        traj,
                        &mask,
                        discriminator,
                        registry,
                        config.temperature,
                        config.max_tokens,
                        ordinals[split as usize],
                    );
                    if verdict.agrees {
                        agreeing += 1;
                    }
                    if first.is_none() {
                        first = Some(verdict);
                    }
                }
                let mut verdict = first.expect("at least one split");
                verdict.agrees = agreeing >= config.agreement_threshold.max(1);
                (idx, verdict)
            }));
        }
        for handle in handles {
            let (idx, verdict) = handle.join().expect("verifier thread panicked");
            verdicts[idx] = Some(verdict);
        }
    });
    verdicts.into_iter().map(|v| v.expect("all verdicts filled")).collect()
}

/// Keeps the trajectories whose verdicts agree, marking them validated.
pub fn filter_validated(trajectories: &[Trajectory], verdicts: &[Verdict]) -> Vec<Trajectory> {
    debug_assert_eq!(trajectories.len(), verdicts.len());
    trajectories
        .iter()
        .zip(verdicts)
        .filter(|(_, v)| v.agrees)
        .map(|(t, _)| {
            let mut t = t.clone();
            t.validated = true;
            t
        })
        .collect()
}

/// Picks the trajectory with the highest reward x confidence among the
/// validated set; ties break toward higher confidence, then earlier
/// discovery. When nothing validated, falls back to a majority vote over all
/// candidate answers, represented by the highest-scored trajectory carrying
/// the winning answer.
pub fn select_final(
    validated: &[Trajectory],
    all_candidates: &[Trajectory],
) -> Result<(Trajectory, CanonicalAnswer), ConsistencyError> {
    if all_candidates.is_empty() {
        return Err(ConsistencyError::NoCandidates);
    }
    if !validated.is_empty() {
        let best = argmax_by_score(validated.iter()).expect("non-empty");
        return Ok((best.clone(), best.answer.clone()));
    }
    let answers: Vec<CanonicalAnswer> = all_candidates.iter().map(|t| t.answer.clone()).collect();
    let vote = majority_vote(&answers).expect("non-empty candidates");
    let representative = argmax_by_score(
        all_candidates.iter().filter(|t| answers_equal(&t.answer, &vote.winner)),
    )
    .expect("winner has at least one trajectory");
    Ok((representative.clone(), vote.winner))
}

fn argmax_by_score<'a, I: Iterator<Item = &'a Trajectory>>(iter: I) -> Option<&'a Trajectory> {
    let mut best: Option<&Trajectory> = None;
    for t in iter {
        best = match best {
            None => Some(t),
            Some(b) => {
                let (s, bs) = (t.final_score(), b.final_score());
                if s > bs || (s == bs && t.confidence > b.confidence) {
                    Some(t)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}
