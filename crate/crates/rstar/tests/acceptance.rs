//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured figures (run with `--nocapture` to see them).
//!
//! The synthetic end-to-end expectations were fixed beforehand by replaying
//! the seeded oracle over the full pipeline and are asserted exactly; the
//! live smoke test is excluded from CI (`--ignored`, endpoint required).

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use rstar::actions::{render_prompt, ActionConfig, ActionKind, TemplateRegistry};
use rstar::answers::CanonicalAnswer;
use rstar::backend::{BackendSession, SyntheticBank, SyntheticOracle};
use rstar::consistency::{mask_trajectory, MaskPolicy};
use rstar::engine::{run_search, SearchConfig, SearchOutcome};
use rstar::eval::{baseline_sc, run_eval, BackendSpec, DatasetRecord, Method, RunConfig, RunLog};
use rstar::seed::{derive_seed, fnv1a, seeded_rng};
use rstar::tree::{uct_score, NodeId, ReasoningTree, Trajectory};

/// Expected accuracies on the 200-problem bank (seed 42), run seed 7,
/// generator error 0.3, discriminator error 0.1, 16 rollouts, sc@16.
/// Fixed by brute-force oracle replay before being frozen here.
const EXPECTED_ACCURACY_COT: f64 = 0.235;
const EXPECTED_ACCURACY_SC16: f64 = 0.46;
const EXPECTED_ACCURACY_GEN_MAJ: f64 = 0.62;
const EXPECTED_ACCURACY_RSTAR: f64 = 0.855;

const BANK_SEED: u64 = 42;
const BANK_SIZE: usize = 200;
const RUN_SEED: u64 = 7;

fn write_bank(dir: &Path, count: usize) -> PathBuf {
    let path = dir.join("bank.jsonl");
    let mut file = std::fs::File::create(&path).unwrap();
    for (i, p) in SyntheticBank::generate(BANK_SEED, count).iter().enumerate() {
        writeln!(
            file,
            "{}",
            serde_json::json!({
                "id": format!("s{i:04}"),
                "question": p.question(),
                "answer": p.gold_answer().to_string(),
            })
        )
        .unwrap();
    }
    path
}

fn bank_config(method: Method, dataset: PathBuf, out: PathBuf) -> RunConfig {
    let mut config = RunConfig::new(
        method,
        BackendSpec::Synthetic { error_rate: 0.3 },
        dataset,
        out,
    );
    config.seed = RUN_SEED;
    config.sc_samples = 16;
    config.search.num_rollouts = 16;
    config.max_concurrent_questions = 8;
    if method.needs_discriminator() {
        config.discriminator = Some(BackendSpec::Synthetic { error_rate: 0.1 });
    }
    config
}

/// Criterion 1: UCT agrees with independent direct evaluation on 10,000
/// random (Q, N, parent_visits, c) tuples with N >= 1, within 1e-9 relative
/// error, in under 5 seconds.
#[test]
fn criterion_1_uct_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = seeded_rng(derive_seed(&[RUN_SEED, fnv1a(b"uct-tuples")]));
    let mut tree = ReasoningTree::new("q", 2, 1.0, 0);
    let id = tree
        .add_child(tree.root_id(), ActionKind::OneStepThought, "s", false)
        .unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n: u64 = rng.gen_range(1..=100_000);
        let parent_visits: u64 = n + rng.gen_range(0..=100_000);
        let q: f64 = rng.gen_range(0.0..=n as f64); // rewards are in [0,1] per visit
        let c: f64 = rng.gen_range(0.0..=4.0);
        {
            let node = tree.get_mut(id).unwrap();
            node.q_value = q;
            node.visit_count = n;
        }
        let got = uct_score(tree.get(id).unwrap(), parent_visits, c);
        // Independent direct evaluation of Q/N + c*sqrt(ln(Np)/N).
        let expected = q / n as f64 + c * ((parent_visits as f64).ln() / n as f64).sqrt();
        let rel = ((got - expected) / expected.abs().max(1e-300)).abs();
        worst = worst.max(rel);
        assert!(rel < 1e-9, "relative error {rel} for (q={q}, n={n}, np={parent_visits}, c={c})");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}, budget 5 s");
    println!("PASS criterion 1: uct oracle equivalence, 10000 tuples, worst rel err {worst:.3e}, {elapsed:?}");
}

/// Shared searches for criteria 2 and 3: four seeded searches of 250
/// rollouts each (1,000 rollouts total).
fn thousand_rollout_searches() -> Vec<SearchOutcome> {
    let problems = SyntheticBank::generate(BANK_SEED, 4);
    let registry = TemplateRegistry::default();
    problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let oracle = SyntheticOracle::new(0.3, derive_seed(&[RUN_SEED, i as u64]));
            let session = BackendSession::new(&oracle);
            let config = SearchConfig {
                num_rollouts: 250,
                rng_seed: derive_seed(&[RUN_SEED, fnv1a(b"accounting"), i as u64]),
                ..SearchConfig::default()
            };
            run_search(&p.question(), &config, &session, &registry).unwrap()
        })
        .collect()
}

/// Criterion 2: after 1,000 seeded rollouts, every node's (Q, N) equals a
/// brute-force recomputation from the recorded rollout log, exactly, in
/// under 30 seconds.
#[test]
fn criterion_2_backpropagation_accounting() {
    let started = Instant::now();
    let outcomes = thousand_rollout_searches();
    let total_rollouts: usize = outcomes.iter().map(|o| o.rollouts.len()).sum();
    assert_eq!(total_rollouts, 1000, "all seeded rollouts must succeed");

    let mut checked_nodes = 0usize;
    for outcome in &outcomes {
        let tree = &outcome.tree;
        // Brute-force replay: apply each recorded rollout along the
        // parent chain, in rollout order, with plain f64 accumulation.
        let mut q = vec![0.0f64; tree.len()];
        let mut n = vec![0u64; tree.len()];
        for record in &outcome.rollouts {
            let mut cursor = Some(record.terminal);
            while let Some(id) = cursor {
                q[id.0 as usize] += record.reward;
                n[id.0 as usize] += 1;
                cursor = tree.get(id).unwrap().parent;
            }
        }
        for node in tree.nodes() {
            assert_eq!(
                node.q_value.to_bits(),
                q[node.id.0 as usize].to_bits(),
                "Q mismatch at {}",
                node.id
            );
            assert_eq!(node.visit_count, n[node.id.0 as usize], "N mismatch at {}", node.id);
            checked_nodes += 1;
        }
        // Terminal visits account for every successful rollout.
        let terminal_visits: u64 =
            tree.nodes().filter(|x| x.terminal).map(|x| x.visit_count).sum();
        assert_eq!(terminal_visits, outcome.rollouts.len() as u64);
        for record in &outcome.rollouts {
            assert!((0.0..=1.0).contains(&record.reward));
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}, budget 30 s");
    println!("PASS criterion 2: backprop accounting exact over 1000 rollouts, {checked_nodes} nodes, {elapsed:?}");
}

/// Criterion 3: zero grammar violations over the same trees: a4 only after
/// a3, a5 only at the root, depth <= d, terminals are leaves, and per-parent
/// branch caps (a1/a3 <= 5, others <= 1).
#[test]
fn criterion_3_grammar_safety() {
    let outcomes = thousand_rollout_searches();
    let config = ActionConfig::default();
    let mut nodes_checked = 0usize;
    for outcome in &outcomes {
        let tree = &outcome.tree;
        for node in tree.nodes() {
            nodes_checked += 1;
            assert!(node.depth <= tree.max_depth(), "depth violation at {}", node.id);
            if node.terminal {
                assert!(node.children.is_empty(), "terminal {} has children", node.id);
                assert!(node.answer.is_some(), "terminal {} lacks an answer", node.id);
            }
            match node.action {
                Some(ActionKind::ReanswerSubQuestion) => {
                    let parent = tree.get(node.parent.unwrap()).unwrap();
                    assert_eq!(
                        parent.action,
                        Some(ActionKind::SubQuestion),
                        "a4 off a3 at {}",
                        node.id
                    );
                }
                Some(ActionKind::RephraseQuestion) => {
                    let parent = tree.get(node.parent.unwrap()).unwrap();
                    assert!(parent.parent.is_none(), "a5 off the root at {}", node.id);
                }
                _ => {}
            }
            for action in ActionKind::ALL {
                let under = tree.children_under(node.id, action).unwrap();
                assert!(
                    under <= config.branch_cap(action),
                    "branch cap violation: {} children under {action} at {}",
                    under,
                    node.id
                );
            }
        }
    }
    println!("PASS criterion 3: grammar safety over {nodes_checked} nodes in 1000-rollout trees");
}

/// Criterion 4: 10,000 seeded mask draws per trajectory length L in 2..=8
/// all fall inside the 20%..80% prefix bounds, and every in-bounds length
/// occurs.
#[test]
fn criterion_4_mask_bounds() {
    let policy = MaskPolicy::default();
    // Bounds enumerated independently: [max(1, ceil(0.2 L)), min(L-1, floor(0.8 L))].
    let expected: [(usize, usize, usize); 7] =
        [(2, 1, 1), (3, 1, 2), (4, 1, 3), (5, 1, 4), (6, 2, 4), (7, 2, 5), (8, 2, 6)];
    for (len, lo, hi) in expected {
        let traj = Trajectory {
            question: "q".into(),
            steps: (0..len)
                .map(|i| rstar::actions::Step::new(ActionKind::OneStepThought, format!("s{i}")))
                .collect(),
            answer: CanonicalAnswer::numeric(0),
            reward: 0.0,
            confidence: 0.0,
            terminal_node: NodeId(1),
            validated: false,
        };
        let mut rng = seeded_rng(derive_seed(&[RUN_SEED, fnv1a(b"mask-bounds"), len as u64]));
        let mut seen = BTreeSet::new();
        for _ in 0..10_000 {
            let mask = mask_trajectory(&traj, policy, &mut rng);
            assert!(
                (lo..=hi).contains(&mask.prefix_len),
                "L={len}: prefix {} outside [{lo},{hi}]",
                mask.prefix_len
            );
            seen.insert(mask.prefix_len);
        }
        assert_eq!(seen.len(), hi - lo + 1, "L={len}: not every in-bounds prefix occurred");
    }
    println!("PASS criterion 4: mask draws in bounds with full coverage for L in 2..=8");
}

/// Criterion 5: rendered prompts match the golden files byte for byte.
#[test]
fn criterion_5_prompt_fidelity() {
    let question = "Pat starts with 37 stickers. Then Pat gains 2 stickers. Then Pat loses 9 stickers. How many stickers does Pat have now?";
    let registry = TemplateRegistry::default();
    let goldens = [
        (ActionKind::OneStepThought, include_str!("golden/a1_prompt.txt")),
        (ActionKind::RemainingSteps, include_str!("golden/a2_prompt.txt")),
        (ActionKind::SubQuestion, include_str!("golden/a3_prompt.txt")),
        (ActionKind::RephraseQuestion, include_str!("golden/a5_prompt.txt")),
    ];
    for (action, golden) in goldens {
        let rendered = render_prompt(action, question, &[], &registry).unwrap();
        assert_eq!(rendered.text, golden, "prompt drift for {action}");
        // Referential transparency: same inputs, same bytes.
        let again = render_prompt(action, question, &[], &registry).unwrap();
        assert_eq!(rendered.text, again.text);
    }
    println!("PASS criterion 5: a1/a2/a3/a5 prompts match the golden files byte for byte");
}

/// Criterion 6: synthetic end-to-end ordering on the 200-problem bank with
/// the frozen expected accuracies, full pipeline above generator-majority by
/// at least five points, generator-majority above sc@16, in under 60 s.
#[test]
fn criterion_6_synthetic_end_to_end_ordering() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_bank(dir.path(), BANK_SIZE);

    let run = |method: Method| -> RunLog {
        let out = dir.path().join(format!("out-{method}"));
        run_eval(&bank_config(method, dataset.clone(), out)).unwrap()
    };
    let cot = run(Method::Cot).summary.accuracy.unwrap();
    let sc = run(Method::Sc).summary.accuracy.unwrap();
    let gen_maj = run(Method::RstarGenMaj).summary.accuracy.unwrap();
    let full = run(Method::Rstar).summary.accuracy.unwrap();

    assert_eq!(cot, EXPECTED_ACCURACY_COT, "cot accuracy drifted");
    assert_eq!(sc, EXPECTED_ACCURACY_SC16, "sc@16 accuracy drifted");
    assert_eq!(gen_maj, EXPECTED_ACCURACY_GEN_MAJ, "generator@maj accuracy drifted");
    assert_eq!(full, EXPECTED_ACCURACY_RSTAR, "full-pipeline accuracy drifted");

    assert!(
        full - gen_maj >= 0.05,
        "full pipeline must exceed generator@maj by >= 5 points ({full} vs {gen_maj})"
    );
    assert!(gen_maj > sc, "generator@maj must exceed sc@16 ({gen_maj} vs {sc})");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "PASS criterion 6: ordering cot {cot} < sc@16 {sc} < gen@maj {gen_maj} <= rstar {full} (gap {:.3}), {elapsed:?}",
        full - gen_maj
    );
}

/// Criterion 7: identical seed, config, and synthetic backends produce
/// byte-identical per-question log bodies (timestamps excluded).
#[test]
fn criterion_7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_bank(dir.path(), 20);

    let log_body = |out: &str| -> Vec<String> {
        let mut config = bank_config(Method::Rstar, dataset.clone(), dir.path().join(out));
        config.search.num_rollouts = 8;
        run_eval(&config).unwrap();
        let text = std::fs::read_to_string(dir.path().join(out).join("log.jsonl")).unwrap();
        text.lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_ms");
                serde_json::to_string(&v).unwrap()
            })
            .collect()
    };

    let first = log_body("run-a");
    let second = log_body("run-b");
    assert_eq!(first.len(), 20);
    assert_eq!(first, second, "log bodies differ between identical runs");

    // Summaries carry no timestamps and must be byte-identical outright.
    let sum_a = std::fs::read(dir.path().join("run-a").join("summary.json")).unwrap();
    let sum_b = std::fs::read(dir.path().join("run-b").join("summary.json")).unwrap();
    assert_eq!(sum_a, sum_b);
    println!("PASS criterion 7: byte-identical log bodies across reruns (20 questions)");
}

/// Criterion 8: degenerate configurations. With only a2 enabled, a cap of n
/// and n rollouts, the candidate answers reproduce sc@maj n exactly under
/// the same seed; with only a3 enabled the search builds a pure
/// sub-question decomposition tree.
#[test]
fn criterion_8_degenerate_config_equivalences() {
    let registry = TemplateRegistry::default();
    let problems = SyntheticBank::generate(BANK_SEED, 30);
    let n = 16u32;

    let mut vote_matches = 0usize;
    for (i, problem) in problems.iter().enumerate() {
        let oracle_seed = derive_seed(&[RUN_SEED, fnv1a(b"sc-equivalence"), i as u64]);
        let record = DatasetRecord {
            id: format!("q{i}"),
            question: problem.question(),
            gold_answer: CanonicalAnswer::numeric(problem.gold_answer()),
            answer_kind: rstar::answers::AnswerKind::Numeric,
        };

        // Self-consistency side: one batched call, majority vote.
        let oracle = SyntheticOracle::new(0.3, oracle_seed);
        let session = BackendSession::new(&oracle);
        let sc_winner = baseline_sc(&record, n, 0.8, &session, &registry, 512).unwrap();

        // Same request replayed to recover the per-sample answer list.
        let oracle2 = SyntheticOracle::new(0.3, oracle_seed);
        let session2 = BackendSession::new(&oracle2);
        let prompt = render_prompt(ActionKind::RemainingSteps, &record.question, &[], &registry).unwrap();
        let response = session2.complete(prompt.text, n, 0.8, 512, prompt.stop_sequences).unwrap();
        let sc_answers: Vec<CanonicalAnswer> = response
            .samples
            .iter()
            .filter_map(|s| {
                rstar::actions::parse_action_output(ActionKind::RemainingSteps, s)
                    .ok()
                    .and_then(|steps| steps.into_iter().next())
            })
            .filter_map(|step| rstar::answers::extract_answer(&step.text, record.answer_kind))
            .collect();

        // Tree-search side: a2 only, branch cap n, n rollouts, same seed.
        let mut action_config = ActionConfig::with_actions([ActionKind::RemainingSteps]);
        action_config.set_branch_cap(ActionKind::RemainingSteps, n as usize);
        let config = SearchConfig {
            num_rollouts: n,
            action_config,
            rng_seed: derive_seed(&[RUN_SEED, i as u64]),
            ..SearchConfig::default()
        };
        let oracle3 = SyntheticOracle::new(0.3, oracle_seed);
        let session3 = BackendSession::new(&oracle3);
        let outcome = run_search(&record.question, &config, &session3, &registry).unwrap();
        let search_answers: Vec<CanonicalAnswer> =
            outcome.trajectories.iter().map(|t| t.answer.clone()).collect();

        assert_eq!(
            search_answers, sc_answers,
            "problem {i}: candidate answers must equal the sc sample answers in order"
        );
        let (_, search_winner) =
            rstar::consistency::select_final(&[], &outcome.trajectories).unwrap();
        assert_eq!(search_winner, sc_winner, "problem {i}: majority winners must agree");
        vote_matches += 1;
    }

    // a3-only: a pure sub-question decomposition tree.
    let mut decomposition_nodes = 0usize;
    for (i, problem) in problems.iter().take(10).enumerate() {
        let oracle = SyntheticOracle::new(0.3, derive_seed(&[RUN_SEED, fnv1a(b"rap"), i as u64]));
        let session = BackendSession::new(&oracle);
        let config = SearchConfig {
            num_rollouts: 8,
            action_config: ActionConfig::with_actions([ActionKind::SubQuestion]),
            rng_seed: derive_seed(&[RUN_SEED, fnv1a(b"rap-rng"), i as u64]),
            ..SearchConfig::default()
        };
        let outcome = run_search(&problem.question(), &config, &session, &registry).unwrap();
        assert!(!outcome.trajectories.is_empty());
        for node in outcome.tree.nodes() {
            if node.parent.is_some() {
                assert_eq!(
                    node.action,
                    Some(ActionKind::SubQuestion),
                    "non-decomposition node in an a3-only tree"
                );
                decomposition_nodes += 1;
            }
        }
    }
    println!(
        "PASS criterion 8: sc@maj{n} reproduced exactly on {vote_matches} problems; a3-only trees pure ({decomposition_nodes} nodes)"
    );
}

/// Criterion 9 (non-gating): live smoke test against a user-supplied
/// completion endpoint. Requires RSTAR_SMOKE_ENDPOINT (and optionally
/// RSTAR_SMOKE_MODEL); runs 20 GSM8K items through few-shot CoT and the
/// full pipeline with self-discrimination, logs average calls, and checks
/// the pipeline does not fall below the CoT baseline.
///
/// Excluded from CI: run with
/// `cargo test -p rstar --test acceptance -- --ignored criterion_9`.
#[test]
#[ignore = "requires a live completion endpoint (RSTAR_SMOKE_ENDPOINT)"]
fn criterion_9_live_smoke() {
    let Ok(endpoint) = std::env::var("RSTAR_SMOKE_ENDPOINT") else {
        panic!("set RSTAR_SMOKE_ENDPOINT to a completion-API base URL");
    };
    let model = std::env::var("RSTAR_SMOKE_MODEL").unwrap_or_else(|_| "default".to_string());
    let dataset = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/gsm8k_sample.jsonl");
    let dir = tempfile::tempdir().unwrap();

    let spec = BackendSpec::parse(&endpoint, &model).unwrap();
    let mut cot_config = RunConfig::new(
        Method::Cot,
        spec.clone(),
        dataset.clone(),
        dir.path().join("cot"),
    );
    cot_config.seed = RUN_SEED;
    cot_config.max_concurrent_questions = 2;
    let cot = run_eval(&cot_config).unwrap();

    let mut full_config = RunConfig::new(Method::Rstar, spec.clone(), dataset, dir.path().join("rstar"));
    full_config.discriminator = Some(spec); // self-discrimination
    full_config.seed = RUN_SEED;
    full_config.search.num_rollouts = 8;
    full_config.max_concurrent_questions = 2;
    let full = run_eval(&full_config).unwrap();

    println!(
        "live smoke: cot accuracy {:?} | rstar accuracy {:?}, avg calls {:.1}, avg generated tokens {:.1}",
        cot.summary.accuracy, full.summary.accuracy, full.summary.avg_calls, full.summary.avg_completion_tokens
    );
    assert!(full.questions.iter().all(|q| q.error.is_none()), "pipeline errors on the live endpoint");
    assert!(
        full.summary.accuracy >= cot.summary.accuracy,
        "full pipeline fell below the few-shot CoT baseline"
    );
    println!("PASS criterion 9: live smoke completed");
}
