use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use rstar::actions::{ActionConfig, ActionKind, TemplateRegistry};
use rstar::answers::AnswerKind;
use rstar::backend::http::{ENV_DISCRIMINATOR_URL, ENV_GENERATOR_URL};
use rstar::backend::{BackendSession, SyntheticBank};
use rstar::consistency::{filter_validated, select_final, verify_all, VerifyConfig};
use rstar::engine::{run_search, SearchConfig};
use rstar::eval::{emit_report, read_log, run_eval, BackendSpec, Method, RunConfig};
use rstar::tree::Trajectory;

#[derive(Parser)]
#[command(name = "rstar", version, about = "Tree-search reasoning with mutual-consistency verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a dataset with one of the methods (cot, sc, rstar_gen_maj, rstar).
    Run(RunArgs),
    /// Search a single question and dump the tree and candidate set.
    Search(SearchArgs),
    /// Re-verify a saved candidate set against a discriminator.
    Verify(VerifyArgs),
    /// Re-render the report table for a finished run.
    Report(ReportArgs),
    /// Generate a synthetic dataset of integer update-chain problems.
    Synth(SynthArgs),
}

/// Search knobs shared by `run` and `search`.
#[derive(Args, Clone)]
struct SearchFlags {
    /// Rollout count per question.
    #[arg(long)]
    rollouts: Option<u32>,
    /// Maximum tree depth d.
    #[arg(long)]
    max_depth: Option<usize>,
    /// UCT exploration constant c.
    #[arg(long)]
    uct_c: Option<f64>,
    /// Extra completions per terminal for confidence scoring (k).
    #[arg(long)]
    confidence_samples: Option<u32>,
    /// Enabled actions, comma-separated (e.g. "a1,a2,a3,a4,a5").
    #[arg(long)]
    actions: Option<String>,
    /// Per-action branch caps, comma-separated (e.g. "a1=5,a3=5").
    #[arg(long)]
    branch_caps: Option<String>,
    /// Sampling temperature for expansion.
    #[arg(long)]
    expansion_temperature: Option<f64>,
    /// Sampling temperature for confidence completions.
    #[arg(long)]
    confidence_temperature: Option<f64>,
    /// Completion token budget per request.
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Trajectory reward mode: accumulated | mean_per_visit.
    #[arg(long)]
    reward_mode: Option<String>,
    /// Terminal confidence mode: per_terminal | pooled.
    #[arg(long)]
    confidence_mode: Option<String>,
    /// Directory of custom template files (a1.txt .. a5.txt).
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluation method: cot | sc | rstar_gen_maj | rstar.
    #[arg(long)]
    method: Option<String>,
    /// JSONL dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for log.jsonl and summary.json.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Generator backend: synthetic[:eps] | replay:<path> | <url>.
    #[arg(long)]
    generator: Option<String>,
    /// Generator model name (HTTP backends).
    #[arg(long)]
    generator_model: Option<String>,
    /// Discriminator backend spec.
    #[arg(long)]
    discriminator: Option<String>,
    /// Discriminator model name (HTTP backends).
    #[arg(long)]
    discriminator_model: Option<String>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Samples for the self-consistency baseline.
    #[arg(long)]
    sc_samples: Option<u32>,
    /// Questions evaluated concurrently.
    #[arg(long)]
    max_concurrent_questions: Option<usize>,
    /// Independent discriminator splits per trajectory.
    #[arg(long)]
    verify_splits: Option<u32>,
    /// Splits that must agree for validation.
    #[arg(long)]
    verify_threshold: Option<u32>,
    /// Lower bound of the retained-prefix fraction.
    #[arg(long)]
    mask_lo: Option<f64>,
    /// Upper bound of the retained-prefix fraction.
    #[arg(long)]
    mask_hi: Option<f64>,
    /// Relative tolerance for numeric grading.
    #[arg(long)]
    grading_tolerance: Option<f64>,
    /// Write per-question tree dumps under <out>/trees/.
    #[arg(long)]
    dump_trees: bool,
    #[command(flatten)]
    search: SearchFlags,
}

/// Subset of RunConfig accepted from a TOML file.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    method: Option<String>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    generator: Option<String>,
    generator_model: Option<String>,
    discriminator: Option<String>,
    discriminator_model: Option<String>,
    seed: Option<u64>,
    sc_samples: Option<u32>,
    max_concurrent_questions: Option<usize>,
    verify_splits: Option<u32>,
    verify_threshold: Option<u32>,
    mask_lo: Option<f64>,
    mask_hi: Option<f64>,
    grading_tolerance: Option<f64>,
    dump_trees: Option<bool>,
    rollouts: Option<u32>,
    max_depth: Option<usize>,
    uct_c: Option<f64>,
    confidence_samples: Option<u32>,
    actions: Option<String>,
    branch_caps: Option<String>,
    expansion_temperature: Option<f64>,
    confidence_temperature: Option<f64>,
    max_tokens: Option<u32>,
    reward_mode: Option<String>,
    confidence_mode: Option<String>,
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// The question to search.
    #[arg(long)]
    question: String,
    /// Expected answer kind: numeric | categorical.
    #[arg(long, default_value = "numeric")]
    answer_kind: String,
    /// Generator backend spec.
    #[arg(long)]
    generator: String,
    #[arg(long)]
    generator_model: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the tree dump (JSONL of nodes).
    #[arg(long)]
    tree_dump: Option<PathBuf>,
    /// Where to write the candidate trajectories (JSON array).
    #[arg(long)]
    candidates_out: Option<PathBuf>,
    /// Mirror every backend call to a JSONL replay log.
    #[arg(long)]
    mirror: Option<PathBuf>,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args)]
struct VerifyArgs {
    /// Candidate trajectories (JSON array, as written by `search`).
    #[arg(long)]
    candidates: PathBuf,
    /// Discriminator backend spec.
    #[arg(long)]
    discriminator: String,
    #[arg(long)]
    discriminator_model: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    verify_splits: Option<u32>,
    #[arg(long)]
    verify_threshold: Option<u32>,
    #[arg(long)]
    mask_lo: Option<f64>,
    #[arg(long)]
    mask_hi: Option<f64>,
    /// Where to write the verdicts (JSON).
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run output directory containing log.jsonl.
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long, short = 'o')]
    out: PathBuf,
}

fn parse_actions(spec: &str) -> Result<ActionConfig> {
    let mut actions = Vec::new();
    for token in spec.split(',').filter(|t| !t.trim().is_empty()) {
        actions.push(ActionKind::from_str(token.trim()).map_err(|e| anyhow::anyhow!(e))?);
    }
    Ok(ActionConfig::with_actions(actions))
}

fn apply_branch_caps(config: &mut ActionConfig, spec: &str) -> Result<()> {
    for pair in spec.split(',').filter(|t| !t.trim().is_empty()) {
        let (action, cap) = pair
            .split_once('=')
            .with_context(|| format!("bad branch cap {pair:?} (expected a1=5)"))?;
        let action = ActionKind::from_str(action.trim()).map_err(|e| anyhow::anyhow!(e))?;
        config.set_branch_cap(action, cap.trim().parse()?);
    }
    Ok(())
}

fn build_search_config(flags: &SearchFlags, seed: u64) -> Result<SearchConfig> {
    let mut config = SearchConfig { rng_seed: seed, ..SearchConfig::default() };
    if let Some(actions) = &flags.actions {
        config.action_config = parse_actions(actions)?;
    }
    if let Some(caps) = &flags.branch_caps {
        apply_branch_caps(&mut config.action_config, caps)?;
    }
    if let Some(t) = flags.expansion_temperature {
        for action in ActionKind::ALL {
            config.action_config.set_temperature(action, t);
        }
    }
    if let Some(t) = flags.confidence_temperature {
        config.action_config.confidence_temperature = t;
    }
    if let Some(n) = flags.rollouts {
        config.num_rollouts = n;
    }
    if let Some(d) = flags.max_depth {
        config.max_depth = d;
    }
    if let Some(c) = flags.uct_c {
        config.uct_c = c;
    }
    if let Some(k) = flags.confidence_samples {
        config.confidence_samples = k;
    }
    if let Some(m) = flags.max_tokens {
        config.max_tokens = m;
    }
    if let Some(mode) = &flags.reward_mode {
        config.reward_mode = match mode.as_str() {
            "accumulated" => rstar::engine::RewardMode::Accumulated,
            "mean_per_visit" => rstar::engine::RewardMode::MeanPerVisit,
            other => bail!("unknown reward mode {other:?}"),
        };
    }
    if let Some(mode) = &flags.confidence_mode {
        config.confidence_mode = match mode.as_str() {
            "per_terminal" => rstar::engine::ConfidenceMode::PerTerminal,
            "pooled" => rstar::engine::ConfidenceMode::Pooled,
            other => bail!("unknown confidence mode {other:?}"),
        };
    }
    Ok(config)
}

fn load_registry(templates: &Option<PathBuf>) -> Result<TemplateRegistry> {
    match templates {
        Some(dir) => TemplateRegistry::from_dir(dir).context("loading templates"),
        None => Ok(TemplateRegistry::default()),
    }
}

fn backend_spec(spec: &str, model: &Option<String>, url_env: &str) -> Result<BackendSpec> {
    let model = model.clone().unwrap_or_else(|| "default".to_string());
    let mut parsed = BackendSpec::parse(spec, &model)?;
    // The environment overrides endpoint URLs only; synthetic and replay
    // specs are left alone.
    if let BackendSpec::Http(config) = &mut parsed {
        if let Ok(url) = std::env::var(url_env) {
            if !url.is_empty() {
                config.base_url = url;
            }
        }
    }
    Ok(parsed)
}

fn merge_run_config(args: &RunArgs) -> Result<RunConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {path:?}"))?;
            toml::from_str(&text).context("parsing config file")?
        }
        None => FileConfig::default(),
    };

    // Flags override the file; the file fills whatever the flags left unset.
    let pick = |flag: &Option<String>, file_val: &Option<String>| flag.clone().or(file_val.clone());
    let method_str = pick(&args.method, &file.method)
        .ok_or_else(|| anyhow::anyhow!("--method is required (cot|sc|rstar_gen_maj|rstar)"))?;
    let method = Method::from_str(&method_str).map_err(|e| anyhow::anyhow!(e))?;
    let dataset = args
        .dataset
        .clone()
        .or(file.dataset)
        .ok_or_else(|| anyhow::anyhow!("--dataset is required"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| anyhow::anyhow!("--out is required"))?;
    let generator_spec = pick(&args.generator, &file.generator)
        .ok_or_else(|| anyhow::anyhow!("--generator is required"))?;
    let generator_model = pick(&args.generator_model, &file.generator_model);
    let discriminator_spec = pick(&args.discriminator, &file.discriminator);
    let discriminator_model = pick(&args.discriminator_model, &file.discriminator_model);
    let seed = args.seed.or(file.seed).unwrap_or(0);

    let flags = SearchFlags {
        rollouts: args.search.rollouts.or(file.rollouts),
        max_depth: args.search.max_depth.or(file.max_depth),
        uct_c: args.search.uct_c.or(file.uct_c),
        confidence_samples: args.search.confidence_samples.or(file.confidence_samples),
        actions: args.search.actions.clone().or(file.actions),
        branch_caps: args.search.branch_caps.clone().or(file.branch_caps),
        expansion_temperature: args.search.expansion_temperature.or(file.expansion_temperature),
        confidence_temperature: args.search.confidence_temperature.or(file.confidence_temperature),
        max_tokens: args.search.max_tokens.or(file.max_tokens),
        reward_mode: args.search.reward_mode.clone().or(file.reward_mode),
        confidence_mode: args.search.confidence_mode.clone().or(file.confidence_mode),
        templates: args.search.templates.clone().or(file.templates),
    };

    let mut config = RunConfig::new(
        method,
        backend_spec(&generator_spec, &generator_model, ENV_GENERATOR_URL)?,
        dataset,
        out,
    );
    config.seed = seed;
    config.search = build_search_config(&flags, seed)?;
    if let Some(spec) = discriminator_spec {
        config.discriminator = Some(backend_spec(&spec, &discriminator_model, ENV_DISCRIMINATOR_URL)?);
    }
    if let Some(n) = args.sc_samples.or(file.sc_samples) {
        config.sc_samples = n;
    }
    if let Some(n) = args.max_concurrent_questions.or(file.max_concurrent_questions) {
        config.max_concurrent_questions = n;
    }
    if let Some(n) = args.verify_splits.or(file.verify_splits) {
        config.verify.splits = n;
    }
    if let Some(n) = args.verify_threshold.or(file.verify_threshold) {
        config.verify.agreement_threshold = n;
    }
    if let Some(lo) = args.mask_lo.or(file.mask_lo) {
        config.verify.mask.lo_frac = lo;
    }
    if let Some(hi) = args.mask_hi.or(file.mask_hi) {
        config.verify.mask.hi_frac = hi;
    }
    if let Some(t) = args.grading_tolerance.or(file.grading_tolerance) {
        config.grading_tolerance = t;
    }
    config.verify.max_tokens = config.search.max_tokens;
    config.dump_trees = args.dump_trees || file.dump_trees.unwrap_or(false);
    config.templates_dir = flags.templates;
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = merge_run_config(&args)?;
    let log = run_eval(&config)?;
    print!("{}", emit_report(&log));
    println!("log: {}", config.output_dir.join("log.jsonl").display());
    println!("summary: {}", config.output_dir.join("summary.json").display());
    Ok(())
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let registry = load_registry(&args.search.templates)?;
    let mut config = build_search_config(&args.search, args.seed)?;
    config.answer_kind =
        AnswerKind::from_str(&args.answer_kind).map_err(|e| anyhow::anyhow!(e))?;
    let spec = backend_spec(&args.generator, &args.generator_model, ENV_GENERATOR_URL)?;
    let backend = spec.build(args.seed, "generator")?;
    let session = match &args.mirror {
        Some(path) => BackendSession::with_mirror(backend.as_ref(), path)?,
        None => BackendSession::new(backend.as_ref()),
    };
    let outcome = run_search(&args.question, &config, &session, &registry)?;

    println!(
        "explored {} nodes over {} rollouts ({} failed); {} candidate trajectories",
        outcome.tree.len(),
        outcome.rollouts.len(),
        outcome.failed_rollouts,
        outcome.trajectories.len()
    );
    for (i, t) in outcome.trajectories.iter().enumerate() {
        println!(
            "  [{i}] answer={} reward={:.4} confidence={:.4} steps={}",
            t.answer,
            t.reward,
            t.confidence,
            t.steps.len()
        );
    }
    if let Some(path) = &args.tree_dump {
        let mut file = std::fs::File::create(path)?;
        outcome.tree.dump_jsonl(&mut file)?;
        println!("tree dump: {}", path.display());
    }
    if let Some(path) = &args.candidates_out {
        std::fs::write(path, serde_json::to_string_pretty(&outcome.trajectories)?)?;
        println!("candidates: {}", path.display());
    }
    let usage = session.usage();
    println!(
        "calls={} prompt_tokens={} completion_tokens={}",
        usage.calls, usage.prompt_tokens, usage.completion_tokens
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let registry = load_registry(&args.templates)?;
    let text = std::fs::read_to_string(&args.candidates)
        .with_context(|| format!("reading {:?}", args.candidates))?;
    let candidates: Vec<Trajectory> = serde_json::from_str(&text)?;
    if candidates.is_empty() {
        bail!("candidate file holds no trajectories");
    }
    let spec = backend_spec(&args.discriminator, &args.discriminator_model, ENV_DISCRIMINATOR_URL)?;
    let backend = spec.build(args.seed, "discriminator")?;
    let session = BackendSession::new(backend.as_ref());

    let mut verify_config = VerifyConfig::default();
    if let Some(n) = args.verify_splits {
        verify_config.splits = n;
    }
    if let Some(n) = args.verify_threshold {
        verify_config.agreement_threshold = n;
    }
    if let Some(lo) = args.mask_lo {
        verify_config.mask.lo_frac = lo;
    }
    if let Some(hi) = args.mask_hi {
        verify_config.mask.hi_frac = hi;
    }

    let verdicts = verify_all(&candidates, &verify_config, args.seed, &session, &registry);
    let validated = filter_validated(&candidates, &verdicts);
    for (t, v) in candidates.iter().zip(&verdicts) {
        println!(
            "trajectory {} prefix={} completion={} agrees={}",
            t.terminal_node,
            v.prefix_len,
            v.completion_answer.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
            v.agrees
        );
    }
    let (winner, answer) = select_final(&validated, &candidates)?;
    println!(
        "selected trajectory {} answer={} score={:.4} ({} of {} validated)",
        winner.terminal_node,
        answer,
        winner.final_score(),
        validated.len(),
        candidates.len()
    );
    if let Some(path) = &args.out {
        let payload = serde_json::json!({
            "verdicts": verdicts,
            "selected_answer": answer.to_string(),
            "selected_trajectory": winner,
        });
        std::fs::write(path, serde_json::to_string_pretty(&payload)?)?;
        println!("verdicts: {}", path.display());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let log = read_log(&args.log)?;
    print!("{}", emit_report(&log));
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let problems = SyntheticBank::generate(args.seed, args.count);
    let mut file = std::fs::File::create(&args.out)?;
    for (i, p) in problems.iter().enumerate() {
        let row = serde_json::json!({
            "id": format!("s{i:04}"),
            "question": p.question(),
            "answer": p.gold_answer().to_string(),
        });
        writeln!(file, "{row}")?;
    }
    println!("wrote {} problems to {}", problems.len(), args.out.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Search(args) => cmd_search(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Report(args) => cmd_report(args),
        Command::Synth(args) => cmd_synth(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
