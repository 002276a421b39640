//! Tree-search candidate generation with mutual-consistency verification for
//! small-language-model reasoning.
//!
//! The pipeline has two stages. A generator backend explores a five-action
//! reasoning grammar under UCT-guided Monte Carlo tree search, collecting
//! candidate solution trajectories across rollouts. A discriminator backend
//! then re-completes a masked suffix of each candidate; trajectories whose
//! answers the discriminator reproduces are kept, and the final answer is the
//! validated trajectory with the highest reward times terminal confidence.
//!
//! Everything runs against an abstract text-completion contract with three
//! implementations: an HTTP client for completion-API endpoints, a seeded
//! synthetic oracle for desk-scale experiments, and a replay backend serving
//! mirrored request logs.

pub mod actions;
pub mod answers;
pub mod backend;
pub mod consistency;
pub mod engine;
pub mod eval;
pub mod seed;
pub mod tree;

pub use actions::{ActionConfig, ActionKind, Step, TemplateRegistry};
pub use answers::{answers_equal, extract_answer, majority_vote, AnswerKind, CanonicalAnswer};
pub use backend::{BackendSession, CompletionBackend, SyntheticBank, SyntheticOracle};
pub use consistency::{mask_trajectory, select_final, verify, MaskPolicy, MaskSpec, Verdict};
pub use engine::{run_search, SearchConfig, SearchOutcome};
pub use eval::{load_dataset, run_eval, Method, RunConfig, RunLog};
pub use tree::{uct_score, NodeId, ReasoningTree, Trajectory};
