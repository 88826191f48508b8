//! Perplexities, diversity statistics, and the multiple-choice harness.

mod diversity;
mod mc;
mod ppl;
mod report;

pub use diversity::{diversity_stats, sequence_diversity, Diversity};
pub use mc::{candidate_scores, choose, multiple_choice_eval, McItem, McMode, McOptions, McResult, McTask};
pub use ppl::{eval_windows, judge_ppl, zero_shot_ppl, CausalLm, LmRef};
pub use report::{fingerprint, Metric, MetricsReport};
