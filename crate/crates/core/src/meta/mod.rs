//! Meta-training of the task-context and high-level skill policies.

mod agent;
mod buffer;
mod config;
mod context;
mod run;

pub use agent::{policy_from_prior, Agent, ContextItem, ContextLosses, SkillItem, SkillLosses};
pub use buffer::{HlTransition, TaskBuffer};
pub use config::{MetaTrainConfig, WindowSampling};
pub use context::{sample_contrastive_batch, triplet_loss, triplet_value, ContextPolicy, ContrastiveSample, ContextVars, TUPLE_DIM};
pub use run::{choose_batch, collect_episode, infer_context, meta_train, update_step, write_metrics_csv, Episode, EpisodeStats, MetaTrainOutput, MetricsRow, METRICS_HEADER};
