//! Meta-test adaptation: condition on a target task, then fine-tune the
//! high-level skill policy with the context side frozen.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::standard_normal_vec;
use crate::maze::{EnvConfig, MazeSpec, Task};
use crate::meta::{collect_episode, infer_context, Agent, EpisodeStats, SkillItem, TaskBuffer};
use crate::rng::stream;
use crate::skills::SkillModels;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Conditioning episodes before fine-tuning.
    pub n_cond: usize,
    /// Fine-tuning episodes.
    pub budget: usize,
    pub updates_per_episode: usize,
    pub rl_batch: usize,
    pub bc_batch: usize,
    /// Keep the behaviour-cloning term during fine-tuning.
    pub bc_in_fine_tune: bool,
    /// Evaluation episodes averaged into the final success rate.
    pub final_window: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            n_cond: 20,
            budget: 50,
            updates_per_episode: 10,
            rl_batch: 64,
            bc_batch: 8,
            bc_in_fine_tune: false,
            final_window: 10,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("rl_batch", self.rl_batch), ("final_window", self.final_window)] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("adapt.{key}: must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Outcome of conditioning on a target task.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub context: Vec<f64>,
    /// True when no conditioning data existed and `context` is a unit-Gaussian draw.
    pub unconditioned: bool,
    pub buffer: TaskBuffer,
    pub episodes: Vec<EpisodeStats>,
}

/// Runs `n_cond` exploratory episodes on `task`, then infers `c*` from the
/// whole accumulated buffer. Leaves every network untouched.
pub fn condition(
    maze: &MazeSpec,
    env_cfg: &EnvConfig,
    task: Task,
    agent: &Agent,
    skills: &SkillModels,
    n_cond: usize,
    seed: u64,
) -> Result<Conditioning> {
    let mut buffer = TaskBuffer::new(agent.cfg.buffer_capacity);
    let mut episodes = Vec::with_capacity(n_cond);
    for e in 0..n_cond {
        let mut rng = stream(seed, "condition", e as u64);
        let c = infer_context(agent, &buffer, true, &mut rng)?;
        let ep = collect_episode(maze, env_cfg, task, agent, skills, &c, true, &mut rng)?;
        buffer.push_episode(&ep.raw, &ep.hl);
        episodes.push(ep.stats);
    }
    let mut rng = stream(seed, "condition_final", 0);
    let (context, unconditioned) = if buffer.raw_len() == 0 {
        log::warn!("no conditioning data: context drawn from the unit Gaussian");
        (standard_normal_vec(agent.context_dim(), &mut rng), true)
    } else {
        (agent.sample_context(Some(&buffer.all_raw()), true, &mut rng)?, false)
    };
    Ok(Conditioning { context, unconditioned, buffer, episodes })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub task_id: usize,
    pub episodes: Vec<EpisodeRecord>,
    pub episodes_to_first_success: Option<usize>,
    pub final_success_rate: f64,
}

impl AdaptationReport {
    fn from_records(task_id: usize, episodes: Vec<EpisodeRecord>, final_window: usize) -> Self {
        let first = episodes.iter().position(|r| r.success).map(|i| i + 1);
        let tail = &episodes[episodes.len().saturating_sub(final_window)..];
        let rate = if tail.is_empty() { 0.0 } else { tail.iter().filter(|r| r.success).count() as f64 / tail.len() as f64 };
        AdaptationReport { task_id, episodes, episodes_to_first_success: first, final_success_rate: rate }
    }

    /// Mean success over evaluation episodes `[start, end)`.
    pub fn success_rate(&self, start: usize, end: usize) -> f64 {
        let s = &self.episodes[start.min(self.episodes.len())..end.min(self.episodes.len())];
        if s.is_empty() {
            return 0.0;
        }
        s.iter().filter(|r| r.success).count() as f64 / s.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "episode,return,success")?;
        for r in &self.episodes {
            writeln!(w, "{},{},{}", r.episode, r.ret, r.success as u8)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "task_id": self.task_id,
            "episodes": self.episodes.len(),
            "episodes_to_first_success": self.episodes_to_first_success,
            "final_success_rate": self.final_success_rate,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
        self.write_csv(&mut f)?;
        f.flush()?;
        let json = serde_json::to_string_pretty(&self.summary_json()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
        Ok(())
    }
}

/// Deterministic evaluation episodes with no parameter updates.
pub fn evaluate(
    maze: &MazeSpec,
    env_cfg: &EnvConfig,
    task: Task,
    agent: &Agent,
    skills: &SkillModels,
    context: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<AdaptationReport> {
    let records = (0..episodes)
        .map(|e| {
            let mut rng = stream(seed, "evaluate", e as u64);
            let ep = collect_episode(maze, env_cfg, task, agent, skills, context, false, &mut rng)?;
            Ok(EpisodeRecord { episode: e + 1, ret: ep.stats.ret, success: ep.stats.success })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptationReport::from_records(task.id, records, episodes))
}

/// Alternates an exploratory training episode plus skill-side updates with
/// a deterministic evaluation episode, `cfg.budget` times. Only the
/// high-level policy, skill codebook, skill decoder and critics change.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    maze: &MazeSpec,
    env_cfg: &EnvConfig,
    task: Task,
    agent: &mut Agent,
    skills: &SkillModels,
    conditioning: &Conditioning,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptationReport> {
    if cfg.budget < 1 {
        return Err(Error::InvalidArgument("fine-tuning budget must be at least 1".into()));
    }
    cfg.validate()?;
    let c = &conditioning.context;
    let k = skills.config.horizon;
    let mut buffer = conditioning.buffer.clone();
    let mut records = Vec::with_capacity(cfg.budget);
    for e in 0..cfg.budget {
        let mut rng = stream(seed, "adapt_episode", e as u64);
        let ep = collect_episode(maze, env_cfg, task, agent, skills, c, true, &mut rng)?;
        buffer.push_episode(&ep.raw, &ep.hl);
        let mut rng = stream(seed, "adapt_update", e as u64);
        for _ in 0..cfg.updates_per_episode {
            let item = SkillItem {
                context: c.clone(),
                hl: buffer.sample_hl(cfg.rl_batch, &mut rng).into_iter().cloned().collect(),
                bc: (0..cfg.bc_batch).filter_map(|_| buffer.sample_skill_window(k, &mut rng)).collect(),
            };
            match agent.skill_update(skills, &[item], cfg.bc_in_fine_tune, &mut rng) {
                Ok(_) => {}
                Err(Error::NonFiniteLoss(what)) => log::warn!("fine-tune episode {e}: {what} skipped"),
                Err(err) => return Err(err),
            }
        }
        let mut rng = stream(seed, "adapt_eval", e as u64);
        let ev = collect_episode(maze, env_cfg, task, agent, skills, c, false, &mut rng)?;
        records.push(EpisodeRecord { episode: e + 1, ret: ev.stats.ret, success: ev.stats.success });
    }
    Ok(AdaptationReport::from_records(task.id, records, cfg.final_window))
}

/// Control run: a freshly initialised skill side (random weights, no
/// meta-training) fine-tuned with the same schedule and seed streams.
#[allow(clippy::too_many_arguments)]
pub fn baseline_scratch(
    maze: &MazeSpec,
    env_cfg: &EnvConfig,
    task: Task,
    agent: &Agent,
    skills: &SkillModels,
    conditioning: &Conditioning,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptationReport> {
    let mut fresh = agent.clone();
    fresh.reset_skill_side(skills, false, &mut stream(seed, "scratch_init", 0))?;
    fine_tune(maze, env_cfg, task, &mut fresh, skills, conditioning, cfg, seed)
}
