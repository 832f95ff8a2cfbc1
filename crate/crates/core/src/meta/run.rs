use std::io::Write;

use rand::Rng;
use serde::Serialize;

use super::agent::{Agent, ContextItem, ContextLosses, SkillItem, SkillLosses};
use super::buffer::{HlTransition, TaskBuffer};
use super::config::MetaTrainConfig;
use super::context::sample_contrastive_batch;
use crate::error::{Error, Result};
use crate::maze::{EnvConfig, MazeEnv, MazeSpec, Task, Transition};
use crate::rng::stream;
use crate::skills::{rollout_skill, SkillModels};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpisodeStats {
    pub task_id: usize,
    pub ret: f64,
    pub success: bool,
    pub env_steps: usize,
    pub hl_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub stats: EpisodeStats,
    pub raw: Vec<Transition>,
    pub hl: Vec<HlTransition>,
}

/// Runs one episode with a fixed context `c`. With `explore` skills are
/// sampled, otherwise the distribution mean is executed.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode<R: Rng + ?Sized>(
    maze: &MazeSpec,
    env_cfg: &EnvConfig,
    task: Task,
    agent: &Agent,
    skills: &SkillModels,
    c: &[f64],
    explore: bool,
    rng: &mut R,
) -> Result<Episode> {
    let mut env = MazeEnv::new(maze, *env_cfg, task);
    let mut raw = Vec::new();
    let mut hl = Vec::new();
    let mut success = false;
    while !env.is_done() {
        let s = env.state();
        let z = agent.select_skill(&s, c, explore, rng)?;
        let out = rollout_skill(&mut env, skills, &z)?;
        success |= out.success;
        hl.push(HlTransition { s, z, r: out.reward, s_next: env.state(), done: out.success });
        raw.extend(out.transitions);
    }
    let ret = hl.iter().map(|t| t.r).sum();
    let stats = EpisodeStats { task_id: task.id, ret, success, env_steps: raw.len(), hl_steps: hl.len() };
    Ok(Episode { stats, raw, hl })
}

/// Context for the next episode of a task: from a random window of its
/// buffer, or unit-Gaussian while the buffer is shorter than `n_c`.
pub fn infer_context<R: Rng + ?Sized>(agent: &Agent, buffer: &TaskBuffer, explore: bool, rng: &mut R) -> Result<Vec<f64>> {
    let window = buffer.random_raw_window(agent.cfg.n_c, rng);
    agent.sample_context(window.as_deref(), explore, rng)
}

/// One row of the meta-training metrics file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub task_id: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub success: bool,
    pub l_bc: f64,
    pub l_gq_context: f64,
    pub l_gq_skill: f64,
    pub l_triplet: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub beta: f64,
    pub cb_context_entropy: f64,
    pub cb_skill_entropy: f64,
}

pub const METRICS_HEADER: &str = "iter,task_id,return,success,l_bc,l_gq_context,l_gq_skill,l_triplet,actor_loss,critic_loss,beta,cb_context_entropy,cb_skill_entropy";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.task_id,
            self.ret,
            self.success as u8,
            self.l_bc,
            self.l_gq_context,
            self.l_gq_skill,
            self.l_triplet,
            self.actor_loss,
            self.critic_loss,
            self.beta,
            self.cb_context_entropy,
            self.cb_skill_entropy
        )
    }
}

/// Writes `# key=value` header lines, the column header and every row.
pub fn write_metrics_csv<W: Write>(w: &mut W, header: &[(String, String)], rows: &[MetricsRow]) -> Result<()> {
    for (k, v) in header {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

pub struct MetaTrainOutput {
    pub agent: Agent,
    pub buffers: Vec<TaskBuffer>,
    pub metrics: Vec<MetricsRow>,
}

/// Builds one update's inputs for the tasks in `batch` and runs the
/// context update followed by the skill update.
pub fn update_step<R: Rng + ?Sized>(
    agent: &mut Agent,
    skills: &SkillModels,
    buffers: &[TaskBuffer],
    batch: &[usize],
    rng: &mut R,
) -> Result<(ContextLosses, SkillLosses)> {
    let cfg = agent.cfg;
    let k = skills.config.horizon;
    let mut citems = Vec::with_capacity(batch.len());
    for &t in batch {
        let (anchor, triplet) = match sample_contrastive_batch(buffers, t, &cfg, rng) {
            Some(s) => (s.anchor, Some((s.positive, s.negative))),
            None => {
                log::trace!("task {t}: contrastive term skipped");
                let w = buffers[t].random_raw_window(cfg.n_c, rng).ok_or(Error::EmptyDataset)?;
                (w, None)
            }
        };
        let bc = (0..cfg.bc_batch).filter_map(|_| buffers[t].sample_skill_window(k, rng)).collect();
        citems.push(ContextItem { anchor, triplet, bc });
    }
    let (closs, contexts) = agent.context_update(skills, &citems, rng)?;
    let sitems: Vec<SkillItem> = batch
        .iter()
        .zip(contexts)
        .map(|(&t, context)| SkillItem {
            context,
            hl: buffers[t].sample_hl(cfg.rl_batch, rng).into_iter().cloned().collect(),
            bc: (0..cfg.bc_batch).filter_map(|_| buffers[t].sample_skill_window(k, rng)).collect(),
        })
        .collect();
    let sloss = agent.skill_update(skills, &sitems, true, rng)?;
    Ok((closs, sloss))
}

/// Round-robin meta-training over `tasks`: one episode per iteration,
/// followed by `updates_per_episode` updates on up to `task_batch` tasks
/// that hold enough data. One metrics row per iteration.
pub fn meta_train(
    maze: &MazeSpec,
    env_cfg: &EnvConfig,
    tasks: &[Task],
    skills: &SkillModels,
    cfg: MetaTrainConfig,
    seed: u64,
) -> Result<MetaTrainOutput> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("meta-training needs at least one task".into()));
    }
    let mut agent = Agent::new(cfg, skills, &mut stream(seed, "meta_init", 0))?;
    let mut buffers = vec![TaskBuffer::new(cfg.buffer_capacity); tasks.len()];
    let mut metrics = Vec::new();
    let iters = cfg.episodes_per_task * tasks.len();
    let k = skills.config.horizon;
    for iter in 0..iters {
        let ti = iter % tasks.len();
        let mut rng = stream(seed, "meta_episode", iter as u64);
        let c = infer_context(&agent, &buffers[ti], true, &mut rng)?;
        let ep = collect_episode(maze, env_cfg, tasks[ti], &agent, skills, &c, true, &mut rng)?;
        buffers[ti].push_episode(&ep.raw, &ep.hl);

        let ready: Vec<usize> = (0..tasks.len()).filter(|&t| buffers[t].raw_len() >= cfg.n_c.max(k) && buffers[t].hl_len() > 0).collect();
        let mut row = MetricsRow { iter, task_id: tasks[ti].id, ret: ep.stats.ret, success: ep.stats.success, ..MetricsRow::default() };
        let mut done = 0usize;
        if !ready.is_empty() {
            let mut rng = stream(seed, "meta_update", iter as u64);
            for _ in 0..cfg.updates_per_episode {
                let batch = choose_batch(&ready, cfg.task_batch, &mut rng);
                match update_step(&mut agent, skills, &buffers, &batch, &mut rng) {
                    Ok((c, s)) => {
                        row.l_bc += (c.bc + s.bc) / 2.0;
                        row.l_gq_context += c.gq;
                        row.l_gq_skill += s.gq;
                        row.l_triplet += c.triplet;
                        row.actor_loss += s.actor;
                        row.critic_loss += s.critic;
                        done += 1;
                    }
                    Err(Error::NonFiniteLoss(what)) => log::warn!("iteration {iter}: {what} skipped"),
                    Err(e) => return Err(e),
                }
            }
        }
        if done > 0 {
            let n = done as f64;
            for v in [
                &mut row.l_bc,
                &mut row.l_gq_context,
                &mut row.l_gq_skill,
                &mut row.l_triplet,
                &mut row.actor_loss,
                &mut row.critic_loss,
            ] {
                *v /= n;
            }
        }
        row.beta = agent.beta();
        row.cb_context_entropy = agent.cb_c.usage_entropy();
        row.cb_skill_entropy = agent.cb_z.usage_entropy();
        if iter % tasks.len() == tasks.len() - 1 {
            let recent = &metrics[metrics.len().saturating_sub(tasks.len() - 1)..];
            let rate = (recent.iter().filter(|r: &&MetricsRow| r.success).count() + row.success as usize) as f64 / tasks.len() as f64;
            log::info!("meta-train round {}: success {:.2}, beta {:.4}", iter / tasks.len(), rate, row.beta);
        }
        metrics.push(row);
    }
    Ok(MetaTrainOutput { agent, buffers, metrics })
}

/// Up to `n` distinct entries of `ready`, in sampled order.
pub fn choose_batch<R: Rng + ?Sized>(ready: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if ready.len() <= n {
        return ready.to_vec();
    }
    rand::seq::index::sample(rng, ready.len(), n).into_iter().map(|i| ready[i]).collect()
}
