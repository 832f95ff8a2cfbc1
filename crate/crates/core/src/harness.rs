//! Pipeline stages behind the command-line interface, plus an in-memory
//! end-to-end run used by tests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapt::{baseline_scratch, condition, evaluate, fine_tune, AdaptationReport};
use crate::checkpoint::{param_checksum, Archive};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::maze::{generate_dataset, make_task_sets, MazeSpec, OfflineDataset, Task, TaskSets};
use crate::meta::{meta_train, write_metrics_csv, Agent, MetricsRow};
use crate::par;
use crate::skills::{pretrain, PretrainLosses, SkillModels};

const META_KIND: &str = "meta";

/// Resolves config paths against the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
    pub cfg: RunConfig,
}

impl Layout {
    pub fn new(out: &Path, mut cfg: RunConfig) -> Self {
        cfg.meta.gq = cfg.gqvae;
        Layout { out: out.to_path_buf(), cfg }
    }

    fn under(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.under(&self.cfg.dataset)
    }

    pub fn dataset_hash_file(&self) -> PathBuf {
        let mut s = self.dataset().into_os_string();
        s.push(".hash");
        s.into()
    }

    pub fn skills_checkpoint(&self) -> PathBuf {
        self.under(&self.cfg.checkpoint_dir).join("skills.dcck")
    }

    pub fn meta_checkpoint(&self) -> PathBuf {
        self.under(&self.cfg.checkpoint_dir).join("meta.dcck")
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.under(&self.cfg.metrics_dir).join(name)
    }

    pub fn reports(&self) -> PathBuf {
        self.under(&self.cfg.reports_dir)
    }
}

pub fn load_maze(cfg: &RunConfig) -> Result<MazeSpec> {
    match &cfg.maze {
        None => Ok(MazeSpec::desk()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config { key: "maze".into(), line: None, msg: format!("{}: {e}", p.display()) })?;
            MazeSpec::parse(&text)
        }
    }
}

pub fn task_sets(cfg: &RunConfig, maze: &MazeSpec) -> Result<TaskSets> {
    let e = &cfg.env;
    make_task_sets(maze, e.n_train, e.n_target, e.train_region, e.target_region, cfg.seed)
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn write_file(p: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    create_parent(p)?;
    let mut w = BufWriter::new(fs::File::create(p)?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    create_parent(p)?;
    fs::write(p, s + "\n")?;
    Ok(())
}

pub fn gen_data(l: &Layout) -> Result<PathBuf> {
    let maze = load_maze(&l.cfg)?;
    let data = generate_dataset(&maze, &l.cfg.env.env(), &l.cfg.env.datagen(), l.cfg.env.n_traj, l.cfg.seed)?;
    let path = l.dataset();
    create_parent(&path)?;
    data.save(&path)?;
    fs::write(l.dataset_hash_file(), l.cfg.data_hash() + "\n")?;
    log::info!("wrote {} trajectories ({} transitions) to {}", data.trajectories.len(), data.num_transitions(), path.display());
    Ok(path)
}

/// Loads the dataset after checking its hash against the `env` section.
pub fn load_dataset(l: &Layout) -> Result<OfflineDataset> {
    let path = l.dataset();
    let hash = fs::read_to_string(l.dataset_hash_file()).map_err(|_| Error::MissingCheckpoint(path.clone()))?;
    if hash.trim() != l.cfg.data_hash() {
        return Err(Error::Checkpoint { path, msg: "dataset was generated with a different env config".into() });
    }
    OfflineDataset::load(&path).map_err(|e| match e {
        Error::Io(_) => Error::MissingCheckpoint(path.clone()),
        e => e,
    })
}

pub fn write_pretrain_csv<W: Write>(w: &mut W, header: &[(String, String)], log: &[PretrainLosses]) -> Result<()> {
    for (k, v) in header {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "step,recon,unit_kl,prior_kl")?;
    for (i, r) in log.iter().enumerate() {
        writeln!(w, "{},{},{},{}", i + 1, r.recon, r.unit_kl, r.prior_kl)?;
    }
    Ok(())
}

pub fn run_pretrain(l: &Layout) -> Result<PathBuf> {
    let maze = load_maze(&l.cfg)?;
    let data = load_dataset(l)?;
    let (models, log) = pretrain(&data, l.cfg.pretrain, maze.state_norm(), l.cfg.seed)?;
    let path = l.skills_checkpoint();
    create_parent(&path)?;
    models.save(&path, &l.cfg.pretrain_hash())?;
    write_file(&l.metrics("pretrain.csv"), |w| write_pretrain_csv(w, &l.cfg.header(), &log))?;
    if let Some(last) = log.last() {
        log::info!("pretrain done: recon {:.4}, prior kl {:.4}", last.recon, last.prior_kl);
    }
    Ok(path)
}

pub fn load_skills(l: &Layout) -> Result<SkillModels> {
    let maze = load_maze(&l.cfg)?;
    let models = SkillModels::load(&l.skills_checkpoint(), l.cfg.pretrain, &l.cfg.pretrain_hash())?;
    if models.norm != maze.state_norm() {
        return Err(Error::Checkpoint { path: l.skills_checkpoint(), msg: "state normalisation differs from the maze".into() });
    }
    Ok(models)
}

pub fn load_agent(l: &Layout, skills: &SkillModels) -> Result<Agent> {
    let a = Archive::load(&l.meta_checkpoint(), META_KIND, &l.cfg.meta_hash())?;
    Agent::from_archive(&a, l.cfg.meta, skills)
}

pub fn run_meta_train(l: &Layout) -> Result<PathBuf> {
    let skills = load_skills(l)?;
    let maze = load_maze(&l.cfg)?;
    let tasks = task_sets(&l.cfg, &maze)?;
    let before = param_checksum(&skills.policy);
    let out = meta_train(&maze, &l.cfg.env.env(), &tasks.train, &skills, l.cfg.meta, l.cfg.seed)?;
    if param_checksum(&skills.policy) != before {
        return Err(Error::InvalidArgument("low-level policy changed during meta-training".into()));
    }
    let path = l.meta_checkpoint();
    create_parent(&path)?;
    out.agent.to_archive(&l.cfg.meta_hash()).save(&path)?;
    write_file(&l.metrics("meta_train.csv"), |w| write_metrics_csv(w, &l.cfg.header(), &out.metrics))?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetSummary {
    pub task_id: usize,
    pub goal: [f64; 2],
    pub conditioning_successes: usize,
    pub unconditioned: bool,
    pub episodes_to_first_success: Option<usize>,
    pub final_success_rate: f64,
    pub scratch_final_success_rate: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetaTestSummary {
    pub config_hash: String,
    pub budget: usize,
    pub targets: Vec<TargetSummary>,
    pub mean_final_success_rate: f64,
    pub mean_scratch_final_success_rate: Option<f64>,
}

/// Reports for one target task.
#[derive(Clone, Debug)]
pub struct TargetResult {
    pub summary: TargetSummary,
    pub report: AdaptationReport,
    pub scratch: Option<AdaptationReport>,
}

/// Conditioning plus fine-tuning (or zero-shot evaluation for budget 0) on
/// one target task, optionally with the scratch control.
pub fn adapt_target(
    cfg: &RunConfig,
    maze: &MazeSpec,
    agent: &Agent,
    skills: &SkillModels,
    task: Task,
    budget: usize,
    with_scratch: bool,
) -> Result<TargetResult> {
    let env = cfg.env.env();
    let seed = rand::RngCore::next_u64(&mut crate::rng::stream(cfg.seed, "adapt_target", task.id as u64));
    let frozen = (param_checksum(&agent.context), param_checksum(&agent.cb_c), param_checksum(&skills.policy));
    let cond = condition(maze, &env, task, agent, skills, cfg.adapt.n_cond, seed)?;
    let ac = crate::adapt::AdaptConfig { budget, ..cfg.adapt };
    let (report, scratch) = if budget == 0 {
        (evaluate(maze, &env, task, agent, skills, &cond.context, cfg.adapt.final_window, seed)?, None)
    } else {
        let mut tuned = agent.clone();
        let r = fine_tune(maze, &env, task, &mut tuned, skills, &cond, &ac, seed)?;
        if (param_checksum(&tuned.context), param_checksum(&tuned.cb_c), param_checksum(&skills.policy)) != frozen {
            return Err(Error::InvalidArgument("frozen module changed during fine-tuning".into()));
        }
        let s = if with_scratch { Some(baseline_scratch(maze, &env, task, agent, skills, &cond, &ac, seed)?) } else { None };
        (r, s)
    };
    let summary = TargetSummary {
        task_id: task.id,
        goal: task.goal,
        conditioning_successes: cond.episodes.iter().filter(|e| e.success).count(),
        unconditioned: cond.unconditioned,
        episodes_to_first_success: report.episodes_to_first_success,
        final_success_rate: report.final_success_rate,
        scratch_final_success_rate: scratch.as_ref().map(|s| s.final_success_rate),
    };
    Ok(TargetResult { summary, report, scratch })
}

/// Adapts to every target task in parallel.
pub fn adapt_all(
    cfg: &RunConfig,
    maze: &MazeSpec,
    agent: &Agent,
    skills: &SkillModels,
    targets: &[Task],
    budget: usize,
    with_scratch: bool,
) -> Result<Vec<TargetResult>> {
    par::map_indexed(targets.len(), |i| adapt_target(cfg, maze, agent, skills, targets[i], budget, with_scratch))
        .into_iter()
        .collect()
}

fn summarize(cfg: &RunConfig, budget: usize, results: &[TargetResult]) -> MetaTestSummary {
    let n = results.len().max(1) as f64;
    let mean = results.iter().map(|r| r.summary.final_success_rate).sum::<f64>() / n;
    let scratch: Option<Vec<f64>> = results.iter().map(|r| r.summary.scratch_final_success_rate).collect();
    MetaTestSummary {
        config_hash: cfg.full_hash(),
        budget,
        targets: results.iter().map(|r| r.summary.clone()).collect(),
        mean_final_success_rate: mean,
        mean_scratch_final_success_rate: scratch.filter(|s| !s.is_empty()).map(|s| s.iter().sum::<f64>() / n),
    }
}

fn save_results(l: &Layout, name: &str, budget: usize, results: &[TargetResult]) -> Result<MetaTestSummary> {
    let dir = l.reports();
    for r in results {
        r.report.save(&dir, &format!("{name}_task{}", r.summary.task_id))?;
        if let Some(s) = &r.scratch {
            s.save(&dir, &format!("{name}_task{}_scratch", r.summary.task_id))?;
        }
    }
    let summary = summarize(&l.cfg, budget, results);
    write_json(&dir.join(format!("{name}.json")), &summary)?;
    Ok(summary)
}

/// Conditioning and fine-tuning on every target task with the configured budget.
pub fn run_meta_test(l: &Layout) -> Result<MetaTestSummary> {
    let skills = load_skills(l)?;
    let agent = load_agent(l, &skills)?;
    let maze = load_maze(&l.cfg)?;
    let tasks = task_sets(&l.cfg, &maze)?;
    let results = adapt_all(&l.cfg, &maze, &agent, &skills, &tasks.target, l.cfg.adapt.budget, false)?;
    save_results(l, "meta_test", l.cfg.adapt.budget, &results)
}

/// Like meta-test but with an explicit budget and the scratch control;
/// budget 0 gives a zero-shot report.
pub fn run_eval(l: &Layout, budget: Option<usize>) -> Result<MetaTestSummary> {
    let budget = budget.unwrap_or(l.cfg.adapt.budget);
    let skills = load_skills(l)?;
    let agent = load_agent(l, &skills)?;
    let maze = load_maze(&l.cfg)?;
    let tasks = task_sets(&l.cfg, &maze)?;
    let results = adapt_all(&l.cfg, &maze, &agent, &skills, &tasks.target, budget, budget > 0)?;
    save_results(l, "eval", budget, &results)
}

pub fn dump_codebook(l: &Layout) -> Result<Vec<PathBuf>> {
    let skills = load_skills(l)?;
    let agent = load_agent(l, &skills)?;
    let c = l.metrics("codebook_context.csv");
    let z = l.metrics("codebook_skill.csv");
    write_file(&c, |w| agent.cb_c.write_csv(w))?;
    write_file(&z, |w| agent.cb_z.write_csv(w))?;
    Ok(vec![c, z])
}

/// Everything one in-memory pipeline run produces.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub metrics: Vec<MetricsRow>,
    pub targets: Vec<TargetResult>,
    pub low_level_checksum_before: String,
    pub low_level_checksum_after: String,
}

impl PipelineRun {
    pub fn mean_final_success(&self) -> f64 {
        self.targets.iter().map(|t| t.summary.final_success_rate).sum::<f64>() / self.targets.len().max(1) as f64
    }

    pub fn mean_scratch_success(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.targets.iter().map(|t| t.summary.scratch_final_success_rate).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
    }

    /// Metrics CSV and every report as bytes, for determinism checks.
    pub fn artifact_bytes(&self, cfg: &RunConfig) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &cfg.header(), &self.metrics)?;
        for t in &self.targets {
            t.report.write_csv(&mut out)?;
            out.extend(t.report.summary_json().to_string().bytes());
            if let Some(s) = &t.scratch {
                s.write_csv(&mut out)?;
                out.extend(s.summary_json().to_string().bytes());
            }
        }
        Ok(out)
    }
}

/// Data generation, pretraining, meta-training and adaptation on every
/// target, without touching the filesystem.
pub fn run_pipeline(cfg: &RunConfig, with_scratch: bool) -> Result<PipelineRun> {
    let (maze, skills) = pretrain_stage(cfg)?;
    run_from_skills(cfg, &maze, &skills, with_scratch)
}

/// Dataset generation and skill pre-training, in memory.
pub fn pretrain_stage(cfg: &RunConfig) -> Result<(MazeSpec, SkillModels)> {
    cfg.validate()?;
    let maze = load_maze(cfg)?;
    let data = generate_dataset(&maze, &cfg.env.env(), &cfg.env.datagen(), cfg.env.n_traj, cfg.seed)?;
    let (skills, _) = pretrain(&data, cfg.pretrain, maze.state_norm(), cfg.seed)?;
    Ok((maze, skills))
}

/// Meta-training and target adaptation on already pre-trained skills.
pub fn run_from_skills(cfg: &RunConfig, maze: &MazeSpec, skills: &SkillModels, with_scratch: bool) -> Result<PipelineRun> {
    cfg.validate()?;
    let env = cfg.env.env();
    let tasks = task_sets(cfg, maze)?;
    let before = param_checksum(&skills.policy);
    let mut meta = cfg.meta;
    meta.gq = cfg.gqvae;
    let out = meta_train(maze, &env, &tasks.train, skills, meta, cfg.seed)?;
    let targets = adapt_all(cfg, maze, &out.agent, skills, &tasks.target, cfg.adapt.budget, with_scratch)?;
    Ok(PipelineRun {
        metrics: out.metrics,
        targets,
        low_level_checksum_after: param_checksum(&skills.policy),
        low_level_checksum_before: before,
    })
}
