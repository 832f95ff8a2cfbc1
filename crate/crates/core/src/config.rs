//! Run configuration: a sectioned TOML file with every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::gqvae::GqvaeConfig;
use crate::maze::{DataGenConfig, EnvConfig, Region};
use crate::meta::MetaTrainConfig;
use crate::skills::PretrainConfig;

/// Environment, dataset generation and task-set settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub dt: f64,
    pub goal_radius: f64,
    pub max_steps: usize,
    pub n_traj: usize,
    pub controller_gain: f64,
    pub waypoint_radius: f64,
    pub action_noise: f64,
    pub min_len: usize,
    pub n_train: usize,
    pub n_target: usize,
    pub train_region: Region,
    pub target_region: Region,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvConfig::default();
        let g = DataGenConfig::default();
        EnvSection {
            dt: e.dt,
            goal_radius: e.goal_radius,
            max_steps: e.max_steps,
            n_traj: g.n_traj,
            controller_gain: g.controller_gain,
            waypoint_radius: g.waypoint_radius,
            action_noise: g.action_noise,
            min_len: g.min_len,
            n_train: 8,
            n_target: 2,
            train_region: Region::Any,
            target_region: Region::Any,
        }
    }
}

impl EnvSection {
    pub fn env(&self) -> EnvConfig {
        EnvConfig { dt: self.dt, goal_radius: self.goal_radius, max_steps: self.max_steps }
    }

    pub fn datagen(&self) -> DataGenConfig {
        DataGenConfig {
            n_traj: self.n_traj,
            controller_gain: self.controller_gain,
            waypoint_radius: self.waypoint_radius,
            action_noise: self.action_noise,
            min_len: self.min_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::InvalidArgument(format!("env.{key}: {msg}")));
        for (key, v) in [("dt", self.dt), ("goal_radius", self.goal_radius), ("controller_gain", self.controller_gain)] {
            if !(v > 0.0) {
                return bad(key, "must be positive");
            }
        }
        if !(self.action_noise >= 0.0) {
            return bad("action_noise", "must be non-negative");
        }
        for (key, v) in [("max_steps", self.max_steps), ("n_traj", self.n_traj), ("n_train", self.n_train)] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Maze text file; the built-in desk maze when unset.
    pub maze: Option<PathBuf>,
    /// Paths below are relative to the output directory unless absolute.
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_dir: PathBuf,
    pub reports_dir: PathBuf,
    pub env: EnvSection,
    pub pretrain: PretrainConfig,
    pub gqvae: GqvaeConfig,
    pub meta: MetaTrainConfig,
    pub adapt: AdaptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            maze: None,
            dataset: "data/dataset.dcmd".into(),
            checkpoint_dir: "checkpoints".into(),
            metrics_dir: "metrics".into(),
            reports_dir: "reports".into(),
            env: EnvSection::default(),
            pretrain: PretrainConfig::default(),
            gqvae: GqvaeConfig::default(),
            meta: MetaTrainConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["env", "pretrain", "gqvae", "meta", "adapt"];

impl RunConfig {
    /// Parses and validates config text. Errors name the offending key and,
    /// when it appears in the text, its line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| de_error(text, &e))?;
        cfg.meta.gq = cfg.gqvae;
        cfg.validate().map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                let (key, rest) = msg.split_once(": ").unwrap_or(("config", msg.as_str()));
                Error::Config { key: key.to_string(), line: key_line(text, key), msg: rest.to_string() }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { key: "--config".into(), line: None, msg: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.pretrain.validate()?;
        self.gqvae.validate()?;
        self.meta.validate()?;
        self.adapt.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn hash_of(&self, parts: &[&str]) -> String {
        let full: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        if let Some(m) = &self.maze {
            h.update(m.to_string_lossy().as_bytes());
        }
        for p in parts {
            h.update(p.as_bytes());
            h.update(full.get(*p).map(|v| v.to_string()).unwrap_or_default().as_bytes());
        }
        let d = h.finalize();
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Hash guarding the dataset: seed, maze and `env`.
    pub fn data_hash(&self) -> String {
        self.hash_of(&SECTIONS[..1])
    }

    /// Hash guarding the skill checkpoint: adds `pretrain`.
    pub fn pretrain_hash(&self) -> String {
        self.hash_of(&SECTIONS[..2])
    }

    /// Hash guarding the meta checkpoint: adds `gqvae` and `meta`.
    pub fn meta_hash(&self) -> String {
        self.hash_of(&SECTIONS[..4])
    }

    /// Hash of the whole configuration.
    pub fn full_hash(&self) -> String {
        self.hash_of(&SECTIONS)
    }

    /// Effective configuration as `key=value` pairs for file headers.
    pub fn header(&self) -> Vec<(String, String)> {
        let mut out = vec![("config_hash".to_string(), self.full_hash())];
        let full: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        for (k, v) in &full {
            match v {
                toml::Value::Table(t) => out.extend(t.iter().map(|(kk, vv)| (format!("{k}.{kk}"), vv.to_string()))),
                _ => out.push((k.clone(), v.to_string())),
            }
        }
        out
    }
}

/// 1-based line where `section.key` (or a top-level `key`) is assigned.
fn key_line(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.split_once('.').unwrap_or(("", dotted));
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(s) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = s.trim().to_string();
            continue;
        }
        let Some((k, _)) = t.split_once('=') else { continue };
        let k = k.trim();
        if (current == section && k == key) || (current.is_empty() && k == dotted) {
            return Some(i + 1);
        }
    }
    None
}

fn de_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    let key = line.and_then(|l| {
        let src = text.lines().nth(l - 1)?;
        let section = text
            .lines()
            .take(l)
            .filter_map(|t| t.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']')).map(|s| s.trim().to_string()))
            .last();
        let k = src.split_once('=').map(|(k, _)| k.trim().to_string()).or_else(|| {
            src.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']')).map(|s| s.trim().to_string())
        })?;
        Some(match section {
            Some(s) if s != k => format!("{s}.{k}"),
            _ => k,
        })
    });
    Error::Config { key: key.unwrap_or_else(|| "config".into()), line, msg: e.message().trim().to_string() }
}
