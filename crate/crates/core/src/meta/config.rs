use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gqvae::GqvaeConfig;
use crate::numerics::Activation;

/// How anchor and positive windows are cut from a task's mini dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowSampling {
    #[default]
    Contiguous,
    /// Order-preserving random subsequences.
    Subsequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    pub context_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub tuple_features: usize,
    pub activation: Activation,
    /// Filled from the `gqvae` section of a run config.
    #[serde(skip)]
    pub gq: GqvaeConfig,

    /// Weight of the context quantization loss.
    pub lambda: f64,
    /// Weight of the skill quantization loss.
    pub gamma_skill: f64,
    /// Weight of the behaviour-cloning term in both objectives.
    pub bc_weight: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub window_sampling: WindowSampling,
    /// Start the high-level policy as a copy of the skill prior.
    pub init_from_prior: bool,

    pub beta_init: f64,
    pub target_kl: f64,
    pub beta_lr: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub discount: f64,
    pub tau: f64,
    pub lr: f64,
    pub critic_lr: f64,

    pub n_c: usize,
    pub n_mini: usize,
    pub task_batch: usize,
    pub rl_batch: usize,
    pub bc_batch: usize,
    pub buffer_capacity: usize,
    pub episodes_per_task: usize,
    pub updates_per_episode: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            context_dim: 8,
            hidden: 64,
            layers: 2,
            tuple_features: 64,
            activation: Activation::Tanh,
            gq: GqvaeConfig::default(),
            lambda: 1.0,
            gamma_skill: 1.0,
            bc_weight: 1.0,
            triplet_margin: 0.5,
            triplet_weight: 1e-4,
            window_sampling: WindowSampling::Contiguous,
            init_from_prior: true,
            beta_init: 0.1,
            target_kl: 0.1,
            beta_lr: 1e-2,
            beta_min: 1e-4,
            beta_max: 1e2,
            discount: 0.99,
            tau: 0.005,
            lr: 3e-4,
            critic_lr: 3e-4,
            n_c: 20,
            n_mini: 100,
            task_batch: 8,
            rl_batch: 32,
            bc_batch: 8,
            buffer_capacity: 20_000,
            episodes_per_task: 30,
            updates_per_episode: 10,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("meta.{key}: {msg}")));
        for (key, v) in [
            ("triplet_margin", self.triplet_margin),
            ("target_kl", self.target_kl),
            ("beta_init", self.beta_init),
            ("lr", self.lr),
            ("critic_lr", self.critic_lr),
        ] {
            if !(v > 0.0) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        for (key, v) in [("lambda", self.lambda), ("gamma_skill", self.gamma_skill), ("bc_weight", self.bc_weight), ("triplet_weight", self.triplet_weight)] {
            if !(v >= 0.0) {
                return bad(key, format!("must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.tau) {
            return bad("discount", "discount and tau must lie in [0, 1]".into());
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max) {
            return bad("beta_min", "need 0 < beta_min <= beta_max".into());
        }
        if self.n_mini < 2 * self.n_c {
            return bad("n_mini", format!("must be at least 2 * n_c = {}", 2 * self.n_c));
        }
        for (key, v) in [
            ("n_c", self.n_c),
            ("context_dim", self.context_dim),
            ("task_batch", self.task_batch),
            ("rl_batch", self.rl_batch),
            ("bc_batch", self.bc_batch),
            ("buffer_capacity", self.buffer_capacity),
            ("hidden", self.hidden),
            ("tuple_features", self.tuple_features),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        self.gq.validate()
    }
}
