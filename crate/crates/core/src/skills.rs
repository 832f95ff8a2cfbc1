//! Offline skill extraction: skill encoder q(Z|s,a), skill prior p(Z|s_0) and
//! the low-level policy pi(a|s,z), trained from reward-free trajectories.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::gaussian::{standard_normal_vec, GaussianMlp};
use crate::maze::{MazeEnv, OfflineDataset, State, StateNorm, Transition, ACTION_DIM, STATE_DIM};
use crate::numerics::{named_vars, Activation, Adam, LossGraph, Parameterized, Tape, Tensor};

pub type SkillEncoder = GaussianMlp;
pub type SkillPrior = GaussianMlp;
pub type LowLevelPolicy = GaussianMlp;

const STEP_DIM: usize = STATE_DIM + ACTION_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Skill horizon K.
    pub horizon: usize,
    pub skill_dim: usize,
    /// Weight of the unit-Gaussian KL on q.
    pub alpha: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub activation: Activation,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            horizon: 10,
            skill_dim: 8,
            alpha: 1e-2,
            batch_size: 32,
            steps: 3000,
            hidden: 64,
            layers: 2,
            lr: 1e-3,
            activation: Activation::Tanh,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("pretrain.{key}: {msg}")));
        if self.horizon < 2 {
            return bad("horizon", format!("must be >= 2, got {}", self.horizon));
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", format!("must be positive, got {}", self.alpha));
        }
        if !(self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        for (key, v) in [("skill_dim", self.skill_dim), ("batch_size", self.batch_size), ("hidden", self.hidden)] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// K consecutive `(s, a)` pairs from one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub states: Vec<State>,
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl Window {
    pub fn s0(&self) -> State {
        self.states[0]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Uniform trajectory, then uniform offset.
pub fn sample_window<R: Rng + ?Sized>(data: &OfflineDataset, k: usize, rng: &mut R) -> Result<Window> {
    if data.trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = &data.trajectories[rng.random_range(0..data.trajectories.len())];
    if t.len() < k {
        return Err(Error::InvalidArgument(format!("trajectory of length {} shorter than horizon {k}", t.len())));
    }
    let off = rng.random_range(0..=t.len() - k);
    Ok(Window { states: t.states[off..off + k].to_vec(), actions: t.actions[off..off + k].to_vec() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PretrainLosses {
    /// `-sum_t log pi(a_t|s_t,z)`, batch mean.
    pub recon: f64,
    /// `KL(q || N(0, I))`, unweighted batch mean.
    pub unit_kl: f64,
    /// `KL(sg[q] || p)`, batch mean.
    pub prior_kl: f64,
}

/// The three skill networks plus their optimizers.
#[derive(Clone, Debug)]
pub struct SkillModels {
    pub config: PretrainConfig,
    pub norm: StateNorm,
    pub encoder: SkillEncoder,
    pub prior: SkillPrior,
    pub policy: LowLevelPolicy,
    opt_q: Adam,
    opt_p: Adam,
}

impl SkillModels {
    pub fn new<R: Rng + ?Sized>(config: PretrainConfig, norm: StateNorm, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, l, d, act) = (config.hidden, config.layers, config.skill_dim, config.activation);
        let encoder = GaussianMlp::new(config.horizon * STEP_DIM, h, l, d, act, false, rng);
        let prior = GaussianMlp::new(STATE_DIM, h, l, d, act, false, rng);
        let policy = GaussianMlp::new(STATE_DIM + d, h, l, ACTION_DIM, act, true, rng);
        Ok(SkillModels { config, norm, encoder, prior, policy, opt_q: Adam::new(config.lr), opt_p: Adam::new(config.lr) })
    }

    /// Flattened normalized window, `K * (state + action)` values.
    pub fn window_input(&self, w: &Window) -> Vec<f64> {
        let mut out = Vec::with_capacity(w.len() * STEP_DIM);
        for (s, a) in w.states.iter().zip(&w.actions) {
            out.extend_from_slice(&self.norm.apply(s));
            out.extend_from_slice(a);
        }
        out
    }

    fn check_windows(&self, windows: &[Window]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(w) = windows.iter().find(|w| w.len() != self.config.horizon || w.actions.len() != w.len()) {
            return Err(Error::shape("skill_window", format!("window of length {}, horizon {}", w.len(), self.config.horizon)));
        }
        Ok(())
    }

    /// Forward and backward pass of one batch. The encoder and policy follow
    /// reconstruction plus the unit KL; the prior follows `KL(sg[q] || p)`
    /// only. Returns the losses, the total and network copies holding the
    /// gradients.
    fn backward_batch<R: Rng + ?Sized>(&self, windows: &[Window], rng: &mut R) -> Result<(PretrainLosses, f64, [GaussianMlp; 3], LossGraph)> {
        self.check_windows(windows)?;
        let b = windows.len();
        let k = self.config.horizon;
        let d = self.config.skill_dim;
        let mut tape = Tape::new();
        let ev = self.encoder.bind(&mut tape, true);
        let pv = self.policy.bind(&mut tape, true);
        let rv = self.prior.bind(&mut tape, true);

        let x: Vec<f64> = windows.iter().flat_map(|w| self.window_input(w)).collect();
        let x = tape.constant_rows(b, k * STEP_DIM, x);
        let q = self.encoder.forward(&mut tape, &ev, x)?;
        let noise = tape.constant_rows(b, d, standard_normal_vec(b * d, rng));
        let z = q.sample(&mut tape, noise)?;
        let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let z_rep = tape.gather_rows(z, &idx)?;
        let s: Vec<f64> = windows.iter().flat_map(|w| w.states.iter().flat_map(|s| self.norm.apply(s))).collect();
        let s = tape.constant_rows(b * k, STATE_DIM, s);
        let pin = tape.concat(&[s, z_rep])?;
        let pi = self.policy.forward(&mut tape, &pv, pin)?;
        let a: Vec<f64> = windows.iter().flat_map(|w| w.actions.iter().flatten().copied()).collect();
        let a = tape.constant_rows(b * k, ACTION_DIM, a);
        let lp = pi.log_prob(&mut tape, a)?;
        let lp_sum = tape.sum(lp);
        let recon = tape.scale(lp_sum, -1.0 / b as f64);

        let unit = q.kl_standard(&mut tape)?;
        let unit = tape.mean(unit);
        let unit_w = tape.scale(unit, self.config.alpha);

        let s0: Vec<f64> = windows.iter().flat_map(|w| self.norm.apply(&w.s0())).collect();
        let s0 = tape.constant_rows(b, STATE_DIM, s0);
        let p = self.prior.forward(&mut tape, &rv, s0)?;
        let qs = q.stop_grad(&mut tape);
        let pk = qs.kl(&mut tape, &p)?;
        let pk = tape.mean(pk);

        let total = tape.add(recon, unit_w)?;
        let total = tape.add(total, pk)?;
        let losses = PretrainLosses {
            recon: tape.scalar_value(recon),
            unit_kl: tape.scalar_value(unit),
            prior_kl: tape.scalar_value(pk),
        };
        let total_v = total;
        let total = tape.scalar_value(total_v);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss("skill pretraining"));
        }
        let grads = tape.backward(total_v)?;
        let mut enc = self.encoder.clone();
        let mut pol = self.policy.clone();
        let mut pri = self.prior.clone();
        enc.net.store_grads(&ev, &grads);
        pol.net.store_grads(&pv, &grads);
        pri.net.store_grads(&rv, &grads);
        let mut params = named_vars("encoder", &self.encoder, ev.vars());
        params.extend(named_vars("policy", &self.policy, pv.vars()));
        params.extend(named_vars("prior", &self.prior, rv.vars()));
        let graph = LossGraph { tape, loss: total_v, params };
        Ok((losses, total, [enc, pol, pri], graph))
    }

    /// Total pretraining loss of a batch and its gradient for every
    /// parameter, named as in [`SkillModels::named_params_mut`].
    pub fn pretrain_gradients<R: Rng + ?Sized>(&self, windows: &[Window], rng: &mut R) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        let (_, total, mut nets, _) = self.backward_batch(windows, rng)?;
        let mut out = Vec::new();
        for (name, net) in ["encoder", "policy", "prior"].iter().zip(nets.iter_mut()) {
            for (n, t) in prefixed(name, net) {
                out.push((n, t.grad.clone().unwrap_or_default()));
            }
        }
        Ok((total, out))
    }

    /// The recorded pretraining objective of a batch, for checking its
    /// gradients.
    pub fn pretrain_graph<R: Rng + ?Sized>(&self, windows: &[Window], rng: &mut R) -> Result<LossGraph> {
        Ok(self.backward_batch(windows, rng)?.3)
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut p = prefixed("encoder", &mut self.encoder);
        p.extend(prefixed("policy", &mut self.policy));
        p.extend(prefixed("prior", &mut self.prior));
        p
    }

    /// One joint update of all three networks.
    pub fn pretrain_step<R: Rng + ?Sized>(&mut self, windows: &[Window], rng: &mut R) -> Result<PretrainLosses> {
        let (losses, _, [mut enc, mut pol, mut pri], _) = self.backward_batch(windows, rng)?;
        let mut opt_q = self.opt_q.clone();
        let mut qp = prefixed("encoder", &mut enc);
        qp.extend(prefixed("policy", &mut pol));
        opt_q.step(qp)?;
        self.opt_p.step(prefixed("prior", &mut pri))?;
        enc.zero_grads();
        pol.zero_grads();
        pri.zero_grads();
        self.encoder = enc;
        self.policy = pol;
        self.prior = pri;
        self.opt_q = opt_q;
        Ok(losses)
    }

    /// Mean per-action log-likelihood with `z` set to the encoder mean.
    pub fn action_log_likelihood(&self, windows: &[Window]) -> Result<f64> {
        self.check_windows(windows)?;
        let b = windows.len();
        let k = self.config.horizon;
        let mut total = 0.0;
        for w in windows {
            let q = &self.encoder.forward_plain(&self.window_input(w), 1)[0];
            let mut x = Vec::with_capacity(k * (STATE_DIM + self.config.skill_dim));
            for s in &w.states {
                x.extend_from_slice(&self.norm.apply(s));
                x.extend_from_slice(q.mean());
            }
            for (pi, a) in self.policy.forward_plain(&x, k).iter().zip(&w.actions) {
                total += pi.log_prob(a)?;
            }
        }
        Ok(total / (b * k) as f64)
    }

    /// Mean `KL(q(Z|window) || p(Z|s_0))` over windows.
    pub fn posterior_prior_kl(&self, windows: &[Window]) -> Result<f64> {
        self.posterior_prior_kl_with(&self.encoder, windows)
    }

    pub fn posterior_prior_kl_with(&self, encoder: &SkillEncoder, windows: &[Window]) -> Result<f64> {
        self.check_windows(windows)?;
        let mut total = 0.0;
        for w in windows {
            let q = &encoder.forward_plain(&self.window_input(w), 1)[0];
            let p = &self.prior.forward_plain(&self.norm.apply(&w.s0()), 1)[0];
            total += q.kl(p)?;
        }
        Ok(total / windows.len() as f64)
    }

    /// Deterministic low-level action: the policy mean.
    pub fn act(&self, s: &State, z: &[f64]) -> [f64; ACTION_DIM] {
        let mut x = Vec::with_capacity(STATE_DIM + z.len());
        x.extend_from_slice(&self.norm.apply(s));
        x.extend_from_slice(z);
        let m = self.policy.mean_plain(&x, 1);
        [m[0], m[1]]
    }

    pub fn to_archive(&self, config_hash: &str) -> Archive {
        let mut a = Archive::new("skills", config_hash);
        let n = self.norm;
        a.push("norm", &Tensor::row(vec![n.center[0], n.center[1], n.scale[0], n.scale[1]]));
        a.push_params("encoder", &self.encoder);
        a.push_params("prior", &self.prior);
        a.push_params("policy", &self.policy);
        a
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        self.to_archive(config_hash).save(path)
    }

    /// Rebuilds from a checkpoint written under the same config hash.
    pub fn load(path: &Path, config: PretrainConfig, config_hash: &str) -> Result<Self> {
        let a = Archive::load(path, "skills", config_hash)?;
        let n = a.get("norm")?.data().to_vec();
        if n.len() != 4 {
            return Err(Error::Checkpoint { path: path.into(), msg: "bad normalization record".into() });
        }
        let norm = StateNorm { center: [n[0], n[1]], scale: [n[2], n[3]] };
        let mut rng = crate::rng::stream(0, "skills_load", 0);
        let mut m = SkillModels::new(config, norm, &mut rng)?;
        a.load_params("encoder", &mut m.encoder)?;
        a.load_params("prior", &mut m.prior)?;
        a.load_params("policy", &mut m.policy)?;
        Ok(m)
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, p: &'a mut impl Parameterized) -> Vec<(String, &'a mut Tensor)> {
    p.params_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Runs the pretraining loop for `config.steps` updates.
pub fn pretrain(data: &OfflineDataset, config: PretrainConfig, norm: StateNorm, seed: u64) -> Result<(SkillModels, Vec<PretrainLosses>)> {
    let mut init = crate::rng::stream(seed, "skill_init", 0);
    let mut m = SkillModels::new(config, norm, &mut init)?;
    if data.trajectories.iter().any(|t| t.len() < config.horizon) {
        return Err(Error::InvalidArgument("dataset has trajectories shorter than the skill horizon".into()));
    }
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = crate::rng::stream(seed, "skill_batch", step as u64);
        let batch = (0..config.batch_size)
            .map(|_| sample_window(data, config.horizon, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        log.push(m.pretrain_step(&batch, &mut rng)?);
    }
    Ok((m, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillRollout {
    pub transitions: Vec<Transition>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Executes skill `z` for up to K steps with the deterministic low-level
/// policy, stopping early when the episode ends.
pub fn rollout_skill(env: &mut MazeEnv, skills: &SkillModels, z: &[f64]) -> Result<SkillRollout> {
    if env.is_done() {
        return Err(Error::EpisodeDone);
    }
    if z.len() != skills.config.skill_dim {
        return Err(Error::shape("rollout_skill", format!("z of length {}, skill dim {}", z.len(), skills.config.skill_dim)));
    }
    let mut out = SkillRollout { transitions: Vec::with_capacity(skills.config.horizon), reward: 0.0, done: false, success: false };
    for _ in 0..skills.config.horizon {
        let s = env.state();
        let a = skills.act(&s, z);
        let step = env.step(a)?;
        out.transitions.push(Transition { s, a, r: step.reward, done: step.done, s_next: step.state });
        out.reward += step.reward;
        if step.done {
            out.done = true;
            out.success = step.success;
            break;
        }
    }
    Ok(out)
}
