use rand::Rng;
use serde::Serialize;

use super::buffer::HlTransition;
use super::config::MetaTrainConfig;
use super::context::{triplet_loss, ContextPolicy};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::gaussian::{standard_normal_vec, DiagGaussian, GaussianMlp, GaussianVars};
use crate::gqvae::{encoder_embed, gather_codes, gq_loss, quantize_forward, Codebook, CodebookMode, Maintenance, Reduction};
use crate::maze::{State, Transition, STATE_DIM};
use crate::numerics::{named_vars, Adam, LossGraph, Mlp, Tape, Tensor, Var};
use crate::skills::{prefixed, SkillModels, Window};

/// Context-update inputs for one task.
#[derive(Clone, Debug)]
pub struct ContextItem {
    pub anchor: Vec<Transition>,
    /// Positive and negative windows when a contrastive sample exists.
    pub triplet: Option<(Vec<Transition>, Vec<Transition>)>,
    pub bc: Vec<Window>,
}

/// Skill-update inputs for one task.
#[derive(Clone, Debug)]
pub struct SkillItem {
    pub context: Vec<f64>,
    pub hl: Vec<HlTransition>,
    pub bc: Vec<Window>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ContextLosses {
    pub bc: f64,
    pub gq: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SkillLosses {
    pub bc: f64,
    pub gq: f64,
    pub actor: f64,
    pub critic: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

struct ContextPass {
    losses: ContextLosses,
    contexts: Vec<Vec<f64>>,
    embeds: Vec<f64>,
    context: ContextPolicy,
    cb_c: Codebook,
    decoder: Mlp,
    graph: LossGraph,
}

struct SkillPass {
    losses: SkillLosses,
    embeds: Vec<f64>,
    policy: GaussianMlp,
    cb_z: Codebook,
    decoder: Mlp,
    critics: [Mlp; 2],
    graph: LossGraph,
}

fn grads_of(prefix: &str, p: &mut impl crate::numerics::Parameterized) -> Vec<(String, Vec<f64>)> {
    prefixed(prefix, p).into_iter().map(|(n, t)| (n, t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()]))).collect()
}

/// Everything learned during meta-training: context GQ-VAE, high-level
/// skill policy with its GQ-VAE parts, twin critics and the KL weight.
#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: MetaTrainConfig,
    pub context: ContextPolicy,
    pub cb_c: Codebook,
    pub ctx_decoder: Mlp,
    pub policy: GaussianMlp,
    pub cb_z: Codebook,
    pub skill_decoder: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    pub log_beta: f64,
    opt_ctx: Adam,
    opt_pol: Adam,
    opt_q: Adam,
    maint_c: Maintenance,
    maint_z: Maintenance,
}

const RECENT_CAPACITY: usize = 1024;

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: MetaTrainConfig, skills: &SkillModels, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let norm = skills.norm;
        let dz = skills.config.skill_dim;
        let dc = cfg.context_dim;
        let (h, l, act) = (cfg.hidden, cfg.layers, cfg.activation);
        let context = ContextPolicy::new(&cfg, norm, rng);
        let cb_c = Codebook::new(cfg.gq.context_codes, dc, cfg.gq.codebook_mode, rng)?;
        let ctx_decoder = Mlp::with_hidden(cb_c.embed_dim(), h, l, cfg.n_c * super::context::TUPLE_DIM, act, rng);
        let mut policy = GaussianMlp::new(STATE_DIM + dc, h, l, dz, act, false, rng);
        if cfg.init_from_prior {
            policy = policy_from_prior(&skills.prior, dc)?;
        }
        let cb_z = Codebook::new(cfg.gq.skill_codes, dz, cfg.gq.codebook_mode, rng)?;
        let skill_decoder =
            Mlp::with_hidden(cb_z.embed_dim(), h, l, skills.config.horizon * (STATE_DIM + crate::maze::ACTION_DIM), act, rng);
        let critics = [
            Mlp::with_hidden(STATE_DIM + dc + dz, h, l, 1, act, rng),
            Mlp::with_hidden(STATE_DIM + dc + dz, h, l, 1, act, rng),
        ];
        let targets = critics.clone();
        Ok(Agent {
            cfg,
            context,
            cb_c,
            ctx_decoder,
            policy,
            cb_z,
            skill_decoder,
            critics,
            targets,
            log_beta: cfg.beta_init.ln(),
            opt_ctx: Adam::new(cfg.lr),
            opt_pol: Adam::new(cfg.lr),
            opt_q: Adam::new(cfg.critic_lr),
            maint_c: Maintenance::new(cfg.gq.maintenance_interval, cfg.gq.reinit_sigma, RECENT_CAPACITY),
            maint_z: Maintenance::new(cfg.gq.maintenance_interval, cfg.gq.reinit_sigma, RECENT_CAPACITY),
        })
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn context_dim(&self) -> usize {
        self.cfg.context_dim
    }

    pub fn skill_dim(&self) -> usize {
        self.cb_z.dim()
    }

    /// Replaces the high-level policy, skill codebook, skill decoder, critics
    /// and their optimizers with fresh ones; the context side is kept.
    pub fn reset_skill_side<R: Rng + ?Sized>(&mut self, skills: &SkillModels, from_prior: bool, rng: &mut R) -> Result<()> {
        let fresh = Agent::new(MetaTrainConfig { init_from_prior: from_prior, ..self.cfg }, skills, rng)?;
        self.policy = fresh.policy;
        self.cb_z = fresh.cb_z;
        self.skill_decoder = fresh.skill_decoder;
        self.critics = fresh.critics;
        self.targets = fresh.targets;
        self.log_beta = fresh.log_beta;
        self.opt_pol = fresh.opt_pol;
        self.opt_q = fresh.opt_q;
        self.maint_z = fresh.maint_z;
        Ok(())
    }

    fn embed_of(mode: CodebookMode, g: &DiagGaussian) -> Vec<f64> {
        match mode {
            CodebookMode::Gaussian => g.embed(),
            CodebookMode::Vector => g.mean().to_vec(),
        }
    }

    /// Distribution used downstream for `c`: the matched code or the raw
    /// encoder output, per config or while the codebook is uninitialised.
    /// Does not count matches.
    pub fn context_distribution(&self, window: &[Transition]) -> Result<DiagGaussian> {
        let raw = self.context.forward_plain(window)?;
        if !self.cfg.gq.quantized_downstream || !self.cb_c.is_initialized() {
            return Ok(raw);
        }
        let k = self.cb_c.nearest(&Self::embed_of(self.cb_c.mode(), &raw))?;
        Ok(self.cb_c.code(k))
    }

    fn draw<R: Rng + ?Sized>(&self, g: &DiagGaussian, explore: bool, rng: &mut R) -> Vec<f64> {
        if explore && self.cfg.gq.codebook_mode == CodebookMode::Gaussian {
            g.sample(rng)
        } else {
            g.mean().to_vec()
        }
    }

    /// `c` for acting: a unit-Gaussian draw without a window, otherwise a
    /// draw from the (quantized) context distribution.
    pub fn sample_context<R: Rng + ?Sized>(&self, window: Option<&[Transition]>, explore: bool, rng: &mut R) -> Result<Vec<f64>> {
        match window {
            None => Ok(standard_normal_vec(self.cfg.context_dim, rng)),
            Some(w) => {
                let g = self.context_distribution(w)?;
                Ok(self.draw(&g, explore, rng))
            }
        }
    }

    pub fn policy_input(&self, s: &State, c: &[f64]) -> Vec<f64> {
        let mut x = self.context.norm.apply(s).to_vec();
        x.extend_from_slice(c);
        x
    }

    /// Raw high-level policy output at `(s, c)`.
    pub fn skill_posterior(&self, s: &State, c: &[f64]) -> DiagGaussian {
        self.policy.forward_plain(&self.policy_input(s, c), 1).remove(0)
    }

    pub fn skill_distribution(&self, s: &State, c: &[f64]) -> Result<DiagGaussian> {
        let raw = self.skill_posterior(s, c);
        if !self.cfg.gq.quantized_downstream || !self.cb_z.is_initialized() {
            return Ok(raw);
        }
        let k = self.cb_z.nearest(&Self::embed_of(self.cb_z.mode(), &raw))?;
        Ok(self.cb_z.code(k))
    }

    /// Skill to execute: sampled while exploring, the mean otherwise. Vector
    /// codebooks always yield the code point.
    pub fn select_skill<R: Rng + ?Sized>(&self, s: &State, c: &[f64], explore: bool, rng: &mut R) -> Result<Vec<f64>> {
        let g = self.skill_distribution(s, c)?;
        Ok(self.draw(&g, explore, rng))
    }

    fn min_target_q(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let a = self.targets[0].forward_plain(x, rows);
        let b = self.targets[1].forward_plain(x, rows);
        a.iter().zip(&b).map(|(a, b)| a.min(*b)).collect()
    }

    /// Draws a latent from tape distribution `g` (point value in vector mode).
    fn tape_draw<R: Rng + ?Sized>(&self, tape: &mut Tape, g: &GaussianVars, rng: &mut R) -> Result<Var> {
        if self.cfg.gq.codebook_mode == CodebookMode::Vector {
            return Ok(g.mean);
        }
        let (rows, d) = tape.shape(g.mean);
        let noise = tape.constant_rows(rows, d, standard_normal_vec(rows * d, rng));
        g.sample(tape, noise)
    }

    fn downstream(&self, tape: &mut Tape, enc: &GaussianVars, cb: &Codebook, idx: &[usize]) -> Result<GaussianVars> {
        if self.cfg.gq.quantized_downstream {
            quantize_forward(tape, enc, cb, idx)
        } else {
            Ok(*enc)
        }
    }

    /// `-(1/K) sum_t log pi_low(a_t|s_t,z)` averaged over windows, with `z`
    /// drawn through the skill codebook from `pi(Z|s_0, c)`. `c` is
    /// `[W, dc]`, one row per window.
    fn bc_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        skills: &SkillModels,
        policy: &crate::numerics::MlpVars,
        windows: &[Window],
        c: Var,
        rng: &mut R,
    ) -> Result<(Var, GaussianVars)> {
        let w = windows.len();
        let k = skills.config.horizon;
        let norm = skills.norm;
        let s0: Vec<f64> = windows.iter().flat_map(|win| norm.apply(&win.s0())).collect();
        let s0 = tape.constant_rows(w, STATE_DIM, s0);
        let pin = tape.concat(&[s0, c])?;
        let zt = self.policy.forward(tape, policy, pin)?;
        let zq = if self.cb_z.is_initialized() {
            let embeds = self.cb_z.embed_rows(tape, &zt);
            let idx = embeds.chunks(self.cb_z.embed_dim()).map(|e| self.cb_z.nearest(e)).collect::<Result<Vec<_>>>()?;
            self.downstream(tape, &zt, &self.cb_z, &idx)?
        } else {
            zt
        };
        let z = self.tape_draw(tape, &zq, rng)?;
        let rep: Vec<usize> = (0..w).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let z_rep = tape.gather_rows(z, &rep)?;
        let s: Vec<f64> = windows.iter().flat_map(|win| win.states.iter().flat_map(|s| norm.apply(s))).collect();
        let s = tape.constant_rows(w * k, STATE_DIM, s);
        let a: Vec<f64> = windows.iter().flat_map(|win| win.actions.iter().flatten().copied()).collect();
        let a = tape.constant_rows(w * k, crate::maze::ACTION_DIM, a);
        let low = skills.policy.bind(tape, false);
        let lin = tape.concat(&[s, z_rep])?;
        let pi = skills.policy.forward(tape, &low, lin)?;
        let lp = pi.log_prob(tape, a)?;
        let lp = tape.sum(lp);
        Ok((tape.scale(lp, -1.0 / (w * k) as f64), zt))
    }

    fn check_windows(skills: &SkillModels, windows: &[Window]) -> Result<()> {
        if let Some(w) = windows.iter().find(|w| w.len() != skills.config.horizon) {
            return Err(Error::shape("bc_window", format!("length {}, horizon {}", w.len(), skills.config.horizon)));
        }
        Ok(())
    }

    /// Forward and backward pass of the context objective. Network copies in
    /// the result hold the gradients; the codebook copy also holds this
    /// batch's match counts.
    fn context_pass<R: Rng + ?Sized>(&self, skills: &SkillModels, items: &[ContextItem], rng: &mut R) -> Result<ContextPass> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("context update needs at least one task".into()));
        }
        for it in items {
            Self::check_windows(skills, &it.bc)?;
            if it.anchor.len() != self.cfg.n_c {
                return Err(Error::shape("context_window", format!("length {}, n_c {}", it.anchor.len(), self.cfg.n_c)));
            }
        }
        let n = items.len();
        let dc = self.cfg.context_dim;
        let mode = self.cfg.gq.codebook_mode;
        let mut tape = Tape::new();
        let cv = self.context.bind(&mut tape, true);
        let dv = self.ctx_decoder.bind(&mut tape, true);

        let anchors: Vec<&[Transition]> = items.iter().map(|it| it.anchor.as_slice()).collect();
        let ct = self.context.forward(&mut tape, &cv, &anchors)?;
        let embeds = self.cb_c.embed_rows(&tape, &ct);
        let width = self.cb_c.embed_dim();
        let mut cb_c = self.cb_c.clone();
        if !cb_c.is_initialized() {
            let rows: Vec<Vec<f64>> = embeds.chunks(width).map(<[f64]>::to_vec).collect();
            cb_c.init_farthest_point(&rows, self.cfg.gq.reinit_sigma, rng)?;
        }
        let idx = cb_c.match_rows(&embeds)?;
        let cbv = cb_c.bind(&mut tape, true);

        let matched = gather_codes(&mut tape, &cbv, &idx)?;
        let enc_embed = encoder_embed(&mut tape, &ct, mode)?;
        let dec_in = tape.stop_grad(matched.embed);
        let recon = dv.forward(&mut tape, dec_in)?;
        let target: Vec<f64> = items.iter().flat_map(|it| self.context.flatten(&it.anchor)).collect();
        let target = tape.constant_rows(n, self.cfg.n_c * super::context::TUPLE_DIM, target);
        let gq = gq_loss(&mut tape, enc_embed, matched.embed, recon, target, self.cfg.gq.eta, self.cfg.gq.squared_norm, Reduction::Mean)?;

        let cq = self.downstream(&mut tape, &ct, &cb_c, &idx)?;
        let c = self.tape_draw(&mut tape, &cq, rng)?;

        let with_triplet: Vec<usize> = (0..n).filter(|&i| items[i].triplet.is_some()).collect();
        let triplet = if with_triplet.is_empty() {
            tape.scalar(0.0)
        } else {
            let pos: Vec<&[Transition]> = with_triplet.iter().map(|&i| items[i].triplet.as_ref().unwrap().0.as_slice()).collect();
            let neg: Vec<&[Transition]> = with_triplet.iter().map(|&i| items[i].triplet.as_ref().unwrap().1.as_slice()).collect();
            let pg = self.context.forward(&mut tape, &cv, &pos)?;
            let ng = self.context.forward(&mut tape, &cv, &neg)?;
            let pe = encoder_embed(&mut tape, &pg, mode)?;
            let ne = encoder_embed(&mut tape, &ng, mode)?;
            let ae = tape.gather_rows(enc_embed, &with_triplet)?;
            triplet_loss(&mut tape, ae, pe, ne, self.cfg.triplet_margin)?
        };

        let windows: Vec<Window> = items.iter().flat_map(|it| it.bc.iter().cloned()).collect();
        let bc = if windows.is_empty() {
            tape.scalar(0.0)
        } else {
            let rows: Vec<usize> = items.iter().enumerate().flat_map(|(i, it)| std::iter::repeat_n(i, it.bc.len())).collect();
            let c_rep = tape.gather_rows(c, &rows)?;
            let pv = self.policy.bind(&mut tape, false);
            self.bc_loss(&mut tape, skills, &pv, &windows, c_rep, rng)?.0
        };

        let bcw = tape.scale(bc, self.cfg.bc_weight);
        let gqw = tape.scale(gq.total, self.cfg.lambda);
        let trw = tape.scale(triplet, self.cfg.triplet_weight);
        let total = tape.add(bcw, gqw)?;
        let total = tape.add(total, trw)?;
        let losses = ContextLosses {
            bc: tape.scalar_value(bc),
            gq: tape.scalar_value(gq.total),
            triplet: tape.scalar_value(triplet),
            total: tape.scalar_value(total),
        };
        if !losses.total.is_finite() {
            log::warn!("context update aborted: non-finite loss");
            return Err(Error::NonFiniteLoss("context update"));
        }
        let contexts: Vec<Vec<f64>> = tape.value(c).chunks(dc).map(<[f64]>::to_vec).collect();

        let grads = tape.backward(total)?;
        let mut context = self.context.clone();
        let mut decoder = self.ctx_decoder.clone();
        context.store_grads(&cv, &grads);
        cb_c.store_grads(&cbv, &grads);
        decoder.store_grads(&dv, &grads);
        let mut params = named_vars("context", &self.context, cv.vars());
        params.extend(named_vars("cb_c", &cb_c, cbv.vars()));
        params.extend(named_vars("ctx_decoder", &self.ctx_decoder, dv.vars()));
        let graph = LossGraph { tape, loss: total, params };
        Ok(ContextPass { losses, contexts, embeds, context, cb_c, decoder, graph })
    }

    /// One update of the context encoder, context codebook and context
    /// decoder. Returns the losses and one detached `c` per item.
    pub fn context_update<R: Rng + ?Sized>(
        &mut self,
        skills: &SkillModels,
        items: &[ContextItem],
        rng: &mut R,
    ) -> Result<(ContextLosses, Vec<Vec<f64>>)> {
        let ContextPass { losses, contexts, embeds, mut context, mut cb_c, mut decoder, .. } = self.context_pass(skills, items, rng)?;
        let width = cb_c.embed_dim();
        let mut params = prefixed("context", &mut context);
        params.extend(prefixed("cb_c", &mut cb_c));
        params.extend(prefixed("ctx_decoder", &mut decoder));
        self.opt_ctx.step(params)?;
        cb_c.clamp_log_stds();
        self.maint_c.record(&embeds, width);
        if let Some(dead) = self.maint_c.tick(&mut cb_c, rng) {
            if !dead.is_empty() {
                log::debug!("context codebook: reinitialised {} dead codes", dead.len());
            }
        }
        self.context = context;
        self.ctx_decoder = decoder;
        self.cb_c = cb_c;
        Ok((losses, contexts))
    }

    /// Context objective value and its gradient for every context-side
    /// parameter, named as in [`Agent::named_params_mut`].
    pub fn context_gradients<R: Rng + ?Sized>(
        &self,
        skills: &SkillModels,
        items: &[ContextItem],
        rng: &mut R,
    ) -> Result<(ContextLosses, Vec<(String, Vec<f64>)>)> {
        let mut p = self.context_pass(skills, items, rng)?;
        let mut g = grads_of("context", &mut p.context);
        g.extend(grads_of("cb_c", &mut p.cb_c));
        g.extend(grads_of("ctx_decoder", &mut p.decoder));
        Ok((p.losses, g))
    }

    /// The recorded context objective, for checking its gradients.
    pub fn context_graph<R: Rng + ?Sized>(&self, skills: &SkillModels, items: &[ContextItem], rng: &mut R) -> Result<LossGraph> {
        Ok(self.context_pass(skills, items, rng)?.graph)
    }

    /// Every trainable parameter of the agent, prefixed by its network.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut p = prefixed("context", &mut self.context);
        p.extend(prefixed("cb_c", &mut self.cb_c));
        p.extend(prefixed("ctx_decoder", &mut self.ctx_decoder));
        p.extend(prefixed("policy", &mut self.policy));
        p.extend(prefixed("cb_z", &mut self.cb_z));
        p.extend(prefixed("skill_decoder", &mut self.skill_decoder));
        let [c0, c1] = &mut self.critics;
        p.extend(prefixed("critic0", c0));
        p.extend(prefixed("critic1", c1));
        p
    }

    /// Names of every parameter the skill update's optimizers touch.
    pub fn skill_update_param_names(&mut self) -> Vec<String> {
        let mut names: Vec<String> = prefixed("policy", &mut self.policy).into_iter().map(|(n, _)| n).collect();
        names.extend(prefixed("cb_z", &mut self.cb_z).into_iter().map(|(n, _)| n));
        names.extend(prefixed("skill_decoder", &mut self.skill_decoder).into_iter().map(|(n, _)| n));
        let [q0, q1] = &mut self.critics;
        names.extend(prefixed("critic0", q0).into_iter().map(|(n, _)| n));
        names.extend(prefixed("critic1", q1).into_iter().map(|(n, _)| n));
        names
    }

    fn check_skill_items(&self, skills: &SkillModels, items: &[SkillItem]) -> Result<()> {
        let (dz, dc) = (self.skill_dim(), self.cfg.context_dim);
        for it in items {
            Self::check_windows(skills, &it.bc)?;
            if it.context.len() != dc {
                return Err(Error::shape("skill_update", format!("context of length {}, expected {dc}", it.context.len())));
            }
            if let Some(t) = it.hl.iter().find(|t| t.z.len() != dz) {
                return Err(Error::shape("skill_update", format!("stored skill of length {}, expected {dz}", t.z.len())));
            }
        }
        if items.iter().all(|it| it.hl.is_empty()) {
            return Err(Error::InvalidArgument("skill update needs high-level transitions".into()));
        }
        Ok(())
    }

    /// Farthest-point initialisation of the skill codebook from the batch's
    /// high-level policy outputs, once.
    fn ensure_skill_codebook<R: Rng + ?Sized>(&mut self, items: &[SkillItem], rng: &mut R) -> Result<()> {
        if self.cb_z.is_initialized() {
            return Ok(());
        }
        let mode = self.cfg.gq.codebook_mode;
        let mut x = Vec::new();
        for it in items {
            for t in &it.hl {
                x.extend(self.policy_input(&t.s, &it.context));
            }
            for w in &it.bc {
                x.extend(self.policy_input(&w.s0(), &it.context));
            }
        }
        let rows = x.len() / (STATE_DIM + self.cfg.context_dim);
        let embeds: Vec<Vec<f64>> = self.policy.forward_plain(&x, rows).iter().map(|g| Self::embed_of(mode, g)).collect();
        self.cb_z.init_farthest_point(&embeds, self.cfg.gq.reinit_sigma, rng)
    }

    /// Critic regression targets
    /// `r + discount * (1 - done) * (min target Q(s', c, z') - beta * KL(s'))`.
    pub fn critic_targets<R: Rng + ?Sized>(&self, skills: &SkillModels, rl: &[(&HlTransition, &[f64])], rng: &mut R) -> Result<Vec<f64>> {
        let (dz, dc) = (self.skill_dim(), self.cfg.context_dim);
        let norm = skills.norm;
        let mode = self.cfg.gq.codebook_mode;
        let beta = self.beta();
        let r_rows = rl.len();
        let next_in: Vec<f64> = rl.iter().flat_map(|(t, c)| self.policy_input(&t.s_next, c)).collect();
        let next_post = self.policy.forward_plain(&next_in, r_rows);
        let next_prior: Vec<f64> = rl.iter().flat_map(|(t, _)| norm.apply(&t.s_next)).collect();
        let next_prior = skills.prior.forward_plain(&next_prior, r_rows);
        let mut q_in = Vec::with_capacity(r_rows * (STATE_DIM + dc + dz));
        let mut kl_next = Vec::with_capacity(r_rows);
        for (i, (t, c)) in rl.iter().enumerate() {
            let post = &next_post[i];
            let g = if self.cfg.gq.quantized_downstream && self.cb_z.is_initialized() {
                self.cb_z.code(self.cb_z.nearest(&Self::embed_of(mode, post))?)
            } else {
                post.clone()
            };
            let z = self.draw(&g, true, rng);
            q_in.extend_from_slice(&norm.apply(&t.s_next));
            q_in.extend_from_slice(c);
            q_in.extend_from_slice(&z);
            kl_next.push(post.kl(&next_prior[i])?);
        }
        let q_next = self.min_target_q(&q_in, r_rows);
        Ok(rl
            .iter()
            .enumerate()
            .map(|(i, (t, _))| {
                let boot = if t.done { 0.0 } else { q_next[i] - beta * kl_next[i] };
                t.r + self.cfg.discount * boot
            })
            .collect())
    }

    /// Forward and backward pass of critic, actor, skill quantization and
    /// behaviour-cloning losses. Network copies in the result hold the
    /// gradients.
    fn skill_pass<R: Rng + ?Sized>(&self, skills: &SkillModels, items: &[SkillItem], with_bc: bool, rng: &mut R) -> Result<SkillPass> {
        let (dz, dc) = (self.skill_dim(), self.cfg.context_dim);
        let norm = skills.norm;
        let mode = self.cfg.gq.codebook_mode;
        let beta = self.beta();
        self.check_skill_items(skills, items)?;
        let rl: Vec<(&HlTransition, &[f64])> = items.iter().flat_map(|it| it.hl.iter().map(move |t| (t, it.context.as_slice()))).collect();
        let r_rows = rl.len();
        let y = self.critic_targets(skills, &rl, rng)?;

        let mut tape = Tape::new();
        let pv = self.policy.bind(&mut tape, true);
        let cbv = self.cb_z.bind(&mut tape, true);
        let dv = self.skill_decoder.bind(&mut tape, true);
        let qv = [self.critics[0].bind(&mut tape, true), self.critics[1].bind(&mut tape, true)];
        let qc = [self.critics[0].bind(&mut tape, false), self.critics[1].bind(&mut tape, false)];

        // critics
        let sc: Vec<f64> = rl.iter().flat_map(|(t, c)| self.policy_input(&t.s, c)).collect();
        let sc = tape.constant_rows(r_rows, STATE_DIM + dc, sc);
        let z_exec: Vec<f64> = rl.iter().flat_map(|(t, _)| t.z.iter().copied()).collect();
        let z_exec = tape.constant_rows(r_rows, dz, z_exec);
        let qin = tape.concat(&[sc, z_exec])?;
        let yv = tape.constant_rows(r_rows, 1, y);
        let mut critic = tape.scalar(0.0);
        for v in &qv {
            let q = v.forward(&mut tape, qin)?;
            let d = tape.sub(q, yv)?;
            let d2 = tape.square(d);
            let m = tape.mean(d2);
            critic = tape.add(critic, m)?;
        }

        // actor
        let zt = self.policy.forward(&mut tape, &pv, sc)?;
        let rl_embeds = self.cb_z.embed_rows(&tape, &zt);

        // skill GQ-VAE and behaviour cloning on replayed windows
        let windows: Vec<Window> = items.iter().flat_map(|it| it.bc.iter().cloned()).collect();
        let mut cb_z = self.cb_z.clone();
        let bc_rows: Vec<usize> = items.iter().enumerate().flat_map(|(i, it)| std::iter::repeat_n(i, it.bc.len())).collect();
        let ctx_all: Vec<f64> = items.iter().flat_map(|it| it.context.iter().copied()).collect();
        let ctx_all = tape.constant_rows(items.len(), dc, ctx_all);
        let (bc, gq, bc_embeds) = if windows.is_empty() {
            (tape.scalar(0.0), None, Vec::new())
        } else {
            let c_rep = tape.gather_rows(ctx_all, &bc_rows)?;
            let (bc, zb) = self.bc_loss(&mut tape, skills, &pv, &windows, c_rep, rng)?;
            let e = cb_z.embed_rows(&tape, &zb);
            (bc, Some(zb), e)
        };
        let idx_rl = cb_z.match_rows(&rl_embeds)?;
        let zq = self.downstream(&mut tape, &zt, &cb_z, &idx_rl)?;
        let z = self.tape_draw(&mut tape, &zq, rng)?;
        let ain = tape.concat(&[sc, z])?;
        let q0 = qc[0].forward(&mut tape, ain)?;
        let q1 = qc[1].forward(&mut tape, ain)?;
        let (m0, m1): (Vec<f64>, Vec<f64>) = tape
            .value(q0)
            .iter()
            .zip(tape.value(q1))
            .map(|(a, b)| if a <= b { (1.0, 0.0) } else { (0.0, 1.0) })
            .unzip();
        let m0 = tape.constant_rows(r_rows, 1, m0);
        let m1 = tape.constant_rows(r_rows, 1, m1);
        let a0 = tape.mul(q0, m0)?;
        let a1 = tape.mul(q1, m1)?;
        let qmin = tape.add(a0, a1)?;
        let prior_in: Vec<f64> = rl.iter().flat_map(|(t, _)| norm.apply(&t.s)).collect();
        let prior = skills.prior.forward_plain(&prior_in, r_rows);
        let pm: Vec<f64> = prior.iter().flat_map(|p| p.mean().to_vec()).collect();
        let pl: Vec<f64> = prior.iter().flat_map(|p| p.log_std().to_vec()).collect();
        let prior = GaussianVars { mean: tape.constant_rows(r_rows, dz, pm), log_std: tape.constant_rows(r_rows, dz, pl) };
        let kl = zt.kl(&mut tape, &prior)?;
        let kl_mean = tape.mean(kl);
        let bkl = tape.scale(kl, beta);
        let per_row = tape.sub(bkl, qmin)?;
        let actor = tape.mean(per_row);

        let gq = match gq {
            None => tape.scalar(0.0),
            Some(zb) => {
                let idx_bc = cb_z.match_rows(&bc_embeds)?;
                let matched = gather_codes(&mut tape, &cbv, &idx_bc)?;
                let enc = encoder_embed(&mut tape, &zb, mode)?;
                let dec_in = tape.stop_grad(matched.embed);
                let recon = dv.forward(&mut tape, dec_in)?;
                let target: Vec<f64> = windows.iter().flat_map(|w| skills.window_input(w)).collect();
                let target = tape.constant_rows(windows.len(), tape.shape(recon).1, target);
                gq_loss(&mut tape, enc, matched.embed, recon, target, self.cfg.gq.iota, self.cfg.gq.squared_norm, Reduction::Mean)?.total
            }
        };

        let bc_weight = if with_bc { self.cfg.bc_weight } else { 0.0 };
        let bcw = tape.scale(bc, bc_weight);
        let gqw = tape.scale(gq, self.cfg.gamma_skill);
        let total = tape.add(critic, actor)?;
        let total = tape.add(total, bcw)?;
        let total = tape.add(total, gqw)?;
        let losses = SkillLosses {
            bc: tape.scalar_value(bc),
            gq: tape.scalar_value(gq),
            actor: tape.scalar_value(actor),
            critic: tape.scalar_value(critic),
            kl: tape.scalar_value(kl_mean),
            beta,
            total: tape.scalar_value(total),
        };
        if !losses.total.is_finite() {
            log::warn!("skill update aborted: non-finite loss");
            return Err(Error::NonFiniteLoss("skill update"));
        }
        let grads = tape.backward(total)?;
        let mut policy = self.policy.clone();
        let mut decoder = self.skill_decoder.clone();
        let mut critics = self.critics.clone();
        policy.net.store_grads(&pv, &grads);
        cb_z.store_grads(&cbv, &grads);
        decoder.store_grads(&dv, &grads);
        critics[0].store_grads(&qv[0], &grads);
        critics[1].store_grads(&qv[1], &grads);
        let mut all_embeds = rl_embeds;
        all_embeds.extend_from_slice(&bc_embeds);
        let mut params = named_vars("policy", &self.policy, pv.vars());
        params.extend(named_vars("cb_z", &cb_z, cbv.vars()));
        params.extend(named_vars("skill_decoder", &self.skill_decoder, dv.vars()));
        params.extend(named_vars("critic0", &self.critics[0], qv[0].vars()));
        params.extend(named_vars("critic1", &self.critics[1], qv[1].vars()));
        let graph = LossGraph { tape, loss: total, params };
        Ok(SkillPass { losses, embeds: all_embeds, policy, cb_z, decoder, critics, graph })
    }

    /// Skill-side objective value and its gradient for every skill-side
    /// parameter, named as in [`Agent::named_params_mut`].
    pub fn skill_gradients<R: Rng + ?Sized>(
        &self,
        skills: &SkillModels,
        items: &[SkillItem],
        with_bc: bool,
        rng: &mut R,
    ) -> Result<(SkillLosses, Vec<(String, Vec<f64>)>)> {
        let mut p = self.skill_pass(skills, items, with_bc, rng)?;
        let mut g = grads_of("policy", &mut p.policy);
        g.extend(grads_of("cb_z", &mut p.cb_z));
        g.extend(grads_of("skill_decoder", &mut p.decoder));
        let [c0, c1] = &mut p.critics;
        g.extend(grads_of("critic0", c0));
        g.extend(grads_of("critic1", c1));
        Ok((p.losses, g))
    }

    /// The recorded skill-side objective. The skill codebook must already be
    /// initialised.
    pub fn skill_graph<R: Rng + ?Sized>(&self, skills: &SkillModels, items: &[SkillItem], with_bc: bool, rng: &mut R) -> Result<LossGraph> {
        Ok(self.skill_pass(skills, items, with_bc, rng)?.graph)
    }

    /// One update of the high-level policy, skill codebook, skill decoder
    /// and critics, followed by the Polyak and dual steps.
    pub fn skill_update<R: Rng + ?Sized>(
        &mut self,
        skills: &SkillModels,
        items: &[SkillItem],
        with_bc: bool,
        rng: &mut R,
    ) -> Result<SkillLosses> {
        self.check_skill_items(skills, items)?;
        self.ensure_skill_codebook(items, rng)?;
        let SkillPass { losses, embeds, mut policy, mut cb_z, mut decoder, mut critics, .. } = self.skill_pass(skills, items, with_bc, rng)?;
        let width = cb_z.embed_dim();
        let mut opt_pol = self.opt_pol.clone();
        let mut params = prefixed("policy", &mut policy);
        params.extend(prefixed("cb_z", &mut cb_z));
        params.extend(prefixed("skill_decoder", &mut decoder));
        opt_pol.step(params)?;
        let [c0, c1] = &mut critics;
        let mut qp = prefixed("critic0", c0);
        qp.extend(prefixed("critic1", c1));
        self.opt_q.step(qp)?;
        self.opt_pol = opt_pol;
        cb_z.clamp_log_stds();
        self.maint_z.record(&embeds, width);
        if let Some(dead) = self.maint_z.tick(&mut cb_z, rng) {
            if !dead.is_empty() {
                log::debug!("skill codebook: reinitialised {} dead codes", dead.len());
            }
        }
        self.policy = policy;
        self.skill_decoder = decoder;
        self.cb_z = cb_z;
        self.critics = critics;
        for i in 0..2 {
            self.targets[i].soft_update_from(&self.critics[i], self.cfg.tau);
        }
        self.log_beta = (self.log_beta + self.cfg.beta_lr * (losses.kl - self.cfg.target_kl))
            .clamp(self.cfg.beta_min.ln(), self.cfg.beta_max.ln());
        Ok(losses)
    }

    pub fn to_archive(&self, config_hash: &str) -> Archive {
        let mut a = Archive::new("meta", config_hash);
        a.push_params("context", &self.context);
        a.push("cb_c.mean", self.cb_c.means());
        a.push("cb_c.log_std", self.cb_c.log_stds());
        a.push_params("ctx_decoder", &self.ctx_decoder);
        a.push_params("policy", &self.policy);
        a.push("cb_z.mean", self.cb_z.means());
        a.push("cb_z.log_std", self.cb_z.log_stds());
        a.push_params("skill_decoder", &self.skill_decoder);
        for i in 0..2 {
            a.push_params(&format!("critic{i}"), &self.critics[i]);
            a.push_params(&format!("target{i}"), &self.targets[i]);
        }
        let flags = vec![self.log_beta, self.cb_c.is_initialized() as u8 as f64, self.cb_z.is_initialized() as u8 as f64];
        a.push("state", &Tensor::row(flags));
        a
    }

    /// Rebuilds an agent from an archive written with the same config.
    pub fn from_archive(a: &Archive, cfg: MetaTrainConfig, skills: &SkillModels) -> Result<Self> {
        let mut rng = crate::rng::stream(0, "agent_load", 0);
        let mut ag = Agent::new(cfg, skills, &mut rng)?;
        a.load_params("context", &mut ag.context)?;
        a.load_params("ctx_decoder", &mut ag.ctx_decoder)?;
        a.load_params("policy", &mut ag.policy)?;
        a.load_params("skill_decoder", &mut ag.skill_decoder)?;
        for i in 0..2 {
            a.load_params(&format!("critic{i}"), &mut ag.critics[i])?;
            a.load_params(&format!("target{i}"), &mut ag.targets[i])?;
        }
        let state = a.get("state")?.data().to_vec();
        if state.len() != 3 {
            return Err(Error::Format("bad agent state record".into()));
        }
        ag.log_beta = state[0];
        ag.cb_c.restore(a.get("cb_c.mean")?, a.get("cb_c.log_std")?, state[1] != 0.0)?;
        ag.cb_z.restore(a.get("cb_z.mean")?, a.get("cb_z.log_std")?, state[2] != 0.0)?;
        Ok(ag)
    }
}

/// High-level policy that reproduces the skill prior exactly: prior weights
/// with zero first-layer rows for the appended context.
pub fn policy_from_prior(prior: &GaussianMlp, context_dim: usize) -> Result<GaussianMlp> {
    let mut weights = prior.net.weights().to_vec();
    let w0 = &weights[0];
    let (rows, cols) = (w0.rows(), w0.cols());
    let mut data = w0.data().to_vec();
    data.resize((rows + context_dim) * cols, 0.0);
    weights[0] = Tensor::from_rows(rows + context_dim, cols, data);
    let net = Mlp::from_parts(weights, prior.net.biases().to_vec(), prior.net.activation())?;
    Ok(GaussianMlp { net, squash: prior.squash })
}
