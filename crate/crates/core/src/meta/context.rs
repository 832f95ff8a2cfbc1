use rand::Rng;

use super::buffer::TaskBuffer;
use super::config::{MetaTrainConfig, WindowSampling};
use crate::error::{Error, Result};
use crate::gaussian::{cosine, cosine_rows, DiagGaussian, GaussianVars};
use crate::maze::{StateNorm, Transition};
use crate::numerics::{Mlp, MlpVars, Parameterized, Tape, Tensor, Var, LOG_STD_MAX, LOG_STD_MIN};

/// Width of one encoded `(s, a, r, done, s')` tuple.
pub const TUPLE_DIM: usize = 12;

/// Task context policy: a shared per-tuple network, mean pooling over the
/// window, and a Gaussian head.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPolicy {
    pub tuple_net: Mlp,
    pub head: Mlp,
    pub norm: StateNorm,
}

#[derive(Clone, Debug)]
pub struct ContextVars {
    tuple: MlpVars,
    head: MlpVars,
}

impl ContextVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.tuple.vars().chain(self.head.vars())
    }
}

impl ContextPolicy {
    pub fn new<R: Rng + ?Sized>(cfg: &MetaTrainConfig, norm: StateNorm, rng: &mut R) -> Self {
        let mut dims = vec![TUPLE_DIM];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers.saturating_sub(1).max(1)));
        dims.push(cfg.tuple_features);
        let tuple_net = Mlp::new(&dims, cfg.activation, rng);
        let head = Mlp::new(&[cfg.tuple_features, 2 * cfg.context_dim], cfg.activation, rng);
        ContextPolicy { tuple_net, head, norm }
    }

    pub fn dim(&self) -> usize {
        self.head.output_dim() / 2
    }

    pub fn tuple_features(&self, t: &Transition) -> [f64; TUPLE_DIM] {
        let s = self.norm.apply(&t.s);
        let n = self.norm.apply(&t.s_next);
        [s[0], s[1], s[2], s[3], t.a[0], t.a[1], t.r, if t.done { 1.0 } else { 0.0 }, n[0], n[1], n[2], n[3]]
    }

    /// Flattened tuples of a window, used as the reconstruction target.
    pub fn flatten(&self, window: &[Transition]) -> Vec<f64> {
        window.iter().flat_map(|t| self.tuple_features(t)).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ContextVars {
        ContextVars { tuple: self.tuple_net.bind(tape, trainable), head: self.head.bind(tape, trainable) }
    }

    /// One context distribution per window; windows may differ in length.
    pub fn forward(&self, tape: &mut Tape, vars: &ContextVars, windows: &[&[Transition]]) -> Result<GaussianVars> {
        let total: usize = windows.iter().map(|w| w.len()).sum();
        if windows.is_empty() || windows.iter().any(|w| w.is_empty()) {
            return Err(Error::InvalidArgument("context windows must be non-empty".into()));
        }
        let x: Vec<f64> = windows.iter().flat_map(|w| w.iter().flat_map(|t| self.tuple_features(t))).collect();
        let x = tape.constant_rows(total, TUPLE_DIM, x);
        let h = vars.tuple.forward(tape, x)?;
        let h = tape.tanh(h);
        let mut pool = vec![0.0; windows.len() * total];
        let mut col = 0;
        for (r, w) in windows.iter().enumerate() {
            let inv = 1.0 / w.len() as f64;
            for j in 0..w.len() {
                pool[r * total + col + j] = inv;
            }
            col += w.len();
        }
        let pool = tape.constant_rows(windows.len(), total, pool);
        let pooled = tape.matmul(pool, h)?;
        let out = vars.head.forward(tape, pooled)?;
        GaussianVars::from_head(tape, out)
    }

    pub fn forward_plain(&self, window: &[Transition]) -> Result<DiagGaussian> {
        if window.is_empty() {
            return Err(Error::InvalidArgument("context window must be non-empty".into()));
        }
        let x: Vec<f64> = self.flatten(window);
        let h = self.tuple_net.forward_plain(&x, window.len());
        let f = self.tuple_net.output_dim();
        let mut pooled = vec![0.0; f];
        for row in h.chunks(f) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v.tanh();
            }
        }
        pooled.iter_mut().for_each(|p| *p /= window.len() as f64);
        let out = self.head.forward_plain(&pooled, 1);
        let d = self.dim();
        let log_std = out[d..].iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        DiagGaussian::new(out[..d].to_vec(), log_std)
    }
}

impl Parameterized for ContextPolicy {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut p: Vec<_> = self.tuple_net.params().into_iter().map(|(n, t)| (format!("tuple.{n}"), t)).collect();
        p.extend(self.head.params().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        p
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut p: Vec<_> = self.tuple_net.params_mut().into_iter().map(|(n, t)| (format!("tuple.{n}"), t)).collect();
        p.extend(self.head.params_mut().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        p
    }
}

impl ContextPolicy {
    pub fn store_grads(&mut self, vars: &ContextVars, grads: &crate::numerics::Gradients) {
        self.tuple_net.store_grads(&vars.tuple, grads);
        self.head.store_grads(&vars.head, grads);
    }
}

/// `max(0, cos(a, n) - cos(a, p) + margin)` on distribution embeddings.
pub fn triplet_value(a: &DiagGaussian, p: &DiagGaussian, n: &DiagGaussian, margin: f64) -> f64 {
    let (ea, ep, en) = (a.embed(), p.embed(), n.embed());
    (cosine(&ea, &en) - cosine(&ea, &ep) + margin).max(0.0)
}

/// Batched triplet loss on `[rows, e]` embeddings, summed over rows.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let cn = cosine_rows(tape, anchor, negative)?;
    let cp = cosine_rows(tape, anchor, positive)?;
    let d = tape.sub(cn, cp)?;
    let d = tape.offset(d, margin);
    let h = tape.relu(d);
    Ok(tape.sum(h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSample {
    pub anchor: Vec<Transition>,
    pub positive: Vec<Transition>,
    pub negative: Vec<Transition>,
    pub anchor_offset: usize,
    pub positive_offset: usize,
    pub negative_task: usize,
}

fn cut<R: Rng + ?Sized>(mini: &[Transition], n_c: usize, sampling: WindowSampling, rng: &mut R) -> (Vec<usize>, Vec<Transition>) {
    let idx: Vec<usize> = match sampling {
        WindowSampling::Contiguous => {
            let off = rng.random_range(0..=mini.len() - n_c);
            (off..off + n_c).collect()
        }
        WindowSampling::Subsequence => {
            let mut idx = rand::seq::index::sample(rng, mini.len(), n_c).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let w = idx.iter().map(|&i| mini[i]).collect();
    (idx, w)
}

/// Anchor and positive from one mini dataset of the current task, negative
/// from a uniformly chosen other task. `None` when data is insufficient.
pub fn sample_contrastive_batch<R: Rng + ?Sized>(
    buffers: &[TaskBuffer],
    current: usize,
    cfg: &MetaTrainConfig,
    rng: &mut R,
) -> Option<ContrastiveSample> {
    let (n_c, n_mini) = (cfg.n_c, cfg.n_mini);
    let cur = buffers.get(current)?;
    if cur.raw_len() < n_mini {
        return None;
    }
    let others: Vec<usize> = (0..buffers.len()).filter(|&i| i != current && buffers[i].raw_len() >= n_c).collect();
    if others.is_empty() {
        return None;
    }
    let start = rng.random_range(0..=cur.raw_len() - n_mini);
    let mini = cur.raw_slice(start, n_mini);
    let (anchor_idx, anchor) = cut(&mini, n_c, cfg.window_sampling, rng);
    let (positive_idx, positive) = loop {
        let (idx, w) = cut(&mini, n_c, cfg.window_sampling, rng);
        if idx != anchor_idx {
            break (idx, w);
        }
    };
    let (anchor_offset, positive_offset) = (anchor_idx[0], positive_idx[0]);
    let negative_task = others[rng.random_range(0..others.len())];
    let negative = buffers[negative_task].random_raw_window(n_c, rng)?;
    Some(ContrastiveSample { anchor, positive, negative, anchor_offset, positive_offset, negative_task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::MazeSpec;
    use crate::rng::stream;

    fn g(m: &[f64]) -> DiagGaussian {
        DiagGaussian::new(m.to_vec(), vec![0.0; m.len()]).unwrap()
    }

    #[test]
    fn triplet_examples() {
        let a = g(&[1.0, 0.0]);
        let same = g(&[2.0, 0.0]);
        let orth = g(&[0.0, 1.0]);
        assert_eq!(triplet_value(&a, &same, &orth, 0.5), 0.0);
        assert!((triplet_value(&a, &orth, &same, 0.5) - 1.5).abs() < 1e-12);
        assert!((triplet_value(&a, &orth, &orth, 0.5) - 0.5).abs() < 1e-12);

        let mut tape = Tape::new();
        let av = tape.constant_rows(1, 2, vec![1.0, 0.0]);
        let pv = tape.constant_rows(1, 2, vec![0.0, 1.0]);
        let l = triplet_loss(&mut tape, av, pv, pv, 0.5).unwrap();
        assert!((tape.scalar_value(l) - 0.5).abs() < 1e-9);
    }

    fn buffer_with(n: usize, tag: f64) -> TaskBuffer {
        let mut b = TaskBuffer::new(1000);
        let raw: Vec<Transition> = (0..n)
            .map(|i| Transition { s: [tag, i as f64, 0.0, 0.0], a: [0.0; 2], r: 0.0, done: false, s_next: [tag, i as f64 + 1.0, 0.0, 0.0] })
            .collect();
        b.push_episode(&raw, &[]);
        b
    }

    #[test]
    fn contrastive_windows() {
        let cfg = MetaTrainConfig::default();
        let bufs = vec![buffer_with(150, 0.0), buffer_with(30, 1.0)];
        let mut rng = stream(0, "c", 0);
        for _ in 0..100 {
            let s = sample_contrastive_batch(&bufs, 0, &cfg, &mut rng).unwrap();
            assert!(s.anchor_offset <= 80 && s.positive_offset <= 80);
            assert_ne!(s.anchor_offset, s.positive_offset);
            for w in [&s.anchor, &s.positive] {
                assert_eq!(w.len(), 20);
                for p in w.windows(2) {
                    assert_eq!(p[1].s[1] - p[0].s[1], 1.0);
                }
            }
            assert!(s.negative.iter().all(|t| t.s[0] == 1.0));
        }
        assert!(sample_contrastive_batch(&bufs[..1], 0, &cfg, &mut rng).is_none());
        assert!(sample_contrastive_batch(&bufs, 1, &cfg, &mut rng).is_none());

        let sub = MetaTrainConfig { window_sampling: WindowSampling::Subsequence, ..cfg };
        let s = sample_contrastive_batch(&bufs, 0, &sub, &mut rng).unwrap();
        assert!(s.anchor.windows(2).all(|p| p[1].s[1] > p[0].s[1]));
    }

    #[test]
    fn pooled_forward_matches_plain() {
        let cfg = MetaTrainConfig { hidden: 8, tuple_features: 6, ..MetaTrainConfig::default() };
        let cp = ContextPolicy::new(&cfg, MazeSpec::desk().state_norm(), &mut stream(1, "c", 0));
        let b = buffer_with(30, 2.0);
        let w1 = b.raw_slice(0, 7);
        let w2 = b.raw_slice(10, 20);
        let mut tape = Tape::new();
        let vars = cp.bind(&mut tape, false);
        let g = cp.forward(&mut tape, &vars, &[&w1, &w2]).unwrap();
        for (r, w) in [&w1, &w2].iter().enumerate() {
            let plain = cp.forward_plain(w).unwrap();
            let row = g.row(&tape, r);
            for (a, b) in plain.embed().iter().zip(row.embed()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
