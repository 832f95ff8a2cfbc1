//! Diagonal Gaussians: closed-form KL, reparameterized sampling, and the
//! flat `(mean, log_std)` embedding used for code matching and similarity.
//!
//! Two flavours of every operation exist: plain functions on [`DiagGaussian`]
//! values, and tape functions on [`GaussianVars`] that batch one distribution
//! per row and stay differentiable.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Mlp, MlpVars, Parameterized, Tape, Tensor, Var, LOG_STD_MAX, LOG_STD_MIN};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    /// `log_std` is clamped into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::shape("gaussian", format!("mean {} vs log_std {}", mean.len(), log_std.len())));
        }
        let log_std = log_std.into_iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![0.0; dim], log_std: vec![0.0; dim] }
    }

    /// Inverse of [`embed`](Self::embed).
    pub fn from_embedding(e: &[f64]) -> Result<Self> {
        if e.len() % 2 != 0 {
            return Err(Error::shape("gaussian", format!("odd embedding length {}", e.len())));
        }
        let d = e.len() / 2;
        DiagGaussian::new(e[..d].to_vec(), e[d..].to_vec())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// `concat(mean, log_std)`.
    pub fn embed(&self) -> Vec<f64> {
        let mut e = self.mean.clone();
        e.extend_from_slice(&self.log_std);
        e
    }

    fn check_dim(&self, other: usize, op: &'static str) -> Result<()> {
        if self.dim() != other {
            return Err(Error::shape(op, format!("dimension {} vs {other}", self.dim())));
        }
        Ok(())
    }

    /// `KL(self || other)`.
    pub fn kl(&self, other: &DiagGaussian) -> Result<f64> {
        self.check_dim(other.dim(), "kl")?;
        let mut total = 0.0;
        for i in 0..self.dim() {
            let (mp, lp) = (self.mean[i], self.log_std[i]);
            let (mq, lq) = (other.mean[i], other.log_std[i]);
            let dm = mp - mq;
            total += (lq - lp) + ((2.0 * lp).exp() + dm * dm) / (2.0 * (2.0 * lq).exp()) - 0.5;
        }
        Ok(total)
    }

    /// `mean + exp(log_std) * noise`.
    pub fn sample_reparam(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(noise.len(), "sample_reparam")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, l), e)| m + l.exp() * e)
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise = standard_normal_vec(self.dim(), rng);
        self.sample_reparam(&noise).expect("noise sized to dim")
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len(), "log_prob")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((m, l), v)| {
                let z = (v - m) * (-l).exp();
                -0.5 * z * z - l - HALF_LN_2PI
            })
            .sum())
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity of raw vectors; two zero vectors give 0 with a warning.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        if na == 0.0 && nb == 0.0 {
            log::warn!("cosine similarity of two zero embeddings defined as 0");
        }
        return 0.0;
    }
    dot / (na * nb)
}

/// Cosine similarity between the embeddings of two distributions.
pub fn cosine_sim(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    a.check_dim(b.dim(), "cosine_sim")?;
    Ok(cosine(&a.embed(), &b.embed()))
}

/// Row-batched distribution on a tape: `mean` and `log_std` are `[rows, d]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVars {
    /// Splits a `[rows, 2d]` network output into a mean and a clamped log-std.
    pub fn from_head(tape: &mut Tape, out: Var) -> Result<Self> {
        let (_, w) = tape.shape(out);
        if w % 2 != 0 {
            return Err(Error::shape("gaussian_head", format!("odd head width {w}")));
        }
        let d = w / 2;
        let mean = tape.slice(out, 0, d)?;
        let raw = tape.slice(out, d, w)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok(GaussianVars { mean, log_std })
    }

    /// Splits an embedding `[rows, 2d]` without clamping.
    pub fn from_embedding(tape: &mut Tape, e: Var) -> Result<Self> {
        let (_, w) = tape.shape(e);
        let d = w / 2;
        Ok(GaussianVars { mean: tape.slice(e, 0, d)?, log_std: tape.slice(e, d, w)? })
    }

    pub fn standard(tape: &mut Tape, rows: usize, d: usize) -> Self {
        let mean = tape.constant_rows(rows, d, vec![0.0; rows * d]);
        let log_std = tape.constant_rows(rows, d, vec![0.0; rows * d]);
        GaussianVars { mean, log_std }
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        tape.shape(self.mean).0
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mean).1
    }

    pub fn embed(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat(&[self.mean, self.log_std])
    }

    pub fn stop_grad(&self, tape: &mut Tape) -> Self {
        GaussianVars { mean: tape.stop_grad(self.mean), log_std: tape.stop_grad(self.log_std) }
    }

    /// Row `r` as a plain value.
    pub fn row(&self, tape: &Tape, r: usize) -> DiagGaussian {
        let d = self.dim(tape);
        let m = tape.value(self.mean)[r * d..(r + 1) * d].to_vec();
        let l = tape.value(self.log_std)[r * d..(r + 1) * d].to_vec();
        DiagGaussian { mean: m, log_std: l }
    }

    /// Per-row `KL(self || other)`, shape `[rows, 1]`.
    pub fn kl(&self, tape: &mut Tape, other: &GaussianVars) -> Result<Var> {
        let var_p = {
            let two = tape.scale(self.log_std, 2.0);
            tape.exp(two)
        };
        let dm = tape.sub(self.mean, other.mean)?;
        let dm2 = tape.square(dm);
        let num = tape.add(var_p, dm2)?;
        let inv_q = {
            let m2 = tape.scale(other.log_std, -2.0);
            tape.exp(m2)
        };
        let ratio = tape.mul(num, inv_q)?;
        let half = tape.scale(ratio, 0.5);
        let dl = tape.sub(other.log_std, self.log_std)?;
        let elem = tape.add(dl, half)?;
        let elem = tape.offset(elem, -0.5);
        Ok(tape.sum_cols(elem))
    }

    /// Per-row `KL(self || N(0, I))`.
    pub fn kl_standard(&self, tape: &mut Tape) -> Result<Var> {
        let var_p = {
            let two = tape.scale(self.log_std, 2.0);
            tape.exp(two)
        };
        let m2 = tape.square(self.mean);
        let num = tape.add(var_p, m2)?;
        let half = tape.scale(num, 0.5);
        let nl = tape.neg(self.log_std);
        let elem = tape.add(nl, half)?;
        let elem = tape.offset(elem, -0.5);
        Ok(tape.sum_cols(elem))
    }

    /// `mean + exp(log_std) * noise`, noise given as a `[rows, d]` constant.
    pub fn sample(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        let std = tape.exp(self.log_std);
        let scaled = tape.mul(std, noise)?;
        tape.add(self.mean, scaled)
    }

    /// Per-row log density of `x`, shape `[rows, 1]`.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let diff = tape.sub(x, self.mean)?;
        let neg_l = tape.neg(self.log_std);
        let inv_std = tape.exp(neg_l);
        let z = tape.mul(diff, inv_std)?;
        let z2 = tape.square(z);
        let half = tape.scale(z2, -0.5);
        let elem = tape.sub(half, self.log_std)?;
        let elem = tape.offset(elem, -HALF_LN_2PI);
        Ok(tape.sum_cols(elem))
    }
}

/// Per-row cosine similarity of two `[rows, n]` values, shape `[rows, 1]`.
pub fn cosine_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_cols(ab);
    let a2 = tape.square(a);
    let na2 = tape.sum_cols(a2);
    let b2 = tape.square(b);
    let nb2 = tape.sum_cols(b2);
    let prod = tape.mul(na2, nb2)?;
    let prod = tape.offset(prod, COSINE_EPS);
    let denom = tape.sqrt(prod);
    tape.div(dot, denom)
}

/// MLP whose output is split into a diagonal Gaussian `(mean, log_std)`.
/// With `squash` the mean passes through `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMlp {
    pub net: Mlp,
    pub squash: bool,
}

impl GaussianMlp {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        layers: usize,
        dim: usize,
        activation: Activation,
        squash: bool,
        rng: &mut R,
    ) -> Self {
        GaussianMlp { net: Mlp::with_hidden(input, hidden, layers, 2 * dim, activation, rng), squash }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        self.net.bind(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<GaussianVars> {
        let out = vars.forward(tape, x)?;
        let mut g = GaussianVars::from_head(tape, out)?;
        if self.squash {
            g.mean = tape.tanh(g.mean);
        }
        Ok(g)
    }

    /// One distribution per input row.
    pub fn forward_plain(&self, x: &[f64], rows: usize) -> Vec<DiagGaussian> {
        let out = self.net.forward_plain(x, rows);
        let d = self.dim();
        out.chunks(2 * d)
            .map(|row| {
                let mean = row[..d].iter().map(|&m| if self.squash { m.tanh() } else { m }).collect();
                let log_std = row[d..].iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
                DiagGaussian { mean, log_std }
            })
            .collect()
    }

    /// Means only, `[rows, d]` flattened.
    pub fn mean_plain(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let out = self.net.forward_plain(x, rows);
        let d = self.dim();
        out.chunks(2 * d)
            .flat_map(|row| row[..d].iter().map(|&m| if self.squash { m.tanh() } else { m }))
            .collect()
    }
}

impl Parameterized for GaussianMlp {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.net.params_mut()
    }
}
