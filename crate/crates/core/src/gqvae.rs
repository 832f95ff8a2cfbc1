//! Gaussian-quantized autoencoding: a codebook of diagonal-Gaussian codes,
//! nearest-code matching, the three-term quantization loss and
//! straight-through quantization. A vector mode stores bare mean vectors
//! instead, for the VQ comparison.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{squared_distance, DiagGaussian, GaussianVars};
use crate::numerics::{Gradients, Parameterized, Tape, Tensor, Var, LOG_STD_MAX, LOG_STD_MIN};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookMode {
    #[default]
    Gaussian,
    Vector,
}

impl CodebookMode {
    pub fn name(self) -> &'static str {
        match self {
            CodebookMode::Gaussian => "gaussian",
            CodebookMode::Vector => "vector",
        }
    }
}

/// Codebook and quantization-loss settings shared by the context and skill
/// GQ-VAEs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GqvaeConfig {
    pub codebook_mode: CodebookMode,
    /// Squared (true) or plain Euclidean distances in the loss.
    pub squared_norm: bool,
    /// Downstream `c` and `z` come from the matched code (true) or from the
    /// raw encoder output (false).
    pub quantized_downstream: bool,
    pub context_codes: usize,
    pub skill_codes: usize,
    /// Commitment weight of the context loss.
    pub eta: f64,
    /// Commitment weight of the skill loss.
    pub iota: f64,
    /// Updates between dead-code checks.
    pub maintenance_interval: usize,
    pub reinit_sigma: f64,
}

impl Default for GqvaeConfig {
    fn default() -> Self {
        GqvaeConfig {
            codebook_mode: CodebookMode::Gaussian,
            squared_norm: true,
            quantized_downstream: true,
            context_codes: 16,
            skill_codes: 16,
            eta: 0.25,
            iota: 0.25,
            maintenance_interval: 200,
            reinit_sigma: 0.01,
        }
    }
}

impl GqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("gqvae.{key}: {msg}")));
        for (key, v) in [("eta", self.eta), ("iota", self.iota)] {
            if !(v > 0.0) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        if !(self.reinit_sigma >= 0.0) {
            return bad("reinit_sigma", "must be non-negative".into());
        }
        for (key, v) in [("context_codes", self.context_codes), ("skill_codes", self.skill_codes), ("maintenance_interval", self.maintenance_interval)] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// `K` learnable codes over a `d`-dimensional latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    mode: CodebookMode,
    means: Tensor,
    log_stds: Tensor,
    usage: Vec<u64>,
    initialized: bool,
}

/// Codebook parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CodebookVars {
    pub mean: Var,
    pub log_std: Option<Var>,
}

impl CodebookVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        std::iter::once(self.mean).chain(self.log_std)
    }
}

impl Codebook {
    /// Codes start as small random means with unit scale; call
    /// [`Codebook::init_farthest_point`] on the first batch to seed them
    /// from data.
    pub fn new<R: Rng + ?Sized>(k: usize, dim: usize, mode: CodebookMode, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyCodebook);
        }
        let n = Normal::new(0.0, 0.1).expect("valid normal");
        let means = Tensor::from_rows(k, dim, (0..k * dim).map(|_| n.sample(rng)).collect());
        Ok(Codebook { mode, means, log_stds: Tensor::zeros(k, dim), usage: vec![0; k], initialized: false })
    }

    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn mode(&self) -> CodebookMode {
        self.mode
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Width of a code embedding: `2d` in gaussian mode, `d` in vector mode.
    pub fn embed_dim(&self) -> usize {
        match self.mode {
            CodebookMode::Gaussian => 2 * self.dim(),
            CodebookMode::Vector => self.dim(),
        }
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn log_stds(&self) -> &Tensor {
        &self.log_stds
    }

    pub fn code(&self, k: usize) -> DiagGaussian {
        DiagGaussian::new(self.means.row_slice(k).to_vec(), self.log_stds.row_slice(k).to_vec())
            .expect("code rows share a dimension")
    }

    pub fn code_embedding(&self, k: usize) -> Vec<f64> {
        let mut e = self.means.row_slice(k).to_vec();
        if self.mode == CodebookMode::Gaussian {
            e.extend_from_slice(self.log_stds.row_slice(k));
        }
        e
    }

    fn set_code_embedding(&mut self, k: usize, e: &[f64]) {
        let d = self.dim();
        self.means.data_mut()[k * d..(k + 1) * d].copy_from_slice(&e[..d]);
        if self.mode == CodebookMode::Gaussian {
            for (dst, &v) in self.log_stds.data_mut()[k * d..(k + 1) * d].iter_mut().zip(&e[d..]) {
                *dst = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }

    /// Index of the nearest code embedding; ties go to the lowest index.
    pub fn nearest(&self, e: &[f64]) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        if e.len() != self.embed_dim() {
            return Err(Error::shape("codebook_match", format!("embedding of length {}, codes have {}", e.len(), self.embed_dim())));
        }
        let mut best = (0, f64::INFINITY);
        for k in 0..self.len() {
            let d = squared_distance(e, &self.code_embedding(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best.0)
    }

    /// Nearest code for a Gaussian encoder output; counts the match.
    pub fn match_gaussian(&mut self, o: &DiagGaussian) -> Result<(usize, DiagGaussian)> {
        self.expect_mode(CodebookMode::Gaussian)?;
        let k = self.nearest(&o.embed())?;
        self.usage[k] += 1;
        Ok((k, self.code(k)))
    }

    /// Nearest code for a bare vector; counts the match.
    pub fn match_vector(&mut self, v: &[f64]) -> Result<(usize, Vec<f64>)> {
        self.expect_mode(CodebookMode::Vector)?;
        let k = self.nearest(v)?;
        self.usage[k] += 1;
        Ok((k, self.means.row_slice(k).to_vec()))
    }

    fn expect_mode(&self, mode: CodebookMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::ModeMismatch { expected: mode.name(), actual: self.mode.name() });
        }
        Ok(())
    }

    /// Matches every row of a `[rows, embed_dim]` buffer and counts the matches.
    pub fn match_rows(&mut self, embeds: &[f64]) -> Result<Vec<usize>> {
        let w = self.embed_dim();
        if embeds.len() % w != 0 {
            return Err(Error::shape("codebook_match", format!("{} values is not a multiple of {w}", embeds.len())));
        }
        let idx = embeds.chunks(w).map(|e| self.nearest(e)).collect::<Result<Vec<_>>>()?;
        for &k in &idx {
            self.usage[k] += 1;
        }
        Ok(idx)
    }

    /// Encoder-output embeddings as matched against codes.
    pub fn embed_rows(&self, tape: &Tape, enc: &GaussianVars) -> Vec<f64> {
        let (rows, d) = tape.shape(enc.mean);
        let m = tape.value(enc.mean);
        match self.mode {
            CodebookMode::Vector => m.to_vec(),
            CodebookMode::Gaussian => {
                let l = tape.value(enc.log_std);
                let mut out = Vec::with_capacity(rows * 2 * d);
                for r in 0..rows {
                    out.extend_from_slice(&m[r * d..(r + 1) * d]);
                    out.extend_from_slice(&l[r * d..(r + 1) * d]);
                }
                out
            }
        }
    }

    /// Seeds codes from data: first pick uniform, then repeatedly the point
    /// farthest from all chosen codes. Short on distinct points, remaining
    /// codes copy random points plus `N(0, sigma^2)` noise.
    pub fn init_farthest_point<R: Rng + ?Sized>(&mut self, embeds: &[Vec<f64>], sigma: f64, rng: &mut R) -> Result<()> {
        if embeds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = self.len();
        let mut chosen: Vec<usize> = vec![rng.random_range(0..embeds.len())];
        let mut min_d: Vec<f64> = embeds.iter().map(|e| squared_distance(e, &embeds[chosen[0]])).collect();
        while chosen.len() < k {
            let (i, d) = min_d
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            if d <= 0.0 {
                break;
            }
            chosen.push(i);
            for (m, e) in min_d.iter_mut().zip(embeds) {
                *m = m.min(squared_distance(e, &embeds[i]));
            }
        }
        let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for slot in 0..k {
            let e: Vec<f64> = match chosen.get(slot) {
                Some(&i) => embeds[i].clone(),
                None => embeds[rng.random_range(0..embeds.len())].iter().map(|v| v + noise.sample(rng)).collect(),
            };
            self.set_code_embedding(slot, &e);
        }
        self.initialized = true;
        Ok(())
    }

    /// Replaces every code unused since the last reset with a random recent
    /// embedding plus noise, then clears the counters. Returns the replaced
    /// indices.
    pub fn reinit_dead_codes<R: Rng + ?Sized>(&mut self, recent: &[Vec<f64>], sigma: f64, rng: &mut R) -> Vec<usize> {
        if recent.is_empty() {
            log::warn!("codebook maintenance skipped: no recent encoder outputs");
            return Vec::new();
        }
        let noise = Normal::new(0.0, sigma.max(0.0)).expect("non-negative sigma");
        let dead: Vec<usize> = (0..self.len()).filter(|&k| self.usage[k] == 0).collect();
        for &k in &dead {
            let src = &recent[rng.random_range(0..recent.len())];
            let e: Vec<f64> = src.iter().map(|v| v + noise.sample(rng)).collect();
            self.set_code_embedding(k, &e);
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        dead
    }

    /// Entropy (nats) of the usage distribution; 0 when nothing matched.
    pub fn usage_entropy(&self) -> f64 {
        let total: u64 = self.usage.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.usage
            .iter()
            .filter(|&&u| u > 0)
            .map(|&u| {
                let p = u as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CodebookVars {
        let put = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let mean = put(tape, &self.means);
        let log_std = (self.mode == CodebookMode::Gaussian).then(|| put(tape, &self.log_stds));
        CodebookVars { mean, log_std }
    }

    pub fn store_grads(&mut self, vars: &CodebookVars, grads: &Gradients) {
        self.means.grad = Some(grads.get_or_zero(vars.mean, self.means.len()));
        if let Some(l) = vars.log_std {
            self.log_stds.grad = Some(grads.get_or_zero(l, self.log_stds.len()));
        }
    }

    /// Keeps log-stds inside the clamp range after an optimizer step.
    pub fn clamp_log_stds(&mut self) {
        for v in self.log_stds.data_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Per-code CSV: `index,usage,mean_0..,log_std_0..`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let d = self.dim();
        let mut header = vec!["index".to_string(), "usage".to_string()];
        header.extend((0..d).map(|i| format!("mean_{i}")));
        if self.mode == CodebookMode::Gaussian {
            header.extend((0..d).map(|i| format!("log_std_{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let vals: Vec<String> = self.code_embedding(k).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{k},{},{}", self.usage[k], vals.join(","))?;
        }
        Ok(())
    }

    pub(crate) fn restore(&mut self, means: &Tensor, log_stds: &Tensor, initialized: bool) -> Result<()> {
        if means.shape() != self.means.shape() || log_stds.shape() != self.log_stds.shape() {
            return Err(Error::shape("codebook_restore", "code tensor shape differs"));
        }
        self.means.data_mut().copy_from_slice(means.data());
        self.log_stds.data_mut().copy_from_slice(log_stds.data());
        self.initialized = initialized;
        Ok(())
    }
}

impl Parameterized for Codebook {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut p = vec![("mean".to_string(), &self.means)];
        if self.mode == CodebookMode::Gaussian {
            p.push(("log_std".to_string(), &self.log_stds));
        }
        p
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut p = vec![("mean".to_string(), &mut self.means)];
        if self.mode == CodebookMode::Gaussian {
            p.push(("log_std".to_string(), &mut self.log_stds));
        }
        p
    }
}

/// Matched codes gathered per batch row, both as a tape value and as an
/// embedding `[rows, embed_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct Matched {
    pub mean: Var,
    pub log_std: Option<Var>,
    pub embed: Var,
}

pub fn gather_codes(tape: &mut Tape, cb: &CodebookVars, idx: &[usize]) -> Result<Matched> {
    let mean = tape.gather_rows(cb.mean, idx)?;
    let log_std = cb.log_std.map(|l| tape.gather_rows(l, idx)).transpose()?;
    let embed = match log_std {
        Some(l) => tape.concat(&[mean, l])?,
        None => mean,
    };
    Ok(Matched { mean, log_std, embed })
}

/// Embedding of encoder outputs on the tape, matching the codebook mode.
pub fn encoder_embed(tape: &mut Tape, enc: &GaussianVars, mode: CodebookMode) -> Result<Var> {
    match mode {
        CodebookMode::Gaussian => enc.embed(tape),
        CodebookMode::Vector => Ok(enc.mean),
    }
}

/// How per-row quantization losses are reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Per-row `||a - b||^2` or `||a - b||`, shape `[rows, 1]`.
pub fn row_distance(tape: &mut Tape, a: Var, b: Var, squared: bool) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let s = tape.sum_cols(sq);
    Ok(if squared {
        s
    } else {
        let s = tape.offset(s, 1e-12);
        tape.sqrt(s)
    })
}

fn reduce(tape: &mut Tape, v: Var, r: Reduction) -> Var {
    match r {
        Reduction::Mean => tape.mean(v),
        Reduction::Sum => tape.sum(v),
    }
}

/// Scalar pieces of the quantization loss.
#[derive(Clone, Copy, Debug)]
pub struct GqTerms {
    /// `||sg[O] - O~||`, trains the encoder.
    pub commit: Var,
    /// `weight * ||O - sg[O~]||`, trains the matched codes.
    pub codebook: Var,
    /// `||X~ - X||`, trains the decoder.
    pub recon: Var,
    pub total: Var,
}

/// Three-term quantization loss over a batch. `enc_embed` and `code_embed`
/// are `[rows, e]`; `recon` and `target` are `[rows, n]`.
pub fn gq_loss(
    tape: &mut Tape,
    enc_embed: Var,
    code_embed: Var,
    recon: Var,
    target: Var,
    weight: f64,
    squared: bool,
    reduction: Reduction,
) -> Result<GqTerms> {
    let code_sg = tape.stop_grad(code_embed);
    let enc_sg = tape.stop_grad(enc_embed);
    let t1 = row_distance(tape, code_sg, enc_embed, squared)?;
    let commit = reduce(tape, t1, reduction);
    let t2 = row_distance(tape, code_embed, enc_sg, squared)?;
    let t2 = reduce(tape, t2, reduction);
    let codebook = tape.scale(t2, weight);
    let t3 = row_distance(tape, recon, target, squared)?;
    let recon = reduce(tape, t3, reduction);
    let total = tape.add(commit, codebook)?;
    let total = tape.add(total, recon)?;
    Ok(GqTerms { commit, codebook, recon, total })
}

/// Quantized distribution for downstream use: forward value is the matched
/// code, gradients flow to the encoder output unchanged. In vector mode the
/// result has a constant zero log-std and only the mean is meaningful.
pub fn quantize_forward(tape: &mut Tape, enc: &GaussianVars, cb: &Codebook, idx: &[usize]) -> Result<GaussianVars> {
    let d = cb.dim();
    let mut mv = Vec::with_capacity(idx.len() * d);
    let mut lv = Vec::with_capacity(idx.len() * d);
    for &k in idx {
        if k >= cb.len() {
            return Err(Error::InvalidArgument(format!("code index {k} out of range")));
        }
        mv.extend_from_slice(cb.means.row_slice(k));
        lv.extend_from_slice(cb.log_stds.row_slice(k));
    }
    let mean = tape.straight_through(enc.mean, mv)?;
    let log_std = match cb.mode {
        CodebookMode::Gaussian => tape.straight_through(enc.log_std, lv)?,
        CodebookMode::Vector => tape.constant_rows(idx.len(), d, vec![0.0; idx.len() * d]),
    };
    Ok(GaussianVars { mean, log_std })
}

/// Bounded FIFO of recent encoder embeddings plus the update counter that
/// schedules dead-code reinitialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Maintenance {
    pub interval: usize,
    pub sigma: f64,
    capacity: usize,
    updates: usize,
    recent: VecDeque<Vec<f64>>,
}

impl Maintenance {
    pub fn new(interval: usize, sigma: f64, capacity: usize) -> Self {
        Maintenance { interval, sigma, capacity: capacity.max(1), updates: 0, recent: VecDeque::new() }
    }

    pub fn record(&mut self, embeds: &[f64], width: usize) {
        for e in embeds.chunks(width) {
            if self.recent.len() == self.capacity {
                self.recent.pop_front();
            }
            self.recent.push_back(e.to_vec());
        }
    }

    pub fn recent(&self) -> Vec<Vec<f64>> {
        self.recent.iter().cloned().collect()
    }

    /// Counts one update; every `interval` updates reinitialises dead codes
    /// and returns their indices.
    pub fn tick<R: Rng + ?Sized>(&mut self, cb: &mut Codebook, rng: &mut R) -> Option<Vec<usize>> {
        self.updates += 1;
        if self.interval == 0 || self.updates % self.interval != 0 {
            return None;
        }
        let recent = self.recent();
        Some(cb.reinit_dead_codes(&recent, self.sigma, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn cb_from(embeds: &[&[f64]], mode: CodebookMode) -> Codebook {
        let d = match mode {
            CodebookMode::Gaussian => embeds[0].len() / 2,
            CodebookMode::Vector => embeds[0].len(),
        };
        let mut cb = Codebook::new(embeds.len(), d, mode, &mut stream(0, "cb", 0)).unwrap();
        for (k, e) in embeds.iter().enumerate() {
            cb.set_code_embedding(k, e);
        }
        cb
    }

    #[test]
    fn match_examples() {
        let mut cb = cb_from(&[&[0.0, 0.0], &[3.0, 0.0]], CodebookMode::Gaussian);
        let (k, _) = cb.match_gaussian(&DiagGaussian::new(vec![1.0], vec![0.0]).unwrap()).unwrap();
        assert_eq!(k, 0);
        let (k, code) = cb.match_gaussian(&DiagGaussian::new(vec![3.0], vec![0.0]).unwrap()).unwrap();
        assert_eq!(k, 1);
        assert_eq!(code.embed(), vec![3.0, 0.0]);
        assert_eq!(cb.usage(), &[1, 1]);

        let mut cb = cb_from(&[&[5.0, 5.0], &[0.0, 1.0], &[9.0, 9.0], &[0.0, -1.0]], CodebookMode::Gaussian);
        let (k, _) = cb.match_gaussian(&DiagGaussian::new(vec![0.0], vec![0.0]).unwrap()).unwrap();
        assert_eq!(k, 1);
    }

    #[test]
    fn empty_and_mode_errors() {
        assert!(matches!(Codebook::new(0, 2, CodebookMode::Gaussian, &mut stream(0, "c", 0)), Err(Error::EmptyCodebook)));
        let mut cb = cb_from(&[&[0.0, 0.0]], CodebookMode::Vector);
        assert!(matches!(cb.match_gaussian(&DiagGaussian::standard(2)), Err(Error::ModeMismatch { .. })));
        assert_eq!(cb.match_vector(&[1.0, 1.0]).unwrap().0, 0);
    }

    #[test]
    fn vector_mode_agrees_with_zero_log_std() {
        let codes: [&[f64]; 3] = [&[0.0, 1.0], &[2.0, 2.0], &[-1.0, 0.5]];
        let mut vq = cb_from(&codes, CodebookMode::Vector);
        let padded: Vec<Vec<f64>> = codes.iter().map(|c| [c.to_vec(), vec![0.0, 0.0]].concat()).collect();
        let refs: Vec<&[f64]> = padded.iter().map(|v| v.as_slice()).collect();
        let mut gq = cb_from(&refs, CodebookMode::Gaussian);
        let mut rng = stream(3, "v", 0);
        for _ in 0..100 {
            let v = vec![rng.random_range(-2.0..3.0), rng.random_range(-1.0..3.0)];
            let a = vq.match_vector(&v).unwrap().0;
            let b = gq.match_gaussian(&DiagGaussian::new(v, vec![0.0, 0.0]).unwrap()).unwrap().0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gq_loss_example_and_zero() {
        let mut tape = Tape::new();
        let enc = tape.constant_rows(1, 2, vec![0.0, 0.0]);
        let code = tape.constant_rows(1, 2, vec![1.0, 0.0]);
        let x = tape.constant_rows(1, 2, vec![0.0, 0.0]);
        let xr = tape.constant_rows(1, 2, vec![0.3, 0.4]);
        let t = gq_loss(&mut tape, enc, code, xr, x, 0.25, true, Reduction::Sum).unwrap();
        assert!((tape.scalar_value(t.total) - 1.5).abs() < 1e-12);
        let t = gq_loss(&mut tape, enc, enc, x, x, 0.25, true, Reduction::Mean).unwrap();
        assert_eq!(tape.scalar_value(t.total), 0.0);
    }

    #[test]
    fn gq_loss_gradient_partition() {
        let mut tape = Tape::new();
        let enc = tape.param(&Tensor::row(vec![0.2, -0.1]));
        let code = tape.param(&Tensor::row(vec![1.0, 0.5]));
        let x = tape.constant_rows(1, 2, vec![0.0, 0.0]);
        let t = gq_loss(&mut tape, enc, code, x, x, 0.25, true, Reduction::Sum).unwrap();
        let g1 = tape.backward(t.commit).unwrap();
        assert!(g1.get(code).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        let g2 = tape.backward(t.codebook).unwrap();
        assert!(g2.get(enc).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        let gc = g2.get(code).unwrap();
        assert!((gc[0] - 0.25 * 2.0 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn quantize_forward_is_bit_exact() {
        let cb = cb_from(&[&[0.123, -4.0], &[0.7, 1.0]], CodebookMode::Gaussian);
        let mut tape = Tape::new();
        let m = tape.param(&Tensor::from_rows(2, 1, vec![0.1, 0.6]));
        let l = tape.param(&Tensor::from_rows(2, 1, vec![-3.0, 0.9]));
        let enc = GaussianVars { mean: m, log_std: l };
        let q = quantize_forward(&mut tape, &enc, &cb, &[0, 1]).unwrap();
        assert_eq!(tape.value(q.mean), &[0.123, 0.7]);
        assert_eq!(tape.value(q.log_std), &[-4.0, 1.0]);
    }

    #[test]
    fn maintenance_rules() {
        let mut rng = stream(0, "m", 0);
        let mut cb = cb_from(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0]], CodebookMode::Gaussian);
        cb.usage = vec![3, 1, 2];
        let before = cb.clone();
        let recent = vec![vec![5.0, 0.1], vec![6.0, -0.2]];
        assert!(cb.reinit_dead_codes(&recent, 0.01, &mut rng).is_empty());
        assert_eq!(cb.means, before.means);
        assert_eq!(cb.usage(), &[0, 0, 0]);

        cb.usage = vec![3, 0, 2];
        assert_eq!(cb.reinit_dead_codes(&recent, 0.01, &mut rng), vec![1]);
        assert_eq!(cb.code_embedding(0), before.code_embedding(0));
        assert_eq!(cb.code_embedding(2), before.code_embedding(2));
        let e = cb.code_embedding(1);
        assert!(e[0] >= 5.0 - 0.03 && e[0] <= 6.0 + 0.03, "{e:?}");
        assert!(e[1] >= -0.2 - 0.03 && e[1] <= 0.1 + 0.03, "{e:?}");

        let mut cb2 = cb.clone();
        assert!(cb2.reinit_dead_codes(&[], 0.01, &mut rng).is_empty());
        assert_eq!(cb2, cb);
    }

    #[test]
    fn farthest_point_seeding_spreads_codes() {
        let mut rng = stream(1, "fp", 0);
        let mut cb = Codebook::new(3, 1, CodebookMode::Vector, &mut rng).unwrap();
        let data: Vec<Vec<f64>> = [0.0, 0.1, 5.0, 5.1, 10.0].iter().map(|&v| vec![v]).collect();
        cb.init_farthest_point(&data, 0.01, &mut rng).unwrap();
        let mut picked: Vec<f64> = (0..3).map(|k| cb.code_embedding(k)[0]).collect();
        picked.sort_by(f64::total_cmp);
        assert!(picked[0] <= 0.1 && (4.9..=5.2).contains(&picked[1]) && picked[2] == 10.0, "{picked:?}");

        let mut cb = Codebook::new(4, 1, CodebookMode::Vector, &mut rng).unwrap();
        cb.init_farthest_point(&[vec![1.0], vec![1.0]], 0.01, &mut rng).unwrap();
        for k in 0..4 {
            assert!((cb.code_embedding(k)[0] - 1.0).abs() < 0.05);
        }
        assert!(cb.is_initialized());
    }

    #[test]
    fn csv_dump_shape() {
        let cb = cb_from(&[&[0.0, 0.0], &[1.0, 1.0]], CodebookMode::Gaussian);
        let mut out = Vec::new();
        cb.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "index,usage,mean_0,log_std_0");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn usage_entropy_bounds() {
        let mut cb = cb_from(&[&[0.0, 0.0], &[1.0, 1.0]], CodebookMode::Gaussian);
        assert_eq!(cb.usage_entropy(), 0.0);
        cb.usage = vec![5, 5];
        assert!((cb.usage_entropy() - 2f64.ln()).abs() < 1e-12);
    }
}
