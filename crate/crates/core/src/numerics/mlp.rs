use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{matmul_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Anything holding trainable tensors in a fixed, named order.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the raw parameter bytes; used for frozen-module checks.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }
}

/// Feed-forward network: affine layers with an activation between them and a
/// linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

/// An [`Mlp`] whose parameters have been recorded on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            weights.push(Tensor::glorot(pair[0], pair[1], rng));
            biases.push(Tensor::zeros(1, pair[1]));
        }
        Mlp { weights, biases, activation }
    }

    /// `input -> hidden x hidden_layers -> output`.
    pub fn with_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, hidden_layers));
        dims.push(output);
        Mlp::new(&dims, activation, rng)
    }

    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::shape("mlp", "weights and biases must pair up"));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if b.rows() != 1 || b.cols() != w.cols() {
                return Err(Error::shape("mlp", format!("layer {i}: bias {:?} vs weight {:?}", b.shape(), w.shape())));
            }
            if i > 0 && weights[i - 1].cols() != w.rows() {
                return Err(Error::shape("mlp", format!("layer {i} input {} != previous output {}", w.rows(), weights[i - 1].cols())));
            }
        }
        Ok(Mlp { weights, biases, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(Tensor::cols).unwrap_or(0)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.weights.iter().map(Tensor::cols));
        d
    }

    /// Records parameters as trainable leaves, or as constants when frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                if trainable {
                    (tape.param(w), tape.param(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect();
        MlpVars { layers, activation: self.activation }
    }

    /// Tape-free forward pass over `rows` stacked inputs.
    pub fn forward_plain(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (k, n) = (w.rows(), w.cols());
            let mut out = vec![0.0; rows * n];
            matmul_acc(&h, w.data(), &mut out, rows, k, n);
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
                if i < last {
                    row.iter_mut().for_each(|v| *v = self.activation.apply(*v));
                }
            }
            h = out;
        }
        h
    }

    /// Copies gradients for the bound parameters into each tensor's `grad`.
    pub fn store_grads(&mut self, vars: &MlpVars, grads: &Gradients) {
        for ((w, b), &(wv, bv)) in self.weights.iter_mut().zip(self.biases.iter_mut()).zip(&vars.layers) {
            w.grad = Some(grads.get_or_zero(wv, w.len()));
            b.grad = Some(grads.get_or_zero(bv, b.len()));
        }
    }

    /// Polyak update: `self <- (1 - tau) * self + tau * source`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        let pairs = self
            .weights
            .iter_mut()
            .zip(&source.weights)
            .chain(self.biases.iter_mut().zip(&source.biases));
        for (dst, src) in pairs {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - tau) * *d + tau * s;
            }
        }
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("w{i}"), w));
            out.push((format!("b{i}"), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (i, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("w{i}"), w));
            out.push((format!("b{i}"), b));
        }
        out
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_bounded_and_chained() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::with_hidden(4, 64, 2, 16, Activation::Tanh, &mut rng);
        assert_eq!(m.layer_dims(), vec![4, 64, 64, 16]);
        let bound = (6.0f64 / 68.0).sqrt();
        assert!(m.weights()[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn plain_forward_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for act in [Activation::Tanh, Activation::Relu] {
            let m = Mlp::with_hidden(3, 8, 2, 2, act, &mut rng);
            let x: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.4).collect();
            let mut t = Tape::new();
            let v = m.bind(&mut t, true);
            let xv = t.constant_rows(2, 3, x.clone());
            let y = v.forward(&mut t, xv).unwrap();
            assert_eq!(t.value(y), m.forward_plain(&x, 2).as_slice());
        }
    }

    #[test]
    fn from_parts_validates_chain() {
        let w0 = Tensor::zeros(3, 4);
        let w1 = Tensor::zeros(5, 2);
        let err = Mlp::from_parts(vec![w0, w1], vec![Tensor::zeros(1, 4), Tensor::zeros(1, 2)], Activation::Tanh);
        assert!(err.is_err());
    }

    #[test]
    fn soft_update_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mlp::with_hidden(2, 4, 1, 1, Activation::Tanh, &mut rng);
        let mut b = Mlp::with_hidden(2, 4, 1, 1, Activation::Tanh, &mut rng);
        let before = b.clone();
        b.soft_update_from(&a, 0.25);
        for ((x, y), z) in b.weights()[0].data().iter().zip(before.weights()[0].data()).zip(a.weights()[0].data()) {
            assert!((x - (0.75 * y + 0.25 * z)).abs() < 1e-15);
        }
    }
}
