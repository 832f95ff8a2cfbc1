use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 3e-4;

/// Bias-corrected Adam. Moment buffers are allocated on the first step and
/// are tied to the order of the parameter list passed to [`Adam::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(DEFAULT_LR)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's `grad` (missing grads count as
    /// zero). Non-finite gradients reject the whole step before anything moves.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        for (name, t) in &params {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, (_, t))| m.len() != t.len()) {
            return Err(Error::shape("adam", "parameter list changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((_, p), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = p.grad.take() else {
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= self.beta1;
                    *vi *= self.beta2;
                }
                continue;
            };
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::default();
        let mut p = one(1.0, 1.0);
        opt.step(vec![("p".into(), &mut p)]).unwrap();
        assert!((p.item() - (1.0 - 3e-4)).abs() < 1e-10);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::default();
        let mut p = one(0.5, 0.0);
        opt.step(vec![("p".into(), &mut p)]).unwrap();
        assert_eq!(p.item(), 0.5);
    }

    #[test]
    fn nan_rejected_with_name() {
        let mut opt = Adam::default();
        let mut a = one(0.0, 1.0);
        let mut b = one(0.0, f64::NAN);
        let err = opt.step(vec![("a".into(), &mut a), ("layer.w0".into(), &mut b)]).unwrap_err();
        assert!(err.to_string().contains("layer.w0"));
        assert_eq!(a.item(), 0.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn converges_on_quadratic() {
        // at the default rate 200 steps move x by at most 0.06
        let mut opt = Adam::new(0.05);
        let mut x = Tensor::scalar(0.0);
        for _ in 0..200 {
            let g = 2.0 * (x.item() - 2.0);
            x.grad = Some(vec![g]);
            opt.step(vec![("x".into(), &mut x)]).unwrap();
        }
        assert!((x.item() - 2.0).abs() < 0.05, "x = {}", x.item());
    }
}
