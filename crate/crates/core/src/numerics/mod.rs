//! Dense arithmetic, reverse-mode autodiff, MLPs and Adam.

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::{Adam, DEFAULT_LR};
pub use mlp::{Activation, Mlp, MlpVars, Parameterized};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// A recorded scalar objective together with its trainable leaves.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub params: Vec<(String, Var)>,
}

/// Pairs `p`'s parameter names, prefixed, with the leaves it was bound to.
pub fn named_vars(prefix: &str, p: &impl Parameterized, vars: impl IntoIterator<Item = Var>) -> Vec<(String, Var)> {
    let names = p.params();
    let vars: Vec<Var> = vars.into_iter().collect();
    assert_eq!(names.len(), vars.len(), "{prefix}: bound leaves do not match parameters");
    names.into_iter().zip(vars).map(|((n, _), v)| (format!("{prefix}.{n}"), v)).collect()
}

/// Bounds applied to every log-std head.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
