//! Small building blocks shared by the network modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Forward-pass mode. Training carries the random stream used by dropout
/// and query masking.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        }
    }
}

/// `x W (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), 1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Inverted dropout: in training, zeroes entries with probability `p` and
/// rescales survivors by `1 / (1 - p)`. Identity at eval or when `p = 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, mode: &mut Mode) -> Var {
    let Some(rng) = mode.rng() else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask = Matrix::from_fn(r, c, |_, _| if rng.gen::<f64>() < p { 0.0 } else { keep });
    let mask = g.constant(mask);
    g.mul(x, mask)
}
