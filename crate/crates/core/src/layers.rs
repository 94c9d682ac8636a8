//! Shared building blocks: parameter initialization and the two-layer MLP.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numcore::{NumError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

/// Uniform init with variance `1 / fan_in`.
pub fn variance_scaled(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(fan_in, fan_out, data).expect("positive dims")
}

/// Two-layer perceptron `x → GELU(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub struct MlpSpec<'a> {
    pub prefix: &'a str,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Zero the output layer so the block starts as the zero map.
    pub zero_output: bool,
    pub trainable: bool,
}

impl Mlp {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: MlpSpec<'_>) -> Result<Self, NumError> {
        let MlpSpec { prefix, d_in, d_hidden, d_out, zero_output, trainable } = spec;
        let w1 = store.add(format!("{prefix}.w1"), variance_scaled(rng, d_in, d_hidden), ParamGroup::Other, trainable)?;
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(1, d_hidden), ParamGroup::Other, trainable)?;
        let w2_init = if zero_output { Tensor::zeros(d_hidden, d_out) } else { variance_scaled(rng, d_hidden, d_out) };
        let w2 = store.add(format!("{prefix}.w2"), w2_init, ParamGroup::Other, trainable)?;
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(1, d_out), ParamGroup::Other, trainable)?;
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumError> {
        let (w1, b1, w2, b2) = (tape.param(self.w1), tape.param(self.b1), tape.param(self.w2), tape.param(self.b2));
        let h = tape.linear(x, w1, b1)?;
        let h = tape.gelu(h)?;
        tape.linear(h, w2, b2)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}
