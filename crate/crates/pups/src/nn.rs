use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Affine map `x · W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Registers `{name}.weight` and `{name}.bias`, drawn uniformly from
    /// `±1/√inputs`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), inputs, outputs, bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, outputs, bound, rng);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], p[self.bias])
    }
}

/// Per-column gain and bias applied after row normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![1, width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![1, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], Self::EPS)
    }
}
