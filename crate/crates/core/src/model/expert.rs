use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::{ParamId, ParamStore, Tape, Tensor, Var};

/// Two-layer GELU perceptron `R^{d_in} -> R^{d_out}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMlp {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertMlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), Tensor::xavier(d_in, d_hidden, rng));
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]));
        let w2 = store.add(format!("{prefix}.w2"), Tensor::xavier(d_hidden, d_out, rng));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_out]));
        Self { d_in, d_hidden, d_out, w1, b1, w2, b2 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let pre = tape.matmul(x, w1)?;
        let pre = tape.add_bias(pre, b1)?;
        let hid = tape.gelu(pre);
        let out = tape.matmul(hid, w2)?;
        tape.add_bias(out, b2)
    }

    /// Same computation on plain tensors.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let hid = x.matmul(store.value(self.w1))?.add_bias(store.value(self.b1))?.map(crate::math::tensor::gelu);
        hid.matmul(store.value(self.w2))?.add_bias(store.value(self.b2))
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_hidden + self.d_hidden + self.d_hidden * self.d_out + self.d_out
    }
}
