use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ParamId, ParamStore, Tape, Tensor, Var};

const MASKED: f64 = -1e30;

/// Multi-head self-attention with a shared output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub num_heads: usize,
    pub d: usize,
    pub causal: bool,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    /// `[d x d]`; rows `m*dh..(m+1)*dh` read head `m`.
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOut {
    /// Projected output, `[T x d]`.
    pub h: Var,
}

/// Per-head views of one attention pass, as plain tensors.
#[derive(Debug, Clone)]
pub struct HeadDecomposition {
    /// Pre-projection head outputs, `[T x H x d/H]`.
    pub head_blocks: Tensor,
    /// Post-projection additive contributions `O . (0, .., a_m, .., 0)`,
    /// `[T x H x d]`; they sum over heads to the attention output.
    pub contributions: Tensor,
}

impl AttentionBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, num_heads: usize, causal: bool, rng: &mut R) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!("{num_heads} attention heads do not divide width {d}")));
        }
        let dh = d / num_heads;
        let mut mk = |name: &str, m: usize, store: &mut ParamStore| {
            store.add(format!("{prefix}.{name}{m}"), Tensor::xavier(d, dh, rng))
        };
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for m in 0..num_heads {
            wq.push(mk("wq", m, store));
            wk.push(mk("wk", m, store));
            wv.push(mk("wv", m, store));
        }
        let wo = store.add(format!("{prefix}.wo"), Tensor::xavier(d, d, rng));
        Ok(Self { num_heads, d, causal, wq, wk, wv, wo })
    }

    pub fn head_width(&self) -> usize {
        self.d / self.num_heads
    }

    fn mask(&self, t: usize) -> Tensor {
        let mut m = Tensor::zeros(&[t, t]);
        if self.causal {
            for i in 0..t {
                for j in i + 1..t {
                    m.data_mut()[i * t + j] = MASKED;
                }
            }
        }
        m
    }

    /// Returns the projected output and the per-head pre-projection outputs.
    pub fn forward_heads(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::Dimension(format!("attention input {shape:?}, expected [T x {}]", self.d)));
        }
        let t = shape[0];
        let scale = 1.0 / (self.head_width() as f64).sqrt();
        let mask = tape.constant(self.mask(t));
        let mut heads = Vec::with_capacity(self.num_heads);
        for m in 0..self.num_heads {
            let wq = tape.param(store, self.wq[m]);
            let wk = tape.param(store, self.wk[m]);
            let wv = tape.param(store, self.wv[m]);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale);
            let s = tape.add(s, mask)?;
            let p = tape.softmax(s)?;
            heads.push(tape.matmul(p, v)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = tape.param(store, self.wo);
        let h = tape.matmul(cat, wo)?;
        Ok((h, heads))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<AttentionOut> {
        Ok(AttentionOut { h: self.forward_heads(tape, store, x)?.0 })
    }

    /// Plain-tensor pass exposing both head decompositions.
    pub fn decompose(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, HeadDecomposition)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (h, heads) = self.forward_heads(&mut tape, store, xv)?;
        let t = x.rows();
        let (hh, dh, d) = (self.num_heads, self.head_width(), self.d);
        let wo = store.value(self.wo);
        let mut blocks = vec![0.0; t * hh * dh];
        let mut contrib = vec![0.0; t * hh * d];
        for (m, &hv) in heads.iter().enumerate() {
            let a = tape.value(hv);
            let c = a.matmul(&wo.slice_rows(m * dh, dh)?)?;
            for i in 0..t {
                blocks[(i * hh + m) * dh..(i * hh + m + 1) * dh].copy_from_slice(a.row(i));
                contrib[(i * hh + m) * d..(i * hh + m + 1) * d].copy_from_slice(c.row(i));
            }
        }
        Ok((
            tape.value(h).clone(),
            HeadDecomposition {
                head_blocks: Tensor::new(vec![t, hh, dh], blocks)?,
                contributions: Tensor::new(vec![t, hh, d], contrib)?,
            },
        ))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for m in 0..self.num_heads {
            ids.extend([self.wq[m], self.wk[m], self.wv[m]]);
        }
        ids.push(self.wo);
        ids
    }
}
