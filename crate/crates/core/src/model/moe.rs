//! Sparse expert blocks: the single-router layer, the head-wise layer and a
//! dense always-on adapter.
//!
//! Both sparse layers are built from [`RoutedBank`]: a router over an input
//! slice, `K` private experts and a top-`k` gate that renormalises the
//! selected logits. Selection is a constant of the forward pass; only the
//! gate values carry gradient back into the router.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::expert::ExpertMlp;
use crate::error::{Error, Result};
use crate::math::{ParamId, ParamStore, Tape, Tensor, Var};

/// One head's routing decision for one token. `experts` is ascending and
/// `gates` is aligned with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Full routing decision for one token: one selection per routing head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRoute {
    pub heads: Vec<HeadSelection>,
}

impl TokenRoute {
    /// Tuple of selected expert sets, one per head.
    pub fn tuple(&self) -> Vec<Vec<usize>> {
        self.heads.iter().map(|h| h.experts.clone()).collect()
    }
}

/// Indices of the `k` largest values. Ties go to the lowest index. Returned
/// ascending.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut sel: Vec<usize> = order.into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedBank {
    pub d_in: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Stored as `[d_in x K]` and applied as `x . W`.
    pub router: ParamId,
    pub experts: Vec<ExpertMlp>,
}

impl RoutedBank {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        d_hidden: usize,
        num_experts: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if top_k == 0 || top_k > num_experts {
            return Err(Error::Config(format!("top-k {top_k} must be in 1..={num_experts}")));
        }
        let router = store.add(format!("{prefix}.router"), Tensor::xavier(d_in, num_experts, rng));
        let experts = (0..num_experts)
            .map(|j| ExpertMlp::new(store, &format!("{prefix}.expert{j}"), d_in, d_hidden, d_out, rng))
            .collect();
        Ok(Self { d_in, num_experts, top_k, router, experts })
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].d_out
    }

    /// `y_t = sum_{j in S_t} alpha_{t,j} E_j(x_t)` for every row of `x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<HeadSelection>)> {
        let n = tape.value(x).rows();
        let (kk, k) = (self.num_experts, self.top_k);
        let w = tape.param(store, self.router);
        let logits = tape.matmul(x, w)?;
        let lv = tape.value(logits);
        let selections: Vec<Vec<usize>> = (0..n).map(|t| top_k(lv.row(t), k)).collect();

        let flat = tape.reshape(logits, &[n * kk, 1])?;
        let picked: Vec<usize> = selections
            .iter()
            .enumerate()
            .flat_map(|(t, sel)| sel.iter().map(move |&j| t * kk + j))
            .collect();
        let sel_logits = tape.gather_rows(flat, &picked)?;
        let sel_logits = tape.reshape(sel_logits, &[n, k])?;
        let gates = tape.softmax(sel_logits)?;
        let gates_flat = tape.reshape(gates, &[n * k, 1])?;

        let d_out = self.d_out();
        let ones = tape.constant(Tensor::ones(&[1, d_out]));
        // Row of each (token, slot) inside the concatenated expert outputs.
        let mut slot_row = vec![0usize; n * k];
        let mut parts = Vec::new();
        let mut row = 0;
        for (e, expert) in self.experts.iter().enumerate() {
            let mut tokens = Vec::new();
            let mut gate_idx = Vec::new();
            for (t, sel) in selections.iter().enumerate() {
                if let Some(s) = sel.iter().position(|&j| j == e) {
                    tokens.push(t);
                    gate_idx.push(t * k + s);
                }
            }
            if tokens.is_empty() {
                continue;
            }
            for &gi in &gate_idx {
                slot_row[gi] = row;
                row += 1;
            }
            let xe = tape.gather_rows(x, &tokens)?;
            let out = expert.forward(tape, store, xe)?;
            let g = tape.gather_rows(gates_flat, &gate_idx)?;
            let g = tape.matmul(g, ones)?;
            parts.push(tape.mul(out, g)?);
        }
        let all = tape.concat_rows(&parts)?;
        let mut y = tape.gather_rows(all, &(0..n).map(|t| slot_row[t * k]).collect::<Vec<_>>())?;
        for s in 1..k {
            let ys = tape.gather_rows(all, &(0..n).map(|t| slot_row[t * k + s]).collect::<Vec<_>>())?;
            y = tape.add(y, ys)?;
        }

        let gv = tape.value(gates);
        let trace = selections
            .into_iter()
            .enumerate()
            .map(|(t, experts)| HeadSelection { experts, gates: gv.row(t).to_vec() })
            .collect();
        Ok((y, trace))
    }

    /// Replays a recorded selection on one input slice.
    pub fn apply_selection(&self, store: &ParamStore, sel: &HeadSelection, x: &[f64]) -> Result<Vec<f64>> {
        if sel.experts.len() != sel.gates.len() || sel.experts.iter().any(|&j| j >= self.num_experts) {
            return Err(Error::Contract(format!("selection {:?} does not fit a bank of {}", sel.experts, self.num_experts)));
        }
        if x.len() != self.d_in {
            return Err(Error::Dimension(format!("slice of {} values for bank input {}", x.len(), self.d_in)));
        }
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let mut acc = vec![0.0; self.d_out()];
        for (&j, &a) in sel.experts.iter().zip(&sel.gates) {
            let out = self.experts[j].eval(store, &xt)?;
            for (o, v) in acc.iter_mut().zip(out.data()) {
                *o += a * v;
            }
        }
        Ok(acc)
    }

    /// Gates for a fixed expert set under the current router.
    pub fn gates_for(&self, store: &ParamStore, x: &[f64], experts: &[usize]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Dimension(format!("slice of {} values for bank input {}", x.len(), self.d_in)));
        }
        if experts.is_empty() || experts.iter().any(|&j| j >= self.num_experts) {
            return Err(Error::Contract(format!("expert set {experts:?} does not fit a bank of {}", self.num_experts)));
        }
        let w = store.value(self.router);
        let mut logits: Vec<f64> = experts
            .iter()
            .map(|&j| (0..self.d_in).map(|i| x[i] * w.get2(i, j)).sum())
            .collect();
        crate::math::tensor::softmax_in_place(&mut logits);
        Ok(logits)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.router];
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids
    }

    /// Router plus the `k` experts a token touches.
    pub fn activated_params(&self) -> usize {
        self.d_in * self.num_experts + self.top_k * self.experts[0].num_params()
    }
}

/// Single router over the full state; experts `R^d -> R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardMoe {
    pub bank: RoutedBank,
}

impl StandardMoe {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        num_experts: usize,
        top_k: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self { bank: RoutedBank::new(store, prefix, d, d, d_hidden, num_experts, top_k, rng)? })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Vec<TokenRoute>)> {
        let (y, sel) = self.bank.forward(tape, store, h)?;
        Ok((y, sel.into_iter().map(|s| TokenRoute { heads: vec![s] }).collect()))
    }
}

/// Head-wise routing: the state is split into `H` contiguous slices, each
/// routed by its own router into its own bank of experts `R^{d/H} -> R^d`;
/// head outputs are summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadMoe {
    pub d: usize,
    pub heads: Vec<RoutedBank>,
}

impl MultiHeadMoe {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        num_heads: usize,
        num_experts: usize,
        top_k: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!("{num_heads} routing heads do not divide width {d}")));
        }
        let dh = d / num_heads;
        let heads = (0..num_heads)
            .map(|m| RoutedBank::new(store, &format!("{prefix}.head{m}"), dh, d, d_hidden, num_experts, top_k, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { d, heads })
    }

    pub fn slice_width(&self) -> usize {
        self.d / self.heads.len()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Vec<TokenRoute>)> {
        let n = tape.value(h).rows();
        let dh = self.slice_width();
        let mut y: Option<Var> = None;
        let mut routes: Vec<TokenRoute> = (0..n).map(|_| TokenRoute { heads: Vec::with_capacity(self.heads.len()) }).collect();
        for (m, bank) in self.heads.iter().enumerate() {
            let slice = tape.slice_cols(h, m * dh, dh)?;
            let (ym, sel) = bank.forward(tape, store, slice)?;
            y = Some(match y {
                None => ym,
                Some(acc) => tape.add(acc, ym)?,
            });
            for (r, s) in routes.iter_mut().zip(sel) {
                r.heads.push(s);
            }
        }
        Ok((y.expect("at least one head"), routes))
    }

    /// Selection-indexed composite map: `sum_m sum_{j in S_m} alpha_{m,j} E^(m)_j(h_m)`.
    pub fn composite_apply(&self, store: &ParamStore, route: &TokenRoute, h: &[f64]) -> Result<Vec<f64>> {
        if route.heads.len() != self.heads.len() {
            return Err(Error::Contract(format!(
                "route has {} heads, layer has {}",
                route.heads.len(),
                self.heads.len()
            )));
        }
        if h.len() != self.d {
            return Err(Error::Dimension(format!("state of width {} for layer width {}", h.len(), self.d)));
        }
        let dh = self.slice_width();
        let mut acc = vec![0.0; self.d];
        for (m, (bank, sel)) in self.heads.iter().zip(&route.heads).enumerate() {
            let ym = bank.apply_selection(store, sel, &h[m * dh..(m + 1) * dh])?;
            for (a, v) in acc.iter_mut().zip(ym) {
                *a += v;
            }
        }
        Ok(acc)
    }
}

/// Shared always-on MLP adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub mlp: ExpertMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MoeBlock {
    Standard(StandardMoe),
    MultiHead(MultiHeadMoe),
    Dense(DenseBlock),
}

impl MoeBlock {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Vec<TokenRoute>)> {
        match self {
            MoeBlock::Standard(b) => b.forward(tape, store, h),
            MoeBlock::MultiHead(b) => b.forward(tape, store, h),
            MoeBlock::Dense(b) => {
                let n = tape.value(h).rows();
                let y = b.mlp.forward(tape, store, h)?;
                let route = TokenRoute { heads: vec![HeadSelection { experts: vec![0], gates: vec![1.0] }] };
                Ok((y, vec![route; n]))
            }
        }
    }

    /// Replays a traced route on one state vector.
    pub fn composite_apply(&self, store: &ParamStore, route: &TokenRoute, h: &[f64]) -> Result<Vec<f64>> {
        match self {
            MoeBlock::MultiHead(b) => b.composite_apply(store, route, h),
            MoeBlock::Standard(b) => {
                let sel = route.heads.first().ok_or_else(|| Error::Contract("empty route".into()))?;
                b.bank.apply_selection(store, sel, h)
            }
            MoeBlock::Dense(b) => {
                let x = Tensor::new(vec![1, h.len()], h.to_vec())?;
                Ok(b.mlp.eval(store, &x)?.into_data())
            }
        }
    }

    /// Output for a fixed selection with gates recomputed by the current
    /// routers. With unchanged parameters this equals the live forward.
    pub fn replay(&self, store: &ParamStore, route: &TokenRoute, h: &[f64]) -> Result<Vec<f64>> {
        let banks: Vec<(&RoutedBank, &[f64])> = match self {
            MoeBlock::Dense(_) => return self.composite_apply(store, route, h),
            MoeBlock::Standard(b) => vec![(&b.bank, h)],
            MoeBlock::MultiHead(b) => {
                let dh = b.slice_width();
                b.heads.iter().enumerate().map(|(m, bank)| (bank, &h[m * dh..(m + 1) * dh])).collect()
            }
        };
        if route.heads.len() != banks.len() {
            return Err(Error::Contract(format!("route has {} heads, layer has {}", route.heads.len(), banks.len())));
        }
        let mut fresh = route.clone();
        for (sel, (bank, x)) in fresh.heads.iter_mut().zip(&banks) {
            sel.gates = bank.gates_for(store, x, &sel.experts)?;
        }
        self.composite_apply(store, &fresh, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            MoeBlock::Standard(b) => b.bank.param_ids(),
            MoeBlock::MultiHead(b) => b.heads.iter().flat_map(RoutedBank::param_ids).collect(),
            MoeBlock::Dense(b) => b.mlp.param_ids().to_vec(),
        }
    }

    /// Parameters touched by one token's forward pass.
    pub fn activated_params(&self) -> usize {
        match self {
            MoeBlock::Standard(b) => b.bank.activated_params(),
            MoeBlock::MultiHead(b) => b.heads.iter().map(RoutedBank::activated_params).sum(),
            MoeBlock::Dense(b) => b.mlp.num_params(),
        }
    }

    pub fn total_params(&self, store: &ParamStore) -> usize {
        store.num_values(&self.param_ids())
    }

    pub fn num_routing_heads(&self) -> usize {
        match self {
            MoeBlock::MultiHead(b) => b.heads.len(),
            _ => 1,
        }
    }

    pub fn route_space(&self) -> Result<u128> {
        match self {
            MoeBlock::Standard(b) => count_route_space(b.bank.num_experts, b.bank.top_k, 1),
            MoeBlock::MultiHead(b) => count_route_space(b.heads[0].num_experts, b.heads[0].top_k, b.heads.len()),
            MoeBlock::Dense(_) => Ok(1),
        }
    }
}

/// `C(K, k)^H`, the number of distinct routing tuples.
pub fn count_route_space(num_experts: usize, top_k: usize, heads: usize) -> Result<u128> {
    if top_k > num_experts || heads == 0 {
        return Err(Error::Contract(format!("need k <= K and H >= 1, got K={num_experts} k={top_k} H={heads}")));
    }
    let per_head = binomial(num_experts as u128, top_k as u128)?;
    let mut total: u128 = 1;
    for _ in 0..heads {
        total = total
            .checked_mul(per_head)
            .ok_or_else(|| Error::Numeric(format!("C({num_experts},{top_k})^{heads} overflows 128 bits")))?;
    }
    Ok(total)
}

fn binomial(n: u128, k: u128) -> Result<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc
            .checked_mul(n - i)
            .ok_or_else(|| Error::Numeric(format!("C({n},{k}) overflows 128 bits")))?
            / (i + 1);
    }
    Ok(acc)
}

/// Distinct routing tuples observed in a batch of traces.
pub fn distinct_tuples(routes: &[TokenRoute]) -> usize {
    routes.iter().map(TokenRoute::tuple).collect::<BTreeSet<_>>().len()
}
