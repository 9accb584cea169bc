//! Linear probes on router inputs, their decoding subspaces, and head-wise
//! importance by mean replacement.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::tensor::{log_sum_exp, softmax_in_place};
use crate::math::Tensor;
use crate::model::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    pub val_fraction: f64,
    /// Steps without a validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.1, l2: 1e-4, val_fraction: 0.2, patience: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub feature: String,
    pub layer: usize,
    /// `[|Y| x d]`.
    pub w: Tensor,
    pub b: Vec<f64>,
    pub steps: usize,
    pub l2: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.b.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.w.cols();
        (0..self.classes()).map(|k| self.b[k] + self.w.data()[k * d..(k + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn check_reps(reps: &Tensor, labels: &[usize]) -> Result<()> {
    if reps.shape().len() != 2 || reps.rows() != labels.len() {
        return Err(Error::Dimension(format!("representations {:?} for {} labels", reps.shape(), labels.len())));
    }
    Ok(())
}

fn loss_and_grad(
    w: &[f64],
    b: &[f64],
    reps: &Tensor,
    labels: &[usize],
    rows: &[usize],
    l2: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let (k, d) = (b.len(), reps.cols());
    let mut loss = 0.0;
    let mut gw_gb = grads;
    if let Some((gw, gb)) = gw_gb.as_mut() {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
    }
    let n = rows.len() as f64;
    let mut z = vec![0.0; k];
    for &r in rows {
        let x = reps.row(r);
        for c in 0..k {
            z[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
        loss += log_sum_exp(&z) - z[labels[r]];
        if let Some((gw, gb)) = gw_gb.as_mut() {
            softmax_in_place(&mut z);
            z[labels[r]] -= 1.0;
            for c in 0..k {
                gb[c] += z[c] / n;
                for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += z[c] * v / n;
                }
            }
        }
    }
    if let Some((gw, _)) = gw_gb.as_mut() {
        for (g, v) in gw.iter_mut().zip(w) {
            *g += 2.0 * l2 * v;
        }
    }
    loss / n + l2 * w.iter().map(|v| v * v).sum::<f64>()
}

fn accuracy_on(w: &[f64], b: &[f64], reps: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    let (k, d) = (b.len(), reps.cols());
    let hits = rows
        .iter()
        .filter(|&&r| {
            let x = reps.row(r);
            let z: Vec<f64> = (0..k).map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect();
            argmax(&z) == labels[r]
        })
        .count();
    hits as f64 / rows.len().max(1) as f64
}

/// Multinomial logistic regression on detached representations by full-batch
/// gradient descent with an L2 penalty. Parameters with the best validation
/// loss are kept.
pub fn train_probe(
    feature: &str,
    layer: usize,
    reps: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    check_reps(reps, labels)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {bad} outside {classes} classes")));
    }
    if labels.len() < 10 * classes {
        return Err(Error::DegenerateData(format!("{} samples for {classes} classes, need {}", labels.len(), 10 * classes)));
    }
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&y| seen[y] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateData(format!("feature {feature:?} has a single class")));
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = ((labels.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, labels.len() - 1);
    let (val, train) = idx.split_at(n_val);
    let d = reps.cols();
    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let (mut gw, mut gb) = (vec![0.0; classes * d], vec![0.0; classes]);
    let mut best = (f64::INFINITY, w.clone(), b.clone(), 0);
    let mut stale = 0;
    let mut steps = 0;
    for step in 0..cfg.steps {
        loss_and_grad(&w, &b, reps, labels, train, cfg.l2, Some((&mut gw, &mut gb)));
        for (p, g) in w.iter_mut().zip(&gw) {
            *p -= cfg.lr * g;
        }
        for (p, g) in b.iter_mut().zip(&gb) {
            *p -= cfg.lr * g;
        }
        steps = step + 1;
        let vl = loss_and_grad(&w, &b, reps, labels, val, 0.0, None);
        if !vl.is_finite() {
            return Err(Error::Numeric(format!("probe validation loss diverged at step {step}")));
        }
        if vl < best.0 {
            best = (vl, w.clone(), b.clone(), steps);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, w, b, _) = best;
    Ok(LinearProbe {
        feature: feature.to_string(),
        layer,
        train_accuracy: accuracy_on(&w, &b, reps, labels, train),
        val_accuracy: accuracy_on(&w, &b, reps, labels, val),
        w: Tensor::new(vec![classes, d], w)?,
        b,
        steps,
        l2: cfg.l2,
    })
}

/// Argmax accuracy, ties to the lowest class.
pub fn probe_accuracy(probe: &LinearProbe, reps: &Tensor, labels: &[usize]) -> Result<f64> {
    check_reps(reps, labels)?;
    if reps.cols() != probe.w.cols() {
        return Err(Error::Dimension(format!("probe width {} vs representations {}", probe.w.cols(), reps.cols())));
    }
    let rows: Vec<usize> = (0..labels.len()).collect();
    Ok(accuracy_on(probe.w.data(), &probe.b, reps, labels, &rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingSubspace {
    pub feature: String,
    pub layer: usize,
    /// Orthonormal columns, `[d x rank]`.
    pub basis: Tensor,
}

impl DecodingSubspace {
    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.rank(), self.basis.data())
    }

    /// Orthogonal projection of `v` onto the subspace.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!("vector of length {} in a {}-dim space", v.len(), self.dim())));
        }
        let q = self.matrix();
        let x = nalgebra::DVector::from_column_slice(v);
        Ok((&q * (q.transpose() * x)).as_slice().to_vec())
    }
}

/// Row space of `W`, at numerical rank with tolerance `1e-8 * sigma_max`.
pub fn row_space(feature: &str, layer: usize, w: &Tensor) -> Result<DecodingSubspace> {
    let (k, d) = (w.rows(), w.cols());
    let m = DMatrix::from_row_slice(k, d, w.data());
    let svd = m.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Numeric("SVD did not return right singular vectors".into()))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(Error::DegenerateData(format!("probe for {feature:?} has a zero weight matrix; subspace is empty")));
    }
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-8 * smax).collect();
    let mut basis = vec![0.0; d * keep.len()];
    for (c, &i) in keep.iter().enumerate() {
        for r in 0..d {
            basis[r * keep.len() + c] = vt[(i, r)];
        }
    }
    Ok(DecodingSubspace { feature: feature.to_string(), layer, basis: Tensor::new(vec![d, keep.len()], basis)? })
}

pub fn decoding_subspace(probe: &LinearProbe) -> Result<DecodingSubspace> {
    row_space(&probe.feature, probe.layer, &probe.w)
}

/// `||P_A P_B||_F^2 / min(rank_A, rank_B)`.
pub fn subspace_overlap(a: &DecodingSubspace, b: &DecodingSubspace) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("subspaces of R^{} and R^{}", a.dim(), b.dim())));
    }
    let m = a.matrix().transpose() * b.matrix();
    Ok((m.norm_squared() / a.rank().min(b.rank()) as f64).clamp(0.0, 1.0))
}

/// Router inputs split into a residual plus per-head additive blocks:
/// `h[n] = residual[n] + sum_m heads[n, m, :]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBlocks {
    pub residual: Tensor,
    /// `[N x H x d]`.
    pub heads: Tensor,
}

impl HeadBlocks {
    pub fn new(residual: Tensor, heads: Tensor) -> Result<Self> {
        let s = heads.shape();
        if s.len() != 3 || residual.shape().len() != 2 || s[0] != residual.rows() || s[2] != residual.cols() {
            return Err(Error::Dimension(format!("heads {:?} and residual {:?}", s, residual.shape())));
        }
        Ok(Self { residual, heads })
    }

    pub fn len(&self) -> usize {
        self.residual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_heads(&self) -> usize {
        self.heads.shape()[1]
    }

    fn block(&self, n: usize, m: usize) -> &[f64] {
        let (h, d) = (self.num_heads(), self.residual.cols());
        &self.heads.data()[(n * h + m) * d..(n * h + m + 1) * d]
    }

    /// Per-head dataset means, `[H][d]`.
    pub fn head_means(&self) -> Vec<Vec<f64>> {
        let (h, d) = (self.num_heads(), self.residual.cols());
        let mut mu = vec![vec![0.0; d]; h];
        for n in 0..self.len() {
            for (m, mm) in mu.iter_mut().enumerate() {
                for (a, v) in mm.iter_mut().zip(self.block(n, m)) {
                    *a += v;
                }
            }
        }
        let count = self.len().max(1) as f64;
        mu.iter_mut().flatten().for_each(|a| *a /= count);
        mu
    }

    /// Reassembled router inputs with head `ablate` replaced by `mean`.
    pub fn assemble(&self, ablate: Option<(usize, &[f64])>) -> Result<Tensor> {
        let d = self.residual.cols();
        let mut out = self.residual.data().to_vec();
        for n in 0..self.len() {
            let row = &mut out[n * d..(n + 1) * d];
            for m in 0..self.num_heads() {
                let src = match ablate {
                    Some((a, mu)) if a == m => mu,
                    _ => self.block(n, m),
                };
                row.iter_mut().zip(src).for_each(|(x, v)| *x += v);
            }
        }
        Tensor::new(vec![self.len(), d], out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadImportanceTable {
    pub feature: String,
    pub layer: usize,
    pub base_accuracy: f64,
    /// Accuracy drops, floored at zero.
    pub importance: Vec<f64>,
    pub shares: Vec<f64>,
    pub eps: f64,
}

pub const SHARE_EPS: f64 = 1e-8;

/// Accuracy drop when each head's block is replaced by `means[m]`. Shares
/// are `I_m / (sum I + eps)`; all-zero drops give uniform shares.
pub fn head_ablation_importance(
    probe: &LinearProbe,
    data: &HeadBlocks,
    labels: &[usize],
    means: &[Vec<f64>],
) -> Result<HeadImportanceTable> {
    if data.len() != labels.len() {
        return Err(Error::Dimension(format!("{} head rows for {} labels", data.len(), labels.len())));
    }
    let h = data.num_heads();
    if means.len() != h || means.iter().any(|m| m.len() != data.residual.cols()) {
        return Err(Error::Dimension(format!("{} head means for {h} heads", means.len())));
    }
    let base = probe_accuracy(probe, &data.assemble(None)?, labels)?;
    let importance = (0..h)
        .map(|m| Ok((base - probe_accuracy(probe, &data.assemble(Some((m, &means[m])))?, labels)?).max(0.0)))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = importance.iter().sum();
    let shares = if total == 0.0 {
        vec![1.0 / h as f64; h]
    } else {
        importance.iter().map(|i| i / (total + SHARE_EPS)).collect()
    };
    Ok(HeadImportanceTable { feature: probe.feature.clone(), layer: probe.layer, base_accuracy: base, importance, shares, eps: SHARE_EPS })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub feature: String,
    pub layer: usize,
    pub accuracy: f64,
    pub chance: f64,
    pub rank: usize,
    /// Overlap with every probed feature, in report order.
    pub overlaps: Vec<(String, f64)>,
    pub head_shares: Option<Vec<f64>>,
}

/// Chance level of the majority class.
pub fn majority_chance(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&y| counts[y] += 1);
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len().max(1) as f64
}

pub fn report(
    probes: &[LinearProbe],
    subspaces: &[DecodingSubspace],
    chances: &[f64],
    heads: &[Option<HeadImportanceTable>],
) -> Result<Vec<ProbeRow>> {
    if subspaces.len() != probes.len() || chances.len() != probes.len() || heads.len() != probes.len() {
        return Err(Error::Dimension("report inputs disagree in length".into()));
    }
    probes
        .iter()
        .zip(subspaces)
        .enumerate()
        .map(|(i, (p, s))| {
            let overlaps = subspaces.iter().map(|o| Ok((o.feature.clone(), subspace_overlap(s, o)?))).collect::<Result<_>>()?;
            Ok(ProbeRow {
                feature: p.feature.clone(),
                layer: p.layer,
                accuracy: p.val_accuracy,
                chance: chances[i],
                rank: s.rank(),
                overlaps,
                head_shares: heads[i].as_ref().map(|t| t.shares.clone()),
            })
        })
        .collect()
}
