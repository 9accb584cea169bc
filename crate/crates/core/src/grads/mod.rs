//! Composition-conditioned gradient directions: within-composition
//! coherence against cross-composition alignment.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureComposition;
use crate::error::{Error, Result};
use crate::math::{ParamId, Tape, Tensor};
use crate::model::ToyLm;

pub const MIN_SUPPORT: usize = 20;
pub const MAX_PAIRS: usize = 2000;
pub const DEFAULT_EPS: f64 = 1e-12;

/// Parameter blocks whose gradients can be sampled.
pub const BLOCKS: [&str; 4] = ["block", "attention", "embedding", "unembedding"];

pub fn block_ids(model: &ToyLm, block: &str) -> Result<Vec<ParamId>> {
    match block {
        "block" => Ok(model.block_param_ids()),
        "attention" => Ok(model.attn.param_ids()),
        "embedding" => Ok(vec![model.emb, model.pos]),
        "unembedding" => Ok(vec![model.unemb]),
        other => Err(Error::Config(format!("unknown parameter block {other:?}; expected one of {BLOCKS:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub composition: FeatureComposition,
    pub grad: Vec<f64>,
    pub norm: f64,
}

impl GradSample {
    pub fn new(composition: FeatureComposition, grad: Vec<f64>) -> Result<Self> {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient entry".into()));
        }
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { composition, grad, norm })
    }
}

/// Gradient of the next-token loss at `position` with respect to `block`.
/// Frozen parameters still receive gradients here: the model is cloned with
/// every parameter trainable.
pub fn token_gradient(
    model: &ToyLm,
    tokens: &[usize],
    position: usize,
    block: &str,
    composition: FeatureComposition,
) -> Result<GradSample> {
    let ids = block_ids(model, block)?;
    let mut m = model.clone();
    m.set_freeze_backbone(false);
    m.store.clear_grad();
    let mut tape = Tape::new();
    let loss = m.masked_loss(&mut tape, tokens, &[position])?;
    tape.backward(loss, &mut m.store)?;
    GradSample::new(composition, m.store.flat_grad(&ids))
}

/// Block-parameter gradients of single cached rows, one sample per row.
pub fn row_gradients(
    model: &ToyLm,
    h: &Tensor,
    targets: &[usize],
    compositions: &[FeatureComposition],
) -> Result<Vec<GradSample>> {
    if h.rows() != targets.len() || compositions.len() != targets.len() {
        return Err(Error::Dimension("rows, targets and compositions disagree".into()));
    }
    let ids = model.block_param_ids();
    let mut m = model.clone();
    (0..targets.len())
        .map(|r| {
            m.store.clear_grad();
            let mut tape = Tape::new();
            let (loss, _) = m.block_loss(&mut tape, h.slice_rows(r, 1)?, &targets[r..=r])?;
            tape.backward(loss, &mut m.store)?;
            GradSample::new(compositions[r].clone(), m.store.flat_grad(&ids))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDirection {
    pub composition: FeatureComposition,
    pub vector: Vec<f64>,
    pub count: usize,
    pub eps: f64,
}

impl MeanDirection {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn mean_of(samples: &[&GradSample], eps: f64) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::Contract("mean direction of an empty set".into()))?;
    let mut v = vec![0.0; first.grad.len()];
    for s in samples {
        if s.grad.len() != v.len() {
            return Err(Error::Dimension(format!("gradient lengths {} and {}", s.grad.len(), v.len())));
        }
        let w = 1.0 / (s.norm + eps);
        for (a, g) in v.iter_mut().zip(&s.grad) {
            *a += g * w;
        }
    }
    let n = samples.len() as f64;
    v.iter_mut().for_each(|a| *a /= n);
    Ok(v)
}

/// Mean of unit-normalised gradients of one composition.
pub fn mean_direction(samples: &[GradSample], eps: f64) -> Result<MeanDirection> {
    let refs: Vec<&GradSample> = samples.iter().collect();
    let vector = mean_of(&refs, eps)?;
    Ok(MeanDirection { composition: samples[0].composition.clone(), vector, count: samples.len(), eps })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector is undefined".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn comp_cosine(a: &MeanDirection, b: &MeanDirection) -> Result<f64> {
    cosine(&a.vector, &b.vector)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub within: Vec<u64>,
    pub between: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[-1, 1]`; the last bin is closed.
    pub fn new(bins: usize, within: &[f64], between: &[f64]) -> Self {
        let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0; bins];
            for &x in xs {
                c[(((x + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1)] += 1;
            }
            c
        };
        Self { edges, within: count(within), between: count(between) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStudy {
    pub compositions: usize,
    pub excluded: Vec<FeatureComposition>,
    pub within: Vec<f64>,
    pub between: Vec<f64>,
    pub mean_within: f64,
    pub mean_between: f64,
    pub gap: f64,
    pub histogram: Histogram,
}

/// Split-half agreement of composition mean directions against cross-
/// composition agreement.
///
/// Each supported composition is split at random into halves `A` and `B`.
/// Within values are `cos(A_c, B_c)`; between values are `cos(A_c1, B_c2)`
/// over sampled pairs `c1 != c2`, so both sides compare means of the same
/// sample sizes and a label shuffle gives a gap near zero.
pub fn within_between_study(samples: &[GradSample], seed: u64, bins: usize) -> Result<SplitStudy> {
    let mut groups: BTreeMap<&FeatureComposition, Vec<&GradSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.composition).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut excluded = Vec::new();
    let mut halves: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (comp, mut members) in groups {
        if members.len() < MIN_SUPPORT {
            excluded.push(comp.clone());
            continue;
        }
        members.shuffle(&mut rng);
        let (a, b) = members.split_at(members.len() / 2);
        let (ma, mb) = (mean_of(a, DEFAULT_EPS)?, mean_of(b, DEFAULT_EPS)?);
        if ma.iter().all(|&v| v == 0.0) || mb.iter().all(|&v| v == 0.0) {
            excluded.push(comp.clone());
            continue;
        }
        halves.push((ma, mb));
    }
    if !excluded.is_empty() {
        warn!("{} compositions excluded (fewer than {MIN_SUPPORT} samples or zero gradients)", excluded.len());
    }
    if halves.len() < 5 {
        return Err(Error::DegenerateData(format!("{} supported compositions, need at least 5", halves.len())));
    }
    let within = halves.iter().map(|(a, b)| cosine(a, b)).collect::<Result<Vec<_>>>()?;
    let c = halves.len();
    let mut pairs: Vec<(usize, usize)> = (0..c).flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    if pairs.len() > MAX_PAIRS {
        pairs.shuffle(&mut rng);
        pairs.truncate(MAX_PAIRS);
        pairs.sort_unstable();
    }
    let between = pairs.iter().map(|&(i, j)| cosine(&halves[i].0, &halves[j].1)).collect::<Result<Vec<_>>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_within, mean_between) = (mean(&within), mean(&between));
    Ok(SplitStudy {
        compositions: c,
        excluded,
        histogram: Histogram::new(bins, &within, &between),
        gap: mean_within - mean_between,
        mean_within,
        mean_between,
        within,
        between,
    })
}

/// The same study after a seeded shuffle of composition labels.
pub fn permutation_null(samples: &[GradSample], seed: u64, bins: usize) -> Result<SplitStudy> {
    let mut labels: Vec<FeatureComposition> = samples.iter().map(|s| s.composition.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    labels.shuffle(&mut rng);
    let shuffled: Vec<GradSample> = samples
        .iter()
        .zip(labels)
        .map(|(s, c)| GradSample { composition: c, grad: s.grad.clone(), norm: s.norm })
        .collect();
    within_between_study(&shuffled, rng.gen(), bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(i: usize) -> FeatureComposition {
        FeatureComposition(vec![i])
    }

    #[test]
    fn single_sample_is_unit() {
        let d = mean_direction(&[GradSample::new(comp(0), vec![3.0, 4.0]).unwrap()], DEFAULT_EPS).unwrap();
        assert!((d.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn opposite_samples_cancel() {
        let s = [GradSample::new(comp(0), vec![1.0, 2.0]).unwrap(), GradSample::new(comp(0), vec![-1.0, -2.0]).unwrap()];
        assert!(mean_direction(&s, DEFAULT_EPS).unwrap().norm() < 1e-12);
        assert!(mean_direction(&[], DEFAULT_EPS).is_err());
    }

    #[test]
    fn cosine_extremes() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn constant_gradients_are_degenerate_ones() {
        let samples: Vec<_> = (0..6).flat_map(|c| (0..20).map(move |_| GradSample::new(comp(c), vec![1.0, 1.0]).unwrap())).collect();
        let s = within_between_study(&samples, 0, 10).unwrap();
        assert!((s.mean_within - 1.0).abs() < 1e-12 && (s.mean_between - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_compositions_are_excluded() {
        let mut samples: Vec<_> = (0..5).flat_map(|c| (0..20).map(move |_| GradSample::new(comp(c), vec![1.0, c as f64]).unwrap())).collect();
        samples.push(GradSample::new(comp(9), vec![1.0, 0.0]).unwrap());
        let s = within_between_study(&samples, 0, 10).unwrap();
        assert_eq!((s.compositions, s.excluded.len()), (5, 1));
        samples.truncate(80);
        assert!(matches!(within_between_study(&samples, 0, 10), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn unknown_block_is_rejected() {
        let cfg = crate::model::ModelConfig {
            vocab: 8,
            d_model: 4,
            max_len: 4,
            attn_heads: 1,
            block: crate::model::BlockConfig::Dense { hidden: 4 },
        };
        let m = ToyLm::new(cfg, 0).unwrap();
        assert!(matches!(token_gradient(&m, &[1, 2, 3], 0, "bogus", comp(0)), Err(Error::Config(_))));
    }
}
