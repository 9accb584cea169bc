//! Post-hoc studies of a finished run: probes and head importance on router
//! inputs, gradient coherence, and route-level forgetting.

use serde::{Deserialize, Serialize};

use super::config::Arch;
use super::runner::{row_compositions, AnalysisRows, Experiment, SequenceOutcome};
use crate::error::{Error, Result};
use crate::grads::{permutation_null, row_gradients, within_between_study, SplitStudy};
use crate::math::Tensor;
use crate::probes::{
    decoding_subspace, head_ablation_importance, majority_chance, report, train_probe, HeadBlocks, HeadImportanceTable,
    LinearProbe, ProbeConfig, ProbeRow,
};
use crate::routing::{
    layer_mass_weighted_neff, mass_quantile_bins, pool_routes, route_rows, transition_routes, BinSummary, Granularity,
    Rerouting, RouteRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStudy {
    pub task: usize,
    pub rows: Vec<ProbeRow>,
    pub probes: Vec<LinearProbe>,
    pub heads: Vec<HeadImportanceTable>,
}

/// Probes every feature on backbone router inputs of `sequences` held-out
/// sequences of `task`, then ablates attention heads one at a time.
pub fn probe_study(exp: &Experiment, task: usize, sequences: usize, cfg: &ProbeConfig) -> Result<ProbeStudy> {
    let rows = exp.rows.get(task).ok_or_else(|| Error::Index(format!("task {task} out of range")))?;
    let start = exp.tasks[task].def.sequences;
    let seqs = (start..start + sequences).map(|i| exp.grammar.sequence(task, i)).collect::<Result<Vec<_>>>()?;
    let comps = row_compositions(&exp.grammar, &seqs, &exp.positions, &rows.stats)?;
    let d = exp.backbone.config.d_model;
    let (mut h, mut residual, mut contrib) = (Vec::new(), Vec::new(), Vec::new());
    let mut heads = 0;
    for s in &seqs {
        let (full, x, dec) = exp.backbone.router_input_decomposed(&s.tokens)?;
        heads = dec.contributions.shape()[1];
        for &p in &exp.positions {
            h.extend_from_slice(full.row(p));
            residual.extend_from_slice(x.row(p));
            contrib.extend_from_slice(&dec.contributions.data()[p * heads * d..(p + 1) * heads * d]);
        }
    }
    let n = comps.len();
    let reps = Tensor::new(vec![n, d], h)?;
    let blocks = HeadBlocks::new(Tensor::new(vec![n, d], residual)?, Tensor::new(vec![n, heads, d], contrib)?)?;
    let means = blocks.head_means();
    let spec = &exp.grammar.spec;
    let (mut probes, mut subspaces, mut chances, mut tables) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (f, def) in spec.features.iter().enumerate() {
        let labels: Vec<usize> = comps.iter().map(|c| c.0[f]).collect();
        let probe = train_probe(&def.name, 0, &reps, &labels, def.size, cfg)?;
        subspaces.push(decoding_subspace(&probe)?);
        chances.push(majority_chance(&labels, def.size));
        tables.push(head_ablation_importance(&probe, &blocks, &labels, &means)?);
        probes.push(probe);
    }
    let wrapped: Vec<Option<HeadImportanceTable>> = tables.iter().cloned().map(Some).collect();
    let rows = report(&probes, &subspaces, &chances, &wrapped)?;
    Ok(ProbeStudy { task, rows, probes, heads: tables })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradStudy {
    pub arch: Arch,
    pub task: usize,
    pub samples: usize,
    pub study: SplitStudy,
    pub null: SplitStudy,
}

/// Block-parameter gradients on the first task's training rows, at the
/// checkpoint taken after that task.
pub fn grad_study(exp: &Experiment, outcome: &SequenceOutcome, max_rows: usize, seed: u64, bins: usize) -> Result<GradStudy> {
    let arch = outcome.summary.arch;
    let task = outcome.summary.order[0];
    let mut model = exp.build_model(arch)?;
    model.restore(&outcome.checkpoints[0])?;
    let rows = &exp.rows[task];
    let cache = rows.train.as_ref().ok_or_else(|| Error::State("gradient study needs cached rows (frozen backbone)".into()))?;
    let n = max_rows.min(cache.targets.len());
    let samples = row_gradients(&model, &cache.h.slice_rows(0, n)?, &cache.targets[..n], &rows.train_comps[..n])?;
    let study = within_between_study(&samples, seed, bins)?;
    let null = permutation_null(&samples, seed, bins)?;
    Ok(GradStudy { arch, task, samples: n, study, null })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRoutes {
    /// Old task whose rows are re-evaluated.
    pub task: usize,
    /// Task trained in this transition.
    pub next: usize,
    pub routes: usize,
    pub mass_weighted_neff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStudy {
    pub arch: Arch,
    pub granularity: Granularity,
    pub rerouting: Rerouting,
    pub transitions: Vec<TransitionRoutes>,
    /// Mass-weighted N_eff of the pooled routes; each transition has equal mass.
    pub pooled_neff: f64,
    pub bins: BinSummary,
    pub routes: Vec<RouteRow>,
}

pub fn granularity_for(arch: Arch) -> Granularity {
    match arch {
        Arch::Mhmoe => Granularity::Tuple,
        _ => Granularity::Single,
    }
}

/// Route statistics for every consecutive transition `w_j -> w_{j+1}` on
/// unseen rows of task `order[j]`. `analysis` is indexed by task id.
pub fn route_study(
    exp: &Experiment,
    outcome: &SequenceOutcome,
    analysis: &[AnalysisRows],
    n_bins: usize,
    rerouting: Rerouting,
) -> Result<RouteStudy> {
    let arch = outcome.summary.arch;
    if arch == Arch::Dense {
        return Err(Error::Config("route study needs a routed architecture".into()));
    }
    let granularity = granularity_for(arch);
    let order = &outcome.summary.order;
    let (mut old, mut new) = (exp.build_model(arch)?, exp.build_model(arch)?);
    let mut groups = Vec::new();
    let mut transitions = Vec::new();
    for j in 0..order.len() - 1 {
        old.restore(&outcome.checkpoints[j])?;
        new.restore(&outcome.checkpoints[j + 1])?;
        let task = order[j];
        let rows = analysis.get(task).ok_or_else(|| Error::Index(format!("no analysis rows for task {task}")))?;
        let stats = transition_routes(&old, &new, &rows.cache.h, &rows.cache.targets, &rows.compositions, &rows.positions, task, granularity, rerouting)?;
        transitions.push(TransitionRoutes { task, next: order[j + 1], routes: stats.len(), mass_weighted_neff: layer_mass_weighted_neff(&stats)? });
        groups.push(stats);
    }
    let pooled = pool_routes(groups)?;
    Ok(RouteStudy {
        arch,
        granularity,
        rerouting,
        pooled_neff: layer_mass_weighted_neff(&pooled)?,
        bins: mass_quantile_bins(&pooled, n_bins)?,
        routes: route_rows(&pooled),
        transitions,
    })
}
