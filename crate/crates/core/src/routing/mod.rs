//! Route statistics under the old-task distribution: composition mixing,
//! exposure mass and route-conditioned forgetting.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::FeatureComposition;
use crate::error::{Error, Result};
use crate::math::tensor::log_sum_exp;
use crate::math::Tensor;
use crate::model::{TokenRoute, ToyLm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Expert set of a single-router layer.
    Single,
    /// One head's expert set in a head-wise layer.
    PerHead,
    /// Tuple of expert sets across all heads.
    Tuple,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RouteId {
    Experts(Vec<usize>),
    Head { head: usize, experts: Vec<usize> },
    Tuple(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RouteKey {
    pub layer: usize,
    pub granularity: Granularity,
    pub id: RouteId,
}

impl RouteKey {
    pub fn label(&self) -> String {
        let sets = |v: &[Vec<usize>]| {
            v.iter()
                .map(|s| s.iter().map(|j| j.to_string()).collect::<Vec<_>>().join("+"))
                .collect::<Vec<_>>()
                .join("|")
        };
        match &self.id {
            RouteId::Experts(e) => sets(std::slice::from_ref(e)),
            RouteId::Head { head, experts } => format!("h{head}:{}", sets(std::slice::from_ref(experts))),
            RouteId::Tuple(t) => sets(t),
        }
    }
}

/// Keys a token contributes at one granularity. Expert sets are already
/// ascending in traces; they are re-sorted here so keys stay canonical.
pub fn route_keys(route: &TokenRoute, layer: usize, granularity: Granularity) -> Result<Vec<RouteKey>> {
    let sorted = |e: &[usize]| {
        let mut v = e.to_vec();
        v.sort_unstable();
        v
    };
    let heads = route.heads.len();
    let key = |id| RouteKey { layer, granularity, id };
    match granularity {
        Granularity::Single if heads == 1 => Ok(vec![key(RouteId::Experts(sorted(&route.heads[0].experts)))]),
        Granularity::Single => Err(Error::Contract(format!("single-route granularity on a {heads}-head trace"))),
        Granularity::PerHead => Ok(route
            .heads
            .iter()
            .enumerate()
            .map(|(head, s)| key(RouteId::Head { head, experts: sorted(&s.experts) }))
            .collect()),
        Granularity::Tuple => Ok(vec![key(RouteId::Tuple(route.heads.iter().map(|s| sorted(&s.experts)).collect()))]),
    }
}

/// One token's routing record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub task: usize,
    pub position: usize,
    pub composition: FeatureComposition,
    pub route_tuple: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
    pub per_token_loss: f64,
}

impl TraceRecord {
    pub fn route(&self) -> TokenRoute {
        TokenRoute {
            heads: self
                .route_tuple
                .iter()
                .zip(&self.gates)
                .map(|(e, g)| crate::model::HeadSelection { experts: e.clone(), gates: g.clone() })
                .collect(),
        }
    }
}

/// Live traces for cached router inputs.
pub fn trace_rows(
    model: &ToyLm,
    h: &Tensor,
    targets: &[usize],
    compositions: &[FeatureComposition],
    positions: &[usize],
    task: usize,
    step: u64,
) -> Result<Vec<TraceRecord>> {
    let n = targets.len();
    if h.rows() != n || compositions.len() != n || positions.len() != n {
        return Err(Error::Dimension(format!(
            "{} rows, {} targets, {} compositions, {} positions",
            h.rows(),
            n,
            compositions.len(),
            positions.len()
        )));
    }
    let (logits, routes) = model.block_eval(h.clone())?;
    Ok((0..n)
        .map(|r| {
            let row = logits.row(r);
            TraceRecord {
                step,
                task,
                position: positions[r],
                composition: compositions[r].clone(),
                route_tuple: routes[r].tuple(),
                gates: routes[r].heads.iter().map(|s| s.gates.clone()).collect(),
                per_token_loss: log_sum_exp(row) - row[targets[r]],
            }
        })
        .collect())
}

pub type RouteCounts = BTreeMap<RouteKey, BTreeMap<FeatureComposition, u64>>;

/// Exact composition counts per route.
pub fn collect_routes(traces: &[TraceRecord], layer: usize, granularity: Granularity) -> Result<RouteCounts> {
    let mut out = RouteCounts::new();
    for t in traces {
        for key in route_keys(&t.route(), layer, granularity)? {
            *out.entry(key).or_default().entry(t.composition.clone()).or_insert(0) += 1;
        }
    }
    Ok(out)
}

/// Inverse Simpson index `1 / sum p^2`.
pub fn neff(p: &[f64]) -> Result<f64> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("distribution sums to {total}, expected 1")));
    }
    Ok(1.0 / p.iter().map(|v| v * v).sum::<f64>())
}

fn normalise(counts: &BTreeMap<FeatureComposition, u64>) -> BTreeMap<FeatureComposition, f64> {
    let total: u64 = counts.values().sum();
    counts.iter().map(|(c, &n)| (c.clone(), n as f64 / total as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub route: RouteKey,
    pub counts: BTreeMap<FeatureComposition, u64>,
    pub p: BTreeMap<FeatureComposition, f64>,
    pub neff: f64,
    pub mass_old: f64,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub delta: Option<f64>,
}

impl RouteStats {
    pub fn tokens(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Per-route mixing and exposure from old-task traces, with `loss_before`
/// set to the traced per-token loss averaged over the route.
pub fn route_stats(traces: &[TraceRecord], layer: usize, granularity: Granularity) -> Result<Vec<RouteStats>> {
    let counts = collect_routes(traces, layer, granularity)?;
    let total: u64 = counts.values().flat_map(|c| c.values()).sum();
    if total == 0 {
        return Err(Error::DegenerateData("no traced tokens".into()));
    }
    let mut loss_sum: BTreeMap<&RouteKey, (f64, u64)> = BTreeMap::new();
    let keyed: Vec<Vec<RouteKey>> =
        traces.iter().map(|t| route_keys(&t.route(), layer, granularity)).collect::<Result<_>>()?;
    for (t, keys) in traces.iter().zip(&keyed) {
        for k in keys {
            let e = loss_sum.entry(k).or_insert((0.0, 0));
            e.0 += t.per_token_loss;
            e.1 += 1;
        }
    }
    counts
        .iter()
        .map(|(key, c)| {
            let p = normalise(c);
            let pv: Vec<f64> = p.values().copied().collect();
            let (ls, ln) = loss_sum[key];
            Ok(RouteStats {
                route: key.clone(),
                counts: c.clone(),
                neff: neff(&pv)?,
                p,
                mass_old: c.values().sum::<u64>() as f64 / total as f64,
                loss_before: Some(ls / ln as f64),
                loss_after: None,
                delta: None,
            })
        })
        .collect()
}

/// How routes are assigned when old-task tokens are re-evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rerouting {
    /// Tokens keep the expert selection recorded at the old parameters.
    Frozen,
    /// Tokens are routed by the parameters being evaluated.
    Live,
}

/// Per-token old-task losses under `model`. With [`Rerouting::Frozen`] each
/// row replays its traced selection, gates recomputed by the current routers.
pub fn old_token_losses(
    model: &ToyLm,
    h: &Tensor,
    targets: &[usize],
    traces: &[TraceRecord],
    mode: Rerouting,
) -> Result<Vec<f64>> {
    if h.rows() != targets.len() || traces.len() != targets.len() {
        return Err(Error::Dimension("rows, targets and traces disagree".into()));
    }
    match mode {
        Rerouting::Live => {
            let (logits, _) = model.block_eval(h.clone())?;
            Ok((0..targets.len()).map(|r| log_sum_exp(logits.row(r)) - logits.row(r)[targets[r]]).collect())
        }
        Rerouting::Frozen => {
            let u = model.store.value(model.unemb);
            let mut out = Vec::with_capacity(targets.len());
            for (r, t) in traces.iter().enumerate() {
                let hr = h.row(r);
                let y = model.block.replay(&model.store, &t.route(), hr)?;
                let z: Vec<f64> = hr.iter().zip(&y).map(|(a, b)| a + b).collect();
                let logits = Tensor::new(vec![1, z.len()], z)?.matmul(u)?;
                out.push(log_sum_exp(logits.data()) - logits.data()[targets[r]]);
            }
            Ok(out)
        }
    }
}

/// Mean loss per route of the per-token losses, grouped by the traced keys.
pub fn route_old_loss(
    traces: &[TraceRecord],
    losses: &[f64],
    layer: usize,
    granularity: Granularity,
) -> Result<BTreeMap<RouteKey, f64>> {
    if traces.len() != losses.len() {
        return Err(Error::Dimension(format!("{} traces, {} losses", traces.len(), losses.len())));
    }
    let mut acc: BTreeMap<RouteKey, (f64, u64)> = BTreeMap::new();
    for (t, &l) in traces.iter().zip(losses) {
        for k in route_keys(&t.route(), layer, granularity)? {
            let e = acc.entry(k).or_insert((0.0, 0));
            e.0 += l;
            e.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Fills `loss_after` and `delta = after - before` (positive = forgetting).
pub fn delta_l(stats: &mut [RouteStats], after: &BTreeMap<RouteKey, f64>) -> Result<()> {
    for s in stats.iter_mut() {
        let before = s
            .loss_before
            .ok_or_else(|| Error::State(format!("route {} has no old-parameter loss", s.route.label())))?;
        let a = *after
            .get(&s.route)
            .ok_or_else(|| Error::State(format!("route {} has no new-parameter loss", s.route.label())))?;
        s.loss_after = Some(a);
        s.delta = Some(a - before);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassBin {
    pub routes: usize,
    pub mass: f64,
    pub neff_min: f64,
    pub neff_max: f64,
    pub mean_neff: f64,
    pub mean_delta: f64,
    /// Standard error over routes; zero for single-route bins.
    pub se_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub requested_bins: usize,
    pub bins: Vec<Option<MassBin>>,
    pub routes: usize,
    /// Route-level rank correlation between N_eff and the loss delta,
    /// `(rho, p)`. `None` with fewer than three routes.
    pub spearman: Option<(f64, f64)>,
    /// Rank correlation of bin mean N_eff against bin mean delta over the
    /// non-empty bins, `(rho, p)`. `None` with fewer than three bins.
    pub bin_spearman: Option<(f64, f64)>,
}

/// Routes sorted by N_eff and cut at cumulative-mass points `i / n`. A route
/// belongs to the bin holding the midpoint of its mass interval, so a route
/// heavier than `1 / n` can leave neighbouring bins empty.
pub fn mass_quantile_bins(stats: &[RouteStats], n_bins: usize) -> Result<BinSummary> {
    if stats.is_empty() || n_bins == 0 {
        return Err(Error::Contract("need routes and at least one bin".into()));
    }
    let total: f64 = stats.iter().map(|s| s.mass_old).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("route masses sum to {total}, expected 1")));
    }
    let n = if n_bins > stats.len() {
        warn!("{n_bins} bins requested for {} routes; using {}", stats.len(), stats.len());
        stats.len()
    } else {
        n_bins
    };
    let deltas: Vec<f64> = stats
        .iter()
        .map(|s| s.delta.ok_or_else(|| Error::State(format!("route {} has no loss delta", s.route.label()))))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[a].neff.total_cmp(&stats[b].neff).then_with(|| stats[a].route.cmp(&stats[b].route)));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut cum = 0.0;
    for &i in &order {
        let mid = cum + stats[i].mass_old / 2.0;
        cum += stats[i].mass_old;
        members[((mid * n as f64) as usize).min(n - 1)].push(i);
    }
    let bins = members
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return None;
            }
            let k = idx.len() as f64;
            let mean_delta = idx.iter().map(|&i| deltas[i]).sum::<f64>() / k;
            let se_delta = if idx.len() > 1 {
                let var = idx.iter().map(|&i| (deltas[i] - mean_delta).powi(2)).sum::<f64>() / (k - 1.0);
                (var / k).sqrt()
            } else {
                0.0
            };
            Some(MassBin {
                routes: idx.len(),
                mass: idx.iter().map(|&i| stats[i].mass_old).sum(),
                neff_min: idx.iter().map(|&i| stats[i].neff).fold(f64::INFINITY, f64::min),
                neff_max: idx.iter().map(|&i| stats[i].neff).fold(f64::NEG_INFINITY, f64::max),
                mean_neff: idx.iter().map(|&i| stats[i].neff).sum::<f64>() / k,
                mean_delta,
                se_delta,
            })
        })
        .collect::<Vec<Option<MassBin>>>();
    let neffs: Vec<f64> = stats.iter().map(|s| s.neff).collect();
    let route_rho = if stats.len() >= 3 { Some(spearman(&neffs, &deltas)?) } else { None };
    let filled: Vec<&MassBin> = bins.iter().flatten().collect();
    let bin_spearman = if filled.len() >= 3 {
        let x: Vec<f64> = filled.iter().map(|b| b.mean_neff).collect();
        let y: Vec<f64> = filled.iter().map(|b| b.mean_delta).collect();
        Some(self::spearman(&x, &y)?)
    } else {
        None
    };
    Ok(BinSummary { requested_bins: n_bins, bins, routes: stats.len(), spearman: route_rho, bin_spearman })
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman's rho with a two-sided p-value from the t approximation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Contract(format!("need two equal samples of at least 3, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if rho.abs() >= 1.0 {
        return Ok((rho, 0.0));
    }
    let df = n - 2.0;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    Ok((rho, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// `sum_r mass_old(r) * N_eff(r)` for one layer and granularity.
pub fn layer_mass_weighted_neff(stats: &[RouteStats]) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Contract("no routes in layer".into()));
    }
    let total: f64 = stats.iter().map(|s| s.mass_old).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("route masses sum to {total}, expected 1")));
    }
    Ok(stats.iter().map(|s| s.mass_old * s.neff).sum())
}

/// Route statistics for one old-to-new transition on old-task rows: traces
/// and `loss_before` under `old`, `loss_after` under `new`.
#[allow(clippy::too_many_arguments)]
pub fn transition_routes(
    old: &ToyLm,
    new: &ToyLm,
    h: &Tensor,
    targets: &[usize],
    compositions: &[FeatureComposition],
    positions: &[usize],
    task: usize,
    granularity: Granularity,
    mode: Rerouting,
) -> Result<Vec<RouteStats>> {
    let traces = trace_rows(old, h, targets, compositions, positions, task, 0)?;
    let mut stats = route_stats(&traces, 0, granularity)?;
    let after = route_old_loss(&traces, &old_token_losses(new, h, targets, &traces, mode)?, 0, granularity)?;
    delta_l(&mut stats, &after)?;
    Ok(stats)
}

/// Concatenates per-transition routes, each transition carrying equal total
/// mass, so the pooled masses again sum to one.
pub fn pool_routes(groups: Vec<Vec<RouteStats>>) -> Result<Vec<RouteStats>> {
    let n = groups.iter().filter(|g| !g.is_empty()).count();
    if n == 0 {
        return Err(Error::DegenerateData("no routes to pool".into()));
    }
    Ok(groups
        .into_iter()
        .flatten()
        .map(|mut s| {
            s.mass_old /= n as f64;
            s
        })
        .collect())
}

/// One row of the route table export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRow {
    pub layer: usize,
    pub granularity: Granularity,
    pub route: String,
    pub mass_old: f64,
    pub neff: f64,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub delta: Option<f64>,
}

pub fn route_rows(stats: &[RouteStats]) -> Vec<RouteRow> {
    stats
        .iter()
        .map(|s| RouteRow {
            layer: s.route.layer,
            granularity: s.route.granularity,
            route: s.route.label(),
            mass_old: s.mass_old,
            neff: s.neff,
            loss_before: s.loss_before,
            loss_after: s.loss_after,
            delta: s.delta,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadSelection;

    fn rec(comp: usize, tuple: Vec<Vec<usize>>, loss: f64) -> TraceRecord {
        let gates = tuple.iter().map(|s| vec![1.0 / s.len() as f64; s.len()]).collect();
        TraceRecord { step: 0, task: 0, position: 1, composition: FeatureComposition(vec![comp]), route_tuple: tuple, gates, per_token_loss: loss }
    }

    #[test]
    fn neff_hand_cases() {
        assert_eq!(neff(&[1.0]).unwrap(), 1.0);
        assert!((neff(&[0.25; 4]).unwrap() - 4.0).abs() < 1e-12);
        assert!((neff(&[0.5, 0.25, 0.25]).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!(matches!(neff(&[0.5, 0.2]), Err(Error::Contract(_))));
    }

    #[test]
    fn mass_weighted_hand_case() {
        let mk = |mass, n| RouteStats {
            route: RouteKey { layer: 0, granularity: Granularity::Single, id: RouteId::Experts(vec![n]) },
            counts: BTreeMap::new(),
            p: BTreeMap::new(),
            neff: n as f64,
            mass_old: mass,
            loss_before: None,
            loss_after: None,
            delta: None,
        };
        assert!((layer_mass_weighted_neff(&[mk(0.75, 2), mk(0.25, 4)]).unwrap() - 2.5).abs() < 1e-12);
        assert!(layer_mass_weighted_neff(&[]).is_err());
    }

    #[test]
    fn per_head_and_tuple_keys() {
        let r = TokenRoute {
            heads: vec![
                HeadSelection { experts: vec![3], gates: vec![1.0] },
                HeadSelection { experts: vec![0], gates: vec![1.0] },
            ],
        };
        assert_eq!(route_keys(&r, 0, Granularity::PerHead).unwrap().len(), 2);
        assert_eq!(route_keys(&r, 0, Granularity::Tuple).unwrap().len(), 1);
        assert!(route_keys(&r, 0, Granularity::Single).is_err());
    }

    #[test]
    fn single_route_holds_the_marginal() {
        let traces: Vec<_> = [0, 0, 1, 2].iter().map(|&c| rec(c, vec![vec![0]], 1.0)).collect();
        let s = route_stats(&traces, 0, Granularity::Single).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].p[&FeatureComposition(vec![0])], 0.5);
        assert!((s[0].neff - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[0].mass_old, 1.0);
    }

    #[test]
    fn spearman_perfect_and_ties() {
        let (r, p) = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!((r, p), (1.0, 0.0));
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        let (r, _) = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
        assert!(r > 0.8 && r < 1.0);
    }
}
